#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "lcbm/errors.hpp"
#include "lcbm/toy.hpp"

using namespace lcbm;
namespace fs = std::filesystem;

namespace {

const DigitSet& digits() {
  static const DigitSet d = load_digit_dir(fs::path(LCBM_SOURCE_DIR) / "data" / "digits");
  return d;
}

ToyConfig small_config() {
  ToyConfig c;
  c.embed_dim = 8;
  c.conv1 = 4;
  c.conv2 = 8;
  c.batch_size = 16;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("digit data loads and verifies") {
  const auto& d = digits();
  CHECK(d.size() == 10000);
  CHECK(d.rows == 28);
  CHECK(d.cols == 28);
  const Image img = d.image(0);
  const auto [lo, hi] = std::minmax_element(img.tensor().data().begin(), img.tensor().data().end());
  CHECK(*lo >= 0.0);
  CHECK(*hi <= 1.0);
  CHECK(*hi > 0.5);
  CHECK_THROWS_AS(d.image(10000), PreconditionError);
}

TEST_CASE("checksum mismatch and missing files are reported") {
  const auto dir = fs::temp_directory_path() / "lcbm_toy_sums";
  fs::remove_all(dir);
  fs::create_directories(dir);
  { std::ofstream(dir / "a.bin") << "hello"; }
  {
    std::ofstream(dir / "SHA256SUMS")
        << "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824  a.bin\n";
  }
  CHECK_NOTHROW(verify_sha256sums(dir));
  { std::ofstream(dir / "a.bin") << "hellO"; }
  CHECK_THROWS_AS(verify_sha256sums(dir), IoError);
  fs::remove(dir / "a.bin");
  CHECK_THROWS_AS(verify_sha256sums(dir), IoError);
  fs::remove_all(dir);
}

TEST_CASE("split keeps the test pool disjoint and balanced") {
  const auto s = split_digits(digits(), 100);
  std::set<std::size_t> test;
  for (std::size_t d = 0; d < 10; ++d) {
    CHECK(s.test[d].size() == 100);
    for (auto i : s.test[d]) {
      CHECK(digits().labels[i] == d);
      test.insert(i);
    }
  }
  CHECK(test.size() == 1000);
  CHECK(s.train.size() == 9000);
  for (auto i : s.train) CHECK_FALSE(test.count(i));
  CHECK_THROWS_AS(split_digits(digits(), 5000), PreconditionError);
}

TEST_CASE("composites carry the true digit among three distinct candidates") {
  const auto s = split_digits(digits(), 100);
  const auto a = build_dataset(digits(), s.train, 300, 9);
  const auto b = build_dataset(digits(), s.train, 300, 9);
  std::array<std::size_t, 3> slot_hits{};
  for (std::size_t n = 0; n < a.size(); ++n) {
    CHECK(a[n].sources == b[n].sources);
    CHECK(a[n].candidates == b[n].candidates);
    std::size_t label = 0;
    for (std::size_t p = 0; p < 4; ++p) {
      CHECK(a[n].patch_digits[p] == digits().labels[a[n].sources[p]]);
      const auto& c = a[n].candidates[p];
      CHECK(std::set<std::uint8_t>(c.begin(), c.end()).size() == 3);
      const auto it = std::find(c.begin(), c.end(), a[n].patch_digits[p]);
      REQUIRE(it != c.end());
      ++slot_hits[static_cast<std::size_t>(it - c.begin())];
      label = label * 10 + a[n].patch_digits[p];
    }
    CHECK(a[n].label == label);
    CHECK(a[n].label < kToyClasses);
  }
  for (auto h : slot_hits) CHECK(h > 300);  // 1200 placements, roughly a third each

  const Image img = compose_image(a[0], digits());
  CHECK(img.height() == 56);
  CHECK(img.width() == 56);
  for (std::size_t p = 0; p < 4; ++p) {
    const Image q = quadrant(img, p);
    CHECK(q.tensor().data() == digits().image(a[0].sources[p]).tensor().data());
  }
}

TEST_CASE("tuple loss equals cross-entropy over all 10^4 classes") {
  const auto s = split_digits(digits(), 100);
  const auto data = build_dataset(digits(), s.train, 3, 4);
  const ToyModel model(small_config(), 5);
  for (const auto& sample : data) {
    const Image img = compose_image(sample, digits());
    std::array<Tensor, 4> terms;
    for (std::size_t p = 0; p < 4; ++p)
      terms[p] = model.position_logits(quadrant(img, p), sample.candidates[p], p).value();
    std::vector<double> logits(kToyClasses);
    for (std::size_t c = 0; c < kToyClasses; ++c)
      logits[c] = terms[0][c / 1000] + terms[1][c / 100 % 10] + terms[2][c / 10 % 10] +
                  terms[3][c % 10];
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double l : logits) z += std::exp(l - mx);
    const double brute = -(logits[sample.label] - mx - std::log(z));
    CHECK(model.loss(sample, digits()).value()[0] == doctest::Approx(brute).epsilon(1e-10));
    const auto best = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) -
                                               logits.begin());
    CHECK(model.predict(sample, digits()) == best);
  }
}

TEST_CASE("zero epochs leave the prototypes untouched; training lowers the loss") {
  const auto s = split_digits(digits(), 100);
  const auto data = build_dataset(digits(), s.train, 100, 6);
  auto cfg = small_config();
  cfg.epochs = 0;
  ToyModel model(cfg, 7);
  const Tensor before = model.prototypes().value();
  train_toy(model, data, digits(), cfg);
  CHECK(model.prototypes().value().data() == before.data());

  const double loss0 = mean_toy_loss(model, data, digits());
  cfg.epochs = 1;
  std::size_t batches = 0;
  const auto records = train_toy(model, data, digits(), cfg, [&](std::size_t, double l) {
    CHECK(std::isfinite(l));
    ++batches;
  });
  CHECK(batches == 7);
  REQUIRE(records.size() == 1);
  CHECK(mean_toy_loss(model, data, digits()) < loss0);
  CHECK(model.prototypes().value().data() != before.data());
}

TEST_CASE("training is deterministic across thread counts") {
  const auto s = split_digits(digits(), 100);
  const auto data = build_dataset(digits(), s.train, 40, 2);
  auto cfg = small_config();
  ToyModel a(cfg, 1), b(cfg, 1);
  train_toy(a, data, digits(), cfg);
  cfg.threads = 4;
  train_toy(b, data, digits(), cfg);
  CHECK(a.prototypes().value().data() == b.prototypes().value().data());
}

TEST_CASE("alignment histogram conserves counts and rewards planted prototypes") {
  const auto& d = digits();
  const auto s = split_digits(d, 50);
  // Embedding = raw pixels; prototypes = per-digit mean image of the train pool.
  const auto embed = [](const Image& img) { return img.tensor(); };
  Tensor protos({10, 784});
  std::array<std::size_t, 10> n{};
  for (auto i : s.train) {
    const Tensor t = d.image(i).tensor();
    for (std::size_t j = 0; j < 784; ++j) protos(d.labels[i], j) += t[j];
    ++n[d.labels[i]];
  }
  for (std::size_t k = 0; k < 10; ++k)
    for (std::size_t j = 0; j < 784; ++j) protos(k, j) /= static_cast<double>(n[k]);
  const auto h = alignment_histogram(embed, protos, d, s.test);
  CHECK(h.total() == 500);
  for (std::size_t k = 0; k < 10; ++k) {
    std::size_t row = 0;
    for (auto c : h.counts[k]) row += c;
    CHECK(row == 50);
  }
  CHECK(h.diagonal_rate() > 0.6);

  // Cyclically shifted prototypes put the mass off the diagonal.
  Tensor shifted({10, 784});
  for (std::size_t k = 0; k < 10; ++k)
    for (std::size_t j = 0; j < 784; ++j) shifted(k, j) = protos((k + 1) % 10, j);
  CHECK(alignment_histogram(embed, shifted, d, s.test).diagonal_rate() < 0.2);

  const auto zero = alignment_histogram([](const Image&) { return Tensor({784}); }, protos, d,
                                        s.test);
  for (std::size_t k = 0; k < 10; ++k) CHECK(zero.counts[k][10] == 50);
  CHECK(zero.diagonal_rate() == 0.0);

  const auto j = h.to_json();
  CHECK(j["total"] == 500);
  CHECK(j["counts"].size() == 10);
  const std::string svg = histogram_svg(h, "planted");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
}

TEST_CASE("toy config round-trips through JSON") {
  ToyConfig c = small_config();
  c.learning_rate = 0.01;
  c.epochs = 3;
  nlohmann::json j = c;
  const auto back = j.get<ToyConfig>();
  CHECK(back.embed_dim == 8);
  CHECK(back.epochs == 3);
  CHECK(back.learning_rate == 0.01);
  CHECK_THROWS_AS(ToyModel(ToyConfig{0}, 1), ConfigError);
}

TEST_CASE("training raises the diagonal alignment rate") {
  const auto s = split_digits(digits(), 100);
  const auto data = build_dataset(digits(), s.train, 1000, 11);
  ToyConfig cfg;
  cfg.seed = 11;
  ToyModel model(cfg, 11);
  const double before = alignment_histogram(model, digits(), s.test).diagonal_rate();
  train_toy(model, data, digits(), cfg);
  const auto after = alignment_histogram(model, digits(), s.test);
  CHECK(after.total() == 1000);
  CHECK(after.diagonal_rate() > before + 0.2);
}
