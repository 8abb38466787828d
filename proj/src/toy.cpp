#include "lcbm/toy.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "init.hpp"
#include "lcbm/errors.hpp"
#include "lcbm/parallel.hpp"
#include "lcbm/rng.hpp"
#include "lcbm/training.hpp"

namespace lcbm {
namespace {

std::vector<std::uint8_t> read_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw IoError("cannot open " + path.string());
  std::unique_ptr<gzFile_s, decltype(&gzclose)> guard(f, &gzclose);
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  for (;;) {
    const int n = gzread(f, buf, sizeof buf);
    if (n < 0) throw IoError("corrupt gzip stream in " + path.string());
    if (n == 0) break;
    out.insert(out.end(), buf, buf + n);
  }
  return out;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

std::size_t argmax_of(const Tensor& t) {
  return static_cast<std::size_t>(std::max_element(t.data().begin(), t.data().end()) -
                                  t.data().begin());
}

}  // namespace

Image DigitSet::image(std::size_t i) const {
  if (i >= size()) throw PreconditionError("digit index " + std::to_string(i) + " out of range");
  Image img(1, rows, cols);
  const std::size_t n = rows * cols;
  for (std::size_t p = 0; p < n; ++p) img.mutable_tensor()[p] = pixels[i * n + p] / 255.0;
  return img;
}

DigitSet load_idx_digits(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto ib = read_gzip(images);
  const auto lb = read_gzip(labels);
  if (ib.size() < 16 || be32(ib, 0) != 0x00000803)
    throw IoError(images.string() + " is not an IDX3 unsigned-byte file");
  if (lb.size() < 8 || be32(lb, 0) != 0x00000801)
    throw IoError(labels.string() + " is not an IDX1 unsigned-byte file");
  DigitSet d;
  const std::size_t n = be32(ib, 4);
  d.rows = be32(ib, 8);
  d.cols = be32(ib, 12);
  if (be32(lb, 4) != n) throw IoError("image and label counts differ");
  if (ib.size() != 16 + n * d.rows * d.cols || lb.size() != 8 + n)
    throw IoError("IDX payload length does not match its header");
  d.pixels.assign(ib.begin() + 16, ib.end());
  d.labels.assign(lb.begin() + 8, lb.end());
  for (auto l : d.labels)
    if (l > 9) throw IoError("digit label out of range in " + labels.string());
  return d;
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    EVP_DigestUpdate(ctx.get(), buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream hex;
  for (unsigned i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int{md[i]};
  return hex.str();
}

void verify_sha256sums(const std::filesystem::path& dir, const std::string& list) {
  std::ifstream in(dir / list);
  if (!in) throw IoError("missing checksum list " + (dir / list).string());
  std::string sum, name;
  std::size_t n = 0;
  while (in >> sum >> name) {
    if (!name.empty() && name[0] == '*') name.erase(0, 1);
    const auto path = dir / name;
    if (!std::filesystem::exists(path)) throw IoError("missing data file " + path.string());
    if (sha256_file(path) != sum) throw IoError("checksum mismatch for " + path.string());
    ++n;
  }
  if (n == 0) throw IoError("empty checksum list " + (dir / list).string());
}

DigitSet load_digit_dir(const std::filesystem::path& dir) {
  verify_sha256sums(dir);
  return load_idx_digits(dir / "digits-images-idx3-ubyte.gz", dir / "digits-labels-idx1-ubyte.gz");
}

DigitSplit split_digits(const DigitSet& digits, std::size_t per_digit) {
  DigitSplit s;
  std::array<std::vector<std::size_t>, 10> by_digit;
  for (std::size_t i = 0; i < digits.size(); ++i) by_digit[digits.labels[i]].push_back(i);
  for (std::size_t d = 0; d < 10; ++d) {
    if (by_digit[d].size() <= per_digit)
      throw PreconditionError("split_digits: only " + std::to_string(by_digit[d].size()) +
                              " images of digit " + std::to_string(d));
    const std::size_t cut = by_digit[d].size() - per_digit;
    s.test[d].assign(by_digit[d].begin() + static_cast<std::ptrdiff_t>(cut), by_digit[d].end());
    s.train.insert(s.train.end(), by_digit[d].begin(),
                   by_digit[d].begin() + static_cast<std::ptrdiff_t>(cut));
  }
  std::sort(s.train.begin(), s.train.end());
  return s;
}

Image compose_image(const CompositeSample& s, const DigitSet& digits) {
  const std::size_t r = digits.rows, c = digits.cols;
  Image img(1, 2 * r, 2 * c);
  for (std::size_t p = 0; p < 4; ++p) {
    const std::size_t oy = (p / 2) * r, ox = (p % 2) * c;
    const std::uint8_t* src = digits.pixels.data() + s.sources[p] * r * c;
    for (std::size_t y = 0; y < r; ++y)
      for (std::size_t x = 0; x < c; ++x) img.at(0, oy + y, ox + x) = src[y * c + x] / 255.0;
  }
  return img;
}

Image quadrant(const Image& composite, std::size_t patch) {
  const int h = static_cast<int>(composite.height() / 2), w = static_cast<int>(composite.width() / 2);
  const int oy = static_cast<int>(patch / 2) * h, ox = static_cast<int>(patch % 2) * w;
  return composite.crop({ox, oy, ox + w, oy + h});
}

std::vector<CompositeSample> build_dataset(const DigitSet& digits,
                                           const std::vector<std::size_t>& pool, std::size_t n,
                                           std::uint64_t seed) {
  if (pool.empty()) throw PreconditionError("build_dataset: empty digit pool");
  Rng rng(seed);
  std::vector<CompositeSample> out(n);
  for (auto& s : out) {
    s.label = 0;
    for (std::size_t p = 0; p < 4; ++p) {
      s.sources[p] = pool[rng.below(pool.size())];
      const std::uint8_t d = digits.labels[s.sources[p]];
      s.patch_digits[p] = d;
      s.label = s.label * 10 + d;
      std::vector<std::uint8_t> others;
      for (std::uint8_t o = 0; o < 10; ++o)
        if (o != d) others.push_back(o);
      rng.shuffle(others);
      std::vector<std::uint8_t> cand{d, others[0], others[1]};
      rng.shuffle(cand);
      std::copy(cand.begin(), cand.end(), s.candidates[p].begin());
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const ToyConfig& c) {
  j = {{"embed_dim", c.embed_dim}, {"conv1", c.conv1},         {"conv2", c.conv2},
       {"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"epochs", c.epochs},
       {"seed", c.seed},           {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, ToyConfig& c) {
  ToyConfig d;
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.conv1 = j.value("conv1", d.conv1);
  c.conv2 = j.value("conv2", d.conv2);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.threads = j.value("threads", d.threads);
}

ToyModel::ToyModel(const ToyConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.embed_dim == 0 || cfg.conv1 == 0 || cfg.conv2 == 0)
    throw ConfigError("toy model sizes must be positive");
  using detail::normal_tensor;
  using detail::uniform_tensor;
  Rng rng(seed);
  const std::size_t E = cfg.embed_dim, flat = cfg.conv2 * 25;
  w1_ = ag::Var::parameter(normal_tensor(rng, {cfg.conv1, 1, 5, 5}, std::sqrt(2.0 / 25)));
  b1_ = ag::Var::parameter(uniform_tensor(rng, {cfg.conv1}, 0.2));
  w2_ = ag::Var::parameter(
      normal_tensor(rng, {cfg.conv2, cfg.conv1, 3, 3}, std::sqrt(2.0 / (9.0 * cfg.conv1))));
  b2_ = ag::Var::parameter(uniform_tensor(rng, {cfg.conv2}, 1.0 / std::sqrt(9.0 * cfg.conv1)));
  proj_ = ag::Var::parameter(uniform_tensor(rng, {E, flat}, 1.0 / std::sqrt(double(flat))));
  projb_ = ag::Var::parameter(uniform_tensor(rng, {E}, 1.0 / std::sqrt(double(flat))));
  P_ = ag::Var::parameter(normal_tensor(rng, {10, E}, 1.0));
  for (std::size_t p = 0; p < 4; ++p) {
    head_w_[p] = ag::Var::parameter(uniform_tensor(rng, {10, E}, 1.0 / std::sqrt(double(E))));
    head_b_[p] = ag::Var::parameter(Tensor({10}));
  }
}

std::vector<ag::Var> ToyModel::parameters() const {
  std::vector<ag::Var> out{w1_, b1_, w2_, b2_, proj_, projb_, P_};
  for (std::size_t p = 0; p < 4; ++p) {
    out.push_back(head_w_[p]);
    out.push_back(head_b_[p]);
  }
  return out;
}

ag::Var ToyModel::encode(const Image& patch) const {
  if (patch.channels() != 1 || patch.height() != 28 || patch.width() != 28)
    throw PreconditionError("toy encoder expects a 1x28x28 patch");
  ag::Var x = ag::relu(ag::conv2d(ag::Var::constant(patch.tensor()), w1_, b1_, 2, 0));
  x = ag::relu(ag::conv2d(x, w2_, b2_, 2, 0));
  x = ag::reshape(x, {cfg_.conv2 * 25});
  return ag::add(ag::matvec(proj_, x), projb_);
}

ag::Var ToyModel::position_logits(const Image& patch, const std::array<std::uint8_t, 3>& cand,
                                  std::size_t pos) const {
  const ag::Var e = ag::reshape(encode(patch), {1, cfg_.embed_dim});
  const ag::IndexMatrix idx{{cand[0], cand[1], cand[2]}};
  const ag::Var w = ag::softmax_rows(ag::gather_columns(ag::cosine_matrix(e, P_), idx));
  const ag::Var v = ag::reshape(ag::weighted_rows(w, P_, idx), {cfg_.embed_dim});
  return ag::add(ag::matvec(head_w_[pos], v), head_b_[pos]);
}

ag::Var ToyModel::loss(const CompositeSample& s, const DigitSet& digits) const {
  const Image img = compose_image(s, digits);
  ag::Var total;
  for (std::size_t p = 0; p < 4; ++p) {
    const ag::Var ce =
        ag::cross_entropy(position_logits(quadrant(img, p), s.candidates[p], p), s.patch_digits[p]);
    total = p == 0 ? ce : ag::add(total, ce);
  }
  return total;
}

std::size_t ToyModel::predict(const CompositeSample& s, const DigitSet& digits) const {
  const Image img = compose_image(s, digits);
  std::size_t label = 0;
  for (std::size_t p = 0; p < 4; ++p)
    label = label * 10 + argmax_of(position_logits(quadrant(img, p), s.candidates[p], p).value());
  return label;
}

std::vector<ToyEpochRecord> train_toy(ToyModel& model, const std::vector<CompositeSample>& data,
                                      const DigitSet& digits, const ToyConfig& cfg,
                                      const std::function<void(std::size_t, double)>& on_batch) {
  if (data.empty()) throw PreconditionError("train_toy: empty dataset");
  if (cfg.batch_size == 0) throw ConfigError("toy batch size must be positive");
  TrainConfig tc;
  tc.learning_rate = cfg.learning_rate;
  auto params = model.parameters();
  AdamW opt(params, tc);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<ToyEpochRecord> history;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      struct Result {
        double loss = 0;
        std::vector<Tensor> grads;
      };
      const auto results = parallel_map(n, cfg.threads, [&](std::size_t i) {
        const ag::Var l = model.loss(data[order[start + i]], digits);
        return Result{l.value()[0], ag::grad(l, params)};
      });
      double batch_loss = 0;
      for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor g(params[k].value().shape());
        for (const auto& r : results)
          for (std::size_t j = 0; j < g.size(); ++j) g[j] += r.grads[k][j];
        params[k].node()->grad = std::move(g);
      }
      for (const auto& r : results) batch_loss += r.loss;
      if (!std::isfinite(batch_loss))
        throw NumericError("toy training diverged at step " + std::to_string(step + 1) +
                           " (epoch " + std::to_string(epoch) + ")");
      opt.step(1.0 / static_cast<double>(n));
      ++step;
      epoch_loss += batch_loss;
      if (on_batch) on_batch(step, batch_loss / static_cast<double>(n));
    }
    history.push_back({epoch, epoch_loss / static_cast<double>(data.size())});
  }
  for (auto& p : params) p.zero_grad();
  return history;
}

double mean_toy_loss(const ToyModel& model, const std::vector<CompositeSample>& data,
                     const DigitSet& digits, std::size_t threads) {
  if (data.empty()) throw PreconditionError("mean_toy_loss: empty dataset");
  const auto losses = parallel_map(data.size(), threads, [&](std::size_t i) {
    return model.loss(data[i], digits).value()[0];
  });
  double s = 0;
  for (double l : losses) s += l;
  return s / static_cast<double>(data.size());
}

std::size_t AlignmentHistogram::total() const {
  std::size_t t = 0;
  for (const auto& row : counts)
    for (auto c : row) t += c;
  return t;
}

double AlignmentHistogram::diagonal_rate() const {
  double s = 0;
  for (std::size_t d = 0; d < 10; ++d) {
    std::size_t row = 0;
    for (auto c : counts[d]) row += c;
    if (row) s += static_cast<double>(counts[d][d]) / static_cast<double>(row);
  }
  return s / 10.0;
}

nlohmann::json AlignmentHistogram::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : counts) rows.push_back(row);
  return {{"counts", rows},
          {"columns", "prototypes 0-9, then images with a zero-norm embedding"},
          {"total", total()},
          {"diagonal_rate", diagonal_rate()}};
}

AlignmentHistogram alignment_histogram(const std::function<Tensor(const Image&)>& embed,
                                       const Tensor& prototypes, const DigitSet& digits,
                                       const std::array<std::vector<std::size_t>, 10>& test) {
  if (prototypes.rank() != 2 || prototypes.rows() != 10)
    throw PreconditionError("alignment_histogram expects 10 prototypes");
  std::vector<double> pnorm(10);
  for (std::size_t p = 0; p < 10; ++p) {
    double s = 0;
    for (double v : prototypes.row(p)) s += v * v;
    pnorm[p] = std::sqrt(s);
  }
  AlignmentHistogram h;
  for (std::size_t d = 0; d < 10; ++d)
    for (const std::size_t i : test[d]) {
      const Tensor e = embed(digits.image(i));
      double en = 0;
      for (double v : e.data()) en += v * v;
      en = std::sqrt(en);
      if (en == 0) {
        ++h.counts[d][10];
        continue;
      }
      std::size_t best = 0;
      double best_sim = -2;
      for (std::size_t p = 0; p < 10; ++p) {
        double dot = 0;
        for (std::size_t j = 0; j < e.size(); ++j) dot += e[j] * prototypes(p, j);
        const double sim = pnorm[p] > 0 ? dot / (en * pnorm[p]) : -2;
        if (sim > best_sim) best_sim = sim, best = p;
      }
      ++h.counts[d][best];
    }
  return h;
}

AlignmentHistogram alignment_histogram(const ToyModel& model, const DigitSet& digits,
                                       const std::array<std::vector<std::size_t>, 10>& test) {
  return alignment_histogram([&](const Image& img) { return model.encode(img).value(); },
                             model.prototypes().value(), digits, test);
}

std::string histogram_svg(const AlignmentHistogram& h, const std::string& title) {
  const int pw = 180, ph = 120, bar = 14, gap = 2, top = 30;
  std::size_t mx = 1;
  for (const auto& row : h.counts)
    for (auto c : row) mx = std::max(mx, c);
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 5 * pw << "\" height=\""
    << 2 * ph + top << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  s << "<text x=\"8\" y=\"18\" font-size=\"14\">" << title << " (diagonal rate "
    << std::fixed << std::setprecision(3) << h.diagonal_rate() << ")</text>\n";
  for (std::size_t d = 0; d < 10; ++d) {
    const int ox = static_cast<int>(d % 5) * pw + 10, oy = static_cast<int>(d / 5) * ph + top;
    const int base = oy + ph - 22, height = ph - 40;
    s << "<text x=\"" << ox << "\" y=\"" << oy + 10 << "\">digit " << d << "</text>\n";
    for (std::size_t p = 0; p < 11; ++p) {
      const int bh = static_cast<int>(std::lround(double(h.counts[d][p]) / double(mx) * height));
      const int x = ox + static_cast<int>(p) * (bar + gap);
      const char* fill = p == d ? "#d62728" : (p == 10 ? "#7f7f7f" : "#1f77b4");
      s << "<rect x=\"" << x << "\" y=\"" << base - bh << "\" width=\"" << bar << "\" height=\""
        << bh << "\" fill=\"" << fill << "\"/>\n";
      s << "<text x=\"" << x + 3 << "\" y=\"" << base + 12 << "\">" << (p == 10 ? "-" : std::to_string(p))
        << "</text>\n";
    }
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace lcbm
