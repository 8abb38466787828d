// One line per acceptance criterion; exit status 1 if any fails.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <thread>

#include "eval_fixtures.hpp"
#include "fd_oracle.hpp"
#include "fixtures.hpp"
#include "lcbm/losses.hpp"
#include "lcbm/patch_embedding.hpp"
#include "lcbm/saliency.hpp"
#include "lcbm/toy.hpp"
#include "smoke.hpp"

using namespace lcbm;
using namespace lcbm::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& check) {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("[%s] %d %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(),
              o.detail.c_str(), s);
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// Influence values from central differences of an explicit l_c loop.
Tensor fd_influence(const Tensor& F, const Tensor& Wc, const Tensor& bc) {
  const std::size_t HW = F.rows(), D = F.cols(), K = Wc.rows();
  Tensor V({K, HW});
  for (std::size_t k = 0; k < K; ++k) {
    auto lk = [&](const Tensor& f) {
      double s = bc[k];
      for (std::size_t hw = 0; hw < HW; ++hw)
        for (std::size_t d = 0; d < D; ++d) s += Wc(k, d) * f(hw, d) / static_cast<double>(HW);
      return s;
    };
    const Tensor g = numeric_gradient(lk, F, 1e-4);
    for (std::size_t d = 0; d < D; ++d) {
      double gbar = 0;
      for (std::size_t r = 0; r < HW; ++r) gbar += g(r, d) / static_cast<double>(HW);
      for (std::size_t hw = 0; hw < HW; ++hw) V(k, hw) += F(hw, d) * gbar;
    }
  }
  return V;
}

Outcome influence_fd() {
  Rng rng(101);
  double worst = 0;
  for (int net = 0; net < 10; ++net) {
    const BackboneSpec spec = random_fixture_spec(rng);
    const std::size_t K = 2 + rng.below(5);
    LcbmModel model(config_for(spec, K, 3, 1, 1), spec, 200 + net);
    const auto out = model.forward(random_image(rng, 3, 24), random_scores(rng, spec.grid_h() * spec.grid_w(), K));
    const Tensor V = influence_values(out.features, out.concept_logits).values.value();
    worst = std::max(worst, relative_error(V, fd_influence(out.features.value(),
                                                           model.concept_weight().value(),
                                                           model.concept_bias().value())));
  }
  return {worst < 1e-3, "max relative error " + fmt("%.2e", worst) + " over 10 nets"};
}

double softmax_kl(const Tensor& V, const Tensor& T, double clamp = 1e-12) {
  double total = 0;
  for (std::size_t k = 0; k < V.rows(); ++k) {
    double mp = -1e300, mq = -1e300, zp = 0, zq = 0;
    for (std::size_t i = 0; i < V.cols(); ++i) mp = std::max(mp, V(k, i)), mq = std::max(mq, T(i, k));
    for (std::size_t i = 0; i < V.cols(); ++i) zp += std::exp(V(k, i) - mp), zq += std::exp(T(i, k) - mq);
    for (std::size_t i = 0; i < V.cols(); ++i) {
      const double p = std::exp(V(k, i) - mp) / zp;
      const double q = std::max(std::exp(T(i, k) - mq) / zq, clamp);
      total += p * std::log(p / q);
    }
  }
  return total;
}

ag::IndexMatrix brute_top_k(const Tensor& S, std::size_t k1) {
  ag::IndexMatrix idx(S.rows());
  for (std::size_t r = 0; r < S.rows(); ++r) {
    std::vector<std::size_t> order(S.cols());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return S(r, a) > S(r, b); });
    idx[r].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k1));
  }
  return idx;
}

Tensor brute_target(const Tensor& M0, const Tensor& M, const ag::IndexMatrix& idx, std::size_t k2,
                    double fill) {
  Tensor t({M0.rows(), M0.cols()}, fill);
  for (std::size_t hw = 0; hw < M0.rows(); ++hw) {
    std::vector<std::size_t> pos(M.cols());
    for (std::size_t j = 0; j < pos.size(); ++j) pos[j] = j;
    std::stable_sort(pos.begin(), pos.end(), [&](auto a, auto b) { return M(hw, a) > M(hw, b); });
    for (std::size_t j = 0; j < k2; ++j) t(hw, idx[hw][pos[j]]) = M0(hw, idx[hw][pos[j]]);
  }
  return t;
}

struct RandomTargetCase {
  Tensor S, M0, M;
  ag::IndexMatrix idx;
  std::size_t k1 = 1, k2 = 1;
};

RandomTargetCase random_target_case(Rng& rng, bool ties) {
  RandomTargetCase c;
  const std::size_t HW = 1 + rng.below(16), K = 1 + rng.below(10);
  c.k1 = 1 + rng.below(K);
  c.k2 = 1 + rng.below(c.k1);
  c.S = Tensor({HW, K});
  c.M0 = Tensor({HW, K});
  for (auto& v : c.S.data()) v = ties ? static_cast<double>(rng.below(4)) / 3.0 : rng.uniform(-1, 1);
  for (auto& v : c.M0.data()) v = ties ? static_cast<double>(rng.below(3)) / 2.0 - 0.5 : rng.uniform(-1, 1);
  c.idx = top_k1_indices(c.S, c.k1);
  c.M = Tensor({HW, c.k1});
  for (std::size_t hw = 0; hw < HW; ++hw)
    for (std::size_t j = 0; j < c.k1; ++j) c.M(hw, j) = c.M0(hw, c.idx[hw][j]);
  return c;
}

Outcome locality_loss_properties() {
  Rng rng(102);
  double min_loss = 1e300, worst_oracle = 0, worst_shift = 0, worst_mass = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto c = random_target_case(rng, t % 2 == 0);
    const Tensor T = build_masked_target(c.M0, c.M, c.idx, c.k2, -1e4).values;
    const Tensor V = random_tensor(rng, {c.M0.cols(), c.M0.rows()}, 3.0);
    const double L = locality_loss(ag::Var::constant(V), T).value()[0];
    min_loss = std::min(min_loss, L);
    worst_oracle = std::max(worst_oracle, std::abs(L - softmax_kl(V, T)) / std::max(1.0, std::abs(L)));

    Tensor shifted = T.transposed();
    for (std::size_t k = 0; k < shifted.rows(); ++k) {
      const double s = rng.uniform(-5, 5);
      for (std::size_t i = 0; i < shifted.cols(); ++i) shifted(k, i) += s;
    }
    worst_shift = std::max(worst_shift, std::abs(locality_loss(ag::Var::constant(shifted), T).value()[0]));

    // Target softmax mass on masked cells, for every concept that keeps at least one cell.
    const Tensor Q = ag::softmax_rows(ag::Var::constant(T.transposed())).value();
    for (std::size_t k = 0; k < T.cols(); ++k) {
      bool any_kept = false;
      double masked = 0;
      for (std::size_t i = 0; i < T.rows(); ++i) any_kept |= T(i, k) > -1e3;
      for (std::size_t i = 0; i < T.rows(); ++i)
        if (T(i, k) <= -1e3) masked += Q(k, i);
      if (any_kept) worst_mass = std::max(worst_mass, masked);
    }
  }
  const bool pass = min_loss >= -1e-9 && worst_oracle < 1e-9 && worst_shift < 1e-9 && worst_mass < 1e-6;
  return {pass, "min L " + fmt("%.2e", min_loss) + ", vs direct KL " + fmt("%.1e", worst_oracle) +
                    ", shifted-copy max " + fmt("%.2e", worst_shift) + ", masked mass max " +
                    fmt("%.2e", worst_mass)};
}

Outcome gating_brute_force() {
  Rng rng(103);
  int mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto c = random_target_case(rng, t % 2 == 0);
    if (c.idx != brute_top_k(c.S, c.k1)) ++mismatches;
    if (build_masked_target(c.M0, c.M, c.idx, c.k2, -1e4).values !=
        brute_target(c.M0, c.M, c.idx, c.k2, -1e4))
      ++mismatches;
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches in 1000 instances"};
}

Outcome region_metrics() {
  Rng rng(104);
  int mismatches = 0;
  for (int t = 0; t < 50; ++t) {
    const auto c = random_mask_case(rng);
    const auto b = brute_region(c.mask, c.box);
    if (inclusion(c.mask, c.px, c.py) != brute_inclusion(c.mask, c.px, c.py)) ++mismatches;
    if (std::abs(iou(c.mask, c.box).value - b.iou) > 1e-12) ++mismatches;
    if (std::abs(rep(c.mask, c.box) - b.rep) > 1e-12) ++mismatches;
  }
  const PixelBox box{3, 2, 9, 7};
  const BinaryMask same = BinaryMask::from_box(12, 10, box);
  const double i = iou(same, box).value, r = rep(same, box);
  return {mismatches == 0 && i == 1.0 && r == 1.0,
          std::to_string(mismatches) + " mismatches in 50 pairs; mask==box IoU " + fmt("%g", i) +
              " REP " + fmt("%g", r)};
}

Outcome deletion_check() {
  const LcbmModel reader = red_reading_model();
  const PixelBox box{8, 8, 16, 16};
  const auto d = deletion(reader, red_box_image(box, 7), box, 0);
  const LcbmModel flat = constant_model();
  Rng rng(105);
  const auto c = deletion(flat, random_image(rng, 3, 24), {4, 4, 20, 20}, 0);
  const bool pass = d.ratio && d.difference > 0.1 && *d.ratio < 0.9 && c.ratio && *c.ratio == 1.0 &&
                    c.difference == 0.0;
  return {pass, "box-reading diff " + fmt("%.3f", d.difference) + " ratio " +
                    fmt("%.3f", d.ratio.value_or(NAN)) + "; constant ratio " +
                    fmt("%.17g", c.ratio.value_or(NAN)) + " diff " + fmt("%g", c.difference)};
}

// Rank by scanning every cell: 1 + number of cells that beat the best in-box cell.
std::optional<std::size_t> brute_rank(const Tensor& M0, std::size_t k, const PixelBox& b,
                                      std::size_t H, std::size_t W, std::size_t ih, std::size_t iw) {
  std::vector<std::size_t> order(H * W);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto c) { return M0(a, k) > M0(c, k); });
  for (std::size_t r = 0; r < order.size(); ++r) {
    const double x = (static_cast<double>(order[r] % W) + 0.5) * static_cast<double>(iw) / static_cast<double>(W);
    const double y = (static_cast<double>(order[r] / W) + 0.5) * static_cast<double>(ih) / static_cast<double>(H);
    if (b.contains(x, y)) return r + 1;
  }
  return std::nullopt;
}

Outcome match_rank_check() {
  Rng rng(106);
  int planted_ok = 0;
  for (int net = 0; net < 10; ++net) {
    const BackboneSpec spec = random_fixture_spec(rng);
    const std::size_t K = 3, H = spec.grid_h(), W = spec.grid_w();
    LcbmModel model(config_for(spec, K, 2, 1, 1), spec, 300 + net);
    const Image img = random_image(rng, 3, 24);
    const Tensor F = model.forward(img, random_scores(rng, H * W, K)).features.value();
    const std::size_t cell = rng.below(H * W), k = rng.below(K);
    for (std::size_t d = 0; d < F.cols(); ++d) model.prototypes().mutable_value()(k, d) = F(cell, d);
    const Tensor M0 = model.forward(img, random_scores(rng, H * W, K)).similarity.value();
    const auto c = cell_center(cell / W, cell % W, H, W, 24, 24);
    const PixelBox box{static_cast<int>(std::floor(c.x)), static_cast<int>(std::floor(c.y)),
                       static_cast<int>(std::floor(c.x)) + 1, static_cast<int>(std::floor(c.y)) + 1};
    if (match_rank(M0, k, box, H, W, 24, 24) == std::optional<std::size_t>(1)) ++planted_ok;
  }
  int invariant_ok = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t H = 2 + rng.below(6), W = 2 + rng.below(6);
    Tensor M0({H * W, 1}), T({H * W, 1});
    for (std::size_t i = 0; i < H * W; ++i) {
      M0[i] = std::round(rng.uniform(-1, 1) * 6) / 6;
      T[i] = 2.0 * std::atan(4 * M0[i]) + 7;
    }
    const int x1 = static_cast<int>(rng.below(48)), y1 = static_cast<int>(rng.below(48));
    const PixelBox box{x1, y1, x1 + 1 + static_cast<int>(rng.below(16)), y1 + 1 + static_cast<int>(rng.below(16))};
    const auto a = match_rank(M0, 0, box, H, W, 64, 64);
    if (a == match_rank(T, 0, box, H, W, 64, 64) && a == brute_rank(M0, 0, box, H, W, 64, 64))
      ++invariant_ok;
  }
  return {planted_ok == 10 && invariant_ok == 100,
          "planted rank 1 in " + std::to_string(planted_ok) + "/10 nets; monotone invariance " +
              std::to_string(invariant_ok) + "/100 columns"};
}

Outcome overfit_smoke() {
  const SmokeResult r = run_overfit_smoke();
  const double drop = 1.0 - r.final_locality / r.initial_locality;
  return {r.train_accuracy == 1.0 && r.steps <= 200 && drop >= 0.5,
          "accuracy " + fmt("%.3f", r.train_accuracy) + " in " + std::to_string(r.steps) +
              " steps, L_local " + fmt("%.4f", r.initial_locality) + " -> " +
              fmt("%.4f", r.final_locality) + " (drop " + fmt("%.0f%%", 100 * drop) + ")"};
}

Outcome toy_mnist() {
  const auto t0 = std::chrono::steady_clock::now();
  const DigitSet digits = load_digit_dir(fs::path(LCBM_SOURCE_DIR) / "data" / "digits");
  const DigitSplit split = split_digits(digits, 100);
  const auto data = build_dataset(digits, split.train, 10000, 1);
  ToyConfig cfg;
  cfg.seed = 1;
  cfg.threads = std::max(1u, std::thread::hardware_concurrency());
  ToyModel model(cfg, 1);
  const double before = alignment_histogram(model, digits, split.test).diagonal_rate();
  train_toy(model, data, digits, cfg);
  const double after = alignment_histogram(model, digits, split.test).diagonal_rate();
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60;
  return {after >= 0.70 && after >= before + 0.40 && minutes < 30,
          "diagonal rate " + fmt("%.3f", before) + " untrained -> " + fmt("%.3f", after) +
              " trained on 10000 composites, " + fmt("%.1f", minutes) + " min"};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome end_to_end_determinism() {
  const fs::path root = fs::temp_directory_path() / ("lcbm_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string cli = LCBM_CLI;
  std::vector<fs::path> runs;
  for (const char* name : {"a", "b"}) {
    const fs::path dir = root / name;
    const std::string cfg = (dir / "config.json").string();
    const std::string quiet = " > " + (root / (std::string(name) + ".log")).string() + " 2>&1";
    int rc = std::system((cli + " make-fixture " + dir.string() + " --per-class 8" + quiet).c_str());
    for (const char* cmd : {"generate-concepts", "embed", "train", "evaluate"})
      if (rc == 0) rc = std::system((cli + " " + cmd + " -c " + cfg + " >>" + quiet.substr(2)).c_str());
    if (rc != 0) return {false, std::string("pipeline failed in run ") + name};
    runs.push_back(dir / "run");
  }
  std::size_t compared = 0;
  std::string differing;
  for (const char* rel : {"concepts/concepts.jsonl", "concepts/alignment.jsonl", "train/best.ckpt",
                          "eval/summary.json", "eval/details.jsonl"}) {
    const std::string a = slurp(runs[0] / rel), b = slurp(runs[1] / rel);
    if (a.empty() || a != b) differing += std::string(" ") + rel;
    ++compared;
  }
  fs::remove_all(root);
  return {differing.empty(), differing.empty()
                                 ? std::to_string(compared) + " artifacts byte-identical across two runs"
                                 : "differs:" + differing};
}

}  // namespace

int main() {
  report(1, "influence values match central differences", influence_fd);
  report(2, "locality loss bounds and masked mass", locality_loss_properties);
  report(3, "top-K1 gating and masked target match brute force", gating_brute_force);
  report(4, "inclusion, IoU and REP match brute force", region_metrics);
  report(5, "deletion separates box-reading from constant models", deletion_check);
  report(6, "match rank: planted prototype and monotone invariance", match_rank_check);
  report(7, "overfit smoke run", overfit_smoke);
  report(8, "composite-digit prototype alignment", toy_mnist);
  report(9, "end-to-end pipeline determinism", end_to_end_determinism);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures ? 1 : 0;
}
