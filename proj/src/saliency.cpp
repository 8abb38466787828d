#include "lcbm/saliency.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "lcbm/errors.hpp"

namespace lcbm {
namespace {

void require_concept(std::size_t k, std::size_t K, const char* what) {
  if (k >= K)
    throw PreconditionError(std::string(what) + ": concept " + std::to_string(k) +
                            " out of range (K = " + std::to_string(K) + ")");
}

void require_box_in(const PixelBox& box, std::size_t h, std::size_t w) {
  if (box.x1 < 0 || box.y1 < 0 || box.x2 > static_cast<int>(w) || box.y2 > static_cast<int>(h) ||
      box.x1 >= box.x2 || box.y1 >= box.y2)
    throw PreconditionError("box [" + std::to_string(box.x1) + "," + std::to_string(box.y1) +
                            "," + std::to_string(box.x2) + "," + std::to_string(box.y2) +
                            ") is empty or outside the " + std::to_string(w) + "x" +
                            std::to_string(h) + " image");
}

std::size_t box_overlap(const BinaryMask& mask, const PixelBox& box) {
  std::size_t n = 0;
  for (int y = box.y1; y < box.y2; ++y)
    for (int x = box.x1; x < box.x2; ++x) n += mask.at(x, y);
  return n;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Indices in descending value order, ties toward the smaller index.
std::vector<std::size_t> order_desc(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  return idx;
}

std::vector<std::size_t> select_ranked(const std::vector<double>& ranking, const Tensor& l_c,
                                       std::size_t k) {
  if (k > kContributionPool)
    throw PreconditionError("select_top_concepts: k = " + std::to_string(k) + " exceeds " +
                            std::to_string(kContributionPool));
  if (ranking.size() != l_c.size())
    throw PreconditionError("select_top_concepts: contributions and scores differ in length");
  const auto order = order_desc(ranking);
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < std::min(order.size(), kContributionPool); ++r) {
    const std::size_t id = order[r];
    if (ranking[id] <= 0 || l_c[id] <= 0) continue;
    if (out.size() < k) out.push_back(id);
  }
  return out;
}

}  // namespace

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), true));
}

BinaryMask BinaryMask::from_box(std::size_t h, std::size_t w, const PixelBox& box) {
  BinaryMask m(h, w);
  for (int y = std::max(box.y1, 0); y < std::min<int>(box.y2, h); ++y)
    for (int x = std::max(box.x1, 0); x < std::min<int>(box.x2, w); ++x) m.set(x, y, true);
  return m;
}

SaliencyMask threshold_saliency(const Tensor& map, double threshold) {
  if (map.rank() != 2) throw PreconditionError("threshold_saliency expects a 2-D map");
  SaliencyMask s;
  s.map = map;
  s.mask = BinaryMask(map.rows(), map.cols());
  const double mx = map.empty() ? 0.0 : *std::max_element(map.data().begin(), map.data().end());
  if (!std::isfinite(mx)) throw NumericError("saliency map is not finite");
  if (mx <= 0) {
    s.all_zero = true;
    std::fill(s.map.data().begin(), s.map.data().end(), 0.0);
    return s;
  }
  for (std::size_t i = 0; i < map.size(); ++i) {
    s.map[i] = std::max(map[i], 0.0) / mx;
    s.mask.bits[i] = s.map[i] >= threshold;
  }
  return s;
}

Tensor gradcam_cells(const LcbmModel& model, const Image& image, std::size_t concept_id) {
  const auto& cfg = model.config();
  require_concept(concept_id, cfg.num_concepts, "gradcam");
  ag::Var A = model.backbone().activations(image);
  ag::Var l_c = concept_logits(ag::chw_to_rows(A), model.concept_weight(), model.concept_bias());
  Tensor seed({cfg.num_concepts});
  seed[concept_id] = 1.0;
  const Tensor g = ag::grad(l_c, {A}, &seed)[0];
  const std::size_t D = A.value().dim(0), H = A.value().dim(1), W = A.value().dim(2);
  Tensor cam({H, W});
  for (std::size_t d = 0; d < D; ++d) {
    double alpha = 0;
    for (std::size_t i = 0; i < H * W; ++i) alpha += g[d * H * W + i];
    alpha /= static_cast<double>(H * W);
    for (std::size_t i = 0; i < H * W; ++i) cam[i] += alpha * A.value()[d * H * W + i];
  }
  return cam;
}

SaliencyMask gradcam_map(const LcbmModel& model, const Image& image, std::size_t concept_id) {
  Tensor cam = gradcam_cells(model, image, concept_id);
  for (double& v : cam.data()) v = std::max(v, 0.0);
  return threshold_saliency(resize_bilinear(cam, image.height(), image.width()));
}

std::vector<double> concept_contributions(const Tensor& l_c, const Tensor& Wp,
                                          std::size_t class_id) {
  if (Wp.rank() != 2 || Wp.rows() != l_c.size())
    throw PreconditionError("concept_contributions: W_p must be K x classes");
  if (class_id >= Wp.cols())
    throw PreconditionError("concept_contributions: class " + std::to_string(class_id) +
                            " out of range");
  std::vector<double> out(l_c.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = l_c[k] * Wp(k, class_id);
  return out;
}

std::vector<std::size_t> select_top_concepts(const std::vector<double>& contributions,
                                             const Tensor& l_c, std::size_t k) {
  return select_ranked(contributions, l_c, k);
}

std::vector<std::size_t> select_top_by_score(const Tensor& l_c, std::size_t k) {
  return select_ranked(l_c.data(), l_c, k);
}

bool inclusion(const BinaryMask& mask, double x, double y) {
  if (!(x >= 0 && y >= 0 && x < static_cast<double>(mask.width) &&
        y < static_cast<double>(mask.height)))
    throw PreconditionError("inclusion: point outside the mask");
  return mask.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
}

RegionScore iou(const BinaryMask& mask, const PixelBox& box) {
  require_box_in(box, mask.height, mask.width);
  const std::size_t inter = box_overlap(mask, box);
  const std::size_t uni = mask.count() + static_cast<std::size_t>(box.area()) - inter;
  if (uni == 0) return {0.0, true};
  return {static_cast<double>(inter) / static_cast<double>(uni), false};
}

double rep(const BinaryMask& mask, const PixelBox& box) {
  if (box.area() <= 0) throw PreconditionError("rep: zero-area box");
  require_box_in(box, mask.height, mask.width);
  return static_cast<double>(box_overlap(mask, box)) / static_cast<double>(box.area());
}

DeletionResult deletion(const LcbmModel& model, const Image& image, const PixelBox& box,
                        std::size_t concept_id) {
  require_concept(concept_id, model.config().num_concepts, "deletion");
  require_box_in(box, image.height(), image.width());
  DeletionResult r;
  r.before = sigmoid(model.predict(image).first.value()[concept_id]);
  r.after = sigmoid(model.predict(image.with_box_zeroed(box)).first.value()[concept_id]);
  if (r.before > 0) r.ratio = r.after / r.before;
  r.difference = r.before - r.after;
  return r;
}

CellCenter cell_center(std::size_t h, std::size_t w, std::size_t grid_h, std::size_t grid_w,
                       std::size_t image_h, std::size_t image_w) {
  return {(static_cast<double>(w) + 0.5) * static_cast<double>(image_w) / static_cast<double>(grid_w),
          (static_cast<double>(h) + 0.5) * static_cast<double>(image_h) / static_cast<double>(grid_h)};
}

std::optional<std::size_t> match_rank(const Tensor& M0, std::size_t concept_id,
                                      const PixelBox& box, std::size_t grid_h,
                                      std::size_t grid_w, std::size_t image_h,
                                      std::size_t image_w) {
  if (M0.rank() != 2 || M0.rows() != grid_h * grid_w)
    throw PreconditionError("match_rank: M0 must have HW rows");
  require_concept(concept_id, M0.cols(), "match_rank");
  std::vector<double> column(M0.rows());
  for (std::size_t i = 0; i < M0.rows(); ++i) column[i] = M0(i, concept_id);
  const auto order = order_desc(column);
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto c = cell_center(order[r] / grid_w, order[r] % grid_w, grid_h, grid_w, image_h, image_w);
    if (box.contains(c.x, c.y)) return r + 1;
  }
  return std::nullopt;
}

bool contains_part(const std::string& text, const std::string& part) {
  auto lower = [](std::string s) {
    for (char& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return s;
  };
  const std::string t = lower(text), p = lower(part);
  if (p.empty()) return false;
  auto word = [](char ch) { return std::isalnum(static_cast<unsigned char>(ch)) != 0; };
  for (std::size_t pos = t.find(p); pos != std::string::npos; pos = t.find(p, pos + 1)) {
    const bool left = pos == 0 || !word(t[pos - 1]);
    const std::size_t end = pos + p.size();
    const bool right = end == t.size() || !word(t[end]);
    if (left && right) return true;
  }
  return false;
}

PatchPrototypeResult patch_to_prototype(const Tensor& F, const Tensor& P,
                                        const std::vector<PartPoint>& points,
                                        const std::vector<std::string>& concept_texts,
                                        std::size_t grid_h, std::size_t grid_w,
                                        std::size_t image_h, std::size_t image_w,
                                        std::size_t n) {
  if (F.rank() != 2 || F.rows() != grid_h * grid_w)
    throw PreconditionError("patch_to_prototype: F must have HW rows");
  if (P.rank() != 2 || P.cols() != F.cols() || P.rows() != concept_texts.size())
    throw PreconditionError("patch_to_prototype: P must be K x D with one text per row");
  const Tensor M0 = ag::cosine_matrix(ag::Var::constant(F), ag::Var::constant(P)).value();
  PatchPrototypeResult r;
  for (const auto& pt : points) {
    if (!(pt.x >= 0 && pt.y >= 0 && pt.x < static_cast<double>(image_w) &&
          pt.y < static_cast<double>(image_h)))
      throw PreconditionError("patch_to_prototype: point outside the image");
    const auto h = std::min(grid_h - 1, static_cast<std::size_t>(pt.y * grid_h / image_h));
    const auto w = std::min(grid_w - 1, static_cast<std::size_t>(pt.x * grid_w / image_w));
    const auto row = M0.row(h * grid_w + w);
    const auto order = order_desc({row.begin(), row.end()});
    ++r.points;
    for (std::size_t i = 0; i < std::min(n, order.size()); ++i)
      if (contains_part(concept_texts[order[i]], pt.part)) {
        ++r.matches;
        break;
      }
  }
  return r;
}

std::vector<ExplanationRow> local_explanation(const Tensor& l_c, const Tensor& Wp,
                                              std::size_t class_id,
                                              const std::vector<std::string>& concept_texts) {
  if (concept_texts.size() != l_c.size())
    throw PreconditionError("local_explanation: one concept text per score expected");
  const auto contrib = concept_contributions(l_c, Wp, class_id);
  std::vector<ExplanationRow> rows;
  for (const std::size_t k : order_desc(contrib))
    rows.push_back({k, concept_texts[k], l_c[k], contrib[k]});
  return rows;
}

void to_json(nlohmann::json& j, const ExplanationRow& r) {
  j = {{"concept_id", r.concept_id},
       {"text", r.text},
       {"score", r.score},
       {"contribution", r.contribution},
       {"negative", r.negative_score()}};
}

void from_json(const nlohmann::json& j, ExplanationRow& r) {
  j.at("concept_id").get_to(r.concept_id);
  j.at("text").get_to(r.text);
  j.at("score").get_to(r.score);
  j.at("contribution").get_to(r.contribution);
}

}  // namespace lcbm
