#pragma once

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

#include "lcbm/image.hpp"
#include "lcbm/model.hpp"
#include "lcbm/tensor.hpp"

namespace lcbm {

// Row-major boolean image.
struct BinaryMask {
  std::size_t height = 0, width = 0;
  std::vector<bool> bits;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w, bool fill = false)
      : height(h), width(w), bits(h * w, fill) {}
  bool at(std::size_t x, std::size_t y) const { return bits[y * width + x]; }
  void set(std::size_t x, std::size_t y, bool v) { bits[y * width + x] = v; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
  static BinaryMask from_box(std::size_t h, std::size_t w, const PixelBox& box);
};

struct SaliencyMask {
  Tensor map;  // height x width, divided by its max, in [0, 1]
  BinaryMask mask;
  bool all_zero = false;  // the map was identically zero; mask is empty
};

// Divides a non-negative map by its max and keeps cells at or above 0.5.
SaliencyMask threshold_saliency(const Tensor& map, double threshold = 0.5);

// Channel-weighted activation map of concept k over the feature grid, before
// rectification: sum_d mean_hw(dl_c[k]/dA[d]) * A[d, h, w]. H x W.
Tensor gradcam_cells(const LcbmModel& model, const Image& image, std::size_t concept_id);

// Rectified, bilinearly upsampled to the image size, normalized, thresholded.
SaliencyMask gradcam_map(const LcbmModel& model, const Image& image, std::size_t concept_id);

// contribution[k] = l_c[k] * W_p[k, class_id]
std::vector<double> concept_contributions(const Tensor& l_c, const Tensor& Wp,
                                          std::size_t class_id);

inline constexpr std::size_t kContributionPool = 20;

// The 20 highest contributions (ties toward the smaller id), minus those with
// a non-positive contribution or concept score; at most k survivors in
// ranking order. PreconditionError when k > 20.
std::vector<std::size_t> select_top_concepts(const std::vector<double>& contributions,
                                             const Tensor& l_c, std::size_t k);
// Same rule with concept scores as the ranking.
std::vector<std::size_t> select_top_by_score(const Tensor& l_c, std::size_t k);

// 1 when the mask holds at pixel (floor x, floor y). PreconditionError when
// the point is outside the mask.
bool inclusion(const BinaryMask& mask, double x, double y);

struct RegionScore {
  double value = 0.0;
  bool flagged = false;  // IoU of two empty regions, reported as 0
};

RegionScore iou(const BinaryMask& mask, const PixelBox& box);
// |mask ∩ box| / |box|. PreconditionError on a zero-area box.
double rep(const BinaryMask& mask, const PixelBox& box);

struct DeletionResult {
  double before = 0.0;  // sigmoid(l_c[k]) on the original image
  double after = 0.0;   // ... with the box zeroed
  std::optional<double> ratio;  // unset when `before` is 0
  double difference = 0.0;
};

DeletionResult deletion(const LcbmModel& model, const Image& image, const PixelBox& box,
                        std::size_t concept_id);

// Image coordinate of feature cell (h, w): its center scaled to the image.
struct CellCenter {
  double x = 0, y = 0;
};
CellCenter cell_center(std::size_t h, std::size_t w, std::size_t grid_h, std::size_t grid_w,
                       std::size_t image_h, std::size_t image_w);

// 1-based position, in descending M0[:, k] order (ties toward the smaller
// cell index), of the first cell whose center falls inside `box`; nullopt
// when no cell center does.
std::optional<std::size_t> match_rank(const Tensor& M0, std::size_t concept_id,
                                      const PixelBox& box, std::size_t grid_h,
                                      std::size_t grid_w, std::size_t image_h,
                                      std::size_t image_w);

// Case-insensitive whole-word containment: "wing" is in "solid yellow wing"
// but not in "wingspan".
bool contains_part(const std::string& text, const std::string& part);

struct PartPoint {
  std::string part;
  double x = 0, y = 0;
};

struct PatchPrototypeResult {
  std::size_t points = 0;
  std::size_t matches = 0;
  double ratio() const { return points ? static_cast<double>(matches) / points : 0.0; }
};

// For the feature cell under each point, the n prototypes most cosine-similar
// to that cell; the point matches when one of their concept texts contains
// its part.
PatchPrototypeResult patch_to_prototype(const Tensor& F, const Tensor& P,
                                        const std::vector<PartPoint>& points,
                                        const std::vector<std::string>& concept_texts,
                                        std::size_t grid_h, std::size_t grid_w,
                                        std::size_t image_h, std::size_t image_w,
                                        std::size_t n = 10);

struct ExplanationRow {
  std::size_t concept_id = 0;
  std::string text;
  double score = 0.0;  // l_c[k]
  double contribution = 0.0;
  bool negative_score() const { return score < 0; }
};

// Every concept, contributions descending (ties toward the smaller id).
std::vector<ExplanationRow> local_explanation(const Tensor& l_c, const Tensor& Wp,
                                              std::size_t class_id,
                                              const std::vector<std::string>& concept_texts);

void to_json(nlohmann::json& j, const ExplanationRow& r);
void from_json(const nlohmann::json& j, ExplanationRow& r);

}  // namespace lcbm
