#pragma once

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "lcbm/autograd.hpp"
#include "lcbm/image.hpp"

namespace lcbm {

// 28x28 grayscale digits with labels 0..9.
struct DigitSet {
  std::size_t rows = 28, cols = 28;
  std::vector<std::uint8_t> pixels;  // count * rows * cols
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }
  Image image(std::size_t i) const;  // 1 x rows x cols in [0, 1]
};

// Reads a gzipped IDX3 image file and IDX1 label file.
DigitSet load_idx_digits(const std::filesystem::path& images, const std::filesystem::path& labels);

// Verifies every entry of a "sha256  filename" list in `dir`; IoError naming
// the first missing or mismatching file.
void verify_sha256sums(const std::filesystem::path& dir, const std::string& list = "SHA256SUMS");

std::string sha256_file(const std::filesystem::path& path);

// Loads digits-{images-idx3,labels-idx1}-ubyte.gz from `dir` after checksum
// verification.
DigitSet load_digit_dir(const std::filesystem::path& dir);

// Disjoint pools: held-out test images (the last `per_digit` of each digit)
// and everything else, which is composited into training images.
struct DigitSplit {
  std::vector<std::size_t> train;
  std::array<std::vector<std::size_t>, 10> test;
};
DigitSplit split_digits(const DigitSet& digits, std::size_t per_digit);

inline constexpr std::size_t kToyCandidates = 3;
inline constexpr std::size_t kToyClasses = 10000;

// Four digits in a 2x2 layout. Stored as indices into the digit set; the
// 56x56 image is composed on demand.
struct CompositeSample {
  std::array<std::size_t, 4> sources{};
  std::array<std::uint8_t, 4> patch_digits{};
  // Per patch: the ground-truth digit and two other distinct digits, shuffled.
  std::array<std::array<std::uint8_t, kToyCandidates>, 4> candidates{};
  // Ordered tuple d0 d1 d2 d3 read as a decimal number, 0..9999.
  std::size_t label = 0;
};

// Row-major quadrants: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
Image compose_image(const CompositeSample& s, const DigitSet& digits);
Image quadrant(const Image& composite, std::size_t patch);

std::vector<CompositeSample> build_dataset(const DigitSet& digits,
                                           const std::vector<std::size_t>& pool, std::size_t n,
                                           std::uint64_t seed);

struct ToyConfig {
  std::size_t embed_dim = 16;
  std::size_t conv1 = 8, conv2 = 16;
  double learning_rate = 3e-3;
  std::size_t batch_size = 32;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

void to_json(nlohmann::json& j, const ToyConfig& c);
void from_json(const nlohmann::json& j, ToyConfig& c);

// Patch encoder, ten digit prototypes and the tuple classifier. The logit of
// tuple (a, b, c, d) is the sum of four per-position terms u_i[digit] . v_i +
// b_i[digit], where v_i is the prototype mix of patch i.
class ToyModel {
 public:
  ToyModel(const ToyConfig& cfg, std::uint64_t seed);
  ag::Var encode(const Image& patch) const;  // embed_dim
  // Cross-entropy over the 10^4 tuple classes.
  ag::Var loss(const CompositeSample& s, const DigitSet& digits) const;
  // argmax tuple, as a class id.
  std::size_t predict(const CompositeSample& s, const DigitSet& digits) const;

  // Per-position digit logits (10) for one patch.
  ag::Var position_logits(const Image& patch, const std::array<std::uint8_t, 3>& cand,
                          std::size_t pos) const;

  const ag::Var& prototypes() const { return P_; }  // 10 x embed_dim
  std::vector<ag::Var> parameters() const;

 private:

  ToyConfig cfg_;
  ag::Var w1_, b1_, w2_, b2_, proj_, projb_, P_;
  std::array<ag::Var, 4> head_w_, head_b_;
};

struct ToyEpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0;
};

// Minimizes the tuple classification loss with AdamW. NumericError on a
// non-finite loss.
std::vector<ToyEpochRecord> train_toy(ToyModel& model, const std::vector<CompositeSample>& data,
                                      const DigitSet& digits, const ToyConfig& cfg,
                                      const std::function<void(std::size_t, double)>& on_batch = {});

double mean_toy_loss(const ToyModel& model, const std::vector<CompositeSample>& data,
                     const DigitSet& digits, std::size_t threads = 1);

// counts[d][p]: test images of digit d whose most cosine-similar prototype is
// p; column 10 holds images whose embedding has zero norm.
struct AlignmentHistogram {
  std::array<std::array<std::size_t, 11>, 10> counts{};
  std::size_t total() const;
  double diagonal_rate() const;  // mean over digits of counts[d][d] / row total
  nlohmann::json to_json() const;
};

// Similarity is computed between each test image's embedding and each row of
// `prototypes`.
AlignmentHistogram alignment_histogram(const std::function<Tensor(const Image&)>& embed,
                                       const Tensor& prototypes, const DigitSet& digits,
                                       const std::array<std::vector<std::size_t>, 10>& test);
AlignmentHistogram alignment_histogram(const ToyModel& model, const DigitSet& digits,
                                       const std::array<std::vector<std::size_t>, 10>& test);

// Ten small bar panels, one per digit, with the diagonal bar highlighted.
std::string histogram_svg(const AlignmentHistogram& h, const std::string& title);

}  // namespace lcbm
