#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lcbm/autograd.hpp"
#include "lcbm/concept_catalog.hpp"
#include "lcbm/image.hpp"
#include "lcbm/tensor.hpp"

namespace lcbm {

class EmbeddingCache;

// Overlapping square patches laid out on an H x W grid over a square image.
struct PatchGrid {
  std::size_t image_size = 0;
  std::size_t grid_h = 0, grid_w = 0;
  std::size_t patch_size = 0;
  std::size_t stride_h = 0, stride_w = 0;
  std::vector<PixelBox> boxes;  // row-major over (h, w)

  std::size_t cells() const { return grid_h * grid_w; }
};

// stride = floor((image_size - patch_size) / (grid - 1)), 0 for a 1-cell axis.
PatchGrid build_patch_grid(std::size_t image_size, std::size_t grid_h,
                           std::size_t grid_w, std::size_t patch_size);

// Joint image/text embedding space (a CLIP stand-in).
class EmbeddingOracle {
 public:
  virtual ~EmbeddingOracle() = default;
  // Stable identifier; part of every cache key.
  virtual std::string id() const = 0;
  virtual std::size_t dim() const = 0;
  // Side length patches are resized to before embedding; 0 keeps them as is.
  virtual std::size_t native_resolution() const { return 0; }
  virtual std::vector<double> embed_image(const Image& image) = 0;
  virtual std::vector<double> embed_text(const std::string& text) = 0;
};

// Pseudorandom unit vectors seeded by a content hash of the input. Pure.
class HashOracle final : public EmbeddingOracle {
 public:
  explicit HashOracle(std::size_t dim = 32) : dim_(dim) {}
  std::string id() const override { return "hash-v1-d" + std::to_string(dim_); }
  std::size_t dim() const override { return dim_; }
  std::vector<double> embed_image(const Image& image) override;
  std::vector<double> embed_text(const std::string& text) override;

 private:
  std::size_t dim_;
};

// Color-aware synthetic oracle. A patch embeds as a blend of per-color basis
// vectors, softmax-weighted by closeness of its mean color to each palette
// entry; a concept text embeds near the basis vector of the first color word
// it contains. Scores therefore carry real signal on synthetic images. Pure.
class PaletteOracle final : public EmbeddingOracle {
 public:
  explicit PaletteOracle(std::size_t dim = 32, std::uint64_t seed = 17);
  std::string id() const override;
  std::size_t dim() const override { return dim_; }
  std::vector<double> embed_image(const Image& image) override;
  std::vector<double> embed_text(const std::string& text) override;

  struct Color {
    std::string name;
    double r, g, b;
  };
  static const std::vector<Color>& palette();

 private:
  std::size_t dim_;
  std::uint64_t seed_;
  std::vector<std::vector<double>> basis_;
};

// Remote embedding service configured by model identifier (for example the
// "CLIP-ViT/16" checkpoint). Protocol: POST {base_url}{path} with
// {"model", "text"} or {"model", "image": base64 PNG}; reply {"embedding": [...]}.
struct EmbeddingEndpoint {
  std::string base_url;
  std::string path = "/embed";
  std::string model = "CLIP-ViT/16";
  std::string api_key;
  std::size_t dim = 512;
  std::size_t native_resolution = 224;

  // LCBM_EMBED_ENDPOINT, LCBM_EMBED_MODEL, LCBM_EMBED_API_KEY, LCBM_EMBED_DIM
  static EmbeddingEndpoint from_env();
};

class HttpEmbeddingOracle final : public EmbeddingOracle {
 public:
  explicit HttpEmbeddingOracle(EmbeddingEndpoint ep) : ep_(std::move(ep)) {}
  std::string id() const override { return "http:" + ep_.model; }
  std::size_t dim() const override { return ep_.dim; }
  std::size_t native_resolution() const override { return ep_.native_resolution; }
  std::vector<double> embed_image(const Image& image) override;
  std::vector<double> embed_text(const std::string& text) override;

 private:
  std::vector<double> post(const std::string& body);
  EmbeddingEndpoint ep_;
};

// Builds an oracle from a config selector: "hash", "palette" or "http".
std::unique_ptr<EmbeddingOracle> make_oracle(const std::string& kind,
                                             std::size_t dim);

struct EmbedStats {
  std::size_t hits = 0;
  std::size_t misses = 0;
  std::size_t corrupt = 0;
  std::vector<std::string> warnings;
};

// HW x D_c patch embeddings, rows in row-major (h, w) order. With a cache,
// entries are looked up by (image_id, patch index, oracle id) first; corrupt
// entries are re-embedded and reported in `stats`.
Tensor embed_patches(const Image& image, const PatchGrid& grid,
                     EmbeddingOracle& oracle, EmbeddingCache* cache = nullptr,
                     const std::string& image_id = {}, EmbedStats* stats = nullptr);

// K x D_c text embeddings in concept order.
Tensor embed_concepts(const ConceptSet& set, EmbeddingOracle& oracle);

// Cosine scores S (HW x K) between patch and concept embeddings.
Tensor compute_scores(const Tensor& patch_embeddings, const Tensor& concept_embeddings);

// Per row, the K1 highest-scoring concept ids ordered by descending score,
// ties toward the smaller id.
ag::IndexMatrix top_k1_indices(const Tensor& scores, std::size_t k1);

}  // namespace lcbm
