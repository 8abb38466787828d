#include "lcbm/patch_embedding.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <numeric>

#include "lcbm/embedding_cache.hpp"
#include "lcbm/rng.hpp"

namespace lcbm {
namespace {

std::vector<double> random_unit(std::uint64_t seed, std::size_t dim) {
  Rng rng(seed);
  std::vector<double> v(dim);
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

std::uint64_t image_hash(const Image& image) {
  std::vector<unsigned char> bytes;
  bytes.reserve(image.tensor().size() + 24);
  for (std::size_t d : image.tensor().shape())
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<unsigned char>(d >> (8 * i)));
  for (double v : image.tensor().data())
    bytes.push_back(static_cast<unsigned char>(std::clamp(std::lround(v * 255.0), 0L, 255L)));
  return fnv1a64(bytes.data(), bytes.size());
}

std::uint64_t text_hash(const std::string& text) {
  const std::string tagged = "text:" + text;
  return fnv1a64(tagged.data(), tagged.size());
}

}  // namespace

PatchGrid build_patch_grid(std::size_t image_size, std::size_t grid_h,
                           std::size_t grid_w, std::size_t patch_size) {
  if (grid_h == 0 || grid_w == 0) throw PreconditionError("patch grid needs at least one cell");
  if (patch_size == 0 || patch_size > image_size)
    throw PreconditionError("patch size " + std::to_string(patch_size) +
                            " must be in [1, image size " + std::to_string(image_size) + "]");
  PatchGrid g;
  g.image_size = image_size;
  g.grid_h = grid_h;
  g.grid_w = grid_w;
  g.patch_size = patch_size;
  g.stride_h = grid_h > 1 ? (image_size - patch_size) / (grid_h - 1) : 0;
  g.stride_w = grid_w > 1 ? (image_size - patch_size) / (grid_w - 1) : 0;
  const std::size_t last = image_size - patch_size;
  for (std::size_t h = 0; h < grid_h; ++h)
    for (std::size_t w = 0; w < grid_w; ++w) {
      const auto y = static_cast<int>(std::min(h * g.stride_h, last));
      const auto x = static_cast<int>(std::min(w * g.stride_w, last));
      g.boxes.push_back({x, y, x + static_cast<int>(patch_size), y + static_cast<int>(patch_size)});
    }
  return g;
}

std::vector<double> HashOracle::embed_image(const Image& image) {
  return random_unit(image_hash(image), dim_);
}

std::vector<double> HashOracle::embed_text(const std::string& text) {
  return random_unit(text_hash(text), dim_);
}

const std::vector<PaletteOracle::Color>& PaletteOracle::palette() {
  static const std::vector<Color> colors{
      {"red", 0.9, 0.1, 0.1},     {"green", 0.1, 0.75, 0.15}, {"blue", 0.1, 0.2, 0.9},
      {"yellow", 0.95, 0.9, 0.1}, {"orange", 1.0, 0.55, 0.1}, {"purple", 0.55, 0.15, 0.75},
      {"brown", 0.5, 0.3, 0.12},  {"white", 0.97, 0.97, 0.97}, {"gray", 0.5, 0.5, 0.5},
      {"black", 0.04, 0.04, 0.04}};
  return colors;
}

PaletteOracle::PaletteOracle(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  for (std::size_t i = 0; i < palette().size(); ++i)
    basis_.push_back(random_unit(seed_ * 1000003ULL + i, dim_));
}

std::string PaletteOracle::id() const {
  return "palette-v1-d" + std::to_string(dim_) + "-s" + std::to_string(seed_);
}

std::vector<double> PaletteOracle::embed_image(const Image& image) {
  double rgb[3] = {0, 0, 0};
  const double n = static_cast<double>(image.height() * image.width());
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t src = image.channels() == 1 ? 0 : c;
    for (std::size_t y = 0; y < image.height(); ++y)
      for (std::size_t x = 0; x < image.width(); ++x) rgb[c] += image.at(src, y, x);
    rgb[c] /= n;
  }
  std::vector<double> logits;
  for (const auto& col : palette()) {
    const double d2 = (rgb[0] - col.r) * (rgb[0] - col.r) +
                      (rgb[1] - col.g) * (rgb[1] - col.g) +
                      (rgb[2] - col.b) * (rgb[2] - col.b);
    logits.push_back(-d2 / 0.02);
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (auto& l : logits) total += (l = std::exp(l - mx));
  std::vector<double> out(dim_, 0.0);
  for (std::size_t c = 0; c < basis_.size(); ++c)
    for (std::size_t j = 0; j < dim_; ++j) out[j] += logits[c] / total * basis_[c][j];
  return out;
}

std::vector<double> PaletteOracle::embed_text(const std::string& text) {
  std::string t;
  for (char c : text) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  // "grey" spells the same color
  for (auto pos = t.find("grey"); pos != std::string::npos; pos = t.find("grey"))
    t.replace(pos, 4, "gray");
  std::size_t best = palette().size(), best_pos = std::string::npos;
  for (std::size_t c = 0; c < palette().size(); ++c) {
    const auto pos = t.find(palette()[c].name);
    if (pos != std::string::npos && pos < best_pos) {
      best = c;
      best_pos = pos;
    }
  }
  auto noise = random_unit(text_hash(t), dim_);
  if (best == palette().size()) return noise;
  std::vector<double> out(dim_);
  for (std::size_t j = 0; j < dim_; ++j) out[j] = basis_[best][j] + 0.05 * noise[j];
  return out;
}

EmbeddingEndpoint EmbeddingEndpoint::from_env() {
  auto env = [](const char* n) -> std::string {
    const char* v = std::getenv(n);
    return v ? v : "";
  };
  EmbeddingEndpoint ep;
  ep.base_url = env("LCBM_EMBED_ENDPOINT");
  if (ep.base_url.empty()) throw ConfigError("LCBM_EMBED_ENDPOINT is not set");
  if (auto m = env("LCBM_EMBED_MODEL"); !m.empty()) ep.model = m;
  ep.api_key = env("LCBM_EMBED_API_KEY");
  if (auto d = env("LCBM_EMBED_DIM"); !d.empty()) ep.dim = std::stoul(d);
  return ep;
}

std::vector<double> HttpEmbeddingOracle::embed_image(const Image& image) {
  nlohmann::json body{{"model", ep_.model},
                      {"image", httplib::detail::base64_encode(encode_png(image))}};
  return post(body.dump());
}

std::vector<double> HttpEmbeddingOracle::embed_text(const std::string& text) {
  return post(nlohmann::json{{"model", ep_.model}, {"text", text}}.dump());
}

std::vector<double> HttpEmbeddingOracle::post(const std::string& body) {
  httplib::Client cli(ep_.base_url);
  cli.set_read_timeout(60, 0);
  httplib::Headers headers;
  if (!ep_.api_key.empty()) headers.emplace("Authorization", "Bearer " + ep_.api_key);
  auto res = cli.Post(ep_.path, headers, body, "application/json");
  if (!res)
    throw OracleError("embedding request failed: " + httplib::to_string(res.error()));
  if (res->status != 200)
    throw OracleError("embedding request returned HTTP " + std::to_string(res->status));
  std::vector<double> v;
  try {
    v = nlohmann::json::parse(res->body).at("embedding").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw OracleError(std::string("malformed embedding response: ") + e.what());
  }
  if (v.size() != ep_.dim)
    throw OracleError("embedding service returned dimension " + std::to_string(v.size()) +
                      ", expected " + std::to_string(ep_.dim));
  return v;
}

std::unique_ptr<EmbeddingOracle> make_oracle(const std::string& kind, std::size_t dim) {
  if (kind == "hash") return std::make_unique<HashOracle>(dim);
  if (kind == "palette") return std::make_unique<PaletteOracle>(dim);
  if (kind == "http") return std::make_unique<HttpEmbeddingOracle>(EmbeddingEndpoint::from_env());
  throw ConfigError("unknown embedding oracle '" + kind + "' (expected hash, palette or http)");
}

Tensor embed_patches(const Image& image, const PatchGrid& grid, EmbeddingOracle& oracle,
                     EmbeddingCache* cache, const std::string& image_id, EmbedStats* stats) {
  if (image.height() != grid.image_size || image.width() != grid.image_size)
    throw PreconditionError("image is " + std::to_string(image.height()) + "x" +
                            std::to_string(image.width()) + ", patch grid expects " +
                            std::to_string(grid.image_size) + " square");
  if (cache && image_id.empty())
    throw PreconditionError("embed_patches: cached lookup needs an image id");
  const std::size_t dim = oracle.dim();
  Tensor out({grid.cells(), dim});
  for (std::size_t i = 0; i < grid.cells(); ++i) {
    const CacheKey key{image_id, i, oracle.id()};
    std::optional<std::vector<double>> vec;
    if (cache) {
      try {
        vec = cache->get(key);
      } catch (const CacheCorruptError& e) {
        if (stats) {
          ++stats->corrupt;
          stats->warnings.push_back(std::string(e.what()) + "; re-embedding");
        }
        cache->erase(key);
      }
      if (vec && vec->size() != dim) vec.reset();
      if (stats) ++(vec ? stats->hits : stats->misses);
    }
    if (!vec) {
      Image patch = image.crop(grid.boxes[i]);
      if (const auto res = oracle.native_resolution(); res > 0)
        patch = resize_bilinear(patch, res, res);
      try {
        vec = oracle.embed_image(patch);
      } catch (const Error& e) {
        throw OracleError("embedding failed for patch " + std::to_string(i) + ": " + e.what());
      }
      if (vec->size() != dim)
        throw OracleError("oracle returned dimension " + std::to_string(vec->size()) +
                          " for patch " + std::to_string(i));
      if (cache) cache->put(key, *vec);
    }
    std::copy(vec->begin(), vec->end(), out.row(i).begin());
  }
  return out;
}

Tensor embed_concepts(const ConceptSet& set, EmbeddingOracle& oracle) {
  if (set.size() == 0) throw PreconditionError("embed_concepts: empty concept set");
  Tensor out({set.size(), oracle.dim()});
  for (const auto& c : set.concepts()) {
    std::vector<double> v;
    try {
      v = oracle.embed_text(c.text);
    } catch (const Error& e) {
      throw OracleError("embedding failed for concept " + std::to_string(c.id) + ": " + e.what());
    }
    if (v.size() != oracle.dim()) throw OracleError("oracle returned wrong text dimension");
    std::copy(v.begin(), v.end(), out.row(c.id).begin());
  }
  return out;
}

Tensor compute_scores(const Tensor& patch_embeddings, const Tensor& concept_embeddings) {
  if (patch_embeddings.rank() != 2 || concept_embeddings.rank() != 2 ||
      patch_embeddings.cols() != concept_embeddings.cols())
    throw PreconditionError("compute_scores: embedding dimensions differ");
  return ag::cosine_matrix(ag::Var::constant(patch_embeddings),
                           ag::Var::constant(concept_embeddings))
      .value();
}

ag::IndexMatrix top_k1_indices(const Tensor& scores, std::size_t k1) {
  if (scores.rank() != 2) throw PreconditionError("top_k1_indices: scores must be HW x K");
  const std::size_t K = scores.cols();
  if (k1 == 0 || k1 > K)
    throw PreconditionError("K1 = " + std::to_string(k1) + " must be in [1, K = " +
                            std::to_string(K) + "]");
  if (!scores.all_finite()) throw NumericError("top_k1_indices: non-finite score");
  ag::IndexMatrix out(scores.rows());
  std::vector<std::size_t> ids(K);
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    std::iota(ids.begin(), ids.end(), 0);
    auto row = scores.row(r);
    std::partial_sort(ids.begin(), ids.begin() + static_cast<long>(k1), ids.end(),
                      [&](std::size_t a, std::size_t b) {
                        return row[a] > row[b] || (row[a] == row[b] && a < b);
                      });
    out[r].assign(ids.begin(), ids.begin() + static_cast<long>(k1));
  }
  return out;
}

}  // namespace lcbm
