#pragma once

#include <json.hpp>

#include <memory>
#include <string>
#include <vector>

#include "lcbm/autograd.hpp"
#include "lcbm/image.hpp"
#include "lcbm/tensor.hpp"

namespace lcbm {

struct ModelConfig {
  std::size_t num_concepts = 0;  // K
  std::size_t feature_dim = 0;   // D
  std::size_t num_classes = 0;
  std::size_t grid_h = 0, grid_w = 0;
  std::size_t k1 = 1, k2 = 1;
  double alpha = 0.5, beta = 0.1;
  double mask_fill = -1e4;
  double log_clamp = 1e-12;

  std::size_t cells() const { return grid_h * grid_w; }
  // Throws ConfigError naming the first violated constraint.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ConvLayerSpec {
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool relu = true;
};

// "conv": a plain convolution stack; "fixed": ignores the image and returns
// `fixed_features` (D x H x W), for tests that need an exact feature map.
struct BackboneSpec {
  std::string type = "conv";
  std::size_t input_size = 0;
  std::size_t input_channels = 3;
  std::vector<ConvLayerSpec> layers;
  Tensor fixed_features;

  std::size_t feature_dim() const;
  std::size_t grid_h() const;
  std::size_t grid_w() const;
  void validate() const;

  // Two convolutions, 24x24 RGB -> 3x3x8.
  static BackboneSpec fixture();
  // Five stride-2 convolutions, 224x224 RGB -> 7x7 x `dim`.
  static BackboneSpec stride32(std::size_t dim = 16);
};

void to_json(nlohmann::json& j, const ConvLayerSpec& s);
void from_json(const nlohmann::json& j, ConvLayerSpec& s);
void to_json(nlohmann::json& j, const BackboneSpec& s);
void from_json(const nlohmann::json& j, BackboneSpec& s);

class Backbone {
 public:
  explicit Backbone(BackboneSpec spec, std::uint64_t seed = 0);

  const BackboneSpec& spec() const { return spec_; }
  // Last convolutional activations, D x H x W.
  ag::Var activations(const Image& image) const;
  std::vector<ag::Var>& parameters() { return params_; }
  const std::vector<ag::Var>& parameters() const { return params_; }

 private:
  BackboneSpec spec_;
  std::vector<ag::Var> params_;  // weight, bias per conv layer
};

// Every intermediate of one forward pass. Graph-carrying values are Vars so
// losses and saliency can differentiate through them.
struct ForwardOutputs {
  ag::Var activations;  // D x H x W
  ag::Var features;     // F, HW x D
  ag::Var concept_logits;  // l_c, K
  ag::Var class_logits;    // l_p
  ag::Var similarity;      // M0, HW x K
  ag::IndexMatrix gated;   // idx, HW x K1
  ag::Var gathered;        // M, HW x K1
  ag::Var weights;         // softmax rows of M
  ag::Var pooled;          // D
  ag::Var aux_logits;      // l_a
};

ag::Var extract_features(const Image& image, const Backbone& backbone);
ag::Var concept_logits(const ag::Var& F, const ag::Var& Wc, const ag::Var& bc);
ag::Var class_logits(const ag::Var& l_c, const ag::Var& Wp);
ag::Var prototype_similarity(const ag::Var& F, const ag::Var& P);
ag::Var gather_gated(const ag::Var& M0, const ag::IndexMatrix& idx);
// Returns {weights, pooled}.
std::pair<ag::Var, ag::Var> aggregate_prototypes(const ag::Var& M,
                                                 const ag::IndexMatrix& idx,
                                                 const ag::Var& P);
ag::Var auxiliary_logits(const ag::Var& pooled, const ag::Var& Wa, const ag::Var& ba);

class LcbmModel {
 public:
  LcbmModel(ModelConfig config, BackboneSpec backbone, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const Backbone& backbone() const { return backbone_; }

  ForwardOutputs forward(const Image& image, const ag::IndexMatrix& gated) const;
  // Gates with the top-K1 concepts of `scores` (HW x K).
  ForwardOutputs forward(const Image& image, const Tensor& scores) const;
  // Concept and class logits only; no prototype branch.
  std::pair<ag::Var, ag::Var> predict(const Image& image) const;

  ag::Var& concept_weight() { return Wc_; }  // K x D
  ag::Var& concept_bias() { return bc_; }    // K
  ag::Var& class_weight() { return Wp_; }    // K x classes
  ag::Var& prototypes() { return P_; }       // K x D
  ag::Var& aux_weight() { return Wa_; }      // classes x D
  ag::Var& aux_bias() { return ba_; }        // classes
  const ag::Var& concept_weight() const { return Wc_; }
  const ag::Var& concept_bias() const { return bc_; }
  const ag::Var& class_weight() const { return Wp_; }
  const ag::Var& prototypes() const { return P_; }
  const ag::Var& aux_weight() const { return Wa_; }
  const ag::Var& aux_bias() const { return ba_; }

  // Stable order: backbone layers, then g_c, W_p, P, g_a.
  std::vector<std::pair<std::string, ag::Var>> named_parameters() const;
  void zero_grad();

 private:
  ModelConfig config_;
  Backbone backbone_;
  ag::Var Wc_, bc_, Wp_, P_, Wa_, ba_;
};

}  // namespace lcbm
