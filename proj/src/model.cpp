#include "lcbm/model.hpp"

#include <cmath>

#include "lcbm/errors.hpp"
#include "lcbm/patch_embedding.hpp"
#include "lcbm/rng.hpp"
#include "init.hpp"

namespace lcbm {
namespace {

using detail::normal_tensor;
using detail::uniform_tensor;

std::size_t conv_out(std::size_t in, const ConvLayerSpec& l) {
  if (in + 2 * l.pad < l.kernel) return 0;
  return (in + 2 * l.pad - l.kernel) / l.stride + 1;
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (num_concepts == 0) fail("K must be >= 1");
  if (feature_dim == 0) fail("feature dimension D must be >= 1");
  if (num_classes == 0) fail("num_classes must be >= 1");
  if (grid_h == 0 || grid_w == 0) fail("feature grid must be at least 1x1");
  if (k2 < 1 || k2 > k1 || k1 > num_concepts)
    fail("need 1 <= K2 <= K1 <= K, got K2=" + std::to_string(k2) + " K1=" +
         std::to_string(k1) + " K=" + std::to_string(num_concepts));
  if (!(alpha >= 0) || !(beta >= 0)) fail("alpha and beta must be >= 0");
  if (!(mask_fill <= -1e3)) fail("mask_fill must be <= -1e3");
  if (!(log_clamp > 0)) fail("log_clamp must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"num_concepts", c.num_concepts}, {"feature_dim", c.feature_dim},
       {"num_classes", c.num_classes},   {"grid_h", c.grid_h},
       {"grid_w", c.grid_w},             {"k1", c.k1},
       {"k2", c.k2},                     {"alpha", c.alpha},
       {"beta", c.beta},                 {"mask_fill", c.mask_fill},
       {"log_clamp", c.log_clamp}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.num_concepts = j.value("num_concepts", d.num_concepts);
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.grid_h = j.value("grid_h", d.grid_h);
  c.grid_w = j.value("grid_w", d.grid_w);
  c.k1 = j.value("k1", d.k1);
  c.k2 = j.value("k2", d.k2);
  c.alpha = j.value("alpha", d.alpha);
  c.beta = j.value("beta", d.beta);
  c.mask_fill = j.value("mask_fill", d.mask_fill);
  c.log_clamp = j.value("log_clamp", d.log_clamp);
}

std::size_t BackboneSpec::feature_dim() const {
  if (type == "fixed") return fixed_features.rank() == 3 ? fixed_features.dim(0) : 0;
  return layers.empty() ? input_channels : layers.back().out_channels;
}

std::size_t BackboneSpec::grid_h() const {
  if (type == "fixed") return fixed_features.rank() == 3 ? fixed_features.dim(1) : 0;
  std::size_t s = input_size;
  for (const auto& l : layers) s = conv_out(s, l);
  return s;
}

std::size_t BackboneSpec::grid_w() const {
  if (type == "fixed") return fixed_features.rank() == 3 ? fixed_features.dim(2) : 0;
  return grid_h();
}

void BackboneSpec::validate() const {
  if (type == "fixed") {
    if (fixed_features.rank() != 3 || fixed_features.empty())
      throw ConfigError("fixed backbone needs a D x H x W feature tensor");
    return;
  }
  if (type != "conv") throw ConfigError("unknown backbone type '" + type + "'");
  if (input_size == 0 || input_channels == 0) throw ConfigError("backbone input size must be set");
  if (layers.empty()) throw ConfigError("conv backbone needs at least one layer");
  std::size_t s = input_size;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.out_channels == 0 || l.kernel == 0 || l.stride == 0)
      throw ConfigError("backbone layer " + std::to_string(i) + " has a zero size");
    s = conv_out(s, l);
    if (s == 0) throw ConfigError("backbone layer " + std::to_string(i) + " shrinks the map to nothing");
  }
}

BackboneSpec BackboneSpec::fixture() {
  BackboneSpec s;
  s.input_size = 24;
  s.input_channels = 3;
  s.layers = {{6, 4, 4, 0, true}, {8, 2, 2, 0, false}};
  return s;
}

BackboneSpec BackboneSpec::stride32(std::size_t dim) {
  BackboneSpec s;
  s.input_size = 224;
  s.input_channels = 3;
  s.layers = {{4, 3, 2, 1, true},
              {8, 3, 2, 1, true},
              {8, 3, 2, 1, true},
              {dim, 3, 2, 1, true},
              {dim, 3, 2, 1, false}};
  return s;
}

void to_json(nlohmann::json& j, const ConvLayerSpec& s) {
  j = {{"out_channels", s.out_channels}, {"kernel", s.kernel},
       {"stride", s.stride}, {"pad", s.pad}, {"relu", s.relu}};
}

void from_json(const nlohmann::json& j, ConvLayerSpec& s) {
  s.out_channels = j.at("out_channels").get<std::size_t>();
  s.kernel = j.value("kernel", std::size_t{1});
  s.stride = j.value("stride", std::size_t{1});
  s.pad = j.value("pad", std::size_t{0});
  s.relu = j.value("relu", true);
}

void to_json(nlohmann::json& j, const BackboneSpec& s) {
  j = {{"type", s.type}};
  if (s.type == "fixed") {
    j["shape"] = s.fixed_features.shape();
    j["values"] = s.fixed_features.data();
  } else {
    j["input_size"] = s.input_size;
    j["input_channels"] = s.input_channels;
    j["layers"] = s.layers;
  }
}

void from_json(const nlohmann::json& j, BackboneSpec& s) {
  s = BackboneSpec{};
  s.type = j.value("type", std::string("conv"));
  if (s.type == "fixed") {
    s.fixed_features = Tensor(j.at("shape").get<std::vector<std::size_t>>(),
                              j.at("values").get<std::vector<double>>());
  } else {
    s.input_size = j.at("input_size").get<std::size_t>();
    s.input_channels = j.value("input_channels", std::size_t{3});
    s.layers = j.at("layers").get<std::vector<ConvLayerSpec>>();
  }
}

Backbone::Backbone(BackboneSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  if (spec_.type != "conv") return;
  Rng rng(seed);
  std::size_t in = spec_.input_channels;
  for (const auto& l : spec_.layers) {
    const double fan_in = static_cast<double>(in * l.kernel * l.kernel);
    params_.push_back(ag::Var::parameter(
        normal_tensor(rng, {l.out_channels, in, l.kernel, l.kernel}, std::sqrt(2.0 / fan_in))));
    params_.push_back(
        ag::Var::parameter(uniform_tensor(rng, {l.out_channels}, 1.0 / std::sqrt(fan_in))));
    in = l.out_channels;
  }
}

ag::Var Backbone::activations(const Image& image) const {
  if (spec_.type == "fixed") return ag::Var::constant(spec_.fixed_features);
  if (image.channels() != spec_.input_channels || image.height() != spec_.input_size ||
      image.width() != spec_.input_size)
    throw PreconditionError("backbone expects " + std::to_string(spec_.input_channels) + "x" +
                            std::to_string(spec_.input_size) + "x" +
                            std::to_string(spec_.input_size) + " input, got " +
                            shape_string(image.tensor().shape()));
  ag::Var x = ag::Var::constant(image.tensor());
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& l = spec_.layers[i];
    x = ag::conv2d(x, params_[2 * i], params_[2 * i + 1], l.stride, l.pad);
    if (l.relu) x = ag::relu(x);
  }
  return x;
}

ag::Var extract_features(const Image& image, const Backbone& backbone) {
  return ag::chw_to_rows(backbone.activations(image));
}

ag::Var concept_logits(const ag::Var& F, const ag::Var& Wc, const ag::Var& bc) {
  return ag::add(ag::matvec(Wc, ag::mean_rows(F)), bc);
}

ag::Var class_logits(const ag::Var& l_c, const ag::Var& Wp) {
  return ag::matvec(Wp, l_c, /*transpose_w=*/true);
}

ag::Var prototype_similarity(const ag::Var& F, const ag::Var& P) {
  return ag::cosine_matrix(F, P);
}

ag::Var gather_gated(const ag::Var& M0, const ag::IndexMatrix& idx) {
  return ag::gather_columns(M0, idx);
}

std::pair<ag::Var, ag::Var> aggregate_prototypes(const ag::Var& M, const ag::IndexMatrix& idx,
                                                 const ag::Var& P) {
  ag::Var w = ag::softmax_rows(M);
  return {w, ag::mean_rows(ag::weighted_rows(w, P, idx))};
}

ag::Var auxiliary_logits(const ag::Var& pooled, const ag::Var& Wa, const ag::Var& ba) {
  return ag::add(ag::matvec(Wa, pooled), ba);
}

LcbmModel::LcbmModel(ModelConfig config, BackboneSpec backbone, std::uint64_t seed)
    : config_(std::move(config)), backbone_(std::move(backbone), seed) {
  config_.validate();
  const auto& spec = backbone_.spec();
  if (spec.feature_dim() != config_.feature_dim || spec.grid_h() != config_.grid_h ||
      spec.grid_w() != config_.grid_w)
    throw ConfigError("backbone produces " + std::to_string(spec.grid_h()) + "x" +
                      std::to_string(spec.grid_w()) + "x" + std::to_string(spec.feature_dim()) +
                      " features, model config expects " + std::to_string(config_.grid_h) +
                      "x" + std::to_string(config_.grid_w) + "x" +
                      std::to_string(config_.feature_dim));
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t K = config_.num_concepts, D = config_.feature_dim, C = config_.num_classes;
  Wc_ = ag::Var::parameter(uniform_tensor(rng, {K, D}, 1.0 / std::sqrt(static_cast<double>(D))));
  bc_ = ag::Var::parameter(Tensor({K}, 0.0));
  Wp_ = ag::Var::parameter(uniform_tensor(rng, {K, C}, 1.0 / std::sqrt(static_cast<double>(K))));
  P_ = ag::Var::parameter(normal_tensor(rng, {K, D}, 0.02));
  Wa_ = ag::Var::parameter(uniform_tensor(rng, {C, D}, 1.0 / std::sqrt(static_cast<double>(D))));
  ba_ = ag::Var::parameter(Tensor({C}, 0.0));
}

std::pair<ag::Var, ag::Var> LcbmModel::predict(const Image& image) const {
  ag::Var F = extract_features(image, backbone_);
  ag::Var l_c = concept_logits(F, Wc_, bc_);
  return {l_c, class_logits(l_c, Wp_)};
}

ForwardOutputs LcbmModel::forward(const Image& image, const ag::IndexMatrix& gated) const {
  if (gated.size() != config_.cells())
    throw PreconditionError("gated index matrix has " + std::to_string(gated.size()) +
                            " rows, model expects HW = " + std::to_string(config_.cells()));
  for (const auto& row : gated)
    if (row.size() != config_.k1)
      throw PreconditionError("gated index rows must hold K1 = " + std::to_string(config_.k1) +
                              " ids");
  ForwardOutputs out;
  out.activations = backbone_.activations(image);
  out.features = ag::chw_to_rows(out.activations);
  if (!out.features.value().all_finite()) throw NumericError("non-finite backbone features");
  out.concept_logits = concept_logits(out.features, Wc_, bc_);
  out.class_logits = class_logits(out.concept_logits, Wp_);
  out.similarity = prototype_similarity(out.features, P_);
  out.gated = gated;
  out.gathered = gather_gated(out.similarity, gated);
  std::tie(out.weights, out.pooled) = aggregate_prototypes(out.gathered, gated, P_);
  out.aux_logits = auxiliary_logits(out.pooled, Wa_, ba_);
  return out;
}

ForwardOutputs LcbmModel::forward(const Image& image, const Tensor& scores) const {
  require_shape(scores, {config_.cells(), config_.num_concepts}, "score matrix");
  return forward(image, top_k1_indices(scores, config_.k1));
}

std::vector<std::pair<std::string, ag::Var>> LcbmModel::named_parameters() const {
  std::vector<std::pair<std::string, ag::Var>> out;
  const auto& bp = backbone_.parameters();
  for (std::size_t i = 0; i < bp.size(); ++i)
    out.emplace_back("backbone." + std::to_string(i / 2) + (i % 2 ? ".bias" : ".weight"), bp[i]);
  out.emplace_back("g_c.weight", Wc_);
  out.emplace_back("g_c.bias", bc_);
  out.emplace_back("W_p", Wp_);
  out.emplace_back("prototypes", P_);
  out.emplace_back("g_a.weight", Wa_);
  out.emplace_back("g_a.bias", ba_);
  return out;
}

void LcbmModel::zero_grad() {
  for (auto& [name, v] : named_parameters()) v.zero_grad();
}

}  // namespace lcbm
