#pragma once

// Small random networks and inputs shared by the model, loss and acceptance
// tests.

#include "lcbm/image.hpp"
#include "lcbm/model.hpp"
#include "lcbm/rng.hpp"

namespace lcbm::testing {

inline Image random_image(Rng& rng, std::size_t channels, std::size_t size) {
  Tensor t({channels, size, size});
  for (auto& v : t.data()) v = rng.uniform();
  return Image(std::move(t));
}

// 24x24 RGB input, two convolutions, D in [2, 8], a 2x2 or 3x3 grid.
inline BackboneSpec random_fixture_spec(Rng& rng) {
  BackboneSpec s;
  s.input_size = 24;
  s.input_channels = 3;
  const std::size_t c1 = 2 + rng.below(5);
  const std::size_t d = 2 + rng.below(7);
  const std::size_t k = rng.below(2) ? 2 : 3;
  s.layers = {{c1, 4, 4, 0, true}, {d, k, k, 0, false}};
  return s;
}

inline ModelConfig config_for(const BackboneSpec& spec, std::size_t K, std::size_t classes,
                              std::size_t k1, std::size_t k2) {
  ModelConfig c;
  c.num_concepts = K;
  c.feature_dim = spec.feature_dim();
  c.num_classes = classes;
  c.grid_h = spec.grid_h();
  c.grid_w = spec.grid_w();
  c.k1 = k1;
  c.k2 = k2;
  return c;
}

inline Tensor random_scores(Rng& rng, std::size_t hw, std::size_t k) {
  Tensor s({hw, k});
  for (auto& v : s.data()) v = rng.uniform(-1.0, 1.0);
  return s;
}

}  // namespace lcbm::testing
