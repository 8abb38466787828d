#pragma once

#include <vector>

#include "lcbm/rng.hpp"
#include "lcbm/tensor.hpp"

namespace lcbm::detail {

inline Tensor normal_tensor(Rng& rng, std::vector<std::size_t> shape, double stddev) {
  Tensor t(std::move(shape));
  for (auto& x : t.data()) x = rng.normal() * stddev;
  return t;
}

inline Tensor uniform_tensor(Rng& rng, std::vector<std::size_t> shape, double bound) {
  Tensor t(std::move(shape));
  for (auto& x : t.data()) x = rng.uniform(-bound, bound);
  return t;
}

}  // namespace lcbm::detail
