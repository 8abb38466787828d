#pragma once

// Central finite differences, kept independent of the autograd engine.

#include <cmath>
#include <functional>

#include "lcbm/rng.hpp"
#include "lcbm/tensor.hpp"

namespace lcbm::testing {

inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f,
                               const Tensor& at, double step = 1e-5) {
  Tensor g(at.shape());
  Tensor x = at;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = f(x);
    x[i] = orig - step;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

inline Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape,
                            double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

// max |a-b| / max(1e-8, max |b|)
inline double relative_error(const Tensor& a, const Tensor& b) {
  double num = 0.0, den = 1e-8;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return num / den;
}

}  // namespace lcbm::testing
