#pragma once

#include <random>
#include <vector>

#include "kws/tensor.hpp"

namespace kws::testing {

inline Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.at(i) = dist(rng);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, std::abs(a.at(i) - b.at(i)));
  }
  return worst;
}

}  // namespace kws::testing
