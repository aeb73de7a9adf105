#pragma once

// Shared helpers for comparing reverse-mode gradients against the
// finite-difference oracle and for filling tensors with seeded noise.

#include <cmath>
#include <cstdint>

#include "dcmnet/rng.hpp"
#include "dcmnet/tensor.hpp"

namespace testutil {

inline bool close_rel(double a, double b, double rtol, double atol = 1e-9) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return std::abs(a - b) <= std::max(rtol * scale, atol);
}

inline double max_rel_err(const dcmnet::Tensor& got, const dcmnet::Tensor& want,
                          double atol = 1e-9) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double a = got.values()[i];
    const double b = want.values()[i];
    const double scale = std::max({std::abs(a), std::abs(b), atol});
    worst = std::max(worst, std::abs(a - b) / scale);
  }
  return worst;
}

inline bool grads_match(const std::vector<double>& analytic, const dcmnet::Tensor& fd,
                        double rtol = 1e-6, double atol = 1e-9) {
  if (analytic.size() != fd.size()) return false;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    if (!close_rel(analytic[i], fd.values()[i], rtol, atol)) return false;
  }
  return true;
}

inline dcmnet::Tensor random_tensor(dcmnet::Shape shape, dcmnet::Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
  std::vector<double> v(dcmnet::shape_size(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return dcmnet::Tensor::from_data(std::move(shape), std::move(v));
}

}  // namespace testutil
