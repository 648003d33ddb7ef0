#pragma once

#include "sdlm/rng.hpp"
#include "sdlm/tensor.hpp"

namespace sdlm {

/// Trainable rows x cols matrix with N(0, stddev^2) entries.
inline Tensor normal_param(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::vector<double> d(rows * cols);
  for (auto& v : d) v = stddev * rng.normal();
  Tensor t({rows, cols}, std::move(d));
  t.set_requires_grad();
  return t;
}

inline Tensor const_param(std::size_t rows, std::size_t cols, double value) {
  Tensor t = Tensor::full(rows, cols, value);
  t.set_requires_grad();
  return t;
}

inline Tensor scalar_param(double value) {
  Tensor t = Tensor::scalar(value);
  t.set_requires_grad();
  return t;
}

}  // namespace sdlm
