#pragma once

#include <functional>
#include <vector>

#include <torch/torch.h>

#include "oracles.hpp"

namespace testutil {

inline torch::TensorOptions f64() { return torch::TensorOptions().dtype(torch::kFloat64); }

inline oracle::Matrix to_matrix(const torch::Tensor& t) {
  auto c = t.to(torch::kFloat64).contiguous();
  oracle::Matrix m(c.size(0), std::vector<double>(c.size(1)));
  auto a = c.accessor<double, 2>();
  for (int64_t i = 0; i < c.size(0); ++i) {
    for (int64_t j = 0; j < c.size(1); ++j) m[i][j] = a[i][j];
  }
  return m;
}

inline oracle::Grid to_grid(const torch::Tensor& t) { return to_matrix(t); }

inline torch::Tensor from_grid(const oracle::Grid& g) {
  auto t = torch::empty({static_cast<int64_t>(g.size()), static_cast<int64_t>(g[0].size())}, f64());
  auto a = t.accessor<double, 2>();
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = 0; j < g[0].size(); ++j) a[i][j] = g[i][j];
  }
  return t;
}

inline double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(std::abs(want), 1e-12);
}

/// ||a - b|| / max(||b||, 1e-12), treating the tensors as flat vectors.
inline double rel_err(const torch::Tensor& a, const torch::Tensor& b) {
  const double num = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).norm().item<double>();
  return num / std::max(b.to(torch::kFloat64).norm().item<double>(), 1e-12);
}

/// Central differences of a scalar function of `x` (float64), same shape as x.
inline torch::Tensor central_diff(const torch::Tensor& x, const std::function<double(const torch::Tensor&)>& f,
                                  double h) {
  auto base = x.detach().clone();
  auto grad = torch::zeros_like(base);
  auto flat = base.view(-1);
  auto g = grad.view(-1);
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double v = flat[i].item<double>();
    flat[i] = v + h;
    const double up = f(base);
    flat[i] = v - h;
    const double down = f(base);
    flat[i] = v;
    g[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace testutil
