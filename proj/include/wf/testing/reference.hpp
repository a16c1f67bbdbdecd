#pragma once

// Test-only reference implementations. Everything here is written as plain
// index loops over std::vector buffers, independent of the Tensor op
// implementations they are used to check.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "wf/rng.hpp"
#include "wf/tensor.hpp"

namespace wf::testing {

// c[m,n] = sum_k a[m,k] * b[k,n], plain triple loop.
inline std::vector<double> matmul3(const std::vector<double>& a, const std::vector<double>& b,
                                   std::int64_t m, std::int64_t k, std::int64_t n) {
  std::vector<double> c(static_cast<std::size_t>(m * n), 0.0);
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::int64_t kk = 0; kk < k; ++kk) {
        acc += a[static_cast<std::size_t>(i * k + kk)] * b[static_cast<std::size_t>(kk * n + j)];
      }
      c[static_cast<std::size_t>(i * n + j)] = acc;
    }
  }
  return c;
}

// Row softmax with max subtraction; -inf rows come back all-zero.
inline std::vector<double> softmax_row(const std::vector<double>& x) {
  const double kInf = std::numeric_limits<double>::infinity();
  double mx = -kInf;
  for (const double v : x) mx = std::max(mx, v);
  std::vector<double> y(x.size(), 0.0);
  if (mx == -kInf) return y;
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = x[i] == -kInf ? 0.0 : std::exp(x[i] - mx);
    sum += y[i];
  }
  for (double& v : y) v /= sum;
  return y;
}

inline std::vector<double> layer_norm_row(const std::vector<double>& x,
                                          const std::vector<double>& gain,
                                          const std::vector<double>& bias, double eps) {
  const std::size_t d = x.size();
  double mean = 0.0;
  for (const double v : x) mean += v;
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (const double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);
  std::vector<double> y(d);
  for (std::size_t i = 0; i < d; ++i) {
    y[i] = gain[i] * (x[i] - mean) / std::sqrt(var + eps) + bias[i];
  }
  return y;
}

// Central finite differences of `loss_fn` with respect to every element of
// every tensor in `leaves`, compared against the autodiff gradients already
// stored on the leaves. Returns the worst relative error.
inline double max_grad_error(const std::vector<wf::TensorD*>& leaves,
                             const std::function<double()>& loss_fn, double h = 1e-5) {
  double worst = 0.0;
  for (wf::TensorD* leaf : leaves) {
    auto values = leaf->data();
    const auto grads = leaf->grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double keep = values[i];
      values[i] = keep + h;
      const double up = loss_fn();
      values[i] = keep - h;
      const double down = loss_fn();
      values[i] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double ad = grads[i];
      const double rel = std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), 1e-2});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

inline void fill_uniform(wf::TensorD& t, wf::Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (auto& v : t.data()) v = lo + (hi - lo) * rng.uniform();
}

inline void fill_uniform(wf::TensorF& t, wf::Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (auto& v : t.data()) v = static_cast<float>(lo + (hi - lo) * rng.uniform());
}

}  // namespace wf::testing
