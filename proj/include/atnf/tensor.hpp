#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "atnf/core.hpp"

namespace atnf {

// Dense row-major matrix. Linear-layer weights are stored [out x in].
struct matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<real> data;

  matrix() = default;
  matrix(std::size_t r, std::size_t c, real fill = 0) : rows(r), cols(c), data(r * c, fill) {}

  real& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  real operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<real> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const real> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  friend bool operator==(const matrix&, const matrix&) = default;
};

inline real dot(std::span<const real> a, std::span<const real> b) {
  real acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// y = W x
inline void matvec(const matrix& w, std::span<const real> x, std::span<real> y) {
  for (std::size_t r = 0; r < w.rows; ++r) y[r] = dot(w.row(r), x);
}

// y += W^T g   (backward of y = W x with respect to x)
inline void matvec_transposed_add(const matrix& w, std::span<const real> g, std::span<real> y) {
  for (std::size_t r = 0; r < w.rows; ++r) {
    const real gr = g[r];
    if (gr == 0) continue;
    const auto wr = w.row(r);
    for (std::size_t c = 0; c < w.cols; ++c) y[c] += gr * wr[c];
  }
}

inline constexpr real rms_norm_eps = 1e-5;

// Returns the inverse RMS so callers can reuse it for the backward pass.
inline real rms_norm(std::span<const real> x, std::span<const real> gain, std::span<real> out) {
  real ss = 0;
  for (real v : x) ss += v * v;
  const real inv = 1.0 / std::sqrt(ss / static_cast<real>(x.size()) + rms_norm_eps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gain[i] * x[i] * inv;
  return inv;
}

inline real silu(real u) { return u / (1.0 + std::exp(-u)); }

inline real silu_grad(real u) {
  const real s = 1.0 / (1.0 + std::exp(-u));
  return s * (1.0 + u * (1.0 - s));
}

inline bool all_finite(std::span<const real> v) {
  for (real x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace atnf
