#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "atnf/core.hpp"

namespace atnf {

// Rotation frequency of plane i for a head of width head_dim.
inline real rope_frequency(std::size_t plane, std::size_t head_dim, real base) {
  return std::pow(base, -2.0 * static_cast<real>(plane) / static_cast<real>(head_dim));
}

// Rotates consecutive pairs (v[2i], v[2i+1]) by position * base^(-2i/d), d = v.size().
inline void apply_rope(std::span<real> v, std::size_t position, real base) {
  if (v.size() % 2 != 0) throw dimension_error("apply_rope: odd-length vector");
  const std::size_t d = v.size();
  for (std::size_t i = 0; i < d / 2; ++i) {
    const real angle = static_cast<real>(position) * rope_frequency(i, d, base);
    const real c = std::cos(angle), s = std::sin(angle);
    const real x = v[2 * i], y = v[2 * i + 1];
    v[2 * i] = x * c - y * s;
    v[2 * i + 1] = x * s + y * c;
  }
}

// Precomputed cos/sin tables for every position up to max_len; rotates a
// whole model-dim row head by head. Same angles as apply_rope.
class rope_table {
 public:
  rope_table() = default;
  rope_table(std::size_t max_len, std::size_t head_dim, real base)
      : half_(head_dim / 2), cos_(max_len * half_), sin_(max_len * half_) {
    if (head_dim % 2 != 0) throw dimension_error("rope_table: odd head_dim");
    for (std::size_t p = 0; p < max_len; ++p)
      for (std::size_t i = 0; i < half_; ++i) {
        const real angle = static_cast<real>(p) * rope_frequency(i, head_dim, base);
        cos_[p * half_ + i] = std::cos(angle);
        sin_[p * half_ + i] = std::sin(angle);
      }
  }

  std::size_t max_length() const { return half_ == 0 ? 0 : cos_.size() / half_; }

  // sign = +1 rotates forward, -1 applies the inverse (transpose) rotation.
  void rotate(std::span<real> row, std::size_t position, real sign = 1) const {
    const real* c = cos_.data() + position * half_;
    const real* s = sin_.data() + position * half_;
    const std::size_t heads = row.size() / (2 * half_);
    for (std::size_t h = 0; h < heads; ++h) {
      real* v = row.data() + h * 2 * half_;
      for (std::size_t i = 0; i < half_; ++i) {
        const real x = v[2 * i], y = v[2 * i + 1];
        const real si = sign * s[i];
        v[2 * i] = x * c[i] - y * si;
        v[2 * i + 1] = x * si + y * c[i];
      }
    }
  }

 private:
  std::size_t half_ = 0;
  std::vector<real> cos_, sin_;
};

}  // namespace atnf
