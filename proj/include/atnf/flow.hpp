#pragma once

#include <array>
#include <cstdio>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "atnf/model.hpp"
#include "atnf/saliency.hpp"

namespace atnf {

// Mean saliency over directed pairs: S_ab averages I(i, j) with the source
// token j in group a and the destination token i in group b, restricted to
// the causal region i >= j. Groups: s = system, v = visual, t = instruction
// plus response. An empty pair set is absent rather than zero.
struct flow_summary {
  std::size_t layer = 0;
  std::optional<real> sv, vv, vt, st, tt, ss;

  static constexpr std::array<const char*, 6> names = {"S_sv", "S_vv", "S_vt", "S_st", "S_tt", "S_ss"};
  std::array<std::optional<real>, 6> values() const { return {sv, vv, vt, st, tt, ss}; }
};

struct flow_options {
  bool vv_lower_triangle = true;  // false: average S_vv over the full visual block, zeros included
};

inline std::optional<real> pair_mean(const matrix& I, index_range src, index_range dst, bool causal) {
  real sum = 0;
  std::size_t count = 0;
  for (std::size_t i = dst.begin; i < dst.end; ++i)
    for (std::size_t j = src.begin; j < src.end; ++j) {
      if (causal && j > i) continue;
      sum += I(i, j);
      ++count;
    }
  if (count == 0) return std::nullopt;
  return sum / static_cast<real>(count);
}

inline flow_summary compute_flow_summary(const matrix& I, const token_segmentation& seg, std::size_t layer = 0,
                                         const flow_options& opt = {}) {
  if (I.rows != I.cols) throw dimension_error("flow_summary: saliency must be square");
  seg.validate(I.rows);
  const index_range s = seg.sys, v = seg.vis, t = seg.text(I.rows);
  flow_summary f;
  f.layer = layer;
  f.sv = pair_mean(I, s, v, true);
  f.vv = pair_mean(I, v, v, opt.vv_lower_triangle);
  f.vt = pair_mean(I, v, t, true);
  f.st = pair_mean(I, s, t, true);
  f.tt = pair_mean(I, t, t, true);
  f.ss = pair_mean(I, s, s, true);
  return f;
}

inline std::vector<flow_summary> compute_flow_summary(std::span<const saliency_matrix> layers,
                                                      const token_segmentation& seg, const flow_options& opt = {}) {
  std::vector<flow_summary> out;
  out.reserve(layers.size());
  for (const auto& s : layers) out.push_back(compute_flow_summary(s.values, seg, s.layer, opt));
  return out;
}

// Element-wise mean over samples; a value is absent if absent in any sample.
inline std::vector<flow_summary> average_flow(std::span<const std::vector<flow_summary>> samples) {
  if (samples.empty()) return {};
  std::vector<flow_summary> out = samples[0];
  for (std::size_t l = 0; l < out.size(); ++l) {
    std::array<std::optional<real>*, 6> dst = {&out[l].sv, &out[l].vv, &out[l].vt,
                                               &out[l].st, &out[l].tt, &out[l].ss};
    for (std::size_t k = 0; k < 6; ++k) {
      real sum = 0;
      bool present = true;
      for (const auto& s : samples) {
        if (s.size() != out.size()) throw dimension_error("average_flow: layer count differs between samples");
        const auto v = s[l].values()[k];
        if (!v) present = false;
        else sum += *v;
      }
      *dst[k] = present ? std::optional<real>(sum / static_cast<real>(samples.size())) : std::nullopt;
    }
  }
  return out;
}

inline std::string format_real(real v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string format_optional(const std::optional<real>& v) { return v ? format_real(*v) : "NA"; }

inline void write_flow_csv(std::ostream& os, std::span<const flow_summary> rows) {
  os << "layer";
  for (const char* n : flow_summary::names) os << ',' << n;
  os << '\n';
  for (const auto& f : rows) {
    os << f.layer;
    for (const auto& v : f.values()) os << ',' << format_optional(v);
    os << '\n';
  }
}

}  // namespace atnf
