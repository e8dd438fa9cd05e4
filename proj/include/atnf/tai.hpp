#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "atnf/attention.hpp"
#include "atnf/model.hpp"

namespace atnf {

// Token-level attention intervention: per-layer visual sink / salient tokens
// from intra-visual attention, then rescaling of text-query attention.

struct tai_params {
  real k = 20;      // salient column scale
  real delta = 20;  // sink column scale (any positive value; not forced below 1)
  real tau_salient = 1.0 / 20;
  real tau_sink = 0.5;
  std::size_t start_layer = 2;

  void validate() const {
    if (!(k > 0) || !std::isfinite(k)) throw config_error("tai.k must be a finite value > 0");
    if (!(delta > 0) || !std::isfinite(delta)) throw config_error("tai.delta must be a finite value > 0");
    if (!(tau_salient > 0 && tau_salient <= 1)) throw config_error("tai.tau_salient must lie in (0, 1]");
    if (!(tau_sink > 0 && tau_sink <= 1)) throw config_error("tai.tau_sink must lie in (0, 1]");
    if (!(tau_sink > tau_salient)) throw config_error("tai.tau_sink must exceed tai.tau_salient");
  }
};

struct reception_scores {
  std::size_t layer = 0;
  std::size_t vis_offset = 0;
  std::vector<real> scores;  // indexed by visual token (relative to vis_offset)
};

// R(j) = (1/H) sum_h sum_{i in vis, i != j} A_h[i, j]
inline reception_scores compute_reception_scores(std::span<const attention_view> heads,
                                                 const token_segmentation& seg, std::size_t layer = 0) {
  if (heads.empty()) throw contract_error("reception_scores: no heads supplied");
  const auto vis = seg.vis;
  reception_scores out{layer, vis.begin, std::vector<real>(vis.size(), 0.0)};
  for (const auto& a : heads) {
    if (vis.empty()) break;
    if (!a.has_query(vis.begin) || !a.has_query(vis.end - 1) || a.cols < vis.end)
      throw dimension_error("reception_scores: attention does not span the visual block");
  }
  for (const auto& a : heads)
    for (std::size_t i = vis.begin; i < vis.end; ++i)
      for (std::size_t j = vis.begin; j < vis.end; ++j)
        if (i != j) out.scores[j - vis.begin] += a.at(i, j);
  const real inv_h = 1.0 / static_cast<real>(heads.size());
  for (real& r : out.scores) r *= inv_h;
  return out;
}

// Gathers the records of one layer; every head 0..num_heads-1 must be present.
inline std::vector<attention_view> layer_views(std::span<const attention_record> records, std::size_t layer,
                                               std::size_t num_heads) {
  std::vector<attention_view> views(num_heads);
  std::vector<bool> seen(num_heads, false);
  for (const auto& r : records) {
    if (r.layer != layer) continue;
    if (r.head >= num_heads) throw dimension_error("attention record head index out of range");
    views[r.head] = attention_view(r);
    seen[r.head] = true;
  }
  for (std::size_t h = 0; h < num_heads; ++h)
    if (!seen[h])
      throw missing_data_error("missing attention for layer " + std::to_string(layer) + " head " + std::to_string(h));
  return views;
}

// { j : R(j) > tau * max R }, strict.
inline std::vector<std::size_t> threshold_select(std::span<const real> scores, real tau) {
  if (scores.empty()) throw contract_error("threshold_select: empty score vector");
  if (!(tau > 0 && tau <= 1)) throw config_error("threshold_select: tau must lie in (0, 1]");
  const real mx = *std::max_element(scores.begin(), scores.end());
  const real cut = tau * mx;
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (scores[j] > cut) out.push_back(j);
  return out;
}

// sink = select(tau_sink); salient = select(tau_salient) minus sink.
inline visual_token_classes classify_visual_tokens(const reception_scores& r, const tai_params& p) {
  visual_token_classes c;
  c.layer = r.layer;
  c.vis_offset = r.vis_offset;
  if (r.scores.empty()) return c;
  c.sink = threshold_select(r.scores, p.tau_sink);
  for (std::size_t j : threshold_select(r.scores, p.tau_salient))
    if (!std::binary_search(c.sink.begin(), c.sink.end(), j)) c.salient.push_back(j);
  return c;
}

// Scales salient columns by k and sink columns by delta on text query rows
// (query >= instr.begin), then renormalizes each modified row. Rows whose
// scales are all 1 are left bit-identical.
inline void tai_rewrite(attention_rows& rows, const visual_token_classes& classes, const tai_params& p,
                        const token_segmentation& seg) {
  if (rows.cols == 0) throw contract_error("tai_rewrite: empty rows");
  const bool scale_sink = p.delta != 1 && !classes.sink.empty();
  const bool scale_salient = p.k != 1 && !classes.salient.empty();
  if (!scale_sink && !scale_salient) return;
  for (std::size_t r = 0; r < rows.rows; ++r) {
    if (rows.query(r) < seg.instr.begin) continue;
    auto row = rows.row(r);
    const std::size_t valid = rows.support(r);
    if (scale_sink)
      for (std::size_t j : classes.sink)
        if (classes.vis_offset + j < valid) row[classes.vis_offset + j] *= p.delta;
    if (scale_salient)
      for (std::size_t j : classes.salient)
        if (classes.vis_offset + j < valid) row[classes.vis_offset + j] *= p.k;
    real sum = 0;
    for (std::size_t j = 0; j < valid; ++j) sum += row[j];
    if (!std::isfinite(sum) || !(sum > 0)) throw contract_error("tai_rewrite: scaling produced a non-finite row");
    for (std::size_t j = 0; j < valid; ++j) row[j] /= sum;
  }
}

}  // namespace atnf
