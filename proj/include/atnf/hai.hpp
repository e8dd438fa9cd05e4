#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <spdlog/spdlog.h>

#include "atnf/attention.hpp"
#include "atnf/decoder.hpp"
#include "atnf/model.hpp"
#include "atnf/tai.hpp"

namespace atnf {

// Head-level attention intervention: head typing from text-query attention
// mass and suppression of text/system-dominant heads.

enum class token_group { vis, txt, sys };

inline const char* group_name(token_group g) {
  switch (g) {
    case token_group::vis: return "vis";
    case token_group::txt: return "txt";
    case token_group::sys: return "sys";
  }
  return "?";
}

// Layer interval [first, last); an absent `last` means "through the final layer".
struct layer_span {
  std::size_t first = 0;
  std::optional<std::size_t> last;

  bool contains(std::size_t layer) const { return layer >= first && (!last || layer < *last); }
};

struct hai_params {
  real lambda_vis = 1;    // z-score multiplier for visual heads
  real lambda_txt = 0.3;  // per-row fraction thresholds for dominant heads
  real lambda_sys = 0.8;
  real alpha_txt = 1;
  real alpha_sys = 0.6;
  layer_span txt_layers{0, 8};
  layer_span sys_layers{0, std::nullopt};
  bool refresh_each_step = false;  // re-type text/system heads from every decode row

  void validate() const {
    if (!(alpha_txt >= 0 && alpha_txt <= 1)) throw config_error("hai.alpha_txt must lie in [0, 1]");
    if (!(alpha_sys >= 0 && alpha_sys <= 1)) throw config_error("hai.alpha_sys must lie in [0, 1]");
    for (real v : {lambda_vis, lambda_txt, lambda_sys})
      if (!std::isfinite(v)) throw config_error("hai lambdas must be finite");
    for (const auto* s : {&txt_layers, &sys_layers})
      if (s->last && *s->last < s->first) throw config_error("hai layer range is inverted");
  }
};

// Query rows of the text group at prefill: the instruction tokens.
inline index_range group_columns(const token_segmentation& seg, token_group g, std::size_t cols) {
  switch (g) {
    case token_group::vis: return seg.vis;
    case token_group::sys: return seg.sys;
    case token_group::txt: return {seg.instr.begin, cols};
  }
  return {};
}

// Per-head mean over query rows of the attention mass on one column group.
inline std::vector<real> head_group_mass(std::span<const attention_view> heads, const token_segmentation& seg,
                                         token_group g, index_range query_rows) {
  if (query_rows.empty()) throw contract_error("head_group_mass: empty text query range");
  std::vector<real> out;
  out.reserve(heads.size());
  for (const auto& a : heads) {
    if (!a.has_query(query_rows.begin) || !a.has_query(query_rows.end - 1))
      throw dimension_error("head_group_mass: attention does not cover the text query rows");
    const index_range cols = group_columns(seg, g, a.cols);
    if (cols.empty()) throw contract_error(std::string("head_group_mass: empty ") + group_name(g) + " range");
    if (cols.end > a.cols) throw dimension_error("head_group_mass: group range outside attention columns");
    real total = 0;
    for (std::size_t i = query_rows.begin; i < query_rows.end; ++i)
      for (std::size_t j = cols.begin; j < cols.end; ++j) total += a.at(i, j);
    out.push_back(total / static_cast<real>(query_rows.size()));
  }
  return out;
}

inline std::vector<real> head_group_mass(std::span<const attention_view> heads, const token_segmentation& seg,
                                         token_group g) {
  return head_group_mass(heads, seg, g, seg.instr);
}

struct head_stats {
  std::size_t layer = 0;
  std::vector<real> vis, txt, sys;
  real mean_vis = 0;
  real std_vis = 0;  // population standard deviation
};

inline void fill_vis_moments(head_stats& s) {
  const auto n = static_cast<real>(s.vis.size());
  if (s.vis.empty()) return;
  real sum = 0;
  for (real v : s.vis) sum += v;
  s.mean_vis = sum / n;
  real ss = 0;
  for (real v : s.vis) ss += (v - s.mean_vis) * (v - s.mean_vis);
  s.std_vis = std::sqrt(ss / n);
}

inline head_stats compute_head_stats(std::span<const attention_view> heads, const token_segmentation& seg,
                                     std::size_t layer, index_range query_rows) {
  head_stats s;
  s.layer = layer;
  const auto zeros = std::vector<real>(heads.size(), 0.0);
  s.vis = seg.vis.empty() ? zeros : head_group_mass(heads, seg, token_group::vis, query_rows);
  s.txt = head_group_mass(heads, seg, token_group::txt, query_rows);
  s.sys = seg.sys.empty() ? zeros : head_group_mass(heads, seg, token_group::sys, query_rows);
  fill_vis_moments(s);
  return s;
}

inline head_stats compute_head_stats(std::span<const attention_view> heads, const token_segmentation& seg,
                                     std::size_t layer = 0) {
  return compute_head_stats(heads, seg, layer, seg.instr);
}

// { h : A_vis[h] > mean + lambda * std }
inline std::vector<std::size_t> identify_visual_heads(const head_stats& s, real lambda_vis) {
  if (s.vis.size() < 2) throw contract_error("identify_visual_heads: needs at least two heads");
  std::vector<std::size_t> out;
  const auto [lo, hi] = std::minmax_element(s.vis.begin(), s.vis.end());
  if (*lo == *hi) return out;  // zero spread: no head exceeds the mean
  const real cut = s.mean_vis + lambda_vis * s.std_vis;
  for (std::size_t h = 0; h < s.vis.size(); ++h)
    if (s.vis[h] > cut) out.push_back(h);
  return out;
}

// { h : A_group[h] > lambda }, masses as per-row fractions.
inline std::vector<std::size_t> identify_dominant_heads(const head_stats& s, token_group g, real lambda) {
  if (g == token_group::vis) throw contract_error("identify_dominant_heads: group must be txt or sys");
  if (lambda < 0 || lambda > 1)
    spdlog::warn("dominant-head threshold {} for group {} lies outside [0, 1]", lambda, group_name(g));
  const auto& mass = g == token_group::txt ? s.txt : s.sys;
  std::vector<std::size_t> out;
  for (std::size_t h = 0; h < mass.size(); ++h)
    if (mass[h] > lambda) out.push_back(h);
  return out;
}

inline head_sets classify_heads(const head_stats& s, const hai_params& p) {
  head_sets hs;
  if (s.vis.size() >= 2) hs.visual = identify_visual_heads(s, p.lambda_vis);
  hs.text = identify_dominant_heads(s, token_group::txt, p.lambda_txt);
  hs.system = identify_dominant_heads(s, token_group::sys, p.lambda_sys);
  return hs;
}

// Types every head from the captured prefill attention and caches the result in the state.
inline head_classification classify_heads_at_prefill(decode_state& st, const hai_params& p,
                                                     std::size_t num_layers, std::size_t num_heads) {
  if (!st.capture.enabled() || st.records.empty())
    throw missing_data_error("classify_heads_at_prefill: prefill attention was not captured");
  head_classification hc;
  hc.layers.resize(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l) {
    const auto views = layer_views(st.records, l, num_heads);
    hc.layers[l] = classify_heads(compute_head_stats(views, st.segmentation, l), p);
  }
  st.heads = hc;
  return hc;
}

struct degenerate_row {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t query = 0;
  bool fallback_applied = false;  // uniform over the unscaled support
};

// Scales text columns of text-dominant heads by (1 - alpha_txt) and system
// columns of system-dominant heads by (1 - alpha_sys) on text query rows,
// then renormalizes. Returns rows whose mass was entirely suppressed.
inline std::vector<degenerate_row> hai_rewrite(attention_rows& rows, const head_sets& sets, const hai_params& p,
                                               const token_segmentation& seg, std::size_t layer, std::size_t head) {
  std::vector<degenerate_row> degenerate;
  if (head_sets::has(sets.visual, head)) return degenerate;  // visual heads are never suppressed
  const bool txt = p.alpha_txt != 0 && p.txt_layers.contains(layer) && head_sets::has(sets.text, head);
  const bool sys = p.alpha_sys != 0 && p.sys_layers.contains(layer) && head_sets::has(sets.system, head) &&
                   !seg.sys.empty();
  if (!txt && !sys) return degenerate;
  const real keep_txt = 1 - p.alpha_txt, keep_sys = 1 - p.alpha_sys;
  for (std::size_t r = 0; r < rows.rows; ++r) {
    const std::size_t q = rows.query(r);
    if (q < seg.instr.begin) continue;
    auto row = rows.row(r);
    const std::size_t valid = rows.support(r);
    const index_range tcols{seg.instr.begin, valid};
    const index_range scols{seg.sys.begin, std::min(seg.sys.end, valid)};
    if (txt)
      for (std::size_t j = tcols.begin; j < tcols.end; ++j) row[j] *= keep_txt;
    if (sys)
      for (std::size_t j = scols.begin; j < scols.end; ++j) row[j] *= keep_sys;
    real sum = 0;
    for (std::size_t j = 0; j < valid; ++j) sum += row[j];
    if (sum > 0 && std::isfinite(sum)) {
      for (std::size_t j = 0; j < valid; ++j) row[j] /= sum;
      continue;
    }
    // All mass suppressed: fall back to uniform over columns outside the scaled groups.
    auto scaled = [&](std::size_t j) { return (txt && tcols.contains(j)) || (sys && scols.contains(j)); };
    std::size_t support = 0;
    for (std::size_t j = 0; j < valid; ++j)
      if (!scaled(j)) ++support;
    degenerate_row d{layer, head, q, support > 0};
    if (support > 0) {
      for (std::size_t j = 0; j < valid; ++j) row[j] = scaled(j) ? 0.0 : 1.0 / static_cast<real>(support);
    } else {
      // Nothing left to renormalize onto; restore the original row.
      for (std::size_t j = 0; j < valid; ++j) {
        const real keep = (txt && tcols.contains(j)) ? keep_txt : keep_sys;
        row[j] = keep > 0 ? row[j] / keep : 1.0 / static_cast<real>(valid);
      }
    }
    spdlog::debug("hai_rewrite: degenerate row at layer {} head {} query {}", layer, head, q);
    degenerate.push_back(d);
  }
  return degenerate;
}

// Zeroes the attention output of the listed (layer, head) pairs.
class head_mask_hook final : public attention_hook {
 public:
  head_mask_hook() = default;
  head_mask_hook(const model_config& c, std::span<const std::pair<std::size_t, std::size_t>> heads) {
    for (const auto& [l, h] : heads) {
      if (l >= c.num_layers || h >= c.num_heads)
        throw dimension_error("mask_heads: (" + std::to_string(l) + ", " + std::to_string(h) +
                              ") outside model dimensions");
      masked_.insert({l, h});
    }
  }
  bool head_masked(std::size_t layer, std::size_t head) const override { return masked_.count({layer, head}) > 0; }
  const std::set<std::pair<std::size_t, std::size_t>>& heads() const { return masked_; }

 private:
  std::set<std::pair<std::size_t, std::size_t>> masked_;
};

inline head_mask_hook mask_heads(const model_config& c, std::span<const std::pair<std::size_t, std::size_t>> heads) {
  return head_mask_hook(c, heads);
}

}  // namespace atnf
