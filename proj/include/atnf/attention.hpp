#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "atnf/core.hpp"
#include "atnf/model.hpp"
#include "atnf/tensor.hpp"

namespace atnf {

// Softmax over the causal prefix of one row: entries [0, valid) are scored,
// the rest are set to 0.
inline void causal_softmax_row(std::span<const real> scores, std::size_t valid, std::span<real> out) {
  if (valid == 0) throw contract_error("causal_softmax: all-masked row");
  valid = std::min(valid, scores.size());
  real mx = scores[0];
  for (std::size_t j = 0; j < valid; ++j) {
    if (!std::isfinite(scores[j])) throw contract_error("causal_softmax: non-finite score");
    mx = std::max(mx, scores[j]);
  }
  real sum = 0;
  for (std::size_t j = 0; j < valid; ++j) {
    out[j] = std::exp(scores[j] - mx);
    sum += out[j];
  }
  for (std::size_t j = 0; j < valid; ++j) out[j] /= sum;
  for (std::size_t j = valid; j < out.size(); ++j) out[j] = 0;
}

// Row r of `scores` is the query at absolute position first_query + r; keys are columns.
inline matrix causal_softmax(const matrix& scores, std::size_t first_query = 0) {
  matrix out(scores.rows, scores.cols);
  for (std::size_t r = 0; r < scores.rows; ++r)
    causal_softmax_row(scores.row(r), std::min(first_query + r + 1, scores.cols), out.row(r));
  return out;
}

// Post-softmax attention of one head for a block of query positions.
struct attention_record {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t first_query = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<real> data;

  real at(std::size_t query, std::size_t key) const { return data[(query - first_query) * cols + key]; }
  std::span<const real> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  friend bool operator==(const attention_record&, const attention_record&) = default;
};

// Read-only view of one head's attention block (absolute query indexing via at()).
struct attention_view {
  std::span<const real> data;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t first_query = 0;

  attention_view() = default;
  attention_view(std::span<const real> d, std::size_t r, std::size_t c, std::size_t fq)
      : data(d), rows(r), cols(c), first_query(fq) {}
  attention_view(const attention_record& rec)  // NOLINT: implicit by intent
      : data(rec.data), rows(rec.rows), cols(rec.cols), first_query(rec.first_query) {}

  bool has_query(std::size_t q) const { return q >= first_query && q < first_query + rows; }
  real at(std::size_t query, std::size_t key) const { return data[(query - first_query) * cols + key]; }
};

// Mutable block of attention rows handed to hooks.
struct attention_rows {
  std::span<real> data;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t first_query = 0;

  std::span<real> row(std::size_t r) { return data.subspan(r * cols, cols); }
  std::span<const real> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::size_t query(std::size_t r) const { return first_query + r; }
  // Number of unmasked keys for row r.
  std::size_t support(std::size_t r) const { return std::min(query(r) + 1, cols); }
};

enum class hook_phase { prefill, decode };

struct hook_context {
  std::size_t layer = 0;
  std::size_t head = 0;
  hook_phase phase = hook_phase::prefill;
  const token_segmentation* segmentation = nullptr;
};

// All heads of one layer for the current query block, before any rewrite.
struct layer_attention {
  std::size_t layer = 0;
  hook_phase phase = hook_phase::prefill;
  const token_segmentation* segmentation = nullptr;
  std::vector<attention_view> heads;
};

// Seam between the decoder and the interventions. Rows are post-softmax and
// pre-value-multiply. observe_layer sees every head of a layer before any
// rewrite of that layer; rewrite must keep rows stochastic and causal.
class attention_hook {
 public:
  virtual ~attention_hook() = default;
  virtual void observe_layer(const layer_attention&) {}
  virtual void rewrite(const hook_context&, attention_rows&) {}
  virtual bool head_masked(std::size_t /*layer*/, std::size_t /*head*/) const { return false; }
};

class identity_hook final : public attention_hook {};

// Adapts a plain rewrite function to the hook interface.
class function_hook final : public attention_hook {
 public:
  using rewrite_fn = std::function<void(const hook_context&, attention_rows&)>;
  explicit function_hook(rewrite_fn fn) : fn_(std::move(fn)) {}
  void rewrite(const hook_context& ctx, attention_rows& rows) override { fn_(ctx, rows); }

 private:
  rewrite_fn fn_;
};

// Runs several hooks in order; a head is masked if any member masks it.
class hook_chain final : public attention_hook {
 public:
  hook_chain() = default;
  hook_chain(std::initializer_list<attention_hook*> hooks) : hooks_(hooks) {}
  void add(attention_hook* h) { hooks_.push_back(h); }

  void observe_layer(const layer_attention& la) override {
    for (auto* h : hooks_) h->observe_layer(la);
  }
  void rewrite(const hook_context& ctx, attention_rows& rows) override {
    for (auto* h : hooks_) h->rewrite(ctx, rows);
  }
  bool head_masked(std::size_t layer, std::size_t head) const override {
    return std::any_of(hooks_.begin(), hooks_.end(), [&](auto* h) { return h->head_masked(layer, head); });
  }

 private:
  std::vector<attention_hook*> hooks_;
};

inline constexpr real row_sum_tolerance = 1e-6;

// Hook boundary check: finite, causal zeros, unit row sums.
inline void check_attention_rows(const attention_rows& rows, const hook_context& ctx,
                                 real tol = row_sum_tolerance) {
  for (std::size_t r = 0; r < rows.rows; ++r) {
    const auto row = rows.row(r);
    const std::size_t valid = rows.support(r);
    real sum = 0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (!std::isfinite(row[j]) || row[j] < 0)
        throw contract_error("attention hook produced an invalid weight at layer " + std::to_string(ctx.layer) +
                             " head " + std::to_string(ctx.head));
      if (j >= valid && row[j] != 0)
        throw contract_error("attention hook broke causality at layer " + std::to_string(ctx.layer) + " head " +
                             std::to_string(ctx.head) + " query " + std::to_string(rows.query(r)));
      sum += row[j];
    }
    if (std::abs(sum - 1.0) > tol)
      throw contract_error("attention hook row does not sum to 1 at layer " + std::to_string(ctx.layer) +
                           " head " + std::to_string(ctx.head) + " query " + std::to_string(rows.query(r)));
  }
}

// Classification caches shared by the interventions and the decode state.
struct visual_token_classes {
  std::size_t layer = 0;
  std::size_t vis_offset = 0;  // absolute position of visual index 0
  std::vector<std::size_t> salient;  // indices relative to vis_offset
  std::vector<std::size_t> sink;

  friend bool operator==(const visual_token_classes&, const visual_token_classes&) = default;
};

struct head_sets {
  std::vector<std::size_t> visual;
  std::vector<std::size_t> text;
  std::vector<std::size_t> system;

  static bool has(const std::vector<std::size_t>& set, std::size_t h) {
    return std::find(set.begin(), set.end(), h) != set.end();
  }
  friend bool operator==(const head_sets&, const head_sets&) = default;
};

struct head_classification {
  std::vector<head_sets> layers;
  friend bool operator==(const head_classification&, const head_classification&) = default;
};

}  // namespace atnf
