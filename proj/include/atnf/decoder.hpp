#pragma once

#include <charconv>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "atnf/attention.hpp"
#include "atnf/model.hpp"
#include "atnf/rope.hpp"
#include "atnf/tensor.hpp"

namespace atnf {

// Which layers' attention matrices are stored (all heads of a selected layer).
struct capture_spec {
  enum class mode { none, all, layers };
  mode kind = mode::none;
  index_range layer_range;

  static capture_spec none() { return {}; }
  static capture_spec all() { return {mode::all, {}}; }
  static capture_spec layers(std::size_t first, std::size_t last_inclusive) {
    return {mode::layers, {first, last_inclusive + 1}};
  }

  bool enabled() const { return kind != mode::none; }
  bool wants(std::size_t layer) const {
    return kind == mode::all || (kind == mode::layers && layer_range.contains(layer));
  }

  // "none" | "all" | "layers=a..b" (inclusive)
  static capture_spec parse(std::string_view s) {
    if (s == "none") return none();
    if (s == "all") return all();
    constexpr std::string_view prefix = "layers=";
    if (s.substr(0, prefix.size()) == prefix) {
      const auto body = s.substr(prefix.size());
      const auto dots = body.find("..");
      std::size_t a = 0, b = 0;
      if (dots != std::string_view::npos) {
        const auto lhs = body.substr(0, dots), rhs = body.substr(dots + 2);
        const auto ra = std::from_chars(lhs.data(), lhs.data() + lhs.size(), a);
        const auto rb = std::from_chars(rhs.data(), rhs.data() + rhs.size(), b);
        if (ra.ec == std::errc{} && rb.ec == std::errc{} && ra.ptr == lhs.data() + lhs.size() &&
            rb.ptr == rhs.data() + rhs.size() && a <= b)
          return layers(a, b);
      }
    }
    throw config_error("capture must be none, all or layers=a..b, got '" + std::string(s) + "'");
  }

  std::string to_string() const {
    switch (kind) {
      case mode::none: return "none";
      case mode::all: return "all";
      case mode::layers:
        return "layers=" + std::to_string(layer_range.begin) + ".." + std::to_string(layer_range.end - 1);
    }
    return "none";
  }
};

struct forward_options {
  attention_hook* hook = nullptr;
  capture_spec capture;
  bool check_hook_rows = true;  // assert row-stochasticity after every rewrite
  bool all_logits = false;      // keep logits for every position, not just the last
};

struct layer_cache {
  std::vector<real> keys;    // [max_seq_len x model_dim], rotated
  std::vector<real> values;  // [max_seq_len x model_dim]
};

namespace detail {
struct scratch {
  std::vector<real> x, h, q, k, v, o, tmp, ff_u, probs, scores;
};
}  // namespace detail

class decode_state {
 public:
  std::vector<token_id> tokens;
  token_segmentation segmentation;
  std::vector<layer_cache> cache;
  std::vector<attention_record> records;  // prefill attention, when captured
  std::optional<head_classification> heads;
  std::vector<real> last_logits;
  capture_spec capture;
  bool check_hook_rows = true;

  std::size_t position() const { return tokens.size(); }

  // Captured record for (layer, head), or nullptr.
  const attention_record* find_record(std::size_t layer, std::size_t head) const {
    for (const auto& r : records)
      if (r.layer == layer && r.head == head) return &r;
    return nullptr;
  }

 private:
  rope_table rope_;
  detail::scratch scratch_;

  friend decode_state make_state(const model_weights&, const token_segmentation&, const forward_options&);
  friend struct block_runner;
};

struct step_result {
  token_id token = 0;  // greedy next token
  std::vector<real> logits;
  std::vector<attention_record> rows;  // new query row per captured (layer, head)
};

struct forward_result {
  matrix logits;  // [positions x vocab] (only the last row unless all_logits)
  std::vector<attention_record> records;
};

// First index of the maximum.
inline token_id greedy_token(std::span<const real> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<token_id>(best);
}

struct block_runner {
  const model_weights& w;
  decode_state& st;
  attention_hook* hook;
  hook_phase phase;
  bool capture_rows;

  // Appends `tokens` to the state and returns logits (last row or all rows).
  matrix run(std::span<const token_id> new_tokens, bool all_logits, std::vector<attention_record>* rows_out) {
    const auto& c = w.config;
    const std::size_t D = c.model_dim, H = c.num_heads, hd = c.head_dim, F = c.ffn_dim;
    const std::size_t p0 = st.tokens.size(), m = new_tokens.size(), n = p0 + m;
    if (n > c.max_seq_len)
      throw contract_error("max length exceeded: " + std::to_string(n) + " > " + std::to_string(c.max_seq_len));
    for (token_id t : new_tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size)
        throw dimension_error("token id " + std::to_string(t) + " outside vocabulary");

    auto& s = st.scratch_;
    s.x.assign(m * D, 0);
    s.h.resize(m * D);
    s.q.resize(m * D);
    s.o.resize(m * D);
    s.tmp.resize(std::max(D, F));
    s.ff_u.resize(F);
    s.probs.resize(H * m * n);
    s.scores.resize(n);
    for (std::size_t r = 0; r < m; ++r) {
      const auto e = w.embedding.row(static_cast<std::size_t>(new_tokens[r]));
      std::copy(e.begin(), e.end(), s.x.begin() + r * D);
    }
    st.tokens.insert(st.tokens.end(), new_tokens.begin(), new_tokens.end());

    const real inv_sqrt = 1.0 / std::sqrt(static_cast<real>(hd));
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      const auto& lw = w.layers[l];
      auto& kv = st.cache[l];
      for (std::size_t r = 0; r < m; ++r) {
        std::span<real> xr(s.x.data() + r * D, D), hr(s.h.data() + r * D, D);
        rms_norm(xr, lw.attn_norm, hr);
        std::span<real> qr(s.q.data() + r * D, D);
        std::span<real> kr(kv.keys.data() + (p0 + r) * D, D), vr(kv.values.data() + (p0 + r) * D, D);
        matvec(lw.wq, hr, qr);
        matvec(lw.wk, hr, kr);
        matvec(lw.wv, hr, vr);
        st.rope_.rotate(qr, p0 + r);
        st.rope_.rotate(kr, p0 + r);
      }
      // probabilities [head][row][key]
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t r = 0; r < m; ++r) {
          const std::size_t valid = p0 + r + 1;
          const real* qh = s.q.data() + r * D + h * hd;
          for (std::size_t j = 0; j < valid; ++j) {
            const real* kh = kv.keys.data() + j * D + h * hd;
            real acc = 0;
            for (std::size_t d = 0; d < hd; ++d) acc += qh[d] * kh[d];
            s.scores[j] = acc * inv_sqrt;
          }
          causal_softmax_row(std::span<const real>(s.scores.data(), n), valid,
                             std::span<real>(s.probs.data() + (h * m + r) * n, n));
        }
      }
      if (hook) {
        layer_attention la{l, phase, &st.segmentation, {}};
        la.heads.reserve(H);
        for (std::size_t h = 0; h < H; ++h)
          la.heads.emplace_back(std::span<const real>(s.probs.data() + h * m * n, m * n), m, n, p0);
        hook->observe_layer(la);
        for (std::size_t h = 0; h < H; ++h) {
          attention_rows rows{std::span<real>(s.probs.data() + h * m * n, m * n), m, n, p0};
          const hook_context ctx{l, h, phase, &st.segmentation};
          hook->rewrite(ctx, rows);
          if (st.check_hook_rows) check_attention_rows(rows, ctx);
        }
      }
      if (capture_rows && st.capture.wants(l)) {
        for (std::size_t h = 0; h < H; ++h) {
          attention_record rec{l, h, p0, m, n, {}};
          rec.data.assign(s.probs.begin() + h * m * n, s.probs.begin() + (h + 1) * m * n);
          if (rows_out) rows_out->push_back(std::move(rec));
        }
      }
      // weighted values
      std::fill(s.o.begin(), s.o.end(), 0.0);
      for (std::size_t h = 0; h < H; ++h) {
        if (hook && hook->head_masked(l, h)) continue;
        for (std::size_t r = 0; r < m; ++r) {
          const real* pr = s.probs.data() + (h * m + r) * n;
          real* oh = s.o.data() + r * D + h * hd;
          const std::size_t valid = p0 + r + 1;
          for (std::size_t j = 0; j < valid; ++j) {
            const real a = pr[j];
            if (a == 0) continue;
            const real* vh = kv.values.data() + j * D + h * hd;
            for (std::size_t d = 0; d < hd; ++d) oh[d] += a * vh[d];
          }
        }
      }
      for (std::size_t r = 0; r < m; ++r) {
        std::span<real> xr(s.x.data() + r * D, D);
        std::span<real> out(s.tmp.data(), D);
        matvec(lw.wo, std::span<const real>(s.o.data() + r * D, D), out);
        for (std::size_t d = 0; d < D; ++d) xr[d] += out[d];
        std::span<real> hr(s.h.data() + r * D, D);
        rms_norm(xr, lw.ffn_norm, hr);
        matvec(lw.w1, hr, s.ff_u);
        for (real& u : s.ff_u) u = silu(u);
        matvec(lw.w2, s.ff_u, out);
        for (std::size_t d = 0; d < D; ++d) xr[d] += out[d];
      }
    }

    const std::size_t first_out = all_logits ? 0 : m - 1;
    matrix logits(m - first_out, c.vocab_size);
    for (std::size_t r = first_out; r < m; ++r) {
      std::span<real> hr(s.h.data() + r * D, D);
      rms_norm(std::span<const real>(s.x.data() + r * D, D), w.final_norm, hr);
      matvec(w.output, hr, logits.row(r - first_out));
    }
    return logits;
  }
};

// Empty state with an allocated KV cache.
inline decode_state make_state(const model_weights& w, const token_segmentation& seg, const forward_options& opt) {
  const auto& c = w.config;
  if (w.layers.size() != c.num_layers) throw dimension_error("weights do not match config");
  decode_state st;
  st.segmentation = seg;
  st.capture = opt.capture;
  st.check_hook_rows = opt.check_hook_rows;
  st.rope_ = rope_table(c.max_seq_len, c.head_dim, c.rope_base);
  st.cache.resize(c.num_layers);
  for (auto& kv : st.cache) {
    kv.keys.assign(c.max_seq_len * c.model_dim, 0);
    kv.values.assign(c.max_seq_len * c.model_dim, 0);
  }
  st.tokens.reserve(c.max_seq_len);
  return st;
}

// Runs the prompt (and optionally teacher-forced response tokens beyond
// segmentation.resp_start) through the model, filling the KV cache.
inline decode_state prefill(const model_weights& w, std::span<const token_id> tokens,
                            const token_segmentation& seg, const forward_options& opt = {}) {
  if (tokens.empty()) throw contract_error("prefill: empty token sequence");
  if (tokens.size() > w.config.max_seq_len) throw contract_error("prefill: prompt longer than max_seq_len");
  seg.validate(tokens.size());
  decode_state st = make_state(w, seg, opt);
  block_runner runner{w, st, opt.hook, hook_phase::prefill, opt.capture.enabled()};
  matrix logits = runner.run(tokens, false, &st.records);
  st.last_logits.assign(logits.row(0).begin(), logits.row(0).end());
  return st;
}

// Full-sequence forward pass. Logits row t predicts token t+1.
inline forward_result forward(const model_weights& w, std::span<const token_id> tokens,
                              const token_segmentation& seg, const forward_options& opt = {}) {
  if (tokens.empty()) throw contract_error("forward: empty token sequence");
  if (tokens.size() > w.config.max_seq_len) throw contract_error("forward: sequence longer than max_seq_len");
  seg.validate(tokens.size());
  decode_state st = make_state(w, seg, opt);
  forward_result res;
  block_runner runner{w, st, opt.hook, hook_phase::prefill, opt.capture.enabled()};
  res.logits = runner.run(tokens, opt.all_logits, &res.records);
  return res;
}

// Feeds `token` at the next position and returns the greedy successor.
inline step_result decode_token(decode_state& st, const model_weights& w, token_id token,
                                attention_hook* hook = nullptr) {
  if (st.cache.empty()) throw contract_error("decode: state was not prefilled");
  if (st.position() >= w.config.max_seq_len) throw contract_error("max length exceeded");
  step_result res;
  block_runner runner{w, st, hook, hook_phase::decode, st.capture.enabled()};
  const token_id one[1] = {token};
  matrix logits = runner.run(one, false, &res.rows);
  res.logits.assign(logits.row(0).begin(), logits.row(0).end());
  res.token = greedy_token(res.logits);
  st.last_logits = res.logits;
  return res;
}

// Greedy step: feeds argmax of the previous logits.
inline step_result decode_step(decode_state& st, const model_weights& w, attention_hook* hook = nullptr) {
  return decode_token(st, w, greedy_token(st.last_logits), hook);
}

}  // namespace atnf
