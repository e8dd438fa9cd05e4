#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "atnf/attention.hpp"
#include "atnf/decoder.hpp"
#include "atnf/model.hpp"
#include "atnf/rope.hpp"
#include "atnf/tensor.hpp"

namespace atnf {

// Teacher-forced sequence: prompt followed by response tokens from seg.resp_start.
struct saliency_task {
  std::vector<token_id> tokens;
  token_segmentation segmentation;
  real loss_scale = 1;  // multiplies the loss (and therefore every gradient)

  std::size_t target_count() const {
    return tokens.size() > segmentation.resp_start ? tokens.size() - segmentation.resp_start : 0;
  }
};

// Per-layer |sum_h A (.) dL/dA|, [seq x seq].
struct saliency_matrix {
  std::size_t layer = 0;
  matrix values;
};

// Mean negative log-likelihood of tokens[t] under logits row t-1, t >= resp_start.
// `logits` must hold one row per position.
inline real mean_nll(const matrix& logits, std::span<const token_id> tokens, std::size_t resp_start) {
  if (resp_start == 0) throw contract_error("response_loss: first response token has no predecessor");
  if (tokens.size() <= resp_start) throw contract_error("response_loss: empty targets");
  if (logits.rows < tokens.size() - 1) throw dimension_error("response_loss: logits do not cover the targets");
  real total = 0;
  for (std::size_t t = resp_start; t < tokens.size(); ++t) {
    const auto row = logits.row(t - 1);
    real mx = row[0];
    for (real v : row) mx = std::max(mx, v);
    real z = 0;
    for (real v : row) z += std::exp(v - mx);
    total -= row[static_cast<std::size_t>(tokens[t])] - mx - std::log(z);
  }
  const real loss = total / static_cast<real>(tokens.size() - resp_start);
  if (!std::isfinite(loss)) throw contract_error("response_loss: non-finite loss");
  return loss;
}

inline real response_loss(const model_weights& w, const saliency_task& task, const forward_options& opt = {}) {
  forward_options o = opt;
  o.all_logits = true;
  const auto res = forward(w, task.tokens, task.segmentation, o);
  return task.loss_scale * mean_nll(res.logits, task.tokens, task.segmentation.resp_start);
}

namespace detail {

struct layer_tape {
  std::vector<real> x_in, inv1, h1, q, k, v, probs, o, x_mid, inv2, h2, u;
};

// y = g (.) x * r  with r = (mean x^2 + eps)^-1/2; accumulates dx.
inline void rms_norm_backward(std::span<const real> x, std::span<const real> gain, real inv,
                              std::span<const real> dy, std::span<real> dx) {
  const std::size_t D = x.size();
  real acc = 0;
  for (std::size_t d = 0; d < D; ++d) acc += gain[d] * dy[d] * x[d];
  const real c = inv * inv * inv * acc / static_cast<real>(D);
  for (std::size_t d = 0; d < D; ++d) dx[d] += inv * gain[d] * dy[d] - c * x[d];
}

}  // namespace detail

// Analytic reverse-mode saliency. Post-softmax attention is the differentiation
// variable; the gradient still flows through everything downstream of it.
inline std::vector<saliency_matrix> attention_saliency(const model_weights& w, const saliency_task& task) {
  const auto& c = w.config;
  const auto& tok = task.tokens;
  const std::size_t n = tok.size(), D = c.model_dim, H = c.num_heads, hd = c.head_dim, F = c.ffn_dim,
                    V = c.vocab_size;
  if (n > c.max_seq_len) throw contract_error("saliency: sequence longer than max_seq_len");
  task.segmentation.validate(n);
  if (task.target_count() == 0) throw contract_error("saliency: empty targets");
  for (token_id t : tok)
    if (t < 0 || static_cast<std::size_t>(t) >= V) throw dimension_error("saliency: token outside vocabulary");

  const rope_table rope(n, hd, c.rope_base);
  const real inv_sqrt = 1.0 / std::sqrt(static_cast<real>(hd));
  std::vector<detail::layer_tape> tape(c.num_layers);
  std::vector<real> x(n * D), tmp(std::max(D, F)), scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto e = w.embedding.row(static_cast<std::size_t>(tok[i]));
    std::copy(e.begin(), e.end(), x.begin() + i * D);
  }

  // forward, keeping every intermediate
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const auto& lw = w.layers[l];
    auto& t = tape[l];
    t.x_in = x;
    t.inv1.resize(n);
    t.h1.resize(n * D);
    t.q.resize(n * D);
    t.k.resize(n * D);
    t.v.resize(n * D);
    for (std::size_t i = 0; i < n; ++i) {
      std::span<const real> xi(x.data() + i * D, D);
      std::span<real> hi(t.h1.data() + i * D, D), qi(t.q.data() + i * D, D), ki(t.k.data() + i * D, D),
          vi(t.v.data() + i * D, D);
      t.inv1[i] = rms_norm(xi, lw.attn_norm, hi);
      matvec(lw.wq, hi, qi);
      matvec(lw.wk, hi, ki);
      matvec(lw.wv, hi, vi);
      rope.rotate(qi, i);
      rope.rotate(ki, i);
    }
    t.probs.assign(H * n * n, 0);
    t.o.assign(n * D, 0);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
          real acc = 0;
          for (std::size_t d = 0; d < hd; ++d) acc += t.q[i * D + h * hd + d] * t.k[j * D + h * hd + d];
          scores[j] = acc * inv_sqrt;
        }
        std::span<real> p(t.probs.data() + (h * n + i) * n, n);
        causal_softmax_row(scores, i + 1, p);
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t d = 0; d < hd; ++d) t.o[i * D + h * hd + d] += p[j] * t.v[j * D + h * hd + d];
      }
    t.x_mid.resize(n * D);
    t.inv2.resize(n);
    t.h2.resize(n * D);
    t.u.resize(n * F);
    for (std::size_t i = 0; i < n; ++i) {
      std::span<real> out(tmp.data(), D);
      matvec(lw.wo, std::span<const real>(t.o.data() + i * D, D), out);
      for (std::size_t d = 0; d < D; ++d) t.x_mid[i * D + d] = x[i * D + d] + out[d];
      std::span<const real> xm(t.x_mid.data() + i * D, D);
      std::span<real> h2(t.h2.data() + i * D, D), ui(t.u.data() + i * F, F);
      t.inv2[i] = rms_norm(xm, lw.ffn_norm, h2);
      matvec(lw.w1, h2, ui);
      std::vector<real> s(F);
      for (std::size_t f = 0; f < F; ++f) s[f] = silu(ui[f]);
      matvec(lw.w2, s, out);
      for (std::size_t d = 0; d < D; ++d) x[i * D + d] = t.x_mid[i * D + d] + out[d];
    }
  }

  // head: loss gradient on the final residual stream
  const std::size_t rs = task.segmentation.resp_start;
  const real g_scale = task.loss_scale / static_cast<real>(n - rs);
  std::vector<real> dx(n * D, 0.0), hf(D), dlogit(V), dhf(D);
  for (std::size_t t = rs; t < n; ++t) {
    const std::size_t i = t - 1;
    std::span<const real> xi(x.data() + i * D, D);
    const real inv = rms_norm(xi, w.final_norm, hf);
    matvec(w.output, hf, dlogit);
    real mx = dlogit[0];
    for (real v : dlogit) mx = std::max(mx, v);
    real z = 0;
    for (real& v : dlogit) z += (v = std::exp(v - mx));
    for (real& v : dlogit) v = v / z * g_scale;
    dlogit[static_cast<std::size_t>(tok[t])] -= g_scale;
    std::fill(dhf.begin(), dhf.end(), 0.0);
    matvec_transposed_add(w.output, dlogit, dhf);
    detail::rms_norm_backward(xi, w.final_norm, inv, dhf, std::span<real>(dx.data() + i * D, D));
  }

  std::vector<saliency_matrix> out(c.num_layers);
  std::vector<real> dh(D), du(F), ds(F), dxm(n * D), dO(n * D), dq(n * D), dk(n * D), dv(n * D), dA(n);
  for (std::size_t l = c.num_layers; l-- > 0;) {
    const auto& lw = w.layers[l];
    const auto& t = tape[l];
    // FFN
    dxm = dx;
    for (std::size_t i = 0; i < n; ++i) {
      std::span<const real> g(dx.data() + i * D, D);
      std::fill(ds.begin(), ds.end(), 0.0);
      matvec_transposed_add(lw.w2, g, ds);
      for (std::size_t f = 0; f < F; ++f) du[f] = ds[f] * silu_grad(t.u[i * F + f]);
      std::fill(dh.begin(), dh.end(), 0.0);
      matvec_transposed_add(lw.w1, du, dh);
      detail::rms_norm_backward(std::span<const real>(t.x_mid.data() + i * D, D), lw.ffn_norm, t.inv2[i], dh,
                                std::span<real>(dxm.data() + i * D, D));
    }
    // attention output projection
    std::fill(dO.begin(), dO.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      matvec_transposed_add(lw.wo, std::span<const real>(dxm.data() + i * D, D),
                            std::span<real>(dO.data() + i * D, D));
    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    saliency_matrix& sal = out[l];
    sal.layer = l;
    sal.values = matrix(n, n);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < n; ++i) {
        const real* p = t.probs.data() + (h * n + i) * n;
        const real* doi = dO.data() + i * D + h * hd;
        real rowdot = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          const real* vj = t.v.data() + j * D + h * hd;
          real g = 0;
          for (std::size_t d = 0; d < hd; ++d) {
            g += doi[d] * vj[d];
            dv[j * D + h * hd + d] += p[j] * doi[d];
          }
          dA[j] = g;
          sal.values(i, j) += p[j] * g;
          rowdot += p[j] * g;
        }
        // softmax backward into the scaled scores
        for (std::size_t j = 0; j <= i; ++j) {
          const real dsc = p[j] * (dA[j] - rowdot) * inv_sqrt;
          if (dsc == 0) continue;
          for (std::size_t d = 0; d < hd; ++d) {
            dq[i * D + h * hd + d] += dsc * t.k[j * D + h * hd + d];
            dk[j * D + h * hd + d] += dsc * t.q[i * D + h * hd + d];
          }
        }
      }
    for (real& v : sal.values.data) v = std::abs(v);
    if (!all_finite(sal.values.data)) throw contract_error("saliency: non-finite gradient at layer " + std::to_string(l));
    // through RoPE (orthogonal, so the inverse rotation) and the projections
    dx = dxm;
    for (std::size_t i = 0; i < n; ++i) {
      std::span<real> dqi(dq.data() + i * D, D), dki(dk.data() + i * D, D);
      rope.rotate(dqi, i, -1);
      rope.rotate(dki, i, -1);
      std::fill(dh.begin(), dh.end(), 0.0);
      matvec_transposed_add(lw.wq, dqi, dh);
      matvec_transposed_add(lw.wk, dki, dh);
      matvec_transposed_add(lw.wv, std::span<const real>(dv.data() + i * D, D), dh);
      detail::rms_norm_backward(std::span<const real>(t.x_in.data() + i * D, D), lw.attn_norm, t.inv1[i], dh,
                                std::span<real>(dx.data() + i * D, D));
    }
  }
  return out;
}

// Central-difference estimate of the same quantity: every causal entry of
// every head is perturbed by +-epsilon through a hook. Test-only; cost is
// O(L H n^2) forward passes.
inline std::vector<saliency_matrix> finite_diff_saliency(const model_weights& w, const saliency_task& task,
                                                         real epsilon = 1e-4) {
  if (!(epsilon > 0)) throw contract_error("finite_diff_saliency: epsilon must be > 0");
  const auto& c = w.config;
  const std::size_t n = task.tokens.size();
  if (task.target_count() == 0) throw contract_error("saliency: empty targets");

  // baseline attention for the Hadamard weighting
  forward_options base;
  base.capture = capture_spec::all();
  const auto ref = forward(w, task.tokens, task.segmentation, base);

  std::size_t tl = 0, th = 0, ti = 0, tj = 0;
  real delta = 0;
  function_hook nudge([&](const hook_context& ctx, attention_rows& rows) {
    if (delta == 0 || ctx.layer != tl || ctx.head != th) return;
    rows.row(ti - rows.first_query)[tj] += delta;
  });
  forward_options opt;
  opt.hook = &nudge;
  opt.check_hook_rows = false;

  std::vector<saliency_matrix> out(c.num_layers);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    out[l].layer = l;
    out[l].values = matrix(n, n);
  }
  for (const auto& rec : ref.records) {
    tl = rec.layer;
    th = rec.head;
    for (ti = 0; ti < n; ++ti)
      for (tj = 0; tj <= ti; ++tj) {
        delta = epsilon;
        const real up = response_loss(w, task, opt);
        delta = -epsilon;
        const real down = response_loss(w, task, opt);
        const real g = (up - down) / (2 * epsilon);
        if (!std::isfinite(g)) throw contract_error("finite_diff_saliency: non-finite estimate");
        out[tl].values(ti, tj) += rec.at(ti, tj) * g;
      }
  }
  delta = 0;
  for (auto& s : out)
    for (real& v : s.values.data) v = std::abs(v);
  return out;
}

}  // namespace atnf
