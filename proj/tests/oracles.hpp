#pragma once

// Independent reference computations used as test oracles. They favour
// obviousness over speed: no caches, no tables, direct loops.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "atnf/dump.hpp"
#include "atnf/metrics.hpp"
#include "atnf/model.hpp"

namespace oracle {

using atnf::real;

// Recomputes every position from scratch; keys are re-rotated with plain trigonometry.
inline std::vector<std::vector<real>> naive_logits(const atnf::model_weights& w, const std::vector<atnf::token_id>& toks) {
  const auto& c = w.config;
  const std::size_t n = toks.size(), D = c.model_dim, hd = c.head_dim;
  auto norm = [&](const std::vector<real>& x, const std::vector<real>& g) {
    long double ss = 0;
    for (real v : x) ss += static_cast<long double>(v) * v;
    const real r = 1.0 / std::sqrt(static_cast<real>(ss / D) + 1e-5);
    std::vector<real> y(D);
    for (std::size_t d = 0; d < D; ++d) y[d] = g[d] * x[d] * r;
    return y;
  };
  auto mul = [](const atnf::matrix& m, const std::vector<real>& x) {
    std::vector<real> y(m.rows, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r)
      for (std::size_t k = 0; k < m.cols; ++k) y[r] += m(r, k) * x[k];
    return y;
  };
  auto rotate = [&](std::vector<real> v, std::size_t pos) {
    for (std::size_t h = 0; h < c.num_heads; ++h)
      for (std::size_t i = 0; i < hd / 2; ++i) {
        const real ang = static_cast<real>(pos) * std::pow(c.rope_base, -2.0 * i / hd);
        real& a = v[h * hd + 2 * i];
        real& b = v[h * hd + 2 * i + 1];
        const real x = a, y = b;
        a = x * std::cos(ang) - y * std::sin(ang);
        b = x * std::sin(ang) + y * std::cos(ang);
      }
    return v;
  };
  std::vector<std::vector<real>> x(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto e = w.embedding.row(static_cast<std::size_t>(toks[i]));
    x[i].assign(e.begin(), e.end());
  }
  for (const auto& lw : w.layers) {
    std::vector<std::vector<real>> q(n), k(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto h = norm(x[i], lw.attn_norm);
      q[i] = rotate(mul(lw.wq, h), i);
      k[i] = rotate(mul(lw.wk, h), i);
      v[i] = mul(lw.wv, h);
    }
    std::vector<std::vector<real>> nx = x;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<real> o(D, 0.0);
      for (std::size_t h = 0; h < c.num_heads; ++h) {
        std::vector<real> s(i + 1);
        for (std::size_t j = 0; j <= i; ++j) {
          real acc = 0;
          for (std::size_t d = 0; d < hd; ++d) acc += q[i][h * hd + d] * k[j][h * hd + d];
          s[j] = acc / std::sqrt(static_cast<real>(hd));
        }
        const real mx = *std::max_element(s.begin(), s.end());
        real z = 0;
        for (real& t : s) z += (t = std::exp(t - mx));
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t d = 0; d < hd; ++d) o[h * hd + d] += s[j] / z * v[j][h * hd + d];
      }
      const auto a = mul(lw.wo, o);
      for (std::size_t d = 0; d < D; ++d) nx[i][d] += a[d];
      const auto h2 = norm(nx[i], lw.ffn_norm);
      auto u = mul(lw.w1, h2);
      for (real& t : u) t = t / (1 + std::exp(-t));
      const auto f = mul(lw.w2, u);
      for (std::size_t d = 0; d < D; ++d) nx[i][d] += f[d];
    }
    x = nx;
  }
  std::vector<std::vector<real>> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = mul(w.output, norm(x[i], w.final_norm));
  return out;
}

inline real nll(const std::vector<std::vector<real>>& logits, const std::vector<atnf::token_id>& toks,
                std::size_t resp_start) {
  long double total = 0;
  for (std::size_t t = resp_start; t < toks.size(); ++t) {
    const auto& row = logits[t - 1];
    long double z = 0;
    for (real v : row) z += std::exp(static_cast<long double>(v));
    total += std::log(z) - row[static_cast<std::size_t>(toks[t])];
  }
  return static_cast<real>(total / static_cast<long double>(toks.size() - resp_start));
}

// Raw dump entry lookup: A[layer][head] at absolute (query, key).
struct dump_index {
  std::map<std::pair<std::size_t, std::size_t>, const atnf::dump_entry*> by_head;
  explicit dump_index(const atnf::dump_file& d) {
    for (const auto& e : d.entries)
      if (e.kind == "attention") by_head[{e.layer, *e.head}] = &e;
  }
  real at(std::size_t l, std::size_t h, std::size_t i, std::size_t j) const {
    const auto* e = by_head.at({l, h});
    return e->data[(i - e->first_query) * e->cols + j];
  }
};

inline std::vector<real> reception(const dump_index& d, const atnf::token_segmentation& s, std::size_t layer,
                                   std::size_t H) {
  std::vector<real> r(s.vis.size(), 0.0);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t i = s.vis.begin; i < s.vis.end; ++i)
      for (std::size_t j = s.vis.begin; j < s.vis.end; ++j)
        if (i != j) r[j - s.vis.begin] += d.at(layer, h, i, j);
  for (real& v : r) v *= 1.0 / static_cast<real>(H);
  return r;
}

// Per-row group mass over instruction rows; group columns given explicitly.
inline std::vector<real> group_mass(const dump_index& d, const atnf::token_segmentation& s, std::size_t layer,
                                    std::size_t H, std::size_t col_begin, std::size_t col_end) {
  std::vector<real> out;
  for (std::size_t h = 0; h < H; ++h) {
    real total = 0;
    for (std::size_t i = s.instr.begin; i < s.instr.end; ++i)
      for (std::size_t j = col_begin; j < col_end; ++j) total += d.at(layer, h, i, j);
    out.push_back(total / static_cast<real>(s.instr.size()));
  }
  return out;
}

inline std::vector<std::size_t> zscore_heads(const std::vector<real>& a, real lambda) {
  const real n = static_cast<real>(a.size());
  real mu = 0;
  for (real v : a) mu += v;
  mu /= n;
  real var = 0;
  for (real v : a) var += (v - mu) * (v - mu);
  const real sd = std::sqrt(var / n);
  std::vector<std::size_t> out;
  if (*std::min_element(a.begin(), a.end()) == *std::max_element(a.begin(), a.end())) return out;
  for (std::size_t h = 0; h < a.size(); ++h)
    if (a[h] > mu + lambda * sd) out.push_back(h);
  return out;
}

inline std::vector<std::size_t> above(const std::vector<real>& a, real lambda) {
  std::vector<std::size_t> out;
  for (std::size_t h = 0; h < a.size(); ++h)
    if (a[h] > lambda) out.push_back(h);
  return out;
}

// Brute-force S_ab with roles looked up per position.
inline std::optional<real> flow(const atnf::matrix& I, const atnf::token_segmentation& s, char src, char dst,
                                bool vv_lower = true) {
  auto group = [&](std::size_t p) {
    switch (s.role_of(p)) {
      case atnf::token_role::system: return 's';
      case atnf::token_role::visual: return 'v';
      default: return 't';
    }
  };
  real sum = 0;
  std::size_t cnt = 0;
  for (std::size_t i = 0; i < I.rows; ++i)
    for (std::size_t j = 0; j < I.cols; ++j) {
      if (group(j) != src || group(i) != dst) continue;
      const bool unconstrained = src == 'v' && dst == 'v' && !vv_lower;
      if (j > i && !unconstrained) continue;
      sum += I(i, j);
      ++cnt;
    }
  if (!cnt) return std::nullopt;
  return sum / static_cast<real>(cnt);
}

struct chair_counts {
  std::optional<real> chair_i, chair_s, recall;
};

// Counts from the raw mention lists, one object at a time.
inline chair_counts chair(const std::vector<atnf::caption_annotation>& anns) {
  std::size_t mentions = 0, bad = 0, bad_caps = 0, truth = 0, hit = 0;
  for (const auto& a : anns) {
    std::vector<std::string> m(a.mentioned.begin(), a.mentioned.end()), t(a.truth.begin(), a.truth.end());
    for (auto& x : m) std::transform(x.begin(), x.end(), x.begin(), ::tolower);
    for (auto& x : t) std::transform(x.begin(), x.end(), x.begin(), ::tolower);
    std::sort(m.begin(), m.end());
    m.erase(std::unique(m.begin(), m.end()), m.end());
    std::sort(t.begin(), t.end());
    t.erase(std::unique(t.begin(), t.end()), t.end());
    bool any = false;
    for (const auto& x : m) {
      ++mentions;
      if (std::find(t.begin(), t.end(), x) == t.end()) {
        ++bad;
        any = true;
      }
    }
    bad_caps += any;
    for (const auto& x : t) {
      ++truth;
      hit += std::find(m.begin(), m.end(), x) != m.end();
    }
  }
  chair_counts c;
  if (mentions) c.chair_i = static_cast<real>(bad) / static_cast<real>(mentions);
  c.chair_s = static_cast<real>(bad_caps) / static_cast<real>(anns.size());
  if (truth) c.recall = static_cast<real>(hit) / static_cast<real>(truth);
  return c;
}

struct pope_counts {
  std::optional<real> accuracy, precision, recall, f1;
};

inline pope_counts pope(const std::vector<atnf::pope_record>& recs) {
  real tp = 0, fp = 0, fn = 0, tn = 0;
  for (const auto& r : recs) {
    tp += r.pred && r.label;
    fp += r.pred && !r.label;
    fn += !r.pred && r.label;
    tn += !r.pred && !r.label;
  }
  pope_counts c;
  c.accuracy = (tp + tn) / static_cast<real>(recs.size());
  if (tp + fp > 0) c.precision = tp / (tp + fp);
  if (tp + fn > 0) c.recall = tp / (tp + fn);
  if (c.precision && c.recall && *c.precision + *c.recall > 0)
    c.f1 = 2 * *c.precision * *c.recall / (*c.precision + *c.recall);
  return c;
}

}  // namespace oracle
