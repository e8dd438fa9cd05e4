#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "atnf/model.hpp"
#include "atnf/rope.hpp"

namespace atnf {

// Seeded generator shared by every fixture: mt19937_64, uniform draws built
// from the top 53 bits and rounded to float so that weights survive the f32
// weight format unchanged.
class fixture_rng {
 public:
  explicit fixture_rng(std::uint64_t seed) : gen_(seed) {}

  real unit() { return static_cast<real>(gen_() >> 11) * 0x1.0p-53; }
  real uniform(real scale) { return static_cast<float>((2 * unit() - 1) * scale); }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(unit() * static_cast<real>(n)) % n; }
  std::uint64_t raw() { return gen_(); }

 private:
  std::mt19937_64 gen_;
};

struct head_coord {
  std::size_t layer = 0;
  std::size_t head = 0;
  friend bool operator==(const head_coord&, const head_coord&) = default;
};

struct pathology_spec {
  head_coord copy_head{0, 0};
  head_coord visual_head{1, 1};
  token_id grounded_token = 0;
  token_id prior_token = 0;
};

struct prompt_layout {
  std::size_t sys = 4;
  std::size_t vis = 16;
  std::size_t instr = 6;

  token_segmentation segmentation() const { return token_segmentation::from_lengths(sys, vis, instr); }
  std::size_t length() const { return sys + vis + instr; }
};

struct fixture_spec {
  std::uint64_t seed = 0;
  model_config config;
  prompt_layout layout;
  std::optional<pathology_spec> pathology;
  real output_scale = 1;  // multiplies the unembedding; 0 gives a loss independent of attention
};

// Vocabulary partition used by fixture prompts: system ids [0, V/4), visual
// ids [V/4, V/2), text ids [V/2, V). The first visual id is the anchor token.
struct vocab_partition {
  std::size_t vocab = 0;
  index_range sys() const { return {0, vocab / 4}; }
  index_range vis() const { return {vocab / 4, vocab / 2}; }
  index_range text() const { return {vocab / 2, vocab}; }
  token_id anchor() const { return static_cast<token_id>(vocab / 4); }
};

inline void fill_uniform(std::span<real> v, fixture_rng& rng, real scale) {
  for (real& x : v) x = rng.uniform(scale);
}

// Dense random weights, uniform in +-1/sqrt(fan_in) for projections, +-1 for
// embeddings, norm gains in [0.9, 1.1].
inline model_weights random_model(const fixture_spec& spec) {
  if (spec.pathology) throw contract_error("random_model: spec carries a pathology; use pathology_model");
  fixture_rng rng(spec.seed);
  model_weights w = model_weights::zeros(spec.config);
  const auto& c = w.config;
  const real sd = 1.0 / std::sqrt(static_cast<real>(c.model_dim));
  const real sf = 1.0 / std::sqrt(static_cast<real>(c.ffn_dim));
  fill_uniform(w.embedding.data, rng, 1.0);
  for (auto& l : w.layers) {
    for (real& g : l.attn_norm) g = static_cast<float>(1 + rng.uniform(0.1));
    for (matrix* m : {&l.wq, &l.wk, &l.wv, &l.wo}) fill_uniform(m->data, rng, sd);
    for (real& g : l.ffn_norm) g = static_cast<float>(1 + rng.uniform(0.1));
    fill_uniform(l.w1.data, rng, sd);
    fill_uniform(l.w2.data, rng, sf);
  }
  for (real& g : w.final_norm) g = static_cast<float>(1 + rng.uniform(0.1));
  fill_uniform(w.output.data, rng, sd);
  for (real& v : w.output.data) v = static_cast<float>(v * spec.output_scale);
  w.segmentation = spec.layout.segmentation();
  return w;
}

namespace pathology {

// Residual-stream layout of the pathology model.
inline constexpr std::size_t dim_one = 0, dim_sys = 1, dim_vis = 2, dim_text = 3, dim_anchor = 4,
                             dim_prior = 5, dim_ground = 6, first_noise = 7;
inline constexpr real embed_noise = 0.05;
inline constexpr real copy_margin_logits = 12;  // pre-softmax gap of the previous-token key
inline constexpr real copy_slope = 0.15;        // distance penalty relative to the cosine amplitude
inline constexpr real visual_score = 10;
inline constexpr real anchor_bonus = 2;
inline constexpr real route_gain = 0.2;  // head output written to its logit subspace
inline constexpr real prior_bias = 0.1;
inline constexpr real logit_gain = 20;

// Copy-head score as a function of query-key distance, per unit amplitude:
// cos(d - 1) from the fastest plane minus a near-linear distance penalty from the slowest.
inline real copy_score(std::size_t dist, real theta_slow) {
  const real d = static_cast<real>(dist);
  return std::cos(d - 1) - copy_slope * std::sin(d * theta_slow) / theta_slow;
}

// Smallest gap between distance 1 and any other distance below max_len, per unit amplitude.
inline real copy_relative_margin(std::size_t max_len, real theta_slow) {
  real best_other = -1e300;
  for (std::size_t d = 0; d < max_len; ++d)
    if (d != 1) best_other = std::max(best_other, copy_score(d, theta_slow));
  return copy_score(1, theta_slow) - best_other;
}

}  // namespace pathology

// Hand-set weights with a previous-token copy head and a visual head routed
// to disjoint logit directions. The prior token wins at baseline (copy path
// plus a bias); it loses to the grounded token once the copy head's text
// attention is removed; masking the visual head leaves the prior token on top.
inline model_weights pathology_model(const fixture_spec& spec) {
  using namespace pathology;
  if (!spec.pathology) throw contract_error("pathology_model: spec has no pathology");
  const auto& p = *spec.pathology;
  const auto& c = spec.config;
  c.validate();
  const std::size_t D = c.model_dim, hd = c.head_dim, V = c.vocab_size;
  if (hd < 4) throw contract_error("pathology_model: construction needs head_dim >= 4");
  if (D < first_noise + 1) throw contract_error("pathology_model: construction needs model_dim >= 8");
  if (V < 8) throw contract_error("pathology_model: construction needs vocab_size >= 8");
  for (const auto& hc : {p.copy_head, p.visual_head})
    if (hc.layer >= c.num_layers || hc.head >= c.num_heads)
      throw dimension_error("pathology_model: head coordinate outside model dimensions");
  if (p.copy_head == p.visual_head) throw contract_error("pathology_model: copy and visual heads must differ");
  const vocab_partition vp{V};
  for (token_id t : {p.prior_token, p.grounded_token})
    if (t < 0 || !vp.text().contains(static_cast<std::size_t>(t)))
      throw contract_error("pathology_model: prior and grounded tokens must be text ids");
  if (p.prior_token == p.grounded_token) throw contract_error("pathology_model: grounded_token equals prior_token");
  const auto& lay = spec.layout;
  if (lay.instr < 2 || lay.vis == 0) throw contract_error("pathology_model: layout needs visual tokens and >= 2 instruction tokens");
  if (lay.length() > c.max_seq_len) throw contract_error("pathology_model: layout longer than max_seq_len");

  const std::size_t slow = hd / 2 - 1;
  const real theta_slow = rope_frequency(slow, hd, c.rope_base);
  const real rel_margin = copy_relative_margin(c.max_seq_len, theta_slow);
  if (rel_margin < 0.2)
    throw contract_error("pathology_model: copy head infeasible for max_seq_len " + std::to_string(c.max_seq_len) +
                         " (relative margin " + std::to_string(rel_margin) + ")");
  if (std::cos(static_cast<real>(c.max_seq_len) * theta_slow) < 0.75)
    throw contract_error("pathology_model: visual head infeasible, rotary drift too large for max_seq_len");

  fixture_rng rng(spec.seed);
  model_weights w = model_weights::zeros(c);
  const std::size_t noise_dims = D - first_noise;
  // RMS-normalised magnitude of a unit feature in a typical embedding (two unit features plus noise).
  const real ss = 2 + static_cast<real>(noise_dims) * embed_noise * embed_noise / 3;
  const real unit = std::sqrt(static_cast<real>(D) / ss);
  const real root_hd = std::sqrt(static_cast<real>(hd));

  for (std::size_t t = 0; t < V; ++t) {
    auto e = w.embedding.row(t);
    e[dim_one] = 1;
    e[vp.sys().contains(t) ? dim_sys : vp.vis().contains(t) ? dim_vis : dim_text] = 1;
    if (static_cast<token_id>(t) == vp.anchor()) e[dim_anchor] = 1;
    for (std::size_t d = first_noise; d < D; ++d) e[d] = rng.uniform(embed_noise);
  }

  const real amp = copy_margin_logits / rel_margin;  // cosine amplitude in post-scaling logits
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    auto& lw = w.layers[l];
    for (std::size_t h = 0; h < c.num_heads; ++h) {
      const std::size_t base = h * hd;
      const bool is_copy = p.copy_head == head_coord{l, h};
      const bool is_visual = p.visual_head == head_coord{l, h};
      if (is_copy) {
        const real a = std::sqrt(amp * root_hd);
        lw.wq(base + 0, dim_one) = a / unit;
        lw.wk(base + 0, dim_text) = a * std::cos(1.0) / unit;
        lw.wk(base + 1, dim_text) = a * std::sin(1.0) / unit;
        const real b = std::sqrt(copy_slope * amp / theta_slow * root_hd);
        lw.wq(base + 2 * slow, dim_one) = b / unit;
        lw.wk(base + 2 * slow + 1, dim_text) = -b / unit;
        lw.wv(base + 0, dim_text) = 1 / unit;
        lw.wo(dim_prior, base + 0) = route_gain;
      } else if (is_visual) {
        const real a = std::sqrt(visual_score * root_hd);
        lw.wq(base + 2 * slow, dim_one) = a / unit;
        lw.wk(base + 2 * slow, dim_vis) = a / unit;
        lw.wk(base + 2 * slow, dim_anchor) = anchor_bonus * root_hd / a / unit;
        lw.wv(base + 0, dim_vis) = 1 / unit;
        lw.wo(dim_ground, base + 0) = route_gain;
      } else {
        const real s = 1.0 / std::sqrt(static_cast<real>(D));
        for (std::size_t r = base; r < base + hd; ++r)
          for (std::size_t d = 0; d < D; ++d) {
            lw.wq(r, d) = rng.uniform(s);
            lw.wk(r, d) = rng.uniform(s);
            lw.wv(r, d) = rng.uniform(s);
          }
        for (std::size_t d = first_noise; d < D; ++d)
          for (std::size_t r = base; r < base + hd; ++r) lw.wo(d, r) = rng.uniform(0.02);
      }
    }
    // FFN confined to the noise subspace
    for (std::size_t f = 0; f < c.ffn_dim; ++f)
      for (std::size_t d = first_noise; d < D; ++d) {
        lw.w1(f, d) = rng.uniform(0.1);
        lw.w2(d, f) = rng.uniform(0.02);
      }
  }

  for (std::size_t t = 0; t < V; ++t) {
    auto o = w.output.row(t);
    for (std::size_t d = first_noise; d < D; ++d) o[d] = rng.uniform(0.05);
  }
  auto prior = w.output.row(static_cast<std::size_t>(p.prior_token));
  auto ground = w.output.row(static_cast<std::size_t>(p.grounded_token));
  std::fill(prior.begin(), prior.end(), 0.0);
  std::fill(ground.begin(), ground.end(), 0.0);
  prior[dim_one] = static_cast<float>(logit_gain * prior_bias);
  prior[dim_prior] = static_cast<float>(logit_gain);
  ground[dim_ground] = static_cast<float>(logit_gain);
  for (real& v : w.output.data) v = static_cast<float>(v * spec.output_scale);
  model_weights::visit_tensors(w, [](const std::string&, const auto&, std::span<real> v) {
    for (real& x : v) x = static_cast<float>(x);
  });
  w.segmentation = lay.segmentation();
  w.validate();
  return w;
}

inline model_weights make_model(const fixture_spec& spec) {
  return spec.pathology ? pathology_model(spec) : random_model(spec);
}

// Default pathology fixture for a seed: 2 layers x 4 heads, head coordinates
// and the two output tokens drawn from the seed.
inline fixture_spec pathology_fixture(std::uint64_t seed) {
  fixture_spec s;
  s.seed = seed;
  s.config = {2, 4, 32, 8, 32, 32, 128, 10000};
  s.layout = {4, 16, 6};
  fixture_rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  pathology_spec p;
  const std::size_t slots = s.config.num_layers * s.config.num_heads;
  const std::size_t a = rng.below(slots);
  std::size_t b = rng.below(slots - 1);
  if (b >= a) ++b;
  p.copy_head = {a / s.config.num_heads, a % s.config.num_heads};
  p.visual_head = {b / s.config.num_heads, b % s.config.num_heads};
  const vocab_partition vp{s.config.vocab_size};
  const auto text = vp.text();
  const std::size_t pi = rng.below(text.size());
  std::size_t gi = rng.below(text.size() - 1);
  if (gi >= pi) ++gi;
  p.prior_token = static_cast<token_id>(text.begin + pi);
  p.grounded_token = static_cast<token_id>(text.begin + gi);
  s.pathology = p;
  return s;
}

// Prompt drawn from the vocabulary partition. Pathology prompts hold the
// anchor token inside the visual block and end on the prior token.
inline std::vector<token_id> fixture_prompt(const fixture_spec& spec, std::uint64_t prompt_seed) {
  const auto& lay = spec.layout;
  const vocab_partition vp{spec.config.vocab_size};
  if (vp.sys().empty() || vp.vis().size() < 2 || vp.text().empty())
    throw contract_error("fixture_prompt: vocabulary too small to partition");
  fixture_rng rng(prompt_seed);
  auto pick = [&](index_range r) { return static_cast<token_id>(r.begin + rng.below(r.size())); };
  std::vector<token_id> out;
  out.reserve(lay.length());
  for (std::size_t i = 0; i < lay.sys; ++i) out.push_back(pick(vp.sys()));
  const index_range plain_vis{vp.vis().begin + 1, vp.vis().end};
  const std::size_t anchor_at = lay.vis ? rng.below(lay.vis) : 0;
  for (std::size_t i = 0; i < lay.vis; ++i)
    out.push_back(spec.pathology && i == anchor_at ? vp.anchor() : pick(plain_vis));
  for (std::size_t i = 0; i < lay.instr; ++i) out.push_back(pick(vp.text()));
  if (spec.pathology && lay.instr > 0) out.back() = spec.pathology->prior_token;
  return out;
}

}  // namespace atnf
