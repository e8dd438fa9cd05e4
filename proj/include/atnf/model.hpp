#pragma once

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "atnf/core.hpp"
#include "atnf/tensor.hpp"

namespace atnf {

struct model_config {
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t model_dim = 16;
  std::size_t head_dim = 8;
  std::size_t vocab_size = 32;
  std::size_t ffn_dim = 64;
  std::size_t max_seq_len = 128;
  real rope_base = 10000;

  void validate() const {
    if (num_layers == 0 || num_heads == 0 || model_dim == 0 || head_dim == 0 || vocab_size == 0 ||
        ffn_dim == 0 || max_seq_len == 0)
      throw config_error("model config: all counts must be >= 1");
    if (num_heads * head_dim != model_dim)
      throw config_error("model config: num_heads * head_dim must equal model_dim");
    if (head_dim % 2 != 0) throw config_error("model config: head_dim must be even for rotary embedding");
    if (!(rope_base > 1) || !std::isfinite(rope_base))
      throw config_error("model config: rope_base must be a finite value > 1");
  }

  friend bool operator==(const model_config&, const model_config&) = default;
};

enum class token_role { system, visual, instruction, response };

inline std::string_view role_name(token_role r) {
  switch (r) {
    case token_role::system: return "system";
    case token_role::visual: return "visual";
    case token_role::instruction: return "instruction";
    case token_role::response: return "response";
  }
  return "?";
}

// Contiguous layout: system | visual | instruction | response...
// The text group used by the interventions is everything from instr.begin onward.
struct token_segmentation {
  index_range sys;
  index_range vis;
  index_range instr;
  std::size_t resp_start = 0;

  static token_segmentation from_lengths(std::size_t n_sys, std::size_t n_vis, std::size_t n_instr) {
    token_segmentation s;
    s.sys = {0, n_sys};
    s.vis = {n_sys, n_sys + n_vis};
    s.instr = {n_sys + n_vis, n_sys + n_vis + n_instr};
    s.resp_start = s.instr.end;
    return s;
  }

  std::size_t prompt_length() const { return instr.end; }

  // Columns (or rows) of the text group for a sequence of the given length.
  index_range text(std::size_t length) const { return {instr.begin, length}; }

  token_role role_of(std::size_t pos) const {
    if (sys.contains(pos)) return token_role::system;
    if (vis.contains(pos)) return token_role::visual;
    if (instr.contains(pos)) return token_role::instruction;
    return token_role::response;
  }

  // Structural checks; `length` is the number of tokens the segmentation is applied to.
  void validate(std::size_t length) const {
    if (sys.begin != 0 || sys.end < sys.begin || vis.begin != sys.end || vis.end < vis.begin ||
        instr.begin != vis.end || instr.end < instr.begin)
      throw contract_error("segmentation: ranges must be contiguous and ordered sys < vis < instr");
    if (resp_start != instr.end) throw contract_error("segmentation: resp_start must equal instr.end");
    if (length < prompt_length())
      throw contract_error("segmentation does not cover the prompt: " + std::to_string(length) +
                           " tokens < prompt length " + std::to_string(prompt_length()));
  }

  friend bool operator==(const token_segmentation&, const token_segmentation&) = default;
};

// Token index layouts of well-known LVLMs. Position 0 of mPLUG-Owl2 (BOS) is folded into
// the system range so that the three prompt ranges stay contiguous.
inline token_segmentation segmentation_preset(std::string_view model, std::size_t instr_len) {
  if (model == "llava-1.5") return token_segmentation::from_lengths(35, 576, instr_len);
  if (model == "minigpt-4") return token_segmentation::from_lengths(7, 32, instr_len);
  if (model == "mplug-owl2") return token_segmentation::from_lengths(5, 65, instr_len);
  throw config_error("unknown segmentation preset '" + std::string(model) + "'");
}

struct layer_weights {
  std::vector<real> attn_norm;
  matrix wq, wk, wv, wo;
  std::vector<real> ffn_norm;
  matrix w1, w2;

  friend bool operator==(const layer_weights&, const layer_weights&) = default;
};

// Pre-norm decoder: RMSNorm -> RoPE multi-head attention -> residual,
// RMSNorm -> SiLU MLP -> residual; final RMSNorm and unembedding.
struct model_weights {
  model_config config;
  matrix embedding;  // [vocab x model_dim]
  std::vector<layer_weights> layers;
  std::vector<real> final_norm;
  matrix output;  // [vocab x model_dim]
  std::optional<token_segmentation> segmentation;

  static model_weights zeros(const model_config& c) {
    c.validate();
    model_weights w;
    w.config = c;
    w.embedding = matrix(c.vocab_size, c.model_dim);
    w.layers.resize(c.num_layers);
    for (auto& l : w.layers) {
      l.attn_norm.assign(c.model_dim, 1.0);
      l.wq = l.wk = l.wv = l.wo = matrix(c.model_dim, c.model_dim);
      l.ffn_norm.assign(c.model_dim, 1.0);
      l.w1 = matrix(c.ffn_dim, c.model_dim);
      l.w2 = matrix(c.model_dim, c.ffn_dim);
    }
    w.final_norm.assign(c.model_dim, 1.0);
    w.output = matrix(c.vocab_size, c.model_dim);
    return w;
  }

  // Visits every tensor with its canonical name and shape; the order is the
  // serialization order of the weight file.
  template <typename Self, typename Fn>
  static void visit_tensors(Self& self, Fn&& fn) {
    auto vec = [&](const std::string& name, auto& v) { fn(name, std::vector<std::size_t>{v.size()}, std::span(v)); };
    auto mat = [&](const std::string& name, auto& m) {
      fn(name, std::vector<std::size_t>{m.rows, m.cols}, std::span(m.data));
    };
    mat("tok_embeddings", self.embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& lw = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      vec(p + "attn_norm", lw.attn_norm);
      mat(p + "wq", lw.wq);
      mat(p + "wk", lw.wk);
      mat(p + "wv", lw.wv);
      mat(p + "wo", lw.wo);
      vec(p + "ffn_norm", lw.ffn_norm);
      mat(p + "w1", lw.w1);
      mat(p + "w2", lw.w2);
    }
    vec("norm", self.final_norm);
    mat("output", self.output);
  }

  void validate() const {
    config.validate();
    const auto& c = config;
    if (layers.size() != c.num_layers) throw dimension_error("weights: layer count does not match config");
    auto expect = [](bool ok, const std::string& what) {
      if (!ok) throw dimension_error("weights: bad shape for " + what);
    };
    expect(embedding.rows == c.vocab_size && embedding.cols == c.model_dim, "tok_embeddings");
    expect(output.rows == c.vocab_size && output.cols == c.model_dim, "output");
    expect(final_norm.size() == c.model_dim, "norm");
    for (const auto& l : layers) {
      expect(l.attn_norm.size() == c.model_dim && l.ffn_norm.size() == c.model_dim, "layer norm");
      for (const matrix* m : {&l.wq, &l.wk, &l.wv, &l.wo})
        expect(m->rows == c.model_dim && m->cols == c.model_dim, "attention projection");
      expect(l.w1.rows == c.ffn_dim && l.w1.cols == c.model_dim, "w1");
      expect(l.w2.rows == c.model_dim && l.w2.cols == c.ffn_dim, "w2");
    }
    visit_tensors(*this, [](const std::string& name, const auto&, std::span<const real> v) {
      if (!all_finite(v)) throw contract_error("weights: non-finite entry in " + name);
    });
  }

  friend bool operator==(const model_weights&, const model_weights&) = default;
};

}  // namespace atnf
