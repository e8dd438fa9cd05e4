#pragma once

#include <initializer_list>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "atnf/attention.hpp"
#include "atnf/hai.hpp"
#include "atnf/tai.hpp"

namespace atnf {

// Strict JSON access: unknown keys and type mismatches raise config_error
// naming the offending field path.
class json_fields {
 public:
  json_fields(const nlohmann::json& j, std::string path, std::initializer_list<std::string_view> allowed)
      : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw config_error(path_ + ": expected an object");
    for (const auto& [key, _] : j.items())
      if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
        throw config_error(field(key) + ": unknown key");
  }

  std::string field(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }
  bool has(std::string_view key) const { return j_.contains(std::string(key)); }
  const nlohmann::json& at(std::string_view key) const { return j_.at(std::string(key)); }

  template <typename T>
  void read(std::string_view key, T& out) const {
    if (!has(key)) return;
    try {
      out = at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw config_error(field(key) + ": wrong type");
    }
  }

  template <typename T>
  T require(std::string_view key) const {
    if (!has(key)) throw config_error(field(key) + ": required field missing");
    T out{};
    read(key, out);
    return out;
  }

  void read_real(std::string_view key, real& out) const {
    if (!has(key)) return;
    if (!at(key).is_number()) throw config_error(field(key) + ": expected a number");
    out = at(key).get<real>();
  }

  void read_index(std::string_view key, std::size_t& out) const {
    if (!has(key)) return;
    if (!at(key).is_number_unsigned()) throw config_error(field(key) + ": expected a non-negative integer");
    out = at(key).get<std::size_t>();
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
};

struct intervention_config {
  bool tai_enabled = true;
  tai_params tai;
  bool hai_enabled = true;
  hai_params hai;
  std::vector<std::pair<std::size_t, std::size_t>> masked_heads;

  void validate() const {
    if (tai_enabled) tai.validate();
    if (hai_enabled) hai.validate();
  }

  // k = delta = 1, alpha = 0: every rewrite leaves rows untouched.
  static intervention_config identity() {
    intervention_config c;
    c.tai.k = c.tai.delta = 1;
    c.hai.alpha_txt = c.hai.alpha_sys = 0;
    return c;
  }

  bool active() const { return tai_enabled || hai_enabled || !masked_heads.empty(); }
};

inline std::vector<std::string> preset_names() { return {"paper-llava", "paper-llava-chair", "paper-compact", "identity"}; }

// paper-llava: yes/no probing settings; -chair: fine-grained caption settings;
// paper-compact: short visual sequences (no token-level intervention).
inline intervention_config intervention_preset(std::string_view name) {
  intervention_config c;
  if (name == "paper-llava") return c;
  if (name == "paper-llava-chair") {
    c.tai.k = 10;
    c.tai.delta = 0.4;
    return c;
  }
  if (name == "paper-compact") {
    c.tai_enabled = false;
    c.hai.alpha_sys = 0.4;
    c.hai.alpha_txt = 0.6;
    return c;
  }
  if (name == "identity") return intervention_config::identity();
  throw config_error("unknown preset '" + std::string(name) + "'");
}

inline layer_span parse_layer_span(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_unsigned() || !(j[1].is_null() || j[1].is_number_unsigned()))
    throw config_error(path + ": expected [first, last) with last an integer or null");
  layer_span s{j[0].get<std::size_t>(), std::nullopt};
  if (!j[1].is_null()) s.last = j[1].get<std::size_t>();
  if (s.last && *s.last < s.first) throw config_error(path + ": range is inverted");
  return s;
}

inline nlohmann::json layer_span_to_json(const layer_span& s) {
  return nlohmann::json::array({s.first, s.last ? nlohmann::json(*s.last) : nlohmann::json(nullptr)});
}

// Overlays the fields present in `j` onto `c`.
inline void apply_intervention_json(intervention_config& c, const nlohmann::json& j, const std::string& path) {
  const json_fields f(j, path, {"tai", "hai", "mask_heads"});
  if (f.has("tai")) {
    const json_fields t(f.at("tai"), f.field("tai"), {"enabled", "k", "delta", "tau_salient", "tau_sink", "start_layer"});
    t.read("enabled", c.tai_enabled);
    t.read_real("k", c.tai.k);
    t.read_real("delta", c.tai.delta);
    t.read_real("tau_salient", c.tai.tau_salient);
    t.read_real("tau_sink", c.tai.tau_sink);
    t.read_index("start_layer", c.tai.start_layer);
  }
  if (f.has("hai")) {
    const json_fields h(f.at("hai"), f.field("hai"),
                        {"enabled", "lambda_vis", "lambda_txt", "lambda_sys", "alpha_txt", "alpha_sys", "txt_layers",
                         "sys_layers", "refresh_each_step"});
    h.read("enabled", c.hai_enabled);
    h.read_real("lambda_vis", c.hai.lambda_vis);
    h.read_real("lambda_txt", c.hai.lambda_txt);
    h.read_real("lambda_sys", c.hai.lambda_sys);
    h.read_real("alpha_txt", c.hai.alpha_txt);
    h.read_real("alpha_sys", c.hai.alpha_sys);
    if (h.has("txt_layers")) c.hai.txt_layers = parse_layer_span(h.at("txt_layers"), h.field("txt_layers"));
    if (h.has("sys_layers")) c.hai.sys_layers = parse_layer_span(h.at("sys_layers"), h.field("sys_layers"));
    h.read("refresh_each_step", c.hai.refresh_each_step);
  }
  if (f.has("mask_heads")) {
    const auto& m = f.at("mask_heads");
    if (!m.is_array()) throw config_error(f.field("mask_heads") + ": expected an array of [layer, head]");
    c.masked_heads.clear();
    for (std::size_t i = 0; i < m.size(); ++i) {
      const auto& e = m[i];
      if (!e.is_array() || e.size() != 2 || !e[0].is_number_unsigned() || !e[1].is_number_unsigned())
        throw config_error(f.field("mask_heads") + "[" + std::to_string(i) + "]: expected [layer, head]");
      c.masked_heads.emplace_back(e[0].get<std::size_t>(), e[1].get<std::size_t>());
    }
  }
  try {
    c.validate();
  } catch (const config_error& e) {
    throw config_error(path.empty() ? e.what() : path + ": " + e.what());
  }
}

inline nlohmann::json intervention_to_json(const intervention_config& c) {
  nlohmann::json j;
  j["tai"] = {{"enabled", c.tai_enabled},         {"k", c.tai.k},
              {"delta", c.tai.delta},             {"tau_salient", c.tai.tau_salient},
              {"tau_sink", c.tai.tau_sink},       {"start_layer", c.tai.start_layer}};
  j["hai"] = {{"enabled", c.hai_enabled},
              {"lambda_vis", c.hai.lambda_vis},
              {"lambda_txt", c.hai.lambda_txt},
              {"lambda_sys", c.hai.lambda_sys},
              {"alpha_txt", c.hai.alpha_txt},
              {"alpha_sys", c.hai.alpha_sys},
              {"txt_layers", layer_span_to_json(c.hai.txt_layers)},
              {"sys_layers", layer_span_to_json(c.hai.sys_layers)},
              {"refresh_each_step", c.hai.refresh_each_step}};
  j["mask_heads"] = nlohmann::json::array();
  for (const auto& [l, h] : c.masked_heads) j["mask_heads"].push_back({l, h});
  return j;
}

// Combined token- and head-level intervention. Each layer's visual token
// classes and head types are computed from that layer's pre-rewrite prefill
// attention and then frozen for decoding (head types optionally refreshed
// from each decode row). TAI runs before HAI; each renormalizes on its own.
class visflow_hook final : public attention_hook {
 public:
  visflow_hook(intervention_config cfg, const model_config& model)
      : cfg_(std::move(cfg)), mask_(model, cfg_.masked_heads), num_layers_(model.num_layers) {
    cfg_.validate();
    tai_.resize(num_layers_);
    heads_.layers.resize(num_layers_);
    typed_.assign(num_layers_, false);
  }

  void observe_layer(const layer_attention& la) override {
    if (la.layer >= num_layers_ || !la.segmentation) return;
    const auto& seg = *la.segmentation;
    if (la.phase == hook_phase::prefill) {
      if (cfg_.tai_enabled && la.layer >= cfg_.tai.start_layer && !seg.vis.empty() &&
          covers(la, seg.vis.begin, seg.vis.end)) {
        tai_[la.layer] = classify_visual_tokens(compute_reception_scores(la.heads, seg, la.layer), cfg_.tai);
      }
      if (cfg_.hai_enabled && !seg.instr.empty() && covers(la, seg.instr.begin, seg.instr.end)) {
        type_heads(la, seg, seg.instr);
      }
    } else if (cfg_.hai_enabled && cfg_.hai.refresh_each_step && !la.heads.empty()) {
      const auto& v = la.heads.front();
      type_heads(la, seg, {v.first_query, v.first_query + v.rows});
    }
  }

  void rewrite(const hook_context& ctx, attention_rows& rows) override {
    if (ctx.layer >= num_layers_ || !ctx.segmentation) return;
    if (cfg_.tai_enabled && tai_[ctx.layer]) tai_rewrite(rows, *tai_[ctx.layer], cfg_.tai, *ctx.segmentation);
    if (cfg_.hai_enabled && typed_[ctx.layer]) {
      auto events = hai_rewrite(rows, heads_.layers[ctx.layer], cfg_.hai, *ctx.segmentation, ctx.layer, ctx.head);
      degenerate_.insert(degenerate_.end(), events.begin(), events.end());
    }
  }

  bool head_masked(std::size_t layer, std::size_t head) const override { return mask_.head_masked(layer, head); }

  const intervention_config& config() const { return cfg_; }
  const std::vector<std::optional<visual_token_classes>>& token_classes() const { return tai_; }
  const head_classification& head_types() const { return heads_; }
  const std::vector<degenerate_row>& degenerate_rows() const { return degenerate_; }

  // Pins head types (e.g. from an earlier prefill); later observations no longer retype them.
  void set_head_types(head_classification hc) {
    if (hc.layers.size() != num_layers_) throw dimension_error("set_head_types: layer count mismatch");
    heads_ = std::move(hc);
    typed_.assign(num_layers_, true);
    pinned_ = true;
  }

 private:
  static bool covers(const layer_attention& la, std::size_t first, std::size_t last) {
    return !la.heads.empty() && la.heads.front().has_query(first) && la.heads.front().has_query(last - 1);
  }

  void type_heads(const layer_attention& la, const token_segmentation& seg, index_range rows) {
    if (pinned_) return;
    const auto stats = compute_head_stats(la.heads, seg, la.layer, rows);
    heads_.layers[la.layer] = classify_heads(stats, cfg_.hai);
    typed_[la.layer] = true;
  }

  intervention_config cfg_;
  head_mask_hook mask_;
  std::size_t num_layers_;
  std::vector<std::optional<visual_token_classes>> tai_;
  head_classification heads_;
  std::vector<bool> typed_;
  bool pinned_ = false;
  std::vector<degenerate_row> degenerate_;
};

}  // namespace atnf
