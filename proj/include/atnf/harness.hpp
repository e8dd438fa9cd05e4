#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "atnf/decoder.hpp"
#include "atnf/dump.hpp"
#include "atnf/fixtures.hpp"
#include "atnf/flow.hpp"
#include "atnf/hai.hpp"
#include "atnf/intervention.hpp"
#include "atnf/metrics.hpp"
#include "atnf/saliency.hpp"
#include "atnf/tai.hpp"
#include "atnf/weights_io.hpp"

namespace atnf {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int run_config_version = 1;

// Command-line values that take precedence over the config file.
struct cli_overrides {
  std::optional<std::string> preset;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> capture;
  bool no_tai = false;
  bool no_hai = false;
};

struct run_config {
  fs::path weights;
  std::vector<std::vector<token_id>> prompts;  // generate/ablate/bench/inspect use the first
  std::optional<token_segmentation> segmentation;
  std::string preset = "paper-llava";
  intervention_config intervention;
  std::size_t max_new_tokens = 64;
  std::optional<capture_spec> capture;
  fs::path out = "atnf-out";
  std::uint64_t seed = 0;
  std::optional<token_id> eos_token;
  std::string ablation_mode = "mask-text";
  std::size_t top_n = 4;
  std::size_t repetitions = 5;
  bool vv_lower_triangle = true;
};

// Whitespace-separated ids, a JSON array, or {"tokens": [...], "segmentation": {...}}.
struct prompt_file {
  std::vector<token_id> tokens;
  std::optional<token_segmentation> segmentation;
};

inline token_segmentation parse_segmentation(const json& j, const std::string& path) {
  const json_fields f(j, path, {"sys", "vis", "instr", "lengths", "preset", "instr_len"});
  token_segmentation s;
  auto range = [&](std::string_view key) {
    const auto& r = f.at(key);
    if (!r.is_array() || r.size() != 2 || !r[0].is_number_unsigned() || !r[1].is_number_unsigned())
      throw config_error(f.field(key) + ": expected [begin, end)");
    return index_range{r[0].get<std::size_t>(), r[1].get<std::size_t>()};
  };
  if (f.has("preset")) {
    s = segmentation_preset(f.require<std::string>("preset"), f.require<std::size_t>("instr_len"));
  } else if (f.has("lengths")) {
    const auto l = f.require<std::vector<std::size_t>>("lengths");
    if (l.size() != 3) throw config_error(f.field("lengths") + ": expected [sys, vis, instr]");
    s = token_segmentation::from_lengths(l[0], l[1], l[2]);
  } else {
    for (const char* k : {"sys", "vis", "instr"})
      if (!f.has(k)) throw config_error(f.field(k) + ": required field missing");
    s.sys = range("sys");
    s.vis = range("vis");
    s.instr = range("instr");
    s.resp_start = s.instr.end;
  }
  try {
    s.validate(s.prompt_length());
  } catch (const contract_error& e) {
    throw config_error(path + ": " + e.what());
  }
  return s;
}

inline prompt_file parse_prompt_json(const json& j, const std::string& path) {
  prompt_file p;
  auto ids = [&](const json& a, const std::string& where) {
    if (!a.is_array()) throw config_error(where + ": expected an array of token ids");
    std::vector<token_id> out;
    for (const auto& t : a) {
      if (!t.is_number_integer()) throw config_error(where + ": token ids must be integers");
      out.push_back(t.get<token_id>());
    }
    return out;
  };
  if (j.is_array()) {
    p.tokens = ids(j, path);
  } else {
    const json_fields f(j, path, {"tokens", "segmentation"});
    if (!f.has("tokens")) throw config_error(f.field("tokens") + ": required field missing");
    p.tokens = ids(f.at("tokens"), f.field("tokens"));
    if (f.has("segmentation")) p.segmentation = parse_segmentation(f.at("segmentation"), f.field("segmentation"));
  }
  if (p.tokens.empty()) throw config_error(path + ": empty prompt");
  return p;
}

inline prompt_file load_prompt_file(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw config_error("prompt file not found: " + file.string());
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string text = ss.str();
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && (text[first] == '[' || text[first] == '{')) {
    try {
      return parse_prompt_json(json::parse(text), file.string());
    } catch (const json::exception& e) {
      throw config_error(file.string() + ": invalid JSON (" + e.what() + ")");
    }
  }
  prompt_file p;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    std::size_t used = 0;
    long v = 0;
    try {
      v = std::stol(word, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != word.size()) throw config_error(file.string() + ": '" + word + "' is not a token id");
    p.tokens.push_back(static_cast<token_id>(v));
  }
  if (p.tokens.empty()) throw config_error(file.string() + ": empty prompt");
  return p;
}

inline model_weights load_model(const fs::path& file) {
  if (file.extension() == ".json") {
    std::ifstream is(file);
    if (!is) throw format_error("cannot open weight file '" + file.string() + "'");
    try {
      return weights_from_json(json::parse(is));
    } catch (const json::exception& e) {
      throw format_error(file.string() + ": invalid JSON (" + e.what() + ")");
    }
  }
  return load_weights(file.string());
}

// Parses a versioned run config. Relative paths resolve against base_dir.
inline run_config parse_run_config(const json& j, const fs::path& base_dir, const cli_overrides& ov = {},
                                   bool require_weights = true) {
  const json_fields f(j, "", {"version", "weights", "prompt", "prompts", "segmentation", "preset", "intervention",
                              "max_new_tokens", "capture", "out", "seed", "eos_token", "ablation", "bench",
                              "analyze"});
  if (!f.has("version")) throw config_error("version: required field missing");
  if (!f.at("version").is_number_integer() || f.at("version").get<int>() != run_config_version)
    throw config_error("version: unsupported config version (expected " + std::to_string(run_config_version) + ")");
  run_config c;
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base_dir / p; };

  if (f.has("weights")) c.weights = resolve(f.require<std::string>("weights"));
  if (require_weights) {
    if (c.weights.empty()) throw config_error("weights: required field missing");
    if (!fs::exists(c.weights)) throw config_error("weights: file not found: " + c.weights.string());
  }

  std::optional<token_segmentation> prompt_seg;
  auto add_prompt = [&](const json& p, const std::string& path) {
    prompt_file pf = p.is_string() ? load_prompt_file(resolve(p.get<std::string>())) : parse_prompt_json(p, path);
    if (pf.segmentation && !prompt_seg) prompt_seg = pf.segmentation;
    c.prompts.push_back(std::move(pf.tokens));
  };
  if (f.has("prompt")) add_prompt(f.at("prompt"), "prompt");
  if (f.has("prompts")) {
    const auto& ps = f.at("prompts");
    if (!ps.is_array()) throw config_error("prompts: expected an array");
    for (std::size_t i = 0; i < ps.size(); ++i) add_prompt(ps[i], "prompts[" + std::to_string(i) + "]");
  }
  if (f.has("segmentation")) c.segmentation = parse_segmentation(f.at("segmentation"), "segmentation");
  else c.segmentation = prompt_seg;

  f.read("preset", c.preset);
  if (ov.preset) c.preset = *ov.preset;
  c.intervention = intervention_preset(c.preset);
  if (f.has("intervention")) apply_intervention_json(c.intervention, f.at("intervention"), "intervention");
  if (ov.no_tai) c.intervention.tai_enabled = false;
  if (ov.no_hai) c.intervention.hai_enabled = false;

  f.read_index("max_new_tokens", c.max_new_tokens);
  if (c.max_new_tokens == 0) throw config_error("max_new_tokens: must be >= 1");
  std::optional<std::string> cap;
  if (f.has("capture")) cap = f.require<std::string>("capture");
  if (ov.capture) cap = ov.capture;
  if (cap) {
    try {
      c.capture = capture_spec::parse(*cap);
    } catch (const config_error& e) {
      throw config_error(std::string("capture: ") + e.what());
    }
  }
  if (f.has("out")) c.out = resolve(f.require<std::string>("out"));
  if (ov.out) c.out = *ov.out;
  if (f.has("seed")) {
    if (!f.at("seed").is_number_unsigned()) throw config_error("seed: expected a non-negative integer");
    c.seed = f.at("seed").get<std::uint64_t>();
  }
  if (ov.seed) c.seed = *ov.seed;
  if (f.has("eos_token")) c.eos_token = f.require<token_id>("eos_token");

  if (f.has("ablation")) {
    const json_fields a(f.at("ablation"), "ablation", {"mode", "top_n"});
    a.read("mode", c.ablation_mode);
    a.read_index("top_n", c.top_n);
  }
  if (f.has("bench")) {
    const json_fields b(f.at("bench"), "bench", {"repetitions"});
    b.read_index("repetitions", c.repetitions);
  }
  if (f.has("analyze")) {
    const json_fields a(f.at("analyze"), "analyze", {"vv_lower_triangle"});
    a.read("vv_lower_triangle", c.vv_lower_triangle);
  }
  return c;
}

inline run_config load_run_config(const fs::path& file, const cli_overrides& ov = {}, bool require_weights = true) {
  std::ifstream is(file);
  if (!is) throw config_error("config file not found: " + file.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw config_error(file.string() + ": invalid JSON (" + e.what() + ")");
  }
  return parse_run_config(j, file.parent_path(), ov, require_weights);
}

// Segmentation resolution order: config, prompt file, weight header.
inline token_segmentation resolve_segmentation(const run_config& c, const model_weights& w,
                                               std::span<const token_id> prompt) {
  const auto seg = c.segmentation ? c.segmentation : w.segmentation;
  if (!seg) throw config_error("segmentation: none given in config, prompt file or weight header");
  seg->validate(prompt.size());
  if (seg->prompt_length() != prompt.size())
    throw config_error("segmentation: covers " + std::to_string(seg->prompt_length()) + " tokens but the prompt has " +
                       std::to_string(prompt.size()));
  return *seg;
}

inline const std::vector<token_id>& first_prompt(const run_config& c) {
  if (c.prompts.empty()) throw config_error("prompt: required field missing");
  return c.prompts.front();
}

// ---- generation ----------------------------------------------------------

using steady = std::chrono::steady_clock;

inline double ms_since(steady::time_point t0) {
  return std::chrono::duration<double, std::milli>(steady::now() - t0).count();
}

struct generation {
  std::vector<token_id> tokens;
  double prefill_ms = 0;
  std::vector<double> step_ms;
  decode_state state;

  // Generated tokens per second of decode time; the first token comes from prefill.
  double tokens_per_second() const {
    const double total = std::accumulate(step_ms.begin(), step_ms.end(), 0.0);
    return total > 0 ? static_cast<double>(step_ms.size()) * 1000.0 / total : 0.0;
  }
};

inline generation generate(const model_weights& w, std::span<const token_id> prompt, const token_segmentation& seg,
                           attention_hook* hook, std::size_t max_new, capture_spec capture = {},
                           std::optional<token_id> eos = std::nullopt) {
  if (max_new == 0) throw config_error("max_new_tokens: must be >= 1");
  if (prompt.size() + max_new - 1 > w.config.max_seq_len)
    throw config_error("max_new_tokens: prompt (" + std::to_string(prompt.size()) + ") + " + std::to_string(max_new) +
                       " new tokens exceeds max_seq_len " + std::to_string(w.config.max_seq_len));
  generation g;
  forward_options opt;
  opt.hook = hook;
  opt.capture = capture;
  auto t0 = steady::now();
  g.state = prefill(w, prompt, seg, opt);
  g.prefill_ms = ms_since(t0);
  g.tokens.push_back(greedy_token(g.state.last_logits));
  g.step_ms.reserve(max_new);
  while (g.tokens.size() < max_new && !(eos && g.tokens.back() == *eos)) {
    t0 = steady::now();
    const auto r = decode_token(g.state, w, g.tokens.back(), hook);
    g.step_ms.push_back(ms_since(t0));
    g.tokens.push_back(r.token);
  }
  return g;
}

// Linear-interpolated percentile, q in [0, 100].
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) { return percentile(std::move(v), 50); }

inline json pairs_to_json(const std::vector<std::pair<std::size_t, std::size_t>>& v) {
  json a = json::array();
  for (const auto& [l, h] : v) a.push_back({l, h});
  return a;
}

// Per-layer set sizes and the heads that HAI actually rewrites.
inline json intervention_summary(const visflow_hook& hook, const model_config& mc) {
  const auto& cfg = hook.config();
  json layers = json::array();
  std::vector<std::pair<std::size_t, std::size_t>> suppressed;
  for (std::size_t l = 0; l < mc.num_layers; ++l) {
    json e = {{"layer", l}};
    const auto& tc = hook.token_classes()[l];
    e["salient"] = tc ? tc->salient.size() : 0;
    e["sink"] = tc ? tc->sink.size() : 0;
    const auto& hs = hook.head_types().layers[l];
    e["visual_heads"] = hs.visual;
    e["text_heads"] = hs.text;
    e["system_heads"] = hs.system;
    layers.push_back(e);
    if (!cfg.hai_enabled) continue;
    for (std::size_t h = 0; h < mc.num_heads; ++h) {
      if (head_sets::has(hs.visual, h)) continue;
      const bool txt = cfg.hai.alpha_txt != 0 && cfg.hai.txt_layers.contains(l) && head_sets::has(hs.text, h);
      const bool sys = cfg.hai.alpha_sys != 0 && cfg.hai.sys_layers.contains(l) && head_sets::has(hs.system, h);
      if (txt || sys) suppressed.emplace_back(l, h);
    }
  }
  return {{"layers", layers},
          {"suppressed_heads", pairs_to_json(suppressed)},
          {"masked_heads", pairs_to_json(cfg.masked_heads)},
          {"degenerate_rows", hook.degenerate_rows().size()}};
}

inline json timing_json(const generation& g) {
  return {{"prefill_ms", g.prefill_ms},
          {"step_ms", g.step_ms},
          {"decode_ms_total", std::accumulate(g.step_ms.begin(), g.step_ms.end(), 0.0)},
          {"tokens_per_second", g.tokens_per_second()},
          {"p50_ms", percentile(g.step_ms, 50)},
          {"p95_ms", percentile(g.step_ms, 95)}};
}

inline void write_text(const fs::path& file, const std::string& body) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw format_error("cannot write '" + file.string() + "'");
  os << body;
}

inline void write_json(const fs::path& file, const json& j) { write_text(file, j.dump(2) + "\n"); }

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw format_error("cannot create output directory '" + dir.string() + "': " + ec.message());
}

// ---- generate --------------------------------------------------------------

inline json cmd_generate(const run_config& c) {
  const auto w = load_model(c.weights);
  const auto& prompt = first_prompt(c);
  const auto seg = resolve_segmentation(c, w, prompt);
  const capture_spec capture = c.capture.value_or(capture_spec::none());
  std::optional<visflow_hook> hook;
  if (c.intervention.active()) hook.emplace(c.intervention, w.config);
  auto g = generate(w, prompt, seg, hook ? &*hook : nullptr, c.max_new_tokens, capture, c.eos_token);

  ensure_dir(c.out);
  json report = {{"command", "generate"},
                 {"prompt_length", prompt.size()},
                 {"segmentation", segmentation_to_json(seg)},
                 {"tokens", g.tokens},
                 {"tai_enabled", c.intervention.tai_enabled},
                 {"hai_enabled", c.intervention.hai_enabled},
                 {"intervention", intervention_to_json(c.intervention)},
                 {"dumps", json::array()}};
  if (hook) report["summary"] = intervention_summary(*hook, w.config);
  if (capture.enabled()) {
    dump_file d;
    d.segmentation = seg;
    d.tokens = prompt;
    for (const auto& r : g.state.records) d.entries.push_back(to_dump_entry(r));
    const auto path = c.out / "attention.atdp";
    save_dump(path.string(), d);
    report["dumps"].push_back(path.string());
  }
  report["timing"] = timing_json(g);
  write_json(c.out / "report.json", report);
  return report;
}

// ---- analyze ---------------------------------------------------------------

struct analysis_tables {
  std::string reception_csv, head_stats_csv, flow_csv;
};

// Layer -> per-head views of the attention entries of a dump.
inline std::map<std::size_t, std::vector<attention_view>> attention_by_layer(const dump_file& d) {
  std::map<std::size_t, std::vector<attention_view>> out;
  for (const auto& e : d.entries) {
    if (e.kind != "attention" || !e.head) continue;
    auto& v = out[e.layer];
    if (v.size() <= *e.head) v.resize(*e.head + 1);
    v[*e.head] = attention_view(std::span<const real>(e.data), e.rows, e.cols, e.first_query);
  }
  for (const auto& [l, v] : out)
    for (std::size_t h = 0; h < v.size(); ++h)
      if (v[h].rows == 0) throw missing_data_error("dump lacks attention for layer " + std::to_string(l) + " head " + std::to_string(h));
  return out;
}

// Builds all three tables from dumps only, so a replay of saved dumps
// reproduces them exactly.
inline analysis_tables analysis_from_dumps(std::span<const dump_file> samples, const intervention_config& ic,
                                           bool vv_lower_triangle) {
  std::ostringstream rec, heads;
  rec << "sample,layer,vis_index,position,score,class\n";
  heads << "sample,layer,head,A_vis,A_txt,A_sys,visual,text,system\n";
  std::vector<std::vector<flow_summary>> flows;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const auto& d = samples[s];
    if (!d.segmentation) throw missing_data_error("dump has no segmentation");
    const auto& seg = *d.segmentation;
    const auto layers = attention_by_layer(d);
    if (layers.empty()) throw missing_data_error("dump holds no attention records (capture disabled?)");
    for (const auto& [l, views] : layers) {
      const auto r = compute_reception_scores(views, seg, l);
      const auto cls = r.scores.empty() ? visual_token_classes{} : classify_visual_tokens(r, ic.tai);
      for (std::size_t j = 0; j < r.scores.size(); ++j) {
        const char* kind = std::binary_search(cls.sink.begin(), cls.sink.end(), j)         ? "sink"
                           : std::binary_search(cls.salient.begin(), cls.salient.end(), j) ? "salient"
                                                                                             : "none";
        rec << s << ',' << l << ',' << j << ',' << seg.vis.begin + j << ',' << format_real(r.scores[j]) << ','
            << kind << '\n';
      }
      const auto st = compute_head_stats(views, seg, l);
      const auto hs = classify_heads(st, ic.hai);
      for (std::size_t h = 0; h < views.size(); ++h)
        heads << s << ',' << l << ',' << h << ',' << format_real(st.vis[h]) << ',' << format_real(st.txt[h]) << ','
              << format_real(st.sys[h]) << ',' << head_sets::has(hs.visual, h) << ','
              << head_sets::has(hs.text, h) << ',' << head_sets::has(hs.system, h) << '\n';
    }
    std::vector<flow_summary> f;
    for (const auto& e : d.entries) {
      if (e.kind != "saliency") continue;
      matrix I(e.rows, e.cols);
      I.data = e.data;
      f.push_back(compute_flow_summary(I, seg, e.layer, {vv_lower_triangle}));
    }
    flows.push_back(std::move(f));
  }
  std::ostringstream flow;
  write_flow_csv(flow, average_flow(flows));
  return {rec.str(), heads.str(), flow.str()};
}

inline void write_tables(const fs::path& out, const analysis_tables& t) {
  write_text(out / "reception.csv", t.reception_csv);
  write_text(out / "head_stats.csv", t.head_stats_csv);
  write_text(out / "flow.csv", t.flow_csv);
}

inline std::vector<fs::path> sample_dump_paths(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) throw config_error("dump directory not found: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("sample_", 0) == 0 && e.path().extension() == ".atdp") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) {
    auto idx = [](const fs::path& p) { return std::stoul(p.stem().string().substr(7)); };
    return idx(a) < idx(b);
  });
  if (out.empty()) throw missing_data_error("no sample_*.atdp dumps in " + dir.string());
  return out;
}

// Baseline response per prompt, then a captured full forward and saliency
// over prompt + response; dumps are written first and the tables are
// computed from the re-read dumps.
inline json cmd_analyze(const run_config& c) {
  const capture_spec capture = c.capture.value_or(capture_spec::all());
  if (!capture.enabled()) throw missing_data_error("analyze needs attention capture (--capture all or layers=a..b)");
  const auto w = load_model(c.weights);
  if (c.prompts.empty()) throw config_error("prompt: required field missing");
  ensure_dir(c.out);
  json report = {{"command", "analyze"}, {"dumps", json::array()}, {"responses", json::array()}};
  for (std::size_t s = 0; s < c.prompts.size(); ++s) {
    const auto& prompt = c.prompts[s];
    const auto seg = resolve_segmentation(c, w, prompt);
    auto g = generate(w, prompt, seg, nullptr, c.max_new_tokens, {}, c.eos_token);
    std::vector<token_id> full = prompt;
    full.insert(full.end(), g.tokens.begin(), g.tokens.end());
    if (full.size() > w.config.max_seq_len) full.resize(w.config.max_seq_len);
    if (full.size() == prompt.size()) throw contract_error("analyze: no room for a response within max_seq_len");
    forward_options opt;
    opt.capture = capture;
    const auto fwd = forward(w, full, seg, opt);
    const auto sal = attention_saliency(w, saliency_task{full, seg, 1});
    dump_file d;
    d.segmentation = seg;
    d.tokens = full;
    for (const auto& r : fwd.records) d.entries.push_back(to_dump_entry(r));
    for (const auto& m : sal) {
      if (!capture.wants(m.layer)) continue;
      d.entries.push_back({"saliency", m.layer, std::nullopt, 0, m.values.rows, m.values.cols, m.values.data});
    }
    const auto path = c.out / ("sample_" + std::to_string(s) + ".atdp");
    save_dump(path.string(), d);
    report["dumps"].push_back(path.string());
    report["responses"].push_back(std::vector<token_id>(full.begin() + static_cast<std::ptrdiff_t>(prompt.size()), full.end()));
  }
  std::vector<dump_file> dumps;
  for (const auto& p : report["dumps"]) dumps.push_back(load_dump(p.get<std::string>()));
  write_tables(c.out, analysis_from_dumps(dumps, c.intervention, c.vv_lower_triangle));
  report["tables"] = {(c.out / "reception.csv").string(), (c.out / "head_stats.csv").string(),
                      (c.out / "flow.csv").string()};
  write_json(c.out / "report.json", report);
  return report;
}

inline json cmd_analyze_from_dumps(const fs::path& dump_dir, const fs::path& out, const intervention_config& ic,
                                   bool vv_lower_triangle) {
  std::vector<dump_file> dumps;
  for (const auto& p : sample_dump_paths(dump_dir)) dumps.push_back(load_dump(p.string()));
  ensure_dir(out);
  write_tables(out, analysis_from_dumps(dumps, ic, vv_lower_triangle));
  return {{"command", "analyze"}, {"replayed", dumps.size()}, {"out", out.string()}};
}

// ---- ablate ----------------------------------------------------------------

inline const std::vector<std::string>& ablation_modes() {
  static const std::vector<std::string> m = {"mask-visual", "mask-system", "mask-text", "mask-text-shallow",
                                             "mask-random"};
  return m;
}

inline constexpr std::size_t shallow_layer_end = 8;

// Top-n heads over the whole model by the mode's group mass (ties by layer, head).
inline std::vector<std::pair<std::size_t, std::size_t>> select_ablation_heads(const decode_state& st,
                                                                              const model_config& mc,
                                                                              const std::string& mode,
                                                                              std::size_t top_n, std::uint64_t seed) {
  if (std::find(ablation_modes().begin(), ablation_modes().end(), mode) == ablation_modes().end())
    throw config_error("ablation.mode: unknown mode '" + mode + "'");
  const std::size_t layer_end = mode == "mask-text-shallow" ? std::min(shallow_layer_end, mc.num_layers) : mc.num_layers;
  const std::size_t total = layer_end * mc.num_heads;
  if (top_n > total)
    throw config_error("ablation.top_n: " + std::to_string(top_n) + " exceeds the " + std::to_string(total) +
                       " eligible heads");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (mode == "mask-random") {
    std::vector<std::pair<std::size_t, std::size_t>> all;
    for (std::size_t l = 0; l < layer_end; ++l)
      for (std::size_t h = 0; h < mc.num_heads; ++h) all.emplace_back(l, h);
    fixture_rng rng(seed);
    for (std::size_t i = 0; i < top_n; ++i) {  // partial Fisher-Yates
      const std::size_t j = i + rng.below(all.size() - i);
      std::swap(all[i], all[j]);
      out.push_back(all[i]);
    }
    std::sort(out.begin(), out.end());
    return out;
  }
  const token_group g = mode == "mask-visual" ? token_group::vis : mode == "mask-system" ? token_group::sys : token_group::txt;
  std::vector<std::tuple<real, std::size_t, std::size_t>> ranked;
  for (std::size_t l = 0; l < layer_end; ++l) {
    const auto views = layer_views(st.records, l, mc.num_heads);
    const auto st_l = compute_head_stats(views, st.segmentation, l);
    const auto& mass = g == token_group::vis ? st_l.vis : g == token_group::sys ? st_l.sys : st_l.txt;
    for (std::size_t h = 0; h < mc.num_heads; ++h) ranked.emplace_back(mass[h], l, h);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });
  for (std::size_t i = 0; i < top_n; ++i) out.emplace_back(std::get<1>(ranked[i]), std::get<2>(ranked[i]));
  std::sort(out.begin(), out.end());
  return out;
}

inline json cmd_ablate(const run_config& c) {
  const auto w = load_model(c.weights);
  const auto& prompt = first_prompt(c);
  const auto seg = resolve_segmentation(c, w, prompt);
  auto base = generate(w, prompt, seg, nullptr, c.max_new_tokens, capture_spec::all(), c.eos_token);
  const auto heads = select_ablation_heads(base.state, w.config, c.ablation_mode, c.top_n, c.seed);
  head_mask_hook mask(w.config, heads);
  auto abl = generate(w, prompt, seg, &mask, c.max_new_tokens, {}, c.eos_token);
  ensure_dir(c.out);
  json report = {{"command", "ablate"},
                 {"mode", c.ablation_mode},
                 {"top_n", c.top_n},
                 {"masked_heads", pairs_to_json(heads)},
                 {"baseline", {{"tokens", base.tokens}, {"timing", timing_json(base)}}},
                 {"ablated", {{"tokens", abl.tokens}, {"timing", timing_json(abl)}}},
                 {"changed", base.tokens != abl.tokens}};
  write_json(c.out / "report.json", report);
  return report;
}

// ---- bench -----------------------------------------------------------------

struct bench_variant {
  std::string name;
  std::optional<intervention_config> intervention;  // nullopt: no hook at all
};

inline std::vector<bench_variant> bench_variants(const intervention_config& ic) {
  intervention_config tai_only = ic, hai_only = ic, full = ic;
  tai_only.tai_enabled = true;
  tai_only.hai_enabled = false;
  hai_only.tai_enabled = false;
  hai_only.hai_enabled = true;
  full.tai_enabled = full.hai_enabled = true;
  for (auto* v : {&tai_only, &hai_only, &full}) v->masked_heads.clear();
  return {{"baseline", std::nullopt}, {"identity", intervention_config::identity()},
          {"tai", tai_only},          {"hai", hai_only},
          {"visflow", full}};
}

struct bench_row {
  std::string name;
  double median_tps = 0;
  double median_prefill_ms = 0;
  double p50_ms = 0, p95_ms = 0;
  double relative = 0;  // median_tps / baseline median_tps
  std::vector<double> tps;
};

// Sequential runs over identical prompts; one warmup run per variant is discarded.
inline std::vector<bench_row> run_bench(const model_weights& w, std::span<const token_id> prompt,
                                        const token_segmentation& seg, const intervention_config& ic,
                                        std::size_t repetitions, std::size_t max_new) {
  if (repetitions < 3) throw config_error("bench.repetitions: must be >= 3");
  if (max_new < 2) throw config_error("max_new_tokens: bench needs at least 2 tokens to time decoding");
  std::vector<bench_row> rows;
  for (const auto& v : bench_variants(ic)) {
    bench_row r{v.name};
    std::vector<double> steps, prefills;
    for (std::size_t rep = 0; rep <= repetitions; ++rep) {
      std::optional<visflow_hook> hook;
      if (v.intervention) hook.emplace(*v.intervention, w.config);
      const auto g = generate(w, prompt, seg, hook ? &*hook : nullptr, max_new);
      if (rep == 0) continue;
      r.tps.push_back(g.tokens_per_second());
      prefills.push_back(g.prefill_ms);
      steps.insert(steps.end(), g.step_ms.begin(), g.step_ms.end());
    }
    r.median_tps = median(r.tps);
    r.median_prefill_ms = median(prefills);
    r.p50_ms = percentile(steps, 50);
    r.p95_ms = percentile(steps, 95);
    rows.push_back(std::move(r));
  }
  for (auto& r : rows) r.relative = rows.front().median_tps > 0 ? r.median_tps / rows.front().median_tps : 0;
  return rows;
}

inline std::string bench_table(const std::vector<bench_row>& rows) {
  std::ostringstream os;
  os << "variant,median_tps,relative,p50_ms,p95_ms,median_prefill_ms\n";
  for (const auto& r : rows)
    os << r.name << ',' << format_real(r.median_tps) << ',' << format_real(r.relative) << ',' << format_real(r.p50_ms)
       << ',' << format_real(r.p95_ms) << ',' << format_real(r.median_prefill_ms) << '\n';
  return os.str();
}

inline json cmd_bench(const run_config& c) {
  const auto w = load_model(c.weights);
  const auto& prompt = first_prompt(c);
  const auto seg = resolve_segmentation(c, w, prompt);
  const auto rows = run_bench(w, prompt, seg, c.intervention, c.repetitions, c.max_new_tokens);
  ensure_dir(c.out);
  const auto table = bench_table(rows);
  write_text(c.out / "bench.csv", table);
  json report = {{"command", "bench"}, {"repetitions", c.repetitions}, {"variants", json::array()}, {"table", table}};
  for (const auto& r : rows)
    report["variants"].push_back({{"name", r.name},
                                  {"median_tps", r.median_tps},
                                  {"relative", r.relative},
                                  {"p50_ms", r.p50_ms},
                                  {"p95_ms", r.p95_ms},
                                  {"median_prefill_ms", r.median_prefill_ms},
                                  {"tps", r.tps}});
  write_json(c.out / "bench.json", report);
  return report;
}

// ---- metrics ---------------------------------------------------------------

inline json optional_json(const std::optional<real>& v) { return v ? json(*v) : json(nullptr); }

inline json cmd_metrics(const std::optional<fs::path>& chair_file, const std::optional<fs::path>& pope_file,
                        const std::optional<fs::path>& out) {
  if (!chair_file && !pope_file) throw config_error("metrics: give --chair and/or --pope annotation files");
  json report = {{"command", "metrics"}};
  auto open = [](const fs::path& p) {
    std::ifstream is(p);
    if (!is) throw config_error("annotation file not found: " + p.string());
    return is;
  };
  auto tagged = [](const fs::path& p, auto&& fn) {
    try {
      return fn();
    } catch (const format_error& e) {
      throw format_error(p.string() + ": " + e.what());
    }
  };
  if (chair_file) {
    auto is = open(*chair_file);
    const auto anns = tagged(*chair_file, [&] { return read_caption_annotations(is); });
    const auto r = chair_scores(anns);
    report["chair"] = {{"chair_i", optional_json(r.chair_i)}, {"chair_s", optional_json(r.chair_s)},
                       {"recall", optional_json(r.recall)},   {"captions", r.captions},
                       {"mentions", r.mentions},              {"hallucinated", r.hallucinated}};
  }
  if (pope_file) {
    auto is = open(*pope_file);
    const auto recs = tagged(*pope_file, [&] { return read_pope_records(is); });
    const auto r = pope_scores(recs);
    report["pope"] = {{"accuracy", optional_json(r.accuracy)}, {"precision", optional_json(r.precision)},
                      {"recall", optional_json(r.recall)},     {"f1", optional_json(r.f1)},
                      {"tp", r.tp}, {"fp", r.fp}, {"fn", r.fn}, {"tn", r.tn}};
  }
  if (out) {
    ensure_dir(*out);
    write_json(*out / "metrics.json", report);
  }
  return report;
}

inline std::string metrics_table(const json& report) {
  std::ostringstream os;
  os << "metric,value\n";
  auto put = [&](const std::string& name, const json& v) {
    os << name << ',' << (v.is_null() ? std::string("NA") : format_real(v.get<real>())) << '\n';
  };
  if (report.contains("chair"))
    for (const char* k : {"chair_i", "chair_s", "recall"}) put(std::string("chair.") + k, report["chair"][k]);
  if (report.contains("pope"))
    for (const char* k : {"accuracy", "precision", "recall", "f1"}) put(std::string("pope.") + k, report["pope"][k]);
  return os.str();
}

// ---- inspect ---------------------------------------------------------------

inline json cmd_inspect(const run_config& c) {
  const auto w = load_model(c.weights);
  json report = {{"command", "inspect"}, {"config", config_to_json(w.config)}};
  if (w.segmentation) report["weight_segmentation"] = segmentation_to_json(*w.segmentation);
  if (c.prompts.empty()) return report;
  const auto& prompt = first_prompt(c);
  const auto seg = resolve_segmentation(c, w, prompt);
  visflow_hook hook(c.intervention, w.config);
  forward_options opt;
  opt.hook = &hook;
  prefill(w, prompt, seg, opt);
  report["segmentation"] = segmentation_to_json(seg);
  json layers = json::array();
  for (std::size_t l = 0; l < w.config.num_layers; ++l) {
    const auto& tc = hook.token_classes()[l];
    const auto& hs = hook.head_types().layers[l];
    layers.push_back({{"layer", l},
                      {"salient", tc ? json(tc->salient) : json(nullptr)},
                      {"sink", tc ? json(tc->sink) : json(nullptr)},
                      {"visual_heads", hs.visual},
                      {"text_heads", hs.text},
                      {"system_heads", hs.system}});
  }
  report["layers"] = layers;
  report["summary"] = intervention_summary(hook, w.config);
  return report;
}

inline std::string inspect_text(const json& r) {
  std::ostringstream os;
  const auto& c = r["config"];
  os << "model: " << c["num_layers"] << " layers, " << c["num_heads"] << " heads, dim " << c["model_dim"]
     << ", vocab " << c["vocab_size"] << ", max_seq_len " << c["max_seq_len"] << '\n';
  if (!r.contains("layers")) return os.str();
  auto list = [](const json& v) {
    if (v.is_null()) return std::string("-");
    std::string s = "{";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i].dump();
    return s + "}";
  };
  os << "layer  visual_heads  text_heads  system_heads  salient_tokens  sink_tokens\n";
  for (const auto& l : r["layers"])
    os << l["layer"] << "  " << list(l["visual_heads"]) << "  " << list(l["text_heads"]) << "  "
       << list(l["system_heads"]) << "  " << list(l["salient"]) << "  " << list(l["sink"]) << '\n';
  os << "suppressed heads: " << r["summary"]["suppressed_heads"].dump() << '\n';
  return os.str();
}

// ---- fixture ---------------------------------------------------------------

// Writes weights, prompt and a ready-to-run config for a generated fixture.
inline json cmd_fixture(const fixture_spec& spec, const fs::path& out, std::uint64_t prompt_seed,
                        const std::string& preset) {
  const auto w = make_model(spec);
  const auto prompt = fixture_prompt(spec, prompt_seed);
  ensure_dir(out);
  save_weights((out / "weights.atnf").string(), w);
  write_json(out / "prompt.json", {{"tokens", prompt}, {"segmentation", segmentation_to_json(spec.layout.segmentation())}});
  json cfg = {{"version", run_config_version}, {"weights", "weights.atnf"}, {"prompt", "prompt.json"},
              {"preset", preset},             {"max_new_tokens", 8},       {"out", "run"},
              {"seed", spec.seed}};
  write_json(out / "config.json", cfg);
  json info = {{"seed", spec.seed}, {"config", config_to_json(spec.config)}, {"prompt", prompt}};
  if (spec.pathology) {
    const auto& p = *spec.pathology;
    info["pathology"] = {{"copy_head", {p.copy_head.layer, p.copy_head.head}},
                         {"visual_head", {p.visual_head.layer, p.visual_head.head}},
                         {"prior_token", p.prior_token},
                         {"grounded_token", p.grounded_token}};
  }
  write_json(out / "fixture.json", info);
  return info;
}

}  // namespace atnf
