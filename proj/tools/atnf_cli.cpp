// atnf: generate / analyze / ablate / bench / metrics / inspect / fixture.
//
// Exit status: 0 on success, 2 for usage or configuration errors, 1 for
// anything else. Failures print one JSON object on stderr.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "atnf/harness.hpp"
#include "atnf/log.hpp"

namespace {

using namespace atnf;

int fail(const std::string& kind, const std::string& message, int code) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << std::endl;
  return code;
}

struct common_flags {
  std::string config;
  cli_overrides ov;
  std::string preset, out, capture;
  std::uint64_t seed = 0;

  void attach(CLI::App* cmd, bool config_required = true) {
    auto* c = cmd->add_option("--config", config, "run config (JSON)");
    if (config_required) c->required();
    cmd->add_option("--preset", preset, "intervention preset")
        ->check(CLI::IsMember(preset_names()));
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--seed", seed, "seed");
    cmd->add_option("--capture", capture, "none | all | layers=a..b");
    cmd->add_flag("--no-tai", ov.no_tai, "disable token-level intervention");
    cmd->add_flag("--no-hai", ov.no_hai, "disable head-level intervention");
  }

  cli_overrides resolve(const CLI::App* cmd) {
    cli_overrides o = ov;
    if (cmd->count("--preset")) o.preset = preset;
    if (cmd->count("--out")) o.out = out;
    if (cmd->count("--seed")) o.seed = seed;
    if (cmd->count("--capture")) o.capture = capture;
    return o;
  }
};

void print(const nlohmann::json& j) { std::cout << j.dump(2) << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-flow analysis and intervention toolkit for small decoder models"};
  app.require_subcommand(1);

  common_flags gen_f, an_f, ab_f, be_f, in_f;
  auto* gen = app.add_subcommand("generate", "greedy decode with the configured interventions");
  gen_f.attach(gen);

  auto* an = app.add_subcommand("analyze", "attention / saliency dumps and per-layer flow tables");
  an_f.attach(an, false);
  std::string from_dumps;
  an->add_option("--from-dumps", from_dumps, "recompute the tables from sample_*.atdp dumps in DIR");

  auto* ab = app.add_subcommand("ablate", "mask the top-n heads of one type and compare with baseline");
  ab_f.attach(ab);
  std::string mode;
  std::size_t top_n = 4;
  ab->add_option("--mode", mode, "ablation mode")->check(CLI::IsMember(ablation_modes()));
  ab->add_option("--top-n", top_n, "heads to mask");

  auto* be = app.add_subcommand("bench", "decode throughput with and without interventions");
  be_f.attach(be);
  std::size_t reps = 5;
  be->add_option("--repetitions", reps, "timed runs per variant (>= 3)");

  auto* me = app.add_subcommand("metrics", "CHAIR / POPE scores from JSON-lines annotations");
  std::string chair, pope, me_out;
  me->add_option("--chair", chair, "caption annotations");
  me->add_option("--pope", pope, "yes/no probe records");
  me->add_option("--out", me_out, "output directory");

  auto* in = app.add_subcommand("inspect", "print model shape and prefill classifications");
  in_f.attach(in);

  auto* fx = app.add_subcommand("fixture", "write a generated fixture model, prompt and config");
  std::string fx_kind = "pathology", fx_out, fx_preset = "paper-llava";
  std::uint64_t fx_seed = 0, fx_prompt_seed = 1;
  model_config fx_cfg{2, 4, 32, 8, 32, 64, 128, 10000};
  prompt_layout fx_layout;
  fx->add_option("--kind", fx_kind, "pathology | random")->check(CLI::IsMember({"pathology", "random"}));
  fx->add_option("--out", fx_out, "output directory")->required();
  fx->add_option("--seed", fx_seed, "weight seed");
  fx->add_option("--prompt-seed", fx_prompt_seed, "prompt seed");
  fx->add_option("--preset", fx_preset, "preset written into config.json")->check(CLI::IsMember(preset_names()));
  fx->add_option("--layers", fx_cfg.num_layers, "random fixtures: layers");
  fx->add_option("--heads", fx_cfg.num_heads, "random fixtures: heads");
  fx->add_option("--head-dim", fx_cfg.head_dim, "random fixtures: head width");
  fx->add_option("--vocab", fx_cfg.vocab_size, "random fixtures: vocabulary size");
  fx->add_option("--max-seq-len", fx_cfg.max_seq_len, "random fixtures: context length");
  fx->add_option("--sys", fx_layout.sys, "random fixtures: system tokens");
  fx->add_option("--vis", fx_layout.vis, "random fixtures: visual tokens");
  fx->add_option("--instr", fx_layout.instr, "random fixtures: instruction tokens");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage_error", e.what(), 2);
  }

  try {
    init_logging();
    if (*gen) {
      print(cmd_generate(load_run_config(gen_f.config, gen_f.resolve(gen))));
    } else if (*an) {
      if (!from_dumps.empty()) {
        auto ov = an_f.resolve(an);
        intervention_config ic = intervention_preset(ov.preset.value_or("paper-llava"));
        bool vv = true;
        fs::path out = ov.out.value_or(from_dumps);
        if (!an_f.config.empty()) {
          const auto c = load_run_config(an_f.config, ov, false);
          ic = c.intervention;
          vv = c.vv_lower_triangle;
          out = c.out;
        }
        print(cmd_analyze_from_dumps(from_dumps, out, ic, vv));
      } else {
        if (an_f.config.empty()) return fail("usage_error", "analyze: --config is required", 2);
        print(cmd_analyze(load_run_config(an_f.config, an_f.resolve(an))));
      }
    } else if (*ab) {
      auto c = load_run_config(ab_f.config, ab_f.resolve(ab));
      if (ab->count("--mode")) c.ablation_mode = mode;
      if (ab->count("--top-n")) c.top_n = top_n;
      print(cmd_ablate(c));
    } else if (*be) {
      auto c = load_run_config(be_f.config, be_f.resolve(be));
      if (be->count("--repetitions")) c.repetitions = reps;
      const auto r = cmd_bench(c);
      std::cout << r["table"].get<std::string>();
    } else if (*me) {
      std::optional<fs::path> cf, pf, of;
      if (!chair.empty()) cf = chair;
      if (!pope.empty()) pf = pope;
      if (!me_out.empty()) of = me_out;
      std::cout << metrics_table(cmd_metrics(cf, pf, of));
    } else if (*in) {
      std::cout << inspect_text(cmd_inspect(load_run_config(in_f.config, in_f.resolve(in))));
    } else if (*fx) {
      fixture_spec spec;
      if (fx_kind == "pathology") {
        spec = pathology_fixture(fx_seed);
      } else {
        spec.seed = fx_seed;
        fx_cfg.model_dim = fx_cfg.num_heads * fx_cfg.head_dim;
        spec.config = fx_cfg;
        spec.layout = fx_layout;
      }
      print(cmd_fixture(spec, fx_out, fx_prompt_seed, fx_preset));
    }
  } catch (const config_error& e) {
    return fail(e.kind(), e.what(), 2);
  } catch (const error& e) {
    return fail(e.kind(), e.what(), 1);
  } catch (const std::exception& e) {
    return fail("internal_error", e.what(), 1);
  }
  return 0;
}
