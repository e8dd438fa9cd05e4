#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct run_result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path work_dir() {
  static const fs::path d = [] {
    auto p = fs::temp_directory_path() / "atnf_cli_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return d;
}

run_result run(const std::string& args) {
  const auto out = work_dir() / "stdout.txt", err = work_dir() / "stderr.txt";
  const std::string cmd = std::string(ATNF_CLI_PATH) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

// Pathology fixture written once per process.
fs::path fixture() {
  static const fs::path d = [] {
    const auto p = work_dir() / "fx";
    const auto r = run("fixture --out " + p.string() + " --seed 3 --prompt-seed 4");
    EXPECT_EQ(r.code, 0) << r.err;
    return p;
  }();
  return d;
}

json error_of(const run_result& r) { return json::parse(r.err); }

}  // namespace

TEST(Cli, FixtureThenGenerate) {
  const auto fx = fixture();
  for (const char* f : {"weights.atnf", "prompt.json", "config.json", "fixture.json"}) EXPECT_TRUE(fs::exists(fx / f));
  const auto info = json::parse(slurp(fx / "fixture.json"));

  const auto base = run("generate --config " + (fx / "config.json").string() + " --preset identity --out " +
                        (work_dir() / "gen_id").string());
  ASSERT_EQ(base.code, 0) << base.err;
  const auto rb = json::parse(base.out);
  EXPECT_EQ(rb["tokens"][0], info["pathology"]["prior_token"]);

  const auto vf = run("generate --config " + (fx / "config.json").string() + " --capture all --out " +
                      (work_dir() / "gen_vf").string());
  ASSERT_EQ(vf.code, 0) << vf.err;
  const auto rv = json::parse(vf.out);
  EXPECT_EQ(rv["tokens"][0], info["pathology"]["grounded_token"]);
  EXPECT_EQ(rv["tokens"].size(), 8u);
  EXPECT_TRUE(rv.contains("timing"));
  EXPECT_TRUE(fs::exists(work_dir() / "gen_vf" / "attention.atdp"));
  EXPECT_TRUE(fs::exists(work_dir() / "gen_vf" / "report.json"));

  const auto off = run("generate --config " + (fx / "config.json").string() + " --no-tai --no-hai --out " +
                       (work_dir() / "gen_off").string());
  ASSERT_EQ(off.code, 0) << off.err;
  EXPECT_EQ(json::parse(off.out)["tokens"], rb["tokens"]);
}

TEST(Cli, AnalyzeAndReplayAreIdentical) {
  const auto fx = fixture();
  const auto an = work_dir() / "an";
  const auto r = run("analyze --config " + (fx / "config.json").string() + " --out " + an.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto replay = work_dir() / "replay";
  const auto r2 = run("analyze --from-dumps " + an.string() + " --out " + replay.string());
  ASSERT_EQ(r2.code, 0) << r2.err;
  for (const char* f : {"reception.csv", "head_stats.csv", "flow.csv"}) {
    EXPECT_FALSE(slurp(an / f).empty()) << f;
    EXPECT_EQ(slurp(an / f), slurp(replay / f)) << f;
  }
  EXPECT_EQ(slurp(an / "flow.csv").substr(0, 35), "layer,S_sv,S_vv,S_vt,S_st,S_tt,S_ss");
}

TEST(Cli, Ablate) {
  const auto fx = fixture();
  const auto r = run("ablate --config " + (fx / "config.json").string() + " --mode mask-visual --top-n 1 --out " +
                     (work_dir() / "abl").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["masked_heads"].size(), 1u);
  EXPECT_TRUE(j.contains("changed"));
  const auto too_many = run("ablate --config " + (fx / "config.json").string() + " --top-n 99 --out " +
                            (work_dir() / "abl2").string());
  EXPECT_EQ(too_many.code, 2);
  EXPECT_EQ(error_of(too_many)["error"], "config_error");
}

TEST(Cli, Bench) {
  const auto fx = fixture();
  const auto r = run("bench --config " + (fx / "config.json").string() + " --repetitions 3 --out " +
                     (work_dir() / "bench").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("visflow"), std::string::npos);
  EXPECT_TRUE(fs::exists(work_dir() / "bench" / "bench.csv"));
  EXPECT_TRUE(fs::exists(work_dir() / "bench" / "bench.json"));
}

TEST(Cli, Inspect) {
  const auto fx = fixture();
  const auto r = run("inspect --config " + (fx / "config.json").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("text_heads"), std::string::npos);
}

TEST(Cli, MetricsAndBadInput) {
  const auto d = work_dir();
  std::ofstream(d / "c.jsonl") << R"({"id":"a","mentioned":["dog","car"],"truth":["dog"]})" << "\n"
                               << R"({"id":"b","mentioned":["cat"],"truth":["cat","tree"]})" << "\n";
  std::ofstream(d / "p.jsonl") << R"({"id":1,"pred":"yes","label":"yes"})" << "\n";
  const auto ok = run("metrics --chair " + (d / "c.jsonl").string() + " --pope " + (d / "p.jsonl").string() +
                      " --out " + (d / "m").string());
  ASSERT_EQ(ok.code, 0) << ok.err;
  EXPECT_NE(ok.out.find("chair.chair_i,0.333333"), std::string::npos) << ok.out;
  EXPECT_TRUE(fs::exists(d / "m" / "metrics.json"));

  std::ofstream(d / "bad.jsonl") << R"({"id":1,"pred":"yes","label":"yes"})" << "\n"
                                 << R"({"id":2,"pred":"no","label":"yes"})" << "\n"
                                 << "{not json\n";
  const auto bad = run("metrics --pope " + (d / "bad.jsonl").string());
  EXPECT_EQ(bad.code, 1);
  const auto e = error_of(bad);
  EXPECT_EQ(e["error"], "format_error");
  EXPECT_NE(e["message"].get<std::string>().find("line 3"), std::string::npos);

  std::ofstream(d / "empty.jsonl") << "";
  const auto empty = run("metrics --chair " + (d / "empty.jsonl").string());
  EXPECT_EQ(empty.code, 1);
  EXPECT_EQ(error_of(empty)["error"], "format_error");
}

TEST(Cli, UsageAndConfigErrors) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  const auto nocfg = run("generate");
  EXPECT_EQ(nocfg.code, 2);
  EXPECT_EQ(error_of(nocfg)["error"], "usage_error");

  const auto d = work_dir();
  std::ofstream(d / "bad_cfg.json") << R"({"version":1,"weights":"w.atnf","mystery":true})";
  const auto bad = run("generate --config " + (d / "bad_cfg.json").string());
  EXPECT_EQ(bad.code, 2);
  EXPECT_EQ(error_of(bad)["error"], "config_error");
  EXPECT_NE(error_of(bad)["message"].get<std::string>().find("mystery"), std::string::npos);

  const auto missing = run("generate --config " + (d / "nope.json").string());
  EXPECT_EQ(missing.code, 2);
  const auto nodumps = run("analyze --from-dumps " + (d / "nowhere").string());
  EXPECT_EQ(nodumps.code, 2);
}
