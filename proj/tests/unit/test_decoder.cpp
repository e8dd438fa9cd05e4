#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "atnf/decoder.hpp"
#include "atnf/fixtures.hpp"
#include "atnf/tai.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace atnf;

TEST(Rope, PositionZeroIsIdentity) {
  std::vector<real> v = {0.3, -1.2, 2.5, 0.7};
  const auto before = v;
  apply_rope(v, 0, 10000);
  EXPECT_EQ(v, before);
}

TEST(Rope, HandValues) {
  std::vector<real> v = {1, 0, 1, 0};
  apply_rope(v, 1, 10000);
  EXPECT_NEAR(v[0], std::cos(1.0), 1e-12);
  EXPECT_NEAR(v[1], std::sin(1.0), 1e-12);
  EXPECT_NEAR(v[2], std::cos(1e-2), 1e-12);
  EXPECT_NEAR(v[3], std::sin(1e-2), 1e-12);
}

TEST(Rope, PlaneNormsPreserved) {
  fixture_rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<real> v(8);
    for (real& x : v) x = rng.uniform(3);
    const auto before = v;
    apply_rope(v, rng.below(500), 10000);
    for (std::size_t i = 0; i < 4; ++i)
      EXPECT_NEAR(std::hypot(v[2 * i], v[2 * i + 1]), std::hypot(before[2 * i], before[2 * i + 1]), 1e-9);
  }
}

TEST(Rope, OddLengthRejected) {
  std::vector<real> v(3, 1.0);
  EXPECT_THROW(apply_rope(v, 1, 10000), dimension_error);
}

TEST(Rope, TableMatchesDirectRotationAndInverts) {
  rope_table t(64, 8, 10000);
  fixture_rng rng(9);
  std::vector<real> row(16);
  for (real& x : row) x = rng.uniform(1);
  auto a = row;
  t.rotate(a, 37);
  for (std::size_t h = 0; h < 2; ++h) {
    std::vector<real> b(row.begin() + h * 8, row.begin() + (h + 1) * 8);
    apply_rope(b, 37, 10000);
    for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(a[h * 8 + d], b[d], 1e-12);
  }
  t.rotate(a, 37, -1);
  for (std::size_t d = 0; d < 16; ++d) EXPECT_NEAR(a[d], row[d], 1e-12);
}

TEST(Softmax, UniformScores) {
  matrix s(1, 4, 0.0);
  const auto p = causal_softmax(s, 3);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(p(0, j), 0.25);
}

TEST(Softmax, ShiftInvariant) {
  std::vector<real> a = {0, 0, 0}, b = {5, 5, 5}, pa(3), pb(3);
  causal_softmax_row(a, 3, pa);
  causal_softmax_row(b, 3, pb);
  EXPECT_EQ(pa, pb);
}

TEST(Softmax, HandValues) {
  std::vector<real> s = {std::log(1.0), std::log(2.0), std::log(3.0)}, p(3);
  causal_softmax_row(s, 3, p);
  EXPECT_NEAR(p[0], 1.0 / 6, 1e-12);
  EXPECT_NEAR(p[1], 2.0 / 6, 1e-12);
  EXPECT_NEAR(p[2], 3.0 / 6, 1e-12);
}

TEST(Softmax, CausalMaskAndRowSums) {
  fixture_rng rng(4);
  matrix s(6, 6);
  for (real& x : s.data) x = rng.uniform(4);
  const auto p = causal_softmax(s);
  for (std::size_t i = 0; i < 6; ++i) {
    real sum = 0;
    for (std::size_t j = 0; j < 6; ++j) {
      if (j > i) EXPECT_EQ(p(i, j), 0.0);
      else EXPECT_GT(p(i, j), 0.0);
      sum += p(i, j);
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
}

TEST(Softmax, AllMaskedRowIsAnError) {
  std::vector<real> s = {1, 2}, p(2);
  EXPECT_THROW(causal_softmax_row(s, 0, p), contract_error);
}

TEST(Decoder, MatchesNaiveReference) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto spec = testutil::small_spec(seed, 2, 2);
    const auto w = random_model(spec);
    const auto toks = testutil::tokens_with_response(spec, seed, 4);
    forward_options opt;
    opt.all_logits = true;
    const auto res = forward(w, toks, spec.layout.segmentation(), opt);
    const auto ref = oracle::naive_logits(w, toks);
    for (std::size_t i = 0; i < toks.size(); ++i)
      for (std::size_t v = 0; v < w.config.vocab_size; ++v) EXPECT_NEAR(res.logits(i, v), ref[i][v], 1e-10);
  }
}

TEST(Decoder, PrefillCapturesEveryHead) {
  fixture_spec spec = testutil::small_spec(5, 2, 2, {2, 3, 3});
  const auto w = random_model(spec);
  const auto toks = fixture_prompt(spec, 5);
  ASSERT_EQ(toks.size(), 8u);
  forward_options opt;
  opt.capture = capture_spec::all();
  const auto st = prefill(w, toks, spec.layout.segmentation(), opt);
  ASSERT_EQ(st.records.size(), 4u);
  for (const auto& r : st.records) {
    EXPECT_EQ(r.rows, 8u);
    EXPECT_EQ(r.cols, 8u);
    for (std::size_t i = 0; i < 8; ++i) {
      real sum = 0;
      for (std::size_t j = 0; j < 8; ++j) {
        if (j > i) EXPECT_EQ(r.at(i, j), 0.0);
        sum += r.at(i, j);
      }
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
  }
}

TEST(Decoder, IdentityHookIsBitIdentical) {
  const auto spec = testutil::small_spec(6);
  const auto w = random_model(spec);
  const auto toks = fixture_prompt(spec, 6);
  const auto seg = spec.layout.segmentation();
  identity_hook id;
  forward_options opt;
  opt.hook = &id;
  auto a = prefill(w, toks, seg);
  auto b = prefill(w, toks, seg, opt);
  EXPECT_EQ(a.last_logits, b.last_logits);
  for (int i = 0; i < 5; ++i) {
    const auto ra = decode_step(a, w);
    const auto rb = decode_step(b, w, &id);
    EXPECT_EQ(ra.logits, rb.logits);
    EXPECT_EQ(ra.token, rb.token);
  }
}

TEST(Decoder, TaiHookChangesLogitsAndRaisesSalientMass) {
  fixture_spec spec = testutil::small_spec(7, 3, 2, {2, 6, 4});
  const auto w = random_model(spec);
  const auto toks = fixture_prompt(spec, 7);
  const auto seg = spec.layout.segmentation();
  forward_options cap;
  cap.capture = capture_spec::all();
  const auto base = prefill(w, toks, seg, cap);

  // classes from the baseline attention of layer 2, applied to that layer only
  tai_params p;
  p.k = 2;
  p.delta = 1;
  const auto views = layer_views(base.records, 2, 2);
  const auto cls = classify_visual_tokens(compute_reception_scores(views, seg, 2), p);
  ASSERT_FALSE(cls.salient.empty());
  function_hook hook([&](const hook_context& ctx, attention_rows& rows) {
    if (ctx.layer == 2) tai_rewrite(rows, cls, p, seg);
  });
  forward_options opt = cap;
  opt.hook = &hook;
  const auto mod = prefill(w, toks, seg, opt);
  EXPECT_NE(base.last_logits, mod.last_logits);
  for (std::size_t h = 0; h < 2; ++h) {
    const auto* rb = base.find_record(2, h);
    const auto* rm = mod.find_record(2, h);
    for (std::size_t i = seg.instr.begin; i < toks.size(); ++i) {
      real mb = 0, mm = 0;
      for (std::size_t j : cls.salient) {
        mb += rb->at(i, seg.vis.begin + j);
        mm += rm->at(i, seg.vis.begin + j);
      }
      EXPECT_GT(mm, mb);
    }
  }
}

TEST(Decoder, DeterministicAcrossRuns) {
  const auto spec = testutil::small_spec(8);
  const auto w = random_model(spec);
  const auto toks = fixture_prompt(spec, 8);
  auto a = prefill(w, toks, spec.layout.segmentation());
  auto b = prefill(w, toks, spec.layout.segmentation());
  EXPECT_EQ(a.last_logits, b.last_logits);
  EXPECT_EQ(decode_step(a, w).logits, decode_step(b, w).logits);
}

TEST(Decoder, IncrementalMatchesFullForward) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto spec = testutil::small_spec(seed, 2, 2);
    const auto w = random_model(spec);
    const auto prompt = fixture_prompt(spec, seed);
    const auto seg = spec.layout.segmentation();
    auto st = prefill(w, prompt, seg);
    std::vector<token_id> seq = prompt;
    std::vector<std::vector<real>> inc = {st.last_logits};
    for (int i = 0; i < 6; ++i) {
      const auto r = decode_step(st, w);
      seq.push_back(greedy_token(inc.back()));
      inc.push_back(r.logits);
    }
    forward_options opt;
    opt.all_logits = true;
    const auto full = forward(w, seq, seg, opt);
    for (std::size_t k = 0; k < inc.size(); ++k) {
      const auto row = full.logits.row(prompt.size() - 1 + k);
      for (std::size_t v = 0; v < row.size(); ++v)
        EXPECT_NEAR(inc[k][v], row[v], 1e-5 * std::max(1.0, std::abs(row[v])));
    }
  }
}

TEST(Decoder, DecodeReturnsNewRowsWhenCapturing) {
  const auto spec = testutil::small_spec(11);
  const auto w = random_model(spec);
  const auto toks = fixture_prompt(spec, 11);
  forward_options opt;
  opt.capture = capture_spec::layers(1, 1);
  auto st = prefill(w, toks, spec.layout.segmentation(), opt);
  EXPECT_EQ(st.records.size(), 2u);
  const auto r = decode_step(st, w);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[0].rows, 1u);
  EXPECT_EQ(r.rows[0].first_query, toks.size());
  EXPECT_EQ(r.rows[0].cols, toks.size() + 1);
}

TEST(Decoder, MaxLengthExceeded) {
  auto spec = testutil::small_spec(12);
  spec.config.max_seq_len = 10;
  const auto w = random_model(spec);
  const auto toks = fixture_prompt(spec, 12);  // 9 tokens
  auto st = prefill(w, toks, spec.layout.segmentation());
  decode_step(st, w);
  EXPECT_THROW(decode_step(st, w), contract_error);
}

TEST(Decoder, SegmentationMustCoverPrompt) {
  const auto spec = testutil::small_spec(13);
  const auto w = random_model(spec);
  auto toks = fixture_prompt(spec, 13);
  toks.pop_back();
  EXPECT_THROW(prefill(w, toks, spec.layout.segmentation()), contract_error);
}

TEST(Decoder, BadTokenRejected) {
  const auto spec = testutil::small_spec(14);
  const auto w = random_model(spec);
  auto toks = fixture_prompt(spec, 14);
  toks[0] = 999;
  EXPECT_THROW(prefill(w, toks, spec.layout.segmentation()), dimension_error);
}

TEST(Decoder, HookBreakingRowsIsRejected) {
  const auto spec = testutil::small_spec(15);
  const auto w = random_model(spec);
  const auto toks = fixture_prompt(spec, 15);
  function_hook bad([](const hook_context&, attention_rows& rows) { rows.row(0)[0] *= 2; });
  forward_options opt;
  opt.hook = &bad;
  EXPECT_THROW(prefill(w, toks, spec.layout.segmentation(), opt), contract_error);
  function_hook acausal([](const hook_context&, attention_rows& rows) {
    rows.row(0)[0] = 0.5;
    rows.row(0)[1] = 0.5;
  });
  opt.hook = &acausal;
  EXPECT_THROW(prefill(w, toks, spec.layout.segmentation(), opt), contract_error);
}

TEST(Capture, ParseForms) {
  EXPECT_FALSE(capture_spec::parse("none").enabled());
  EXPECT_TRUE(capture_spec::parse("all").wants(7));
  const auto c = capture_spec::parse("layers=2..4");
  EXPECT_FALSE(c.wants(1));
  EXPECT_TRUE(c.wants(2));
  EXPECT_TRUE(c.wants(4));
  EXPECT_FALSE(c.wants(5));
  EXPECT_EQ(c.to_string(), "layers=2..4");
  EXPECT_THROW(capture_spec::parse("layers=4..2"), config_error);
  EXPECT_THROW(capture_spec::parse("some"), config_error);
}

TEST(Segmentation, Presets) {
  const auto s = segmentation_preset("llava-1.5", 10);
  EXPECT_EQ(s.sys.size(), 35u);
  EXPECT_EQ(s.vis.size(), 576u);
  EXPECT_EQ(s.instr, (index_range{611, 621}));
  EXPECT_EQ(segmentation_preset("minigpt-4", 3).vis.size(), 32u);
  EXPECT_EQ(segmentation_preset("mplug-owl2", 3).vis.size(), 65u);
  EXPECT_THROW(segmentation_preset("gpt", 3), config_error);
}
