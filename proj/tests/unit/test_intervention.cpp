#include <gtest/gtest.h>

#include "atnf/decoder.hpp"
#include "atnf/fixtures.hpp"
#include "atnf/intervention.hpp"
#include "test_util.hpp"

using namespace atnf;
using nlohmann::json;

TEST(Presets, Values) {
  const auto a = intervention_preset("paper-llava");
  EXPECT_EQ(a.tai.k, 20);
  EXPECT_EQ(a.tai.delta, 20);
  EXPECT_EQ(a.hai.alpha_txt, 1);
  EXPECT_EQ(a.hai.alpha_sys, 0.6);
  const auto c = intervention_preset("paper-llava-chair");
  EXPECT_EQ(c.tai.k, 10);
  EXPECT_EQ(c.tai.delta, 0.4);
  const auto m = intervention_preset("paper-compact");
  EXPECT_FALSE(m.tai_enabled);
  EXPECT_EQ(m.hai.alpha_sys, 0.4);
  EXPECT_EQ(m.hai.alpha_txt, 0.6);
  EXPECT_THROW(intervention_preset("nope"), config_error);
}

TEST(InterventionJson, OverlayAndRoundTrip) {
  auto c = intervention_preset("paper-llava");
  apply_intervention_json(c, json::parse(R"({"tai":{"k":3,"start_layer":1},"hai":{"sys_layers":[1,null]},
                                              "mask_heads":[[0,1]]})"),
                          "intervention");
  EXPECT_EQ(c.tai.k, 3);
  EXPECT_EQ(c.tai.delta, 20);
  EXPECT_EQ(c.tai.start_layer, 1u);
  EXPECT_EQ(c.hai.sys_layers.first, 1u);
  EXPECT_FALSE(c.hai.sys_layers.last);
  ASSERT_EQ(c.masked_heads.size(), 1u);
  intervention_config d;
  apply_intervention_json(d, intervention_to_json(c), "");
  EXPECT_EQ(intervention_to_json(d), intervention_to_json(c));
}

TEST(InterventionJson, StrictErrorsNameTheField) {
  auto expect_field = [](const char* text, const std::string& needle) {
    intervention_config c;
    try {
      apply_intervention_json(c, json::parse(text), "intervention");
      ADD_FAILURE() << "no error for " << text;
    } catch (const config_error& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_field(R"({"tai":{"kk":1}})", "intervention.tai.kk");
  expect_field(R"({"hai":{"alpha_txt":"x"}})", "intervention.hai.alpha_txt");
  expect_field(R"({"hai":{"alpha_txt":2}})", "alpha_txt");
  expect_field(R"({"tai":{"tau_sink":0.01}})", "tau_sink");
  expect_field(R"({"mask_heads":[[0]]})", "mask_heads[0]");
  expect_field(R"({"hai":{"txt_layers":[3,1]}})", "txt_layers");
}

TEST(Visflow, IdentityConfigIsBitIdentical) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto spec = testutil::small_spec(seed, 3, 2, {2, 6, 4});
    const auto w = random_model(spec);
    const auto toks = fixture_prompt(spec, seed);
    const auto seg = spec.layout.segmentation();
    visflow_hook hook(intervention_config::identity(), w.config);
    forward_options opt;
    opt.hook = &hook;
    auto a = prefill(w, toks, seg);
    auto b = prefill(w, toks, seg, opt);
    EXPECT_EQ(a.last_logits, b.last_logits);
    for (int i = 0; i < 4; ++i) EXPECT_EQ(decode_step(a, w).logits, decode_step(b, w, &hook).logits);
  }
}

TEST(Visflow, ClassifiesOnlyFromStartLayerAndFreezes) {
  const auto spec = testutil::small_spec(71, 4, 2, {2, 6, 4});
  const auto w = random_model(spec);
  const auto toks = fixture_prompt(spec, 71);
  auto cfg = intervention_preset("paper-llava");
  cfg.tai.start_layer = 2;
  visflow_hook hook(cfg, w.config);
  forward_options opt;
  opt.hook = &hook;
  auto st = prefill(w, toks, spec.layout.segmentation(), opt);
  EXPECT_FALSE(hook.token_classes()[0]);
  EXPECT_FALSE(hook.token_classes()[1]);
  EXPECT_TRUE(hook.token_classes()[2]);
  EXPECT_TRUE(hook.token_classes()[3]);
  const auto classes = hook.token_classes();
  const auto heads = hook.head_types();
  for (int i = 0; i < 3; ++i) decode_step(st, w, &hook);
  EXPECT_EQ(hook.token_classes(), classes);
  EXPECT_EQ(hook.head_types(), heads);
}

TEST(Visflow, PinnedHeadTypesAreKept) {
  const auto spec = testutil::small_spec(72, 2, 2);
  const auto w = random_model(spec);
  head_classification hc;
  hc.layers.resize(2);
  hc.layers[1].text = {1};
  visflow_hook hook(intervention_preset("paper-llava"), w.config);
  hook.set_head_types(hc);
  forward_options opt;
  opt.hook = &hook;
  prefill(w, fixture_prompt(spec, 72), spec.layout.segmentation(), opt);
  EXPECT_EQ(hook.head_types(), hc);
  head_classification wrong;
  EXPECT_THROW(hook.set_head_types(wrong), dimension_error);
}

TEST(Visflow, MaskedHeadsAreValidated) {
  auto cfg = intervention_config::identity();
  cfg.masked_heads = {{5, 0}};
  EXPECT_THROW(visflow_hook(cfg, testutil::small_spec(1).config), dimension_error);
}

TEST(Visflow, PathologyIsGrounded) {
  std::size_t grounded = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto spec = pathology_fixture(seed);
    const auto w = pathology_model(spec);
    visflow_hook hook(intervention_preset("paper-llava"), w.config);
    forward_options opt;
    opt.hook = &hook;
    const auto st = prefill(w, fixture_prompt(spec, seed + 1), spec.layout.segmentation(), opt);
    grounded += greedy_token(st.last_logits) == spec.pathology->grounded_token;
  }
  EXPECT_EQ(grounded, 10u);
}
