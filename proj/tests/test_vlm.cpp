#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "coc/vlm.hpp"

using namespace coc;

namespace {

VlmConfig tiny_cfg(int patch = 8) {
  VlmConfig cfg;
  cfg.brain.d_model = 16;
  cfg.brain.n_heads = 2;
  cfg.brain.n_layers = 1;
  cfg.brain.d_ff = 32;
  cfg.brain.vocab_size = Vocabulary::instance().size();
  cfg.brain.max_seq = 320;
  cfg.patch = patch;
  return cfg;
}

Clip test_clip(std::uint64_t seed = 3) {
  return generate_clip(seed, Domain::SIM, ScenarioMix::sim_default(), 4);
}

}  // namespace

TEST_CASE("vision encode produces 96 tokens at the default patching") {
  VlmConfig cfg = tiny_cfg(4);
  CoCVLM m = CoCVLM::init(Role::TEACHER, cfg, 1);
  Clip c = test_clip();
  Tensor toks = vision_encode(m, {&c.frames[0].views});
  CHECK(toks.shape() == Shape{1, 96, cfg.brain.d_model});
  CHECK(cfg.visual_tokens() == 96);
}

TEST_CASE("zero rasters encode to the projection bias row") {
  VlmConfig cfg = tiny_cfg(4);
  CoCVLM m = CoCVLM::init(Role::TEACHER, cfg, 2);
  std::vector<float> zero(std::size_t(kNumViews) * kViewSize, 0.0f);
  Tensor toks = vision_encode(m, {&zero});
  const auto& bias = m.vision_proj.bias.values();
  for (int t = 0; t < 96; ++t)
    for (int j = 0; j < cfg.brain.d_model; ++j)
      CHECK(toks.values()[std::size_t(t) * cfg.brain.d_model + std::size_t(j)] ==
            bias[std::size_t(j)]);
}

TEST_CASE("permuting the six views permutes token blocks") {
  VlmConfig cfg = tiny_cfg(4);
  CoCVLM m = CoCVLM::init(Role::TEACHER, cfg, 3);
  Clip c = test_clip();
  const auto& views = c.frames[1].views;
  // swap view 0 and view 3
  std::vector<float> swapped = views;
  for (int i = 0; i < kViewSize; ++i) {
    std::swap(swapped[std::size_t(i)],
              swapped[std::size_t(3 * kViewSize + i)]);
  }
  Tensor a = vision_encode(m, {&views});
  Tensor b = vision_encode(m, {&swapped});
  const int per_view = 16, d = cfg.brain.d_model;
  for (int t = 0; t < per_view; ++t)
    for (int j = 0; j < d; ++j) {
      CHECK(a.values()[std::size_t(t) * d + std::size_t(j)] ==
            b.values()[std::size_t(3 * per_view + t) * d + std::size_t(j)]);
      CHECK(b.values()[std::size_t(t) * d + std::size_t(j)] ==
            a.values()[std::size_t(3 * per_view + t) * d + std::size_t(j)]);
    }
}

TEST_CASE("model forward shapes and determinism") {
  VlmConfig cfg = tiny_cfg();
  CoCVLM m = CoCVLM::init(Role::STUDENT, cfg, 7);
  const Vocabulary& v = Vocabulary::instance();
  Clip c = test_clip();
  std::vector<ModelInput> batch = {make_model_input(c, 1, v, true),
                                   make_model_input(c, 2, v, true)};
  ForwardResult fr = model_forward(m, batch);
  const int La = fr.answer_len;
  CHECK(fr.answer_logits.shape() ==
        Shape{2, La, cfg.brain.vocab_size});
  CHECK(fr.traj.shape() == Shape{2, 12});
  CHECK(fr.features.shape() == Shape{2, cfg.brain.d_model});
  CHECK(fr.next_logits.shape() == Shape{2, cfg.brain.vocab_size});

  ForwardResult fr2 = model_forward(m, batch);
  CHECK(fr.answer_logits.values() == fr2.answer_logits.values());
  CHECK(fr.traj.values() == fr2.traj.values());
  CHECK(fr.features.values() == fr2.features.values());

  // same seed, fresh model -> identical outputs
  CoCVLM m2 = CoCVLM::init(Role::STUDENT, cfg, 7);
  ForwardResult fr3 = model_forward(m2, batch);
  CHECK(fr.traj.values() == fr3.traj.values());
}

TEST_CASE("identical rows in a batch give identical outputs") {
  VlmConfig cfg = tiny_cfg();
  CoCVLM m = CoCVLM::init(Role::STUDENT, cfg, 9);
  const Vocabulary& v = Vocabulary::instance();
  Clip c = test_clip();
  ModelInput one = make_model_input(c, 1, v, true);
  ForwardResult fr = model_forward(m, {one, one});
  const std::size_t half = fr.answer_logits.values().size() / 2;
  for (std::size_t i = 0; i < half; ++i)
    CHECK(fr.answer_logits.values()[i] == fr.answer_logits.values()[half + i]);
  for (int j = 0; j < 12; ++j)
    CHECK(fr.traj.values()[std::size_t(j)] ==
          fr.traj.values()[std::size_t(12 + j)]);
}

TEST_CASE("vlm loss closed forms") {
  const int V = 8;
  SUBCASE("one-hot logits and exact trajectory give ~zero loss") {
    ForwardResult fr;
    std::vector<double> logits(2 * V, 0.0);
    logits[3] = 50.0;         // row 0 target 3
    logits[V + 5] = 50.0;     // row 1 target 5
    fr.answer_logits = Tensor::from({1, 2, V}, std::move(logits));
    fr.answer_len = 2;
    fr.traj = Tensor::from({1, 12}, std::vector<double>(12, 1.5));
    std::vector<ModelInput> batch(1);
    batch[0].answer_tokens = {3, 5};
    Tensor gt = Tensor::from({1, 12}, std::vector<double>(12, 1.5));
    CHECK(vlm_loss(fr, batch, gt, 1.0).item() < 1e-6);
  }
  SUBCASE("uniform logits give ln V") {
    ForwardResult fr;
    fr.answer_logits = Tensor::from({1, 1, V}, std::vector<double>(V, 0.7));
    fr.answer_len = 1;
    fr.traj = Tensor::from({1, 12}, std::vector<double>(12, 0.0));
    std::vector<ModelInput> batch(1);
    batch[0].answer_tokens = {2};
    Tensor gt = Tensor::from({1, 12}, std::vector<double>(12, 0.0));
    CHECK(vlm_loss(fr, batch, gt, 0.0).item() ==
          doctest::Approx(std::log(double(V))).epsilon(1e-12));
  }
  SUBCASE("lambda zero equals an independent scalar cross-entropy") {
    Rng rng(4);
    const int rows = 5;
    std::vector<double> logits(std::size_t(rows) * V);
    for (auto& x : logits) x = rng.uniform(-2, 2);
    std::vector<int> targets;
    for (int i = 0; i < rows; ++i) targets.push_back(int(rng.below(V)));
    ForwardResult fr;
    fr.answer_logits = Tensor::from({1, rows, V}, logits);
    fr.answer_len = rows;
    fr.traj = Tensor::from({1, 12}, std::vector<double>(12, 3.0));
    std::vector<ModelInput> batch(1);
    batch[0].answer_tokens = targets;
    Tensor gt = Tensor::from({1, 12}, std::vector<double>(12, 0.0));
    const double got = vlm_loss(fr, batch, gt, 0.0).item();
    double want = 0.0;
    for (int r = 0; r < rows; ++r) {
      double mx = -1e300, z = 0.0;
      for (int i = 0; i < V; ++i)
        mx = std::max(mx, logits[std::size_t(r) * V + std::size_t(i)]);
      for (int i = 0; i < V; ++i)
        z += std::exp(logits[std::size_t(r) * V + std::size_t(i)] - mx);
      want += mx + std::log(z) -
              logits[std::size_t(r) * V + std::size_t(targets[std::size_t(r)])];
    }
    want /= rows;
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
    // and the lambda=0 loss ignores the trajectory mismatch entirely
  }
  SUBCASE("negative lambda rejected") {
    ForwardResult fr;
    fr.answer_logits = Tensor::from({1, 1, V}, std::vector<double>(V, 0.0));
    fr.answer_len = 1;
    fr.traj = Tensor::from({1, 12}, std::vector<double>(12, 0.0));
    std::vector<ModelInput> batch(1);
    batch[0].answer_tokens = {0};
    Tensor gt = Tensor::from({1, 12}, std::vector<double>(12, 0.0));
    CHECK_THROWS_AS(vlm_loss(fr, batch, gt, -0.5), config_error);
  }
}

TEST_CASE("greedy generation is deterministic and eos-at-start degenerates") {
  VlmConfig cfg = tiny_cfg();
  CoCVLM m = CoCVLM::init(Role::STUDENT, cfg, 11);
  const Vocabulary& v = Vocabulary::instance();
  Clip c = test_clip();
  ModelInput in = make_model_input(c, 1, v, false);

  Generation g1 = generate_answer(m, in, 24);
  Generation g2 = generate_answer(m, in, 24);
  CHECK(g1.tokens == g2.tokens);
  CHECK(g1.traj_valid);

  // bias the lm head so EOS always wins: empty answer, diagnostics nonempty
  for (auto& x : m.traj_head.bias.values()) x = 0.0;
  auto& bias = m.brain.lm_head.bias.values();
  bias[std::size_t(v.eos())] = 1e4;
  Generation g3 = generate_answer(m, in, 24);
  CHECK(g3.tokens.empty());
  CHECK_FALSE(g3.parse.clean());
  CHECK_FALSE(g3.parse.answer.has_plan);
}

TEST_CASE("cached instruction is actually consumed") {
  VlmConfig cfg = tiny_cfg();
  CoCVLM m = CoCVLM::init(Role::STUDENT, cfg, 13);
  const Vocabulary& v = Vocabulary::instance();
  Clip c = test_clip();
  ModelInput base = make_model_input(c, 1, v, false);

  CachedInstruction other;
  other.threat = Threat::High;
  other.ego_action = EgoAction::Stop;
  ModelInput changed = base;
  changed.prompt_tokens =
      assemble_prompt(other, PromptSet::instance().default_prompt(), v);

  ForwardResult fa = model_forward(m, {base});
  ForwardResult fb = model_forward(m, {changed});
  bool any_diff = false;
  for (std::size_t i = 0; i < fa.next_logits.values().size(); ++i)
    if (fa.next_logits.values()[i] != fb.next_logits.values()[i])
      any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("token budget: single cached frame stays within the window") {
  const Vocabulary& v = Vocabulary::instance();
  Rng seeder(15);
  int checked = 0;
  for (int i = 0; i < 10; ++i) {
    Clip c = generate_clip(seeder.next_u64(), Domain::SIM,
                           ScenarioMix::sim_default(), 6);
    for (int f = 0; f < int(c.frames.size()); ++f) {
      ModelInput in = make_model_input(c, f, v, true);
      // prompt tokens <= visual-budget-free window: bos+cache(<=20)+sep+prompt(<=48)
      CHECK(int(in.prompt_tokens.size()) <= 2 + kMaxCachedTokens + kMaxPromptTokens);
      CHECK(int(in.answer_tokens.size()) <= 140);
      ++checked;
    }
  }
  CHECK(checked > 0);
  // a two-frame raster baseline would double the visual tokens: 96 extra,
  // which exceeds the whole cached-instruction budget by >= 76 tokens
  CHECK(96 - kMaxCachedTokens >= 76);
}

TEST_CASE("teacher and student share one architecture descriptor") {
  VlmConfig cfg = tiny_cfg();
  CoCVLM t = CoCVLM::init(Role::TEACHER, cfg, 21);
  CoCVLM s = CoCVLM::init(Role::STUDENT, cfg, 22);
  CHECK(t.cfg.arch_descriptor() == s.cfg.arch_descriptor());
  CHECK(t.role != s.role);
  // and parameters genuinely differ (independent seeds)
  CHECK(params_hash(t.params()) != params_hash(s.params()));
}

TEST_CASE("vocab and window contract errors") {
  VlmConfig cfg = tiny_cfg();
  cfg.brain.vocab_size = 10;  // smaller than the vocabulary
  CHECK_THROWS_AS(CoCVLM::init(Role::TEACHER, cfg, 1), config_error);

  VlmConfig cfg2 = tiny_cfg();
  CoCVLM m = CoCVLM::init(Role::STUDENT, cfg2, 2);
  ModelInput in;
  std::vector<float> zero(std::size_t(kNumViews) * kViewSize, 0.0f);
  in.views = &zero;
  in.prompt_tokens.assign(100, 1);  // longer than the window
  CHECK_THROWS_AS(model_forward(m, {in}), shape_error);

  ModelInput in2;
  in2.views = &zero;
  in2.prompt_tokens = {1, 2, 3};
  in2.answer_tokens.assign(500, 1);  // above the answer ceiling
  CHECK_THROWS_AS(model_forward(m, {in2}), shape_error);
}
