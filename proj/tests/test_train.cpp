#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "coc/report.hpp"
#include "coc/train.hpp"

using namespace coc;

namespace {

VlmConfig tiny_model() {
  VlmConfig cfg;
  cfg.brain.d_model = 16;
  cfg.brain.n_heads = 2;
  cfg.brain.n_layers = 1;
  cfg.brain.d_ff = 32;
  cfg.brain.vocab_size = Vocabulary::instance().size();
  cfg.brain.max_seq = 300;
  cfg.patch = 8;
  return cfg;
}

TrainConfig tiny_train(Stage stage, int steps = 6, int adv_steps = 4) {
  TrainConfig cfg;
  cfg.stage = stage;
  cfg.batch_size = 4;
  cfg.steps = steps;
  cfg.adv_steps = adv_steps;
  cfg.eval_every = 0;
  cfg.seed = 5;
  return cfg;
}

struct Fixture {
  Dataset sim = generate_dataset(11, Domain::SIM, ScenarioMix::sim_default(),
                                 6, 4);
  Dataset real = generate_dataset(12, Domain::REAL,
                                  ScenarioMix::real_train_default(), 6, 4);
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("optimizer separation is inspectable") {
  auto& f = fixture();
  TrainState st = run_stage(tiny_model(), tiny_train(Stage::ADVERSARIAL, 2, 1),
                            f.sim, f.real);
  REQUIRE(st.opt_student);
  REQUIRE(st.opt_disc);
  CHECK(std::string(st.opt_student->name()) == "adam");
  CHECK(std::string(st.opt_disc->name()) == "sgd-momentum");
  CHECK(st.opt_student->steps_taken() > 0);
  // adam keeps first/second moments, sgd keeps velocities
  CHECK(!st.opt_student->first_moments().empty());
  CHECK(!st.opt_disc->velocities().empty());
}

TEST_CASE("adversarial step 1 updates only the discriminator") {
  auto& f = fixture();
  VlmConfig mc = tiny_model();
  TrainConfig tc = tiny_train(Stage::ADVERSARIAL);
  CoCVLM teacher = CoCVLM::init(Role::TEACHER, mc, 1);
  CoCVLM student = CoCVLM::init(Role::STUDENT, mc, 2);
  Discriminator disc = Discriminator::init(mc.brain.d_model, 16, 1, 3);
  SgdMomentum opt(disc.params(), 0.05);

  Rng rng(4);
  SampledBatch sim = sample_batch({&f.sim}, 3, 1, 1, rng, true);
  SampledBatch real = sample_batch({&f.real}, 3, 1, 1, rng, true);

  auto tp = teacher.params();
  auto sp = student.params();
  auto dp = disc.params();
  const auto th = params_hash(tp), sh = params_hash(sp), dh = params_hash(dp);
  const double loss =
      adversarial_step1(teacher, student, disc, sim.inputs, real.inputs, opt, tc);
  CHECK(std::isfinite(loss));
  CHECK(params_hash(tp) == th);
  CHECK(params_hash(sp) == sh);
  CHECK(params_hash(dp) != dh);

  SUBCASE("empty batch rejected with no partial update") {
    const auto before = params_hash(dp);
    CHECK_THROWS_AS(
        adversarial_step1(teacher, student, disc, {}, real.inputs, opt, tc),
        contract_error);
    CHECK(params_hash(dp) == before);
  }
}

TEST_CASE("adversarial step 2 freezes the discriminator but feels it") {
  auto& f = fixture();
  VlmConfig mc = tiny_model();
  TrainConfig tc = tiny_train(Stage::ADVERSARIAL);
  CoCVLM student = CoCVLM::init(Role::STUDENT, mc, 2);
  Discriminator disc = Discriminator::init(mc.brain.d_model, 16, 1, 3);
  Adam opt(student.params(), 1e-3);

  Rng rng(9);
  SampledBatch sim = sample_batch({&f.sim}, 3, 1, 1, rng, true);
  SampledBatch real = sample_batch({&f.real}, 3, 1, 1, rng, true);

  auto dp = disc.params();
  auto sp = student.params();
  const auto dh = params_hash(dp);
  const auto sh = params_hash(sp);
  Step2Losses l = adversarial_step2(student, disc, sim.inputs, real.inputs,
                                    traj_targets(real.frames),
                                    traj_targets(sim.frames), opt, tc);
  CHECK(std::isfinite(l.total));
  CHECK(l.total == doctest::Approx(l.task + tc.lambda_adv * l.adversarial));
  CHECK(params_hash(dp) == dh);   // frozen
  CHECK(params_hash(sp) != sh);   // updated

  SUBCASE("adversarial path alone still reaches the student") {
    // zero the task loss by gating: compute only the fooling term
    CoCVLM s2 = clone_model(student);
    auto s2p = s2.params();
    Tape tape;
    ForwardResult fr = model_forward(s2, real.inputs);
    FeatureBatch fb;
    fb.features = fr.features;
    fb.domain_label.assign(real.inputs.size(), Domain::SIM);
    fb.producer.assign(real.inputs.size(), Role::STUDENT);
    Tensor fool = disc_loss(disc_forward(disc, fb), fb.domain_label);
    gated_backward(scale(fool, tc.lambda_adv), disc.params());
    double grad_norm = 0.0;
    for (const auto& p : s2p)
      if (p.has_grad())
        for (double g : p.grad()) grad_norm += g * g;
    CHECK(grad_norm > 0.0);
    for (const auto& p : disc.params()) CHECK_FALSE(p.has_grad());
  }
}

TEST_CASE("pretrain refuses mismatched domains outside baselines") {
  auto& f = fixture();
  VlmConfig mc = tiny_model();
  CoCVLM teacher = CoCVLM::init(Role::TEACHER, mc, 1);
  TrainConfig tc = tiny_train(Stage::PRETRAIN_TEACHER, 2);
  Adam opt(teacher.params(), 1e-3);
  Rng rng(1);
  CHECK_THROWS_AS(pretrain(teacher, {&f.real}, tc, opt, rng, nullptr,
                           Stage::PRETRAIN_TEACHER),
                  config_error);
  // the same data is fine for a baseline stage run on the student
  CoCVLM student = CoCVLM::init(Role::STUDENT, mc, 2);
  TrainConfig tc2 = tiny_train(Stage::MIX_BASELINE, 1);
  Adam opt2(student.params(), 1e-3);
  CHECK_NOTHROW(pretrain(student, {&f.sim, &f.real}, tc2, opt2, rng, nullptr,
                         Stage::MIX_BASELINE));
}

TEST_CASE("training loss falls and clip-initial frames use the none marker") {
  auto& f = fixture();
  const Vocabulary& v = Vocabulary::instance();
  ModelInput first = make_model_input(f.real.clips[0], 0, v, true);
  CHECK(first.prompt_tokens[1] == v.none());
  ModelInput later = make_model_input(f.real.clips[0], 1, v, true);
  CHECK(later.prompt_tokens[1] != v.none());

  VlmConfig mc = tiny_model();
  TrainConfig tc = tiny_train(Stage::REAL_ONLY_BASELINE, 140);
  tc.lr_vlm = 1e-3;
  TrainState st = run_stage(mc, tc, f.sim, f.real);
  REQUIRE(st.curve.size() == 140);
  double first_loss = 0, last_loss = 0;
  for (int i = 0; i < 3; ++i) {
    first_loss += st.curve[std::size_t(i)].loss / 3.0;
    last_loss += st.curve[st.curve.size() - 1 - std::size_t(i)].loss / 3.0;
  }
  CHECK(last_loss < 0.3 * first_loss);
}

TEST_CASE("identical seeds give bitwise-identical runs") {
  auto& f = fixture();
  VlmConfig mc = tiny_model();
  TrainConfig tc = tiny_train(Stage::ADVERSARIAL, 3, 2);
  TrainState a = run_stage(mc, tc, f.sim, f.real);
  TrainState b = run_stage(mc, tc, f.sim, f.real);
  REQUIRE(a.curve.size() == b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    CHECK(a.curve[i].loss == b.curve[i].loss);
    CHECK(a.curve[i].aux == b.curve[i].aux);
  }
  CHECK(state_params_hash(a) == state_params_hash(b));
}

TEST_CASE("checkpoint round-trip and bitwise resume mid-schedule") {
  auto& f = fixture();
  VlmConfig mc = tiny_model();
  TrainConfig tc = tiny_train(Stage::ADVERSARIAL, 3, 4);
  tc.eval_every = 2;

  // uninterrupted run
  TrainState full = run_stage(mc, tc, f.sim, f.real);

  // interrupted at adversarial step 2 via the hook, then resumed from disk
  const std::string path = "/tmp/coc_test_ckpt.bin";
  bool saved = false;
  TrainState partial = init_stage(mc, tc);
  advance_stage(partial, f.sim, f.real, nullptr, nullptr,
                [&](const TrainState& st) {
                  if (!saved && st.phase == 2 && st.step == 2) {
                    save_checkpoint(path, st);
                    saved = true;
                  }
                });
  REQUIRE(saved);
  TrainState resumed = load_checkpoint(path);
  CHECK(resumed.phase == 2);
  CHECK(resumed.step == 2);
  advance_stage(resumed, f.sim, f.real);
  CHECK(state_params_hash(resumed) == state_params_hash(full));
  REQUIRE(resumed.curve.size() == full.curve.size());
  for (std::size_t i = 0; i < full.curve.size(); ++i)
    CHECK(resumed.curve[i].loss == full.curve[i].loss);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint rejects corruption and wrong container types") {
  auto& f = fixture();
  VlmConfig mc = tiny_model();
  TrainConfig tc = tiny_train(Stage::REAL_ONLY_BASELINE, 1);
  TrainState st = run_stage(mc, tc, f.sim, f.real);
  const std::string path = "/tmp/coc_test_ckpt2.bin";
  save_checkpoint(path, st);
  // flip a byte
  {
    std::FILE* fp = std::fopen(path.c_str(), "r+b");
    REQUIRE(fp);
    std::fseek(fp, 400, SEEK_SET);
    int c = std::fgetc(fp);
    std::fseek(fp, 400, SEEK_SET);
    std::fputc(c ^ 0x10, fp);
    std::fclose(fp);
  }
  CHECK_THROWS_AS(load_checkpoint(path), io_error);
  std::remove(path.c_str());
}

TEST_CASE("domain probe separates what it should") {
  Rng rng(3);
  std::vector<std::vector<double>> a, b, c;
  for (int i = 0; i < 200; ++i) {
    a.push_back({rng.normal() + 4.0, rng.normal()});
    b.push_back({rng.normal() - 4.0, rng.normal()});
    c.push_back({rng.normal() + 4.0, rng.normal()});
  }
  CHECK(domain_probe_accuracy(a, b, 7) > 0.95);
  const double same = domain_probe_accuracy(a, c, 7);
  CHECK(same > 0.3);
  CHECK(same < 0.7);
}

TEST_CASE("evaluate_model produces a full report and is repeatable") {
  auto& f = fixture();
  VlmConfig mc = tiny_model();
  TrainConfig tc = tiny_train(Stage::REAL_ONLY_BASELINE, 2);
  TrainState st = run_stage(mc, tc, f.sim, f.real);
  Dataset test = generate_dataset(33, Domain::REAL,
                                  ScenarioMix::real_test_default(0.5), 4, 4);
  EvalSplits e1 = evaluate_model(*st.student, test, 4);
  EvalSplits e2 = evaluate_model(*st.student, test, 4);
  CHECK(e1.full.displacement.ade == e2.full.displacement.ade);
  CHECK(e1.full.collision.rate == e2.full.collision.rate);
  CHECK(e1.n_frames == 16);
  CHECK(e1.n_rare_frames > 0);
  REQUIRE(e1.lang);
  CHECK(e1.lang->n_pairs == 4);

  // report schema round-trips
  MetricsReport r;
  r.config_hash = 123;
  r.seed = 5;
  r.stage = to_string(tc.stage);
  r.dataset = "test.ds";
  r.arch = mc.arch_descriptor();
  r.splits = e1;
  const std::string path = "/tmp/coc_test_report.json";
  write_report(r, path);
  MetricsReport back = read_report(path);
  CHECK(back.splits.full.displacement.ade == r.splits.full.displacement.ade);
  CHECK(back.splits.rare_subset.collision.rate ==
        r.splits.rare_subset.collision.rate);
  CHECK(back.config_hash == r.config_hash);
  REQUIRE(back.splits.lang);
  CHECK(back.splits.lang->accuracy == r.splits.lang->accuracy);
  std::remove(path.c_str());
}

TEST_CASE("run config json round-trips and rejects unknown keys") {
  RunConfig cfg = RunConfig::defaults();
  auto j = run_config_to_json(cfg);
  RunConfig back = run_config_from_json(j);
  CHECK(run_config_to_json(back) == j);
  CHECK(back.hash() == cfg.hash());
  j["typo_key"] = 1;
  CHECK_THROWS_AS(run_config_from_json(j), config_error);
  auto j2 = run_config_to_json(cfg);
  j2["train"]["unknown"] = 2;
  CHECK_THROWS_AS(run_config_from_json(j2), config_error);
}

TEST_CASE("one batch overfits: token ce and waypoint error collapse") {
  auto& f = fixture();
  VlmConfig mc = tiny_model();
  CoCVLM m = CoCVLM::init(Role::STUDENT, mc, 17);
  const Vocabulary& v = Vocabulary::instance();
  std::vector<ModelInput> batch;
  std::vector<const Frame*> frames;
  for (int i = 0; i < 2; ++i) {
    batch.push_back(make_model_input(f.real.clips[std::size_t(i)], 1, v, true));
    frames.push_back(&f.real.clips[std::size_t(i)].frames[1]);
  }
  Tensor gt = traj_targets(frames);
  auto params = m.params();
  Adam opt(params, 2e-3);
  double ce = 1e9, traj_mse = 1e9;
  for (int step = 0; step < 500 && (ce > 0.05 || traj_mse > 0.01); ++step) {
    Tape tape;
    ForwardResult fr = model_forward(m, batch);
    Tensor loss = vlm_loss(fr, batch, gt, 1.0);
    backward(loss);
    opt.step();
    zero_grads(params);
    // track the components
    Tape t2;
    ForwardResult fr2 = model_forward(m, batch);
    ce = vlm_loss(fr2, batch, gt, 0.0).item();
    double acc = 0.0;
    for (std::size_t i = 0; i < fr2.traj.values().size(); ++i) {
      const double d = fr2.traj.values()[i] - gt.values()[i];
      acc += d * d;
    }
    traj_mse = 2.0 * acc / double(fr2.traj.values().size());
  }
  CHECK(ce < 0.05);
  CHECK(traj_mse < 0.01);
}
