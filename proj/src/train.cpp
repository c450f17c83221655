#include "coc/train.hpp"

#include <algorithm>
#include <cmath>

#include "coc/report.hpp"

namespace coc {

const char* to_string(Stage s) {
  switch (s) {
    case Stage::PRETRAIN_TEACHER: return "PRETRAIN_TEACHER";
    case Stage::PRETRAIN_STUDENT: return "PRETRAIN_STUDENT";
    case Stage::ADVERSARIAL: return "ADVERSARIAL";
    case Stage::MIX_BASELINE: return "MIX_BASELINE";
    case Stage::FINETUNE_TWICE_BASELINE: return "FINETUNE_TWICE_BASELINE";
    case Stage::REAL_ONLY_BASELINE: return "REAL_ONLY_BASELINE";
  }
  return "?";
}

Stage stage_from_string(const std::string& s) {
  for (int i = 0; i < 6; ++i)
    if (s == to_string(Stage(i))) return Stage(i);
  throw config_error("unknown stage: " + s);
}

void TrainConfig::validate() const {
  if (batch_size <= 0 || steps <= 0 || adv_steps < 0)
    throw config_error("steps and batch size must be positive");
  if (lambda_adv < 0.0) throw config_error("lambda_adv must be nonnegative");
  if (lambda_traj < 0.0) throw config_error("lambda_traj must be nonnegative");
  if (sample_stride < 1 || temporal_shift < 0)
    throw config_error("invalid frame sampling parameters");
}

CoCVLM clone_model(const CoCVLM& m) {
  CoCVLM out = CoCVLM::init(m.role, m.cfg, m.seed);
  const auto src = m.store.items();
  const auto dst = out.store.items();
  if (src.size() != dst.size())
    throw contract_error("clone_model: parameter sets diverge");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].first != dst[i].first)
      throw contract_error("clone_model: parameter order diverges");
    Tensor t = dst[i].second;
    t.values() = src[i].second.values();
  }
  return out;
}

SampledBatch sample_batch(const std::vector<const Dataset*>& data, int batch,
                          int stride, int shift_range, Rng& rng,
                          bool with_answers) {
  std::vector<const Clip*> clips;
  for (const Dataset* d : data)
    for (const auto& c : d->clips) clips.push_back(&c);
  if (clips.empty()) throw contract_error("sample_batch over empty datasets");
  const Vocabulary& v = Vocabulary::instance();

  SampledBatch out;
  for (int b = 0; b < batch; ++b) {
    const Clip& clip = *clips[std::size_t(rng.below(clips.size()))];
    const int n = int(clip.frames.size());
    const int lattice = (n + stride - 1) / stride;
    int frame = int(rng.below(std::uint64_t(lattice))) * stride;
    frame += int(rng.below(std::uint64_t(shift_range) + 1));
    frame = std::min(frame, n - 1);
    out.inputs.push_back(make_model_input(clip, frame, v, with_answers));
    out.frames.push_back(&clip.frames[std::size_t(frame)]);
  }
  return out;
}

void pretrain(CoCVLM& model, const std::vector<const Dataset*>& data,
              const TrainConfig& cfg, Adam& opt, Rng& loop_rng,
              std::vector<CurvePoint>* curve, Stage stage) {
  cfg.validate();
  if (data.empty()) throw contract_error("pretrain without datasets");
  const bool baseline = stage == Stage::MIX_BASELINE ||
                        stage == Stage::FINETUNE_TWICE_BASELINE ||
                        stage == Stage::REAL_ONLY_BASELINE;
  if (!baseline) {
    for (const Dataset* d : data) {
      const bool ok =
          (model.role == Role::TEACHER && d->domain == Domain::SIM) ||
          (model.role == Role::STUDENT && d->domain == Domain::REAL);
      if (!ok)
        throw config_error(std::string("dataset domain ") +
                           to_string(d->domain) + " does not match role " +
                           to_string(model.role));
    }
  }
  auto params = cfg.adapters_only ? model.finetune_params() : model.params();
  for (int step = 0; step < cfg.steps; ++step) {
    SampledBatch batch = sample_batch(data, cfg.batch_size, cfg.sample_stride,
                                      cfg.temporal_shift, loop_rng, true);
    Tape tape;
    ForwardResult fr = model_forward(model, batch.inputs);
    Tensor gt = traj_targets(batch.frames);
    Tensor loss = vlm_loss(fr, batch.inputs, gt, cfg.lambda_traj);
    backward(loss);
    opt.step();
    zero_grads(params);
    // adapters_only leaves frozen grads on the base weights; clear them too
    if (cfg.adapters_only) {
      auto all = model.params();
      zero_grads(all);
    }
    if (curve) curve->push_back({step, loss.item(), 0.0});
  }
}

double adversarial_step1(const CoCVLM& teacher, const CoCVLM& student,
                         Discriminator& disc,
                         const std::vector<ModelInput>& sim_batch,
                         const std::vector<ModelInput>& real_batch,
                         SgdMomentum& opt, const TrainConfig& cfg) {
  if (sim_batch.empty() || real_batch.empty())
    throw contract_error("adversarial step 1 with an empty batch");
  auto t_params = teacher.params();
  auto s_params = student.params();
  const std::uint64_t t_hash = cfg.freeze_asserts ? params_hash(t_params) : 0;
  const std::uint64_t s_hash = cfg.freeze_asserts ? params_hash(s_params) : 0;

  // feature extraction outside any tape: the VLMs are frozen here
  ForwardResult fr_sim = model_forward(teacher, sim_batch);
  ForwardResult fr_real = model_forward(student, real_batch);

  FeatureBatch fb;
  fb.features = concat({fr_sim.features, fr_real.features}, 0);
  fb.domain_label.assign(sim_batch.size(), Domain::SIM);
  fb.domain_label.insert(fb.domain_label.end(), real_batch.size(),
                         Domain::REAL);
  fb.producer.assign(sim_batch.size(), Role::TEACHER);
  fb.producer.insert(fb.producer.end(), real_batch.size(), Role::STUDENT);

  auto d_params = disc.params();
  double loss_value;
  {
    Tape tape;
    Tensor logits = disc_forward(disc, fb);
    Tensor loss = disc_loss(logits, fb.domain_label);
    backward(loss);
    opt.step();
    zero_grads(d_params);
    loss_value = loss.item();
  }

  if (cfg.freeze_asserts) {
    if (params_hash(t_params) != t_hash)
      throw contract_error("step 1 mutated teacher parameters");
    if (params_hash(s_params) != s_hash)
      throw contract_error("step 1 mutated student parameters");
  }
  return loss_value;
}

Step2Losses adversarial_step2(CoCVLM& student, const Discriminator& disc,
                              const std::vector<ModelInput>& sim_batch,
                              const std::vector<ModelInput>& real_batch,
                              const Tensor& real_gt_traj,
                              const Tensor& sim_gt_traj, Adam& opt,
                              const TrainConfig& cfg) {
  if (real_batch.empty())
    throw contract_error("adversarial step 2 with an empty real batch");
  if (cfg.lambda_adv < 0.0) throw config_error("lambda_adv must be nonnegative");
  auto d_params = disc.params();
  const std::uint64_t d_hash = cfg.freeze_asserts ? params_hash(d_params) : 0;
  auto s_params = student.params();

  Step2Losses out;
  {
    Tape tape;
    ForwardResult fr_real = model_forward(student, real_batch);
    Tensor task = vlm_loss(fr_real, real_batch, real_gt_traj, cfg.lambda_traj);

    Tensor fool_features = fr_real.features;
    std::size_t fool_rows = real_batch.size();
    if (!cfg.main_text_mode && !sim_batch.empty()) {
      ForwardResult fr_sim = model_forward(student, sim_batch);
      if (cfg.vlm_loss_on_sim) {
        Tensor sim_task =
            vlm_loss(fr_sim, sim_batch, sim_gt_traj, cfg.lambda_traj);
        task = scale(add(task, sim_task), 0.5);
      }
      fool_features = concat({fool_features, fr_sim.features}, 0);
      fool_rows += sim_batch.size();
    }

    // non-saturating fooling objective: student features against the SIM
    // label through the frozen discriminator
    FeatureBatch fb;
    fb.features = fool_features;
    fb.domain_label.assign(fool_rows, Domain::SIM);
    fb.producer.assign(fool_rows, Role::STUDENT);
    Tensor fool_logits = disc_forward(disc, fb);
    Tensor fool = disc_loss(fool_logits, fb.domain_label);

    Tensor total = add(task, scale(fool, cfg.lambda_adv));
    gated_backward(total, d_params);
    opt.step();
    zero_grads(s_params);
    out.total = total.item();
    out.task = task.item();
    out.adversarial = fool.item();
  }

  if (cfg.freeze_asserts) {
    for (const auto& p : d_params)
      if (p.has_grad())
        throw contract_error("step 2 leaked gradients into the discriminator");
    if (params_hash(d_params) != d_hash)
      throw contract_error("step 2 mutated discriminator parameters");
  }
  return out;
}

std::vector<std::vector<double>> extract_features(const CoCVLM& m,
                                                  const Dataset& data,
                                                  int max_frames,
                                                  int batch_size) {
  const Vocabulary& v = Vocabulary::instance();
  std::vector<std::vector<double>> rows;
  std::vector<ModelInput> batch;
  auto flush = [&] {
    if (batch.empty()) return;
    ForwardResult fr = model_forward(m, batch);
    const int d = fr.features.dim(1);
    for (int b = 0; b < int(batch.size()); ++b)
      rows.emplace_back(
          fr.features.values().begin() + long(b) * d,
          fr.features.values().begin() + long(b + 1) * d);
    batch.clear();
  };
  for (const auto& clip : data.clips) {
    for (int f = 0; f < int(clip.frames.size()); ++f) {
      if (int(rows.size() + batch.size()) >= max_frames) break;
      batch.push_back(make_model_input(clip, f, v, true));
      if (int(batch.size()) == batch_size) flush();
    }
    if (int(rows.size() + batch.size()) >= max_frames) break;
  }
  flush();
  return rows;
}

double domain_probe_accuracy(const std::vector<std::vector<double>>& sim_rows,
                             const std::vector<std::vector<double>>& real_rows,
                             std::uint64_t seed) {
  if (sim_rows.size() < 8 || real_rows.size() < 8)
    throw contract_error("too few rows for a domain probe");
  const int d = int(sim_rows[0].size());
  Rng rng(seed);
  auto split = [&](const std::vector<std::vector<double>>& rows,
                   std::vector<std::vector<double>>& train,
                   std::vector<std::vector<double>>& held) {
    std::vector<std::size_t> idx(rows.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[std::size_t(rng.below(i))]);
    const std::size_t half = rows.size() / 2;
    for (std::size_t i = 0; i < rows.size(); ++i)
      (i < half ? train : held).push_back(rows[idx[i]]);
  };
  std::vector<std::vector<double>> st, sh, rt, rh;
  split(sim_rows, st, sh);
  split(real_rows, rt, rh);

  auto stack = [&](const std::vector<std::vector<double>>& a,
                   const std::vector<std::vector<double>>& b) {
    std::vector<double> flat;
    for (const auto& r : a) flat.insert(flat.end(), r.begin(), r.end());
    for (const auto& r : b) flat.insert(flat.end(), r.begin(), r.end());
    return Tensor::from({int(a.size() + b.size()), d}, std::move(flat));
  };
  Tensor xtr = stack(st, rt);
  std::vector<Domain> ytr(st.size(), Domain::SIM);
  ytr.insert(ytr.end(), rt.size(), Domain::REAL);

  Tensor w = Tensor::param({d, 1}, std::vector<double>(std::size_t(d), 0.0));
  Tensor b = Tensor::param({1}, {0.0});
  std::vector<Tensor> params = {w, b};
  Adam opt(params, 0.05);
  for (int step = 0; step < 300; ++step) {
    Tape tape;
    Tensor logits = reshape(add(matmul(xtr, w), b), {xtr.dim(0)});
    Tensor loss = disc_loss(logits, ytr);
    backward(loss);
    opt.step();
    zero_grads(params);
  }

  Tensor xh = stack(sh, rh);
  Tensor logits = reshape(add(matmul(xh, w), b), {xh.dim(0)});
  int correct = 0;
  const int n_sim = int(sh.size());
  for (int i = 0; i < xh.dim(0); ++i) {
    const bool said_sim = logits.values()[std::size_t(i)] > 0.0;
    const bool is_sim = i < n_sim;
    if (said_sim == is_sim) ++correct;
  }
  return double(correct) / double(xh.dim(0));
}

namespace {

std::uint64_t phase_seed(std::uint64_t seed, std::uint64_t salt) {
  return seed * 0x9e3779b97f4a7c15ull + salt;
}

// adam over the model with the trajectory head on its own learning rate
std::unique_ptr<Adam> make_vlm_optimizer(const CoCVLM& m,
                                         const TrainConfig& cfg) {
  std::vector<Tensor> params;
  std::vector<double> lrs;
  const auto& items = cfg.adapters_only
                          ? std::vector<std::pair<std::string, Tensor>>{}
                          : m.store.items();
  if (cfg.adapters_only) {
    for (const auto& [name, p] : m.store.items()) {
      if (name.rfind("adapter.", 0) == 0 || name.rfind("traj_head", 0) == 0 ||
          name.rfind("brain.lm_head", 0) == 0) {
        params.push_back(p);
        lrs.push_back(name.rfind("traj_head", 0) == 0 ? cfg.lr_traj_head
                                                      : cfg.lr_vlm);
      }
    }
  } else {
    for (const auto& [name, p] : items) {
      params.push_back(p);
      lrs.push_back(name.rfind("traj_head", 0) == 0 ? cfg.lr_traj_head
                                                    : cfg.lr_vlm);
    }
  }
  return std::make_unique<Adam>(std::move(params), std::move(lrs));
}

// data-dependent head init: the bias starts at the mean training trajectory
// so the head only has to learn the residual structure
void init_traj_bias(CoCVLM& m, const std::vector<const Dataset*>& data) {
  std::vector<double> mean(12, 0.0);
  std::size_t count = 0;
  for (const Dataset* d : data)
    for (const auto& clip : d->clips)
      for (const auto& f : clip.frames) {
        for (int k = 0; k < 6; ++k) {
          mean[std::size_t(2 * k)] += f.gt_trajectory[std::size_t(k)].first;
          mean[std::size_t(2 * k + 1)] += f.gt_trajectory[std::size_t(k)].second;
        }
        if (++count >= 2048) break;
      }
  if (count == 0) return;
  for (auto& v : mean) v /= double(count);
  m.traj_head.bias.values() = mean;
}

// one pretrain phase, resumable at st.step
void run_pretrain_phase(TrainState& st, CoCVLM& model,
                        const std::vector<const Dataset*>& data,
                        Stage check_stage, std::uint64_t rng_salt,
                        std::unique_ptr<Adam>& opt_slot,
                        const CheckpointHook& hook) {
  const TrainConfig& cfg = st.train_cfg;
  if (st.step == 0) {
    init_traj_bias(model, data);
    opt_slot = make_vlm_optimizer(model, cfg);
    st.loop_rng = Rng(phase_seed(cfg.seed, rng_salt));
  }
  const bool baseline = check_stage == Stage::MIX_BASELINE ||
                        check_stage == Stage::FINETUNE_TWICE_BASELINE ||
                        check_stage == Stage::REAL_ONLY_BASELINE;
  if (!baseline) {
    for (const Dataset* d : data) {
      const bool ok =
          (model.role == Role::TEACHER && d->domain == Domain::SIM) ||
          (model.role == Role::STUDENT && d->domain == Domain::REAL);
      if (!ok)
        throw config_error(std::string("dataset domain ") +
                           to_string(d->domain) + " does not match role " +
                           to_string(model.role));
    }
  }
  auto params = cfg.adapters_only ? model.finetune_params() : model.params();
  while (st.step < cfg.steps) {
    SampledBatch batch = sample_batch(data, cfg.batch_size, cfg.sample_stride,
                                      cfg.temporal_shift, st.loop_rng, true);
    Tape tape;
    ForwardResult fr = model_forward(model, batch.inputs);
    Tensor gt = traj_targets(batch.frames);
    Tensor loss = vlm_loss(fr, batch.inputs, gt, cfg.lambda_traj);
    backward(loss);
    opt_slot->step();
    zero_grads(params);
    if (cfg.adapters_only) {
      auto all = model.params();
      zero_grads(all);
    }
    st.curve.push_back({(long long)st.curve.size(), loss.item(), 0.0});
    ++st.step;
    if (hook && cfg.eval_every > 0 && st.step % cfg.eval_every == 0) hook(st);
  }
}

void record_probe(TrainState& st, const Dataset* sim_val,
                  const Dataset* real_val) {
  if (!sim_val || !real_val || !st.teacher || !st.student) return;
  auto sim_rows = extract_features(*st.teacher, *sim_val, 192, 16);
  auto real_rows = extract_features(*st.student, *real_val, 192, 16);
  const double acc = domain_probe_accuracy(
      sim_rows, real_rows, phase_seed(st.train_cfg.seed, 271));
  st.probe_curve.push_back({(long long)st.step, 0.0, acc});
}

void run_adversarial_phase(TrainState& st, const Dataset& sim_train,
                           const Dataset& real_train, const Dataset* sim_val,
                           const Dataset* real_val,
                           const CheckpointHook& hook) {
  const TrainConfig& cfg = st.train_cfg;
  if (st.step == 0) {
    st.disc = Discriminator::init(st.model_cfg.brain.d_model, 64, 2,
                                  phase_seed(cfg.seed, 3));
    st.opt_student = make_vlm_optimizer(*st.student, cfg);
    st.opt_disc =
        std::make_unique<SgdMomentum>(st.disc->params(), cfg.lr_disc);
    st.loop_rng = Rng(phase_seed(cfg.seed, 104));
    record_probe(st, sim_val, real_val);  // pre-adversarial baseline
  }
  while (st.step < cfg.adv_steps) {
    SampledBatch sim1 =
        sample_batch({&sim_train}, cfg.batch_size, cfg.sample_stride,
                     cfg.temporal_shift, st.loop_rng, true);
    SampledBatch real1 =
        sample_batch({&real_train}, cfg.batch_size, cfg.sample_stride,
                     cfg.temporal_shift, st.loop_rng, true);
    const double d_loss =
        adversarial_step1(*st.teacher, *st.student, *st.disc, sim1.inputs,
                          real1.inputs, *st.opt_disc, cfg);
    SampledBatch sim2 =
        sample_batch({&sim_train}, cfg.batch_size, cfg.sample_stride,
                     cfg.temporal_shift, st.loop_rng, true);
    SampledBatch real2 =
        sample_batch({&real_train}, cfg.batch_size, cfg.sample_stride,
                     cfg.temporal_shift, st.loop_rng, true);
    Step2Losses s2 = adversarial_step2(
        *st.student, *st.disc, sim2.inputs, real2.inputs,
        traj_targets(real2.frames), traj_targets(sim2.frames),
        *st.opt_student, cfg);
    st.curve.push_back({(long long)st.curve.size(), s2.total, d_loss});
    ++st.step;
    if (cfg.eval_every > 0 && st.step % cfg.eval_every == 0) {
      record_probe(st, sim_val, real_val);
      if (hook) hook(st);
    }
  }
  if (cfg.eval_every > 0 && st.step % cfg.eval_every != 0)
    record_probe(st, sim_val, real_val);
}

}  // namespace

TrainState init_stage(const VlmConfig& mcfg, const TrainConfig& tcfg,
                      const WarmStart& warm) {
  tcfg.validate();
  TrainState st;
  st.model_cfg = mcfg;
  st.train_cfg = tcfg;
  st.config_hash = fnv1a(train_config_to_json(tcfg).dump() +
                         vlm_config_to_json(mcfg).dump());
  if (tcfg.stage == Stage::ADVERSARIAL) {
    if (warm.teacher && !warm.student)
      throw config_error("warm teacher requires a warm student");
    if (warm.student) {
      st.student = clone_model(*warm.student);
      st.phase = 1;
    }
    if (warm.teacher) {
      st.teacher = clone_model(*warm.teacher);
      st.phase = 2;
    }
  } else if (warm.student || warm.teacher) {
    throw config_error("warm starts only apply to the adversarial stage");
  }
  return st;
}

void advance_stage(TrainState& st, const Dataset& sim_train,
                   const Dataset& real_train, const Dataset* sim_val,
                   const Dataset* real_val, const CheckpointHook& hook) {
  const TrainConfig& cfg = st.train_cfg;
  const VlmConfig& mcfg = st.model_cfg;
  const std::uint64_t teacher_seed = phase_seed(cfg.seed, 1);
  const std::uint64_t student_seed = phase_seed(cfg.seed, 2);

  auto next_phase = [&] {
    ++st.phase;
    st.step = 0;
    if (hook) hook(st);
  };

  switch (cfg.stage) {
    case Stage::PRETRAIN_TEACHER:
      if (st.phase == 0) {
        if (!st.teacher) st.teacher = CoCVLM::init(Role::TEACHER, mcfg, teacher_seed);
        run_pretrain_phase(st, *st.teacher, {&sim_train}, cfg.stage, 101,
                           st.opt_teacher, hook);
        next_phase();
      }
      break;
    case Stage::PRETRAIN_STUDENT:
    case Stage::REAL_ONLY_BASELINE:
      if (st.phase == 0) {
        if (!st.student) st.student = CoCVLM::init(Role::STUDENT, mcfg, student_seed);
        run_pretrain_phase(st, *st.student, {&real_train}, cfg.stage, 102,
                           st.opt_student, hook);
        next_phase();
      }
      break;
    case Stage::MIX_BASELINE:
      if (st.phase == 0) {
        if (!st.student) st.student = CoCVLM::init(Role::STUDENT, mcfg, student_seed);
        run_pretrain_phase(st, *st.student, {&sim_train, &real_train},
                           cfg.stage, 102, st.opt_student, hook);
        next_phase();
      }
      break;
    case Stage::FINETUNE_TWICE_BASELINE:
      if (st.phase == 0) {
        if (!st.student) st.student = CoCVLM::init(Role::STUDENT, mcfg, student_seed);
        run_pretrain_phase(st, *st.student, {&sim_train}, cfg.stage, 102,
                           st.opt_student, hook);
        next_phase();
      }
      if (st.phase == 1) {
        run_pretrain_phase(st, *st.student, {&real_train}, cfg.stage, 103,
                           st.opt_student, hook);
        next_phase();
      }
      break;
    case Stage::ADVERSARIAL:
      if (st.phase == 0) {
        if (!st.student) st.student = CoCVLM::init(Role::STUDENT, mcfg, student_seed);
        run_pretrain_phase(st, *st.student, {&real_train},
                           Stage::PRETRAIN_STUDENT, 102, st.opt_student, hook);
        next_phase();
      }
      if (st.phase == 1) {
        if (!st.teacher) st.teacher = CoCVLM::init(Role::TEACHER, mcfg, teacher_seed);
        run_pretrain_phase(st, *st.teacher, {&sim_train},
                           Stage::PRETRAIN_TEACHER, 101, st.opt_teacher, hook);
        next_phase();
      }
      if (st.phase == 2) {
        run_adversarial_phase(st, sim_train, real_train, sim_val, real_val,
                              hook);
        next_phase();
      }
      break;
  }
}

TrainState run_stage(const VlmConfig& mcfg, const TrainConfig& tcfg,
                     const Dataset& sim_train, const Dataset& real_train,
                     const WarmStart& warm, const Dataset* sim_val,
                     const Dataset* real_val, const CheckpointHook& hook) {
  TrainState st = init_stage(mcfg, tcfg, warm);
  advance_stage(st, sim_train, real_train, sim_val, real_val, hook);
  return st;
}

EvalSplits evaluate_model(const CoCVLM& m, const Dataset& test,
                          int lang_eval_frames, bool traj_from_text) {
  const Vocabulary& v = Vocabulary::instance();
  EvalSplits out;

  struct Row {
    std::optional<Waypoints> pred;
    Waypoints gt;
    CollisionFrame col;
    bool rare = false;
  };
  std::vector<Row> rows;

  const int B = 16;
  std::vector<ModelInput> batch;
  std::vector<const Frame*> frames;
  auto flush = [&] {
    if (batch.empty()) return;
    if (!traj_from_text) {
      ForwardResult fr = model_forward(m, batch);
      for (int b = 0; b < int(batch.size()); ++b) {
        Row r;
        Waypoints wp;
        for (int k = 0; k < 6; ++k)
          wp[std::size_t(k)] = {
              fr.traj.values()[std::size_t(b) * 12 + std::size_t(2 * k)],
              fr.traj.values()[std::size_t(b) * 12 + std::size_t(2 * k + 1)]};
        r.pred = wp;
        rows.push_back(r);
      }
    } else {
      auto gens = generate_batch(m, batch);
      for (const auto& g : gens) {
        Row r;
        if (g.parse.answer.has_trajectory()) {
          Waypoints wp;
          for (int k = 0; k < 6; ++k)
            wp[std::size_t(k)] = g.parse.answer.trajectory[std::size_t(k)];
          r.pred = wp;
        }
        rows.push_back(r);
      }
    }
    for (int b = 0; b < int(batch.size()); ++b) {
      Row& r = rows[rows.size() - batch.size() + std::size_t(b)];
      const Frame* f = frames[std::size_t(b)];
      r.gt = f->gt_trajectory;
      r.rare = is_rare_event(f->category);
      r.col.pred = r.pred;
      r.col.agent_futures = f->agent_futures;
      for (const auto& a : f->agents)
        r.col.agent_extents.push_back({a.length, a.width});
      if (r.rare) ++out.n_rare_frames;
    }
    batch.clear();
    frames.clear();
  };

  for (const auto& clip : test.clips)
    for (int fi = 0; fi < int(clip.frames.size()); ++fi) {
      batch.push_back(make_model_input(clip, fi, v, false));
      frames.push_back(&clip.frames[std::size_t(fi)]);
      if (int(batch.size()) == B) flush();
    }
  flush();
  out.n_frames = int(rows.size());

  auto plan_over = [&](auto keep) {
    std::vector<std::optional<Waypoints>> preds;
    std::vector<Waypoints> gts;
    std::vector<CollisionFrame> cols;
    for (const auto& r : rows) {
      if (!keep(r)) continue;
      preds.push_back(r.pred);
      gts.push_back(r.gt);
      cols.push_back(r.col);
    }
    PlanEval pe;
    if (!preds.empty()) {
      pe.displacement = ade(preds, gts);
      pe.collision = collision_rate(cols);
    }
    return pe;
  };
  out.full = plan_over([](const Row&) { return true; });
  out.normal_subset = plan_over([](const Row& r) { return !r.rare; });
  out.rare_subset = plan_over([](const Row& r) { return r.rare; });

  if (lang_eval_frames > 0) {
    LangEval le;
    std::vector<TokenSeq> cands, refs;
    std::vector<CoCAnswer> pred_answers, gt_answers;
    int taken = 0, clean = 0;
    for (const auto& clip : test.clips) {
      for (int fi = 0; fi < int(clip.frames.size()) && taken < lang_eval_frames;
           ++fi, ++taken) {
        std::vector<ModelInput> one = {make_model_input(clip, fi, v, false)};
        Generation g = generate_batch(m, one)[0];
        TokenSeq cand;
        for (int id : g.tokens) cand.push_back(v.token(id));
        TokenSeq ref;
        for (int id : tokenize(render_answer(
                 clip.frames[std::size_t(fi)].gt_answer), v))
          ref.push_back(v.token(id));
        cands.push_back(cand);
        refs.push_back(ref);
        pred_answers.push_back(g.parse.answer);
        gt_answers.push_back(clip.frames[std::size_t(fi)].gt_answer);
        if (g.parse.clean()) ++clean;
        else ++le.parse_failures;
      }
      if (taken >= lang_eval_frames) break;
    }
    if (!cands.empty()) {
      le.n_pairs = int(cands.size());
      for (int n = 1; n <= 4; ++n) {
        double acc = 0.0;
        for (std::size_t i = 0; i < cands.size(); ++i)
          acc += bleu_n(cands[i], {refs[i]}, n);
        le.bleu[std::size_t(n - 1)] = acc / double(cands.size());
      }
      double r = 0.0;
      for (std::size_t i = 0; i < cands.size(); ++i)
        r += rouge_l(cands[i], refs[i]);
      le.rouge_l = r / double(cands.size());
      le.cider = refs.size() >= 2 ? cider(cands, refs) : 0.0;
      auto [acc, match] = accuracy_match(pred_answers, gt_answers);
      le.accuracy = acc;
      le.match = match;
      out.parse_clean_rate = double(clean) / double(cands.size());
      out.lang = le;
    }
  }
  return out;
}

// ---- checkpoints ---------------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'C', 'O', 'C', 'C', 'K', 'P', 'T', '1'};

void put_params(ByteWriter& w, const ParamStore& store) {
  w.u32(std::uint32_t(store.items().size()));
  for (const auto& [name, t] : store.items()) {
    w.str(name);
    w.u32(std::uint32_t(t.shape().size()));
    for (int d : t.shape()) w.u32(std::uint32_t(d));
    w.f64s(t.values());
  }
}

void get_params(ByteReader& r, ParamStore& store) {
  const std::uint32_t n = r.u32();
  if (n != store.items().size())
    throw io_error("checkpoint parameter count mismatch");
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = r.str();
    if (name != store.items()[i].first)
      throw io_error("checkpoint parameter order mismatch at " + name);
    const std::uint32_t nd = r.u32();
    Shape shape(nd);
    for (auto& d : shape) d = int(r.u32());
    Tensor t = store.items()[i].second;
    if (shape != t.shape())
      throw io_error("checkpoint shape mismatch at " + name);
    t.values() = r.f64s();
    if (t.values().size() != numel(shape))
      throw io_error("checkpoint payload mismatch at " + name);
  }
}

void put_curve(ByteWriter& w, const std::vector<CurvePoint>& c) {
  w.u32(std::uint32_t(c.size()));
  for (const auto& p : c) {
    w.u64(std::uint64_t(p.step));
    w.f64(p.loss);
    w.f64(p.aux);
  }
}

std::vector<CurvePoint> get_curve(ByteReader& r) {
  std::vector<CurvePoint> c(r.u32());
  for (auto& p : c) {
    p.step = (long long)r.u64();
    p.loss = r.f64();
    p.aux = r.f64();
  }
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainState& st) {
  ByteWriter w;
  w.u32(1);  // version
  w.u64(st.config_hash);
  w.u64(Vocabulary::instance().version_hash());
  w.u64(std::uint64_t(st.phase));
  w.u64(std::uint64_t(st.step));
  w.str(vlm_config_to_json(st.model_cfg).dump());
  w.str(train_config_to_json(st.train_cfg).dump());
  for (std::uint64_t x : st.loop_rng.save_state()) w.u64(x);
  std::uint8_t flags = 0;
  if (st.teacher) flags |= 1;
  if (st.student) flags |= 2;
  if (st.disc) flags |= 4;
  if (st.opt_teacher) flags |= 8;
  if (st.opt_student) flags |= 16;
  if (st.opt_disc) flags |= 32;
  w.u8(flags);
  if (st.teacher) {
    w.u64(st.teacher->seed);
    put_params(w, st.teacher->store);
  }
  if (st.student) {
    w.u64(st.student->seed);
    put_params(w, st.student->store);
  }
  if (st.disc) {
    w.u32(std::uint32_t(st.disc->input_dim));
    w.u32(std::uint32_t(st.disc->d_disc));
    w.u32(std::uint32_t(st.disc->blocks.size()));
    put_params(w, st.disc->store);
  }
  if (st.opt_teacher) st.opt_teacher->save_state(w);
  if (st.opt_student) st.opt_student->save_state(w);
  if (st.opt_disc) st.opt_disc->save_state(w);
  put_curve(w, st.curve);
  put_curve(w, st.probe_curve);
  write_container(path, kCkptMagic, w.bytes());
}

TrainState load_checkpoint(const std::string& path) {
  const auto payload = read_container(path, kCkptMagic);
  ByteReader r(payload);
  const std::uint32_t version = r.u32();
  if (version != 1)
    throw io_error("checkpoint version " + std::to_string(version) +
                   " unsupported");
  TrainState st;
  st.config_hash = r.u64();
  const std::uint64_t vocab_hash = r.u64();
  if (vocab_hash != Vocabulary::instance().version_hash())
    throw vocab_error("checkpoint was produced with a different vocabulary");
  st.phase = int(r.u64());
  st.step = (long long)r.u64();
  st.model_cfg = vlm_config_from_json(nlohmann::json::parse(r.str()));
  st.train_cfg = train_config_from_json(nlohmann::json::parse(r.str()));
  std::vector<std::uint64_t> rng_state(6);
  for (auto& x : rng_state) x = r.u64();
  st.loop_rng.load_state(rng_state);
  const std::uint8_t flags = r.u8();
  if (flags & 1) {
    const std::uint64_t seed = r.u64();
    st.teacher = CoCVLM::init(Role::TEACHER, st.model_cfg, seed);
    get_params(r, st.teacher->store);
  }
  if (flags & 2) {
    const std::uint64_t seed = r.u64();
    st.student = CoCVLM::init(Role::STUDENT, st.model_cfg, seed);
    get_params(r, st.student->store);
  }
  if (flags & 4) {
    const int in = int(r.u32());
    const int dd = int(r.u32());
    const int nb = int(r.u32());
    st.disc = Discriminator::init(in, dd, nb, 0);
    get_params(r, st.disc->store);
  }
  if (flags & 8) {
    st.opt_teacher = make_vlm_optimizer(*st.teacher, st.train_cfg);
    st.opt_teacher->load_state(r);
  }
  if (flags & 16) {
    st.opt_student = make_vlm_optimizer(*st.student, st.train_cfg);
    st.opt_student->load_state(r);
  }
  if (flags & 32) {
    st.opt_disc = std::make_unique<SgdMomentum>(st.disc->params(),
                                                st.train_cfg.lr_disc);
    st.opt_disc->load_state(r);
  }
  st.curve = get_curve(r);
  st.probe_curve = get_curve(r);
  if (!r.exhausted()) throw io_error("checkpoint holds trailing bytes");
  return st;
}

std::uint64_t state_params_hash(const TrainState& st) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const std::vector<Tensor>& ps) {
    for (const auto& p : ps)
      h = fnv1a(p.values().data(), p.values().size() * sizeof(double), h);
  };
  if (st.teacher) mix(st.teacher->params());
  if (st.student) mix(st.student->params());
  if (st.disc) mix(st.disc->params());
  return h;
}

}  // namespace coc
