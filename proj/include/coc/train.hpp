#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "coc/adversary.hpp"
#include "coc/metrics.hpp"
#include "coc/optim.hpp"
#include "coc/sim.hpp"
#include "coc/vlm.hpp"

namespace coc {

enum class Stage : std::uint8_t {
  PRETRAIN_TEACHER,
  PRETRAIN_STUDENT,
  ADVERSARIAL,
  MIX_BASELINE,
  FINETUNE_TWICE_BASELINE,
  REAL_ONLY_BASELINE,
};
const char* to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct TrainConfig {
  Stage stage = Stage::ADVERSARIAL;
  int batch_size = 16;
  int steps = 150;      // pretrain / finetune steps per phase
  int adv_steps = 150;  // 1:1 alternations of step 1 and step 2
  double lr_vlm = 3e-4;
  double lr_traj_head = 0.02;  // the head moves on a meter scale
  double lr_disc = 0.05;  // sgd + momentum
  double lambda_traj = 1.0;
  double lambda_adv = 0.5;
  int eval_every = 50;
  int sample_stride = 2;    // frame lattice stride within clips
  int temporal_shift = 1;   // random shift added to lattice points
  std::uint64_t seed = 1;
  // step 2 variants; defaults follow the two-batch reading with the task
  // loss on real data only
  bool vlm_loss_on_sim = false;
  bool main_text_mode = false;      // student forwards real data only
  bool scheduled_sampling = false;  // off: gt cache during training
  bool adapters_only = false;       // fine-tune adapters + heads only
  bool freeze_asserts = true;

  void validate() const;
};

struct CurvePoint {
  long long step = 0;
  double loss = 0.0;
  double aux = 0.0;  // stage-dependent: disc loss or adversarial term
};

// Orchestration state: the models a stage owns plus optimizers, the loop
// rng, and the phase/step cursors. Checkpoints capture all of it, so a
// resumed run replays the uninterrupted one bitwise.
struct TrainState {
  VlmConfig model_cfg;
  TrainConfig train_cfg;
  std::uint64_t config_hash = 0;
  int phase = 0;       // stage-specific phase index
  long long step = 0;  // step within the current phase
  Rng loop_rng{1};
  std::optional<CoCVLM> teacher;
  std::optional<CoCVLM> student;
  std::optional<Discriminator> disc;
  std::unique_ptr<Adam> opt_teacher;
  std::unique_ptr<Adam> opt_student;
  std::unique_ptr<SgdMomentum> opt_disc;
  std::vector<CurvePoint> curve;
  std::vector<CurvePoint> probe_curve;
};

// deep copy: fresh storage, identical values
CoCVLM clone_model(const CoCVLM& m);

// Teacher-forced minimization of vlm_loss over the dataset(s). The cached
// instruction for frame t comes from the ground-truth filtered answer of
// frame t-1. Fails with config_error when the dataset domain contradicts the
// model role outside baseline stages.
void pretrain(CoCVLM& model, const std::vector<const Dataset*>& data,
              const TrainConfig& cfg, Adam& opt, Rng& loop_rng,
              std::vector<CurvePoint>* curve, Stage stage);

// Step 1: teacher on sim, student on real, logistic loss on the
// discriminator only. Teacher and student parameter bytes stay untouched.
double adversarial_step1(const CoCVLM& teacher, const CoCVLM& student,
                         Discriminator& disc,
                         const std::vector<ModelInput>& sim_batch,
                         const std::vector<ModelInput>& real_batch,
                         SgdMomentum& opt, const TrainConfig& cfg);

// Step 2: the student encodes both batches; task loss on the real batch,
// fooling loss (student features against the SIM label) through the frozen
// discriminator. Returns (total, task, adversarial) losses.
struct Step2Losses {
  double total = 0.0, task = 0.0, adversarial = 0.0;
};
Step2Losses adversarial_step2(CoCVLM& student, const Discriminator& disc,
                              const std::vector<ModelInput>& sim_batch,
                              const std::vector<ModelInput>& real_batch,
                              const Tensor& real_gt_traj,
                              const Tensor& sim_gt_traj, Adam& opt,
                              const TrainConfig& cfg);

// batch assembly from a dataset via the stride + shift sampling rule
struct SampledBatch {
  std::vector<ModelInput> inputs;
  std::vector<const Frame*> frames;
};
SampledBatch sample_batch(const std::vector<const Dataset*>& data, int batch,
                          int stride, int shift_range, Rng& rng,
                          bool with_answers);

// Fresh linear probe on (teacher-sim vs student-real) features; returns
// held-out accuracy. Pure in its inputs and seed.
double domain_probe_accuracy(const std::vector<std::vector<double>>& sim_rows,
                             const std::vector<std::vector<double>>& real_rows,
                             std::uint64_t seed);

// pooled feature rows for whole datasets (teacher forcing, no grads)
std::vector<std::vector<double>> extract_features(
    const CoCVLM& m, const Dataset& data, int max_frames, int batch_size);

// full stage recipes
struct WarmStart {
  const CoCVLM* teacher = nullptr;
  const CoCVLM* student = nullptr;  // already pretrained on its domain
};

using CheckpointHook = std::function<void(const TrainState&)>;

// Drives the stage from wherever the state cursor stands to completion.
// sim_val/real_val, when given, feed the domain-probe curve during the
// adversarial phase. The hook fires every eval_every steps and at phase
// boundaries.
void advance_stage(TrainState& st, const Dataset& sim_train,
                   const Dataset& real_train,
                   const Dataset* sim_val = nullptr,
                   const Dataset* real_val = nullptr,
                   const CheckpointHook& hook = {});

TrainState init_stage(const VlmConfig& mcfg, const TrainConfig& tcfg,
                      const WarmStart& warm = {});

TrainState run_stage(const VlmConfig& mcfg, const TrainConfig& tcfg,
                     const Dataset& sim_train, const Dataset& real_train,
                     const WarmStart& warm = {},
                     const Dataset* sim_val = nullptr,
                     const Dataset* real_val = nullptr,
                     const CheckpointHook& hook = {});

// evaluation over a test dataset, split by rare-event category
struct EvalSplits {
  PlanEval full, normal_subset, rare_subset;
  std::optional<LangEval> lang;
  int n_frames = 0, n_rare_frames = 0;
  double parse_clean_rate = 1.0;  // over generated language samples
};
EvalSplits evaluate_model(const CoCVLM& m, const Dataset& test,
                          int lang_eval_frames, bool traj_from_text = false);

// ---- checkpoints -------------------------------------------------------------

void save_checkpoint(const std::string& path, const TrainState& st);
TrainState load_checkpoint(const std::string& path);

std::uint64_t state_params_hash(const TrainState& st);

}  // namespace coc
