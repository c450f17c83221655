#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "coc/experiment.hpp"

using namespace coc;

namespace {

RunConfig config_or_defaults(const std::string& path) {
  if (path.empty()) return RunConfig::defaults();
  return load_run_config(path);
}

int cmd_init_config(const std::string& out) {
  RunConfig cfg = RunConfig::defaults();
  std::ofstream f(out);
  if (!f) throw io_error("cannot write " + out);
  f << run_config_to_json(cfg).dump(2) << '\n';
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_gen_data(const std::string& config, const std::string& out) {
  RunConfig cfg = config_or_defaults(config);
  const std::string dir = out.empty()
                              ? std::filesystem::path(cfg.sim_train_path)
                                    .parent_path()
                                    .string()
                              : out;
  generate_experiment_data(cfg, dir.empty() ? "." : dir, &std::cout);
  return 0;
}

int cmd_train(const std::string& config, const std::string& resume,
              const std::string& teacher_ckpt, const std::string& student_ckpt) {
  RunConfig cfg = config_or_defaults(config);
  std::filesystem::create_directories(cfg.out_dir);

  if (!resume.empty()) {
    TrainState st = load_checkpoint(resume);
    const std::uint64_t want =
        fnv1a(train_config_to_json(cfg.train).dump() +
              vlm_config_to_json(cfg.model).dump());
    if (st.config_hash != want)
      throw config_error(
          "checkpoint was produced under a different configuration");
    Dataset sim = read_dataset(cfg.sim_train_path);
    Dataset real = read_dataset(cfg.real_train_path);
    const std::string ckpt_path = cfg.out_dir + "/checkpoint.bin";
    advance_stage(st, sim, real, nullptr, nullptr,
                  [&](const TrainState& s) { save_checkpoint(ckpt_path, s); });
    save_checkpoint(ckpt_path, st);
    std::cout << "resumed and finished; checkpoint at " << ckpt_path << "\n";
    return 0;
  }

  WarmStart warm;
  std::optional<TrainState> teacher_state, student_state;
  if (cfg.train.stage == Stage::ADVERSARIAL) {
    // the adversarial schedule starts from the two pretrained models
    if (teacher_ckpt.empty() || student_ckpt.empty())
      throw config_error(
          "ADVERSARIAL needs --teacher-checkpoint and --student-checkpoint "
          "from the two pretraining stages");
    teacher_state = load_checkpoint(teacher_ckpt);
    student_state = load_checkpoint(student_ckpt);
    if (!teacher_state->teacher || !student_state->student)
      throw config_error("checkpoints do not hold the expected models");
    warm.teacher = &*teacher_state->teacher;
    warm.student = &*student_state->student;
  }
  run_experiment(cfg, warm, &std::cout);
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& dataset,
             const std::string& out, int lang_frames,
             const std::string& traj_source) {
  if (traj_source != "head" && traj_source != "text")
    throw config_error("--traj-source must be 'head' or 'text'");
  TrainState st = load_checkpoint(ckpt);
  const CoCVLM* model = st.student ? &*st.student
                        : st.teacher ? &*st.teacher
                                     : nullptr;
  if (!model) throw config_error("checkpoint holds no model");
  Dataset test = read_dataset(dataset);
  EvalSplits splits =
      evaluate_model(*model, test, lang_frames, traj_source == "text");

  MetricsReport report;
  report.config_hash = st.config_hash;
  report.seed = st.train_cfg.seed;
  report.stage = to_string(st.train_cfg.stage);
  report.dataset = dataset;
  report.arch = st.model_cfg.arch_descriptor();
  report.splits = splits;
  write_report(report, out);

  const std::string dir =
      std::filesystem::path(out).parent_path().string();
  const std::string base = dir.empty() ? "." : dir;
  std::vector<std::string> labels;
  std::vector<double> vals;
  for (int k = 0; k < 6; ++k) {
    labels.push_back(std::to_string(0.5 * (k + 1)) + "s");
    vals.push_back(splits.full.displacement.per_horizon[std::size_t(k)]);
  }
  write_bar_chart(base + "/ade_horizons.svg", "ADE per horizon (m)", labels,
                  vals);
  std::cout << "ADE " << splits.full.displacement.ade << " collision "
            << splits.full.collision.rate << " (report " << out << ")\n";
  return 0;
}

int cmd_ablation(const std::string& config, const std::string& out, int seeds,
                 bool quick) {
  RunConfig cfg = config_or_defaults(config);
  AblationOptions opt;
  opt.n_seeds = seeds;
  opt.quick = quick;
  opt.out_dir = out;
  AblationOutcome result = reproduce_ablation(cfg, opt, &std::cout);
  std::cout << "ordering holds on " << result.seeds_with_ordering << "/"
            << seeds << " seeds -> "
            << (result.ordering_holds ? "PASS" : "FAIL") << "\n";
  return result.ordering_holds ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale adversarial sim-to-real transfer lab"};
  app.require_subcommand(1);

  std::string config, out, resume, ckpt, dataset, traj_source = "head";
  std::string teacher_ckpt, student_ckpt;
  int lang_frames = 48, seeds = 3;
  bool quick = false;

  auto* init = app.add_subcommand("init-config", "write a default config");
  init->add_option("--out", out, "output path")->default_val("cocdrive.json");

  auto* gen = app.add_subcommand("gen-data", "generate the two-domain datasets");
  gen->add_option("--config", config, "run config json");
  gen->add_option("--out", out, "output directory");

  auto* train = app.add_subcommand("train", "run the configured stage");
  train->add_option("--config", config, "run config json");
  train->add_option("--resume", resume, "checkpoint to resume");
  train->add_option("--teacher-checkpoint", teacher_ckpt,
                    "pretrained teacher (ADVERSARIAL)");
  train->add_option("--student-checkpoint", student_ckpt,
                    "pretrained student (ADVERSARIAL)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  eval->add_option("--dataset", dataset, "dataset file")->required();
  eval->add_option("--out", out, "report path")->default_val("report.json");
  eval->add_option("--lang-frames", lang_frames,
                   "frames for language metrics (0 disables)");
  eval->add_option("--traj-source", traj_source, "head | text");

  auto* abl = app.add_subcommand("reproduce-ablation",
                                 "run the four-stage comparison");
  abl->add_option("--config", config, "run config json");
  abl->add_option("--out", out, "output directory")->default_val("runs/ablation");
  abl->add_option("--seeds", seeds, "number of seeds");
  abl->add_flag("--quick", quick, "smoke-test sizes");

  CLI11_PARSE(app, argc, argv);

  try {
    if (init->parsed()) return cmd_init_config(out);
    if (gen->parsed()) return cmd_gen_data(config, out);
    if (train->parsed())
      return cmd_train(config, resume, teacher_ckpt, student_ckpt);
    if (eval->parsed())
      return cmd_eval(ckpt, dataset, out, lang_frames, traj_source);
    if (abl->parsed()) return cmd_ablation(config, out, seeds, quick);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
