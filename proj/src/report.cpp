#include "coc/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace coc {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& allowed,
                const char* where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw config_error(std::string("unknown key '") + it.key() + "' in " +
                         where);
}

}  // namespace

json vlm_config_to_json(const VlmConfig& cfg) {
  json b;
  b["d_model"] = cfg.brain.d_model;
  b["n_heads"] = cfg.brain.n_heads;
  b["n_layers"] = cfg.brain.n_layers;
  b["d_ff"] = cfg.brain.d_ff;
  b["max_seq"] = cfg.brain.max_seq;
  b["vocab_size"] = cfg.brain.vocab_size;
  b["causal"] = cfg.brain.causal;
  json j;
  j["brain"] = b;
  j["patch"] = cfg.patch;
  j["input_window"] = cfg.input_window;
  j["max_answer_tokens"] = cfg.max_answer_tokens;
  j["feature_pool"] =
      cfg.feature_pool == PoolPoint::AnswerPositions ? "answer" : "input";
  j["traj_pool"] =
      cfg.traj_pool == PoolPoint::AnswerPositions ? "answer" : "input";
  j["use_adapters"] = cfg.use_adapters;
  j["adapter_rank"] = cfg.adapter_rank;
  j["adapter_scaling"] = cfg.adapter_scaling;
  return j;
}

VlmConfig vlm_config_from_json(const json& j) {
  check_keys(j,
             {"brain", "patch", "input_window", "max_answer_tokens",
              "feature_pool", "traj_pool", "use_adapters", "adapter_rank",
              "adapter_scaling"},
             "model config");
  VlmConfig cfg;
  const json& b = j.at("brain");
  check_keys(b,
             {"d_model", "n_heads", "n_layers", "d_ff", "max_seq",
              "vocab_size", "causal"},
             "model config brain");
  cfg.brain.d_model = b.at("d_model");
  cfg.brain.n_heads = b.at("n_heads");
  cfg.brain.n_layers = b.at("n_layers");
  cfg.brain.d_ff = b.at("d_ff");
  cfg.brain.max_seq = b.at("max_seq");
  cfg.brain.vocab_size = b.at("vocab_size");
  cfg.brain.causal = b.at("causal");
  cfg.patch = j.at("patch");
  cfg.input_window = j.at("input_window");
  cfg.max_answer_tokens = j.at("max_answer_tokens");
  auto pool = [](const std::string& s) {
    if (s == "answer") return PoolPoint::AnswerPositions;
    if (s == "input") return PoolPoint::InputPositions;
    throw config_error("pool point must be 'answer' or 'input'");
  };
  cfg.feature_pool = pool(j.at("feature_pool"));
  cfg.traj_pool = pool(j.at("traj_pool"));
  cfg.use_adapters = j.at("use_adapters");
  cfg.adapter_rank = j.at("adapter_rank");
  cfg.adapter_scaling = j.at("adapter_scaling");
  return cfg;
}

json train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["stage"] = to_string(cfg.stage);
  j["batch_size"] = cfg.batch_size;
  j["steps"] = cfg.steps;
  j["adv_steps"] = cfg.adv_steps;
  j["lr_vlm"] = cfg.lr_vlm;
  j["lr_traj_head"] = cfg.lr_traj_head;
  j["lr_disc"] = cfg.lr_disc;
  j["lambda_traj"] = cfg.lambda_traj;
  j["lambda_adv"] = cfg.lambda_adv;
  j["eval_every"] = cfg.eval_every;
  j["sample_stride"] = cfg.sample_stride;
  j["temporal_shift"] = cfg.temporal_shift;
  j["seed"] = cfg.seed;
  j["vlm_loss_on_sim"] = cfg.vlm_loss_on_sim;
  j["main_text_mode"] = cfg.main_text_mode;
  j["scheduled_sampling"] = cfg.scheduled_sampling;
  j["adapters_only"] = cfg.adapters_only;
  j["freeze_asserts"] = cfg.freeze_asserts;
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  check_keys(j,
             {"stage", "batch_size", "steps", "adv_steps", "lr_vlm", "lr_disc",
              "lambda_traj", "lambda_adv", "eval_every", "sample_stride", "lr_traj_head",
              "temporal_shift", "seed", "vlm_loss_on_sim", "main_text_mode",
              "scheduled_sampling", "adapters_only", "freeze_asserts"},
             "train config");
  TrainConfig cfg;
  cfg.stage = stage_from_string(j.at("stage"));
  cfg.batch_size = j.at("batch_size");
  cfg.steps = j.at("steps");
  cfg.adv_steps = j.at("adv_steps");
  cfg.lr_vlm = j.at("lr_vlm");
  cfg.lr_traj_head = j.at("lr_traj_head");
  cfg.lr_disc = j.at("lr_disc");
  cfg.lambda_traj = j.at("lambda_traj");
  cfg.lambda_adv = j.at("lambda_adv");
  cfg.eval_every = j.at("eval_every");
  cfg.sample_stride = j.at("sample_stride");
  cfg.temporal_shift = j.at("temporal_shift");
  cfg.seed = j.at("seed");
  cfg.vlm_loss_on_sim = j.at("vlm_loss_on_sim");
  cfg.main_text_mode = j.at("main_text_mode");
  cfg.scheduled_sampling = j.at("scheduled_sampling");
  cfg.adapters_only = j.at("adapters_only");
  cfg.freeze_asserts = j.at("freeze_asserts");
  return cfg;
}

json data_config_to_json(const DataConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["sim_clips"] = cfg.sim_clips;
  j["real_clips"] = cfg.real_clips;
  j["test_clips"] = cfg.test_clips;
  j["n_frames"] = cfg.n_frames;
  j["rare_quota"] = cfg.rare_quota;
  j["style_gain"] = cfg.gen.style_gain;
  j["style_bias"] = cfg.gen.style_bias;
  j["style_noise_amp"] = cfg.gen.style_noise_amp;
  return j;
}

DataConfig data_config_from_json(const json& j) {
  check_keys(j,
             {"seed", "sim_clips", "real_clips", "test_clips", "n_frames",
              "rare_quota", "style_gain", "style_bias", "style_noise_amp"},
             "data config");
  DataConfig cfg;
  cfg.seed = j.at("seed");
  cfg.sim_clips = j.at("sim_clips");
  cfg.real_clips = j.at("real_clips");
  cfg.test_clips = j.at("test_clips");
  cfg.n_frames = j.at("n_frames");
  cfg.rare_quota = j.at("rare_quota");
  cfg.gen.style_gain = j.at("style_gain");
  cfg.gen.style_bias = j.at("style_bias");
  cfg.gen.style_noise_amp = j.at("style_noise_amp");
  return cfg;
}

RunConfig RunConfig::defaults() {
  RunConfig cfg;
  cfg.model.brain.d_model = 64;
  cfg.model.brain.n_heads = 4;
  cfg.model.brain.n_layers = 2;
  cfg.model.brain.d_ff = 256;
  cfg.model.brain.max_seq = 300;
  cfg.model.brain.vocab_size = Vocabulary::instance().size();
  return cfg;
}

std::uint64_t RunConfig::hash() const {
  return fnv1a(run_config_to_json(*this).dump());
}

json run_config_to_json(const RunConfig& cfg) {
  json j;
  j["version"] = cfg.version;
  j["out_dir"] = cfg.out_dir;
  j["data"] = data_config_to_json(cfg.data);
  j["model"] = vlm_config_to_json(cfg.model);
  j["train"] = train_config_to_json(cfg.train);
  j["sim_train_path"] = cfg.sim_train_path;
  j["real_train_path"] = cfg.real_train_path;
  j["real_test_path"] = cfg.real_test_path;
  j["lang_eval_frames"] = cfg.lang_eval_frames;
  return j;
}

RunConfig run_config_from_json(const json& j) {
  check_keys(j,
             {"version", "out_dir", "data", "model", "train", "sim_train_path",
              "real_train_path", "real_test_path", "lang_eval_frames"},
             "run config");
  RunConfig cfg;
  cfg.version = j.at("version");
  if (cfg.version != 1)
    throw config_error("run config version must be 1");
  cfg.out_dir = j.at("out_dir");
  cfg.data = data_config_from_json(j.at("data"));
  cfg.model = vlm_config_from_json(j.at("model"));
  cfg.train = train_config_from_json(j.at("train"));
  cfg.sim_train_path = j.at("sim_train_path");
  cfg.real_train_path = j.at("real_train_path");
  cfg.real_test_path = j.at("real_test_path");
  cfg.lang_eval_frames = j.at("lang_eval_frames");
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config file " + path);
  json j;
  in >> j;
  return run_config_from_json(j);
}

// ---- metrics report --------------------------------------------------------------

namespace {

json plan_to_json(const PlanEval& p) {
  json j;
  j["ade"] = p.displacement.ade;
  j["ade_horizons"] = p.displacement.per_horizon;
  j["collision_rate"] = p.collision.rate;
  j["collision_horizons"] = p.collision.per_horizon;
  j["n_frames"] = p.displacement.n_frames;
  return j;
}

PlanEval plan_from_json(const json& j) {
  PlanEval p;
  p.displacement.ade = j.at("ade");
  p.displacement.per_horizon = j.at("ade_horizons");
  p.collision.rate = j.at("collision_rate");
  p.collision.per_horizon = j.at("collision_horizons");
  p.displacement.n_frames = j.at("n_frames");
  p.collision.n_frames = p.displacement.n_frames;
  return p;
}

json lang_to_json(const LangEval& l) {
  json j;
  j["bleu"] = l.bleu;
  j["rouge_l"] = l.rouge_l;
  j["cider"] = l.cider;
  j["accuracy"] = l.accuracy;
  j["match"] = l.match;
  j["n_pairs"] = l.n_pairs;
  j["parse_failures"] = l.parse_failures;
  return j;
}

LangEval lang_from_json(const json& j) {
  LangEval l;
  l.bleu = j.at("bleu");
  l.rouge_l = j.at("rouge_l");
  l.cider = j.at("cider");
  l.accuracy = j.at("accuracy");
  l.match = j.at("match");
  l.n_pairs = j.at("n_pairs");
  l.parse_failures = j.at("parse_failures");
  return l;
}

}  // namespace

json report_to_json(const MetricsReport& r) {
  json j;
  j["version"] = r.version;
  j["config_hash"] = r.config_hash;
  j["seed"] = r.seed;
  j["stage"] = r.stage;
  j["dataset"] = r.dataset;
  j["arch"] = r.arch;
  json s;
  s["full"] = plan_to_json(r.splits.full);
  s["normal"] = plan_to_json(r.splits.normal_subset);
  s["rare"] = plan_to_json(r.splits.rare_subset);
  s["n_frames"] = r.splits.n_frames;
  s["n_rare_frames"] = r.splits.n_rare_frames;
  s["parse_clean_rate"] = r.splits.parse_clean_rate;
  if (r.splits.lang) s["lang"] = lang_to_json(*r.splits.lang);
  j["splits"] = s;
  return j;
}

MetricsReport report_from_json(const json& j) {
  MetricsReport r;
  r.version = j.at("version");
  if (r.version != 1) throw io_error("report version must be 1");
  r.config_hash = j.at("config_hash");
  r.seed = j.at("seed");
  r.stage = j.at("stage");
  r.dataset = j.at("dataset");
  r.arch = j.at("arch");
  const json& s = j.at("splits");
  r.splits.full = plan_from_json(s.at("full"));
  r.splits.normal_subset = plan_from_json(s.at("normal"));
  r.splits.rare_subset = plan_from_json(s.at("rare"));
  r.splits.n_frames = s.at("n_frames");
  r.splits.n_rare_frames = s.at("n_rare_frames");
  r.splits.parse_clean_rate = s.at("parse_clean_rate");
  if (s.contains("lang")) r.splits.lang = lang_from_json(s.at("lang"));
  return r;
}

void write_report(const MetricsReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write report to " + path);
  out << report_to_json(r).dump(2) << '\n';
}

MetricsReport read_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open report " + path);
  json j;
  in >> j;
  return report_from_json(j);
}

// ---- plots -------------------------------------------------------------------------

namespace {

constexpr int kW = 640, kH = 400, kPad = 56;
const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                         "#ff7f0e", "#8c564b"};

}  // namespace

void write_line_chart(const std::string& svg_path, const std::string& title,
                      const std::vector<Series>& series) {
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (xmin > xmax) { xmin = 0; xmax = 1; ymin = 0; ymax = 1; }
  if (ymax - ymin < 1e-12) { ymax += 1.0; ymin -= 1.0; }
  if (xmax - xmin < 1e-12) xmax = xmin + 1.0;
  auto X = [&](double x) {
    return kPad + (x - xmin) / (xmax - xmin) * (kW - 2 * kPad);
  };
  auto Y = [&](double y) {
    return kH - kPad - (y - ymin) / (ymax - ymin) * (kH - 2 * kPad);
  };
  std::ofstream out(svg_path);
  if (!out) throw io_error("cannot write " + svg_path);
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << kW
      << "' height='" << kH << "'>\n";
  out << "<rect width='100%' height='100%' fill='white'/>\n";
  out << "<text x='" << kW / 2 << "' y='24' text-anchor='middle' "
      << "font-family='sans-serif' font-size='15'>" << title << "</text>\n";
  out << "<line x1='" << kPad << "' y1='" << kH - kPad << "' x2='" << kW - kPad
      << "' y2='" << kH - kPad << "' stroke='black'/>\n";
  out << "<line x1='" << kPad << "' y1='" << kPad << "' x2='" << kPad
      << "' y2='" << kH - kPad << "' stroke='black'/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double yv = ymin + (ymax - ymin) * t / 4.0;
    out << "<text x='" << kPad - 6 << "' y='" << Y(yv) + 4
        << "' text-anchor='end' font-family='sans-serif' font-size='10'>"
        << yv << "</text>\n";
    const double xv = xmin + (xmax - xmin) * t / 4.0;
    out << "<text x='" << X(xv) << "' y='" << kH - kPad + 16
        << "' text-anchor='middle' font-family='sans-serif' font-size='10'>"
        << xv << "</text>\n";
  }
  int ci = 0;
  for (const auto& s : series) {
    out << "<polyline fill='none' stroke='" << kColors[ci % 6]
        << "' stroke-width='1.5' points='";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      out << X(s.x[i]) << ',' << Y(s.y[i]) << ' ';
    out << "'/>\n";
    out << "<text x='" << kW - kPad << "' y='" << kPad + 14 * ci
        << "' text-anchor='end' font-family='sans-serif' font-size='11' fill='"
        << kColors[ci % 6] << "'>" << s.name << "</text>\n";
    ++ci;
  }
  out << "</svg>\n";
}

void write_bar_chart(const std::string& svg_path, const std::string& title,
                     const std::vector<std::string>& labels,
                     const std::vector<double>& values) {
  double vmax = 1e-12;
  for (double v : values) vmax = std::max(vmax, v);
  std::ofstream out(svg_path);
  if (!out) throw io_error("cannot write " + svg_path);
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << kW
      << "' height='" << kH << "'>\n";
  out << "<rect width='100%' height='100%' fill='white'/>\n";
  out << "<text x='" << kW / 2 << "' y='24' text-anchor='middle' "
      << "font-family='sans-serif' font-size='15'>" << title << "</text>\n";
  const double span = double(kW - 2 * kPad) / double(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double h = values[i] / vmax * (kH - 2 * kPad);
    const double x = kPad + double(i) * span + span * 0.15;
    out << "<rect x='" << x << "' y='" << kH - kPad - h << "' width='"
        << span * 0.7 << "' height='" << h << "' fill='" << kColors[i % 6]
        << "'/>\n";
    out << "<text x='" << x + span * 0.35 << "' y='" << kH - kPad + 14
        << "' text-anchor='middle' font-family='sans-serif' font-size='10'>"
        << labels[i] << "</text>\n";
    out << "<text x='" << x + span * 0.35 << "' y='" << kH - kPad - h - 4
        << "' text-anchor='middle' font-family='sans-serif' font-size='10'>"
        << values[i] << "</text>\n";
  }
  out << "</svg>\n";
}

void write_series_csv(const std::string& path,
                      const std::vector<Series>& series) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write " + path);
  out << "series,x,y\n";
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i)
      out << s.name << ',' << s.x[i] << ',' << s.y[i] << '\n';
}

}  // namespace coc
