#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "coc/train.hpp"

namespace coc {

// Config (de)serialization. Readers reject unknown keys so a typo in a
// config file cannot silently fall back to a default.
nlohmann::json vlm_config_to_json(const VlmConfig& cfg);
VlmConfig vlm_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct DataConfig {
  std::uint64_t seed = 7;
  int sim_clips = 240;
  int real_clips = 240;
  int test_clips = 48;
  int n_frames = 8;
  double rare_quota = 0.5;
  GenConfig gen;
};
nlohmann::json data_config_to_json(const DataConfig& cfg);
DataConfig data_config_from_json(const nlohmann::json& j);

// The CLI configuration file.
struct RunConfig {
  int version = 1;
  std::string out_dir = "runs/out";
  DataConfig data;
  VlmConfig model;
  TrainConfig train;
  std::string sim_train_path = "data/sim_train.ds";
  std::string real_train_path = "data/real_train.ds";
  std::string real_test_path = "data/real_test.ds";
  int lang_eval_frames = 48;

  static RunConfig defaults();
  std::uint64_t hash() const;
};
nlohmann::json run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

// ---- metrics report ------------------------------------------------------------

struct MetricsReport {
  int version = 1;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::string stage;
  std::string dataset;
  std::string arch;
  EvalSplits splits;
};
nlohmann::json report_to_json(const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& j);
void write_report(const MetricsReport& r, const std::string& path);
MetricsReport read_report(const std::string& path);

// ---- plots ----------------------------------------------------------------------

struct Series {
  std::string name;
  std::vector<double> x, y;
};
// simple self-contained vector plots; the numeric series goes next to them
// as csv
void write_line_chart(const std::string& svg_path, const std::string& title,
                      const std::vector<Series>& series);
void write_bar_chart(const std::string& svg_path, const std::string& title,
                     const std::vector<std::string>& labels,
                     const std::vector<double>& values);
void write_series_csv(const std::string& path,
                      const std::vector<Series>& series);

}  // namespace coc
