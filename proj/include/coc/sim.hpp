#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "coc/lang.hpp"

namespace coc {

enum class Domain : std::uint8_t { SIM, REAL };
const char* to_string(Domain d);

enum class ScenarioCategory : std::uint8_t {
  Normal,
  PedestrianIntrusion,
  Fog,
  Rain,
  NearMiss,
  TrafficJam,
  Accident,
  CutIn,
  OppositeIntrusion,
  UTurn,
  Construction,
  BicycleIntrusion,
  LaneMerge,
  NoLightIntersection,
  LeftMerge,
};
constexpr int kNumCategories = 15;
const char* to_string(ScenarioCategory c);

// Rare-event categories withheld from the REAL training split.
bool is_rare_event(ScenarioCategory c);

// Category probabilities. The SIM default follows the scenario mixture the
// sim-domain corpus is built from; the REAL training default holds only
// normal/fog/rain with rare events at probability zero.
struct ScenarioMix {
  std::array<double, kNumCategories> p{};

  void validate() const;  // probabilities sum to 1 +- 1e-9
  static ScenarioMix sim_default();
  static ScenarioMix real_train_default();
  // test split: rare_quota mass spread over the rare categories, the rest
  // over normal/fog/rain
  static ScenarioMix real_test_default(double rare_quota);
};

struct Pose {
  double x = 0, y = 0, heading = 0;
  bool operator==(const Pose&) const = default;
};

struct EgoState {
  double x = 0, y = 0, heading = 0, speed = 0;
};

struct AgentState {
  AgentKind kind = AgentKind::Car;
  Pose pose;  // ego frame of the owning frame
  double speed = 0;
  double length = 4.2, width = 1.8;
  ViewTag view_tag = ViewTag::CAM_FRONT;
  std::array<int, 4> pixel_bbox{};  // view coordinates, within bounds
};

constexpr int kViewC = 3, kViewH = 16, kViewW = 16;
constexpr int kViewSize = kViewC * kViewH * kViewW;
constexpr double kFrameDt = 0.5;  // 2 Hz keyframes

struct Frame {
  double timestamp_s = 0;
  EgoState ego;  // world frame
  std::vector<AgentState> agents;
  std::vector<float> views;  // 6 x C x H x W, values in [0,1]
  std::array<std::pair<double, double>, 6> gt_trajectory;  // ego frame, 0.5 s
  // agent poses at the six future horizons, ego frame of this frame
  std::vector<std::array<Pose, 6>> agent_futures;
  CoCAnswer gt_answer;
  Domain domain = Domain::SIM;
  ScenarioCategory category = ScenarioCategory::Normal;

  float view_at(int view, int c, int h, int w) const {
    return views[std::size_t(((view * kViewC + c) * kViewH + h) * kViewW + w)];
  }
};

struct Clip {
  std::uint64_t seed = 0;
  ScenarioCategory category = ScenarioCategory::Normal;
  std::vector<Frame> frames;
};

struct GenConfig {
  // REAL-domain style transform: out = clamp(x*(gain_c + amp*field) + bias_c)
  std::array<double, 3> style_gain{0.86, 1.08, 0.94};
  std::array<double, 3> style_bias{0.05, 0.02, 0.04};
  double style_noise_amp = 0.05;
};

// Deterministic kinematically-consistent clip at 2 Hz. The category is
// sampled from the mix; the category-defining event is realized in-world.
// REAL-domain views pass through the style transform.
Clip generate_clip(std::uint64_t seed, Domain domain, const ScenarioMix& mix,
                   int n_frames, const GenConfig& cfg = {});

// Fixed invertible style transform on one 6-view raster block. The noise
// field is zero-mean and multiplies the input, so a zero raster maps to the
// bias alone and constant rasters shift exactly by gain*c + bias.
std::vector<float> domain_shift(const std::vector<float>& views,
                                std::uint64_t seed, int frame_index,
                                const GenConfig& cfg = {});

struct Dataset {
  std::uint32_t version = 1;
  Domain domain = Domain::SIM;
  ScenarioMix mix;
  std::uint64_t gen_seed = 0;
  std::vector<Clip> clips;

  std::size_t frame_count() const;
};

// Generates clip_count clips from sequential per-clip seeds derived from
// gen_seed.
Dataset generate_dataset(std::uint64_t gen_seed, Domain domain,
                         const ScenarioMix& mix, int clip_count, int n_frames,
                         const GenConfig& cfg = {});

// Versioned, checksummed container; read(write(x)) == x bitwise.
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace coc
