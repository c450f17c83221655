#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "coc/lang.hpp"
#include "coc/sim.hpp"

namespace coc {

using Waypoints = std::array<std::pair<double, double>, 6>;

// Planning metrics use the average-over-average convention: a value per
// horizon {0.5..3.0 s}, then the mean across the six horizons.
struct AdeResult {
  double ade = 0.0;
  std::array<double, 6> per_horizon{};
  int n_frames = 0;
};

// Absent predictions are scored at worst_case_displacement per waypoint so
// unparseable outputs cannot improve a comparison.
AdeResult ade(const std::vector<std::optional<Waypoints>>& preds,
              const std::vector<Waypoints>& gts,
              double worst_case_displacement = 10.0);

struct CollisionFrame {
  std::optional<Waypoints> pred;
  // agent poses at the six horizons in the frame's ego coordinates
  std::vector<std::array<Pose, 6>> agent_futures;
  std::vector<std::pair<double, double>> agent_extents;  // length, width
};

struct CollisionResult {
  double rate = 0.0;                 // fraction of frames, averaged over horizons
  std::array<double, 6> per_horizon{};
  int n_frames = 0;
};

// A frame collides at horizon k when the ego box placed on any predicted
// waypoint 1..k (heading interpolated from the segment direction) overlaps
// any agent box at that waypoint's time. Absent predictions count as
// colliding.
CollisionResult collision_rate(const std::vector<CollisionFrame>& frames,
                               double ego_length = 4.2,
                               double ego_width = 1.8);

// Oriented-box overlap via separating axes; used by the collision metric and
// by the world-consistency checks.
bool boxes_overlap(const Pose& a, double la, double wa, const Pose& b,
                   double lb, double wb);

// ---- language metrics --------------------------------------------------------

using TokenSeq = std::vector<std::string>;

// Clipped n-gram precision with geometric mean over 1..n and brevity
// penalty. Zero when any order has zero matches (no smoothing).
double bleu_n(const TokenSeq& candidate, const std::vector<TokenSeq>& references,
              int n, std::string* diagnostic = nullptr);

// LCS F-measure, recall-weighted with beta = 1.2.
double rouge_l(const TokenSeq& candidate, const TokenSeq& reference,
               std::string* diagnostic = nullptr, double beta = 1.2);

// TF-IDF n-gram cosine similarity averaged over n = 1..4 and scaled by 10.
// The idf table comes from the reference corpus (>= 2 documents required);
// n-grams unseen in the corpus take document frequency 1.
double cider(const std::vector<TokenSeq>& candidates,
             const std::vector<TokenSeq>& references);

// accuracy: percent of multiple-choice slots (per-object motion status,
// closest next action, threat, ego action) exactly equal, over ground-truth
// slots. match: percent of ground-truth perception objects matched by a
// prediction with the same view tag and bbox IoU >= 0.5.
std::pair<double, double> accuracy_match(const std::vector<CoCAnswer>& preds,
                                         const std::vector<CoCAnswer>& gts);

// inclusive-pixel IoU of two view-space boxes
double bbox_iou(const std::array<int, 4>& a, const std::array<int, 4>& b);

struct PlanEval {
  AdeResult displacement;
  CollisionResult collision;
};

struct LangEval {
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  double cider = 0.0;
  double accuracy = 0.0;
  double match = 0.0;
  int n_pairs = 0;
  int parse_failures = 0;
};

}  // namespace coc
