#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "coc/common.hpp"

namespace coc {

enum class ViewTag : std::uint8_t {
  CAM_FRONT,
  CAM_FRONT_LEFT,
  CAM_FRONT_RIGHT,
  CAM_BACK,
  CAM_BACK_LEFT,
  CAM_BACK_RIGHT,
};
constexpr int kNumViews = 6;

enum class AgentKind : std::uint8_t { Car, Pedestrian, Bicycle, Obstacle };

enum class MotionStatus : std::uint8_t {
  Approaching,
  MovingAway,
  Static,
  Crossing,
};

enum class NextAction : std::uint8_t {
  Proceed,
  SlowDown,
  Stop,
  CrossRoad,
  Turn,
};

enum class Threat : std::uint8_t { None, Low, High };

enum class EgoAction : std::uint8_t {
  KeepSpeed,
  Accelerate,
  Decelerate,
  Stop,
  TurnLeft,
  TurnRight,
  Yield,
};

const char* to_string(ViewTag v);
const char* to_string(AgentKind k);

struct PerceivedObject {
  AgentKind kind = AgentKind::Car;
  ViewTag view = ViewTag::CAM_FRONT;
  std::array<int, 4> bbox{};  // x1,y1,x2,y2 in view pixels
  MotionStatus motion = MotionStatus::Static;
};

// Structured chain-of-causality record. Section order is fixed:
// perception -> prediction -> threat -> plan -> trajectory.
struct CoCAnswer {
  std::vector<PerceivedObject> perception;  // closest object first
  NextAction closest_next_action = NextAction::Proceed;
  Threat threat = Threat::None;
  EgoAction ego_action = EgoAction::KeepSpeed;
  std::vector<std::pair<double, double>> trajectory;  // 6 waypoints, 0.1 m

  // presence flags; the parser clears these for missing sections
  bool has_perception = true;
  bool has_prediction = true;
  bool has_threat = true;
  bool has_plan = true;

  bool has_trajectory() const { return trajectory.size() == 6; }
  // throws contract_error when an invariant is broken
  void validate() const;
};

bool operator==(const PerceivedObject& a, const PerceivedObject& b);
bool operator==(const CoCAnswer& a, const CoCAnswer& b);

// Threat clause + ego-action clause from one source frame, nothing else.
struct CachedInstruction {
  Threat threat = Threat::None;
  EgoAction ego_action = EgoAction::KeepSpeed;
  int source_frame = -1;

  std::string text() const;
  bool operator==(const CachedInstruction& o) const {
    return threat == o.threat && ego_action == o.ego_action;
  }
};

// Closed token table loaded from the versioned vocabulary file. Every
// generable answer tokenizes with zero unknown tokens.
class Vocabulary {
 public:
  static const Vocabulary& instance();           // ships with the repo
  static Vocabulary load(const std::string& path);

  int id(const std::string& token) const;        // vocab_error when unknown
  std::optional<int> try_id(const std::string& token) const;
  const std::string& token(int id) const;
  int size() const { return int(tokens_.size()); }
  std::uint64_t version_hash() const { return version_hash_; }

  int pad() const { return pad_; }
  int bos() const { return bos_; }
  int eos() const { return eos_; }
  int sep() const { return sep_; }
  int none() const { return none_; }

 private:
  std::vector<std::string> tokens_;
  std::vector<std::pair<std::string, int>> index_;  // sorted for lookup
  std::uint64_t version_hash_ = 0;
  int pad_ = -1, bos_ = -1, eos_ = -1, sep_ = -1, none_ = -1;
};

// Word/punctuation/digit-level tokenization. Words are matched
// case-insensitively; numbers split into sign, digit and point tokens.
std::vector<int> tokenize(const std::string& text, const Vocabulary& v);

// Canonical text from token ids: sentence-initial capitalization, no space
// before closing punctuation. Specials are dropped.
std::string detokenize(const std::vector<int>& ids, const Vocabulary& v);

// Canonical template text of a valid answer; parse(render(a)) == a.
std::string render_answer(const CoCAnswer& a);

// Keeps only the threat and ego-action clauses (the reasoning sections are
// dropped); <= 20 tokens by construction.
CachedInstruction filter_answer(const CoCAnswer& a, int source_frame = -1);

struct ParseResult {
  CoCAnswer answer;
  std::vector<std::string> diagnostics;  // one entry per malformed section
  bool clean() const { return diagnostics.empty(); }
};

// Robust parser: never throws on garble, reports malformed sections
// individually. A trajectory that fails to parse is marked absent.
ParseResult parse_answer(const std::string& text);
ParseResult parse_answer_tokens(const std::vector<int>& ids,
                                const Vocabulary& v);

// Fixed end-to-end prompt templates shipped next to the vocabulary.
class PromptSet {
 public:
  static const PromptSet& instance();
  static PromptSet load(const std::string& path);
  const std::vector<std::string>& templates() const { return templates_; }
  const std::string& default_prompt() const { return templates_.front(); }
  bool contains(const std::string& prompt) const;

 private:
  std::vector<std::string> templates_;
};

// [BOS, cached tokens (or the none marker on clip-initial frames), SEP,
// prompt tokens]. The prompt must come from the template set.
std::vector<int> assemble_prompt(const std::optional<CachedInstruction>& cached,
                                 const std::string& e2e_prompt,
                                 const Vocabulary& v);

// Hard budget constants the model layer builds its fixed input window from.
constexpr int kMaxCachedTokens = 20;
constexpr int kMaxPromptTokens = 48;

}  // namespace coc
