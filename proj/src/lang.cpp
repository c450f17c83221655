#include "coc/lang.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace coc {

namespace {

std::string lower(std::string s) {
  for (char& c : s) c = char(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string data_file(const char* name) {
  if (const char* env = std::getenv("COC_DATA_DIR"))
    return std::string(env) + "/" + name;
#ifdef COCDRIVE_DATA_DIR
  return std::string(COCDRIVE_DATA_DIR) + "/" + name;
#else
  return std::string("data/") + name;
#endif
}

const char* view_phrase(ViewTag v) {
  switch (v) {
    case ViewTag::CAM_FRONT: return "in front of the ego vehicle";
    case ViewTag::CAM_FRONT_LEFT: return "to the front left of the ego vehicle";
    case ViewTag::CAM_FRONT_RIGHT: return "to the front right of the ego vehicle";
    case ViewTag::CAM_BACK: return "behind the ego vehicle";
    case ViewTag::CAM_BACK_LEFT: return "to the back left of the ego vehicle";
    case ViewTag::CAM_BACK_RIGHT: return "to the back right of the ego vehicle";
  }
  return "";
}

const char* kind_word(AgentKind k) {
  switch (k) {
    case AgentKind::Car: return "car";
    case AgentKind::Pedestrian: return "pedestrian";
    case AgentKind::Bicycle: return "bicycle";
    case AgentKind::Obstacle: return "obstacle";
  }
  return "";
}

const char* kind_article(AgentKind k) {
  return k == AgentKind::Obstacle ? "an" : "a";
}

const char* motion_phrase(MotionStatus m) {
  switch (m) {
    case MotionStatus::Approaching: return "approaching";
    case MotionStatus::MovingAway: return "moving away";
    case MotionStatus::Static: return "static";
    case MotionStatus::Crossing: return "crossing";
  }
  return "";
}

const char* next_action_phrase(NextAction a) {
  switch (a) {
    case NextAction::Proceed: return "proceed";
    case NextAction::SlowDown: return "slow down";
    case NextAction::Stop: return "stop";
    case NextAction::CrossRoad: return "cross the road";
    case NextAction::Turn: return "turn";
  }
  return "";
}

const char* threat_clause(Threat t) {
  switch (t) {
    case Threat::None: return "There is no safety threat";
    case Threat::Low: return "There is a low safety threat";
    case Threat::High: return "There is a high safety threat";
  }
  return "";
}

const char* plan_phrase(EgoAction a) {
  switch (a) {
    case EgoAction::KeepSpeed: return "maintain its current speed";
    case EgoAction::Accelerate: return "accelerate";
    case EgoAction::Decelerate: return "slow down";
    case EgoAction::Stop: return "come to a stop";
    case EgoAction::TurnLeft: return "turn left";
    case EgoAction::TurnRight: return "turn right";
    case EgoAction::Yield: return "yield to the other agent";
  }
  return "";
}

const char* cached_action_clause(EgoAction a) {
  switch (a) {
    case EgoAction::KeepSpeed: return "the vehicle maintains its current speed";
    case EgoAction::Accelerate: return "the vehicle accelerates";
    case EgoAction::Decelerate: return "the vehicle slows down";
    case EgoAction::Stop: return "the vehicle comes to a stop";
    case EgoAction::TurnLeft: return "the vehicle turns left";
    case EgoAction::TurnRight: return "the vehicle turns right";
    case EgoAction::Yield: return "the vehicle yields to the other agent";
  }
  return "";
}

// one-decimal fixed point; -0.0 never rendered
std::string fmt_fixed(double v) {
  long long q = llround(v * 10.0);
  std::string s;
  if (q < 0) {
    s += '-';
    q = -q;
  }
  s += std::to_string(q / 10);
  s += '.';
  s += std::to_string(q % 10);
  return s;
}

bool is_digit_tok(const std::string& t) {
  return t.size() == 1 && std::isdigit(static_cast<unsigned char>(t[0]));
}

}  // namespace

const char* to_string(ViewTag v) {
  switch (v) {
    case ViewTag::CAM_FRONT: return "CAM_FRONT";
    case ViewTag::CAM_FRONT_LEFT: return "CAM_FRONT_LEFT";
    case ViewTag::CAM_FRONT_RIGHT: return "CAM_FRONT_RIGHT";
    case ViewTag::CAM_BACK: return "CAM_BACK";
    case ViewTag::CAM_BACK_LEFT: return "CAM_BACK_LEFT";
    case ViewTag::CAM_BACK_RIGHT: return "CAM_BACK_RIGHT";
  }
  return "?";
}

const char* to_string(AgentKind k) { return kind_word(k); }

void CoCAnswer::validate() const {
  if (threat == Threat::High && ego_action != EgoAction::Decelerate &&
      ego_action != EgoAction::Stop && ego_action != EgoAction::Yield)
    throw contract_error(
        "answer invariant violated: high threat requires decelerate, stop or "
        "yield");
  if (!has_trajectory())
    throw contract_error("answer invariant violated: trajectory must hold 6 "
                         "waypoints, got " +
                         std::to_string(trajectory.size()));
  for (const auto& o : perception) {
    if (o.bbox[0] > o.bbox[2] || o.bbox[1] > o.bbox[3])
      throw contract_error("answer invariant violated: degenerate bbox");
  }
}

bool operator==(const PerceivedObject& a, const PerceivedObject& b) {
  return a.kind == b.kind && a.view == b.view && a.bbox == b.bbox &&
         a.motion == b.motion;
}

bool operator==(const CoCAnswer& a, const CoCAnswer& b) {
  return a.perception == b.perception &&
         a.closest_next_action == b.closest_next_action &&
         a.threat == b.threat && a.ego_action == b.ego_action &&
         a.trajectory == b.trajectory;
}

std::string CachedInstruction::text() const {
  std::string s = threat_clause(threat);
  s += ", ";
  s += cached_action_clause(ego_action);
  s += ".";
  return s;
}

// ---- vocabulary ------------------------------------------------------------

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open vocabulary file " + path);
  Vocabulary v;
  std::string content((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
  v.version_hash_ = fnv1a(content);
  std::istringstream ss(content);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty() || line[0] == '#') continue;
    v.tokens_.push_back(line);
  }
  if (v.tokens_.size() >= 512)
    throw config_error("vocabulary must stay below 512 tokens");
  for (int i = 0; i < int(v.tokens_.size()); ++i)
    v.index_.emplace_back(lower(v.tokens_[std::size_t(i)]), i);
  std::sort(v.index_.begin(), v.index_.end());
  v.pad_ = v.id("<pad>");
  v.bos_ = v.id("<bos>");
  v.eos_ = v.id("<eos>");
  v.sep_ = v.id("<sep>");
  v.none_ = v.id("<none>");
  return v;
}

const Vocabulary& Vocabulary::instance() {
  static const Vocabulary v = load(data_file("vocab.txt"));
  return v;
}

std::optional<int> Vocabulary::try_id(const std::string& token) const {
  const std::string key = lower(token);
  auto it = std::lower_bound(
      index_.begin(), index_.end(), key,
      [](const auto& a, const std::string& b) { return a.first < b; });
  if (it == index_.end() || it->first != key) return std::nullopt;
  return it->second;
}

int Vocabulary::id(const std::string& token) const {
  if (auto i = try_id(token)) return *i;
  throw vocab_error("unknown token: " + token);
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size())
    throw vocab_error("token id " + std::to_string(id) + " out of range");
  return tokens_[std::size_t(id)];
}

// ---- tokenizer -------------------------------------------------------------

namespace {

// raw lexical split: words, single digits, punctuation
std::vector<std::string> lex(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) {
      out.push_back(word);
      word.clear();
    }
  };
  for (char c : text) {
    const unsigned char u = static_cast<unsigned char>(c);
    if (std::isalpha(u) || c == '_') {
      word += c;
    } else if (c == '<' || c == '>') {
      // specials like <bos> keep their brackets
      flush();
      out.push_back(std::string(1, c));
    } else if (std::isdigit(u)) {
      flush();
      out.push_back(std::string(1, c));
    } else if (std::isspace(u)) {
      flush();
    } else {
      flush();
      out.push_back(std::string(1, c));
    }
  }
  flush();
  // re-join special markers: "<" "pad" ">" -> "<pad>"
  std::vector<std::string> merged;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] == "<" && i + 2 < out.size() && out[i + 2] == ">" &&
        (out[i + 1] == "pad" || out[i + 1] == "bos" || out[i + 1] == "eos" ||
         out[i + 1] == "sep" || out[i + 1] == "none")) {
      merged.push_back("<" + out[i + 1] + ">");
      i += 2;
    } else {
      merged.push_back(out[i]);
    }
  }
  return merged;
}

std::vector<int> tokenize_impl(const std::string& text, const Vocabulary& v,
                               std::vector<std::string>* unknown) {
  std::vector<int> ids;
  for (const auto& piece : lex(text)) {
    if (auto id = v.try_id(piece)) {
      ids.push_back(*id);
    } else if (unknown) {
      unknown->push_back(piece);
    } else {
      throw vocab_error("unknown token: " + piece);
    }
  }
  return ids;
}

}  // namespace

std::vector<int> tokenize(const std::string& text, const Vocabulary& v) {
  return tokenize_impl(text, v, nullptr);
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& v) {
  std::string out;
  bool cap_next = true;
  std::string prev;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::string& t = v.token(ids[i]);
    if (t.size() >= 2 && t.front() == '<' && t.back() == '>') continue;  // specials
    bool space = !out.empty();
    const bool digit = is_digit_tok(t);
    if (t == "," || t == ")" || t == ">" || t == ".") space = false;
    else if (prev == "(" || prev == "<") space = false;
    else if (digit && (is_digit_tok(prev) || prev == "-" || prev == ".")) space = false;
    if (space) out += ' ';

    std::string piece = t;
    if (cap_next && std::isalpha(static_cast<unsigned char>(piece[0]))) {
      piece[0] = char(std::toupper(static_cast<unsigned char>(piece[0])));
      cap_next = false;
    } else if (std::isalpha(static_cast<unsigned char>(piece[0]))) {
      cap_next = false;
    }
    if (t == ".") {
      const bool decimal =
          is_digit_tok(prev) && i + 1 < ids.size() &&
          is_digit_tok(v.token(ids[i + 1]));
      if (!decimal) cap_next = true;
    }
    out += piece;
    prev = t;
  }
  return out;
}

// ---- rendering -------------------------------------------------------------

std::string render_answer(const CoCAnswer& a) {
  a.validate();
  std::ostringstream os;
  for (const auto& o : a.perception) {
    os << "There is " << kind_article(o.kind) << ' ' << kind_word(o.kind)
       << ' ' << view_phrase(o.view) << ", with coordinates <"
       << to_string(o.view) << ", " << o.bbox[0] << ", " << o.bbox[1] << ", "
       << o.bbox[2] << ", " << o.bbox[3] << ">. ";
    os << "The " << kind_word(o.kind) << " is " << motion_phrase(o.motion)
       << ". ";
  }
  if (!a.perception.empty()) {
    os << "The closest " << kind_word(a.perception.front().kind) << " will "
       << next_action_phrase(a.closest_next_action) << ". ";
  }
  os << threat_clause(a.threat) << ". ";
  os << "The ego vehicle should " << plan_phrase(a.ego_action) << ". ";
  os << "The future trajectory is ";
  for (std::size_t i = 0; i < a.trajectory.size(); ++i) {
    if (i) os << ", ";
    os << '(' << fmt_fixed(a.trajectory[i].first) << ", "
       << fmt_fixed(a.trajectory[i].second) << ')';
  }
  os << '.';
  return os.str();
}

CachedInstruction filter_answer(const CoCAnswer& a, int source_frame) {
  if (!a.has_plan)
    throw contract_error("filter_answer: answer has no plan section");
  CachedInstruction c;
  c.threat = a.threat;
  c.ego_action = a.ego_action;
  c.source_frame = source_frame;
  return c;
}

// ---- parsing ---------------------------------------------------------------

namespace {

struct Sentence {
  std::vector<std::string> toks;  // lowercased token strings
  bool has(const std::string& w) const {
    return std::find(toks.begin(), toks.end(), w) != toks.end();
  }
  std::size_t find(const std::string& w) const {
    for (std::size_t i = 0; i < toks.size(); ++i)
      if (toks[i] == w) return i;
    return toks.size();
  }
};

// numbers assembled from sign/digit/point tokens, constructed as integer
// decimals over ten so values compare bitwise with quantized inputs
std::vector<double> numbers_of(const Sentence& s, std::size_t from = 0) {
  std::vector<double> out;
  std::size_t i = from;
  while (i < s.toks.size()) {
    bool neg = false;
    std::size_t j = i;
    if (s.toks[j] == "-" && j + 1 < s.toks.size() &&
        is_digit_tok(s.toks[j + 1])) {
      neg = true;
      ++j;
    }
    if (j < s.toks.size() && is_digit_tok(s.toks[j])) {
      long long whole = 0;
      while (j < s.toks.size() && is_digit_tok(s.toks[j])) {
        whole = whole * 10 + (s.toks[j][0] - '0');
        ++j;
      }
      long long frac = 0;
      int frac_digits = 0;
      if (j + 1 < s.toks.size() && s.toks[j] == "." &&
          is_digit_tok(s.toks[j + 1])) {
        ++j;
        while (j < s.toks.size() && is_digit_tok(s.toks[j])) {
          frac = frac * 10 + (s.toks[j][0] - '0');
          ++frac_digits;
          ++j;
        }
      }
      double denom = 1.0;
      for (int d = 0; d < frac_digits; ++d) denom *= 10.0;
      double val = (double(whole) * denom + double(frac)) / denom;
      out.push_back(neg ? -val : val);
      i = j;
    } else {
      ++i;
    }
  }
  return out;
}

std::optional<AgentKind> kind_of(const Sentence& s) {
  if (s.has("car")) return AgentKind::Car;
  if (s.has("pedestrian")) return AgentKind::Pedestrian;
  if (s.has("bicycle")) return AgentKind::Bicycle;
  if (s.has("obstacle")) return AgentKind::Obstacle;
  return std::nullopt;
}

std::optional<ViewTag> view_of(const Sentence& s) {
  for (const auto& t : s.toks) {
    for (int v = 0; v < kNumViews; ++v)
      if (t == lower(to_string(ViewTag(v)))) return ViewTag(v);
  }
  return std::nullopt;
}

}  // namespace

ParseResult parse_answer_tokens(const std::vector<int>& ids,
                                const Vocabulary& v) {
  ParseResult res;
  CoCAnswer& a = res.answer;
  a.perception.clear();
  a.trajectory.clear();
  a.has_perception = a.has_prediction = a.has_threat = a.has_plan = false;

  // split into sentences on non-decimal periods
  std::vector<Sentence> sentences;
  Sentence cur;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::string& t = v.token(ids[i]);
    if (t == "<bos>" || t == "<eos>" || t == "<pad>" || t == "<sep>" ||
        t == "<none>")
      continue;
    const std::string lt = lower(t);
    if (lt == ".") {
      const bool decimal = !cur.toks.empty() && is_digit_tok(cur.toks.back()) &&
                           i + 1 < ids.size() &&
                           is_digit_tok(v.token(ids[i + 1]));
      if (decimal) {
        cur.toks.push_back(lt);
      } else {
        if (!cur.toks.empty()) sentences.push_back(std::move(cur));
        cur = Sentence{};
      }
    } else {
      cur.toks.push_back(lt);
    }
  }
  if (!cur.toks.empty()) sentences.push_back(std::move(cur));

  bool saw_trajectory_section = false;
  for (const auto& s : sentences) {
    if (s.has("trajectory")) {
      saw_trajectory_section = true;
      auto nums = numbers_of(s, s.find("trajectory"));
      if (nums.size() == 12) {
        for (std::size_t i = 0; i < 12; i += 2)
          a.trajectory.emplace_back(nums[i], nums[i + 1]);
      } else {
        res.diagnostics.push_back("trajectory: expected 6 waypoints, found " +
                                  std::to_string(nums.size() / 2));
      }
    } else if (s.has("should")) {
      const std::size_t p = s.find("should");
      EgoAction act = EgoAction::KeepSpeed;
      bool found = false;
      for (std::size_t i = p + 1; i < s.toks.size() && !found; ++i) {
        const std::string& w = s.toks[i];
        if (w == "maintain") { act = EgoAction::KeepSpeed; found = true; }
        else if (w == "accelerate") { act = EgoAction::Accelerate; found = true; }
        else if (w == "slow") { act = EgoAction::Decelerate; found = true; }
        else if (w == "come" || w == "stop") { act = EgoAction::Stop; found = true; }
        else if (w == "yield") { act = EgoAction::Yield; found = true; }
        else if (w == "turn") {
          if (i + 1 < s.toks.size() && s.toks[i + 1] == "right")
            act = EgoAction::TurnRight;
          else
            act = EgoAction::TurnLeft;
          found = true;
        }
      }
      if (found) {
        a.ego_action = act;
        a.has_plan = true;
      } else {
        res.diagnostics.push_back("plan: no recognizable ego action");
      }
    } else if (s.has("threat") && s.has("safety")) {
      if (s.has("no")) a.threat = Threat::None;
      else if (s.has("low")) a.threat = Threat::Low;
      else if (s.has("high")) a.threat = Threat::High;
      else {
        res.diagnostics.push_back("threat: no recognizable level");
        continue;
      }
      a.has_threat = true;
    } else if (s.has("coordinates")) {
      auto kind = kind_of(s);
      auto view = view_of(s);
      auto nums = numbers_of(s, s.find("coordinates"));
      if (kind && view && nums.size() >= 4) {
        PerceivedObject o;
        o.kind = *kind;
        o.view = *view;
        for (int i = 0; i < 4; ++i) o.bbox[std::size_t(i)] = int(nums[std::size_t(i)]);
        a.perception.push_back(o);
        a.has_perception = true;
      } else {
        res.diagnostics.push_back("perception: malformed object sentence");
      }
    } else if (s.has("closest") && s.has("will")) {
      NextAction act = NextAction::Proceed;
      bool found = false;
      const std::size_t p = s.find("will");
      for (std::size_t i = p + 1; i < s.toks.size() && !found; ++i) {
        const std::string& w = s.toks[i];
        if (w == "proceed") { act = NextAction::Proceed; found = true; }
        else if (w == "slow") { act = NextAction::SlowDown; found = true; }
        else if (w == "stop") { act = NextAction::Stop; found = true; }
        else if (w == "cross") { act = NextAction::CrossRoad; found = true; }
        else if (w == "turn") { act = NextAction::Turn; found = true; }
      }
      if (found) {
        a.closest_next_action = act;
        a.has_prediction = true;
      } else {
        res.diagnostics.push_back("prediction: no recognizable next action");
      }
    } else if (s.has("approaching") || (s.has("moving") && s.has("away")) ||
               s.has("static") || s.has("crossing")) {
      if (a.perception.empty()) {
        res.diagnostics.push_back("motion: no preceding perceived object");
        continue;
      }
      MotionStatus m = MotionStatus::Static;
      if (s.has("approaching")) m = MotionStatus::Approaching;
      else if (s.has("moving")) m = MotionStatus::MovingAway;
      else if (s.has("crossing")) m = MotionStatus::Crossing;
      a.perception.back().motion = m;
    } else {
      res.diagnostics.push_back("unrecognized sentence");
    }
  }

  if (!a.has_threat) res.diagnostics.push_back("missing threat section");
  if (!a.has_plan) res.diagnostics.push_back("missing plan section");
  if (!saw_trajectory_section)
    res.diagnostics.push_back("missing trajectory section");
  return res;
}

ParseResult parse_answer(const std::string& text) {
  const Vocabulary& v = Vocabulary::instance();
  std::vector<std::string> unknown;
  std::vector<int> ids = tokenize_impl(text, v, &unknown);
  ParseResult res = parse_answer_tokens(ids, v);
  for (const auto& u : unknown)
    res.diagnostics.push_back("unknown token dropped: " + u);
  return res;
}

// ---- prompts ---------------------------------------------------------------

PromptSet PromptSet::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open prompt template file " + path);
  PromptSet p;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    p.templates_.push_back(line);
  }
  if (p.templates_.empty())
    throw config_error("prompt template file holds no templates");
  return p;
}

const PromptSet& PromptSet::instance() {
  static const PromptSet p = load(data_file("prompts.txt"));
  return p;
}

bool PromptSet::contains(const std::string& prompt) const {
  return std::find(templates_.begin(), templates_.end(), prompt) !=
         templates_.end();
}

std::vector<int> assemble_prompt(
    const std::optional<CachedInstruction>& cached,
    const std::string& e2e_prompt, const Vocabulary& v) {
  if (!PromptSet::instance().contains(e2e_prompt))
    throw config_error(
        "e2e prompt is not one of the fixed end-to-end templates");
  std::vector<int> out;
  out.push_back(v.bos());
  if (cached) {
    std::vector<int> ct = tokenize(cached->text(), v);
    if (int(ct.size()) > kMaxCachedTokens)
      throw contract_error("cached instruction exceeds " +
                           std::to_string(kMaxCachedTokens) + " tokens");
    out.insert(out.end(), ct.begin(), ct.end());
  } else {
    out.push_back(v.none());
  }
  out.push_back(v.sep());
  std::vector<int> pt = tokenize(e2e_prompt, v);
  if (int(pt.size()) > kMaxPromptTokens)
    throw contract_error("prompt exceeds " +
                         std::to_string(kMaxPromptTokens) + " tokens");
  out.insert(out.end(), pt.begin(), pt.end());
  return out;
}

}  // namespace coc
