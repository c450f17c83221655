#include "coc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace coc {

AdeResult ade(const std::vector<std::optional<Waypoints>>& preds,
              const std::vector<Waypoints>& gts,
              double worst_case_displacement) {
  if (preds.size() != gts.size())
    throw contract_error("ade: prediction/ground-truth length mismatch");
  AdeResult r;
  r.n_frames = int(preds.size());
  if (preds.empty()) return r;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    std::array<double, 6> disp{};
    for (int j = 0; j < 6; ++j) {
      if (preds[i]) {
        const auto& [px, py] = (*preds[i])[std::size_t(j)];
        const auto& [gx, gy] = gts[i][std::size_t(j)];
        disp[std::size_t(j)] = std::hypot(px - gx, py - gy);
      } else {
        disp[std::size_t(j)] = worst_case_displacement;
      }
    }
    double acc = 0.0;
    for (int k = 0; k < 6; ++k) {
      acc += disp[std::size_t(k)];
      r.per_horizon[std::size_t(k)] += acc / double(k + 1);
    }
  }
  for (auto& h : r.per_horizon) h /= double(r.n_frames);
  for (double h : r.per_horizon) r.ade += h;
  r.ade /= 6.0;
  return r;
}

namespace {

// projects box corners onto an axis and checks interval overlap
bool overlap_on_axis(double ax, double ay, const Pose& a, double la, double wa,
                     const Pose& b, double lb, double wb) {
  auto project = [&](const Pose& p, double l, double w, double& lo,
                     double& hi) {
    const double c = std::cos(p.heading), s = std::sin(p.heading);
    const double cx[4] = {l / 2, l / 2, -l / 2, -l / 2};
    const double cy[4] = {w / 2, -w / 2, w / 2, -w / 2};
    lo = 1e300;
    hi = -1e300;
    for (int i = 0; i < 4; ++i) {
      const double x = p.x + cx[i] * c - cy[i] * s;
      const double y = p.y + cx[i] * s + cy[i] * c;
      const double t = x * ax + y * ay;
      lo = std::min(lo, t);
      hi = std::max(hi, t);
    }
  };
  double alo, ahi, blo, bhi;
  project(a, la, wa, alo, ahi);
  project(b, lb, wb, blo, bhi);
  return ahi >= blo && bhi >= alo;
}

}  // namespace

bool boxes_overlap(const Pose& a, double la, double wa, const Pose& b,
                   double lb, double wb) {
  const double axes[4][2] = {
      {std::cos(a.heading), std::sin(a.heading)},
      {-std::sin(a.heading), std::cos(a.heading)},
      {std::cos(b.heading), std::sin(b.heading)},
      {-std::sin(b.heading), std::cos(b.heading)},
  };
  for (const auto& ax : axes)
    if (!overlap_on_axis(ax[0], ax[1], a, la, wa, b, lb, wb)) return false;
  return true;
}

CollisionResult collision_rate(const std::vector<CollisionFrame>& frames,
                               double ego_length, double ego_width) {
  CollisionResult r;
  r.n_frames = int(frames.size());
  if (frames.empty()) return r;
  for (const auto& f : frames) {
    if (f.agent_futures.size() != f.agent_extents.size())
      throw contract_error("collision_rate: agent futures/extents mismatch");
    std::array<bool, 6> hit{};
    if (!f.pred) {
      hit.fill(true);  // unparseable plan scored as colliding
    } else {
      double prev_x = 0.0, prev_y = 0.0, heading = 0.0;
      for (int j = 0; j < 6; ++j) {
        const auto& [x, y] = (*f.pred)[std::size_t(j)];
        const double seg = std::hypot(x - prev_x, y - prev_y);
        if (seg > 0.05) heading = std::atan2(y - prev_y, x - prev_x);
        const Pose ego_box{x, y, heading};
        for (std::size_t a = 0; a < f.agent_futures.size() && !hit[std::size_t(j)]; ++a) {
          const Pose& ap = f.agent_futures[a][std::size_t(j)];
          if (boxes_overlap(ego_box, ego_length, ego_width, ap,
                            f.agent_extents[a].first,
                            f.agent_extents[a].second))
            hit[std::size_t(j)] = true;
        }
        prev_x = x;
        prev_y = y;
      }
    }
    bool any = false;
    for (int k = 0; k < 6; ++k) {
      any = any || hit[std::size_t(k)];
      if (any) r.per_horizon[std::size_t(k)] += 1.0;
    }
  }
  for (auto& h : r.per_horizon) h /= double(r.n_frames);
  for (double h : r.per_horizon) r.rate += h;
  r.rate /= 6.0;
  return r;
}

// ---- language metrics --------------------------------------------------------

namespace {

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts count_ngrams(const TokenSeq& toks, int n) {
  NgramCounts out;
  if (int(toks.size()) < n) return out;
  for (std::size_t i = 0; i + std::size_t(n) <= toks.size(); ++i)
    out[std::vector<std::string>(toks.begin() + long(i),
                                 toks.begin() + long(i) + n)]++;
  return out;
}

}  // namespace

double bleu_n(const TokenSeq& candidate, const std::vector<TokenSeq>& references,
              int n, std::string* diagnostic) {
  if (n < 1 || n > 4) throw contract_error("bleu order must lie in 1..4");
  if (references.empty()) throw contract_error("bleu needs a reference");
  if (candidate.empty()) {
    if (diagnostic) *diagnostic = "empty candidate";
    return 0.0;
  }
  double log_sum = 0.0;
  for (int order = 1; order <= n; ++order) {
    const NgramCounts cand = count_ngrams(candidate, order);
    NgramCounts max_ref;
    for (const auto& ref : references) {
      for (const auto& [gram, cnt] : count_ngrams(ref, order)) {
        int& cur = max_ref[gram];
        cur = std::max(cur, cnt);
      }
    }
    long long clipped = 0, total = 0;
    for (const auto& [gram, cnt] : cand) {
      total += cnt;
      auto it = max_ref.find(gram);
      if (it != max_ref.end()) clipped += std::min(cnt, it->second);
    }
    if (total == 0 || clipped == 0) {
      if (diagnostic) *diagnostic = "no n-gram overlap at order " +
                                    std::to_string(order);
      return 0.0;
    }
    log_sum += std::log(double(clipped) / double(total));
  }
  const double precision = std::exp(log_sum / double(n));

  // brevity penalty against the closest reference length
  const long long c = (long long)candidate.size();
  long long best_r = (long long)references[0].size();
  for (const auto& ref : references) {
    const long long rl = (long long)ref.size();
    if (std::llabs(rl - c) < std::llabs(best_r - c) ||
        (std::llabs(rl - c) == std::llabs(best_r - c) && rl < best_r))
      best_r = rl;
  }
  const double bp = c >= best_r ? 1.0 : std::exp(1.0 - double(best_r) / double(c));
  return bp * precision;
}

double rouge_l(const TokenSeq& candidate, const TokenSeq& reference,
               std::string* diagnostic, double beta) {
  if (candidate.empty() || reference.empty()) {
    if (diagnostic) *diagnostic = "empty input";
    return 0.0;
  }
  const std::size_t n = candidate.size(), m = reference.size();
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      if (candidate[i - 1] == reference[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = prev[m];
  if (lcs == 0.0) return 0.0;
  const double p = lcs / double(n);
  const double r = lcs / double(m);
  const double b2 = beta * beta;
  return (1.0 + b2) * r * p / (r + b2 * p);
}

double cider(const std::vector<TokenSeq>& candidates,
             const std::vector<TokenSeq>& references) {
  if (candidates.size() != references.size())
    throw contract_error("cider: candidate/reference count mismatch");
  if (references.size() < 2)
    throw contract_error("cider needs a corpus of at least 2 documents for idf");
  const double N = double(references.size());

  double total = 0.0;
  for (int order = 1; order <= 4; ++order) {
    // document frequencies over the reference corpus
    NgramCounts df;
    for (const auto& ref : references)
      for (const auto& [gram, _] : count_ngrams(ref, order)) df[gram]++;
    auto idf = [&](const std::vector<std::string>& gram) {
      auto it = df.find(gram);
      const double d = it == df.end() ? 1.0 : double(it->second);
      return std::log(N / d);
    };
    auto tfidf = [&](const TokenSeq& doc) {
      NgramCounts counts = count_ngrams(doc, order);
      double total_cnt = 0.0;
      for (const auto& [_, c] : counts) total_cnt += c;
      std::map<std::vector<std::string>, double> vec;
      if (total_cnt == 0.0) return vec;
      for (const auto& [gram, c] : counts)
        vec[gram] = (double(c) / total_cnt) * idf(gram);
      return vec;
    };

    double order_sum = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const auto cv = tfidf(candidates[i]);
      const auto rv = tfidf(references[i]);
      double dot = 0.0, nc = 0.0, nr = 0.0;
      for (const auto& [g, x] : cv) {
        nc += x * x;
        auto it = rv.find(g);
        if (it != rv.end()) dot += x * it->second;
      }
      for (const auto& [_, x] : rv) nr += x * x;
      if (nc > 0.0 && nr > 0.0)
        order_sum += dot / (std::sqrt(nc) * std::sqrt(nr));
    }
    total += order_sum / double(candidates.size());
  }
  return 10.0 * total / 4.0;
}

double bbox_iou(const std::array<int, 4>& a, const std::array<int, 4>& b) {
  const int x1 = std::max(a[0], b[0]), y1 = std::max(a[1], b[1]);
  const int x2 = std::min(a[2], b[2]), y2 = std::min(a[3], b[3]);
  const double inter = std::max(0, x2 - x1 + 1) * double(std::max(0, y2 - y1 + 1));
  const double area_a = double(a[2] - a[0] + 1) * double(a[3] - a[1] + 1);
  const double area_b = double(b[2] - b[0] + 1) * double(b[3] - b[1] + 1);
  const double uni = area_a + area_b - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

std::pair<double, double> accuracy_match(const std::vector<CoCAnswer>& preds,
                                         const std::vector<CoCAnswer>& gts) {
  if (preds.size() != gts.size())
    throw contract_error("accuracy_match: length mismatch");
  long long correct = 0, total = 0;
  long long matched = 0, total_objects = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const CoCAnswer& p = preds[i];
    const CoCAnswer& g = gts[i];
    // multiple-choice slots: per-object motion status, then the three
    // answer-level slots
    for (std::size_t o = 0; o < g.perception.size(); ++o) {
      ++total;
      if (o < p.perception.size() &&
          p.perception[o].motion == g.perception[o].motion)
        ++correct;
    }
    ++total;
    if (p.has_prediction && p.closest_next_action == g.closest_next_action)
      ++correct;
    ++total;
    if (p.has_threat && p.threat == g.threat) ++correct;
    ++total;
    if (p.has_plan && p.ego_action == g.ego_action) ++correct;

    // perception match: greedy one-to-one by view tag + IoU
    std::vector<bool> used(p.perception.size(), false);
    for (const auto& go : g.perception) {
      ++total_objects;
      for (std::size_t j = 0; j < p.perception.size(); ++j) {
        if (used[j]) continue;
        const auto& po = p.perception[j];
        if (po.view == go.view && bbox_iou(po.bbox, go.bbox) >= 0.5) {
          used[j] = true;
          ++matched;
          break;
        }
      }
    }
  }
  const double acc = total == 0 ? 0.0 : 100.0 * double(correct) / double(total);
  const double mat =
      total_objects == 0 ? 0.0 : 100.0 * double(matched) / double(total_objects);
  return {acc, mat};
}

}  // namespace coc
