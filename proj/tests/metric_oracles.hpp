// Independent reference implementations of the language and planning
// metrics, used only by tests. Deliberately written with different data
// structures and control flow than the library versions.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace oracle {

using Toks = std::vector<std::string>;

inline std::string join_gram(const Toks& t, std::size_t i, int n) {
  std::string s;
  for (int k = 0; k < n; ++k) {
    s += t[i + std::size_t(k)];
    s += '\x1f';
  }
  return s;
}

inline std::map<std::string, int> grams(const Toks& t, int n) {
  std::map<std::string, int> m;
  for (std::size_t i = 0; i + std::size_t(n) <= t.size(); ++i)
    m[join_gram(t, i, n)]++;
  return m;
}

inline double bleu(const Toks& cand, const std::vector<Toks>& refs, int n) {
  if (cand.empty()) return 0.0;
  double logp = 0.0;
  for (int order = 1; order <= n; ++order) {
    auto cg = grams(cand, order);
    std::map<std::string, int> best;
    for (const auto& r : refs)
      for (const auto& [g, c] : grams(r, order))
        if (c > best[g]) best[g] = c;
    long long num = 0, den = 0;
    for (const auto& [g, c] : cg) {
      den += c;
      auto it = best.find(g);
      num += std::min<long long>(c, it == best.end() ? 0 : it->second);
    }
    if (den == 0 || num == 0) return 0.0;
    logp += std::log(double(num) / double(den));
  }
  // closest reference length, ties to the shorter
  long long c = (long long)cand.size(), r = (long long)refs[0].size();
  for (const auto& ref : refs) {
    long long rl = (long long)ref.size();
    if (std::llabs(rl - c) < std::llabs(r - c) ||
        (std::llabs(rl - c) == std::llabs(r - c) && rl < r))
      r = rl;
  }
  double bp = c >= r ? 1.0 : std::exp(1.0 - double(r) / double(c));
  return bp * std::exp(logp / n);
}

inline int lcs_len(const Toks& a, const Toks& b) {
  std::vector<std::vector<int>> dp(a.size() + 1,
                                   std::vector<int>(b.size() + 1, 0));
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      dp[i][j] = a[i - 1] == b[j - 1]
                     ? dp[i - 1][j - 1] + 1
                     : std::max(dp[i - 1][j], dp[i][j - 1]);
  return dp[a.size()][b.size()];
}

inline double rouge_l(const Toks& cand, const Toks& ref, double beta = 1.2) {
  if (cand.empty() || ref.empty()) return 0.0;
  const double l = lcs_len(cand, ref);
  if (l == 0) return 0.0;
  const double p = l / double(cand.size());
  const double r = l / double(ref.size());
  return (1 + beta * beta) * r * p / (r + beta * beta * p);
}

inline double cider(const std::vector<Toks>& cands,
                    const std::vector<Toks>& refs) {
  const double N = double(refs.size());
  double score = 0.0;
  for (int n = 1; n <= 4; ++n) {
    std::map<std::string, int> df;
    for (const auto& r : refs) {
      std::set<std::string> seen;
      for (const auto& [g, _] : grams(r, n)) seen.insert(g);
      for (const auto& g : seen) df[g]++;
    }
    auto vec = [&](const Toks& doc) {
      std::map<std::string, double> v;
      auto g = grams(doc, n);
      double tot = 0;
      for (auto& [_, c] : g) tot += c;
      for (auto& [gram, c] : g) {
        auto it = df.find(gram);
        double d = it == df.end() ? 1.0 : double(it->second);
        v[gram] = c / tot * std::log(N / d);
      }
      return v;
    };
    double s = 0.0;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      auto cv = vec(cands[i]);
      auto rv = vec(refs[i]);
      double dot = 0, a = 0, b = 0;
      for (auto& [g, x] : cv) {
        a += x * x;
        if (rv.count(g)) dot += x * rv[g];
      }
      for (auto& [g, x] : rv) b += x * x;
      if (a > 0 && b > 0) s += dot / std::sqrt(a) / std::sqrt(b);
    }
    score += s / double(cands.size());
  }
  return 10.0 * score / 4.0;
}

}  // namespace oracle
