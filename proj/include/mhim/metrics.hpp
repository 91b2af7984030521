#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace mhim {

struct RankingMetrics {
  double recall = 0;
  double mrr = 0;
  double ndcg = 0;
};

// 1-based rank of `target` in a full descending-score ranking.
inline int rank_of(const std::vector<int>& ranked, int target) {
  for (size_t i = 0; i < ranked.size(); ++i) {
    if (ranked[i] == target) return static_cast<int>(i) + 1;
  }
  throw std::invalid_argument("rank_of: target missing from ranking");
}

// Recall@K = 1[rank <= K]; MRR@K = 1/rank if rank <= K else 0;
// NDCG@K = 1/log2(rank+1) if rank <= K else 0. Averaged over examples.
inline std::map<int, RankingMetrics> evaluate_ranking(
    const std::vector<std::vector<int>>& ranked_lists, const std::vector<int>& targets,
    const std::vector<int>& ks) {
  if (ranked_lists.size() != targets.size()) {
    throw std::invalid_argument("evaluate_ranking: list/target count mismatch");
  }
  std::map<int, RankingMetrics> out;
  for (int k : ks) out[k] = RankingMetrics{};
  if (ranked_lists.empty()) return out;
  for (size_t i = 0; i < ranked_lists.size(); ++i) {
    const int rank = rank_of(ranked_lists[i], targets[i]);
    for (int k : ks) {
      if (rank <= k) {
        out[k].recall += 1.0;
        out[k].mrr += 1.0 / rank;
        out[k].ndcg += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
      }
    }
  }
  const auto n = static_cast<double>(ranked_lists.size());
  for (auto& [k, m] : out) {
    m.recall /= n;
    m.mrr /= n;
    m.ndcg /= n;
  }
  return out;
}

// Full-catalog ranking from scores: descending score, ties toward lower ID.
inline std::vector<int> ranking_from_scores(const std::vector<double>& scores,
                                            const std::vector<int>& ids) {
  if (scores.size() != ids.size()) {
    throw std::invalid_argument("ranking_from_scores: size mismatch");
  }
  std::vector<size_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  });
  std::vector<int> ranked(order.size());
  for (size_t i = 0; i < order.size(); ++i) ranked[i] = ids[order[i]];
  return ranked;
}

// Distinct-n: distinct n-grams across all responses divided by the response
// count; responses shorter than n contribute no n-grams. May exceed 1.
inline double distinct_n(const std::vector<std::vector<int>>& responses, int n) {
  if (n <= 0) throw std::invalid_argument("distinct_n: n must be positive");
  if (responses.empty()) return 0.0;
  std::set<std::vector<int>> ngrams;
  for (const auto& r : responses) {
    if (r.size() < static_cast<size_t>(n)) continue;
    for (size_t i = 0; i + static_cast<size_t>(n) <= r.size(); ++i) {
      ngrams.insert(std::vector<int>(r.begin() + static_cast<long>(i),
                                     r.begin() + static_cast<long>(i) + n));
    }
  }
  return static_cast<double>(ngrams.size()) / static_cast<double>(responses.size());
}

// CLI-facing metric report {"recall@10": ..., "mrr@50": ..., ...}.
inline nlohmann::ordered_json ranking_metrics_json(const std::map<int, RankingMetrics>& metrics) {
  nlohmann::ordered_json j;
  for (const auto& [k, m] : metrics) j["recall@" + std::to_string(k)] = m.recall;
  for (const auto& [k, m] : metrics) j["mrr@" + std::to_string(k)] = m.mrr;
  for (const auto& [k, m] : metrics) j["ndcg@" + std::to_string(k)] = m.ndcg;
  return j;
}

inline nlohmann::ordered_json distinct_metrics_json(
    const std::vector<std::vector<int>>& responses) {
  nlohmann::ordered_json j;
  for (int n : {2, 3, 4}) j["dist-" + std::to_string(n)] = distinct_n(responses, n);
  return j;
}

}  // namespace mhim
