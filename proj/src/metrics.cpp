#include "qgs/metrics.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <vector>

#include "qgs/error.hpp"

namespace qgs {

double compute_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ShapeError("compute_auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * double(i + 1 + j);  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        pos_rank_sum += avg_rank;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw Error("compute_auc: need at least one positive and one negative");
  return (pos_rank_sum - double(pos) * double(pos + 1) / 2.0) / (double(pos) * double(neg));
}

GaucResult compute_gauc(std::span<const double> scores, std::span<const std::uint8_t> labels,
                        std::span<const std::uint64_t> request_ids) {
  if (scores.size() != labels.size() || scores.size() != request_ids.size()) {
    throw ShapeError("compute_gauc: scores, labels and request ids differ in length");
  }
  std::map<std::uint64_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < scores.size(); ++i) groups[request_ids[i]].push_back(i);

  GaucResult r;
  double weighted = 0, weight = 0;
  std::vector<double> s;
  std::vector<std::uint8_t> l;
  for (const auto& [id, idx] : groups) {
    s.clear();
    l.clear();
    std::size_t pos = 0;
    for (auto i : idx) {
      s.push_back(scores[i]);
      l.push_back(labels[i]);
      pos += labels[i] != 0;
    }
    if (pos == 0 || pos == idx.size()) {
      ++r.skipped_requests;
      continue;
    }
    weighted += double(idx.size()) * compute_auc(s, l);
    weight += double(idx.size());
    ++r.scored_requests;
  }
  if (r.scored_requests == 0) throw Error("compute_gauc: no request has both a positive and a negative");
  r.gauc = weighted / weight;
  return r;
}

}  // namespace qgs
