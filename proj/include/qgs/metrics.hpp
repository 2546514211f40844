#pragma once

#include <cstdint>
#include <span>

namespace qgs {

// Mann-Whitney AUC with tie-averaged ranks. Requires at least one positive
// and one negative.
double compute_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct GaucResult {
  double gauc = 0;
  std::size_t scored_requests = 0;
  std::size_t skipped_requests = 0;  // lacked a positive or a negative
};

// Impression-weighted mean of per-request AUCs.
GaucResult compute_gauc(std::span<const double> scores, std::span<const std::uint8_t> labels,
                        std::span<const std::uint64_t> request_ids);

}  // namespace qgs
