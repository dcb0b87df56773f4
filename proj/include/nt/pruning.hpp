#pragma once

#include <optional>
#include <vector>

#include "nt/network.hpp"

namespace nt {

struct PruneGroup {
  UnitView unit;
  float norm = 0.0f;
  std::optional<int> origin_member;
  // Index of the unit within its origin member (the layer index when untagged).
  std::size_t origin_index = 0;
};

// How many units survive in each hidden layer.
struct KeepPolicy {
  enum class Mode { Sparsity, KeepCounts, PerMemberQuota };
  Mode mode = Mode::Sparsity;
  double sparsity = 0.0;
  // One entry per hidden layer.
  std::vector<std::size_t> keep_counts;
  // [hidden layer][member] units kept from each ensemble member.
  std::vector<std::vector<std::size_t>> quotas;

  static KeepPolicy with_sparsity(double s);
  static KeepPolicy with_keep_counts(std::vector<std::size_t> counts);
  static KeepPolicy with_quotas(std::vector<std::vector<std::size_t>> quotas);
};

// N - floor(s * N), at least 1. A 1e-9 slack absorbs representation error in
// s = 1 - 1/k so that k-fold concatenations shrink back exactly.
std::size_t keep_count(std::size_t units, double sparsity);

// Hidden units wrapped with their L2 norm, one list per hidden layer.
std::vector<std::vector<PruneGroup>> build_prune_groups(const Network& net,
                                                        bool include_bias = true);

// Kept unit indices (ascending) per hidden layer.
std::vector<std::vector<std::size_t>> select_units(const Network& net, const KeepPolicy& policy,
                                                   bool include_bias = true);

// Rebuilds `net` keeping, for hidden layer h, the units `units[h]` in the given
// order: rows/filters, bias, BN channel and downstream columns move together.
Network reindex_units(const Network& net, const std::vector<std::vector<std::size_t>>& units);

Network magnitude_prune(const Network& net, const KeepPolicy& policy, bool include_bias = true);

// Prunes `big` to the hidden widths of `reference`.
Network prune_to_architecture(const Network& big, const Network& reference,
                              bool include_bias = true);

}  // namespace nt
