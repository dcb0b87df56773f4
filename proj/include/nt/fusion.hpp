#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nt/network.hpp"
#include "nt/training.hpp"

namespace nt {

struct EnsembleBundle {
  std::vector<Network> members;
  std::vector<std::uint64_t> member_seeds;
  std::vector<History> histories;

  std::size_t size() const { return members.size(); }
  // Shared architecture hash; throws ArchMismatch when members disagree.
  std::string arch_id() const;
  void validate(std::size_t min_members = 2) const;
};

enum class FusionMethod { NT, NTIterative, NTRecursive, VanillaAvg, AlignAvg };
enum class Pipeline { PruneMergeFT, MergePruneFT, MergeFTPruneFT };

std::string_view to_string(FusionMethod m);
std::string_view to_string(Pipeline p);
FusionMethod fusion_method_from_string(std::string_view name);
Pipeline pipeline_from_string(std::string_view name);

struct FusionPlan {
  FusionMethod method = FusionMethod::NT;
  // Unset means 1 - 1/k, i.e. shrink back to a single member's widths.
  std::optional<double> sparsity;
  Pipeline pipeline = Pipeline::MergePruneFT;
  TrainConfig finetune;
  bool include_bias = true;

  double effective_sparsity(std::size_t k) const;
};

// Throws ArchMismatch unless every member shares one architecture.
void check_same_architecture(std::span<const Network> members);

// Input-connected layers stacked, interior layers block-diagonal with zero
// cross weights, BN parameters concatenated, head averaged over the k
// column blocks. Eval-mode output equals the mean of the members' outputs.
Network concat_fuse(std::span<const Network> members);

// Elementwise (sum over members) / k for every parameter and running stat.
Network vanilla_average(std::span<const Network> members);

struct AlignmentResult {
  Network aligned;             // b with hidden units permuted to match a
  double cost = 0.0;           // total squared row distance after alignment
  double identity_cost = 0.0;  // same, under the identity matching
  std::vector<std::vector<std::size_t>> permutations;
};

// Layer by layer from the input: permute b's units by the minimum total
// squared-distance assignment of incoming rows (bias included).
AlignmentResult align_to(const Network& a, const Network& b);
Network align_average(const Network& a, const Network& b);

// Replaces the round(p*N) lowest-norm recipient units of every hidden layer
// by the round(p*N) highest-norm donor units. Weights between recipient and
// donor units are zero; head columns follow their unit's source model; the
// head rows and bias stay the recipient's unless `donor_head`.
Network transplant_fraction(const Network& recipient, const Network& donor, double p,
                            bool donor_head = false);

// concat_fuse followed by pruning to the given sparsity (default: member widths).
Network fuse_nt(std::span<const Network> members, std::optional<double> sparsity = std::nullopt,
                bool include_bias = true);
// r <- prune(concat(r, next)) over the members in order.
Network fuse_iterative(std::span<const Network> members, bool include_bias = true);
// Balanced binary reduction, left half of size ceil(k/2).
Network fuse_recursive(std::span<const Network> members, bool include_bias = true);

// Dispatches on plan.method.
Network fuse(std::span<const Network> members, const FusionPlan& plan);

}  // namespace nt
