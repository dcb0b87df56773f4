#include "nt/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace nt {

KeepPolicy KeepPolicy::with_sparsity(double s) {
  if (!(s >= 0.0 && s < 1.0)) throw Error(ErrorKind::InvalidArg, "sparsity must lie in [0, 1)");
  KeepPolicy p;
  p.mode = Mode::Sparsity;
  p.sparsity = s;
  return p;
}

KeepPolicy KeepPolicy::with_keep_counts(std::vector<std::size_t> counts) {
  KeepPolicy p;
  p.mode = Mode::KeepCounts;
  p.keep_counts = std::move(counts);
  return p;
}

KeepPolicy KeepPolicy::with_quotas(std::vector<std::vector<std::size_t>> quotas) {
  KeepPolicy p;
  p.mode = Mode::PerMemberQuota;
  p.quotas = std::move(quotas);
  return p;
}

std::size_t keep_count(std::size_t units, double sparsity) {
  const auto removed = static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(units) + 1e-9));
  return std::max<std::size_t>(1, units - std::min(units, removed));
}

std::vector<std::vector<PruneGroup>> build_prune_groups(const Network& net, bool include_bias) {
  const auto views = unit_views(net);
  std::vector<std::vector<PruneGroup>> groups;
  std::size_t current = static_cast<std::size_t>(-1);
  Tensor norms;
  std::vector<std::size_t> per_member_seen;
  for (const UnitView& v : views) {
    const Layer& l = net.layer(v.layer_index);
    if (v.layer_index != current) {
      current = v.layer_index;
      groups.emplace_back();
      norms = row_l2_norms(l.weight, &l.bias, include_bias);
      per_member_seen.clear();
    }
    PruneGroup g;
    g.unit = v;
    g.norm = norms[v.unit_index];
    if (!l.origin.empty()) {
      const int m = l.origin.at(v.unit_index);
      g.origin_member = m;
      if (per_member_seen.size() <= static_cast<std::size_t>(m)) per_member_seen.resize(m + 1, 0);
      g.origin_index = per_member_seen[m]++;
    } else {
      g.origin_index = v.unit_index;
    }
    groups.back().push_back(g);
  }
  return groups;
}

namespace {

// Norm descending, then member ascending, then origin index ascending.
bool ranks_before(const PruneGroup& a, const PruneGroup& b) {
  if (a.norm != b.norm) return a.norm > b.norm;
  const int ma = a.origin_member.value_or(0);
  const int mb = b.origin_member.value_or(0);
  if (ma != mb) return ma < mb;
  if (a.origin_index != b.origin_index) return a.origin_index < b.origin_index;
  return a.unit.unit_index < b.unit.unit_index;
}

std::vector<std::size_t> top_units(std::vector<PruneGroup> groups, std::size_t keep) {
  std::stable_sort(groups.begin(), groups.end(), ranks_before);
  std::vector<std::size_t> kept;
  kept.reserve(keep);
  for (std::size_t i = 0; i < keep && i < groups.size(); ++i) kept.push_back(groups[i].unit.unit_index);
  std::sort(kept.begin(), kept.end());
  return kept;
}

}  // namespace

std::vector<std::vector<std::size_t>> select_units(const Network& net, const KeepPolicy& policy,
                                                   bool include_bias) {
  const auto groups = build_prune_groups(net, include_bias);
  const std::size_t hidden = groups.size();
  if (policy.mode == KeepPolicy::Mode::KeepCounts && policy.keep_counts.size() != hidden) {
    throw Error(ErrorKind::InvalidArg, "keep_counts needs one entry per hidden layer (" +
                                           std::to_string(hidden) + ")");
  }
  if (policy.mode == KeepPolicy::Mode::PerMemberQuota && policy.quotas.size() != hidden) {
    throw Error(ErrorKind::InvalidArg, "quotas need one entry per hidden layer");
  }
  std::vector<std::vector<std::size_t>> kept(hidden);
  for (std::size_t h = 0; h < hidden; ++h) {
    const std::size_t units = groups[h].size();
    switch (policy.mode) {
      case KeepPolicy::Mode::Sparsity:
        kept[h] = top_units(groups[h], keep_count(units, policy.sparsity));
        break;
      case KeepPolicy::Mode::KeepCounts: {
        const std::size_t keep = policy.keep_counts[h];
        if (keep == 0) throw Error(ErrorKind::EmptyLayer, "keep count 0 for hidden layer " + std::to_string(h));
        if (keep > units) {
          throw Error(ErrorKind::InvalidArg, "keep count exceeds layer width " + std::to_string(units));
        }
        kept[h] = top_units(groups[h], keep);
        break;
      }
      case KeepPolicy::Mode::PerMemberQuota: {
        const auto& quota = policy.quotas[h];
        std::vector<std::vector<PruneGroup>> by_member(quota.size());
        for (const auto& g : groups[h]) {
          const auto m = static_cast<std::size_t>(g.origin_member.value_or(0));
          if (m >= quota.size()) throw Error(ErrorKind::InvalidArg, "unit from member without quota");
          by_member[m].push_back(g);
        }
        for (std::size_t m = 0; m < quota.size(); ++m) {
          if (quota[m] > by_member[m].size()) {
            throw Error(ErrorKind::InvalidArg, "quota exceeds member width");
          }
          const auto top = top_units(by_member[m], quota[m]);
          kept[h].insert(kept[h].end(), top.begin(), top.end());
        }
        std::sort(kept[h].begin(), kept[h].end());
        if (kept[h].empty()) throw Error(ErrorKind::EmptyLayer, "quotas empty hidden layer " + std::to_string(h));
        break;
      }
    }
  }
  return kept;
}

Network reindex_units(const Network& net, const std::vector<std::vector<std::size_t>>& units) {
  const auto hidden = net.hidden_layers();
  if (units.size() != hidden.size()) {
    throw Error(ErrorKind::InvalidArg, "unit selection needs one list per hidden layer");
  }
  Network out = net;
  for (std::size_t h = 0; h < hidden.size(); ++h) {
    const std::size_t li = hidden[h];
    const auto& sel = units[h];
    if (sel.empty()) throw Error(ErrorKind::EmptyLayer, "hidden layer " + std::to_string(li) + " emptied");
    Layer& l = out.layer(li);
    l.weight = take(l.weight, 0, sel);
    l.bias = take(l.bias, 0, sel);
    if (!l.origin.empty()) {
      std::vector<int> origin;
      origin.reserve(sel.size());
      for (auto u : sel) origin.push_back(l.origin[u]);
      l.origin = std::move(origin);
    }
    if (const auto bn = net.batchnorm_for(li)) {
      Layer& b = out.layer(*bn);
      b.weight = take(b.weight, 0, sel);
      b.bias = take(b.bias, 0, sel);
      b.running_mean = take(b.running_mean, 0, sel);
      b.running_var = take(b.running_var, 0, sel);
    }
    const std::size_t next = net.next_parameterized(li);
    const std::size_t span = outgoing_span(net, li);
    std::vector<std::size_t> cols;
    cols.reserve(sel.size() * span);
    for (auto u : sel) {
      for (std::size_t s = 0; s < span; ++s) cols.push_back(u * span + s);
    }
    Layer& n = out.layer(next);
    n.weight = take(n.weight, 1, cols);
  }
  out.revalidate();
  return out;
}

Network magnitude_prune(const Network& net, const KeepPolicy& policy, bool include_bias) {
  return reindex_units(net, select_units(net, policy, include_bias));
}

Network prune_to_architecture(const Network& big, const Network& reference, bool include_bias) {
  const auto bs = big.specs();
  const auto rs = reference.specs();
  if (bs.size() != rs.size() || big.input_shape() != reference.input_shape()) {
    throw Error(ErrorKind::ArchIncompatible, "layer count or input shape differs");
  }
  for (std::size_t i = 0; i < bs.size(); ++i) {
    if (bs[i].kind != rs[i].kind) {
      throw Error(ErrorKind::ArchIncompatible, "layer " + std::to_string(i) + " kind differs");
    }
  }
  std::vector<std::size_t> counts;
  for (std::size_t li : reference.hidden_layers()) {
    if (big.layer(li).spec.out < reference.layer(li).spec.out) {
      throw Error(ErrorKind::ArchIncompatible,
                  "layer " + std::to_string(li) + " narrower than the reference");
    }
    counts.push_back(reference.layer(li).spec.out);
  }
  Network out = magnitude_prune(big, KeepPolicy::with_keep_counts(std::move(counts)), include_bias);
  if (out.arch_id() != reference.arch_id()) {
    throw Error(ErrorKind::ArchIncompatible, "pruned network does not match the reference");
  }
  return out;
}

}  // namespace nt
