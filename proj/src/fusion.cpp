#include "nt/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nt/assignment.hpp"
#include "nt/pruning.hpp"

namespace nt {

std::string_view to_string(FusionMethod m) {
  switch (m) {
    case FusionMethod::NT: return "nt";
    case FusionMethod::NTIterative: return "nt-iter";
    case FusionMethod::NTRecursive: return "nt-rec";
    case FusionMethod::VanillaAvg: return "avg";
    case FusionMethod::AlignAvg: return "align";
  }
  return "?";
}

std::string_view to_string(Pipeline p) {
  switch (p) {
    case Pipeline::PruneMergeFT: return "prune-merge-ft";
    case Pipeline::MergePruneFT: return "merge-prune-ft";
    case Pipeline::MergeFTPruneFT: return "merge-ft-prune-ft";
  }
  return "?";
}

FusionMethod fusion_method_from_string(std::string_view name) {
  for (auto m : {FusionMethod::NT, FusionMethod::NTIterative, FusionMethod::NTRecursive,
                 FusionMethod::VanillaAvg, FusionMethod::AlignAvg}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorKind::InvalidArg, "unknown fusion method '" + std::string(name) + "'");
}

Pipeline pipeline_from_string(std::string_view name) {
  for (auto p : {Pipeline::PruneMergeFT, Pipeline::MergePruneFT, Pipeline::MergeFTPruneFT}) {
    if (to_string(p) == name) return p;
  }
  throw Error(ErrorKind::InvalidArg, "unknown pipeline '" + std::string(name) + "'");
}

double FusionPlan::effective_sparsity(std::size_t k) const {
  return sparsity.value_or(1.0 - 1.0 / static_cast<double>(k));
}

std::string EnsembleBundle::arch_id() const {
  check_same_architecture(members);
  return members.empty() ? std::string() : members.front().arch_id();
}

void EnsembleBundle::validate(std::size_t min_members) const {
  if (members.size() < min_members) {
    throw Error(ErrorKind::InvalidArg, "ensemble needs at least " + std::to_string(min_members) +
                                           " members, got " + std::to_string(members.size()));
  }
  check_same_architecture(members);
}

void check_same_architecture(std::span<const Network> members) {
  if (members.empty()) throw Error(ErrorKind::InvalidArg, "no members");
  const std::string id = members.front().arch_id();
  for (std::size_t j = 1; j < members.size(); ++j) {
    if (members[j].arch_id() != id) {
      throw Error(ErrorKind::ArchMismatch, "member " + std::to_string(j) +
                                               " architecture differs from member 0");
    }
  }
}

namespace {

std::size_t first_parameterized(const Network& net) {
  for (std::size_t i = 0; i < net.size(); ++i) {
    if (net.layer(i).spec.parameterized()) return i;
  }
  return net.size();
}

Tensor concat_leading(std::span<const Tensor* const> parts) {
  Shape shape = parts.front()->shape();
  shape[0] = 0;
  for (const Tensor* t : parts) shape[0] += t->dim(0);
  Tensor out(shape);
  float* dst = out.data();
  for (const Tensor* t : parts) dst = std::copy(t->data(), t->data() + t->size(), dst);
  return out;
}

template <class Get>
Tensor concat_member_tensors(std::span<const Network> members, std::size_t layer, Get get) {
  std::vector<const Tensor*> parts;
  for (const auto& m : members) parts.push_back(&get(m.layer(layer)));
  return concat_leading(parts);
}

// Member j's weight [rows x in x tail] placed at rows j*rows, inputs j*in.
Tensor block_diagonal(std::span<const Network> members, std::size_t layer) {
  const Tensor& w0 = members.front().layer(layer).weight;
  const std::size_t k = members.size();
  const std::size_t rows = w0.dim(0), in = w0.dim(1);
  const std::size_t tail = w0.size() / (rows * in);
  Shape shape = w0.shape();
  shape[0] = k * rows;
  shape[1] = k * in;
  Tensor out(shape);
  for (std::size_t j = 0; j < k; ++j) {
    const Tensor& w = members[j].layer(layer).weight;
    for (std::size_t r = 0; r < rows; ++r) {
      const float* src = w.data() + r * in * tail;
      float* dst = out.data() + ((j * rows + r) * k * in + j * in) * tail;
      std::copy(src, src + in * tail, dst);
    }
  }
  return out;
}

}  // namespace

Network concat_fuse(std::span<const Network> members) {
  if (members.size() < 2) throw Error(ErrorKind::InvalidArg, "concat_fuse needs k >= 2 members");
  check_same_architecture(members);
  const std::size_t k = members.size();
  const float inv_k = 1.0f / static_cast<float>(k);
  const Network& base = members.front();
  const std::size_t first = first_parameterized(base);
  const std::size_t head = base.head_index();

  Network fused = base;
  for (std::size_t i = 0; i < base.size(); ++i) {
    Layer& out = fused.layer(i);
    const LayerKind kind = out.spec.kind;
    if (kind == LayerKind::BatchNorm2D) {
      out.weight = concat_member_tensors(members, i, [](const Layer& l) -> const Tensor& { return l.weight; });
      out.bias = concat_member_tensors(members, i, [](const Layer& l) -> const Tensor& { return l.bias; });
      out.running_mean = concat_member_tensors(members, i, [](const Layer& l) -> const Tensor& { return l.running_mean; });
      out.running_var = concat_member_tensors(members, i, [](const Layer& l) -> const Tensor& { return l.running_var; });
      continue;
    }
    if (!out.spec.parameterized()) continue;

    if (i == head) {
      const std::size_t rows = out.weight.dim(0);
      const std::size_t in = out.weight.dim(1);
      Tensor bias({rows});
      for (const auto& m : members) {
        for (std::size_t r = 0; r < rows; ++r) bias[r] += m.layer(i).bias[r];
      }
      for (float& v : bias.values()) v /= static_cast<float>(k);
      if (i == first) {
        // No hidden layer: concatenation degenerates to averaging.
        Tensor w(out.weight.shape());
        for (const auto& m : members) {
          for (std::size_t e = 0; e < w.size(); ++e) w[e] += m.layer(i).weight[e];
        }
        for (float& v : w.values()) v /= static_cast<float>(k);
        out.weight = std::move(w);
      } else {
        Tensor w({rows, k * in});
        for (std::size_t j = 0; j < k; ++j) {
          const Tensor& src = members[j].layer(i).weight;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < in; ++c) w.at(r, j * in + c) = src.at(r, c) * inv_k;
          }
        }
        out.weight = std::move(w);
      }
      out.bias = std::move(bias);
      out.origin.clear();
      continue;
    }

    if (i == first) {
      out.weight = concat_member_tensors(members, i, [](const Layer& l) -> const Tensor& { return l.weight; });
    } else {
      out.weight = block_diagonal(members, i);
    }
    out.bias = concat_member_tensors(members, i, [](const Layer& l) -> const Tensor& { return l.bias; });
    out.origin.clear();
    for (std::size_t j = 0; j < k; ++j) {
      out.origin.insert(out.origin.end(), base.layer(i).spec.out, static_cast<int>(j));
    }
  }
  fused.revalidate();
  return fused;
}

Network vanilla_average(std::span<const Network> members) {
  check_same_architecture(members);
  const auto k = static_cast<float>(members.size());
  Network out = members.front();
  auto average = [&](std::size_t i, Tensor Layer::*field) {
    Tensor& dst = out.layer(i).*field;
    for (std::size_t j = 1; j < members.size(); ++j) {
      const Tensor& src = members[j].layer(i).*field;
      for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += src[e];
    }
    for (float& v : dst.values()) v /= k;
  };
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!out.layer(i).spec.has_params()) continue;
    average(i, &Layer::weight);
    average(i, &Layer::bias);
    if (out.layer(i).spec.kind == LayerKind::BatchNorm2D) {
      average(i, &Layer::running_mean);
      average(i, &Layer::running_var);
    }
    out.layer(i).origin.clear();
  }
  return out;
}

AlignmentResult align_to(const Network& a, const Network& b) {
  const Network pair[] = {a, b};
  check_same_architecture(pair);
  AlignmentResult result{b, 0.0, 0.0, {}};
  const auto hidden = a.hidden_layers();
  for (std::size_t h = 0; h < hidden.size(); ++h) {
    const std::size_t li = hidden[h];
    const Layer& la = a.layer(li);
    const Layer& lb = result.aligned.layer(li);
    const std::size_t n = la.spec.out;
    const std::size_t row = la.weight.row_size();
    std::vector<double> cost(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto ra = la.weight.row(i);
      for (std::size_t j = 0; j < n; ++j) {
        const auto rb = lb.weight.row(j);
        double d = 0.0;
        for (std::size_t c = 0; c < row; ++c) {
          const double diff = static_cast<double>(ra[c]) - rb[c];
          d += diff * diff;
        }
        const double db = static_cast<double>(la.bias[i]) - lb.bias[j];
        cost[i * n + j] = d + db * db;
      }
    }
    auto perm = solve_assignment(cost, n);
    std::vector<std::size_t> ident(n);
    std::iota(ident.begin(), ident.end(), 0);
    result.cost += assignment_cost(cost, n, perm);
    result.identity_cost += assignment_cost(cost, n, ident);

    std::vector<std::vector<std::size_t>> units;
    for (std::size_t g = 0; g < hidden.size(); ++g) {
      if (g == h) {
        units.push_back(perm);
      } else {
        std::vector<std::size_t> id(result.aligned.layer(hidden[g]).spec.out);
        std::iota(id.begin(), id.end(), 0);
        units.push_back(std::move(id));
      }
    }
    result.aligned = reindex_units(result.aligned, units);
    result.permutations.push_back(std::move(perm));
  }
  return result;
}

Network align_average(const Network& a, const Network& b) {
  const Network pair[] = {a, align_to(a, b).aligned};
  return vanilla_average(pair);
}

namespace {

struct UnitSource {
  int model = 0;
  std::size_t index = 0;
};

// Builds a network whose hidden unit at each position comes from one of the
// source models. Weights between units of different sources are zero.
Network compose_units(std::span<const Network* const> models,
                      const std::vector<std::vector<UnitSource>>& sources, int head_model) {
  const Network& base = *models[static_cast<std::size_t>(head_model)];
  Network out = base;
  const auto hidden = base.hidden_layers();
  const std::size_t first = first_parameterized(base);

  auto build_row = [](std::span<const float> row, int model,
                      const std::vector<UnitSource>* prev, std::span<float> dst) {
    if (prev == nullptr) {
      std::copy(row.begin(), row.end(), dst.begin());
      return;
    }
    const std::size_t block = row.size() / prev->size();
    std::fill(dst.begin(), dst.end(), 0.0f);
    for (std::size_t c = 0; c < prev->size(); ++c) {
      const UnitSource& ps = (*prev)[c];
      if (ps.model != model) continue;
      std::copy(row.begin() + ps.index * block, row.begin() + (ps.index + 1) * block,
                dst.begin() + c * block);
    }
  };

  for (std::size_t h = 0; h < hidden.size(); ++h) {
    const std::size_t li = hidden[h];
    const auto& src = sources[h];
    Layer& l = out.layer(li);
    const std::vector<UnitSource>* prev = li == first ? nullptr : &sources[h - 1];
    for (std::size_t r = 0; r < src.size(); ++r) {
      const Layer& sl = models[src[r].model]->layer(li);
      build_row(sl.weight.row(src[r].index), src[r].model, prev, l.weight.row(r));
      l.bias[r] = sl.bias[src[r].index];
    }
    if (const auto bn = base.batchnorm_for(li)) {
      Layer& b = out.layer(*bn);
      for (std::size_t r = 0; r < src.size(); ++r) {
        const Layer& sb = models[src[r].model]->layer(*bn);
        b.weight[r] = sb.weight[src[r].index];
        b.bias[r] = sb.bias[src[r].index];
        b.running_mean[r] = sb.running_mean[src[r].index];
        b.running_var[r] = sb.running_var[src[r].index];
      }
    }
    l.origin.clear();
    for (const auto& s : src) l.origin.push_back(s.model);
  }

  // Head: every column block follows the source of its unit.
  const std::size_t head = base.head_index();
  if (!hidden.empty()) {
    const auto& prev = sources.back();
    Layer& l = out.layer(head);
    const std::size_t block = l.weight.dim(1) / prev.size();
    for (std::size_t r = 0; r < l.weight.dim(0); ++r) {
      auto dst = l.weight.row(r);
      for (std::size_t c = 0; c < prev.size(); ++c) {
        const auto srow = models[prev[c].model]->layer(head).weight.row(r);
        std::copy(srow.begin() + prev[c].index * block, srow.begin() + (prev[c].index + 1) * block,
                  dst.begin() + c * block);
      }
    }
  }
  out.revalidate();
  return out;
}

// Unit indices sorted best-first by (norm desc, index asc).
std::vector<std::size_t> ranked_units(const Layer& l) {
  const Tensor norms = row_l2_norms(l.weight, &l.bias, true);
  std::vector<std::size_t> order(l.spec.out);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });
  return order;
}

}  // namespace

Network transplant_fraction(const Network& recipient, const Network& donor, double p,
                            bool donor_head) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorKind::InvalidArg, "p must lie in [0, 1]");
  const Network pair[] = {recipient, donor};
  check_same_architecture(pair);
  std::vector<std::vector<UnitSource>> sources;
  for (std::size_t li : recipient.hidden_layers()) {
    const std::size_t n_units = recipient.layer(li).spec.out;
    const auto moved = static_cast<std::size_t>(std::lround(p * static_cast<double>(n_units)));
    std::vector<UnitSource> src(n_units);
    for (std::size_t u = 0; u < n_units; ++u) src[u] = {0, u};
    const auto r_rank = ranked_units(recipient.layer(li));
    const auto d_rank = ranked_units(donor.layer(li));
    std::vector<std::size_t> slots(r_rank.end() - static_cast<std::ptrdiff_t>(moved), r_rank.end());
    std::vector<std::size_t> donors(d_rank.begin(), d_rank.begin() + static_cast<std::ptrdiff_t>(moved));
    std::sort(slots.begin(), slots.end());
    std::sort(donors.begin(), donors.end());
    for (std::size_t s = 0; s < moved; ++s) src[slots[s]] = {1, donors[s]};
    sources.push_back(std::move(src));
  }
  const Network* models[] = {&recipient, &donor};
  Network out = compose_units(models, sources, donor_head ? 1 : 0);
  return out;
}

Network fuse_nt(std::span<const Network> members, std::optional<double> sparsity,
                bool include_bias) {
  Network big = concat_fuse(members);
  if (sparsity) return magnitude_prune(big, KeepPolicy::with_sparsity(*sparsity), include_bias);
  return prune_to_architecture(big, members.front(), include_bias);
}

Network fuse_iterative(std::span<const Network> members, bool include_bias) {
  if (members.size() < 2) throw Error(ErrorKind::InvalidArg, "fusion needs k >= 2 members");
  check_same_architecture(members);
  Network acc = members.front();
  for (std::size_t j = 1; j < members.size(); ++j) {
    const Network pair[] = {std::move(acc), members[j]};
    acc = prune_to_architecture(concat_fuse(pair), members.front(), include_bias);
  }
  return acc;
}

namespace {

Network reduce_recursive(std::span<const Network> members, const Network& reference,
                         bool include_bias) {
  if (members.size() == 1) return members.front();
  const std::size_t left = (members.size() + 1) / 2;
  const Network pair[] = {reduce_recursive(members.first(left), reference, include_bias),
                          reduce_recursive(members.subspan(left), reference, include_bias)};
  return prune_to_architecture(concat_fuse(pair), reference, include_bias);
}

}  // namespace

Network fuse_recursive(std::span<const Network> members, bool include_bias) {
  if (members.size() < 2) throw Error(ErrorKind::InvalidArg, "fusion needs k >= 2 members");
  check_same_architecture(members);
  return reduce_recursive(members, members.front(), include_bias);
}

Network fuse(std::span<const Network> members, const FusionPlan& plan) {
  if (members.size() < 2) throw Error(ErrorKind::InvalidArg, "fusion needs k >= 2 members");
  switch (plan.method) {
    case FusionMethod::NT: return fuse_nt(members, plan.sparsity, plan.include_bias);
    case FusionMethod::NTIterative: return fuse_iterative(members, plan.include_bias);
    case FusionMethod::NTRecursive: return fuse_recursive(members, plan.include_bias);
    case FusionMethod::VanillaAvg: return vanilla_average(members);
    case FusionMethod::AlignAvg:
      if (members.size() != 2) throw Error(ErrorKind::InvalidArg, "align averaging needs k = 2");
      return align_average(members[0], members[1]);
  }
  throw Error(ErrorKind::InvalidArg, "unknown fusion method");
}

}  // namespace nt
