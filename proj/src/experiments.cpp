#include "nt/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "nt/pruning.hpp"

namespace nt {

using nlohmann::json;

namespace {

template <class E>
struct Names {
  E value;
  std::string_view name;
};

constexpr Names<ExperimentKind> kKindNames[] = {
    {ExperimentKind::Pipeline, "pipeline"},   {ExperimentKind::MultiModel, "multimodel"},
    {ExperimentKind::Sweep, "sweep"},         {ExperimentKind::FailureCase, "failure"},
    {ExperimentKind::CompareMethods, "compare"}, {ExperimentKind::FusionCost, "cost"},
};

constexpr Names<SweepAxis> kAxisNames[] = {
    {SweepAxis::Width, "width"},
    {SweepAxis::Depth, "depth"},
    {SweepAxis::TransplantFraction, "transplant"},
    {SweepAxis::Sparsity, "sparsity"},
};

template <class E, std::size_t N>
std::string_view name_of(const Names<E> (&table)[N], E v) {
  for (const auto& n : table) {
    if (n.value == v) return n.name;
  }
  return "?";
}

template <class E, std::size_t N>
E value_of(const Names<E> (&table)[N], std::string_view s, const char* what) {
  for (const auto& n : table) {
    if (n.name == s) return n.value;
  }
  throw Error(ErrorKind::InvalidArg, std::string("unknown ") + what + " '" + std::string(s) + "'");
}

json schedule_to_json(const Schedule& s) {
  if (s.kind == Schedule::Kind::Constant) return {{"kind", "constant"}};
  return {{"kind", "step"}, {"period", s.period}, {"factor", s.factor}};
}

Schedule schedule_from_json(const json& j) {
  const std::string kind = j.value("kind", "constant");
  if (kind == "constant") return Schedule::constant();
  if (kind == "step") return Schedule::step_decay(j.value("period", std::size_t{30}), j.value("factor", 0.5f));
  throw Error(ErrorKind::InvalidArg, "unknown schedule '" + kind + "'");
}

json train_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"batch_size", c.batch.batch_size},
          {"drop_last", c.batch.drop_last},
          {"schedule", schedule_to_json(c.schedule)}};
}

TrainConfig train_from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.batch.batch_size = j.value("batch_size", c.batch.batch_size);
  c.batch.drop_last = j.value("drop_last", c.batch.drop_last);
  if (j.contains("schedule")) c.schedule = schedule_from_json(j.at("schedule"));
  return c;
}

std::string fmt_value(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

std::string tagged(std::string_view method, const std::string& key, const std::string& value) {
  return std::string(method) + "[" + key + "=" + value + "]";
}

std::uint64_t derive(std::uint64_t seed, const std::string& stream) {
  return RngStream(seed, stream).next_u64();
}

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

// Fused network plus what it took to produce it.
struct Fused {
  Network net;
  double seconds = 0.0;
  std::size_t peak_bytes = 0;
};

template <class F>
Fused measured(F&& make) {
  memory::reset_peak();
  const std::size_t base = memory::live_bytes();
  Timer t;
  Network net = make();
  Fused f{std::move(net), t.seconds(), 0};
  f.peak_bytes = memory::peak_bytes() > base ? memory::peak_bytes() - base : 0;
  return f;
}

std::vector<double> accuracies(const History& h) {
  std::vector<double> out;
  out.reserve(h.records.size());
  for (const auto& r : h.records) out.push_back(r.test_accuracy);
  return out;
}

struct SeedSetup {
  const ExperimentSpec& spec;
  const Splits& data;
  std::uint64_t seed;
};

TrainConfig member_config(const ExperimentSpec& spec) { return spec.member_train; }

TrainConfig finetune_for(const ExperimentSpec& spec, std::uint64_t seed, const std::string& tag) {
  TrainConfig c = spec.finetune_config();
  c.batch.shuffle_seed = derive(seed, "finetune/" + tag);
  return c;
}

// Immediate accuracy of `fused`, then fine-tuning.
SeedRecord finish(const SeedSetup& s, const TrainedEnsemble& ens, double ensemble_acc, Fused fused,
                  const std::string& tag) {
  SeedRecord r;
  r.seed = s.seed;
  r.ensemble_acc = ensemble_acc;
  r.best_member_acc = ens.best_member_acc;
  r.immediate_acc = evaluate(fused.net, s.data.test).accuracy;
  r.peak_bytes = fused.peak_bytes;
  double seconds = fused.seconds;
  if (s.spec.finetune_epochs > 0) {
    const TrainResult ft = train(std::move(fused.net), s.data.train, s.data.test,
                                 finetune_for(s.spec, s.seed, tag));
    r.finetuned_acc = accuracies(ft.history);
  }
  r.wall_seconds = s.spec.record_timing ? seconds : 0.0;
  return r;
}

std::vector<FusionMethod> methods_or(const ExperimentSpec& spec, std::vector<FusionMethod> fallback) {
  return spec.methods.empty() ? fallback : spec.methods;
}

// Runs `per_seed(seed_index)` in parallel; returns one record list per seed.
template <class F>
auto over_seeds(const ExperimentSpec& spec, F&& per_seed) {
  using R = decltype(per_seed(std::size_t{0}));
  std::vector<R> out(spec.seeds.size());
  parallel_for(spec.seeds.size(), [&](std::size_t i) { out[i] = per_seed(i); });
  return out;
}

// Transposes per-seed lists of (method, record) into one report per method,
// keeping first-seen method order.
std::vector<RunReport> collect(const ExperimentSpec& spec,
                               const std::vector<std::vector<std::pair<std::string, SeedRecord>>>& per_seed) {
  std::vector<RunReport> reports;
  std::map<std::string, std::size_t> index;
  for (const auto& seed_rows : per_seed) {
    for (const auto& [method, rec] : seed_rows) {
      auto it = index.find(method);
      if (it == index.end()) {
        it = index.emplace(method, reports.size()).first;
        reports.push_back({spec.name, method, {}});
      }
      reports[it->second].records.push_back(rec);
    }
  }
  return reports;
}

Splits load_splits(const ExperimentSpec& spec) { return load_dataset(spec.dataset); }

Fused fuse_pipeline(const ExperimentSpec& spec, const std::vector<Network>& members,
                    Pipeline pipeline, std::uint64_t seed, const Splits& data,
                    std::vector<double>* pre_series) {
  const FusionPlan& plan = spec.plan;
  switch (pipeline) {
    case Pipeline::MergePruneFT:
      return measured([&] { return fuse(members, plan); });
    case Pipeline::PruneMergeFT:
      return measured([&] {
        const KeepPolicy keep = KeepPolicy::with_sparsity(plan.effective_sparsity(members.size()));
        std::vector<Network> pruned;
        pruned.reserve(members.size());
        for (const auto& m : members) pruned.push_back(magnitude_prune(m, keep, plan.include_bias));
        return concat_fuse(pruned);
      });
    case Pipeline::MergeFTPruneFT: {
      Fused merged = measured([&] { return concat_fuse(members); });
      const std::size_t first = spec.finetune_epochs / 2;
      Network big = merged.net;
      if (first > 0) {
        TrainConfig c = finetune_for(spec, seed, "merged");
        c.epochs = first;
        TrainResult r = train(std::move(big), data.train, data.test, c);
        big = std::move(r.net);
        *pre_series = accuracies(r.history);
      }
      Network pruned = plan.sparsity
                           ? magnitude_prune(big, KeepPolicy::with_sparsity(*plan.sparsity), plan.include_bias)
                           : prune_to_architecture(big, members.front(), plan.include_bias);
      merged.net = std::move(pruned);
      return merged;
    }
  }
  throw Error(ErrorKind::InvalidArg, "unknown pipeline");
}

std::vector<std::pair<std::string, SeedRecord>> pipeline_seed(const ExperimentSpec& spec,
                                                              const Splits& data,
                                                              const std::vector<LayerSpec>& arch,
                                                              std::uint64_t seed,
                                                              const std::vector<Pipeline>& pipelines) {
  const TrainedEnsemble ens = train_members(arch, data, member_config(spec), seed, spec.k);
  const double ens_acc = evaluate_ensemble(ens.members, data.test).accuracy;
  const SeedSetup s{spec, data, seed};
  std::vector<std::pair<std::string, SeedRecord>> rows;
  for (Pipeline p : pipelines) {
    std::vector<double> pre;
    Fused f = fuse_pipeline(spec, ens.members, p, seed, data, &pre);
    SeedRecord r;
    if (p == Pipeline::MergeFTPruneFT) {
      // The merged model is the fusion result; its fine-tuning epochs lead the series.
      r.seed = seed;
      r.ensemble_acc = ens_acc;
      r.best_member_acc = ens.best_member_acc;
      r.immediate_acc = ens_acc;
      r.peak_bytes = f.peak_bytes;
      r.wall_seconds = spec.record_timing ? f.seconds : 0.0;
      r.finetuned_acc = pre;
      const std::size_t rest = spec.finetune_epochs - pre.size();
      if (rest > 0) {
        TrainConfig c = finetune_for(spec, seed, "pruned");
        c.epochs = rest;
        const auto tail = accuracies(train(std::move(f.net), data.train, data.test, c).history);
        r.finetuned_acc.insert(r.finetuned_acc.end(), tail.begin(), tail.end());
      } else {
        r.finetuned_acc.push_back(evaluate(f.net, data.test).accuracy);
      }
    } else {
      r = finish(s, ens, ens_acc, std::move(f), std::string(to_string(p)));
    }
    rows.emplace_back(std::string(to_string(p)), std::move(r));
  }
  return rows;
}

std::vector<RunReport> run_pipelines(const ExperimentSpec& spec) {
  spec.validate();
  const Splits data = load_splits(spec);
  const auto arch = spec.arch.build(data.train.sample_shape(), data.train.num_classes);
  const std::vector<Pipeline> pipelines =
      spec.pipelines.empty() ? std::vector<Pipeline>{spec.plan.pipeline} : spec.pipelines;
  for (Pipeline p : pipelines) {
    if (p != Pipeline::MergePruneFT && spec.plan.method != FusionMethod::NT) {
      throw Error(ErrorKind::InvalidArg, std::string("pipeline ") + std::string(to_string(p)) +
                                             " is defined for the joint NT method only");
    }
  }
  auto per_seed = over_seeds(spec, [&](std::size_t i) {
    return pipeline_seed(spec, data, arch, spec.seeds[i], pipelines);
  });
  return collect(spec, per_seed);
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(ExperimentKind k) { return name_of(kKindNames, k); }
std::string_view to_string(SweepAxis a) { return name_of(kAxisNames, a); }
ExperimentKind experiment_kind_from_string(std::string_view s) {
  return value_of(kKindNames, s, "experiment kind");
}
SweepAxis sweep_axis_from_string(std::string_view s) { return value_of(kAxisNames, s, "sweep axis"); }

DatasetDescriptor DatasetDescriptor::from_json(const json& j) {
  DatasetDescriptor d;
  const std::string kind = j.value("kind", "blobs");
  if (kind == "blobs") {
    d.kind = Kind::Blobs;
  } else if (kind == "idx") {
    d.kind = Kind::Idx;
  } else if (kind == "csv") {
    d.kind = Kind::Csv;
  } else {
    throw Error(ErrorKind::InvalidArg, "unknown dataset kind '" + kind + "'");
  }
  d.samples = j.value("samples", d.samples);
  d.classes = j.value("classes", d.classes);
  d.dim = j.value("dim", d.dim);
  d.centers_per_class = j.value("centers_per_class", d.centers_per_class);
  d.spread = j.value("spread", d.spread);
  d.seed = j.value("seed", d.seed);
  d.train_images = j.value("train_images", "");
  d.train_labels = j.value("train_labels", "");
  d.test_images = j.value("test_images", "");
  d.test_labels = j.value("test_labels", "");
  d.path = j.value("path", "");
  if (j.contains("limit") && !j.at("limit").is_null()) d.limit = j.at("limit").get<std::size_t>();
  d.test_fraction = j.value("test_fraction", d.test_fraction);
  d.label_noise = j.value("label_noise", d.label_noise);
  if (j.contains("sample_shape")) d.sample_shape = j.at("sample_shape").get<Shape>();
  return d;
}

json DatasetDescriptor::to_json() const {
  json j;
  switch (kind) {
    case Kind::Blobs:
      j = {{"kind", "blobs"},
           {"samples", samples},
           {"classes", classes},
           {"dim", dim},
           {"centers_per_class", centers_per_class},
           {"spread", spread},
           {"seed", seed}};
      break;
    case Kind::Idx:
      j = {{"kind", "idx"}, {"train_images", train_images}, {"train_labels", train_labels}};
      if (!test_images.empty()) {
        j["test_images"] = test_images;
        j["test_labels"] = test_labels;
      }
      break;
    case Kind::Csv:
      j = {{"kind", "csv"}, {"path", path}};
      break;
  }
  if (limit) j["limit"] = *limit;
  j["test_fraction"] = test_fraction;
  j["label_noise"] = label_noise;
  if (!sample_shape.empty()) j["sample_shape"] = sample_shape;
  return j;
}

Splits load_dataset(const DatasetDescriptor& d) {
  Dataset all;
  std::optional<Dataset> test;
  switch (d.kind) {
    case DatasetDescriptor::Kind::Blobs:
      all = synth_blobs(d.samples, d.classes, d.dim, d.spread, d.seed, d.centers_per_class);
      break;
    case DatasetDescriptor::Kind::Idx:
      all = load_idx(d.train_images, d.train_labels, d.limit);
      if (!d.test_images.empty()) test = load_idx(d.test_images, d.test_labels, d.limit);
      break;
    case DatasetDescriptor::Kind::Csv:
      all = load_csv(d.path);
      if (d.limit && *d.limit < all.size()) {
        std::vector<std::size_t> first(*d.limit);
        for (std::size_t i = 0; i < first.size(); ++i) first[i] = i;
        all = all.subset(first);
      }
      break;
  }
  Splits s;
  if (test) {
    s.train = std::move(all);
    s.test = std::move(*test);
    s.test.split = Split::Test;
    s.test.num_classes = s.train.num_classes = std::max(s.train.num_classes, s.test.num_classes);
  } else {
    auto [tr, te] = train_test_split(all, d.test_fraction, d.seed);
    s.train = std::move(tr);
    s.test = std::move(te);
  }
  s.train = with_label_noise(std::move(s.train), d.label_noise, d.seed);
  if (!d.sample_shape.empty()) {
    for (Dataset* ds : {&s.train, &s.test}) {
      Shape full{ds->size()};
      full.insert(full.end(), d.sample_shape.begin(), d.sample_shape.end());
      ds->features = ds->features.reshaped(full);
    }
  }
  s.train.validate();
  s.test.validate();
  return s;
}

std::vector<LayerSpec> ArchTemplate::build(const Shape& input, std::size_t classes) const {
  if (width == 0 || depth == 0) throw Error(ErrorKind::InvalidArg, "arch width and depth must be >= 1");
  std::vector<LayerSpec> specs;
  if (kind == Kind::Mlp) {
    std::size_t in = shape_product(input);
    if (input.size() != 1) specs.push_back(LayerSpec::flatten());
    for (std::size_t d = 0; d < depth; ++d) {
      specs.push_back(LayerSpec::linear(in, width));
      specs.push_back(LayerSpec::relu());
      in = width;
    }
    specs.push_back(LayerSpec::linear(in, classes));
    return specs;
  }
  if (input.size() != 3) {
    throw Error(ErrorKind::UnsupportedTopology, "conv template needs [c,h,w] samples");
  }
  std::size_t c = input[0], h = input[1], w = input[2];
  for (std::size_t d = 0; d < depth; ++d) {
    specs.push_back(LayerSpec::conv(c, width, kernel, 1, kernel / 2));
    h = h + 2 * (kernel / 2) - kernel + 1;
    w = w + 2 * (kernel / 2) - kernel + 1;
    if (batchnorm) specs.push_back(LayerSpec::batchnorm(width));
    specs.push_back(LayerSpec::relu());
    if (pool > 1 && h >= pool && w >= pool) {
      specs.push_back(LayerSpec::maxpool(pool));
      h /= pool;
      w /= pool;
    }
    c = width;
  }
  specs.push_back(LayerSpec::flatten());
  specs.push_back(LayerSpec::linear(c * h * w, classes));
  return specs;
}

ArchTemplate ArchTemplate::from_json(const json& j) {
  ArchTemplate a;
  const std::string kind = j.value("kind", "mlp");
  if (kind == "mlp") {
    a.kind = Kind::Mlp;
  } else if (kind == "conv") {
    a.kind = Kind::Conv;
  } else {
    throw Error(ErrorKind::InvalidArg, "unknown arch kind '" + kind + "'");
  }
  a.width = j.value("width", a.width);
  a.depth = j.value("depth", a.depth);
  a.kernel = j.value("kernel", a.kernel);
  a.batchnorm = j.value("batchnorm", a.batchnorm);
  a.pool = j.value("pool", a.pool);
  return a;
}

json ArchTemplate::to_json() const {
  json j = {{"kind", kind == Kind::Mlp ? "mlp" : "conv"}, {"width", width}, {"depth", depth}};
  if (kind == Kind::Conv) {
    j["kernel"] = kernel;
    j["batchnorm"] = batchnorm;
    j["pool"] = pool;
  }
  return j;
}

TrainConfig ExperimentSpec::finetune_config() const {
  TrainConfig c = member_train;
  c.epochs = finetune_epochs;
  return c;
}

void ExperimentSpec::validate() const {
  if (seeds.empty()) throw Error(ErrorKind::InvalidArg, "experiment needs at least one seed");
  if (k < 2 && kind != ExperimentKind::FailureCase && kind != ExperimentKind::MultiModel) {
    throw Error(ErrorKind::InvalidArg, "fusion needs k >= 2");
  }
  for (std::size_t v : ks) {
    if (kind == ExperimentKind::MultiModel && v < 2) throw Error(ErrorKind::InvalidArg, "ks entries must be >= 2");
  }
  if (plan.sparsity && !(*plan.sparsity >= 0.0 && *plan.sparsity < 1.0)) {
    throw Error(ErrorKind::InvalidArg, "sparsity must lie in [0, 1)");
  }
  member_train.validate();
  kd.validate();
  if (kind == ExperimentKind::Sweep && values.empty()) {
    throw Error(ErrorKind::InvalidArg, "sweep needs at least one value");
  }
  if (kind == ExperimentKind::CompareMethods && k != 2) {
    throw Error(ErrorKind::InvalidArg, "method comparison runs on k = 2");
  }
  if (kind == ExperimentKind::MultiModel && ks.empty()) {
    throw Error(ErrorKind::InvalidArg, "multimodel needs at least one k");
  }
}

ExperimentSpec ExperimentSpec::from_json(const json& j) {
  ExperimentSpec s;
  s.name = j.value("name", s.name);
  s.kind = experiment_kind_from_string(j.value("kind", std::string(to_string(s.kind))));
  if (j.contains("dataset")) s.dataset = DatasetDescriptor::from_json(j.at("dataset"));
  if (j.contains("arch")) s.arch = ArchTemplate::from_json(j.at("arch"));
  s.k = j.value("k", s.k);
  if (j.contains("seeds")) s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("train")) s.member_train = train_from_json(j.at("train"));
  s.finetune_epochs = j.value("finetune_epochs", s.finetune_epochs);
  if (j.contains("plan")) {
    const json& p = j.at("plan");
    s.plan.method = fusion_method_from_string(p.value("method", "nt"));
    if (p.contains("sparsity") && !p.at("sparsity").is_null()) s.plan.sparsity = p.at("sparsity").get<double>();
    s.plan.pipeline = pipeline_from_string(p.value("pipeline", "merge-prune-ft"));
    s.plan.include_bias = p.value("include_bias", true);
  }
  s.output = j.value("output", s.output);
  s.record_timing = j.value("record_timing", s.record_timing);
  if (j.contains("ks")) s.ks = j.at("ks").get<std::vector<std::size_t>>();
  if (j.contains("methods")) {
    for (const auto& m : j.at("methods")) s.methods.push_back(fusion_method_from_string(m.get<std::string>()));
  }
  if (j.contains("pipelines")) {
    for (const auto& p : j.at("pipelines")) s.pipelines.push_back(pipeline_from_string(p.get<std::string>()));
  }
  if (j.contains("axis")) s.axis = sweep_axis_from_string(j.at("axis").get<std::string>());
  if (j.contains("values")) s.values = j.at("values").get<std::vector<double>>();
  s.distill = j.value("distill", s.distill);
  if (j.contains("kd")) {
    s.kd.temperature = j.at("kd").value("temperature", s.kd.temperature);
    s.kd.soft_weight = j.at("kd").value("soft_weight", s.kd.soft_weight);
  }
  if (j.contains("widths")) s.widths = j.at("widths").get<std::vector<std::size_t>>();
  s.cost_input_dim = j.value("cost_input_dim", s.cost_input_dim);
  s.cost_repeats = j.value("cost_repeats", s.cost_repeats);
  s.plan.finetune = s.finetune_config();
  s.validate();
  return s;
}

json ExperimentSpec::to_json() const {
  json plan_j = {{"method", to_string(plan.method)},
                 {"pipeline", to_string(plan.pipeline)},
                 {"include_bias", plan.include_bias}};
  plan_j["sparsity"] = plan.sparsity ? json(*plan.sparsity) : json(nullptr);
  json j = {{"name", name},
            {"kind", to_string(kind)},
            {"dataset", dataset.to_json()},
            {"arch", arch.to_json()},
            {"k", k},
            {"seeds", seeds},
            {"train", train_to_json(member_train)},
            {"finetune_epochs", finetune_epochs},
            {"plan", plan_j},
            {"output", output},
            {"record_timing", record_timing}};
  switch (kind) {
    case ExperimentKind::MultiModel: j["ks"] = ks; break;
    case ExperimentKind::Sweep:
      j["axis"] = to_string(axis);
      j["values"] = values;
      break;
    case ExperimentKind::CompareMethods:
      j["distill"] = distill;
      j["kd"] = {{"temperature", kd.temperature}, {"soft_weight", kd.soft_weight}};
      break;
    case ExperimentKind::FusionCost:
      j["widths"] = widths;
      j["cost_input_dim"] = cost_input_dim;
      j["cost_repeats"] = cost_repeats;
      break;
    default: break;
  }
  if (!methods.empty()) {
    json m = json::array();
    for (auto x : methods) m.push_back(to_string(x));
    j["methods"] = m;
  }
  if (!pipelines.empty()) {
    json p = json::array();
    for (auto x : pipelines) p.push_back(to_string(x));
    j["pipelines"] = p;
  }
  return j;
}

ExperimentSpec load_experiment_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot open experiment spec " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::InvalidArg, "experiment spec " + path + ": " + e.what());
  }
  return ExperimentSpec::from_json(j);
}

// ---------------------------------------------------------------------------

double SeedRecord::best_finetuned() const {
  if (finetuned_acc.empty()) return immediate_acc;
  return *std::max_element(finetuned_acc.begin(), finetuned_acc.end());
}

double SeedRecord::finetuned_after(std::size_t epochs) const {
  if (epochs == 0 || finetuned_acc.empty()) return immediate_acc;
  return finetuned_acc[std::min(epochs, finetuned_acc.size()) - 1];
}

Stat summarize(const std::vector<double>& values) {
  Stat s;
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return s;
}

Aggregate RunReport::aggregate() const {
  Aggregate a;
  auto column = [&](auto get) {
    std::vector<double> v;
    v.reserve(records.size());
    for (const auto& r : records) v.push_back(get(r));
    return summarize(v);
  };
  a.ensemble_acc = column([](const SeedRecord& r) { return r.ensemble_acc; });
  a.best_member_acc = column([](const SeedRecord& r) { return r.best_member_acc; });
  a.immediate_acc = column([](const SeedRecord& r) { return r.immediate_acc; });
  a.best_finetuned_acc = column([](const SeedRecord& r) { return r.best_finetuned(); });
  a.wall_seconds = column([](const SeedRecord& r) { return r.wall_seconds; });
  a.peak_bytes = column([](const SeedRecord& r) { return static_cast<double>(r.peak_bytes); });
  std::size_t epochs = 0;
  for (const auto& r : records) epochs = std::max(epochs, r.finetuned_acc.size());
  for (std::size_t e = 0; e < epochs; ++e) {
    std::vector<double> v;
    for (const auto& r : records) {
      if (e < r.finetuned_acc.size()) v.push_back(r.finetuned_acc[e]);
    }
    a.finetuned_acc.push_back(summarize(v));
  }
  return a;
}

std::uint64_t member_seed(std::uint64_t seed, std::size_t member) {
  return derive(seed, "member/" + std::to_string(member));
}

TrainedMember train_member(const std::vector<LayerSpec>& arch, const Splits& data,
                           const TrainConfig& cfg, std::uint64_t seed, std::size_t m) {
  const std::uint64_t ms = member_seed(seed, m);
  RngStream init(ms, "init");
  Network net = Network::initialized(data.train.sample_shape(), arch, init);
  TrainConfig c = cfg;
  c.batch.shuffle_seed = ms;
  c.seed = ms;
  TrainResult r = train(std::move(net), data.train, data.test, c);
  const double acc = evaluate(r.net, data.test).accuracy;
  return {std::move(r.net), acc};
}

TrainedEnsemble train_members(const std::vector<LayerSpec>& arch, const Splits& data,
                              const TrainConfig& cfg, std::uint64_t seed, std::size_t k) {
  TrainedEnsemble ens;
  for (std::size_t m = 0; m < k; ++m) {
    TrainedMember t = train_member(arch, data, cfg, seed, m);
    ens.member_acc.push_back(t.accuracy);
    ens.best_member_acc = std::max(ens.best_member_acc, t.accuracy);
    ens.members.push_back(std::move(t.net));
  }
  return ens;
}

std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("NT_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = static_cast<std::size_t>(v);
  }
  return n;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

RunReport run_pipeline(const ExperimentSpec& spec) {
  ExperimentSpec single = spec;
  single.pipelines = {spec.plan.pipeline};
  return run_pipelines(single).front();
}

std::vector<RunReport> ablation_multimodel(const ExperimentSpec& spec) {
  spec.validate();
  const Splits data = load_splits(spec);
  const auto arch = spec.arch.build(data.train.sample_shape(), data.train.num_classes);
  const auto methods = methods_or(
      spec, {FusionMethod::NT, FusionMethod::NTIterative, FusionMethod::NTRecursive});
  const std::size_t k_max = *std::max_element(spec.ks.begin(), spec.ks.end());
  auto per_seed = over_seeds(spec, [&](std::size_t i) {
    const std::uint64_t seed = spec.seeds[i];
    const TrainedEnsemble all = train_members(arch, data, member_config(spec), seed, k_max);
    const SeedSetup s{spec, data, seed};
    std::vector<std::pair<std::string, SeedRecord>> rows;
    for (std::size_t k : spec.ks) {
      TrainedEnsemble ens;
      ens.members.assign(all.members.begin(), all.members.begin() + static_cast<std::ptrdiff_t>(k));
      ens.member_acc.assign(all.member_acc.begin(), all.member_acc.begin() + static_cast<std::ptrdiff_t>(k));
      ens.best_member_acc = *std::max_element(ens.member_acc.begin(), ens.member_acc.end());
      const double ens_acc = evaluate_ensemble(ens.members, data.test).accuracy;
      for (FusionMethod m : methods) {
        FusionPlan plan = spec.plan;
        plan.method = m;
        Fused f = measured([&] { return fuse(ens.members, plan); });
        const std::string label = tagged(to_string(m), "k", std::to_string(k));
        rows.emplace_back(label, finish(s, ens, ens_acc, std::move(f), label));
      }
    }
    return rows;
  });
  return collect(spec, per_seed);
}

std::vector<RunReport> ablation_sweep(const ExperimentSpec& spec) {
  spec.validate();
  const Splits data = load_splits(spec);
  auto per_seed = over_seeds(spec, [&](std::size_t i) {
    const std::uint64_t seed = spec.seeds[i];
    const SeedSetup s{spec, data, seed};
    std::vector<std::pair<std::string, SeedRecord>> rows;
    const std::string axis(to_string(spec.axis));
    if (spec.axis == SweepAxis::Width || spec.axis == SweepAxis::Depth) {
      for (double v : spec.values) {
        ArchTemplate a = spec.arch;
        const auto n = static_cast<std::size_t>(std::llround(v));
        (spec.axis == SweepAxis::Width ? a.width : a.depth) = n;
        const auto arch = a.build(data.train.sample_shape(), data.train.num_classes);
        const TrainedEnsemble ens = train_members(arch, data, member_config(spec), seed, spec.k);
        const double ens_acc = evaluate_ensemble(ens.members, data.test).accuracy;
        Fused f = measured([&] { return fuse(ens.members, spec.plan); });
        const std::string label = tagged(to_string(spec.plan.method), axis, std::to_string(n));
        rows.emplace_back(label, finish(s, ens, ens_acc, std::move(f), label));
      }
      return rows;
    }
    const auto arch = spec.arch.build(data.train.sample_shape(), data.train.num_classes);
    const std::size_t k = spec.axis == SweepAxis::TransplantFraction ? 2 : spec.k;
    const TrainedEnsemble ens = train_members(arch, data, member_config(spec), seed, k);
    const double ens_acc = evaluate_ensemble(ens.members, data.test).accuracy;
    for (double v : spec.values) {
      Fused f;
      std::string label;
      if (spec.axis == SweepAxis::TransplantFraction) {
        f = measured([&] { return transplant_fraction(ens.members[0], ens.members[1], v); });
        label = tagged("transplant", "p", fmt_value(v));
      } else {
        f = measured([&] { return fuse_nt(ens.members, v, spec.plan.include_bias); });
        label = tagged("nt", "s", fmt_value(v));
      }
      rows.emplace_back(label, finish(s, ens, ens_acc, std::move(f), label));
    }
    return rows;
  });
  return collect(spec, per_seed);
}

std::vector<RunReport> failure_case(const ExperimentSpec& spec) {
  spec.validate();
  const Splits data = load_splits(spec);
  const auto arch = spec.arch.build(data.train.sample_shape(), data.train.num_classes);
  auto per_seed = over_seeds(spec, [&](std::size_t i) {
    const std::uint64_t seed = spec.seeds[i];
    const SeedSetup s{spec, data, seed};
    const TrainedEnsemble one = train_members(arch, data, member_config(spec), seed, 1);
    const std::vector<Network> twins{one.members[0], one.members[0]};
    const double acc = one.best_member_acc;
    std::vector<std::pair<std::string, SeedRecord>> rows;
    Fused nt = measured([&] { return fuse_nt(twins, std::nullopt, spec.plan.include_bias); });
    rows.emplace_back("nt-self", finish(s, one, acc, std::move(nt), "nt-self"));
    Fused avg = measured([&] { return vanilla_average(twins); });
    rows.emplace_back("avg-self", finish(s, one, acc, std::move(avg), "avg-self"));
    return rows;
  });
  return collect(spec, per_seed);
}

std::vector<RunReport> compare_methods(const ExperimentSpec& spec) {
  spec.validate();
  const Splits data = load_splits(spec);
  const auto arch = spec.arch.build(data.train.sample_shape(), data.train.num_classes);
  const auto methods =
      methods_or(spec, {FusionMethod::NT, FusionMethod::VanillaAvg, FusionMethod::AlignAvg});
  auto per_seed = over_seeds(spec, [&](std::size_t i) {
    const std::uint64_t seed = spec.seeds[i];
    const SeedSetup s{spec, data, seed};
    const TrainedEnsemble ens = train_members(arch, data, member_config(spec), seed, spec.k);
    const double ens_acc = evaluate_ensemble(ens.members, data.test).accuracy;
    std::vector<std::pair<std::string, SeedRecord>> rows;
    for (FusionMethod m : methods) {
      FusionPlan plan = spec.plan;
      plan.method = m;
      Fused f = measured([&] { return fuse(ens.members, plan); });
      const std::string label(to_string(m));
      if (spec.distill) {
        Fused copy{f.net, f.seconds, f.peak_bytes};
        SeedRecord r;
        r.seed = seed;
        r.ensemble_acc = ens_acc;
        r.best_member_acc = ens.best_member_acc;
        r.immediate_acc = evaluate(copy.net, data.test).accuracy;
        r.peak_bytes = copy.peak_bytes;
        r.wall_seconds = spec.record_timing ? copy.seconds : 0.0;
        if (spec.finetune_epochs > 0) {
          const TrainResult kd = distill(std::move(copy.net), ens.members, data.train, data.test,
                                         finetune_for(spec, seed, label + "+kd"), spec.kd);
          r.finetuned_acc = accuracies(kd.history);
        }
        rows.emplace_back(label, finish(s, ens, ens_acc, std::move(f), label));
        rows.emplace_back(label + "+kd", std::move(r));
      } else {
        rows.emplace_back(label, finish(s, ens, ens_acc, std::move(f), label));
      }
    }
    return rows;
  });
  return collect(spec, per_seed);
}

std::vector<CostRow> measure_fusion_cost(const std::vector<std::size_t>& widths, std::size_t k,
                                         std::size_t input_dim, std::size_t repeats,
                                         std::uint64_t seed) {
  if (k < 2) throw Error(ErrorKind::InvalidArg, "fusion cost needs k >= 2");
  if (repeats == 0) repeats = 1;
  std::vector<CostRow> rows;
  for (std::size_t width : widths) {
    std::vector<Network> members;
    for (std::size_t m = 0; m < k; ++m) {
      RngStream rng(member_seed(seed, m), "cost/" + std::to_string(width));
      members.push_back(Network::initialized(
          {input_dim}, {LayerSpec::linear(input_dim, width), LayerSpec::relu(), LayerSpec::linear(width, 10)},
          rng));
    }
    std::size_t model_bytes = 0;
    for (const auto& m : members) model_bytes += m.parameter_bytes();
    auto run = [&](const std::string& method, auto&& make) {
      CostRow row{method, width, k, 0.0, 0, model_bytes};
      for (std::size_t r = 0; r < repeats; ++r) {
        Fused f = measured(make);
        row.seconds = r == 0 ? f.seconds : std::min(row.seconds, f.seconds);
        row.peak_bytes = std::max(row.peak_bytes, f.peak_bytes);
      }
      rows.push_back(row);
    };
    run("avg", [&] { return vanilla_average(members); });
    run("nt", [&] { return fuse_nt(members); });
    if (k == 2 && width <= 1024) run("align", [&] { return align_average(members[0], members[1]); });
  }
  return rows;
}

std::vector<RunReport> run_experiment(const ExperimentSpec& spec) {
  switch (spec.kind) {
    case ExperimentKind::Pipeline: return run_pipelines(spec);
    case ExperimentKind::MultiModel: return ablation_multimodel(spec);
    case ExperimentKind::Sweep: return ablation_sweep(spec);
    case ExperimentKind::FailureCase: return failure_case(spec);
    case ExperimentKind::CompareMethods: return compare_methods(spec);
    case ExperimentKind::FusionCost: {
      spec.validate();
      std::vector<RunReport> reports;
      for (const CostRow& row : measure_fusion_cost(spec.widths, spec.k, spec.cost_input_dim,
                                                    spec.cost_repeats, spec.seeds.front())) {
        SeedRecord r;
        r.seed = spec.seeds.front();
        r.wall_seconds = row.seconds;
        r.peak_bytes = row.peak_bytes;
        reports.push_back({spec.name, tagged(row.method, "width", std::to_string(row.width)), {r}});
      }
      return reports;
    }
  }
  throw Error(ErrorKind::InvalidArg, "unknown experiment kind");
}

}  // namespace nt
