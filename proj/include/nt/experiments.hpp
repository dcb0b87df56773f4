#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nt/datasets.hpp"
#include "nt/fusion.hpp"
#include "nt/training.hpp"

namespace nt {

struct DatasetDescriptor {
  enum class Kind { Blobs, Idx, Csv };
  Kind kind = Kind::Blobs;

  // blobs
  std::size_t samples = 4000;
  std::size_t classes = 10;
  std::size_t dim = 16;
  std::size_t centers_per_class = 4;
  float spread = 0.8f;
  std::uint64_t seed = 7;

  // idx / csv
  std::string train_images, train_labels, test_images, test_labels;
  std::string path;
  std::optional<std::size_t> limit;

  // Used when there is no separate test file.
  double test_fraction = 0.6;
  // Applied to the training split only.
  double label_noise = 0.0;
  // Optional per-sample reshape, e.g. [1, 28, 28] for conv templates.
  Shape sample_shape;

  static DatasetDescriptor from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct Splits {
  Dataset train;
  Dataset test;
};

Splits load_dataset(const DatasetDescriptor& d);

struct ArchTemplate {
  enum class Kind { Mlp, Conv };
  Kind kind = Kind::Mlp;
  std::size_t width = 64;
  std::size_t depth = 3;
  // conv only
  std::size_t kernel = 3;
  bool batchnorm = true;
  std::size_t pool = 2;

  std::vector<LayerSpec> build(const Shape& input, std::size_t classes) const;

  static ArchTemplate from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

enum class ExperimentKind { Pipeline, MultiModel, Sweep, FailureCase, CompareMethods, FusionCost };
enum class SweepAxis { Width, Depth, TransplantFraction, Sparsity };

std::string_view to_string(ExperimentKind k);
std::string_view to_string(SweepAxis a);
ExperimentKind experiment_kind_from_string(std::string_view s);
SweepAxis sweep_axis_from_string(std::string_view s);

struct ExperimentSpec {
  std::string name = "experiment";
  ExperimentKind kind = ExperimentKind::Pipeline;
  DatasetDescriptor dataset;
  ArchTemplate arch;
  std::size_t k = 2;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  FusionPlan plan;
  TrainConfig member_train;
  std::size_t finetune_epochs = 20;
  std::string output = "reports";
  // Write measured wall times; off keeps reports byte-reproducible.
  bool record_timing = false;

  // multimodel
  std::vector<std::size_t> ks{2, 4, 8};
  // Empty picks the experiment's default set.
  std::vector<FusionMethod> methods;
  // pipeline experiments; empty runs plan.pipeline only
  std::vector<Pipeline> pipelines;
  // sweep
  SweepAxis axis = SweepAxis::Width;
  std::vector<double> values;
  // compare
  bool distill = false;
  KdConfig kd;
  // fusion cost
  std::vector<std::size_t> widths{256, 1024, 4096};
  std::size_t cost_input_dim = 784;
  std::size_t cost_repeats = 3;

  // Fine-tuning uses the member optimiser settings with `finetune_epochs`.
  TrainConfig finetune_config() const;

  void validate() const;
  static ExperimentSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

ExperimentSpec load_experiment_spec(const std::string& path);

struct SeedRecord {
  std::uint64_t seed = 0;
  double ensemble_acc = 0.0;
  double best_member_acc = 0.0;
  double immediate_acc = 0.0;
  std::vector<double> finetuned_acc;  // index e = after epoch e + 1
  double wall_seconds = 0.0;
  std::size_t peak_bytes = 0;

  // Max over the fine-tuning window, or the immediate accuracy when empty.
  double best_finetuned() const;
  // Accuracy after `epochs` fine-tuning epochs (clamped to the window).
  double finetuned_after(std::size_t epochs) const;
};

struct Stat {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
};

Stat summarize(const std::vector<double>& values);

struct Aggregate {
  Stat ensemble_acc, best_member_acc, immediate_acc, best_finetuned_acc, wall_seconds, peak_bytes;
  std::vector<Stat> finetuned_acc;
};

struct RunReport {
  std::string experiment;
  std::string method;
  std::vector<SeedRecord> records;

  Aggregate aggregate() const;
};

// Members and their individual test accuracies for one seed.
struct TrainedEnsemble {
  std::vector<Network> members;
  std::vector<double> member_acc;
  double best_member_acc = 0.0;
};

std::uint64_t member_seed(std::uint64_t seed, std::size_t member);

struct TrainedMember {
  Network net;
  double accuracy = 0.0;
};

// Member m of `seed`: init stream and shuffle order keyed by member_seed(seed, m).
TrainedMember train_member(const std::vector<LayerSpec>& arch, const Splits& data,
                           const TrainConfig& cfg, std::uint64_t seed, std::size_t m);

// Trains `k` members of `arch`; member m depends only on (seed, m).
TrainedEnsemble train_members(const std::vector<LayerSpec>& arch, const Splits& data,
                              const TrainConfig& cfg, std::uint64_t seed, std::size_t k);

// Runs `fn(i)` for i in [0, n) on up to NT_THREADS workers.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);
std::size_t worker_count();

RunReport run_pipeline(const ExperimentSpec& spec);
std::vector<RunReport> ablation_multimodel(const ExperimentSpec& spec);
std::vector<RunReport> ablation_sweep(const ExperimentSpec& spec);
// NT of a member with its own copy, plus the same harness under vanilla averaging.
std::vector<RunReport> failure_case(const ExperimentSpec& spec);
std::vector<RunReport> compare_methods(const ExperimentSpec& spec);

struct CostRow {
  std::string method;
  std::size_t width = 0;
  std::size_t k = 0;
  double seconds = 0.0;           // best of the repeats
  std::size_t peak_bytes = 0;     // allocations during fusion above the live baseline
  std::size_t model_bytes = 0;    // bytes of the k input models
};

// One-hidden-layer members of the given widths; averaging, NT and (up to
// width 1024) align-and-average.
std::vector<CostRow> measure_fusion_cost(const std::vector<std::size_t>& widths, std::size_t k,
                                         std::size_t input_dim = 784, std::size_t repeats = 3,
                                         std::uint64_t seed = 0);

// Dispatches on spec.kind; fusion cost rows are folded into reports.
std::vector<RunReport> run_experiment(const ExperimentSpec& spec);

}  // namespace nt
