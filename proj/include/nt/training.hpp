#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "nt/datasets.hpp"
#include "nt/losses.hpp"
#include "nt/network.hpp"

namespace nt {

struct Schedule {
  enum class Kind { Constant, StepDecay };
  Kind kind = Kind::Constant;
  std::size_t period = 30;
  float factor = 0.5f;

  static Schedule constant() { return {}; }
  static Schedule step_decay(std::size_t period, float factor) {
    return {Kind::StepDecay, period, factor};
  }
  float learning_rate(float base, std::size_t epoch) const;
};

struct TrainConfig {
  std::size_t epochs = 20;
  float lr = 0.01f;
  float momentum = 0.9f;
  Schedule schedule;
  BatchPlan batch;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
  double wall_seconds = 0.0;
};

struct History {
  std::vector<EpochRecord> records;

  // Maximum test accuracy over the recorded epochs (0 when empty).
  double best_accuracy() const;
};

struct Evaluation {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

struct TrainResult {
  Network net;
  History history;
};

// Index of the largest logit; the first index wins ties.
std::size_t argmax_first(std::span<const float> row);

Evaluation evaluate(const Network& net, const Dataset& ds, std::size_t batch_size = 1024);

// Heavy-ball momentum: v <- momentum * v - lr * g; w <- w + v.
class SgdMomentum {
 public:
  explicit SgdMomentum(const Network& net, float momentum);
  void step(Network& net, const Gradients& grads, float lr);

 private:
  float momentum_;
  std::vector<LayerGradient> velocity_;
};

// Mini-batch SGD. Each epoch is followed by an Eval-mode pass over `test`.
// The shuffle order of epoch e depends on (cfg.batch.shuffle_seed, e) only.
TrainResult train(Network net, const Dataset& train_set, const Dataset& test_set,
                  const TrainConfig& cfg);

// Uniform mean of Eval-mode logits over the teachers.
Tensor ensemble_logits(std::span<const Network> teachers, const Tensor& batch);

Evaluation evaluate_ensemble(std::span<const Network> members, const Dataset& ds);

// Trains the student on kd_loss against the teachers' averaged logits.
TrainResult distill(Network student, std::span<const Network> teachers, const Dataset& train_set,
                    const Dataset& test_set, const TrainConfig& cfg, const KdConfig& kd);

}  // namespace nt
