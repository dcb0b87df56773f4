#include "nt/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace nt {

float Schedule::learning_rate(float base, std::size_t epoch) const {
  if (kind == Kind::Constant || period == 0) return base;
  return base * std::pow(factor, static_cast<float>(epoch / period));
}

void TrainConfig::validate() const {
  if (!(lr > 0.0f)) throw Error(ErrorKind::InvalidArg, "lr must be > 0");
  if (!(momentum >= 0.0f && momentum < 1.0f)) {
    throw Error(ErrorKind::InvalidArg, "momentum must lie in [0, 1)");
  }
  if (batch.batch_size == 0) throw Error(ErrorKind::InvalidArg, "batch_size must be >= 1");
}

double History::best_accuracy() const {
  double best = 0.0;
  for (const auto& r : records) best = std::max(best, r.test_accuracy);
  return best;
}

std::size_t argmax_first(std::span<const float> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

namespace {

void check_dataset(const Network& net, const Dataset& ds, const char* what) {
  if (ds.sample_shape() != net.input_shape()) {
    throw Error(ErrorKind::ArchMismatch, std::string(what) + " samples " +
                                             shape_string(ds.sample_shape()) +
                                             " do not match network input " +
                                             shape_string(net.input_shape()));
  }
  if (ds.num_classes > net.num_classes()) {
    throw Error(ErrorKind::ArchMismatch, std::string(what) + " has more classes than the head");
  }
}

template <class LogitsFn>
Evaluation evaluate_with(const Dataset& ds, std::size_t batch_size, LogitsFn&& logits_of) {
  Evaluation ev;
  if (ds.size() == 0) return ev;
  std::size_t correct = 0;
  double loss = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t end = std::min(ds.size(), start + batch_size);
    idx.resize(end - start);
    for (std::size_t i = start; i < end; ++i) idx[i - start] = i;
    const Dataset part = ds.subset(idx);
    const Tensor logits = logits_of(part.features);
    for (std::size_t i = 0; i < part.size(); ++i) {
      const auto row = logits.row(i);
      if (static_cast<int>(argmax_first(row)) == part.labels[i]) ++correct;
      loss += sample_cross_entropy(row, part.labels[i]);
    }
  }
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  ev.mean_loss = loss / static_cast<double>(ds.size());
  return ev;
}

using Clock = std::chrono::steady_clock;

template <class StepFn>
TrainResult run_epochs(Network net, const Dataset& train_set, const Dataset& test_set,
                       const TrainConfig& cfg, StepFn&& loss_for_batch) {
  cfg.validate();
  TrainResult result{std::move(net), {}};
  if (cfg.epochs == 0) return result;
  SgdMomentum opt(result.net, cfg.momentum);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = Clock::now();
    const float lr = cfg.schedule.learning_rate(cfg.lr, epoch);
    const auto plan = batches(train_set, cfg.batch, epoch);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < plan.size(); ++b) {
      Gradients g;
      try {
        g = loss_for_batch(result.net, plan[b]);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::NonFiniteLoss && e.kind() != ErrorKind::NonFinite) throw;
        throw Error(ErrorKind::NonFiniteLoss, "epoch " + std::to_string(epoch) + " batch " +
                                                  std::to_string(b) + ": " + e.what());
      }
      opt.step(result.net, g, lr);
      loss_sum += g.loss * static_cast<double>(plan[b].labels.size());
      seen += plan[b].labels.size();
    }
    const Evaluation ev = evaluate(result.net, test_set);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    rec.test_loss = ev.mean_loss;
    rec.test_accuracy = ev.accuracy;
    rec.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    result.history.records.push_back(rec);
  }
  return result;
}

}  // namespace

Evaluation evaluate(const Network& net, const Dataset& ds, std::size_t batch_size) {
  check_dataset(net, ds, "dataset");
  return evaluate_with(ds, batch_size, [&](const Tensor& x) { return net.predict(x); });
}

SgdMomentum::SgdMomentum(const Network& net, float momentum) : momentum_(momentum) {
  velocity_.resize(net.size());
  for (std::size_t i = 0; i < net.size(); ++i) {
    const Layer& l = net.layer(i);
    if (!l.spec.has_params()) continue;
    velocity_[i].weight = Tensor(l.weight.shape());
    velocity_[i].bias = Tensor(l.bias.shape());
  }
}

void SgdMomentum::step(Network& net, const Gradients& grads, float lr) {
  if (grads.layers.size() != net.size() || velocity_.size() != net.size()) {
    throw Error(ErrorKind::ShapeMismatch, "gradient layout does not match network");
  }
  auto update = [&](Tensor& param, Tensor& vel, const Tensor& grad) {
    if (grad.empty()) return;
    float* w = param.data();
    float* v = vel.data();
    const float* g = grad.data();
    for (std::size_t k = 0; k < param.size(); ++k) {
      v[k] = momentum_ * v[k] - lr * g[k];
      w[k] += v[k];
    }
  };
  for (std::size_t i = 0; i < net.size(); ++i) {
    Layer& l = net.layer(i);
    if (!l.spec.has_params()) continue;
    update(l.weight, velocity_[i].weight, grads.layers[i].weight);
    update(l.bias, velocity_[i].bias, grads.layers[i].bias);
  }
}

TrainResult train(Network net, const Dataset& train_set, const Dataset& test_set,
                  const TrainConfig& cfg) {
  check_dataset(net, train_set, "train set");
  check_dataset(net, test_set, "test set");
  return run_epochs(std::move(net), train_set, test_set, cfg, [](Network& n, const Batch& b) {
    return backward(n, b.features, b.labels, CrossEntropyLoss{});
  });
}

Tensor ensemble_logits(std::span<const Network> teachers, const Tensor& batch) {
  if (teachers.empty()) throw Error(ErrorKind::InvalidArg, "no teachers");
  Tensor sum = teachers[0].predict(batch);
  for (std::size_t t = 1; t < teachers.size(); ++t) {
    const Tensor logits = teachers[t].predict(batch);
    if (logits.shape() != sum.shape()) {
      throw Error(ErrorKind::ShapeMismatch, "teachers disagree on output shape");
    }
    for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += logits[k];
  }
  const float inv = 1.0f / static_cast<float>(teachers.size());
  for (float& v : sum.values()) v *= inv;
  return sum;
}

Evaluation evaluate_ensemble(std::span<const Network> members, const Dataset& ds) {
  if (members.empty()) throw Error(ErrorKind::InvalidArg, "empty ensemble");
  for (const auto& m : members) check_dataset(m, ds, "dataset");
  return evaluate_with(ds, 1024, [&](const Tensor& x) { return ensemble_logits(members, x); });
}

TrainResult distill(Network student, std::span<const Network> teachers, const Dataset& train_set,
                    const Dataset& test_set, const TrainConfig& cfg, const KdConfig& kd) {
  kd.validate();
  check_dataset(student, train_set, "train set");
  check_dataset(student, test_set, "test set");
  for (const auto& t : teachers) check_dataset(t, train_set, "train set (teacher)");
  if (teachers.empty()) throw Error(ErrorKind::InvalidArg, "distill needs at least one teacher");
  return run_epochs(std::move(student), train_set, test_set, cfg,
                    [&](Network& n, const Batch& b) {
                      const Tensor teacher = ensemble_logits(teachers, b.features);
                      return backward(n, b.features, b.labels, DistillationLoss{&teacher, kd});
                    });
}

}  // namespace nt
