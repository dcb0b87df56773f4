#include "nt/losses.hpp"

#include <cmath>
#include <vector>

namespace nt {

namespace {

void check_logits(const Tensor& logits, std::span<const int> labels, const char* op) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw Error(ErrorKind::ShapeMismatch, std::string(op) + ": logits " +
                                              shape_string(logits.shape()) + " vs " +
                                              std::to_string(labels.size()) + " labels");
  }
  const auto classes = static_cast<int>(logits.dim(1));
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw Error(ErrorKind::InvalidArg, std::string(op) + ": label out of range");
    }
  }
}

// log-softmax of one row scaled by 1/temperature, in double.
void log_softmax_row(std::span<const float> row, double temperature, std::vector<double>& out) {
  out.resize(row.size());
  double mx = -INFINITY;
  for (std::size_t j = 0; j < row.size(); ++j) {
    out[j] = static_cast<double>(row[j]) / temperature;
    mx = std::max(mx, out[j]);
  }
  double sum = 0.0;
  for (double v : out) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  for (double& v : out) v -= lse;
}

}  // namespace

void KdConfig::validate() const {
  if (!(temperature > 0.0f)) throw Error(ErrorKind::InvalidArg, "temperature must be > 0");
  if (!(soft_weight >= 0.0f && soft_weight <= 1.0f)) {
    throw Error(ErrorKind::InvalidArg, "soft_weight must lie in [0, 1]");
  }
}

Tensor softmax(const Tensor& logits, float temperature) {
  if (logits.rank() != 2) throw Error(ErrorKind::ShapeMismatch, "softmax expects rank 2");
  Tensor out(logits.shape());
  std::vector<double> lp;
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    log_softmax_row(logits.row(i), temperature, lp);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < lp.size(); ++j) dst[j] = static_cast<float>(std::exp(lp[j]));
  }
  return out;
}

double sample_cross_entropy(std::span<const float> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw Error(ErrorKind::InvalidArg, "label out of range");
  }
  std::vector<double> lp;
  log_softmax_row(logits, 1.0, lp);
  return -lp[static_cast<std::size_t>(label)];
}

double cross_entropy(const Tensor& logits, std::span<const int> labels) {
  check_logits(logits, labels, "cross_entropy");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    total += sample_cross_entropy(logits.row(i), labels[i]);
  }
  return total / static_cast<double>(labels.size());
}

LossAndGrad cross_entropy_with_grad(const Tensor& logits, std::span<const int> labels) {
  LossAndGrad r;
  r.loss = cross_entropy(logits, labels);
  r.grad = Tensor(logits.shape());
  const double inv_b = 1.0 / static_cast<double>(labels.size());
  std::vector<double> lp;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    log_softmax_row(logits.row(i), 1.0, lp);
    auto g = r.grad.row(i);
    for (std::size_t j = 0; j < lp.size(); ++j) {
      const double onehot = static_cast<int>(j) == labels[i] ? 1.0 : 0.0;
      g[j] = static_cast<float>((std::exp(lp[j]) - onehot) * inv_b);
    }
  }
  return r;
}

namespace {

double soft_term(const Tensor& student, const Tensor& teacher, double t) {
  std::vector<double> ls, lt;
  double total = 0.0;
  for (std::size_t i = 0; i < student.dim(0); ++i) {
    log_softmax_row(student.row(i), t, ls);
    log_softmax_row(teacher.row(i), t, lt);
    double kl = 0.0;
    for (std::size_t j = 0; j < ls.size(); ++j) {
      const double pt = std::exp(lt[j]);
      if (pt > 0.0) kl += pt * (lt[j] - ls[j]);
    }
    total += kl;
  }
  return t * t * total / static_cast<double>(student.dim(0));
}

void check_kd(const Tensor& student, const Tensor& teacher, std::span<const int> labels,
              const KdConfig& kd) {
  kd.validate();
  check_logits(student, labels, "kd_loss");
  if (teacher.shape() != student.shape()) {
    throw Error(ErrorKind::ShapeMismatch, "kd_loss: teacher " + shape_string(teacher.shape()) +
                                              " vs student " + shape_string(student.shape()));
  }
}

}  // namespace

double kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
               std::span<const int> labels, const KdConfig& kd) {
  check_kd(student_logits, teacher_logits, labels, kd);
  const double soft = soft_term(student_logits, teacher_logits, kd.temperature);
  const double hard = cross_entropy(student_logits, labels);
  return static_cast<double>(kd.soft_weight) * soft + static_cast<double>(kd.hard_weight()) * hard;
}

LossAndGrad kd_loss_with_grad(const Tensor& student_logits, const Tensor& teacher_logits,
                              std::span<const int> labels, const KdConfig& kd) {
  check_kd(student_logits, teacher_logits, labels, kd);
  LossAndGrad r;
  r.loss = kd_loss(student_logits, teacher_logits, labels, kd);
  r.grad = Tensor(student_logits.shape());
  const double t = kd.temperature;
  const double inv_b = 1.0 / static_cast<double>(labels.size());
  const double ws = kd.soft_weight;
  const double wh = kd.hard_weight();
  std::vector<double> ls, lt, l1;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    log_softmax_row(student_logits.row(i), t, ls);
    log_softmax_row(teacher_logits.row(i), t, lt);
    log_softmax_row(student_logits.row(i), 1.0, l1);
    auto g = r.grad.row(i);
    for (std::size_t j = 0; j < ls.size(); ++j) {
      // d/dz of T^2 KL = T (p_s - p_t)
      const double soft = t * (std::exp(ls[j]) - std::exp(lt[j]));
      const double onehot = static_cast<int>(j) == labels[i] ? 1.0 : 0.0;
      const double hard = std::exp(l1[j]) - onehot;
      g[j] = static_cast<float>((ws * soft + wh * hard) * inv_b);
    }
  }
  return r;
}

}  // namespace nt
