#pragma once

#include <span>

#include "nt/tensor.hpp"

namespace nt {

struct KdConfig {
  float temperature = 2.0f;
  // Weight of the softened teacher term; the hard-label term gets 1 - soft_weight.
  float soft_weight = 1.0f;

  float hard_weight() const { return 1.0f - soft_weight; }
  void validate() const;
};

// Row-wise softmax of logits / temperature.
Tensor softmax(const Tensor& logits, float temperature = 1.0f);

// Cross-entropy of a single row of logits.
double sample_cross_entropy(std::span<const float> logits, int label);

// Mean cross-entropy over the batch.
double cross_entropy(const Tensor& logits, std::span<const int> labels);

struct LossAndGrad {
  double loss = 0.0;
  Tensor grad;  // d loss / d logits
};

LossAndGrad cross_entropy_with_grad(const Tensor& logits, std::span<const int> labels);

// soft_weight * T^2 * mean KL(softmax(teacher/T) || softmax(student/T))
//   + hard_weight * cross_entropy(student, labels)
double kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
               std::span<const int> labels, const KdConfig& kd);

LossAndGrad kd_loss_with_grad(const Tensor& student_logits, const Tensor& teacher_logits,
                              std::span<const int> labels, const KdConfig& kd);

}  // namespace nt
