#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "nt/losses.hpp"
#include "nt/tensor.hpp"

namespace nt {

enum class LayerKind { Linear, Conv2D, BatchNorm2D, MaxPool2D, Flatten, ReLU };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  // Linear: in/out features. Conv2D: in/out channels. BatchNorm2D: channels in `out`.
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  // MaxPool2D window; stride equals the window.
  std::size_t pool = 0;

  static LayerSpec linear(std::size_t in, std::size_t out);
  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
                        std::size_t padding = 0);
  static LayerSpec batchnorm(std::size_t channels);
  static LayerSpec maxpool(std::size_t window);
  static LayerSpec flatten();
  static LayerSpec relu();

  bool parameterized() const { return kind == LayerKind::Linear || kind == LayerKind::Conv2D; }
  bool has_params() const { return parameterized() || kind == LayerKind::BatchNorm2D; }
  // Canonical text form, also the input of the architecture hash.
  std::string describe() const;

  bool operator==(const LayerSpec&) const = default;
};

struct Layer {
  LayerSpec spec;
  // Linear: W[out x in], b[out]. Conv2D: W[out x in x kh x kw], b[out].
  // BatchNorm2D: weight = gamma[c], bias = beta[c].
  Tensor weight;
  Tensor bias;
  Tensor running_mean;
  Tensor running_var;
  // Ensemble member each hidden unit came from; empty when unknown.
  std::vector<int> origin;
};

enum class Mode { Train, Eval };

inline constexpr float kBatchNormEps = 1e-5f;
inline constexpr float kBatchNormMomentum = 0.1f;

// Sequential chain of layers whose last layer is the Linear classification head.
class Network {
 public:
  Network() = default;
  // Zero-initialised parameters (BN: gamma 1, running_var 1). Validates the topology.
  Network(Shape input_shape, std::vector<LayerSpec> specs);

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  static Network initialized(Shape input_shape, std::vector<LayerSpec> specs, RngStream& rng);

  const Shape& input_shape() const noexcept { return input_shape_; }
  std::vector<Layer>& layers() noexcept { return layers_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  Layer& layer(std::size_t i) { return layers_.at(i); }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }
  std::size_t size() const noexcept { return layers_.size(); }

  std::vector<LayerSpec> specs() const;
  std::string arch_id() const;

  std::size_t head_index() const { return layers_.size() - 1; }
  std::size_t num_classes() const { return layers_.back().spec.out; }
  // Parameterized layers (Linear/Conv2D) except the head, in order.
  std::vector<std::size_t> hidden_layers() const;
  // Next Linear/Conv2D after `index`.
  std::size_t next_parameterized(std::size_t index) const;
  // BatchNorm2D coupled to the conv at `index`, if any.
  std::optional<std::size_t> batchnorm_for(std::size_t index) const;
  // Output shape (without batch) of every layer.
  const std::vector<Shape>& activation_shapes() const noexcept { return shapes_; }

  std::size_t parameter_count() const;
  // Bytes of all parameter and running-stat tensors.
  std::size_t parameter_bytes() const;

  // Eval-mode forward; pure.
  Tensor predict(const Tensor& batch) const;

  // Re-validates after structural edits (fusion/pruning) and refreshes cached shapes.
  void revalidate();

  // Bitwise equality of specs and all tensors.
  bool identical(const Network& other) const;

 private:
  Shape input_shape_;
  std::vector<Layer> layers_;
  std::vector<Shape> shapes_;
};

// Forward pass. Train mode uses batch statistics and updates BN running stats.
Tensor forward(Network& net, const Tensor& batch, Mode mode);

struct LayerGradient {
  Tensor weight;
  Tensor bias;
};

struct Gradients {
  double loss = 0.0;
  std::vector<LayerGradient> layers;
};

struct CrossEntropyLoss {};
struct DistillationLoss {
  const Tensor* teacher_logits = nullptr;
  KdConfig config;
};
using LossSpec = std::variant<CrossEntropyLoss, DistillationLoss>;

// Train-mode forward followed by backpropagation of the chosen loss.
Gradients backward(Network& net, const Tensor& batch, std::span<const int> labels,
                   const LossSpec& loss = CrossEntropyLoss{});

// One view per hidden unit (rows of hidden Linear layers, filters of convs).
struct UnitView {
  std::size_t layer_index = 0;
  std::size_t unit_index = 0;
  std::optional<std::size_t> bn_layer;
  // Next parameterized layer and the input columns (Linear) or input
  // channels (Conv2D) fed by this unit, as a half-open range.
  std::size_t outgoing_layer = 0;
  std::size_t outgoing_begin = 0;
  std::size_t outgoing_end = 0;
  bool outgoing_is_channel = false;
};

std::vector<UnitView> unit_views(const Network& net);

// Channel c of a flattened (channels x h x w) activation occupies [c*h*w, (c+1)*h*w).
std::vector<std::pair<std::size_t, std::size_t>> flatten_index_map(std::size_t channels,
                                                                   std::size_t h, std::size_t w);

// Number of outgoing columns each unit of hidden layer `index` feeds (1 for
// Linear-to-Linear, h*w across a Flatten, 1 input channel for conv-to-conv).
std::size_t outgoing_span(const Network& net, std::size_t index);

}  // namespace nt
