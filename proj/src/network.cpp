#include "nt/network.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace nt {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Linear: return "linear";
    case LayerKind::Conv2D: return "conv2d";
    case LayerKind::BatchNorm2D: return "batchnorm2d";
    case LayerKind::MaxPool2D: return "maxpool2d";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::ReLU: return "relu";
  }
  return "?";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (auto k : {LayerKind::Linear, LayerKind::Conv2D, LayerKind::BatchNorm2D,
                 LayerKind::MaxPool2D, LayerKind::Flatten, LayerKind::ReLU}) {
    if (to_string(k) == name) return k;
  }
  throw Error(ErrorKind::InvalidArg, "unknown layer kind '" + std::string(name) + "'");
}

LayerSpec LayerSpec::linear(std::size_t in, std::size_t out) {
  LayerSpec s;
  s.kind = LayerKind::Linear;
  s.in = in;
  s.out = out;
  return s;
}

LayerSpec LayerSpec::conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                          std::size_t padding) {
  LayerSpec s;
  s.kind = LayerKind::Conv2D;
  s.in = in;
  s.out = out;
  s.kernel_h = kernel;
  s.kernel_w = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::batchnorm(std::size_t channels) {
  LayerSpec s;
  s.kind = LayerKind::BatchNorm2D;
  s.in = channels;
  s.out = channels;
  return s;
}

LayerSpec LayerSpec::maxpool(std::size_t window) {
  LayerSpec s;
  s.kind = LayerKind::MaxPool2D;
  s.pool = window;
  return s;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec s;
  s.kind = LayerKind::Flatten;
  return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

std::string LayerSpec::describe() const {
  std::ostringstream os;
  os << to_string(kind);
  switch (kind) {
    case LayerKind::Linear: os << '(' << in << ',' << out << ')'; break;
    case LayerKind::Conv2D:
      os << '(' << in << ',' << out << ',' << kernel_h << 'x' << kernel_w << ",s" << stride
         << ",p" << padding << ')';
      break;
    case LayerKind::BatchNorm2D: os << '(' << out << ')'; break;
    case LayerKind::MaxPool2D: os << '(' << pool << ')'; break;
    default: break;
  }
  return os.str();
}

namespace {

[[noreturn]] void topology_error(std::size_t index, const std::string& what) {
  throw Error(ErrorKind::UnsupportedTopology, "layer " + std::to_string(index) + ": " + what);
}

std::vector<Shape> infer_shapes(const Shape& input, const std::vector<Layer>& layers) {
  if (input.size() != 1 && input.size() != 3) {
    throw Error(ErrorKind::UnsupportedTopology, "input shape must be [features] or [c,h,w]");
  }
  if (layers.empty() || layers.back().spec.kind != LayerKind::Linear) {
    throw Error(ErrorKind::UnsupportedTopology, "last layer must be the Linear head");
  }
  std::vector<Shape> shapes;
  Shape cur = input;
  bool seen_conv_since_flatten = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& s = layers[i].spec;
    switch (s.kind) {
      case LayerKind::Linear:
        if (cur.size() != 1 || cur[0] != s.in) {
          topology_error(i, "linear expects " + std::to_string(s.in) + " features, got " +
                                shape_string(cur));
        }
        if (s.out == 0) topology_error(i, "linear with zero outputs");
        cur = {s.out};
        break;
      case LayerKind::Conv2D: {
        if (cur.size() != 3 || cur[0] != s.in) {
          topology_error(i, "conv2d expects " + std::to_string(s.in) + " channels, got " +
                                shape_string(cur));
        }
        if (s.stride == 0 || s.out == 0 || s.kernel_h == 0 || s.kernel_w == 0) {
          topology_error(i, "conv2d with zero extent");
        }
        if (s.kernel_h > cur[1] + 2 * s.padding || s.kernel_w > cur[2] + 2 * s.padding) {
          topology_error(i, "conv2d kernel larger than padded input");
        }
        cur = {s.out, (cur[1] + 2 * s.padding - s.kernel_h) / s.stride + 1,
               (cur[2] + 2 * s.padding - s.kernel_w) / s.stride + 1};
        seen_conv_since_flatten = true;
        break;
      }
      case LayerKind::BatchNorm2D:
        if (cur.size() != 3 || cur[0] != s.out) {
          topology_error(i, "batchnorm2d channel mismatch with " + shape_string(cur));
        }
        if (!seen_conv_since_flatten) topology_error(i, "batchnorm2d must follow a conv2d");
        break;
      case LayerKind::MaxPool2D:
        if (cur.size() != 3 || s.pool == 0 || cur[1] < s.pool || cur[2] < s.pool) {
          topology_error(i, "maxpool2d window does not fit " + shape_string(cur));
        }
        cur = {cur[0], cur[1] / s.pool, cur[2] / s.pool};
        break;
      case LayerKind::Flatten:
        cur = {shape_product(cur)};
        seen_conv_since_flatten = false;
        break;
      case LayerKind::ReLU: break;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

void check_param_shapes(const std::vector<Layer>& layers) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    const LayerSpec& s = l.spec;
    Shape w, b;
    switch (s.kind) {
      case LayerKind::Linear: w = {s.out, s.in}; b = {s.out}; break;
      case LayerKind::Conv2D: w = {s.out, s.in, s.kernel_h, s.kernel_w}; b = {s.out}; break;
      case LayerKind::BatchNorm2D: w = {s.out}; b = {s.out}; break;
      default: continue;
    }
    if (l.weight.shape() != w || l.bias.shape() != b) {
      throw Error(ErrorKind::ShapeMismatch, "layer " + std::to_string(i) + " parameters " +
                                                shape_string(l.weight.shape()) + " do not match " +
                                                s.describe());
    }
    if (s.kind == LayerKind::BatchNorm2D) {
      if (l.running_mean.shape() != b || l.running_var.shape() != b) {
        throw Error(ErrorKind::ShapeMismatch, "batchnorm running stats shape");
      }
      for (float v : l.running_var.values()) {
        if (!(v >= 0.0f)) throw Error(ErrorKind::InvalidArg, "negative running variance");
      }
    }
  }
}

}  // namespace

Network::Network(Shape input_shape, std::vector<LayerSpec> specs)
    : input_shape_(std::move(input_shape)) {
  layers_.reserve(specs.size());
  for (auto& s : specs) {
    Layer l;
    l.spec = s;
    switch (s.kind) {
      case LayerKind::Linear:
        if (s.in == 0 || s.out == 0) throw Error(ErrorKind::InvalidArg, "linear with zero extent");
        l.weight = Tensor({s.out, s.in});
        l.bias = Tensor({s.out});
        break;
      case LayerKind::Conv2D:
        if (s.in == 0 || s.out == 0 || s.kernel_h == 0 || s.kernel_w == 0) {
          throw Error(ErrorKind::InvalidArg, "conv2d with zero extent");
        }
        l.weight = Tensor({s.out, s.in, s.kernel_h, s.kernel_w});
        l.bias = Tensor({s.out});
        break;
      case LayerKind::BatchNorm2D:
        if (s.out == 0) throw Error(ErrorKind::InvalidArg, "batchnorm2d with zero channels");
        l.weight = Tensor({s.out}, 1.0f);
        l.bias = Tensor({s.out});
        l.running_mean = Tensor({s.out});
        l.running_var = Tensor({s.out}, 1.0f);
        break;
      default: break;
    }
    layers_.push_back(std::move(l));
  }
  shapes_ = infer_shapes(input_shape_, layers_);
}

Network Network::initialized(Shape input_shape, std::vector<LayerSpec> specs, RngStream& rng) {
  Network net(std::move(input_shape), std::move(specs));
  for (auto& l : net.layers_) {
    if (!l.spec.parameterized()) continue;
    const std::size_t fan_in = l.weight.row_size();
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (float& v : l.weight.values()) v = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
    for (float& v : l.bias.values()) v = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  }
  return net;
}

void Network::revalidate() {
  for (auto& l : layers_) {
    if (l.spec.kind == LayerKind::Linear) {
      l.spec.in = l.weight.dim(1);
      l.spec.out = l.weight.dim(0);
    } else if (l.spec.kind == LayerKind::Conv2D) {
      l.spec.in = l.weight.dim(1);
      l.spec.out = l.weight.dim(0);
    } else if (l.spec.kind == LayerKind::BatchNorm2D) {
      l.spec.in = l.spec.out = l.weight.dim(0);
    }
  }
  shapes_ = infer_shapes(input_shape_, layers_);
  check_param_shapes(layers_);
}

std::vector<LayerSpec> Network::specs() const {
  std::vector<LayerSpec> out;
  out.reserve(layers_.size());
  for (const auto& l : layers_) out.push_back(l.spec);
  return out;
}

std::string Network::arch_id() const {
  std::string canon = "input" + shape_string(input_shape_);
  for (const auto& l : layers_) canon += ";" + l.spec.describe();
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(canon)));
  return buf;
}

std::vector<std::size_t> Network::hidden_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    if (layers_[i].spec.parameterized()) out.push_back(i);
  }
  return out;
}

std::size_t Network::next_parameterized(std::size_t index) const {
  for (std::size_t i = index + 1; i < layers_.size(); ++i) {
    if (layers_[i].spec.parameterized()) return i;
  }
  throw Error(ErrorKind::UnsupportedTopology, "no parameterized layer after " +
                                                  std::to_string(index));
}

std::optional<std::size_t> Network::batchnorm_for(std::size_t index) const {
  if (layers_.at(index).spec.kind != LayerKind::Conv2D) return std::nullopt;
  for (std::size_t i = index + 1; i < layers_.size(); ++i) {
    const auto k = layers_[i].spec.kind;
    if (k == LayerKind::BatchNorm2D) return i;
    if (k == LayerKind::Linear || k == LayerKind::Conv2D || k == LayerKind::Flatten) break;
  }
  return std::nullopt;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

std::size_t Network::parameter_bytes() const {
  std::size_t n = 0;
  for (const auto& l : layers_) {
    n += l.weight.bytes() + l.bias.bytes() + l.running_mean.bytes() + l.running_var.bytes();
  }
  return n;
}

bool Network::identical(const Network& other) const {
  if (input_shape_ != other.input_shape_ || layers_.size() != other.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& a = layers_[i];
    const Layer& b = other.layers_[i];
    if (!(a.spec == b.spec) || !a.weight.identical(b.weight) || !a.bias.identical(b.bias) ||
        !a.running_mean.identical(b.running_mean) || !a.running_var.identical(b.running_var)) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

struct LayerCache {
  Tensor input;
  Tensor xhat;                       // batchnorm, train mode
  std::vector<float> inv_std;        // batchnorm, train mode
  std::vector<std::size_t> argmax;   // maxpool: flat input index per output element
};

Tensor linear_forward(const Layer& l, const Tensor& x) {
  Tensor y = matmul_nt(x, l.weight);
  const std::size_t out = l.spec.out;
  for (std::size_t i = 0; i < y.dim(0); ++i) {
    auto r = y.row(i);
    for (std::size_t j = 0; j < out; ++j) r[j] += l.bias[j];
  }
  return y;
}

Tensor conv_forward(const Layer& l, const Tensor& x) {
  Tensor y = conv2d(x, l.weight, l.spec.stride, l.spec.padding);
  const std::size_t plane = y.dim(2) * y.dim(3);
  for (std::size_t n = 0; n < y.dim(0); ++n) {
    for (std::size_t o = 0; o < y.dim(1); ++o) {
      float* p = y.data() + (n * y.dim(1) + o) * plane;
      for (std::size_t k = 0; k < plane; ++k) p[k] += l.bias[o];
    }
  }
  return y;
}

Tensor batchnorm_eval(const Layer& l, const Tensor& x) {
  Tensor y(x.shape());
  const std::size_t batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const float scale = l.weight[ch] / std::sqrt(l.running_var[ch] + kBatchNormEps);
    const float shift = l.bias[ch] - l.running_mean[ch] * scale;
    for (std::size_t n = 0; n < batch; ++n) {
      const float* src = x.data() + (n * c + ch) * plane;
      float* dst = y.data() + (n * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) dst[k] = src[k] * scale + shift;
    }
  }
  return y;
}

Tensor batchnorm_train(Layer& l, const Tensor& x, LayerCache* cache) {
  Tensor y(x.shape());
  const std::size_t batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const std::size_t count = batch * plane;
  Tensor xhat(x.shape());
  std::vector<float> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t n = 0; n < batch; ++n) {
      const float* src = x.data() + (n * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) sum += src[k];
    }
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (std::size_t n = 0; n < batch; ++n) {
      const float* src = x.data() + (n * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) sq += (src[k] - mean) * (src[k] - mean);
    }
    const double var = sq / static_cast<double>(count);
    const double istd = 1.0 / std::sqrt(var + kBatchNormEps);
    inv_std[ch] = static_cast<float>(istd);
    for (std::size_t n = 0; n < batch; ++n) {
      const float* src = x.data() + (n * c + ch) * plane;
      float* xh = xhat.data() + (n * c + ch) * plane;
      float* dst = y.data() + (n * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        xh[k] = static_cast<float>((src[k] - mean) * istd);
        dst[k] = l.weight[ch] * xh[k] + l.bias[ch];
      }
    }
    const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
    l.running_mean[ch] = static_cast<float>((1.0 - kBatchNormMomentum) * l.running_mean[ch] +
                                            kBatchNormMomentum * mean);
    l.running_var[ch] = static_cast<float>((1.0 - kBatchNormMomentum) * l.running_var[ch] +
                                           kBatchNormMomentum * unbiased);
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Tensor maxpool_forward(const Layer& l, const Tensor& x, LayerCache* cache) {
  const std::size_t p = l.spec.pool;
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / p, ow = w / p;
  Tensor y({batch, c, oh, ow});
  std::vector<std::size_t> argmax(y.size());
  std::size_t o = 0;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (n * c + ch) * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
          std::size_t best = base + (oy * p) * w + ox * p;
          for (std::size_t ky = 0; ky < p; ++ky) {
            for (std::size_t kx = 0; kx < p; ++kx) {
              const std::size_t idx = base + (oy * p + ky) * w + ox * p + kx;
              if (x[idx] > x[best]) best = idx;  // first index wins ties
            }
          }
          y[o] = x[best];
          argmax[o] = best;
        }
      }
    }
  }
  if (cache) cache->argmax = std::move(argmax);
  return y;
}

Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (float& v : y.values()) v = v > 0.0f ? v : 0.0f;
  return y;
}

Tensor run_forward(Network& net, const Tensor& batch, Mode mode, std::vector<LayerCache>* caches) {
  Shape expect = net.input_shape();
  expect.insert(expect.begin(), batch.rank() ? batch.dim(0) : 0);
  if (batch.shape() != expect) {
    throw Error(ErrorKind::ShapeMismatch,
                "batch " + shape_string(batch.shape()) + " does not match input " +
                    shape_string(net.input_shape()));
  }
  check_finite(batch, "forward");
  if (caches) caches->assign(net.size(), {});
  Tensor x = batch;
  for (std::size_t i = 0; i < net.size(); ++i) {
    Layer& l = net.layer(i);
    LayerCache* cache = caches ? &(*caches)[i] : nullptr;
    if (cache) cache->input = x;
    switch (l.spec.kind) {
      case LayerKind::Linear: x = linear_forward(l, x); break;
      case LayerKind::Conv2D: x = conv_forward(l, x); break;
      case LayerKind::BatchNorm2D:
        x = mode == Mode::Eval ? batchnorm_eval(l, x) : batchnorm_train(l, x, cache);
        break;
      case LayerKind::MaxPool2D: x = maxpool_forward(l, x, cache); break;
      case LayerKind::Flatten: x = x.reshaped({x.dim(0), x.size() / x.dim(0)}); break;
      case LayerKind::ReLU: x = relu_forward(x); break;
    }
  }
  check_finite(x, "forward");
  return x;
}

void linear_backward(const Layer& l, const LayerCache& cache, Tensor& dy, LayerGradient& g,
                     bool need_dx) {
  g.weight = matmul_tn(dy, cache.input);
  g.bias = Tensor({l.spec.out});
  for (std::size_t i = 0; i < dy.dim(0); ++i) {
    auto r = dy.row(i);
    for (std::size_t j = 0; j < l.spec.out; ++j) g.bias[j] += r[j];
  }
  if (need_dx) dy = matmul(dy, l.weight);
}

void conv_backward(const Layer& l, const LayerCache& cache, Tensor& dy, LayerGradient& g,
                   bool need_dx) {
  const Tensor& x = cache.input;
  const std::size_t batch = x.dim(0), in_c = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
  const std::size_t out_c = dy.dim(1), out_h = dy.dim(2), out_w = dy.dim(3);
  const std::size_t kh = l.spec.kernel_h, kw = l.spec.kernel_w, stride = l.spec.stride;
  const auto pad = static_cast<std::ptrdiff_t>(l.spec.padding);
  g.weight = Tensor(l.weight.shape());
  g.bias = Tensor({out_c});
  Tensor dx = need_dx ? Tensor(x.shape()) : Tensor();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t o = 0; o < out_c; ++o) {
      const float* dplane = dy.data() + ((n * out_c + o) * out_h) * out_w;
      for (std::size_t k = 0; k < out_h * out_w; ++k) g.bias[o] += dplane[k];
      for (std::size_t c = 0; c < in_c; ++c) {
        const float* xplane = x.data() + ((n * in_c + c) * in_h) * in_w;
        float* gk = g.weight.data() + ((o * in_c + c) * kh) * kw;
        const float* kk = l.weight.data() + ((o * in_c + c) * kh) * kw;
        float* dxplane = need_dx ? dx.data() + ((n * in_c + c) * in_h) * in_w : nullptr;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const float d = dplane[oy * out_w + ox];
            if (d == 0.0f) continue;
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_w)) continue;
                gk[ky * kw + kx] += d * xplane[iy * in_w + ix];
                if (dxplane) dxplane[iy * in_w + ix] += d * kk[ky * kw + kx];
              }
            }
          }
        }
      }
    }
  }
  if (need_dx) dy = std::move(dx);
}

void batchnorm_backward(const Layer& l, const LayerCache& cache, Tensor& dy, LayerGradient& g) {
  const std::size_t batch = dy.dim(0), c = dy.dim(1), plane = dy.dim(2) * dy.dim(3);
  const double count = static_cast<double>(batch * plane);
  g.weight = Tensor({c});
  g.bias = Tensor({c});
  Tensor dx(dy.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < batch; ++n) {
      const float* d = dy.data() + (n * c + ch) * plane;
      const float* xh = cache.xhat.data() + (n * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        sum_dy += d[k];
        sum_dy_xhat += static_cast<double>(d[k]) * xh[k];
      }
    }
    g.weight[ch] = static_cast<float>(sum_dy_xhat);
    g.bias[ch] = static_cast<float>(sum_dy);
    const double gamma = l.weight[ch];
    const double scale = gamma * cache.inv_std[ch] / count;
    for (std::size_t n = 0; n < batch; ++n) {
      const float* d = dy.data() + (n * c + ch) * plane;
      const float* xh = cache.xhat.data() + (n * c + ch) * plane;
      float* out = dx.data() + (n * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        out[k] = static_cast<float>(scale * (count * d[k] - sum_dy - xh[k] * sum_dy_xhat));
      }
    }
  }
  dy = std::move(dx);
}

}  // namespace

Tensor forward(Network& net, const Tensor& batch, Mode mode) {
  return run_forward(net, batch, mode, nullptr);
}

Tensor Network::predict(const Tensor& batch) const {
  // Eval mode never mutates the network.
  return run_forward(const_cast<Network&>(*this), batch, Mode::Eval, nullptr);
}

Gradients backward(Network& net, const Tensor& batch, std::span<const int> labels,
                   const LossSpec& loss) {
  std::vector<LayerCache> caches;
  Tensor logits = run_forward(net, batch, Mode::Train, &caches);
  LossAndGrad lg;
  if (std::holds_alternative<CrossEntropyLoss>(loss)) {
    lg = cross_entropy_with_grad(logits, labels);
  } else {
    const auto& kd = std::get<DistillationLoss>(loss);
    if (kd.teacher_logits == nullptr) throw Error(ErrorKind::InvalidArg, "missing teacher logits");
    lg = kd_loss_with_grad(logits, *kd.teacher_logits, labels, kd.config);
  }
  if (!std::isfinite(lg.loss)) throw Error(ErrorKind::NonFiniteLoss, "loss is not finite");

  Gradients grads;
  grads.loss = lg.loss;
  grads.layers.resize(net.size());
  Tensor dy = std::move(lg.grad);
  std::size_t first_param = net.size();
  for (std::size_t i = 0; i < net.size(); ++i) {
    if (net.layer(i).spec.has_params()) {
      first_param = i;
      break;
    }
  }
  for (std::size_t i = net.size(); i-- > 0;) {
    const Layer& l = net.layer(i);
    const LayerCache& cache = caches[i];
    const bool need_dx = i > first_param;
    switch (l.spec.kind) {
      case LayerKind::Linear: linear_backward(l, cache, dy, grads.layers[i], need_dx); break;
      case LayerKind::Conv2D: conv_backward(l, cache, dy, grads.layers[i], need_dx); break;
      case LayerKind::BatchNorm2D: batchnorm_backward(l, cache, dy, grads.layers[i]); break;
      case LayerKind::MaxPool2D: {
        Tensor dx(cache.input.shape());
        for (std::size_t o = 0; o < dy.size(); ++o) dx[cache.argmax[o]] += dy[o];
        dy = std::move(dx);
        break;
      }
      case LayerKind::Flatten: dy = dy.reshaped(cache.input.shape()); break;
      case LayerKind::ReLU: {
        const auto in = cache.input.values();
        auto d = dy.values();
        for (std::size_t k = 0; k < d.size(); ++k) {
          if (!(in[k] > 0.0f)) d[k] = 0.0f;
        }
        break;
      }
    }
    if (!need_dx && l.spec.has_params()) break;
  }
  for (const auto& g : grads.layers) {
    if (!g.weight.empty()) check_finite(g.weight, "backward");
    if (!g.bias.empty()) check_finite(g.bias, "backward");
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Structural views

std::vector<std::pair<std::size_t, std::size_t>> flatten_index_map(std::size_t channels,
                                                                   std::size_t h, std::size_t w) {
  if (channels == 0 || h == 0 || w == 0) {
    throw Error(ErrorKind::InvalidArg, "flatten_index_map needs positive extents");
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(channels);
  for (std::size_t c = 0; c < channels; ++c) out.emplace_back(c * h * w, (c + 1) * h * w);
  return out;
}

std::size_t outgoing_span(const Network& net, std::size_t index) {
  const std::size_t next = net.next_parameterized(index);
  if (net.layer(index).spec.kind == LayerKind::Linear) return 1;
  if (net.layer(next).spec.kind == LayerKind::Conv2D) return 1;
  // conv -> ... -> flatten -> linear
  for (std::size_t i = index + 1; i < next; ++i) {
    if (net.layer(i).spec.kind == LayerKind::Flatten) {
      const Shape& s = i == 0 ? net.input_shape() : net.activation_shapes()[i - 1];
      return s[1] * s[2];
    }
  }
  throw Error(ErrorKind::UnsupportedTopology, "conv feeding linear without flatten");
}

std::vector<UnitView> unit_views(const Network& net) {
  std::vector<UnitView> views;
  for (std::size_t li : net.hidden_layers()) {
    const Layer& l = net.layer(li);
    const std::size_t next = net.next_parameterized(li);
    const auto bn = net.batchnorm_for(li);
    const std::size_t span = outgoing_span(net, li);
    const bool channel = net.layer(next).spec.kind == LayerKind::Conv2D;
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    if (l.spec.kind == LayerKind::Conv2D && !channel) {
      ranges = flatten_index_map(l.spec.out, 1, span);
    }
    for (std::size_t u = 0; u < l.spec.out; ++u) {
      UnitView v;
      v.layer_index = li;
      v.unit_index = u;
      v.bn_layer = bn;
      v.outgoing_layer = next;
      v.outgoing_is_channel = channel;
      if (!ranges.empty()) {
        v.outgoing_begin = ranges[u].first;
        v.outgoing_end = ranges[u].second;
      } else {
        v.outgoing_begin = u;
        v.outgoing_end = u + 1;
      }
      views.push_back(v);
    }
  }
  return views;
}

}  // namespace nt
