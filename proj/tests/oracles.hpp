#pragma once
// Independent reference implementations used by the tests. Everything here
// runs in double precision and shares no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "nt/losses.hpp"
#include "nt/network.hpp"
#include "nt/tensor.hpp"

namespace oracle {

using nt::Layer;
using nt::LayerKind;
using nt::LayerSpec;
using nt::Network;
using nt::RngStream;
using nt::Shape;
using nt::Tensor;

inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                        std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < k; ++l) s += a[i * k + l] * b[l * n + j];
      c[i * n + j] = s;
    }
  return c;
}

inline std::vector<double> to_double(const Tensor& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

inline Tensor random_tensor(Shape shape, RngStream& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = static_cast<float>(scale * rng.normal());
  return t;
}

// Activations as a dense double array with an explicit shape (batch first).
struct DTensor {
  Shape shape;
  std::vector<double> v;
};

inline DTensor naive_conv(const DTensor& x, const std::vector<double>& w, const std::vector<double>& b,
                          std::size_t out_c, std::size_t kh, std::size_t kw, std::size_t stride,
                          std::size_t pad) {
  const std::size_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3];
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  DTensor y{{n, out_c, oh, ow}, std::vector<double>(n * out_c * oh * ow, 0.0)};
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < out_c; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = b.empty() ? 0.0 : b[o];
          for (std::size_t i = 0; i < c; ++i)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                acc += w[((o * c + i) * kh + ky) * kw + kx] *
                       x.v[((s * c + i) * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)];
              }
          y.v[((s * out_c + o) * oh + oy) * ow + ox] = acc;
        }
  return y;
}

// Double-precision parameters of a network, perturbable one scalar at a time.
struct DParams {
  std::vector<std::vector<double>> weight, bias;
};

inline DParams params_of(const Network& net) {
  DParams p;
  for (const Layer& l : net.layers()) {
    p.weight.push_back(to_double(l.weight));
    p.bias.push_back(to_double(l.bias));
  }
  return p;
}

struct RefOutput {
  std::vector<double> logits;  // batch x classes
  // Signs of every ReLU input and the winner of every pooling window; a
  // change between two evaluations marks a non-differentiable crossing.
  std::vector<std::int64_t> pattern;
};

// Reference forward. Train mode normalises with batch statistics (biased
// variance) and leaves running statistics alone.
inline RefOutput ref_forward(const Network& net, const DParams& p, const Tensor& batch, nt::Mode mode) {
  RefOutput out;
  DTensor x{batch.shape(), to_double(batch)};
  for (std::size_t li = 0; li < net.size(); ++li) {
    const Layer& l = net.layer(li);
    const LayerSpec& s = l.spec;
    switch (s.kind) {
      case LayerKind::Linear: {
        const std::size_t n = x.shape[0];
        DTensor y{{n, s.out}, std::vector<double>(n * s.out)};
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t o = 0; o < s.out; ++o) {
            double acc = p.bias[li][o];
            for (std::size_t j = 0; j < s.in; ++j) acc += p.weight[li][o * s.in + j] * x.v[i * s.in + j];
            y.v[i * s.out + o] = acc;
          }
        x = std::move(y);
        break;
      }
      case LayerKind::Conv2D:
        x = naive_conv(x, p.weight[li], p.bias[li], s.out, s.kernel_h, s.kernel_w, s.stride, s.padding);
        break;
      case LayerKind::BatchNorm2D: {
        const std::size_t n = x.shape[0], c = x.shape[1], plane = x.shape[2] * x.shape[3];
        for (std::size_t ch = 0; ch < c; ++ch) {
          double mean, var;
          if (mode == nt::Mode::Train) {
            double sum = 0.0;
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t k = 0; k < plane; ++k) sum += x.v[(i * c + ch) * plane + k];
            mean = sum / static_cast<double>(n * plane);
            double sq = 0.0;
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t k = 0; k < plane; ++k) {
                const double d = x.v[(i * c + ch) * plane + k] - mean;
                sq += d * d;
              }
            var = sq / static_cast<double>(n * plane);
          } else {
            mean = l.running_mean[ch];
            var = l.running_var[ch];
          }
          const double istd = 1.0 / std::sqrt(var + static_cast<double>(nt::kBatchNormEps));
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < plane; ++k) {
              double& v = x.v[(i * c + ch) * plane + k];
              v = p.weight[li][ch] * (v - mean) * istd + p.bias[li][ch];
            }
        }
        break;
      }
      case LayerKind::MaxPool2D: {
        const std::size_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3], q = s.pool;
        const std::size_t oh = h / q, ow = w / q;
        DTensor y{{n, c, oh, ow}, std::vector<double>(n * c * oh * ow)};
        for (std::size_t i = 0; i < n * c; ++i)
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
              std::size_t best = 0;
              double bv = -INFINITY;
              for (std::size_t ky = 0; ky < q; ++ky)
                for (std::size_t kx = 0; kx < q; ++kx) {
                  const double v = x.v[(i * h + oy * q + ky) * w + ox * q + kx];
                  if (v > bv) {
                    bv = v;
                    best = ky * q + kx;
                  }
                }
              y.v[(i * oh + oy) * ow + ox] = bv;
              out.pattern.push_back(static_cast<std::int64_t>(best));
            }
        x = std::move(y);
        break;
      }
      case LayerKind::Flatten: {
        const std::size_t n = x.shape[0];
        x.shape = {n, x.v.size() / n};
        break;
      }
      case LayerKind::ReLU:
        for (double& v : x.v) {
          out.pattern.push_back(v > 0.0);
          v = v > 0.0 ? v : 0.0;
        }
        break;
    }
  }
  out.logits = std::move(x.v);
  return out;
}

inline std::vector<double> log_softmax(const double* z, std::size_t n, double t = 1.0) {
  double mx = -INFINITY;
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, z[j] / t);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(z[j] / t - mx);
  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = z[j] / t - mx - std::log(s);
  return out;
}

inline double ref_cross_entropy(const std::vector<double>& logits, const std::vector<int>& labels,
                                std::size_t classes) {
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    total -= log_softmax(&logits[i * classes], classes)[static_cast<std::size_t>(labels[i])];
  }
  return total / static_cast<double>(labels.size());
}

inline double ref_kd(const std::vector<double>& student, const std::vector<double>& teacher,
                     const std::vector<int>& labels, std::size_t classes, double t, double soft) {
  double kl = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto ls = log_softmax(&student[i * classes], classes, t);
    const auto lt = log_softmax(&teacher[i * classes], classes, t);
    for (std::size_t j = 0; j < classes; ++j) kl += std::exp(lt[j]) * (lt[j] - ls[j]);
  }
  kl /= static_cast<double>(labels.size());
  return soft * t * t * kl + (1.0 - soft) * ref_cross_entropy(student, labels, classes);
}

struct FdStats {
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double worst_rel = 0.0;
};

inline double rel_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Central differences of `loss(logits)` through the reference forward,
// compared with the analytic gradients. Parameters whose ReLU / pooling
// pattern changes inside [-eps, +eps] are skipped.
inline FdStats fd_check(const Network& net, const nt::Gradients& g, const Tensor& batch,
                        const std::function<double(const std::vector<double>&)>& loss, double eps,
                        double floor, std::size_t max_per_tensor = 40) {
  FdStats st;
  DParams p = params_of(net);
  const auto base = ref_forward(net, p, batch, nt::Mode::Train);
  for (std::size_t li = 0; li < net.size(); ++li) {
    if (!net.layer(li).spec.has_params()) continue;
    for (int which = 0; which < 2; ++which) {
      auto& vec = which == 0 ? p.weight[li] : p.bias[li];
      const Tensor& an = which == 0 ? g.layers[li].weight : g.layers[li].bias;
      const std::size_t stride = std::max<std::size_t>(1, vec.size() / max_per_tensor);
      for (std::size_t e = 0; e < vec.size(); e += stride) {
        const double orig = vec[e];
        vec[e] = orig + eps;
        const auto up = ref_forward(net, p, batch, nt::Mode::Train);
        vec[e] = orig - eps;
        const auto dn = ref_forward(net, p, batch, nt::Mode::Train);
        vec[e] = orig;
        if (up.pattern != base.pattern || dn.pattern != base.pattern) {
          ++st.skipped;
          continue;
        }
        const double num = (loss(up.logits) - loss(dn.logits)) / (2.0 * eps);
        st.worst_rel = std::max(st.worst_rel, rel_error(an[e], num, floor));
        ++st.checked;
      }
    }
  }
  return st;
}

// ---------------------------------------------------------------------------
// Random architectures

inline Network random_mlp(RngStream& rng, std::size_t in, std::size_t classes, std::size_t depth,
                          std::size_t width) {
  std::vector<LayerSpec> specs;
  std::size_t cur = in;
  for (std::size_t d = 0; d < depth; ++d) {
    specs.push_back(LayerSpec::linear(cur, width));
    specs.push_back(LayerSpec::relu());
    cur = width;
  }
  specs.push_back(LayerSpec::linear(cur, classes));
  return Network::initialized({in}, specs, rng);
}

// conv(+BN)+relu(+pool) blocks, flatten, optional hidden linear, head.
inline Network random_conv_net(RngStream& rng, Shape input, std::size_t classes, std::size_t channels,
                               bool batchnorm, bool pool, bool hidden_linear, bool two_convs = true) {
  std::vector<LayerSpec> specs;
  specs.push_back(LayerSpec::conv(input[0], channels, 3, 1, 1));
  if (batchnorm) specs.push_back(LayerSpec::batchnorm(channels));
  specs.push_back(LayerSpec::relu());
  if (two_convs) {
    specs.push_back(LayerSpec::conv(channels, channels + 1, 3, 1, 0));
    if (batchnorm) specs.push_back(LayerSpec::batchnorm(channels + 1));
    specs.push_back(LayerSpec::relu());
  }
  if (pool) specs.push_back(LayerSpec::maxpool(2));
  specs.push_back(LayerSpec::flatten());
  std::size_t h = input[1], w = input[2], c = channels;
  if (two_convs) {
    h -= 2;
    w -= 2;
    c = channels + 1;
  }
  if (pool) {
    h /= 2;
    w /= 2;
  }
  std::size_t flat = c * h * w;
  if (hidden_linear) {
    specs.push_back(LayerSpec::linear(flat, 5));
    specs.push_back(LayerSpec::relu());
    flat = 5;
  }
  specs.push_back(LayerSpec::linear(flat, classes));
  return Network::initialized(input, specs, rng);
}

// Gives BN layers non-trivial affine parameters and running statistics.
inline void randomize_batchnorm(Network& net, RngStream& rng) {
  for (Layer& l : net.layers()) {
    if (l.spec.kind != LayerKind::BatchNorm2D) continue;
    for (std::size_t c = 0; c < l.spec.out; ++c) {
      l.weight[c] = static_cast<float>(0.5 + rng.uniform());
      l.bias[c] = static_cast<float>(0.3 * rng.normal());
      l.running_mean[c] = static_cast<float>(0.2 * rng.normal());
      l.running_var[c] = static_cast<float>(0.5 + rng.uniform());
    }
  }
}

}  // namespace oracle
