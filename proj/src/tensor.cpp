#include "nt/tensor.hpp"

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <cstring>
#include <sstream>

namespace nt {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::InvalidArg: return "InvalidArg";
    case ErrorKind::ArchMismatch: return "ArchMismatch";
    case ErrorKind::ArchIncompatible: return "ArchIncompatible";
    case ErrorKind::UnsupportedTopology: return "UnsupportedTopology";
    case ErrorKind::EmptyLayer: return "EmptyLayer";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::TruncatedFile: return "TruncatedFile";
    case ErrorKind::CountMismatch: return "CountMismatch";
    case ErrorKind::VersionUnsupported: return "VersionUnsupported";
    case ErrorKind::PayloadLengthMismatch: return "PayloadLengthMismatch";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::Usage: return "Usage";
  }
  return "Unknown";
}

namespace memory {
namespace {
// Per thread; a buffer freed on another thread than it was allocated on
// may drive a thread's live count below zero.
thread_local std::int64_t t_live = 0;
thread_local std::int64_t t_peak = 0;
}  // namespace

std::size_t live_bytes() { return static_cast<std::size_t>(std::max<std::int64_t>(t_live, 0)); }
std::size_t peak_bytes() { return static_cast<std::size_t>(std::max<std::int64_t>(t_peak, 0)); }
void reset_peak() { t_peak = t_live; }

void on_allocate(std::size_t bytes) {
  t_live += static_cast<std::int64_t>(bytes);
  t_peak = std::max(t_peak, t_live);
}

void on_release(std::size_t bytes) { t_live -= static_cast<std::int64_t>(bytes); }
}  // namespace memory

std::size_t shape_product(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw Error(ErrorKind::InvalidArg, "zero extent in shape " + shape_string(shape_));
  }
  data_.assign(shape_product(shape_), fill);
}

Tensor::Tensor(Shape shape, std::span<const float> values) : Tensor(std::move(shape)) {
  if (values.size() != data_.size()) {
    throw Error(ErrorKind::ShapeMismatch, "value count " + std::to_string(values.size()) +
                                              " does not match shape " + shape_string(shape_));
  }
  std::copy(values.begin(), values.end(), data_.begin());
}

Tensor::Tensor(Shape shape, std::initializer_list<float> values)
    : Tensor(std::move(shape), std::span<const float>(values.begin(), values.size())) {}

std::size_t Tensor::row_size() const { return shape_.empty() ? 0 : data_.size() / shape_[0]; }

std::span<float> Tensor::row(std::size_t i) {
  const std::size_t n = row_size();
  return std::span<float>(data_).subspan(i * n, n);
}

std::span<const float> Tensor::row(std::size_t i) const {
  const std::size_t n = row_size();
  return std::span<const float>(data_).subspan(i * n, n);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_product(shape) != data_.size()) {
    throw Error(ErrorKind::ShapeMismatch,
                "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

bool Tensor::identical(const Tensor& other) const {
  return shape_ == other.shape_ && data_.size() == other.data_.size() &&
         (data_.empty() ||
          std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0);
}

void check_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw Error(ErrorKind::NonFinite, std::string("non-finite value in ") + op);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw Error(ErrorKind::ShapeMismatch,
                "matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  check_finite(a, "matmul");
  check_finite(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  const float* pa = a.data();
  const float* pb = b.data();
  float* pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = pc + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const float av = pa[i * k + l];
      const float* brow = pb + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw Error(ErrorKind::ShapeMismatch,
                "matmul_nt " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<float> bt(k * n);
  const float* pb = b.data();
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t l = 0; l < k; ++l) bt[l * n + j] = pb[j * k + l];
  }
  Tensor c({m, n});
  const float* pa = a.data();
  float* pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = pc + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const float av = pa[i * k + l];
      const float* brow = bt.data() + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw Error(ErrorKind::ShapeMismatch,
                "matmul_tn " + shape_string(a.shape()) + "^T x " + shape_string(b.shape()));
  }
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  const float* pa = a.data();
  const float* pb = b.data();
  float* pc = c.data();
  for (std::size_t l = 0; l < k; ++l) {
    const float* arow = pa + l * m;
    const float* brow = pb + l * n;
    for (std::size_t i = 0; i < m; ++i) {
      const float av = arow[i];
      if (av == 0.0f) continue;
      float* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  if (input.rank() != 4 || kernel.rank() != 4 || input.dim(1) != kernel.dim(1)) {
    throw Error(ErrorKind::ShapeMismatch,
                "conv2d input " + shape_string(input.shape()) + " kernel " +
                    shape_string(kernel.shape()));
  }
  if (stride == 0) throw Error(ErrorKind::InvalidArg, "conv2d stride must be >= 1");
  const std::size_t batch = input.dim(0), in_c = input.dim(1), in_h = input.dim(2),
                    in_w = input.dim(3);
  const std::size_t out_c = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kh > in_h + 2 * padding || kw > in_w + 2 * padding) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d kernel larger than padded input");
  }
  check_finite(input, "conv2d");
  check_finite(kernel, "conv2d");
  const std::size_t out_h = (in_h + 2 * padding - kh) / stride + 1;
  const std::size_t out_w = (in_w + 2 * padding - kw) / stride + 1;
  Tensor out({batch, out_c, out_h, out_w});
  const float* x = input.data();
  const float* k = kernel.data();
  float* y = out.data();
  const auto ipad = static_cast<std::ptrdiff_t>(padding);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t o = 0; o < out_c; ++o) {
      float* yplane = y + ((n * out_c + o) * out_h) * out_w;
      for (std::size_t c = 0; c < in_c; ++c) {
        const float* xplane = x + ((n * in_c + c) * in_h) * in_w;
        const float* kplane = k + ((o * in_c + c) * kh) * kw;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            float acc = 0.0f;
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - ipad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - ipad;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_w)) continue;
                acc += xplane[iy * in_w + ix] * kplane[ky * kw + kx];
              }
            }
            yplane[oy * out_w + ox] += acc;
          }
        }
      }
    }
  }
  return out;
}

Tensor row_l2_norms(const Tensor& w, const Tensor* bias, bool include_bias) {
  if (w.rank() < 2) throw Error(ErrorKind::ShapeMismatch, "row_l2_norms needs rank >= 2");
  const std::size_t rows = w.dim(0);
  if (bias != nullptr && bias->size() != rows) {
    throw Error(ErrorKind::ShapeMismatch, "bias length does not match row count");
  }
  Tensor out({rows});
  for (std::size_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (float v : w.row(i)) acc += static_cast<double>(v) * v;
    if (include_bias && bias != nullptr) acc += static_cast<double>((*bias)[i]) * (*bias)[i];
    out[i] = static_cast<float>(std::sqrt(acc));
  }
  return out;
}

Tensor take(const Tensor& t, std::size_t axis, std::span<const std::size_t> indices) {
  if (axis >= t.rank()) throw Error(ErrorKind::ShapeMismatch, "take: axis out of range");
  for (auto i : indices) {
    if (i >= t.dim(axis)) throw Error(ErrorKind::InvalidArg, "take: index out of range");
  }
  Shape shape = t.shape();
  shape[axis] = indices.size();
  Tensor out(shape);
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= t.dim(a);
  for (std::size_t a = axis + 1; a < t.rank(); ++a) inner *= t.dim(a);
  const std::size_t src_stride = t.dim(axis) * inner;
  const std::size_t dst_stride = indices.size() * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const float* src = t.data() + o * src_stride + indices[k] * inner;
      std::copy(src, src + inner, out.data() + o * dst_stride + k * inner);
    }
  }
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {
std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace

RngStream::RngStream(std::uint64_t seed, std::string stream_id)
    : seed_(seed), stream_id_(std::move(stream_id)) {
  key_ = mix64(mix64(seed_) ^ fnv1a64(stream_id_));
}

std::uint64_t RngStream::next_u64() {
  const std::uint64_t c = counter_++;
  return mix64(key_ + 0x9e3779b97f4a7c15ULL * (c + 1));
}

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n == 0) throw Error(ErrorKind::InvalidArg, "below(0)");
  // Rejection keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

double RngStream::normal() {
  if (spare_normal_) {
    const double v = *spare_normal_;
    spare_normal_.reset();
    return v;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double f = std::sqrt(-2.0 * std::log(s) / s);
  spare_normal_ = v * f;
  return u * f;
}

RngStream RngStream::split(const std::string& child) const {
  return RngStream(seed_, stream_id_ + "/" + child);
}

}  // namespace nt
