#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nt/error.hpp"

namespace nt {

using Shape = std::vector<std::size_t>;

std::size_t shape_product(const Shape& shape);
std::string shape_string(const Shape& shape);

// Byte accounting for every tensor buffer, kept per thread. Used by the fusion
// cost measurement to report a deterministic allocation high-water mark.
namespace memory {
std::size_t live_bytes();
std::size_t peak_bytes();
// Sets the peak to the current live byte count.
void reset_peak();
void on_allocate(std::size_t bytes);
void on_release(std::size_t bytes);
}  // namespace memory

template <class T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    memory::on_allocate(n * sizeof(T));
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    memory::on_release(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }

  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<float, TrackingAllocator<float>>;

// Dense row-major float32 array.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::span<const float> values);
  Tensor(Shape shape, std::initializer_list<float> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t bytes() const noexcept { return data_.size() * sizeof(float); }

  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // Rank-2 element access.
  float& at(std::size_t row, std::size_t col) { return data_[row * shape_[1] + col]; }
  float at(std::size_t row, std::size_t col) const { return data_[row * shape_[1] + col]; }

  // Contiguous slice of the leading axis.
  std::span<float> row(std::size_t i);
  std::span<const float> row(std::size_t i) const;
  std::size_t row_size() const;

  Tensor reshaped(Shape shape) const;
  void fill(float value);
  bool all_finite() const;

  // Bitwise equality of shape and contents.
  bool identical(const Tensor& other) const;

 private:
  Shape shape_;
  Buffer data_;
};

// Throws NonFinite naming `op` when any element is NaN or Inf.
void check_finite(const Tensor& t, const char* op);

// c = a * b with ascending inner-index accumulation.
Tensor matmul(const Tensor& a, const Tensor& b);
// c = a * b^T, a: m x k, b: n x k.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// c = a^T * b, a: k x m, b: k x n.
Tensor matmul_tn(const Tensor& a, const Tensor& b);

// Cross-correlation with zero padding. input b x i x H x W, kernel o x i x h x w.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding);

// Euclidean norm of every leading-axis slice; trailing axes are flattened,
// so conv filters o x i x h x w produce o norms.
Tensor row_l2_norms(const Tensor& w, const Tensor* bias = nullptr, bool include_bias = false);

// Gathers `indices` along `axis` (in the given order).
Tensor take(const Tensor& t, std::size_t axis, std::span<const std::size_t> indices);

// Counter-based generator keyed by (seed, stream id). Draw i of a stream is a
// pure function of (seed, stream id, i).
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string stream_id);

  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& stream_id() const noexcept { return stream_id_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 bits.
  double uniform();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // Standard normal (polar method).
  double normal();

  RngStream split(const std::string& child) const;

 private:
  std::uint64_t seed_;
  std::string stream_id_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::optional<double> spare_normal_;
};

std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace nt
