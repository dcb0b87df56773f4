#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "nt/tensor.hpp"

namespace nt {

enum class Split { Train, Test };

struct Dataset {
  Tensor features;  // n x sample shape
  std::vector<int> labels;
  std::size_t num_classes = 0;
  Split split = Split::Train;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const;
  // Labels in range and feature count consistent.
  void validate() const;
  Dataset subset(std::span<const std::size_t> indices) const;
};

struct BatchPlan {
  std::size_t batch_size = 256;
  std::uint64_t shuffle_seed = 0;
  bool drop_last = false;
};

struct Batch {
  Tensor features;
  std::vector<int> labels;
};

// IDX pair (0x00000803 images, 0x00000801 labels, big-endian); pixels scaled to [0,1].
// `limit` keeps the first n samples.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::optional<std::size_t> limit = std::nullopt);

// Writes an IDX pair from 8-bit pixels (n x rows x cols) and labels.
void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
               std::size_t rows, std::size_t cols, std::span<const std::uint8_t> pixels,
               std::span<const std::uint8_t> label_bytes);

// Comma-separated features with the integer label in the last column; an
// optional non-numeric header row is skipped.
Dataset load_csv(const std::filesystem::path& path);

// Class-balanced isotropic Gaussian clusters around seeded N(0, I) centers.
// With centers_per_class > 1 each class is a mixture, which makes the
// decision boundary non-linear.
Dataset synth_blobs(std::size_t n, std::size_t classes, std::size_t dim, float spread,
                    std::uint64_t seed, std::size_t centers_per_class = 1);

// With probability `fraction` a label is redrawn uniformly over all classes
// (it may land on the original class).
Dataset with_label_noise(Dataset ds, double fraction, std::uint64_t seed);

// Permutation of [0, n) for (seed, epoch).
std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch);

std::vector<Batch> batches(const Dataset& ds, const BatchPlan& plan, std::size_t epoch);

// Deterministic shuffled split; the second element is tagged Test.
std::pair<Dataset, Dataset> train_test_split(const Dataset& ds, double test_fraction,
                                             std::uint64_t seed);

}  // namespace nt
