#include "nt/datasets.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

namespace nt {

Shape Dataset::sample_shape() const {
  Shape s(features.shape().begin() + 1, features.shape().end());
  return s;
}

void Dataset::validate() const {
  if (features.rank() < 2 || features.dim(0) != labels.size()) {
    throw Error(ErrorKind::ShapeMismatch, "feature rows " + shape_string(features.shape()) +
                                              " vs " + std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw Error(ErrorKind::InvalidArg, "label " + std::to_string(y) + " outside [0, " +
                                             std::to_string(num_classes) + ")");
    }
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.num_classes = num_classes;
  out.split = split;
  Shape shape = features.shape();
  shape[0] = indices.size();
  out.features = Tensor(shape);
  const std::size_t row = features.row_size();
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = features.row(indices[i]);
    std::copy(src.begin(), src.end(), out.features.data() + i * row);
    out.labels.push_back(labels[indices[i]]);
  }
  return out;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t offset,
                        const std::filesystem::path& path) {
  if (buf.size() < offset + 4) {
    throw Error(ErrorKind::TruncatedFile, path.string() + ": header truncated");
  }
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes, 4);
}

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::optional<std::size_t> limit) {
  const auto ibuf = read_file(images);
  const auto lbuf = read_file(labels);
  const std::uint32_t imagic = read_be32(ibuf, 0, images);
  if (imagic != kIdxImages) {
    throw Error(ErrorKind::BadMagic, images.string() + ": image magic mismatch");
  }
  const std::uint32_t lmagic = read_be32(lbuf, 0, labels);
  if (lmagic != kIdxLabels) {
    throw Error(ErrorKind::BadMagic, labels.string() + ": label magic mismatch");
  }
  const std::size_t n = read_be32(ibuf, 4, images);
  const std::size_t rows = read_be32(ibuf, 8, images);
  const std::size_t cols = read_be32(ibuf, 12, images);
  const std::size_t nl = read_be32(lbuf, 4, labels);
  if (n != nl) {
    throw Error(ErrorKind::CountMismatch,
                std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
  }
  if (n == 0 || rows == 0 || cols == 0) throw Error(ErrorKind::InvalidArg, "empty IDX file");
  const std::size_t pixels = rows * cols;
  if (ibuf.size() < 16 + n * pixels) {
    throw Error(ErrorKind::TruncatedFile, images.string() + ": payload truncated");
  }
  if (lbuf.size() < 8 + n) throw Error(ErrorKind::TruncatedFile, labels.string() + ": truncated");

  const std::size_t keep = limit ? std::min(*limit, n) : n;
  Dataset ds;
  ds.features = Tensor({keep, 1, rows, cols});
  float* dst = ds.features.data();
  for (std::size_t i = 0; i < keep * pixels; ++i) dst[i] = static_cast<float>(ibuf[16 + i]) / 255.0f;
  ds.labels.resize(keep);
  int max_label = 0;
  for (std::size_t i = 0; i < keep; ++i) {
    ds.labels[i] = lbuf[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  ds.validate();
  return ds;
}

void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
               std::size_t rows, std::size_t cols, std::span<const std::uint8_t> pixels,
               std::span<const std::uint8_t> label_bytes) {
  if (rows * cols == 0 || pixels.size() != label_bytes.size() * rows * cols) {
    throw Error(ErrorKind::ShapeMismatch, "pixel count does not match labels x rows x cols");
  }
  std::ofstream img(images, std::ios::binary);
  std::ofstream lab(labels, std::ios::binary);
  if (!img || !lab) throw Error(ErrorKind::IoError, "cannot write IDX files");
  put_be32(img, kIdxImages);
  put_be32(img, static_cast<std::uint32_t>(label_bytes.size()));
  put_be32(img, static_cast<std::uint32_t>(rows));
  put_be32(img, static_cast<std::uint32_t>(cols));
  img.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  put_be32(lab, kIdxLabels);
  put_be32(lab, static_cast<std::uint32_t>(label_bytes.size()));
  lab.write(reinterpret_cast<const char*>(label_bytes.data()),
            static_cast<std::streamsize>(label_bytes.size()));
  if (!img || !lab) throw Error(ErrorKind::IoError, "short write of IDX files");
}

Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  std::vector<float> values;
  std::vector<int> labels;
  std::size_t width = 0;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    std::vector<double> parsed;
    bool numeric = true;
    for (const auto& c : cells) {
      try {
        std::size_t used = 0;
        parsed.push_back(std::stod(c, &used));
        while (used < c.size() && std::isspace(static_cast<unsigned char>(c[used]))) ++used;
        if (used != c.size()) numeric = false;
      } catch (const std::exception&) {
        numeric = false;
      }
    }
    if (!numeric) {
      if (first) {
        first = false;
        continue;
      }
      throw Error(ErrorKind::InvalidArg, path.string() + ": non-numeric row '" + line + "'");
    }
    first = false;
    if (cells.size() < 2) throw Error(ErrorKind::InvalidArg, "csv rows need features and label");
    if (width == 0) width = cells.size() - 1;
    if (cells.size() - 1 != width) throw Error(ErrorKind::ShapeMismatch, "ragged csv row");
    const double label = parsed.back();
    if (label < 0 || label != std::floor(label)) {
      throw Error(ErrorKind::InvalidArg, "csv label must be a non-negative integer");
    }
    for (std::size_t j = 0; j < width; ++j) values.push_back(static_cast<float>(parsed[j]));
    labels.push_back(static_cast<int>(label));
  }
  if (labels.empty()) throw Error(ErrorKind::InvalidArg, path.string() + ": no rows");
  Dataset ds;
  ds.features = Tensor({labels.size(), width}, values);
  ds.num_classes = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
  ds.labels = std::move(labels);
  ds.validate();
  return ds;
}

Dataset synth_blobs(std::size_t n, std::size_t classes, std::size_t dim, float spread,
                    std::uint64_t seed, std::size_t centers_per_class) {
  if (classes == 0 || dim == 0 || n < classes || !(spread > 0.0f) || centers_per_class == 0) {
    throw Error(ErrorKind::InvalidArg, "synth_blobs needs n >= classes >= 1, dim >= 1, spread > 0");
  }
  RngStream center_rng(seed, "blobs/centers");
  std::vector<float> centers(classes * centers_per_class * dim);
  for (float& c : centers) c = static_cast<float>(center_rng.normal());
  RngStream sample_rng(seed, "blobs/samples");
  Dataset ds;
  ds.num_classes = classes;
  ds.features = Tensor({n, dim});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % classes;
    const std::size_t mode = (i / classes) % centers_per_class;
    const float* center = centers.data() + (label * centers_per_class + mode) * dim;
    auto row = ds.features.row(i);
    for (std::size_t j = 0; j < dim; ++j) {
      row[j] = center[j] + spread * static_cast<float>(sample_rng.normal());
    }
    ds.labels[i] = static_cast<int>(label);
  }
  return ds;
}

Dataset with_label_noise(Dataset ds, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw Error(ErrorKind::InvalidArg, "label noise fraction must lie in [0, 1]");
  }
  if (fraction == 0.0) return ds;
  RngStream rng(seed, "labels/noise");
  for (int& y : ds.labels) {
    const double u = rng.uniform();
    const auto draw = static_cast<int>(rng.below(ds.num_classes));
    if (u < fraction) y = draw;
  }
  return ds;
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  RngStream rng(seed, "shuffle/epoch-" + std::to_string(epoch));
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

std::vector<Batch> batches(const Dataset& ds, const BatchPlan& plan, std::size_t epoch) {
  if (plan.batch_size == 0) throw Error(ErrorKind::InvalidArg, "batch_size must be >= 1");
  const auto perm = epoch_permutation(ds.size(), plan.shuffle_seed, epoch);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < perm.size(); start += plan.batch_size) {
    const std::size_t end = std::min(perm.size(), start + plan.batch_size);
    if (plan.drop_last && end - start < plan.batch_size) break;
    const std::span<const std::size_t> idx(perm.data() + start, end - start);
    Dataset part = ds.subset(idx);
    out.push_back({std::move(part.features), std::move(part.labels)});
  }
  return out;
}

std::pair<Dataset, Dataset> train_test_split(const Dataset& ds, double test_fraction,
                                             std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw Error(ErrorKind::InvalidArg, "test_fraction must lie in (0, 1)");
  }
  RngStream rng(seed, "split");
  std::vector<std::size_t> perm(ds.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  const auto n_test = static_cast<std::size_t>(std::round(test_fraction * ds.size()));
  if (n_test == 0 || n_test == ds.size()) throw Error(ErrorKind::InvalidArg, "degenerate split");
  std::vector<std::size_t> test(perm.begin(), perm.begin() + n_test);
  std::vector<std::size_t> train(perm.begin() + n_test, perm.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  auto a = ds.subset(train);
  auto b = ds.subset(test);
  a.split = Split::Train;
  b.split = Split::Test;
  return {std::move(a), std::move(b)};
}

}  // namespace nt
