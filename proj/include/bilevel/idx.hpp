#pragma once

// IDX (MNIST) file parsing and per-digit binary task construction.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "bilevel/errors.hpp"
#include "bilevel/problems.hpp"

namespace bilevel {

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct RawImages {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols, row-major per image

  std::size_t image_size() const { return rows * cols; }
  const std::uint8_t* image(std::size_t i) const { return pixels.data() + i * image_size(); }
};

struct RawLabels {
  std::vector<std::uint8_t> values;
};

using IdxData = std::variant<RawImages, RawLabels>;

namespace detail {

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t offset) {
  if (buf.size() < offset + 4) throw FormatError("IDX: truncated header", buf.size());
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

}  // namespace detail

/// Parse an IDX image tensor (magic 0x00000803) or label vector (0x00000801)
/// from raw bytes.
inline IdxData parse_idx(const std::vector<std::uint8_t>& buf) {
  const std::uint32_t magic = detail::read_be32(buf, 0);
  if (magic == kIdxImagesMagic) {
    RawImages img;
    img.count = detail::read_be32(buf, 4);
    img.rows = detail::read_be32(buf, 8);
    img.cols = detail::read_be32(buf, 12);
    const std::size_t header = 16;
    if (img.rows != 0 && img.cols != 0 &&
        img.count > std::numeric_limits<std::size_t>::max() / (img.rows * img.cols)) {
      throw FormatError("IDX: dimension product overflows", 4);
    }
    const std::size_t n = img.count * img.rows * img.cols;
    if (buf.size() < header + n) {
      throw FormatError("IDX: truncated image payload, expected " + std::to_string(n) + " bytes",
                        buf.size());
    }
    img.pixels.assign(buf.begin() + header, buf.begin() + static_cast<std::ptrdiff_t>(header + n));
    return img;
  }
  if (magic == kIdxLabelsMagic) {
    const std::size_t n = detail::read_be32(buf, 4);
    const std::size_t header = 8;
    if (buf.size() < header + n) {
      throw FormatError("IDX: truncated label payload, expected " + std::to_string(n) + " bytes",
                        buf.size());
    }
    RawLabels lab;
    lab.values.assign(buf.begin() + header, buf.begin() + static_cast<std::ptrdiff_t>(header + n));
    return lab;
  }
  throw FormatError("IDX: unsupported magic number " + std::to_string(magic), 0);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline IdxData read_idx(const std::filesystem::path& path) {
  return parse_idx(read_file_bytes(path));
}

inline RawImages read_idx_images(const std::filesystem::path& path) {
  auto data = read_idx(path);
  if (auto* img = std::get_if<RawImages>(&data)) return std::move(*img);
  throw FormatError(path.string() + " holds labels, expected images", 0);
}

inline RawLabels read_idx_labels(const std::filesystem::path& path) {
  auto data = read_idx(path);
  if (auto* lab = std::get_if<RawLabels>(&data)) return std::move(*lab);
  throw FormatError(path.string() + " holds images, expected labels", 0);
}

/// Sizes of the tuning and validation subsets drawn from one image pool.
struct SplitSpec {
  std::size_t train_size = 5000;
  std::size_t test_size = 1000;
  std::size_t validation_train_size = 5000;
  std::size_t validation_test_size = 1000;
  std::uint64_t seed = 0;
  std::size_t downsample_factor = 1;
  bool normalize = false;

  std::size_t total() const {
    return train_size + test_size + validation_train_size + validation_test_size;
  }
};

/// Disjoint index sets into the pool.
struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  std::vector<std::size_t> validation_train;
  std::vector<std::size_t> validation_test;
};

/// Seeded permutation of [0, pool) cut into consecutive blocks: tuning train,
/// tuning test, validation train, validation test. The permutation is
/// std::shuffle driven by std::mt19937_64(seed).
inline SplitIndices split_indices(std::size_t pool, const SplitSpec& spec) {
  if (spec.total() > pool) {
    throw SizeError("split: pool of " + std::to_string(pool) + " images is smaller than the " +
                    std::to_string(spec.total()) + " requested");
  }
  std::vector<std::size_t> perm(pool);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(spec.seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  SplitIndices out;
  auto it = perm.begin();
  auto take = [&](std::size_t n, std::vector<std::size_t>& dst) {
    dst.assign(it, it + static_cast<std::ptrdiff_t>(n));
    it += static_cast<std::ptrdiff_t>(n);
  };
  take(spec.train_size, out.train);
  take(spec.test_size, out.test);
  take(spec.validation_train_size, out.validation_train);
  take(spec.validation_test_size, out.validation_test);
  return out;
}

/// Feature dimension after non-overlapping mean pooling (remainders dropped).
inline std::size_t feature_dim(const RawImages& images, std::size_t factor) {
  return (images.rows / factor) * (images.cols / factor);
}

/// Feature rows for the selected images: pixels (optionally /255), mean
/// pooled over factor x factor blocks.
inline Matrix extract_features(const RawImages& images, const std::vector<std::size_t>& idx,
                               std::size_t factor, bool normalize) {
  if (factor < 1) throw ConfigError("downsample_factor must be >= 1");
  const std::size_t out_rows = images.rows / factor;
  const std::size_t out_cols = images.cols / factor;
  if (out_rows == 0 || out_cols == 0) throw ConfigError("downsample_factor exceeds image size");
  const double scale = (normalize ? 1.0 / 255.0 : 1.0) / static_cast<double>(factor * factor);
  Matrix x(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(out_rows * out_cols));
  for (std::size_t s = 0; s < idx.size(); ++s) {
    if (idx[s] >= images.count) throw SizeError("image index out of range");
    const std::uint8_t* img = images.image(idx[s]);
    for (std::size_t r = 0; r < out_rows; ++r) {
      for (std::size_t c = 0; c < out_cols; ++c) {
        double sum = 0.0;
        for (std::size_t dr = 0; dr < factor; ++dr)
          for (std::size_t dc = 0; dc < factor; ++dc)
            sum += img[(r * factor + dr) * images.cols + (c * factor + dc)];
        x(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(r * out_cols + c)) = sum * scale;
      }
    }
  }
  return x;
}

inline Eigen::VectorXi one_vs_rest_labels(const RawLabels& labels,
                                          const std::vector<std::size_t>& idx, int digit) {
  Eigen::VectorXi y(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t s = 0; s < idx.size(); ++s) {
    if (idx[s] >= labels.values.size()) throw SizeError("label index out of range");
    y(static_cast<Eigen::Index>(s)) = labels.values[idx[s]] == digit ? 1 : -1;
  }
  return y;
}

inline void check_pool(const RawImages& images, const RawLabels& labels, int digit) {
  if (digit < 0 || digit > 9) throw ConfigError("digit must lie in 0..9");
  if (images.count != labels.values.size()) {
    throw SizeError("image and label files hold different counts");
  }
}

namespace detail {

inline BinaryTask make_task(const RawImages& images, const RawLabels& labels, int digit,
                            const std::vector<std::size_t>& train,
                            const std::vector<std::size_t>& test, const SplitSpec& spec) {
  BinaryTask task;
  task.features = extract_features(images, train, spec.downsample_factor, spec.normalize);
  task.labels = one_vs_rest_labels(labels, train, digit);
  task.test_features = extract_features(images, test, spec.downsample_factor, spec.normalize);
  task.test_labels = one_vs_rest_labels(labels, test, digit);
  task.digit = digit;
  task.validate();
  return task;
}

}  // namespace detail

/// Tuning task for `digit`: label +1 iff the image shows `digit`. Every digit
/// drawn with the same seed uses the same images.
inline BinaryTask make_binary_task(const RawImages& images, const RawLabels& labels, int digit,
                                   const SplitSpec& spec) {
  check_pool(images, labels, digit);
  const SplitIndices idx = split_indices(images.count, spec);
  return detail::make_task(images, labels, digit, idx.train, idx.test, spec);
}

/// One task per digit 0-9 on the validation train/test sets.
inline std::vector<BinaryTask> validation_tasks(const RawImages& images, const RawLabels& labels,
                                                const SplitSpec& spec) {
  check_pool(images, labels, 0);
  const SplitIndices idx = split_indices(images.count, spec);
  std::vector<BinaryTask> tasks;
  tasks.reserve(10);
  for (int digit = 0; digit < 10; ++digit) {
    tasks.push_back(
        detail::make_task(images, labels, digit, idx.validation_train, idx.validation_test, spec));
  }
  return tasks;
}

}  // namespace bilevel
