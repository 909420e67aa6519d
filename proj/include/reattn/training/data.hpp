#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "reattn/numerics/tensor.hpp"

namespace reattn::train {

// Images stored as [N, C, S, S] floats in [0, 1].
struct Dataset {
  std::size_t channels = 3;
  std::size_t image_size = 32;
  std::size_t num_classes = 10;
  std::vector<float> pixels;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return channels * image_size * image_size; }
  // Throws DataError on inconsistent sizes or out-of-range labels.
  void validate() const;

  template <typename T>
  num::Tensor<T> images(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> labels_of(std::span<const std::size_t> indices) const;
  Dataset subset(std::size_t begin, std::size_t count) const;
};

constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;

// CIFAR-10 binary records: label byte, then 1024 R, 1024 G, 1024 B bytes
// (row-major 32x32). Pixels are scaled by 1/255.
Dataset load_cifar10(const std::vector<std::filesystem::path>& files, std::optional<std::size_t> limit = {});
// `path` is a .bin file or a directory holding data_batch_{1..5}.bin
// (train) and test_batch.bin (eval).
Dataset load_cifar10_split(const std::filesystem::path& path, bool train, std::optional<std::size_t> limit = {});

// Class c owns one cell of a ceil(sqrt(C)) x ceil(sqrt(C)) grid; each image
// holds a bright square at a random position inside its class cell over
// uniform background noise.
struct SyntheticSpec {
  std::size_t num_samples = 512;
  std::size_t image_size = 16;
  std::size_t channels = 3;
  std::size_t num_classes = 4;
  double noise = 0.3;
  std::uint64_t seed = 0;
};

Dataset make_synthetic(const SyntheticSpec& spec);

}  // namespace reattn::train
