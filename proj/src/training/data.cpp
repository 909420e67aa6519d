#include "reattn/training/data.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "reattn/error.hpp"

namespace reattn::train {

void Dataset::validate() const {
  if (channels == 0 || image_size == 0 || num_classes == 0) throw DataError("dataset dimensions must be positive");
  if (pixels.size() != labels.size() * image_numel()) {
    throw DataError("dataset holds " + std::to_string(pixels.size()) + " pixels for " + std::to_string(labels.size()) +
                    " images of " + std::to_string(image_numel()));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw DataError("sample " + std::to_string(i) + " has label " + std::to_string(labels[i]) + " outside [0, " +
                      std::to_string(num_classes) + ")");
    }
  }
}

template <typename T>
num::Tensor<T> Dataset::images(std::span<const std::size_t> indices) const {
  const std::size_t per = image_numel();
  std::vector<T> v(indices.size() * per);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= size()) throw DataError("sample index " + std::to_string(indices[k]) + " out of range");
    std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(indices[k] * per), per, v.begin() + k * per);
  }
  return num::Tensor<T>({indices.size(), channels, image_size, image_size}, std::move(v));
}

std::vector<std::size_t> Dataset::labels_of(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::size_t begin, std::size_t count) const {
  if (begin + count > size()) throw DataError("subset exceeds dataset of " + std::to_string(size()));
  Dataset d{channels, image_size, num_classes, {}, {}};
  const std::size_t per = image_numel();
  d.pixels.assign(pixels.begin() + static_cast<std::ptrdiff_t>(begin * per),
                  pixels.begin() + static_cast<std::ptrdiff_t>((begin + count) * per));
  d.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                  labels.begin() + static_cast<std::ptrdiff_t>(begin + count));
  return d;
}

Dataset load_cifar10(const std::vector<std::filesystem::path>& files, std::optional<std::size_t> limit) {
  Dataset d{3, 32, 10, {}, {}};
  std::vector<unsigned char> record(kCifarRecordBytes);
  for (const auto& path : files) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open CIFAR-10 file " + path.string());
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    if (bytes % kCifarRecordBytes != 0) {
      throw DataError(path.string() + ": size " + std::to_string(bytes) + " is not a multiple of " +
                      std::to_string(kCifarRecordBytes) + "-byte records");
    }
    for (std::size_t r = 0; r < bytes / kCifarRecordBytes; ++r) {
      if (limit && d.size() >= *limit) return d;
      in.read(reinterpret_cast<char*>(record.data()), static_cast<std::streamsize>(record.size()));
      if (!in) throw IoError(path.string() + ": short read at record " + std::to_string(r));
      if (record[0] >= 10) {
        throw DataError(path.string() + ": record " + std::to_string(r) + " has label " + std::to_string(record[0]));
      }
      d.labels.push_back(record[0]);
      for (std::size_t i = 1; i < record.size(); ++i) d.pixels.push_back(static_cast<float>(record[i]) / 255.0f);
    }
  }
  return d;
}

Dataset load_cifar10_split(const std::filesystem::path& path, bool train, std::optional<std::size_t> limit) {
  if (!std::filesystem::exists(path)) throw IoError("CIFAR-10 path " + path.string() + " does not exist");
  if (!std::filesystem::is_directory(path)) return load_cifar10({path}, limit);
  std::vector<std::filesystem::path> files;
  if (train) {
    for (int i = 1; i <= 5; ++i) files.push_back(path / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    files.push_back(path / "test_batch.bin");
  }
  return load_cifar10(files, limit);
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes == 0 || spec.channels == 0) throw ParameterError("synthetic data needs classes and channels");
  const std::size_t grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(spec.num_classes))));
  const std::size_t cell = spec.image_size / grid;
  if (cell < 2) {
    throw ParameterError("synthetic images of size " + std::to_string(spec.image_size) + " cannot hold " +
                         std::to_string(spec.num_classes) + " class cells");
  }
  const std::size_t side = cell / 2;
  Dataset d{spec.channels, spec.image_size, spec.num_classes, {}, {}};
  d.pixels.resize(spec.num_samples * d.image_numel());
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> noise(0.0, spec.noise);
  std::uniform_int_distribution<std::size_t> label(0, spec.num_classes - 1);
  std::uniform_int_distribution<std::size_t> offset(0, cell - side);
  const std::size_t s = spec.image_size;
  for (std::size_t n = 0; n < spec.num_samples; ++n) {
    const std::size_t c = label(rng);
    d.labels.push_back(c);
    float* img = d.pixels.data() + n * d.image_numel();
    for (std::size_t i = 0; i < d.image_numel(); ++i) img[i] = static_cast<float>(noise(rng));
    const std::size_t y0 = (c / grid) * cell + offset(rng), x0 = (c % grid) * cell + offset(rng);
    for (std::size_t ch = 0; ch < spec.channels; ++ch)
      for (std::size_t y = y0; y < y0 + side; ++y)
        for (std::size_t x = x0; x < x0 + side; ++x) img[(ch * s + y) * s + x] = 1.0f;
  }
  return d;
}

template num::Tensor<float> Dataset::images<float>(std::span<const std::size_t>) const;
template num::Tensor<double> Dataset::images<double>(std::span<const std::size_t>) const;

}  // namespace reattn::train
