#include "reattn/numerics/serialize.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "reattn/error.hpp"

namespace reattn::num {
namespace {

constexpr std::array<char, 4> kMagic{'R', 'A', 'T', 'N'};

template <typename U>
void put_le(std::ostream& out, U value) {
  std::array<unsigned char, sizeof(U)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(U));
}

template <typename U>
U get_le(std::istream& in) {
  std::array<unsigned char, sizeof(U)> bytes;
  if (!in.read(reinterpret_cast<char*>(bytes.data()), sizeof(U))) {
    throw IoError("truncated tensor record");
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  U value;
  std::memcpy(&value, bytes.data(), sizeof(U));
  return value;
}

template <typename Stored, typename T>
std::vector<T> read_values(std::istream& in, std::size_t n) {
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(get_le<Stored>(in));
  return out;
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& tensor) {
  if (tensor.rank() > 255) throw DimensionError("tensor rank exceeds 255");
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(precision_of<T>()));
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.rank()));
  for (auto e : tensor.shape()) {
    if (e > 0xffffffffULL) throw DimensionError("tensor extent exceeds u32");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
  }
  for (auto v : tensor.data()) put_le<T>(out, v);
  if (!out) throw IoError("failed writing tensor record");
}

template <typename T>
Tensor<T> read_tensor(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size())) throw IoError("truncated tensor record");
  if (magic != kMagic) throw IoError("bad tensor magic (expected RATN)");
  const auto code = get_le<std::uint8_t>(in);
  const auto rank = get_le<std::uint8_t>(in);
  Shape shape(rank);
  for (auto& e : shape) e = get_le<std::uint32_t>(in);
  const std::size_t n = shape_numel(shape);
  switch (static_cast<Precision>(code)) {
    case Precision::kSingle:
      return Tensor<T>(std::move(shape), read_values<float, T>(in, n));
    case Precision::kDouble:
      return Tensor<T>(std::move(shape), read_values<double, T>(in, n));
  }
  throw IoError("unknown tensor precision code " + std::to_string(code));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(out, tensor);
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_tensor<T>(in);
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);
template void save_tensor(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::filesystem::path&);
template Tensor<double> load_tensor(const std::filesystem::path&);

}  // namespace reattn::num
