#pragma once

#include <filesystem>
#include <iosfwd>

#include "reattn/numerics/tensor.hpp"

// Binary tensor record, all integers little-endian:
//
//   offset  size       field
//   0       4          magic "RATN"
//   4       1          precision code (1 = float32, 2 = float64)
//   5       1          rank r
//   6       4*r        extents, u32 each
//   6+4r    n*width    values, IEEE-754, row-major
//
// Records may be concatenated back to back (checkpoints do this).
namespace reattn::num {

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& tensor);

// Reads one record; values stored at the other precision are converted.
template <typename T>
Tensor<T> read_tensor(std::istream& in);

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& tensor);

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

}  // namespace reattn::num
