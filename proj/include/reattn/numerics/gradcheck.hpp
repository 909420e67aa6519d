#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "reattn/numerics/tensor.hpp"

namespace reattn::num {

struct NamedTensor {
  std::string name;
  Tensor<double> tensor;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error() const;
  bool passed(double tolerance) const { return max_rel_error() < tolerance; }
  std::string summary() const;
};

// Builds the checked quantity on the given tape. Non-scalar outputs are
// contracted with a fixed pseudo-random weight tensor so every output entry
// contributes to the checked scalar.
using CheckedFunction = std::function<Tensor<double>(Tape<double>&)>;

struct GradCheckOptions {
  double step = 1e-5;
  std::uint64_t projection_seed = 0x5eed;
};

// Compares tape adjoints against central differences (f(x+h) - f(x-h)) / 2h
// for every entry of every input. Relative error per entry is
// |a - n| / (|a| + |n| + 1e-8). The function is evaluated twice at the base
// point first; differing values raise CheckInvalidError.
GradCheckReport grad_check(const CheckedFunction& fn, std::vector<NamedTensor> inputs,
                           const GradCheckOptions& options = {});

}  // namespace reattn::num
