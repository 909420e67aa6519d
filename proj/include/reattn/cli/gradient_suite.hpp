#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "reattn/numerics/gradcheck.hpp"

namespace reattn::cli {

struct GradientCase {
  std::string module;
  std::string name;
  num::GradCheckReport report;
};

// "attention", "model", "loss"
const std::vector<std::string>& gradient_modules();

// Finite-difference checks in double precision on small random instances.
// An empty module runs all of them; an unknown one raises ParameterError.
std::vector<GradientCase> run_gradient_suite(const std::string& module = {}, std::uint64_t seed = 0);

}  // namespace reattn::cli
