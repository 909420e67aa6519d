#pragma once

#include <vector>

#include "reattn/numerics/tensor.hpp"

namespace reattn::num {

enum class NormKind { kLayer, kBatch };

// Standardizes over `stats_axes`, then applies scale * y + shift with
// numpy broadcasting (scale/shift shaped for the axes they act on, e.g. [D]
// for layer norm over the last axis, [H, 1, 1] for per-head batch norm of
// [N, H, T, T] maps). The batch kind tracks running statistics in training
// mode and uses them in evaluation mode.
template <typename T>
class Normalization {
 public:
  Normalization() = default;
  Normalization(NormKind kind, std::vector<std::size_t> stats_axes, Tensor<T> scale, Tensor<T> shift,
                T epsilon = T(1e-5), T momentum = T(0.1));

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, bool training);

  NormKind kind() const { return kind_; }
  const std::vector<std::size_t>& stats_axes() const { return axes_; }
  T epsilon() const { return epsilon_; }
  Tensor<T>& scale() { return scale_; }
  Tensor<T>& shift() { return shift_; }
  const Tensor<T>& scale() const { return scale_; }
  const Tensor<T>& shift() const { return shift_; }
  // Undefined until the first training-mode batch (batch kind only).
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }
  const Tensor<T>& running_mean() const { return running_mean_; }
  const Tensor<T>& running_var() const { return running_var_; }

 private:
  NormKind kind_ = NormKind::kLayer;
  std::vector<std::size_t> axes_;
  Tensor<T> scale_;
  Tensor<T> shift_;
  T epsilon_ = T(1e-5);
  T momentum_ = T(0.1);
  Tensor<T> running_mean_;
  Tensor<T> running_var_;
};

// Stateless form: standardize over `stats_axes`, then affine.
template <typename T>
Tensor<T> normalize(Tape<T>& tape, const Tensor<T>& x, const std::vector<std::size_t>& stats_axes,
                    const Tensor<T>& scale, const Tensor<T>& shift, T epsilon);

}  // namespace reattn::num
