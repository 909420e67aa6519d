#include "reattn/numerics/norm.hpp"

#include "reattn/error.hpp"
#include "reattn/numerics/ops.hpp"

namespace reattn::num {

template <typename T>
Normalization<T>::Normalization(NormKind kind, std::vector<std::size_t> stats_axes, Tensor<T> scale,
                                Tensor<T> shift, T epsilon, T momentum)
    : kind_(kind),
      axes_(std::move(stats_axes)),
      scale_(std::move(scale)),
      shift_(std::move(shift)),
      epsilon_(epsilon),
      momentum_(momentum) {
  if (!(epsilon_ > T(0))) throw ParameterError("normalization epsilon must be positive");
}

template <typename T>
Tensor<T> Normalization<T>::forward(Tape<T>& tape, const Tensor<T>& x, bool training) {
  Tensor<T> y;
  if (kind_ == NormKind::kBatch && !training && running_mean_.defined()) {
    y = standardize_with(tape, x, axes_, running_mean_.data(), running_var_.data(), epsilon_);
  } else {
    auto st = standardize(tape, x, axes_, epsilon_);
    y = st.value;
    if (kind_ == NormKind::kBatch && training) {
      const Shape stat_shape{st.mean.size()};
      if (!running_mean_.defined()) {
        running_mean_ = Tensor<T>(stat_shape, st.mean);
        running_var_ = Tensor<T>(stat_shape, st.var);
      } else {
        auto rm = running_mean_.mutable_data();
        auto rv = running_var_.mutable_data();
        if (rm.size() != st.mean.size()) {
          throw DimensionError("batch-norm statistics changed size between calls");
        }
        for (std::size_t i = 0; i < rm.size(); ++i) {
          rm[i] = (T(1) - momentum_) * rm[i] + momentum_ * st.mean[i];
          rv[i] = (T(1) - momentum_) * rv[i] + momentum_ * st.var[i];
        }
      }
    }
  }
  return add(tape, mul(tape, y, scale_), shift_);
}

template <typename T>
Tensor<T> normalize(Tape<T>& tape, const Tensor<T>& x, const std::vector<std::size_t>& stats_axes,
                    const Tensor<T>& scale, const Tensor<T>& shift, T epsilon) {
  auto st = standardize(tape, x, stats_axes, epsilon);
  return add(tape, mul(tape, st.value, scale), shift);
}

template class Normalization<float>;
template class Normalization<double>;
template Tensor<float> normalize(Tape<float>&, const Tensor<float>&, const std::vector<std::size_t>&,
                                 const Tensor<float>&, const Tensor<float>&, float);
template Tensor<double> normalize(Tape<double>&, const Tensor<double>&, const std::vector<std::size_t>&,
                                  const Tensor<double>&, const Tensor<double>&, double);

}  // namespace reattn::num
