#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace reattn::num {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Precision : std::uint8_t { kSingle = 1, kDouble = 2 };

template <typename T>
constexpr Precision precision_of();
template <>
constexpr Precision precision_of<float>() { return Precision::kSingle; }
template <>
constexpr Precision precision_of<double>() { return Precision::kDouble; }

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a tape allocates it
  bool requires_grad = false;
};

// Shared handle onto a dense row-major array. Copies of a Tensor alias the
// same storage; use clone() for a deep copy. Constness is shallow, as for a
// shared_ptr: mutable_data() serves parameter updates and finite-difference
// probes, mutable_grad() the adjoint rules.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() const { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() const { return node_->grad; }
  // Allocates (if needed) and zero-fills the gradient buffer.
  void zero_grad() const;
  void clear_grad() { node_->grad.clear(); }

  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  Tensor clone() const;
  // Same values, fresh node, no gradient tracking.
  Tensor detach() const;
  template <typename U>
  Tensor<U> cast() const;

  // Reference identity (same underlying node).
  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  TensorNode<T>* node() const { return node_.get(); }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

template <typename T>
template <typename U>
Tensor<U> Tensor<T>::cast() const {
  std::vector<U> out(node_->data.begin(), node_->data.end());
  return Tensor<U>(node_->shape, std::move(out));
}

// Throws NumericalError naming `what` if any value is NaN or Inf.
template <typename T>
void check_finite(const Tensor<T>& t, const std::string& what);

// Ordered record of differentiable operations for one forward pass. A tape
// created with recording=false records nothing and yields non-differentiable
// outputs (inference / finite-difference probes).
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return records_.size(); }
  bool replayed() const { return replayed_; }

  // True if an op with these inputs must be recorded.
  bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) const;

  // `backward` reads output's grad and accumulates into the inputs' grads.
  void record(std::vector<Tensor<T>> inputs, Tensor<T> output, BackwardFn backward);

  // Zeroes the gradient of every tensor referenced by the tape, seeds
  // d loss / d loss = 1 and replays adjoints in reverse order. A second call
  // without reset() throws ContractError.
  void backward(const Tensor<T>& loss);

  // Number of adjoint closures executed by the last backward().
  std::size_t replay_count() const { return replay_count_; }

  void reset();

 private:
  struct Record {
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    BackwardFn backward;
  };
  bool recording_;
  bool replayed_ = false;
  std::size_t replay_count_ = 0;
  std::vector<Record> records_;
};

}  // namespace reattn::num
