#include "reattn/numerics/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "reattn/error.hpp"

namespace reattn::num {
namespace {

using Strides = std::vector<std::size_t>;

Strides contiguous_strides(const Shape& shape) {
  Strides s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Strides of `in` expressed in the index space of `out` (0 on broadcast axes).
Strides broadcast_strides(const Shape& in, const Shape& out) {
  Strides s(out.size(), 0);
  const Strides cs = contiguous_strides(in);
  const std::size_t lead = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    s[lead + i] = in[i] == 1 ? 0 : cs[i];
  }
  return s;
}

// Calls f(out_index, a_offset, b_offset) for every element of `out`.
template <typename F>
void for_each_broadcast(const Shape& out, const Strides& sa, const Strides& sb, F&& f) {
  const std::size_t n = shape_numel(out);
  const std::size_t rank = out.size();
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  const std::size_t inner = out[rank - 1];
  const std::size_t ia = sa[rank - 1], ib = sb[rank - 1];
  for (std::size_t i = 0; i < n; i += inner) {
    std::size_t a = oa, b = ob;
    for (std::size_t j = 0; j < inner; ++j, a += ia, b += ib) f(i + j, a, b);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary_op(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd,
                    Da da, Db db) {
  const bool same = a.shape() == b.shape();
  const Shape out_shape = same ? a.shape() : broadcast_shape(a.shape(), b.shape(), name);
  std::vector<T> out(shape_numel(out_shape));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  Strides sa, sb;
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i], pb[i]);
  } else {
    sa = broadcast_strides(a.shape(), out_shape);
    sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb,
                       [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(pa[ia], pb[ib]); });
  }
  Tensor<T> result(out_shape, std::move(out));
  if (tape.needs_grad({&a, &b})) {
    tape.record({a, b}, result, [a, b, result, same, sa, sb, da, db]() mutable {
      const T* g = result.grad().data();
      const T* xa = a.data().data();
      const T* xb = b.data().data();
      T* ga = a.requires_grad() ? a.mutable_grad().data() : nullptr;
      T* gb = b.requires_grad() ? b.mutable_grad().data() : nullptr;
      auto step = [&](std::size_t i, std::size_t ia, std::size_t ib) {
        if (ga) ga[ia] += da(xa[ia], xb[ib], g[i]);
        if (gb) gb[ib] += db(xa[ia], xb[ib], g[i]);
      };
      if (same) {
        for (std::size_t i = 0; i < result.numel(); ++i) step(i, i, i);
      } else {
        for_each_broadcast(result.shape(), sa, sb, step);
      }
    });
  }
  return result;
}

// y = f(x) elementwise; dfdx(x, y) gives the local derivative.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary_op(Tape<T>& tape, const Tensor<T>& x, Fwd fwd, Deriv dfdx) {
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(px[i]);
  Tensor<T> result(x.shape(), std::move(out));
  if (tape.needs_grad({&x})) {
    tape.record({x}, result, [x, result, dfdx]() mutable {
      const T* g = result.grad().data();
      const T* xs = x.data().data();
      const T* ys = result.data().data();
      T* gx = x.mutable_grad().data();
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[i] * dfdx(xs[i], ys[i]);
    });
  }
  return result;
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void check_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape));
  }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

// Maps each element of `shape` to the flat index of its group when reducing
// over `axes`; returns the per-group element count too.
std::vector<std::size_t> group_index(const Shape& shape, const std::vector<std::size_t>& axes,
                                     std::size_t& groups, std::size_t& count) {
  std::vector<bool> reduced(shape.size(), false);
  for (auto a : axes) {
    check_axis(shape, a, "standardize");
    reduced[a] = true;
  }
  Shape kept;
  count = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (reduced[i]) {
      count *= shape[i];
    } else {
      kept.push_back(shape[i]);
    }
  }
  groups = shape_numel(kept);
  // strides of the kept axes in group space, 0 for reduced axes
  Strides gs(shape.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    if (!reduced[i]) {
      gs[i] = stride;
      stride *= shape[i];
    }
  }
  std::vector<std::size_t> out(shape_numel(shape));
  const Strides zero(shape.size(), 0);
  for_each_broadcast(shape, gs, zero, [&](std::size_t i, std::size_t g, std::size_t) { out[i] = g; });
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      tape, a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T g) { return g; },
      [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      tape, a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T g) { return g; },
      [](T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      tape, a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
      [](T x, T, T g) { return g * x; });
}

template <typename T>
Tensor<T> div(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      tape, a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T g) { return g / y; },
      [](T x, T y, T g) { return -g * x / (y * y); });
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  return unary_op<T>(
      tape, x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& x, T value) {
  return unary_op<T>(
      tape, x, [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> exp(Tape<T>& tape, const Tensor<T>& x) {
  return unary_op<T>(
      tape, x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(Tape<T>& tape, const Tensor<T>& x) {
  return unary_op<T>(
      tape, x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> sqrt(Tape<T>& tape, const Tensor<T>& x) {
  return unary_op<T>(
      tape, x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return unary_op<T>(
      tape, x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * kInvSqrt2)); },
      [inv_sqrt_2pi](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * kInvSqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T total = 0;
  for (auto v : x.data()) total += v;
  Tensor<T> result = Tensor<T>::scalar(total);
  if (tape.needs_grad({&x})) {
    tape.record({x}, result, [x, result]() mutable {
      const T g = result.grad()[0];
      for (auto& gx : x.mutable_grad()) gx += g;
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x) {
  return scale(tape, sum(tape, x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> sum_axis(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, bool keepdim) {
  check_axis(x.shape(), axis, "sum_axis");
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  if (keepdim || x.rank() == 1) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  std::vector<T> out(s.outer * s.inner, T(0));
  const T* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.len; ++l) {
      const T* row = px + (o * s.len + l) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += row[i];
    }
  }
  Tensor<T> result(out_shape, std::move(out));
  if (tape.needs_grad({&x})) {
    tape.record({x}, result, [x, result, s]() mutable {
      const T* g = result.grad().data();
      T* gx = x.mutable_grad().data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t l = 0; l < s.len; ++l) {
          T* row = gx + (o * s.len + l) * s.inner;
          const T* src = g + o * s.inner;
          for (std::size_t i = 0; i < s.inner; ++i) row[i] += src[i];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean_axis(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, bool keepdim) {
  check_axis(x.shape(), axis, "mean_axis");
  return scale(tape, sum_axis(tape, x, axis, keepdim), T(1) / static_cast<T>(x.dim(axis)));
}

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != k2) {
    throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);

  // (offset_a, offset_b, offset_out) triples, one per 2-D product
  struct Job {
    std::size_t a, b, c;
    std::size_t rows;
  };
  std::vector<Job> jobs;
  Shape out_shape;
  if (batch_b.empty()) {
    // fold every leading axis of `a` into the row dimension: one GEMM
    out_shape = a.shape();
    out_shape.back() = n;
    jobs.push_back({0, 0, 0, shape_numel(batch_a) * m});
  } else {
    const Shape batch = broadcast_shape(batch_a, batch_b, "matmul");
    out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Strides sa = broadcast_strides(batch_a, batch);
    Strides sb = broadcast_strides(batch_b, batch);
    if (batch_a.empty()) sa.assign(batch.size(), 0);
    for_each_broadcast(batch, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      jobs.push_back({ia * m * k, ib * k * n, i * m * n, m});
    });
  }
  std::vector<T> out(shape_numel(out_shape));
  for (const auto& j : jobs) {
    ConstMap<T> A(a.data().data() + j.a, static_cast<Eigen::Index>(j.rows), static_cast<Eigen::Index>(k));
    ConstMap<T> B(b.data().data() + j.b, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    MutMap<T> C(out.data() + j.c, static_cast<Eigen::Index>(j.rows), static_cast<Eigen::Index>(n));
    C.noalias() = A * B;
  }
  Tensor<T> result(out_shape, std::move(out));
  if (tape.needs_grad({&a, &b})) {
    tape.record({a, b}, result, [a, b, result, jobs, k, n]() mutable {
      const T* g = result.grad().data();
      for (const auto& j : jobs) {
        const auto rows = static_cast<Eigen::Index>(j.rows);
        const auto kk = static_cast<Eigen::Index>(k);
        const auto nn = static_cast<Eigen::Index>(n);
        ConstMap<T> G(g + j.c, rows, nn);
        if (a.requires_grad()) {
          ConstMap<T> B(b.data().data() + j.b, kk, nn);
          MutMap<T> GA(a.mutable_grad().data() + j.a, rows, kk);
          GA.noalias() += G * B.transpose();
        }
        if (b.requires_grad()) {
          ConstMap<T> A(a.data().data() + j.a, rows, kk);
          MutMap<T> GB(b.mutable_grad().data() + j.b, kk, nn);
          GB.noalias() += A.transpose() * G;
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> permute(Tape<T>& tape, const Tensor<T>& x, const std::vector<std::size_t>& order) {
  const std::size_t rank = x.rank();
  if (order.size() != rank) throw DimensionError("permute order rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> seen(rank, false);
  for (auto o : order) {
    if (o >= rank || seen[o]) throw DimensionError("permute order is not a permutation");
    seen[o] = true;
  }
  const Strides in_strides = contiguous_strides(x.shape());
  Shape out_shape(rank);
  Strides gather(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = x.dim(order[i]);
    gather[i] = in_strides[order[i]];
  }
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  const Strides zero(rank, 0);
  for_each_broadcast(out_shape, gather, zero,
                     [&](std::size_t i, std::size_t src, std::size_t) { out[i] = px[src]; });
  Tensor<T> result(out_shape, std::move(out));
  if (tape.needs_grad({&x})) {
    tape.record({x}, result, [x, result, gather, zero]() mutable {
      const T* g = result.grad().data();
      T* gx = x.mutable_grad().data();
      for_each_broadcast(result.shape(), gather, zero,
                         [&](std::size_t i, std::size_t src, std::size_t) { gx[src] += g[i]; });
    });
  }
  return result;
}

template <typename T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> order(x.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[x.rank() - 1], order[x.rank() - 2]);
  return permute(tape, x, order);
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor<T> result(std::move(shape), x.vec());
  if (tape.needs_grad({&x})) {
    tape.record({x}, result, [x, result]() mutable {
      const T* g = result.grad().data();
      T* gx = x.mutable_grad().data();
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  check_axis(first, axis, "concat");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != first.size()) throw DimensionError("concat rank mismatch");
    probe[axis] = first[axis];
    if (probe != first) {
      throw DimensionError("concat extents differ off-axis: " + shape_str(first) + " vs " +
                           shape_str(p.shape()));
    }
    out_shape[axis] += p.dim(axis);
  }
  const AxisSplit os = split_at(out_shape, axis);
  std::vector<T> out(shape_numel(out_shape));
  std::size_t offset = 0;  // running offset along the axis, in units of inner
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * os.inner;
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::copy_n(p.data().data() + o * chunk, chunk, out.data() + o * os.len * os.inner + offset);
    }
    offset += chunk;
  }
  Tensor<T> result(out_shape, std::move(out));
  bool any = false;
  for (const auto& p : parts) any = any || tape.needs_grad({&p});
  if (any) {
    tape.record(parts, result, [parts, result, os, axis]() mutable {
      const T* g = result.grad().data();
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t chunk = p.dim(axis) * os.inner;
        if (p.requires_grad()) {
          T* gp = p.mutable_grad().data();
          for (std::size_t o = 0; o < os.outer; ++o) {
            const T* src = g + o * os.len * os.inner + off;
            for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += src[i];
          }
        }
        off += chunk;
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> slice(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, std::size_t start,
                std::size_t length) {
  check_axis(x.shape(), axis, "slice");
  if (length == 0 || start + length > x.dim(axis)) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const std::size_t chunk = length * s.inner;
  std::vector<T> out(s.outer * chunk);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data().data() + (o * s.len + start) * s.inner, chunk, out.data() + o * chunk);
  }
  Tensor<T> result(out_shape, std::move(out));
  if (tape.needs_grad({&x})) {
    tape.record({x}, result, [x, result, s, start, chunk]() mutable {
      const T* g = result.grad().data();
      T* gx = x.mutable_grad().data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        T* dst = gx + (o * s.len + start) * s.inner;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[o * chunk + i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> broadcast_to(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  if (broadcast_shape(x.shape(), shape, "broadcast_to") != shape) {
    throw DimensionError("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  const Strides sx = broadcast_strides(x.shape(), shape);
  const Strides zero(shape.size(), 0);
  std::vector<T> out(shape_numel(shape));
  const T* px = x.data().data();
  for_each_broadcast(shape, sx, zero, [&](std::size_t i, std::size_t src, std::size_t) { out[i] = px[src]; });
  Tensor<T> result(std::move(shape), std::move(out));
  if (tape.needs_grad({&x})) {
    tape.record({x}, result, [x, result, sx, zero]() mutable {
      const T* g = result.grad().data();
      T* gx = x.mutable_grad().data();
      for_each_broadcast(result.shape(), sx, zero,
                         [&](std::size_t i, std::size_t src, std::size_t) { gx[src] += g[i]; });
    });
  }
  return result;
}

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, T temperature) {
  check_axis(x.shape(), axis, "softmax");
  if (!(temperature > T(0))) {
    throw ParameterError("softmax temperature must be positive, got " + std::to_string(temperature));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  const T inv_t = T(1) / temperature;
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = px[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, px[base + l * s.inner]);
      T total = 0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const T e = std::exp((px[base + l * s.inner] - mx) * inv_t);
        out[base + l * s.inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] *= inv;
    }
  }
  Tensor<T> result(x.shape(), std::move(out));
  if (tape.needs_grad({&x})) {
    tape.record({x}, result, [x, result, s, inv_t]() mutable {
      const T* g = result.grad().data();
      const T* y = result.data().data();
      T* gx = x.mutable_grad().data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.len * s.inner + i;
          T dot = 0;
          for (std::size_t l = 0; l < s.len; ++l) dot += g[base + l * s.inner] * y[base + l * s.inner];
          for (std::size_t l = 0; l < s.len; ++l) {
            const std::size_t at = base + l * s.inner;
            gx[at] += y[at] * (g[at] - dot) * inv_t;
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Standardized<T> standardize(Tape<T>& tape, const Tensor<T>& x, const std::vector<std::size_t>& axes,
                            T epsilon) {
  if (axes.empty()) throw DimensionError("standardize needs at least one statistics axis");
  std::size_t groups = 0, count = 0;
  auto gidx = group_index(x.shape(), axes, groups, count);
  std::vector<T> mu(groups, T(0)), var(groups, T(0));
  const T* px = x.data().data();
  for (std::size_t i = 0; i < x.numel(); ++i) mu[gidx[i]] += px[i];
  for (auto& m : mu) m /= static_cast<T>(count);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T d = px[i] - mu[gidx[i]];
    var[gidx[i]] += d * d;
  }
  for (auto& v : var) v /= static_cast<T>(count);
  std::vector<T> inv_std(groups);
  for (std::size_t gi = 0; gi < groups; ++gi) inv_std[gi] = T(1) / std::sqrt(var[gi] + epsilon);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = (px[i] - mu[gidx[i]]) * inv_std[gidx[i]];
  Tensor<T> result(x.shape(), std::move(out));
  if (tape.needs_grad({&x})) {
    tape.record({x}, result, [x, result, gidx = std::move(gidx), inv_std, groups, count]() mutable {
      const T* g = result.grad().data();
      const T* y = result.data().data();
      T* gx = x.mutable_grad().data();
      std::vector<T> mg(groups, T(0)), mgy(groups, T(0));
      for (std::size_t i = 0; i < x.numel(); ++i) {
        mg[gidx[i]] += g[i];
        mgy[gidx[i]] += g[i] * y[i];
      }
      const T inv_n = T(1) / static_cast<T>(count);
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const std::size_t gi = gidx[i];
        gx[i] += inv_std[gi] * (g[i] - mg[gi] * inv_n - y[i] * mgy[gi] * inv_n);
      }
    });
  }
  return Standardized<T>{result, std::move(mu), std::move(var)};
}

template <typename T>
Tensor<T> standardize_with(Tape<T>& tape, const Tensor<T>& x, const std::vector<std::size_t>& axes,
                           std::span<const T> mean, std::span<const T> var, T epsilon) {
  std::size_t groups = 0, count = 0;
  auto gidx = group_index(x.shape(), axes, groups, count);
  if (mean.size() != groups || var.size() != groups) {
    throw DimensionError("standardize_with: statistics have " + std::to_string(mean.size()) +
                         " entries, expected " + std::to_string(groups));
  }
  std::vector<T> inv_std(groups);
  for (std::size_t gi = 0; gi < groups; ++gi) inv_std[gi] = T(1) / std::sqrt(var[gi] + epsilon);
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = (px[i] - mean[gidx[i]]) * inv_std[gidx[i]];
  Tensor<T> result(x.shape(), std::move(out));
  if (tape.needs_grad({&x})) {
    tape.record({x}, result, [x, result, gidx = std::move(gidx), inv_std]() mutable {
      const T* g = result.grad().data();
      T* gx = x.mutable_grad().data();
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[i] * inv_std[gidx[i]];
    });
  }
  return result;
}

template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& mask, T rate) {
  if (!(rate >= T(0) && rate < T(1))) {
    throw ParameterError("drop rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (mask.shape() != x.shape()) {
    throw DimensionError("dropout mask " + shape_str(mask.shape()) + " does not match input " +
                         shape_str(x.shape()));
  }
  const T keep_scale = T(1) / (T(1) - rate);
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  const T* pm = mask.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] * pm[i] * keep_scale;
  Tensor<T> result(x.shape(), std::move(out));
  if (tape.needs_grad({&x})) {
    tape.record({x}, result, [x, mask, result, keep_scale]() mutable {
      const T* g = result.grad().data();
      const T* pm = mask.data().data();
      T* gx = x.mutable_grad().data();
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[i] * pm[i] * keep_scale;
    });
  }
  return result;
}

template <typename T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& table, std::span<const std::size_t> indices) {
  if (table.rank() != 2) throw DimensionError("gather_rows needs a [V, D] table, got " + shape_str(table.shape()));
  if (indices.empty()) throw DimensionError("gather_rows with no indices");
  const std::size_t rows = table.dim(0), width = table.dim(1);
  std::vector<T> out(indices.size() * width);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows) {
      throw DimensionError("gather_rows index " + std::to_string(indices[r]) + " out of range " +
                           std::to_string(rows));
    }
    std::copy_n(table.data().data() + indices[r] * width, width, out.data() + r * width);
  }
  Tensor<T> result(Shape{indices.size(), width}, std::move(out));
  if (tape.needs_grad({&table})) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    tape.record({table}, result, [table, result, idx, width]() mutable {
      const T* g = result.grad().data();
      T* gt = table.mutable_grad().data();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t c = 0; c < width; ++c) gt[idx[r] * width + c] += g[r * width + c];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy needs [N, C] logits, got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  std::vector<T> probs(n * c);
  T loss = 0;
  const T* px = logits.data().data();
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= c) throw DimensionError("cross_entropy label out of range");
    const T* row = px + r * c;
    const T mx = *std::max_element(row, row + c);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - mx);
    const T log_z = mx + std::log(total);
    loss -= row[labels[r]] - log_z;
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(row[j] - log_z);
  }
  Tensor<T> result = Tensor<T>::scalar(loss / static_cast<T>(n));
  if (tape.needs_grad({&logits})) {
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    tape.record({logits}, result, [logits, result, probs = std::move(probs), lab, n, c]() mutable {
      const T g = result.grad()[0] / static_cast<T>(n);
      T* gl = logits.mutable_grad().data();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < c; ++j) {
          gl[r * c + j] += g * (probs[r * c + j] - (j == lab[r] ? T(1) : T(0)));
        }
      }
    });
  }
  return result;
}

#define REATTN_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> sub(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> div(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                          \
  template Tensor<T> add_scalar(Tape<T>&, const Tensor<T>&, T);                                     \
  template Tensor<T> exp(Tape<T>&, const Tensor<T>&);                                               \
  template Tensor<T> log(Tape<T>&, const Tensor<T>&);                                               \
  template Tensor<T> sqrt(Tape<T>&, const Tensor<T>&);                                              \
  template Tensor<T> gelu(Tape<T>&, const Tensor<T>&);                                              \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                               \
  template Tensor<T> mean(Tape<T>&, const Tensor<T>&);                                              \
  template Tensor<T> sum_axis(Tape<T>&, const Tensor<T>&, std::size_t, bool);                       \
  template Tensor<T> mean_axis(Tape<T>&, const Tensor<T>&, std::size_t, bool);                      \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> transpose(Tape<T>&, const Tensor<T>&);                                         \
  template Tensor<T> permute(Tape<T>&, const Tensor<T>&, const std::vector<std::size_t>&);          \
  template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);                                    \
  template Tensor<T> concat(Tape<T>&, const std::vector<Tensor<T>>&, std::size_t);                  \
  template Tensor<T> slice(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t, std::size_t);      \
  template Tensor<T> broadcast_to(Tape<T>&, const Tensor<T>&, Shape);                               \
  template Tensor<T> softmax(Tape<T>&, const Tensor<T>&, std::size_t, T);                           \
  template Standardized<T> standardize(Tape<T>&, const Tensor<T>&, const std::vector<std::size_t>&, \
                                       T);                                                          \
  template Tensor<T> standardize_with(Tape<T>&, const Tensor<T>&, const std::vector<std::size_t>&,  \
                                      std::span<const T>, std::span<const T>, T);                   \
  template Tensor<T> dropout(Tape<T>&, const Tensor<T>&, const Tensor<T>&, T);                      \
  template Tensor<T> gather_rows(Tape<T>&, const Tensor<T>&, std::span<const std::size_t>);         \
  template Tensor<T> cross_entropy(Tape<T>&, const Tensor<T>&, std::span<const std::size_t>);

REATTN_INSTANTIATE_OPS(float)
REATTN_INSTANTIATE_OPS(double)

}  // namespace reattn::num
