#include "reattn/attention/attention.hpp"

#include <cmath>

#include "reattn/error.hpp"
#include "reattn/numerics/ops.hpp"

namespace reattn::attn {

using num::Shape;
using num::shape_str;

std::string to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::kVanilla: return "vanilla";
    case AttentionKind::kReAttention: return "re_attention";
    case AttentionKind::kTemperature: return "temperature";
    case AttentionKind::kDropAttention: return "drop_attention";
    case AttentionKind::kShared: return "shared";
  }
  return "?";
}

std::string to_string(TemperatureMode mode) {
  switch (mode) {
    case TemperatureMode::kFixed: return "fixed";
    case TemperatureMode::kLearnable: return "learnable";
    case TemperatureMode::kLinearDecay: return "linear_decay";
  }
  return "?";
}

std::string to_string(NormMode mode) {
  switch (mode) {
    case NormMode::kBatch: return "batch";
    case NormMode::kPerSample: return "per_sample";
    case NormMode::kIdentity: return "identity";
  }
  return "?";
}

AttentionKind parse_attention_kind(const std::string& text) {
  for (auto k : {AttentionKind::kVanilla, AttentionKind::kReAttention, AttentionKind::kTemperature,
                 AttentionKind::kDropAttention, AttentionKind::kShared}) {
    if (to_string(k) == text) return k;
  }
  throw ConfigError("unknown attention kind '" + text + "'");
}

TemperatureMode parse_temperature_mode(const std::string& text) {
  for (auto m : {TemperatureMode::kFixed, TemperatureMode::kLearnable, TemperatureMode::kLinearDecay}) {
    if (to_string(m) == text) return m;
  }
  throw ConfigError("unknown temperature mode '" + text + "'");
}

NormMode parse_norm_mode(const std::string& text) {
  for (auto m : {NormMode::kBatch, NormMode::kPerSample, NormMode::kIdentity}) {
    if (to_string(m) == text) return m;
  }
  throw ConfigError("unknown norm mode '" + text + "'");
}

double TemperatureSetting::at_block(std::size_t block, std::size_t num_blocks) const {
  if (mode != TemperatureMode::kLinearDecay) return value;
  if (num_blocks <= 1) return decay_start;
  const double frac = static_cast<double>(block) / static_cast<double>(num_blocks - 1);
  return decay_start + (decay_end - decay_start) * frac;
}

void AttentionVariantConfig::validate() const {
  const std::string name = to_string(kind);
  const bool wants_temp = kind == AttentionKind::kTemperature;
  const bool wants_drop = kind == AttentionKind::kDropAttention;
  const bool wants_norm = kind == AttentionKind::kReAttention || kind == AttentionKind::kShared;
  if (wants_temp != temperature.has_value()) {
    throw ConfigError(wants_temp ? name + " attention needs a temperature setting"
                                 : "temperature setting is only valid for temperature attention, not " + name);
  }
  if (wants_drop != drop_rate.has_value()) {
    throw ConfigError(wants_drop ? name + " attention needs a drop_rate"
                                 : "drop_rate is only valid for drop_attention, not " + name);
  }
  if (wants_norm != norm_mode.has_value()) {
    throw ConfigError(wants_norm ? name + " attention needs a norm_mode"
                                 : "norm_mode is only valid for re_attention/shared, not " + name);
  }
  if (temperature) {
    const auto& t = *temperature;
    if (t.mode == TemperatureMode::kLinearDecay) {
      if (!(t.decay_start > 0.0 && t.decay_end > 0.0)) {
        throw ConfigError("linear temperature decay endpoints must be positive");
      }
    } else if (!(t.value > 0.0)) {
      throw ConfigError("temperature must be positive, got " + std::to_string(t.value));
    }
  }
  if (drop_rate && !(*drop_rate >= 0.0 && *drop_rate < 1.0)) {
    throw ConfigError("drop_rate must lie in [0, 1), got " + std::to_string(*drop_rate));
  }
}

AttentionVariantConfig AttentionVariantConfig::vanilla() { return {}; }

AttentionVariantConfig AttentionVariantConfig::re_attention(NormMode norm) {
  AttentionVariantConfig c;
  c.kind = AttentionKind::kReAttention;
  c.norm_mode = norm;
  return c;
}

AttentionVariantConfig AttentionVariantConfig::fixed_temperature(double tau) {
  AttentionVariantConfig c;
  c.kind = AttentionKind::kTemperature;
  c.temperature = TemperatureSetting{TemperatureMode::kFixed, tau, 1.0, 0.5};
  return c;
}

AttentionVariantConfig AttentionVariantConfig::learnable_temperature(double initial) {
  AttentionVariantConfig c;
  c.kind = AttentionKind::kTemperature;
  c.temperature = TemperatureSetting{TemperatureMode::kLearnable, initial, 1.0, 0.5};
  return c;
}

AttentionVariantConfig AttentionVariantConfig::linear_decay_temperature(double start, double end) {
  AttentionVariantConfig c;
  c.kind = AttentionKind::kTemperature;
  c.temperature = TemperatureSetting{TemperatureMode::kLinearDecay, 1.0, start, end};
  return c;
}

AttentionVariantConfig AttentionVariantConfig::drop_attention(double rate) {
  AttentionVariantConfig c;
  c.kind = AttentionKind::kDropAttention;
  c.drop_rate = rate;
  return c;
}

AttentionVariantConfig AttentionVariantConfig::shared(NormMode norm) {
  AttentionVariantConfig c;
  c.kind = AttentionKind::kShared;
  c.norm_mode = norm;
  return c;
}

template <typename T>
Tensor<T> Linear<T>::forward(Tape<T>& tape, const Tensor<T>& x) const {
  return num::add(tape, num::matmul(tape, x, weight), bias);
}

template <typename T>
Tensor<T> split_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads) {
  if (x.rank() != 3) throw DimensionError("split_heads expects [N, T, D], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("embedding dimension " + std::to_string(d) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  auto r = num::reshape(tape, x, Shape{n, t, heads, d / heads});
  return num::permute(tape, r, {0, 2, 1, 3});
}

template <typename T>
Tensor<T> merge_heads(Tape<T>& tape, const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("merge_heads expects [N, H, T, d], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), h = x.dim(1), t = x.dim(2), d = x.dim(3);
  auto p = num::permute(tape, x, {0, 2, 1, 3});
  return num::reshape(tape, p, Shape{n, t, h * d});
}

template <typename T>
QKV<T> qkv_project(Tape<T>& tape, const Tensor<T>& x, const ProjectionWeights<T>& weights, std::size_t heads) {
  if (x.rank() != 3) throw DimensionError("qkv_project expects [N, T, D], got " + shape_str(x.shape()));
  if (heads == 0 || x.dim(2) % heads != 0) {
    throw ConfigError("embedding dimension " + std::to_string(x.dim(2)) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  return QKV<T>{split_heads(tape, weights.query.forward(tape, x), heads),
                split_heads(tape, weights.key.forward(tape, x), heads),
                split_heads(tape, weights.value.forward(tape, x), heads)};
}

namespace {

template <typename T>
void check_qkv(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (q.rank() != 4 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention expects matching [N, H, T, d] Q/K/V, got " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
}

template <typename T>
AttentionOutput<T> apply_map(Tape<T>& tape, AttentionOutput<T> res, const Tensor<T>& v, const Linear<T>* out_proj) {
  res.context = merge_heads(tape, num::matmul(tape, res.applied_map, v));
  res.out = out_proj ? out_proj->forward(tape, res.context) : res.context;
  return res;
}

}  // namespace

template <typename T>
Tensor<T> attention_map(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, T temperature,
                        const Tensor<T>* log_temperature) {
  if (q.rank() != 4 || q.shape() != k.shape()) {
    throw DimensionError("attention_map expects matching [N, H, T, d] Q/K, got " + shape_str(q.shape()) +
                         " and " + shape_str(k.shape()));
  }
  const T root_d = std::sqrt(static_cast<T>(q.dim(3)));
  auto logits = num::matmul(tape, q, num::transpose(tape, k));
  if (log_temperature != nullptr) {
    auto scaled = num::div(tape, num::scale(tape, logits, T(1) / root_d), num::exp(tape, *log_temperature));
    return num::softmax(tape, scaled, 3, T(1));
  }
  if (!(temperature > T(0))) {
    throw ParameterError("temperature must be positive, got " + std::to_string(temperature));
  }
  return num::softmax(tape, logits, 3, temperature * root_d);
}

template <typename T>
AttentionOutput<T> mhsa(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, T temperature,
                        const Linear<T>* out_proj, const Tensor<T>* log_temperature) {
  check_qkv(q, k, v);
  AttentionOutput<T> res;
  res.map = attention_map(tape, q, k, temperature, log_temperature);
  res.applied_map = res.map;
  return apply_map(tape, std::move(res), v, out_proj);
}

template <typename T>
HeadNorm<T>::HeadNorm(NormMode mode, std::size_t heads, T epsilon) : mode_(mode), heads_(heads) {
  if (mode_ == NormMode::kIdentity) return;
  auto scale = Tensor<T>::full({heads, 1, 1}, T(1), true);
  auto shift = Tensor<T>::zeros({heads, 1, 1}, true);
  if (mode_ == NormMode::kBatch) {
    norm_ = num::Normalization<T>(num::NormKind::kBatch, {0, 2, 3}, scale, shift, epsilon);
    norm_.running_mean() = Tensor<T>::zeros({heads});
    norm_.running_var() = Tensor<T>::full({heads}, T(1));
  } else {
    norm_ = num::Normalization<T>(num::NormKind::kLayer, {2, 3}, scale, shift, epsilon);
  }
}

template <typename T>
Tensor<T> HeadNorm<T>::apply(Tape<T>& tape, const Tensor<T>& maps, bool training) {
  if (maps.rank() != 4 || maps.dim(1) != heads_) {
    throw DimensionError("head norm for " + std::to_string(heads_) + " heads got maps " + shape_str(maps.shape()));
  }
  if (mode_ == NormMode::kIdentity) return maps;
  return norm_.forward(tape, maps, training);
}

template <typename T>
Tensor<T> mix_heads(Tape<T>& tape, const Tensor<T>& maps, const Tensor<T>& theta) {
  if (maps.rank() != 4) throw DimensionError("mix_heads expects [N, H, T, T] maps, got " + shape_str(maps.shape()));
  const std::size_t n = maps.dim(0), h = maps.dim(1), t = maps.dim(2), t2 = maps.dim(3);
  if (theta.rank() != 2 || theta.dim(0) != h || theta.dim(1) != h) {
    throw ConfigError("theta " + shape_str(theta.shape()) + " does not match " + std::to_string(h) + " heads");
  }
  auto flat = num::reshape(tape, maps, Shape{n, h, t * t2});
  auto mixed = num::matmul(tape, num::transpose(tape, theta), flat);
  return num::reshape(tape, mixed, Shape{n, h, t, t2});
}

template <typename T>
AttentionOutput<T> re_attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                const Tensor<T>& theta, HeadNorm<T>& norm, bool training,
                                const Linear<T>* out_proj) {
  check_qkv(q, k, v);
  if (theta.rank() != 2 || theta.dim(0) != q.dim(1) || theta.dim(1) != q.dim(1)) {
    throw ConfigError("theta " + shape_str(theta.shape()) + " does not match " + std::to_string(q.dim(1)) +
                      " heads");
  }
  AttentionOutput<T> res;
  res.map = attention_map(tape, q, k, T(1));
  res.mixed_map = mix_heads(tape, res.map, theta);
  res.applied_map = norm.apply(tape, res.mixed_map, training);
  return apply_map(tape, std::move(res), v, out_proj);
}

template <typename T>
Tensor<T> sample_drop_mask(const Shape& shape, double rate, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("drop rate must lie in [0, 1), got " + std::to_string(rate));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<T> mask(num::shape_numel(shape));
  for (auto& m : mask) m = u(rng) < rate ? T(0) : T(1);
  return Tensor<T>(shape, std::move(mask));
}

template <typename T>
AttentionOutput<T> drop_attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                  T drop_rate, const Tensor<T>& mask, const Linear<T>* out_proj) {
  check_qkv(q, k, v);
  if (!(drop_rate >= T(0) && drop_rate < T(1))) {
    throw ParameterError("drop rate must lie in [0, 1), got " + std::to_string(drop_rate));
  }
  AttentionOutput<T> res;
  res.map = attention_map(tape, q, k, T(1));
  res.applied_map = mask.defined() ? num::dropout(tape, res.map, mask, drop_rate) : res.map;
  return apply_map(tape, std::move(res), v, out_proj);
}

template <typename T>
AttentionOutput<T> shared_attention_forward(Tape<T>& tape, const Tensor<T>& block_input, const Tensor<T>& shared_map,
                                            const Tensor<T>& theta, HeadNorm<T>& norm, const Linear<T>& value_proj,
                                            bool training, const Linear<T>* out_proj) {
  if (block_input.rank() != 3) {
    throw DimensionError("shared attention expects [N, T, D] input, got " + shape_str(block_input.shape()));
  }
  if (shared_map.rank() != 4 || shared_map.dim(0) != block_input.dim(0) || shared_map.dim(2) != block_input.dim(1) ||
      shared_map.dim(3) != block_input.dim(1)) {
    throw DimensionError("shared map " + shape_str(shared_map.shape()) + " does not match block input " +
                         shape_str(block_input.shape()));
  }
  const std::size_t heads = shared_map.dim(1);
  if (theta.rank() != 2 || theta.dim(0) != heads || theta.dim(1) != heads) {
    throw ConfigError("theta " + shape_str(theta.shape()) + " does not match " + std::to_string(heads) + " heads");
  }
  auto v = split_heads(tape, value_proj.forward(tape, block_input), heads);
  AttentionOutput<T> res;
  res.map = shared_map;
  res.mixed_map = mix_heads(tape, shared_map, theta);
  res.applied_map = norm.apply(tape, res.mixed_map, training);
  return apply_map(tape, std::move(res), v, out_proj);
}

template <typename T>
Tensor<T> init_theta(std::size_t heads, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 0.01);
  std::vector<T> values(heads * heads);
  for (std::size_t i = 0; i < heads; ++i) {
    for (std::size_t j = 0; j < heads; ++j) {
      values[i * heads + j] = static_cast<T>((i == j ? 1.0 : 0.0) + noise(rng));
    }
  }
  return Tensor<T>({heads, heads}, std::move(values), true);
}

#define REATTN_INSTANTIATE_ATTENTION(T)                                                                           \
  template struct Linear<T>;                                                                                      \
  template class HeadNorm<T>;                                                                                     \
  template Tensor<T> split_heads(Tape<T>&, const Tensor<T>&, std::size_t);                                        \
  template Tensor<T> merge_heads(Tape<T>&, const Tensor<T>&);                                                     \
  template QKV<T> qkv_project(Tape<T>&, const Tensor<T>&, const ProjectionWeights<T>&, std::size_t);              \
  template Tensor<T> attention_map(Tape<T>&, const Tensor<T>&, const Tensor<T>&, T, const Tensor<T>*);            \
  template AttentionOutput<T> mhsa(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T,             \
                                   const Linear<T>*, const Tensor<T>*);                                           \
  template Tensor<T> mix_heads(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                     \
  template AttentionOutput<T> re_attention(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                           const Tensor<T>&, HeadNorm<T>&, bool, const Linear<T>*);               \
  template Tensor<T> sample_drop_mask<T>(const Shape&, double, std::mt19937_64&);                                 \
  template AttentionOutput<T> drop_attention(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T,   \
                                             const Tensor<T>&, const Linear<T>*);                                 \
  template AttentionOutput<T> shared_attention_forward(Tape<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                                       const Tensor<T>&, HeadNorm<T>&, const Linear<T>&, bool,    \
                                                       const Linear<T>*);                                         \
  template Tensor<T> init_theta<T>(std::size_t, std::mt19937_64&);

REATTN_INSTANTIATE_ATTENTION(float)
REATTN_INSTANTIATE_ATTENTION(double)

}  // namespace reattn::attn
