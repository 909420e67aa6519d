#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "reattn/numerics/norm.hpp"
#include "reattn/numerics/tensor.hpp"

// Attention variants. All tensors are batched: token sequences are
// [N, T, D], per-head projections [N, H, T, d] with d = D / H, and attention
// maps [N, H, T, T] (head, output token, input token). Every map returned for
// diagnostics is the post-softmax map and is row-stochastic.
namespace reattn::attn {

using num::Tape;
using num::Tensor;

enum class AttentionKind { kVanilla, kReAttention, kTemperature, kDropAttention, kShared };
enum class TemperatureMode { kFixed, kLearnable, kLinearDecay };
// kBatch: statistics over (batch, T, T) per head, running stats for eval.
// kPerSample: statistics over (T, T) per sample and head.
enum class NormMode { kBatch, kPerSample, kIdentity };

std::string to_string(AttentionKind kind);
std::string to_string(TemperatureMode mode);
std::string to_string(NormMode mode);
AttentionKind parse_attention_kind(const std::string& text);
TemperatureMode parse_temperature_mode(const std::string& text);
NormMode parse_norm_mode(const std::string& text);

struct TemperatureSetting {
  TemperatureMode mode = TemperatureMode::kFixed;
  double value = 1.0;        // kFixed; initial value for kLearnable
  double decay_start = 1.0;  // kLinearDecay: tau at the first block
  double decay_end = 0.5;    // kLinearDecay: tau at the last block

  // tau for block `block` of `num_blocks` (learnable: the initial value).
  double at_block(std::size_t block, std::size_t num_blocks) const;
  bool operator==(const TemperatureSetting&) const = default;
};

struct AttentionVariantConfig {
  AttentionKind kind = AttentionKind::kVanilla;
  std::optional<TemperatureSetting> temperature;  // kind == kTemperature
  std::optional<double> drop_rate;                // kind == kDropAttention
  std::optional<NormMode> norm_mode;              // kind == kReAttention / kShared

  // Throws ConfigError when a field is missing for, or foreign to, the kind.
  void validate() const;
  bool operator==(const AttentionVariantConfig&) const = default;

  static AttentionVariantConfig vanilla();
  static AttentionVariantConfig re_attention(NormMode norm = NormMode::kBatch);
  static AttentionVariantConfig fixed_temperature(double tau);
  static AttentionVariantConfig learnable_temperature(double initial = 1.0);
  static AttentionVariantConfig linear_decay_temperature(double start = 1.0, double end = 0.5);
  static AttentionVariantConfig drop_attention(double rate = 0.1);
  static AttentionVariantConfig shared(NormMode norm = NormMode::kBatch);
};

// y = x W + b with W stored [in, out].
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;
  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const;
};

template <typename T>
struct ProjectionWeights {
  Linear<T> query;
  Linear<T> key;
  Linear<T> value;
};

template <typename T>
struct QKV {
  Tensor<T> q, k, v;
};

// [N, T, D] -> [N, H, T, D/H]
template <typename T>
Tensor<T> split_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads);
// [N, H, T, d] -> [N, T, H*d]
template <typename T>
Tensor<T> merge_heads(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
QKV<T> qkv_project(Tape<T>& tape, const Tensor<T>& x, const ProjectionWeights<T>& weights,
                   std::size_t heads);

// softmax(Q K^T / (tau sqrt(d))) over the input-token axis. When
// `log_temperature` is given, tau = exp(log_temperature) and is
// differentiable; `temperature` is ignored.
template <typename T>
Tensor<T> attention_map(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, T temperature,
                        const Tensor<T>* log_temperature = nullptr);

template <typename T>
struct AttentionOutput {
  Tensor<T> out;          // [N, T, D] after the output projection (if any)
  Tensor<T> context;      // [N, T, D] before the output projection
  Tensor<T> map;          // raw post-softmax map
  Tensor<T> mixed_map;    // head-mixed map before Norm (re-attention, shared)
  Tensor<T> applied_map;  // the map actually multiplied with V
};

template <typename T>
AttentionOutput<T> mhsa(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                        T temperature, const Linear<T>* out_proj,
                        const Tensor<T>* log_temperature = nullptr);

// Norm applied to head-mixed maps, one learnable scale/shift pair per head.
template <typename T>
class HeadNorm {
 public:
  HeadNorm() = default;
  HeadNorm(NormMode mode, std::size_t heads, T epsilon = T(1e-5));

  Tensor<T> apply(Tape<T>& tape, const Tensor<T>& maps, bool training);

  NormMode mode() const { return mode_; }
  std::size_t heads() const { return heads_; }
  bool has_affine() const { return mode_ != NormMode::kIdentity; }
  num::Normalization<T>& normalization() { return norm_; }
  const num::Normalization<T>& normalization() const { return norm_; }

 private:
  NormMode mode_ = NormMode::kIdentity;
  std::size_t heads_ = 0;
  num::Normalization<T> norm_;
};

// mixed[n, h', i, j] = sum_h theta[h, h'] * maps[n, h, i, j]
template <typename T>
Tensor<T> mix_heads(Tape<T>& tape, const Tensor<T>& maps, const Tensor<T>& theta);

template <typename T>
AttentionOutput<T> re_attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                const Tensor<T>& theta, HeadNorm<T>& norm, bool training,
                                const Linear<T>* out_proj);

// Bernoulli keep-mask (1 with probability 1 - rate).
template <typename T>
Tensor<T> sample_drop_mask(const num::Shape& shape, double rate, std::mt19937_64& rng);

// `mask` undefined means evaluation mode: no dropping.
template <typename T>
AttentionOutput<T> drop_attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                  T drop_rate, const Tensor<T>& mask, const Linear<T>* out_proj);

// Reuses `shared_map` (an earlier block's raw map); only V is projected from
// this block's input.
template <typename T>
AttentionOutput<T> shared_attention_forward(Tape<T>& tape, const Tensor<T>& block_input,
                                            const Tensor<T>& shared_map, const Tensor<T>& theta,
                                            HeadNorm<T>& norm, const Linear<T>& value_proj, bool training,
                                            const Linear<T>* out_proj);

// Identity plus N(0, 0.01^2) noise.
template <typename T>
Tensor<T> init_theta(std::size_t heads, std::mt19937_64& rng);

}  // namespace reattn::attn
