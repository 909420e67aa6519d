#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "reattn/attention/attention.hpp"
#include "reattn/model/config.hpp"
#include "reattn/numerics/norm.hpp"
#include "reattn/numerics/tensor.hpp"

namespace reattn::model {

using num::Tape;
using num::Tensor;

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
  bool decay = false;  // weight decay applies (linear weights only)
};

template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct Block {
  AttentionVariantConfig variant;
  num::Normalization<T> norm1;
  num::Normalization<T> norm2;
  attn::Linear<T> query, key, value, out;  // query/key undefined in shared blocks
  Tensor<T> theta;                         // re-attention and shared blocks
  attn::HeadNorm<T> head_norm;
  Tensor<T> log_tau;  // learnable temperature
  T temperature = T(1);
  attn::Linear<T> fc1, fc2;
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t seed = 0;  // drop-attention masks
};

template <typename T>
struct ForwardTrace {
  Tensor<T> logits;                       // [N, num_classes]
  std::vector<Tensor<T>> block_features;  // B x [N, T, D]
  std::vector<Tensor<T>> block_maps;      // B x [N, H, T, T], raw
  std::vector<Tensor<T>> mixed_maps;      // head-mixed maps, undefined for blocks without mixing
};

// [N, C, S, S] images -> [N, T, D] tokens: flattened non-overlapping patches
// (channel-major within a patch) times `weight` [C p p, D] plus `bias`, class
// token [1, 1, D] prepended, positions [1, T, D] added.
template <typename T>
Tensor<T> patch_embed(Tape<T>& tape, const Tensor<T>& images, std::size_t patch_size, const attn::Linear<T>& proj,
                      const Tensor<T>& cls_token, const Tensor<T>& positions);

template <typename T>
class Model {
 public:
  Model() = default;
  // Validates the config; every parameter draws from its own generator seeded
  // from (seed, parameter name).
  static Model build(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  ForwardTrace<T> forward(Tape<T>& tape, const Tensor<T>& images, const ForwardOptions& options = {});

  std::vector<NamedParameter<T>> parameters() const;
  std::vector<NamedBuffer<T>> buffers() const;
  std::size_t num_parameters() const;

  std::vector<Block<T>>& blocks() { return blocks_; }
  const std::vector<Block<T>>& blocks() const { return blocks_; }
  attn::Linear<T>& head() { return head_; }

 private:
  ModelConfig config_;
  attn::Linear<T> patch_;
  Tensor<T> cls_;
  Tensor<T> pos_;
  std::vector<Block<T>> blocks_;
  num::Normalization<T> final_norm_;
  attn::Linear<T> head_;
};

// Directory with manifest.json (config, precision, parameter and buffer
// names) and params.bin (tensors in manifest order, tensor binary format).
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Model<T>& model,
                     const nlohmann::json& metadata = nlohmann::json::object());
// Tensors are converted to T when the stored precision differs.
template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& dir);
ModelConfig read_checkpoint_config(const std::filesystem::path& dir);

// Deterministic 64-bit seed from a base seed and a label.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& label);

}  // namespace reattn::model
