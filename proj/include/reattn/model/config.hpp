#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "reattn/attention/attention.hpp"

namespace reattn::model {

using attn::AttentionKind;
using attn::AttentionVariantConfig;
using attn::NormMode;

struct ModelConfig {
  std::string name = "vit";
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t num_classes = 10;
  std::size_t num_blocks = 0;
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t mlp_hidden = 128;
  std::vector<AttentionVariantConfig> block_variants;
  // Blocks after this index reuse its raw attention map.
  std::optional<std::size_t> shared_from;

  // Throws ConfigError naming the first violated invariant.
  void validate() const;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t num_tokens() const { return num_patches() + 1; }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }

  bool operator==(const ModelConfig&) const = default;

  // Every block uses `variant`.
  static ModelConfig uniform(std::string name, std::size_t blocks, std::size_t embed_dim, std::size_t heads,
                             std::size_t mlp_hidden, std::size_t image_size, std::size_t patch_size,
                             std::size_t num_classes, const AttentionVariantConfig& variant = {},
                             std::size_t channels = 3);
};

// "11-5" -> {11, 5}
std::pair<std::size_t, std::size_t> parse_split_ratio(const std::string& text);

// First `vanilla` blocks vanilla, trailing `reattention` blocks re-attention.
std::vector<AttentionVariantConfig> split_variants(std::size_t vanilla, std::size_t reattention,
                                                   NormMode norm = NormMode::kBatch);

// Marks block `anchor` as the shared map source; all later blocks become
// shared blocks.
void apply_sharing(ModelConfig& config, std::size_t anchor, NormMode norm = NormMode::kBatch);

std::size_t count_params(const ModelConfig& config);
std::size_t count_block_params(const ModelConfig& config, std::size_t block);
std::size_t count_stem_params(const ModelConfig& config);

nlohmann::json to_json(const AttentionVariantConfig& variant);
AttentionVariantConfig variant_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelConfig& config);
// Unknown keys are ConfigErrors. `block_variants` may be a list of B
// variants, a single variant object applied to every block, or a split
// ratio string "<vanilla>-<reattention>".
ModelConfig model_config_from_json(const nlohmann::json& j);

// Checks that every key of `j` is in `allowed`; `where` prefixes the error.
void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& allowed, const std::string& where);

}  // namespace reattn::model
