#include "reattn/model/config.hpp"

#include <algorithm>

#include "reattn/error.hpp"

namespace reattn::model {

using nlohmann::json;

void ModelConfig::validate() const {
  auto fail = [&](const std::string& what) { throw ConfigError("model '" + name + "': " + what); };
  if (image_size == 0 || patch_size == 0) fail("image_size and patch_size must be positive");
  if (image_size % patch_size != 0) {
    fail("image_size " + std::to_string(image_size) + " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (channels == 0) fail("channels must be positive");
  if (num_classes == 0) fail("num_classes must be positive");
  if (embed_dim == 0 || num_heads == 0) fail("embed_dim and num_heads must be positive");
  if (embed_dim % num_heads != 0) {
    fail("embed_dim " + std::to_string(embed_dim) + " is not divisible by num_heads " + std::to_string(num_heads));
  }
  if (mlp_hidden == 0) fail("mlp_hidden must be positive");
  if (block_variants.size() != num_blocks) {
    fail("block_variants has " + std::to_string(block_variants.size()) + " entries for " +
         std::to_string(num_blocks) + " blocks");
  }
  if (shared_from && *shared_from + 1 >= num_blocks) {
    fail("shared_from " + std::to_string(*shared_from) + " must be < num_blocks - 1 = " +
         std::to_string(num_blocks == 0 ? 0 : num_blocks - 1));
  }
  for (std::size_t b = 0; b < num_blocks; ++b) {
    const auto& v = block_variants[b];
    try {
      v.validate();
    } catch (const ConfigError& e) {
      fail("block " + std::to_string(b) + ": " + e.what());
    }
    const bool after_anchor = shared_from && b > *shared_from;
    if (after_anchor && v.kind != AttentionKind::kShared) {
      fail("block " + std::to_string(b) + " follows shared_from but is " + attn::to_string(v.kind));
    }
    if (!after_anchor && v.kind == AttentionKind::kShared) {
      fail("block " + std::to_string(b) + " is shared but no earlier shared_from anchor is set");
    }
  }
}

ModelConfig ModelConfig::uniform(std::string name, std::size_t blocks, std::size_t embed_dim, std::size_t heads,
                                 std::size_t mlp_hidden, std::size_t image_size, std::size_t patch_size,
                                 std::size_t num_classes, const AttentionVariantConfig& variant,
                                 std::size_t channels) {
  ModelConfig c;
  c.name = std::move(name);
  c.num_blocks = blocks;
  c.embed_dim = embed_dim;
  c.num_heads = heads;
  c.mlp_hidden = mlp_hidden;
  c.image_size = image_size;
  c.patch_size = patch_size;
  c.num_classes = num_classes;
  c.channels = channels;
  c.block_variants.assign(blocks, variant);
  return c;
}

std::pair<std::size_t, std::size_t> parse_split_ratio(const std::string& text) {
  const auto dash = text.find('-');
  auto number = [&](const std::string& part) {
    if (part.empty() || !std::all_of(part.begin(), part.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      throw ConfigError("split ratio must look like '<vanilla>-<reattention>', got '" + text + "'");
    }
    return static_cast<std::size_t>(std::stoull(part));
  };
  if (dash == std::string::npos) number("");
  return {number(text.substr(0, dash)), number(text.substr(dash + 1))};
}

std::vector<AttentionVariantConfig> split_variants(std::size_t vanilla, std::size_t reattention, NormMode norm) {
  std::vector<AttentionVariantConfig> v(vanilla, AttentionVariantConfig::vanilla());
  v.insert(v.end(), reattention, AttentionVariantConfig::re_attention(norm));
  return v;
}

void apply_sharing(ModelConfig& config, std::size_t anchor, NormMode norm) {
  if (anchor + 1 >= config.num_blocks) {
    throw ConfigError("sharing anchor " + std::to_string(anchor) + " leaves no block to share with");
  }
  config.shared_from = anchor;
  for (std::size_t b = anchor + 1; b < config.num_blocks; ++b) {
    config.block_variants[b] = AttentionVariantConfig::shared(norm);
  }
}

std::size_t count_stem_params(const ModelConfig& c) {
  const std::size_t d = c.embed_dim;
  const std::size_t patch = c.patch_dim() * d + d;
  const std::size_t tokens = d + c.num_tokens() * d;  // class token, positions
  const std::size_t final_norm = 2 * d;
  const std::size_t head = d * c.num_classes + c.num_classes;
  return patch + tokens + final_norm + head;
}

std::size_t count_block_params(const ModelConfig& c, std::size_t block) {
  const std::size_t d = c.embed_dim, h = c.num_heads, m = c.mlp_hidden;
  const auto& v = c.block_variants.at(block);
  const std::size_t linear = d * d + d;
  std::size_t n = 2 * (2 * d);           // two layer norms
  n += d * m + m + m * d + d;            // MLP
  switch (v.kind) {
    case AttentionKind::kShared:
      n += 2 * linear;  // value, output
      break;
    default:
      n += 4 * linear;
  }
  if (v.kind == AttentionKind::kReAttention || v.kind == AttentionKind::kShared) {
    n += h * h;
    if (v.norm_mode && *v.norm_mode != NormMode::kIdentity) n += 2 * h;
  }
  if (v.temperature && v.temperature->mode == attn::TemperatureMode::kLearnable) n += 1;
  return n;
}

std::size_t count_params(const ModelConfig& config) {
  config.validate();
  std::size_t n = count_stem_params(config);
  for (std::size_t b = 0; b < config.num_blocks; ++b) n += count_block_params(config, b);
  return n;
}

void reject_unknown_keys(const json& j, const std::vector<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& item : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end()) {
      throw ConfigError(where + ": unknown field '" + item.key() + "'");
    }
  }
}

namespace {

template <typename V>
V field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <typename V>
V field_or(const json& j, const char* key, V fallback, const std::string& where) {
  return j.contains(key) ? field<V>(j, key, where) : fallback;
}

}  // namespace

json to_json(const AttentionVariantConfig& v) {
  json j{{"kind", attn::to_string(v.kind)}};
  if (v.temperature) {
    const auto& t = *v.temperature;
    json tj{{"mode", attn::to_string(t.mode)}};
    if (t.mode == attn::TemperatureMode::kLinearDecay) {
      tj["start"] = t.decay_start;
      tj["end"] = t.decay_end;
    } else {
      tj["value"] = t.value;
    }
    j["temperature"] = tj;
  }
  if (v.drop_rate) j["drop_rate"] = *v.drop_rate;
  if (v.norm_mode) j["norm"] = attn::to_string(*v.norm_mode);
  return j;
}

AttentionVariantConfig variant_from_json(const json& j) {
  const std::string where = "attention variant";
  if (j.is_string()) {
    // shorthand: kind name with defaults
    const auto kind = attn::parse_attention_kind(j.get<std::string>());
    switch (kind) {
      case AttentionKind::kVanilla: return AttentionVariantConfig::vanilla();
      case AttentionKind::kReAttention: return AttentionVariantConfig::re_attention();
      case AttentionKind::kTemperature: return AttentionVariantConfig::fixed_temperature(1.0);
      case AttentionKind::kDropAttention: return AttentionVariantConfig::drop_attention();
      case AttentionKind::kShared: return AttentionVariantConfig::shared();
    }
  }
  reject_unknown_keys(j, {"kind", "temperature", "drop_rate", "norm"}, where);
  AttentionVariantConfig v;
  v.kind = attn::parse_attention_kind(field<std::string>(j, "kind", where));
  if (j.contains("temperature")) {
    const auto& tj = j.at("temperature");
    reject_unknown_keys(tj, {"mode", "value", "start", "end"}, where + ".temperature");
    attn::TemperatureSetting t;
    t.mode = attn::parse_temperature_mode(field_or<std::string>(tj, "mode", "fixed", where));
    t.value = field_or<double>(tj, "value", 1.0, where);
    t.decay_start = field_or<double>(tj, "start", 1.0, where);
    t.decay_end = field_or<double>(tj, "end", 0.5, where);
    v.temperature = t;
  }
  if (j.contains("drop_rate")) v.drop_rate = field<double>(j, "drop_rate", where);
  if (j.contains("norm")) v.norm_mode = attn::parse_norm_mode(field<std::string>(j, "norm", where));
  if (v.kind == AttentionKind::kReAttention || v.kind == AttentionKind::kShared) {
    if (!v.norm_mode) v.norm_mode = NormMode::kBatch;
  }
  v.validate();
  return v;
}

json to_json(const ModelConfig& c) {
  json variants = json::array();
  for (const auto& v : c.block_variants) variants.push_back(to_json(v));
  json j{{"name", c.name},
         {"image_size", c.image_size},
         {"patch_size", c.patch_size},
         {"channels", c.channels},
         {"num_classes", c.num_classes},
         {"num_blocks", c.num_blocks},
         {"embed_dim", c.embed_dim},
         {"num_heads", c.num_heads},
         {"mlp_hidden", c.mlp_hidden},
         {"block_variants", variants}};
  if (c.shared_from) j["shared_from"] = *c.shared_from;
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  const std::string where = "model";
  reject_unknown_keys(j,
                      {"name", "image_size", "patch_size", "channels", "num_classes", "num_blocks", "embed_dim",
                       "num_heads", "mlp_hidden", "block_variants", "shared_from"},
                      where);
  ModelConfig c;
  c.name = field_or<std::string>(j, "name", c.name, where);
  c.image_size = field<std::size_t>(j, "image_size", where);
  c.patch_size = field<std::size_t>(j, "patch_size", where);
  c.channels = field_or<std::size_t>(j, "channels", 3, where);
  c.num_classes = field<std::size_t>(j, "num_classes", where);
  c.num_blocks = field<std::size_t>(j, "num_blocks", where);
  c.embed_dim = field<std::size_t>(j, "embed_dim", where);
  c.num_heads = field<std::size_t>(j, "num_heads", where);
  c.mlp_hidden = field<std::size_t>(j, "mlp_hidden", where);
  if (j.contains("block_variants")) {
    const auto& bv = j.at("block_variants");
    if (bv.is_array()) {
      for (const auto& v : bv) c.block_variants.push_back(variant_from_json(v));
    } else if (bv.is_string() && bv.get<std::string>().find('-') != std::string::npos) {
      const auto [vanilla, re] = parse_split_ratio(bv.get<std::string>());
      if (vanilla + re != c.num_blocks) {
        throw ConfigError(where + ": split ratio " + bv.get<std::string>() + " does not add up to " +
                          std::to_string(c.num_blocks) + " blocks");
      }
      c.block_variants = split_variants(vanilla, re);
    } else {
      c.block_variants.assign(c.num_blocks, variant_from_json(bv));
    }
  } else {
    c.block_variants.assign(c.num_blocks, AttentionVariantConfig::vanilla());
  }
  if (j.contains("shared_from")) {
    const auto anchor = field<std::size_t>(j, "shared_from", where);
    // a shorthand config may omit the shared kinds for trailing blocks
    const bool trailing_explicit =
        anchor + 1 < c.block_variants.size() && c.block_variants[anchor + 1].kind == AttentionKind::kShared;
    if (trailing_explicit || anchor + 1 >= c.num_blocks) {
      c.shared_from = anchor;
    } else {
      const auto norm = c.block_variants[anchor].norm_mode.value_or(NormMode::kBatch);
      apply_sharing(c, anchor, norm);
    }
  }
  c.validate();
  return c;
}

}  // namespace reattn::model
