#include "reattn/model/model.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "reattn/error.hpp"
#include "reattn/numerics/ops.hpp"
#include "reattn/numerics/serialize.hpp"

namespace reattn::model {

using num::Shape;
using num::shape_str;

std::uint64_t derive_seed(std::uint64_t seed, const std::string& label) {
  // FNV-1a over the seed bytes then the label
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](unsigned char c) {
    h ^= c;
    h *= 1099511628211ull;
  };
  for (int i = 0; i < 8; ++i) mix(static_cast<unsigned char>(seed >> (8 * i)));
  for (char c : label) mix(static_cast<unsigned char>(c));
  return h;
}

namespace {

template <typename T>
Tensor<T> trunc_normal(const Shape& shape, std::uint64_t seed, const std::string& name, double stddev = 0.02) {
  std::mt19937_64 rng(derive_seed(seed, name));
  std::normal_distribution<double> g(0.0, stddev);
  std::vector<T> v(num::shape_numel(shape));
  for (auto& x : v) {
    double s;
    do s = g(rng);
    while (std::abs(s) > 2.0 * stddev);
    x = static_cast<T>(s);
  }
  return Tensor<T>(shape, std::move(v), true);
}

template <typename T>
attn::Linear<T> make_linear(std::size_t in, std::size_t out, std::uint64_t seed, const std::string& name) {
  return {trunc_normal<T>({in, out}, seed, name + ".weight"), Tensor<T>::zeros({out}, true)};
}

template <typename T>
num::Normalization<T> make_layer_norm(std::size_t d) {
  return num::Normalization<T>(num::NormKind::kLayer, {2}, Tensor<T>::full({d}, T(1), true),
                               Tensor<T>::zeros({d}, true));
}

template <typename T>
void add_linear(std::vector<NamedParameter<T>>& out, const std::string& name, const attn::Linear<T>& l) {
  if (!l.weight.defined()) return;
  out.push_back({name + ".weight", l.weight, true});
  out.push_back({name + ".bias", l.bias, false});
}

template <typename T>
void add_norm(std::vector<NamedParameter<T>>& out, const std::string& name, const num::Normalization<T>& n) {
  out.push_back({name + ".scale", n.scale(), false});
  out.push_back({name + ".shift", n.shift(), false});
}

std::string block_name(std::size_t b) { return "blocks." + std::to_string(b); }

}  // namespace

template <typename T>
Tensor<T> patch_embed(Tape<T>& tape, const Tensor<T>& images, std::size_t patch_size, const attn::Linear<T>& proj,
                      const Tensor<T>& cls_token, const Tensor<T>& positions) {
  if (images.rank() != 4 || images.dim(2) != images.dim(3) || patch_size == 0 || images.dim(2) % patch_size != 0) {
    throw DimensionError("patch_embed expects [N, C, S, S] images with S divisible by " + std::to_string(patch_size) +
                         ", got " + shape_str(images.shape()));
  }
  const std::size_t n = images.dim(0), c = images.dim(1), g = images.dim(2) / patch_size, p = patch_size;
  if (proj.weight.dim(0) != c * p * p) {
    throw DimensionError("patch projection expects " + std::to_string(proj.weight.dim(0)) + " inputs per patch, " +
                         "images give " + std::to_string(c * p * p));
  }
  const std::size_t d = proj.weight.dim(1);
  if (positions.shape() != Shape{1, g * g + 1, d}) {
    throw DimensionError("positional embedding " + shape_str(positions.shape()) + " does not match " +
                         std::to_string(g * g + 1) + " tokens");
  }
  auto grid = num::reshape(tape, images, Shape{n, c, g, p, g, p});
  auto patches = num::permute(tape, grid, {0, 2, 4, 1, 3, 5});
  auto flat = num::reshape(tape, patches, Shape{n, g * g, c * p * p});
  auto tokens = proj.forward(tape, flat);
  auto cls = num::broadcast_to(tape, cls_token, Shape{n, 1, d});
  auto seq = num::concat(tape, std::vector<Tensor<T>>{cls, tokens}, 1);
  return num::add(tape, seq, positions);
}

template <typename T>
Model<T> Model<T>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  const std::size_t d = config.embed_dim, h = config.num_heads;
  m.patch_ = make_linear<T>(config.patch_dim(), d, seed, "patch_embed");
  m.cls_ = trunc_normal<T>({1, 1, d}, seed, "cls_token");
  m.pos_ = trunc_normal<T>({1, config.num_tokens(), d}, seed, "pos_embed");
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    const auto name = block_name(b);
    const auto& variant = config.block_variants[b];
    Block<T> blk;
    blk.variant = variant;
    blk.norm1 = make_layer_norm<T>(d);
    blk.norm2 = make_layer_norm<T>(d);
    if (variant.kind != AttentionKind::kShared) {
      blk.query = make_linear<T>(d, d, seed, name + ".attn.query");
      blk.key = make_linear<T>(d, d, seed, name + ".attn.key");
    }
    blk.value = make_linear<T>(d, d, seed, name + ".attn.value");
    blk.out = make_linear<T>(d, d, seed, name + ".attn.out");
    if (variant.norm_mode) {
      std::mt19937_64 rng(derive_seed(seed, name + ".attn.theta"));
      blk.theta = attn::init_theta<T>(h, rng);
      blk.head_norm = attn::HeadNorm<T>(*variant.norm_mode, h);
    }
    if (variant.temperature) {
      const double tau = variant.temperature->at_block(b, config.num_blocks);
      blk.temperature = static_cast<T>(tau);
      if (variant.temperature->mode == attn::TemperatureMode::kLearnable) {
        blk.log_tau = Tensor<T>({1}, {static_cast<T>(std::log(tau))}, true);
      }
    }
    blk.fc1 = make_linear<T>(d, config.mlp_hidden, seed, name + ".mlp.fc1");
    blk.fc2 = make_linear<T>(config.mlp_hidden, d, seed, name + ".mlp.fc2");
    m.blocks_.push_back(std::move(blk));
  }
  m.final_norm_ = make_layer_norm<T>(d);
  m.head_ = make_linear<T>(d, config.num_classes, seed, "head");
  return m;
}

template <typename T>
ForwardTrace<T> Model<T>::forward(Tape<T>& tape, const Tensor<T>& images, const ForwardOptions& options) {
  const auto& c = config_;
  if (images.rank() != 4 || images.dim(0) == 0 || images.dim(1) != c.channels || images.dim(2) != c.image_size ||
      images.dim(3) != c.image_size) {
    throw DimensionError("model '" + c.name + "' expects [N, " + std::to_string(c.channels) + ", " +
                         std::to_string(c.image_size) + ", " + std::to_string(c.image_size) + "] images, got " +
                         shape_str(images.shape()));
  }
  const std::size_t n = images.dim(0), t = c.num_tokens(), h = c.num_heads;
  ForwardTrace<T> trace;
  auto x = patch_embed(tape, images, c.patch_size, patch_, cls_, pos_);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    auto& blk = blocks_[b];
    auto y = blk.norm1.forward(tape, x, options.training);
    attn::AttentionOutput<T> a;
    switch (blk.variant.kind) {
      case AttentionKind::kVanilla:
      case AttentionKind::kTemperature: {
        auto qkv = attn::qkv_project(tape, y, {blk.query, blk.key, blk.value}, h);
        a = attn::mhsa(tape, qkv.q, qkv.k, qkv.v, blk.temperature, &blk.out,
                       blk.log_tau.defined() ? &blk.log_tau : nullptr);
        break;
      }
      case AttentionKind::kReAttention: {
        auto qkv = attn::qkv_project(tape, y, {blk.query, blk.key, blk.value}, h);
        a = attn::re_attention(tape, qkv.q, qkv.k, qkv.v, blk.theta, blk.head_norm, options.training, &blk.out);
        break;
      }
      case AttentionKind::kDropAttention: {
        auto qkv = attn::qkv_project(tape, y, {blk.query, blk.key, blk.value}, h);
        Tensor<T> mask;
        if (options.training) {
          std::mt19937_64 rng(derive_seed(options.seed, block_name(b) + ".drop"));
          mask = attn::sample_drop_mask<T>(Shape{n, h, t, t}, *blk.variant.drop_rate, rng);
        }
        a = attn::drop_attention(tape, qkv.q, qkv.k, qkv.v, static_cast<T>(*blk.variant.drop_rate), mask, &blk.out);
        break;
      }
      case AttentionKind::kShared: {
        const auto& anchor = trace.block_maps.at(*c.shared_from);
        a = attn::shared_attention_forward(tape, y, anchor, blk.theta, blk.head_norm, blk.value, options.training,
                                           &blk.out);
        break;
      }
    }
    x = num::add(tape, x, a.out);
    auto hidden = num::gelu(tape, blk.fc1.forward(tape, blk.norm2.forward(tape, x, options.training)));
    x = num::add(tape, x, blk.fc2.forward(tape, hidden));
    num::check_finite(x, "block " + std::to_string(b) + " output");
    trace.block_features.push_back(x);
    trace.block_maps.push_back(a.map);
    trace.mixed_maps.push_back(a.mixed_map);
  }
  auto normed = final_norm_.forward(tape, x, options.training);
  auto cls = num::reshape(tape, num::slice(tape, normed, 1, 0, 1), Shape{n, c.embed_dim});
  trace.logits = head_.forward(tape, cls);
  num::check_finite(trace.logits, "logits");
  return trace;
}

template <typename T>
std::vector<NamedParameter<T>> Model<T>::parameters() const {
  std::vector<NamedParameter<T>> out;
  add_linear(out, "patch_embed", patch_);
  out.push_back({"cls_token", cls_, false});
  out.push_back({"pos_embed", pos_, false});
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const auto& blk = blocks_[b];
    const auto name = block_name(b);
    add_norm(out, name + ".norm1", blk.norm1);
    add_linear(out, name + ".attn.query", blk.query);
    add_linear(out, name + ".attn.key", blk.key);
    add_linear(out, name + ".attn.value", blk.value);
    add_linear(out, name + ".attn.out", blk.out);
    if (blk.theta.defined()) out.push_back({name + ".attn.theta", blk.theta, false});
    if (blk.head_norm.has_affine()) add_norm(out, name + ".attn.head_norm", blk.head_norm.normalization());
    if (blk.log_tau.defined()) out.push_back({name + ".attn.log_tau", blk.log_tau, false});
    add_norm(out, name + ".norm2", blk.norm2);
    add_linear(out, name + ".mlp.fc1", blk.fc1);
    add_linear(out, name + ".mlp.fc2", blk.fc2);
  }
  add_norm(out, "final_norm", final_norm_);
  add_linear(out, "head", head_);
  return out;
}

template <typename T>
std::vector<NamedBuffer<T>> Model<T>::buffers() const {
  std::vector<NamedBuffer<T>> out;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const auto& norm = blocks_[b].head_norm;
    if (norm.mode() != NormMode::kBatch) continue;
    const auto name = block_name(b) + ".attn.head_norm";
    out.push_back({name + ".running_mean", norm.normalization().running_mean()});
    out.push_back({name + ".running_var", norm.normalization().running_var()});
  }
  return out;
}

template <typename T>
std::size_t Model<T>::num_parameters() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

ModelConfig read_checkpoint_config(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint manifest " + path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(path.string() + ": " + e.what());
  }
  if (!manifest.contains("config")) throw ManifestError(path.string() + ": no model config");
  try {
    return model_config_from_json(manifest.at("config"));
  } catch (const ConfigError& e) {
    throw ManifestError(path.string() + ": " + e.what());
  }
}

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Model<T>& model, const nlohmann::json& metadata) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  nlohmann::json names = nlohmann::json::array(), buffer_names = nlohmann::json::array();
  std::ofstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw IoError("cannot write " + (dir / "params.bin").string());
  for (const auto& p : model.parameters()) {
    names.push_back(p.name);
    num::write_tensor(bin, p.tensor);
  }
  for (const auto& b : model.buffers()) {
    buffer_names.push_back(b.name);
    num::write_tensor(bin, b.tensor);
  }
  bin.close();
  if (!bin) throw IoError("failed writing " + (dir / "params.bin").string());
  nlohmann::json manifest{{"format", "reattn-checkpoint"},
                          {"version", 1},
                          {"precision", num::precision_of<T>() == num::Precision::kSingle ? "single" : "double"},
                          {"config", to_json(model.config())},
                          {"parameters", names},
                          {"buffers", buffer_names},
                          {"metadata", metadata}};
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + (dir / "manifest.json").string());
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& dir) {
  const auto config = read_checkpoint_config(dir);
  std::ifstream in(dir / "manifest.json");
  const auto manifest = nlohmann::json::parse(in);
  auto model = Model<T>::build(config, 0);
  const auto params = model.parameters();
  const auto buffers = model.buffers();
  const auto stored = manifest.value("parameters", nlohmann::json::array());
  const auto stored_buffers = manifest.value("buffers", nlohmann::json::array());
  if (stored.size() != params.size() || stored_buffers.size() != buffers.size()) {
    throw ManifestError("checkpoint " + dir.string() + " lists " + std::to_string(stored.size()) + " parameters and " +
                        std::to_string(stored_buffers.size()) + " buffers; its config needs " +
                        std::to_string(params.size()) + " and " + std::to_string(buffers.size()));
  }
  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw IoError("cannot open " + (dir / "params.bin").string());
  auto restore = [&](const std::string& expected, const std::string& found, const Tensor<T>& target) {
    if (expected != found) {
      throw ManifestError("checkpoint " + dir.string() + ": expected tensor '" + expected + "', manifest has '" +
                          found + "'");
    }
    auto value = num::read_tensor<T>(bin);
    if (value.shape() != target.shape()) {
      throw ManifestError("checkpoint tensor '" + expected + "' has shape " + shape_str(value.shape()) +
                          ", config needs " + shape_str(target.shape()));
    }
    std::copy(value.data().begin(), value.data().end(), target.mutable_data().begin());
  };
  for (std::size_t i = 0; i < params.size(); ++i) restore(params[i].name, stored[i].get<std::string>(), params[i].tensor);
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    restore(buffers[i].name, stored_buffers[i].get<std::string>(), buffers[i].tensor);
  }
  return model;
}

#define REATTN_INSTANTIATE_MODEL(T)                                                                               \
  template class Model<T>;                                                                                        \
  template Tensor<T> patch_embed(Tape<T>&, const Tensor<T>&, std::size_t, const attn::Linear<T>&,               \
                                 const Tensor<T>&, const Tensor<T>&);                                            \
  template void save_checkpoint(const std::filesystem::path&, const Model<T>&, const nlohmann::json&);            \
  template Model<T> load_checkpoint<T>(const std::filesystem::path&);

REATTN_INSTANTIATE_MODEL(float)
REATTN_INSTANTIATE_MODEL(double)

}  // namespace reattn::model
