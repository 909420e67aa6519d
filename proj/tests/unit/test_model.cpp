#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "model_oracle.hpp"
#include "oracles.hpp"
#include "reattn/error.hpp"
#include "reattn/model/model.hpp"
#include "reattn/numerics/gradcheck.hpp"
#include "reattn/numerics/ops.hpp"

using namespace reattn;
using namespace reattn::model;
using num::Shape;
using TD = num::Tensor<double>;
using attn::AttentionVariantConfig;

namespace {

ModelConfig tiny(std::size_t blocks, const AttentionVariantConfig& v = {}) {
  return ModelConfig::uniform("tiny", blocks, 8, 2, 16, 8, 4, 5, v);
}

template <typename T>
num::Tensor<T> random_images(std::mt19937_64& rng, const ModelConfig& c, std::size_t n) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<T> v(n * c.channels * c.image_size * c.image_size);
  for (auto& x : v) x = static_cast<T>(u(rng));
  return num::Tensor<T>({n, c.channels, c.image_size, c.image_size}, std::move(v));
}

// Replaces every parameter with larger random values so the oracle
// comparison exercises norms and biases.
void scramble(Model<double>& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.6, 0.6);
  for (auto& p : m.parameters())
    for (auto& x : p.tensor.mutable_data()) x = (p.name.find(".scale") != std::string::npos ? 1.0 : 0.0) + u(rng);
}

oracle::Params param_map(const Model<double>& m) {
  oracle::Params p;
  for (const auto& np : m.parameters()) p[np.name] = np.tensor.vec();
  return p;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("reattn_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("config invariants") {
  CHECK_NOTHROW(tiny(2).validate());
  auto c = tiny(2);
  c.image_size = 10;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny(2);
  c.num_heads = 3;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("divisible by num_heads"), ConfigError);
  c = tiny(2);
  c.block_variants.pop_back();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny(3);
  c.shared_from = 2;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("shared_from"), ConfigError);
  c = tiny(3);
  c.block_variants[1] = AttentionVariantConfig::shared();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny(4);
  apply_sharing(c, 1);
  CHECK_NOTHROW(c.validate());
  CHECK(c.block_variants[3].kind == AttentionKind::kShared);
  CHECK_THROWS_AS(Model<double>::build(tiny(2, AttentionVariantConfig::drop_attention(1.5)), 0), ConfigError);
}

TEST_CASE("split ratio notation") {
  CHECK(parse_split_ratio("11-5") == std::pair<std::size_t, std::size_t>{11, 5});
  CHECK_THROWS_AS(parse_split_ratio("11"), ConfigError);
  CHECK_THROWS_AS(parse_split_ratio("a-5"), ConfigError);
  auto v = split_variants(11, 5);
  REQUIRE(v.size() == 16);
  CHECK(v[10].kind == AttentionKind::kVanilla);
  CHECK(v[11].kind == AttentionKind::kReAttention);
}

TEST_CASE("config json round trip and unknown fields") {
  auto c = tiny(4, AttentionVariantConfig::linear_decay_temperature(1.0, 0.25));
  c.block_variants[0] = AttentionVariantConfig::drop_attention(0.2);
  c.block_variants[1] = AttentionVariantConfig::learnable_temperature(0.7);
  apply_sharing(c, 2, NormMode::kPerSample);
  CHECK(model_config_from_json(to_json(c)) == c);

  auto j = to_json(tiny(2));
  j["dropout"] = 0.1;
  CHECK_THROWS_WITH_AS(model_config_from_json(j), doctest::Contains("dropout"), ConfigError);

  auto split = to_json(tiny(4));
  split["block_variants"] = "1-3";
  auto parsed = model_config_from_json(split);
  CHECK(parsed.block_variants[0].kind == AttentionKind::kVanilla);
  CHECK(parsed.block_variants[3].kind == AttentionKind::kReAttention);
}

TEST_CASE("patch_embed token counts and linearity") {
  num::Tape<double> tape(false);
  auto big = ModelConfig::uniform("b", 0, 8, 2, 8, 224, 16, 3);
  CHECK(big.num_tokens() == 197);
  auto m = Model<double>::build(big, 1);
  std::mt19937_64 rng(1);
  auto tr = m.forward(tape, random_images<double>(rng, big, 1));
  CHECK(tr.logits.shape() == Shape{1, 3});
  CHECK(ModelConfig::uniform("c", 0, 8, 2, 8, 32, 8, 3).num_tokens() == 17);

  const std::size_t d = 8;
  attn::Linear<double> proj{TD({48, d}, oracle::random_vec(rng, 48 * d)), TD::zeros({d})};
  auto cls = TD({1, 1, d}, oracle::random_vec(rng, d));
  auto pos = TD::zeros({1, 5, d});
  auto tokens = patch_embed(tape, TD::zeros({2, 3, 8, 8}), 4, proj, cls, pos);
  CHECK(tokens.shape() == Shape{2, 5, d});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < d; ++c) {
      CHECK(tokens.at({n, 0, c}) == cls.at({0, 0, c}));
      for (std::size_t t = 1; t < 5; ++t) CHECK(tokens.at({n, t, c}) == 0.0);
    }
  CHECK_THROWS_AS(patch_embed(tape, TD::zeros({1, 3, 9, 9}), 4, proj, cls, pos), DimensionError);
  CHECK_THROWS_AS(m.forward(tape, TD::zeros({1, 3, 32, 32})), DimensionError);
}

TEST_CASE("parameter counts against published model sizes") {
  auto vit = [](std::size_t blocks, std::size_t d, std::size_t mlp) {
    return ModelConfig::uniform("vit", blocks, d, d == 256 ? 8 : (d == 512 ? 8 : 12), mlp, 224, 16, 1000);
  };
  auto within = [](std::size_t count, double millions) {
    return std::abs(static_cast<double>(count) / 1e6 - millions) / millions <= 0.02;
  };
  CHECK(within(count_params(vit(16, 384, 1152)), 24.46));
  CHECK(within(count_params(vit(24, 384, 1152)), 36.26));
  CHECK(within(count_params(vit(32, 384, 1152)), 48.09));
  CHECK(within(count_params(vit(12, 384, 1152)), 18.51));

  const auto stem = count_params(vit(0, 384, 1152));
  const std::size_t d = 384, t = 197;
  CHECK(stem == (3 * 16 * 16 + 1) * d + d + t * d + 2 * d + d * 1000 + 1000);

  auto blocks_only = [&](std::size_t dim) {
    auto c = vit(12, dim, 3 * dim);
    return static_cast<double>(count_params(c) - count_stem_params(c));
  };
  const double ratio = blocks_only(512) / blocks_only(256);
  CHECK(ratio >= 3.8);
  CHECK(ratio <= 4.2);
}

TEST_CASE("closed-form count equals the built parameter count for every variant") {
  std::vector<AttentionVariantConfig> variants{AttentionVariantConfig::vanilla(),
                                               AttentionVariantConfig::re_attention(NormMode::kBatch),
                                               AttentionVariantConfig::re_attention(NormMode::kIdentity),
                                               AttentionVariantConfig::learnable_temperature(0.5),
                                               AttentionVariantConfig::linear_decay_temperature(),
                                               AttentionVariantConfig::drop_attention(0.1)};
  for (const auto& v : variants) {
    auto c = tiny(3, v);
    CHECK(Model<double>::build(c, 0).num_parameters() == count_params(c));
  }
  auto shared = tiny(4, AttentionVariantConfig::re_attention());
  apply_sharing(shared, 1, NormMode::kPerSample);
  CHECK(Model<float>::build(shared, 0).num_parameters() == count_params(shared));

  const auto vanilla = count_params(tiny(3));
  auto one = tiny(3);
  one.block_variants[2] = AttentionVariantConfig::re_attention(NormMode::kBatch);
  CHECK(count_params(one) - vanilla == 2 * 2 + 2 * 2);
}

TEST_CASE("forward trace shapes and row-stochastic raw maps for every variant") {
  std::mt19937_64 rng(3);
  for (const auto& v : {AttentionVariantConfig::vanilla(), AttentionVariantConfig::re_attention(),
                        AttentionVariantConfig::fixed_temperature(0.5), AttentionVariantConfig::learnable_temperature(),
                        AttentionVariantConfig::linear_decay_temperature(), AttentionVariantConfig::drop_attention(0.3)}) {
    auto c = tiny(3, v);
    auto m = Model<double>::build(c, 9);
    for (bool training : {true, false}) {
      num::Tape<double> tape(false);
      auto tr = m.forward(tape, random_images<double>(rng, c, 3), {training, 4});
      REQUIRE(tr.block_maps.size() == 3);
      REQUIRE(tr.block_features.size() == 3);
      CHECK(tr.block_features[0].shape() == Shape{3, 5, 8});
      for (const auto& map : tr.block_maps) {
        CHECK(map.shape() == Shape{3, 2, 5, 5});
        for (std::size_t r = 0; r < map.numel() / 5; ++r) {
          double s = 0;
          for (std::size_t j = 0; j < 5; ++j) s += map.data()[r * 5 + j];
          CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("shared blocks reuse the anchor map by reference") {
  auto c = tiny(5, AttentionVariantConfig::re_attention());
  apply_sharing(c, 2);
  auto m = Model<double>::build(c, 2);
  std::mt19937_64 rng(4);
  num::Tape<double> tape(false);
  auto tr = m.forward(tape, random_images<double>(rng, c, 2), {true, 0});
  CHECK(tr.block_maps[3].same_node(tr.block_maps[2]));
  CHECK(tr.block_maps[4].same_node(tr.block_maps[2]));
  CHECK_FALSE(tr.block_maps[1].same_node(tr.block_maps[2]));
  CHECK_FALSE(m.blocks()[3].query.weight.defined());
}

TEST_CASE("tiny model logits match the hand-unrolled oracle") {
  std::mt19937_64 rng(5);
  for (const auto& v : {AttentionVariantConfig::vanilla(), AttentionVariantConfig::re_attention(NormMode::kIdentity)}) {
    auto c = tiny(2, v);
    auto m = Model<double>::build(c, 11);
    scramble(m, 12);
    auto images = random_images<double>(rng, c, 3);
    num::Tape<double> tape(false);
    auto tr = m.forward(tape, images);
    const oracle::TinyShape s{3, 8, 4, 8, 2, 16, 5, 2};
    const auto params = param_map(m);
    for (std::size_t n = 0; n < 3; ++n) {
      oracle::Vec img(images.data().begin() + n * 192, images.data().begin() + (n + 1) * 192);
      auto expect = oracle::forward(params, s, img);
      for (std::size_t k = 0; k < 5; ++k) CHECK(tr.logits.at({n, k}) == doctest::Approx(expect[k]).epsilon(1e-11));
    }
  }
}

TEST_CASE("identity theta with identity norm reproduces the vanilla model") {
  std::mt19937_64 rng(6);
  auto vc = ModelConfig::uniform("v", 4, 16, 4, 32, 16, 4, 10);
  auto rc = ModelConfig::uniform("r", 4, 16, 4, 32, 16, 4, 10, AttentionVariantConfig::re_attention(NormMode::kIdentity));
  auto vanilla = Model<float>::build(vc, 21);
  auto re = Model<float>::build(rc, 21);
  for (auto& b : re.blocks()) {
    auto th = b.theta.mutable_data();
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) th[i * 4 + j] = i == j ? 1.0f : 0.0f;
  }
  auto images = random_images<float>(rng, vc, 4);
  num::Tape<float> t1(false), t2(false);
  auto a = vanilla.forward(t1, images).logits;
  auto b = re.forward(t2, images).logits;
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) <= 1e-5f);
}

TEST_CASE("zero output projections make every block the identity") {
  auto c = tiny(3, AttentionVariantConfig::re_attention());
  auto m = Model<double>::build(c, 7);
  for (auto& b : m.blocks()) {
    for (auto* l : {&b.out, &b.fc2}) {
      for (auto& x : l->weight.mutable_data()) x = 0;
      for (auto& x : l->bias.mutable_data()) x = 0;
    }
  }
  std::mt19937_64 rng(7);
  auto images = random_images<double>(rng, c, 2);
  num::Tape<double> tape(false);
  auto tr = m.forward(tape, images, {true, 0});
  const auto params = m.parameters();
  auto find = [&](const std::string& n) {
    for (const auto& p : params)
      if (p.name == n) return p.tensor;
    throw std::runtime_error(n);
  };
  auto embedded = patch_embed(tape, images, 4, {find("patch_embed.weight"), find("patch_embed.bias")},
                              find("cls_token"), find("pos_embed"));
  for (const auto& f : tr.block_features) CHECK(f.vec() == embedded.vec());
}

TEST_CASE("eval forward is deterministic and does not touch running statistics") {
  auto c = tiny(2, AttentionVariantConfig::re_attention(NormMode::kBatch));
  auto m = Model<double>::build(c, 8);
  std::mt19937_64 rng(8);
  auto images = random_images<double>(rng, c, 2);
  const auto before = m.buffers()[0].tensor.vec();
  num::Tape<double> t1(false), t2(false);
  auto a = m.forward(t1, images).logits.vec();
  auto b = m.forward(t2, images).logits.vec();
  CHECK(a == b);
  CHECK(m.buffers()[0].tensor.vec() == before);
  num::Tape<double> t3(false);
  m.forward(t3, images, {true, 0});
  CHECK(m.buffers()[0].tensor.vec() != before);
}

TEST_CASE("non-finite activations name the failing block") {
  auto c = tiny(3);
  auto m = Model<double>::build(c, 9);
  m.blocks()[1].fc2.bias.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  std::mt19937_64 rng(9);
  num::Tape<double> tape(false);
  CHECK_THROWS_WITH_AS(m.forward(tape, random_images<double>(rng, c, 1)), doctest::Contains("block 1"),
                       NumericalError);
}

TEST_CASE("same seed builds identical models, different seeds differ") {
  auto c = tiny(2);
  auto a = Model<double>::build(c, 1).parameters();
  auto b = Model<double>::build(c, 1).parameters();
  auto d = Model<double>::build(c, 2).parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].tensor.vec() == b[i].tensor.vec());
  CHECK(a[0].tensor.vec() != d[0].tensor.vec());
  for (const auto& p : a) {
    if (p.name.ends_with(".weight")) {
      CHECK(p.decay);
      for (auto x : p.tensor.data()) CHECK(std::abs(x) <= 0.04 + 1e-12);
    } else {
      CHECK_FALSE(p.decay);
    }
  }
}

TEST_CASE("checkpoint round trip and manifest mismatch") {
  auto c = tiny(3, AttentionVariantConfig::re_attention(NormMode::kBatch));
  c.block_variants[0] = AttentionVariantConfig::learnable_temperature(0.8);
  auto m = Model<float>::build(c, 10);
  std::mt19937_64 rng(10);
  auto images = random_images<float>(rng, c, 2);
  {
    num::Tape<float> tape(false);
    m.forward(tape, images, {true, 0});  // move running stats off their init
  }
  const auto dir = temp_dir("ckpt");
  save_checkpoint(dir, m, {{"epoch", 3}});
  CHECK(read_checkpoint_config(dir) == c);

  auto back = load_checkpoint<float>(dir);
  num::Tape<float> t1(false), t2(false);
  CHECK(m.forward(t1, images).logits.vec() == back.forward(t2, images).logits.vec());
  auto wide = load_checkpoint<double>(dir);
  CHECK(wide.parameters()[0].tensor.data()[0] == static_cast<double>(m.parameters()[0].tensor.data()[0]));

  nlohmann::json manifest;
  {
    std::ifstream in(dir / "manifest.json");
    manifest = nlohmann::json::parse(in);
  }
  manifest["config"]["embed_dim"] = 16;
  {
    std::ofstream out(dir / "manifest.json");
    out << manifest.dump();
  }
  CHECK_THROWS_AS(load_checkpoint<float>(dir), ManifestError);
  CHECK_THROWS_AS(load_checkpoint<float>(temp_dir("missing")), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("model gradients match finite differences") {
  for (const auto& v : {AttentionVariantConfig::vanilla(), AttentionVariantConfig::re_attention(NormMode::kBatch),
                        AttentionVariantConfig::learnable_temperature(0.7)}) {
    auto c = ModelConfig::uniform("g", 2, 4, 2, 6, 4, 2, 3, v, 1);
    auto m = Model<double>::build(c, 13);
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    std::vector<num::NamedTensor> inputs;
    for (auto& p : m.parameters()) {
      for (auto& x : p.tensor.mutable_data()) x += u(rng);
      // softmax ignores the key bias, so its gradient is identically zero
      if (!p.name.ends_with("attn.key.bias")) inputs.push_back({p.name, p.tensor});
    }
    auto images = random_images<double>(rng, c, 3);
    const std::size_t labels[] = {0, 2, 1};
    auto report = num::grad_check(
        [&](num::Tape<double>& tape) {
          auto tr = m.forward(tape, images, {true, 0});
          return num::cross_entropy(tape, tr.logits, std::span<const std::size_t>(labels));
        },
        inputs);
    INFO(attn::to_string(v.kind), "\n", report.summary());
    CHECK(report.max_rel_error() < 1e-4);
  }
}
