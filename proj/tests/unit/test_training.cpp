#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "reattn/error.hpp"
#include "reattn/numerics/gradcheck.hpp"
#include "reattn/numerics/ops.hpp"
#include "reattn/training/training.hpp"

using namespace reattn;
using namespace reattn::train;
using num::Shape;
using TD = num::Tensor<double>;
using model::ModelConfig;
using model::Model;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("reattn_train_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

ModelConfig tiny_config(std::size_t blocks = 2, std::size_t classes = 4) {
  return ModelConfig::uniform("tiny", blocks, 16, 2, 32, 8, 4, classes);
}

Dataset tiny_data(std::size_t n, std::uint64_t seed, std::size_t classes = 4) {
  SyntheticSpec s;
  s.num_samples = n;
  s.image_size = 8;
  s.num_classes = classes;
  s.seed = seed;
  return make_synthetic(s);
}

}  // namespace

TEST_CASE("cross entropy examples") {
  num::Tape<double> tape(false);
  const std::size_t labels[] = {0, 2, 4};
  auto uniform = train::cross_entropy(tape, TD::full({3, 5}, 0.7), labels);
  CHECK(uniform.item() == doctest::Approx(std::log(5.0)).epsilon(1e-14));

  std::vector<double> confident(15, 0.0);
  for (std::size_t i = 0; i < 3; ++i) confident[i * 5 + labels[i]] = 1e6;
  CHECK(train::cross_entropy(tape, TD({3, 5}, confident), labels).item() == doctest::Approx(0.0));

  std::mt19937_64 rng(1);
  auto logits = oracle::random_vec(rng, 6, -3, 3);
  const std::size_t two[] = {2, 0};
  double expect = 0;
  for (std::size_t r = 0; r < 2; ++r) {
    double z = 0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits[r * 3 + c]);
    expect -= std::log(std::exp(logits[r * 3 + two[r]]) / z) / 2;
  }
  CHECK(train::cross_entropy(tape, TD({2, 3}, logits), two).item() == doctest::Approx(expect).epsilon(1e-13));

  const std::size_t bad[] = {0, 3};
  CHECK_THROWS_AS(train::cross_entropy(tape, TD({2, 3}, logits), bad), DataError);
}

TEST_CASE("similarity-regularized loss examples") {
  std::mt19937_64 rng(2);
  num::Tape<double> tape(false);
  auto logits = TD({2, 3}, oracle::random_vec(rng, 6));
  const std::size_t labels[] = {1, 2};
  std::vector<TD> maps;
  for (int b = 0; b < 4; ++b) {
    auto m = oracle::random_map(rng, 2, 3);
    auto m2 = oracle::random_map(rng, 2, 3);
    m.insert(m.end(), m2.begin(), m2.end());
    maps.push_back(TD({2, 2, 3, 3}, m));
  }
  const double ce = train::cross_entropy(tape, logits, labels).item();
  CHECK(similarity_regularized_loss(tape, logits, labels, maps, 0.0, 2).item() == ce);

  std::vector<TD> same(4, maps[0]);
  const double reg = similarity_regularized_loss(tape, logits, labels, same, 0.3, 2).item() - ce;
  CHECK(reg == doctest::Approx(0.3 * 3).epsilon(1e-8));

  // tiny two-block case against hand cosines
  const std::vector<TD> pair{maps[0], maps[1]};
  double hand = 0;
  for (std::size_t n = 0; n < 2; ++n) {
    oracle::Vec a(maps[0].data().begin() + n * 18, maps[0].data().begin() + (n + 1) * 18);
    oracle::Vec b(maps[1].data().begin() + n * 18, maps[1].data().begin() + (n + 1) * 18);
    for (auto c : oracle::cross_layer(a, b, 2, 3)) hand += c / 12.0;
  }
  const double got = similarity_regularized_loss(tape, logits, labels, pair, 0.5, 0).item();
  CHECK(got == doctest::Approx(ce + 0.5 * hand).epsilon(1e-8));

  CHECK_THROWS_AS(similarity_regularized_loss(tape, logits, labels, pair, 0.5, 1), ParameterError);
}

TEST_CASE("regularized loss gradient matches finite differences on a tiny model") {
  auto c = ModelConfig::uniform("g", 3, 4, 2, 6, 4, 2, 3, attn::AttentionVariantConfig::re_attention(), 1);
  auto m = Model<double>::build(c, 3);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  std::vector<num::NamedTensor> inputs;
  for (auto& p : m.parameters()) {
    for (auto& x : p.tensor.mutable_data()) x += u(rng);
    if (!p.name.ends_with("attn.key.bias")) inputs.push_back({p.name, p.tensor});
  }
  SyntheticSpec spec{3, 4, 1, 3, 0.3, 4};
  auto data = make_synthetic(spec);
  const std::size_t idx[] = {0, 1, 2};
  auto images = data.images<double>(idx);
  auto labels = data.labels_of(idx);
  auto report = num::grad_check(
      [&](num::Tape<double>& tape) {
        auto tr = m.forward(tape, images, {true, 0});
        return similarity_regularized_loss(tape, tr.logits, std::span<const std::size_t>(labels), tr.block_maps, 0.7,
                                           1);
      },
      inputs);
  INFO(report.summary());
  CHECK(report.max_rel_error() < 1e-4);
}

TEST_CASE("adamw step examples") {
  AdamState s;
  std::vector<double> p{1.5, -2.0};
  std::vector<double> zero{0.0, 0.0};
  adamw_step<double>(p, zero, s, 0.1, 0.0);
  CHECK(p == std::vector<double>{1.5, -2.0});

  AdamState one;
  std::vector<double> q{0.0};
  const std::vector<double> g{1.0};
  adamw_step<double>(q, g, one, 1e-3, 0.0);
  CHECK(q[0] == doctest::Approx(-1e-3).epsilon(1e-7));

  AdamState decay;
  std::vector<double> r{2.0, -4.0};
  adamw_step<double>(r, zero, decay, 0.1, 0.5);
  CHECK(r[0] == doctest::Approx(2.0 * (1 - 0.05)).epsilon(1e-15));
  CHECK(r[1] == doctest::Approx(-4.0 * (1 - 0.05)).epsilon(1e-15));

  AdamState frozen;
  std::vector<double> f{3.0};
  adamw_step<double>(f, g, frozen, 0.0, 0.5);
  CHECK(f[0] == 3.0);

  std::vector<double> wrong{1.0, 2.0, 3.0};
  CHECK_THROWS_AS(adamw_step<double>(p, wrong, s, 0.1, 0.0), ContractError);
}

TEST_CASE("optimizer decays only linear weights") {
  auto m = Model<double>::build(tiny_config(), 4);
  const auto before = m.parameters();
  std::vector<std::vector<double>> values;
  for (const auto& p : before) {
    values.push_back(p.tensor.vec());
    p.tensor.zero_grad();
  }
  AdamW<double> opt(m.parameters());
  opt.step(0.1, 0.5);
  for (std::size_t i = 0; i < before.size(); ++i) {
    const double factor = before[i].decay ? 0.95 : 1.0;
    for (std::size_t k = 0; k < values[i].size(); ++k)
      CHECK(before[i].tensor.data()[k] == doctest::Approx(values[i][k] * factor).epsilon(1e-15));
  }
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.base_lr = 0.1;
  c.warmup_epochs = 2;
  c.total_epochs = 6;
  const std::size_t spe = 10;
  CHECK(lr_at(0, c, spe) == 0.0);
  CHECK(lr_at(10, c, spe) == doctest::Approx(0.05));
  CHECK(lr_at(20, c, spe) == doctest::Approx(0.1));
  CHECK(lr_at(40, c, spe) == doctest::Approx(0.05));
  CHECK(lr_at(60, c, spe) == doctest::Approx(0.0));
  for (std::size_t s = 21; s <= 60; ++s) CHECK(lr_at(s, c, spe) <= lr_at(s - 1, c, spe));
}

TEST_CASE("train config json, defaults and validation") {
  TrainConfig c;
  c.reg_blocks = 1;
  c.precision = Precision::kDouble;
  c.thresholds.block_threshold = 0.7;
  CHECK(train_config_from_json(to_json(c)) == c);
  auto j = to_json(c);
  j["momentum"] = 0.9;
  CHECK_THROWS_WITH_AS(train_config_from_json(j), doctest::Contains("momentum"), ConfigError);

  TrainConfig d;
  CHECK(d.base_lr == 5e-4);
  CHECK(d.warmup_epochs == 3);
  CHECK(d.lambda == 0.1);
  CHECK(d.resolved_reg_blocks(16) == 4);
  CHECK(d.resolved_reg_blocks(24) == 8);
  CHECK(d.resolved_reg_blocks(32) == 12);
  CHECK_THROWS_AS(d.validate(12), ConfigError);
  d.lambda = 0.0;
  CHECK_NOTHROW(d.validate(12));
  d.lambda = 0.1;
  d.reg_blocks = 3;
  CHECK_THROWS_AS(d.validate(4), ConfigError);
  CHECK_NOTHROW(d.validate(5));
  d.warmup_epochs = 10;
  CHECK_THROWS_AS(d.validate(5), ConfigError);
}

TEST_CASE("accuracy and evaluate") {
  const std::size_t labels[] = {2, 0, 1, 1};
  std::vector<double> perfect(12, 0.0);
  for (std::size_t i = 0; i < 4; ++i) perfect[i * 3 + labels[i]] = 1.0;
  CHECK(accuracy(TD({4, 3}, perfect), labels) == 1.0);
  CHECK(accuracy(TD::full({4, 3}, 0.2), labels) == 0.25);

  std::mt19937_64 rng(5);
  const std::size_t n = 20000, c = 5;
  std::vector<std::size_t> rl(n);
  for (auto& l : rl) l = rng() % c;
  const double acc = accuracy(TD({n, c}, oracle::random_vec(rng, n * c)), rl);
  const double sigma = std::sqrt(0.2 * 0.8 / n);
  CHECK(std::abs(acc - 0.2) <= 3 * sigma);

  auto m = Model<float>::build(tiny_config(), 5);
  auto data = tiny_data(10, 5);
  const double e = evaluate(m, data, 3);
  CHECK(e >= 0.0);
  CHECK(e <= 1.0);
}

TEST_CASE("cifar-10 binary records load bit-exactly") {
  const auto dir = temp_dir("cifar");
  std::filesystem::create_directories(dir);
  std::vector<unsigned char> bytes;
  for (int r = 0; r < 3; ++r) {
    bytes.push_back(static_cast<unsigned char>(7 - r));
    for (int i = 0; i < 3072; ++i) bytes.push_back(static_cast<unsigned char>((i * 7 + r) % 256));
  }
  {
    std::ofstream out(dir / "data_batch_1.bin", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  auto d = load_cifar10({dir / "data_batch_1.bin"});
  REQUIRE(d.size() == 3);
  CHECK(d.labels == std::vector<std::size_t>{7, 6, 5});
  // channel plane 1 (G), row 2, column 5 of record 1
  const std::size_t i = 1024 + 2 * 32 + 5;
  CHECK(d.pixels[3072 + i] == static_cast<float>((i * 7 + 1) % 256) / 255.0f);
  CHECK(load_cifar10({dir / "data_batch_1.bin"}, 2).size() == 2);

  {
    std::ofstream out(dir / "test_batch.bin", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), 100);
  }
  CHECK_THROWS_AS(load_cifar10_split(dir, false), DataError);
  CHECK_THROWS_AS(load_cifar10_split(dir, true), IoError);  // batches 2..5 missing
  bytes[0] = 12;
  {
    std::ofstream out(dir / "bad.bin", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(load_cifar10({dir / "bad.bin"}), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("synthetic data is seeded and places the patch in the class cell") {
  SyntheticSpec s{40, 16, 3, 4, 0.2, 9};
  auto a = make_synthetic(s);
  auto b = make_synthetic(s);
  CHECK(a.pixels == b.pixels);
  CHECK(a.labels == b.labels);
  for (std::size_t n = 0; n < a.size(); ++n) {
    const std::size_t c = a.labels[n];
    // the brightest pixels (== 1) all sit inside the class quadrant
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x)
        if (a.pixels[n * 768 + y * 16 + x] == 1.0f) {
          CHECK(y / 8 == c / 2);
          CHECK(x / 8 == c % 2);
        }
  }
  s.seed = 10;
  CHECK(make_synthetic(s).pixels != a.pixels);
}

TEST_CASE("zero epochs leave the model at its initialization") {
  auto m = Model<float>::build(tiny_config(), 6);
  const auto before = m.parameters()[3].tensor.vec();
  TrainConfig c;
  c.total_epochs = 0;
  c.lambda = 0;
  auto log = train::train(m, tiny_data(8, 1), tiny_data(4, 2), c);
  CHECK(log.epochs.empty());
  CHECK(log.initial_report.num_blocks == 2);
  CHECK(m.parameters()[3].tensor.vec() == before);
}

TEST_CASE("training is deterministic for a fixed seed") {
  TrainConfig c;
  c.total_epochs = 3;
  c.warmup_epochs = 1;
  c.batch_size = 8;
  c.lambda = 0.1;
  c.reg_blocks = 0;
  c.base_lr = 1e-3;
  c.checkpoint_every = 2;
  std::string logs[2];
  for (int run = 0; run < 2; ++run) {
    auto cfg = tiny_config(2);
    cfg.block_variants[1] = attn::AttentionVariantConfig::drop_attention(0.2);
    auto m = Model<float>::build(cfg, 7);
    const auto dir = temp_dir("det" + std::to_string(run));
    train::train(m, tiny_data(20, 3), tiny_data(8, 4), c, {dir, {}});
    logs[run] = read_file(dir / "log.jsonl");
    CHECK(std::filesystem::exists(dir / "checkpoints" / "epoch_002" / "manifest.json"));
    CHECK(std::filesystem::exists(dir / "checkpoints" / "final" / "params.bin"));
    CHECK(std::filesystem::exists(dir / "reports" / "epoch_003.csv"));
  }
  CHECK(!logs[0].empty());
  CHECK(logs[0] == logs[1]);
  auto first = nlohmann::json::parse(logs[0].substr(0, logs[0].find('\n')));
  for (const char* key : {"epoch", "lr", "train_loss", "train_acc", "eval_acc", "similar_block_count", "adj_ratios"})
    CHECK(first.contains(key));
  std::filesystem::remove_all(temp_dir("det0"));
  std::filesystem::remove_all(temp_dir("det1"));
}

TEST_CASE("a tiny model memorizes 32 fixed samples within 200 steps") {
  auto cfg = ModelConfig::uniform("overfit", 2, 32, 4, 64, 8, 4, 4);
  auto m = Model<float>::build(cfg, 8);
  // random labels: nothing to learn but the samples themselves
  auto data = tiny_data(32, 11);
  std::mt19937_64 rng(12);
  for (auto& l : data.labels) l = rng() % 4;
  TrainConfig c;
  c.total_epochs = 200;  // one full-batch step per epoch
  c.warmup_epochs = 5;
  c.batch_size = 32;
  c.base_lr = 3e-3;
  c.weight_decay = 0.0;
  c.lambda = 0;
  c.probe_size = 4;
  std::size_t first_perfect = 0;
  train::train(m, data, data.subset(0, 4), c, {std::nullopt, [&](const EpochRecord& r) {
                                          if (first_perfect == 0 && evaluate(m, data) == 1.0) first_perfect = r.epoch;
                                        }});
  INFO("first perfect step: ", first_perfect);
  CHECK(first_perfect > 0);
  CHECK(evaluate(m, data) == 1.0);
}

TEST_CASE("non-finite loss aborts with the last good checkpoint") {
  auto m = Model<float>::build(tiny_config(), 9);
  m.head().bias.mutable_data()[0] = std::numeric_limits<float>::infinity();
  TrainConfig c;
  c.total_epochs = 2;
  c.warmup_epochs = 0;
  c.lambda = 0;
  CHECK_THROWS_WITH_AS(train::train(m, tiny_data(8, 1), tiny_data(4, 2), c), doctest::Contains("last good checkpoint"),
                       NumericalError);
}

TEST_CASE("training rejects data that does not match the model") {
  auto m = Model<float>::build(tiny_config(2, 4), 10);
  TrainConfig c;
  c.lambda = 0;
  c.total_epochs = 1;
  c.warmup_epochs = 0;
  CHECK_THROWS_AS(train::train(m, tiny_data(8, 1, 9), tiny_data(4, 2, 9), c), DataError);
}
