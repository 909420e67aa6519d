#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "reattn/cli/experiment.hpp"
#include "reattn/cli/gradient_suite.hpp"
#include "reattn/error.hpp"
#include "reattn/model/model.hpp"
#include "reattn/numerics/serialize.hpp"

using namespace reattn;
using namespace reattn::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("reattn_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

json base_spec(const fs::path& outputs) {
  return {{"name", "tiny"},
          {"model",
           {{"name", "tiny"},
            {"image_size", 8},
            {"patch_size", 4},
            {"channels", 3},
            {"num_classes", 4},
            {"num_blocks", 2},
            {"embed_dim", 16},
            {"num_heads", 2},
            {"mlp_hidden", 32}}},
          {"train",
           {{"total_epochs", 1},
            {"warmup_epochs", 0},
            {"batch_size", 8},
            {"lambda", 0.0},
            {"seed", 3},
            {"probe_size", 8}}},
          {"dataset", {{"synthetic", {{"train_samples", 16}, {"eval_samples", 8}, {"image_size", 8}}}}},
          {"outputs", outputs.string()}};
}

// Tree of relative path -> contents.
std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  return files;
}

}  // namespace

TEST_CASE("experiment spec round trip and unknown fields") {
  auto j = base_spec("out");
  j["ablation"] = {{"axis", "variant"}, {"values", {"vanilla", "1-1", {{"kind", "temperature"}, {"temperature", {{"mode", "fixed"}, {"value", 0.5}}}}}}};
  const auto spec = experiment_spec_from_json(j);
  CHECK(experiment_spec_from_json(to_json(spec)) == spec);
  CHECK(to_json(experiment_spec_from_json(to_json(spec))) == to_json(spec));

  auto typo = j;
  typo["train"]["learning_rate"] = 0.1;
  CHECK_THROWS_WITH_AS(experiment_spec_from_json(typo), doctest::Contains("learning_rate"), ConfigError);
  auto top = j;
  top["comment"] = "x";
  CHECK_THROWS_WITH_AS(experiment_spec_from_json(top), doctest::Contains("comment"), ConfigError);
  auto axis = j;
  axis["ablation"]["axis"] = "width";
  CHECK_THROWS_AS(experiment_spec_from_json(axis), ConfigError);
  auto both = j;
  both["dataset"]["cifar10"] = {{"path", "x"}};
  CHECK_THROWS_AS(experiment_spec_from_json(both), ConfigError);
  auto mismatch = j;
  mismatch["model"]["num_classes"] = 10;
  CHECK_THROWS_WITH_AS(experiment_spec_from_json(mismatch), doctest::Contains("classes"), ConfigError);
}

TEST_CASE("malformed spec reports line and column") {
  const auto dir = fresh_dir("parse");
  std::ofstream(dir / "bad.json") << "{\n  \"name\": \"x\",\n  \"model\": [1, 2,,]\n}\n";
  CHECK_THROWS_WITH_AS(load_experiment_spec(dir / "bad.json"), doctest::Contains("bad.json:3:"), ParseError);
  CHECK_THROWS_AS(load_experiment_spec(dir / "missing.json"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("sweep expansion assigns seed plus index") {
  auto j = base_spec("out");
  j["ablation"] = {{"axis", "lambda"}, {"values", {0.0, 0.5}}};
  j["model"]["num_blocks"] = 3;
  j["train"]["reg_blocks"] = 1;
  auto plans = expand_runs(experiment_spec_from_json(j));
  REQUIRE(plans.size() == 2);
  CHECK(plans[0].train.seed == 3);
  CHECK(plans[1].train.seed == 4);
  CHECK(plans[1].train.lambda == 0.5);
  CHECK(plans[1].directory == fs::path("out") / "tiny" / "lambda_0.5");

  j["ablation"] = {{"axis", "embed_dim"}, {"values", {8, 32}}};
  plans = expand_runs(experiment_spec_from_json(j));
  CHECK(plans[1].model.embed_dim == 32);
  CHECK(plans[1].model.mlp_hidden == 64);

  j["ablation"] = {{"axis", "shared_from"}, {"values", {1}}};
  plans = expand_runs(experiment_spec_from_json(j));
  CHECK(plans[0].model.shared_from == 1);
  CHECK(plans[0].model.block_variants[2].kind == attn::AttentionKind::kShared);

  j["ablation"] = {{"axis", "variant"}, {"values", {"2-1"}}};
  plans = expand_runs(experiment_spec_from_json(j));
  CHECK(plans[0].model.block_variants[0].kind == attn::AttentionKind::kVanilla);
  CHECK(plans[0].model.block_variants[2].kind == attn::AttentionKind::kReAttention);

  j["ablation"] = {{"axis", "variant"}, {"values", {"3-1"}}};
  CHECK_THROWS_AS(experiment_spec_from_json(j), ConfigError);
  j["ablation"] = {{"axis", "depth"}, {"values", {2, "four"}}};
  CHECK_THROWS_AS(experiment_spec_from_json(j), ConfigError);
}

TEST_CASE("zero-epoch spec emits the initialization report only") {
  const auto dir = fresh_dir("zero");
  auto j = base_spec(dir);
  j["train"]["total_epochs"] = 0;
  run_experiment(experiment_spec_from_json(j));
  const auto run = dir / "tiny";
  CHECK(fs::exists(run / "reports" / "initial.json"));
  CHECK(fs::exists(run / "reports" / "initial.csv"));
  CHECK(slurp(run / "log.jsonl").empty());
  CHECK(!fs::exists(run / "reports" / "epoch_001.json"));
  fs::remove_all(dir);
}

TEST_CASE("depth sweep fans out into complete run directories, reruns are identical") {
  const auto dir = fresh_dir("depth");
  auto j = base_spec(dir);
  j["train"]["total_epochs"] = 2;
  j["ablation"] = {{"axis", "depth"}, {"values", {2, 4, 6}}};
  const auto spec = experiment_spec_from_json(j);
  const auto summaries = run_experiment(spec, 2);
  REQUIRE(summaries.size() == 3);
  std::map<std::string, std::string> logs;
  for (const char* name : {"depth_2", "depth_4", "depth_6"}) {
    const auto run = dir / "tiny" / name;
    std::istringstream lines(slurp(run / "log.jsonl"));
    std::string line;
    std::size_t n = 0;
    while (std::getline(lines, line)) ++n;
    CHECK(n == 2);
    CHECK(fs::exists(run / "checkpoints" / "final" / "manifest.json"));
    CHECK(fs::exists(run / "reports" / "epoch_002.json"));
    CHECK(fs::exists(run / "run.json"));
    logs[name] = slurp(run / "log.jsonl");
  }
  CHECK(fs::exists(dir / "tiny" / "summary.json"));
  CHECK(model::read_checkpoint_config(dir / "tiny" / "depth_6" / "checkpoints" / "final").num_blocks == 6);

  run_experiment(spec, 1);
  for (const auto& [name, log] : logs) CHECK(slurp(dir / "tiny" / name / "log.jsonl") == log);
  fs::remove_all(dir);
}

TEST_CASE("analyze reports on a checkpoint without touching it") {
  const auto dir = fresh_dir("analyze");
  auto config = model::ModelConfig::uniform("deep", 6, 16, 2, 32, 8, 4, 4);
  auto m = model::Model<float>::build(config, 5);
  model::save_checkpoint(dir / "ckpt", m, {});
  train::SyntheticSpec s{12, 8, 3, 4, 0.3, 2};
  const auto probe = train::make_synthetic(s);
  const auto before = snapshot(dir / "ckpt");

  AnalyzeOptions o;
  o.export_maps = true;
  o.output = dir / "a1";
  const auto r1 = analyze_checkpoint(dir / "ckpt", probe, o);
  CHECK(r1.num_blocks == 6);
  CHECK(r1.adjacent_ratios.size() == 5);
  CHECK(r1.cross_head_ratios.size() == 6);
  CHECK(r1.feature_similarities.size() == 6);
  CHECK(fs::exists(o.output / "report.json"));
  CHECK(fs::exists(o.output / "report.csv"));
  const auto map = num::load_tensor<float>(o.output / "maps" / "block05_attn.ratn");
  CHECK(map.shape() == num::Shape{12, 2, 5, 5});

  o.output = dir / "a2";
  analyze_checkpoint(dir / "ckpt", probe, o);
  CHECK(slurp(dir / "a1" / "report.csv") == slurp(dir / "a2" / "report.csv"));
  CHECK(slurp(dir / "a1" / "maps" / "block03_attn.ratn") == slurp(dir / "a2" / "maps" / "block03_attn.ratn"));
  CHECK(snapshot(dir / "ckpt") == before);

  train::SyntheticSpec wrong{4, 8, 3, 5, 0.3, 2};
  CHECK_THROWS_AS(analyze_checkpoint(dir / "ckpt", train::make_synthetic(wrong), o), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("analyze of a model sharing every map counts B-1 similar blocks") {
  const auto dir = fresh_dir("shared");
  auto config = model::ModelConfig::uniform("shared", 5, 16, 2, 32, 8, 4, 4);
  model::apply_sharing(config, 0);
  auto m = model::Model<double>::build(config, 6);
  model::save_checkpoint(dir / "ckpt", m, {});
  train::SyntheticSpec s{6, 8, 3, 4, 0.3, 3};
  AnalyzeOptions o;
  o.output = dir / "out";
  const auto r = analyze_checkpoint(dir / "ckpt", train::make_synthetic(s), o);
  CHECK(r.similar_block_count == 4);
  fs::remove_all(dir);
}

TEST_CASE("analyze rejects a checkpoint whose manifest disagrees with its payload") {
  const auto dir = fresh_dir("manifest");
  auto m = model::Model<float>::build(model::ModelConfig::uniform("m", 2, 16, 2, 32, 8, 4, 4), 1);
  model::save_checkpoint(dir / "ckpt", m, {});
  auto manifest = json::parse(slurp(dir / "ckpt" / "manifest.json"));
  manifest["config"]["num_blocks"] = 3;
  manifest["config"]["block_variants"].push_back(manifest["config"]["block_variants"][0]);
  std::ofstream(dir / "ckpt" / "manifest.json") << manifest.dump();
  train::SyntheticSpec s{4, 8, 3, 4, 0.3, 3};
  AnalyzeOptions o;
  o.output = dir / "out";
  CHECK_THROWS_AS(analyze_checkpoint(dir / "ckpt", train::make_synthetic(s), o), ManifestError);
  fs::remove_all(dir);
}

TEST_CASE("probe loading from a dataset spec") {
  const auto dir = fresh_dir("probe");
  std::ofstream(dir / "probe.json") << R"({"synthetic": {"train_samples": 4, "eval_samples": 6, "image_size": 8}})";
  const auto d = load_probe(dir / "probe.json");
  CHECK(d.size() == 6);
  CHECK(d.image_size == 8);
  CHECK_THROWS_AS(load_probe(dir / "nothing"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("parameter table") {
  const auto dir = fresh_dir("params");
  auto c = model::ModelConfig::uniform("stem", 0, 384, 12, 1152, 224, 16, 1000);
  auto d = model::ModelConfig::uniform("vit16", 16, 384, 12, 1152, 224, 16, 1000);
  std::ofstream(dir / "list.json") << json::array({model::to_json(c), model::to_json(d)}).dump();
  std::ofstream(dir / "one.json") << model::to_json(d).dump();
  const auto configs = load_model_configs(dir / "list.json");
  REQUIRE(configs.size() == 2);
  CHECK(load_model_configs(dir / "one.json").size() == 1);
  const auto rows = parameter_table(configs);
  const std::size_t dim = 384, tokens = 197;
  CHECK(rows[0].count == (3 * 16 * 16 + 1) * dim + dim + tokens * dim + 2 * dim + dim * 1000 + 1000);
  CHECK(rows[1].blocks == 16);
  CHECK(rows[1].mlp_hidden == 1152);
  const auto text = format_parameter_table(rows);
  CHECK(text.find("vit16") != std::string::npos);
  CHECK(text.find("24.42M") != std::string::npos);
  std::ofstream(dir / "bad.json") << R"({"name": "x", "image_size": 32, "patch_size": 5, "num_classes": 10,
    "num_blocks": 1, "embed_dim": 8, "num_heads": 2, "mlp_hidden": 8})";
  CHECK_THROWS_AS(load_model_configs(dir / "bad.json"), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("gradient suite modules") {
  CHECK_THROWS_AS(run_gradient_suite("optimizer"), ParameterError);
  const auto cases = run_gradient_suite("loss");
  CHECK(cases.size() == 3);
  for (const auto& c : cases) {
    INFO(c.name);
    CHECK(c.report.max_rel_error() < 1e-4);
  }
}
