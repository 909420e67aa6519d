#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "reattn/diagnostics/similarity.hpp"
#include "reattn/model/config.hpp"
#include "reattn/training/data.hpp"
#include "reattn/training/training.hpp"

namespace reattn::cli {

struct Cifar10Source {
  std::filesystem::path path;  // directory of batches or a single .bin file
  std::optional<std::size_t> train_limit;
  std::optional<std::size_t> eval_limit;
  bool operator==(const Cifar10Source&) const = default;
};

struct SyntheticSource {
  std::size_t train_samples = 512;
  std::size_t eval_samples = 128;
  std::size_t image_size = 16;
  std::size_t channels = 3;
  std::size_t num_classes = 4;
  double noise = 0.3;
  std::uint64_t seed = 0;
  bool operator==(const SyntheticSource&) const = default;
};

// Exactly one source is set.
struct DatasetSpec {
  std::optional<Cifar10Source> cifar10;
  std::optional<SyntheticSource> synthetic;
  bool operator==(const DatasetSpec&) const = default;
};

struct DataSplits {
  train::Dataset train;
  train::Dataset eval;
};

// IoError when CIFAR-10 files are missing.
DataSplits load_dataset(const DatasetSpec& spec);

enum class SweepAxis { kDepth, kEmbedDim, kVariant, kSharedFrom, kLambda };
std::string to_string(SweepAxis axis);
SweepAxis parse_sweep_axis(const std::string& text);

// values: integers for depth/embed_dim/shared_from, numbers for lambda,
// variant objects/names or "<vanilla>-<reattention>" splits for variant.
struct Ablation {
  SweepAxis axis = SweepAxis::kDepth;
  std::vector<nlohmann::json> values;
  bool operator==(const Ablation&) const = default;
};

struct ExperimentSpec {
  std::string name;
  model::ModelConfig model;
  train::TrainConfig train;
  DatasetSpec dataset;
  std::filesystem::path outputs = "runs";
  std::optional<Ablation> ablation;
  bool operator==(const ExperimentSpec&) const = default;
};

nlohmann::json to_json(const ExperimentSpec& spec);
// ConfigError naming the offending field; unknown fields are errors.
ExperimentSpec experiment_spec_from_json(const nlohmann::json& j);
// ParseError with line and column on malformed JSON.
nlohmann::json parse_json_text(const std::string& text, const std::string& source);
ExperimentSpec load_experiment_spec(const std::filesystem::path& path);

// One concrete training run of an experiment.
struct RunPlan {
  std::string label;  // empty for a spec without ablation
  model::ModelConfig model;
  train::TrainConfig train;  // seed = spec seed + sweep index
  std::filesystem::path directory;
};

std::vector<RunPlan> expand_runs(const ExperimentSpec& spec);

struct RunSummary {
  std::string label;
  std::uint64_t seed = 0;
  std::size_t num_parameters = 0;
  double final_train_acc = 0;
  double final_eval_acc = 0;
  std::size_t similar_block_count = 0;
  double mean_adjacent_ratio = 0;
  nlohmann::json to_json() const;
};

RunSummary execute_run(const RunPlan& plan, const DataSplits& data);

// Runs every plan with up to `workers` concurrent threads and writes
// summary.json under <outputs>/<name>/.
std::vector<RunSummary> run_experiment(const ExperimentSpec& spec, std::size_t workers = 1);

// REATTN_THREADS, at least 1.
std::size_t worker_limit();

struct AnalyzeOptions {
  diag::ReportOptions report;
  std::size_t samples = 64;
  bool export_maps = false;
  std::filesystem::path output = "analysis";
};

// Eval-mode diagnostics of a checkpoint on a probe set: report.json,
// report.csv and, optionally, maps/block{bb}_attn.ratn under options.output.
// The checkpoint directory is only read.
diag::SimilarityReport analyze_checkpoint(const std::filesystem::path& checkpoint, const train::Dataset& probe,
                                          const AnalyzeOptions& options);

// A .json probe is a dataset spec (its eval split is used); anything else
// is read as CIFAR-10 (test_batch.bin for a directory).
train::Dataset load_probe(const std::filesystem::path& path);

struct ParamRow {
  std::string name;
  std::size_t blocks = 0;
  std::size_t embed_dim = 0;
  std::size_t mlp_hidden = 0;
  std::size_t count = 0;
};

// A config file holds one model config or an array of them.
std::vector<model::ModelConfig> load_model_configs(const std::filesystem::path& path);
std::vector<ParamRow> parameter_table(const std::vector<model::ModelConfig>& configs);
std::string format_parameter_table(const std::vector<ParamRow>& rows);

}  // namespace reattn::cli
