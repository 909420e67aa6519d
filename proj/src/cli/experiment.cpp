#include "reattn/cli/experiment.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "reattn/error.hpp"
#include "reattn/model/model.hpp"
#include "reattn/numerics/serialize.hpp"

namespace reattn::cli {

using nlohmann::json;
using model::reject_unknown_keys;

namespace {

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream s;
  s << in.rdbuf();
  return parse_json_text(s.str(), path.string());
}

json to_json(const DatasetSpec& d) {
  if (d.cifar10) {
    json c{{"path", d.cifar10->path.string()}};
    if (d.cifar10->train_limit) c["train_limit"] = *d.cifar10->train_limit;
    if (d.cifar10->eval_limit) c["eval_limit"] = *d.cifar10->eval_limit;
    return {{"cifar10", c}};
  }
  const auto& s = *d.synthetic;
  return {{"synthetic",
           {{"train_samples", s.train_samples},
            {"eval_samples", s.eval_samples},
            {"image_size", s.image_size},
            {"channels", s.channels},
            {"num_classes", s.num_classes},
            {"noise", s.noise},
            {"seed", s.seed}}}};
}

DatasetSpec dataset_from_json(const json& j) {
  reject_unknown_keys(j, {"cifar10", "synthetic"}, "dataset");
  if (j.contains("cifar10") == j.contains("synthetic")) {
    throw ConfigError("dataset: exactly one of 'cifar10' or 'synthetic' is required");
  }
  DatasetSpec d;
  try {
    if (j.contains("cifar10")) {
      const auto& c = j.at("cifar10");
      reject_unknown_keys(c, {"path", "train_limit", "eval_limit"}, "dataset.cifar10");
      Cifar10Source src;
      if (!c.contains("path")) throw ConfigError("dataset.cifar10: missing field 'path'");
      src.path = c.at("path").get<std::string>();
      if (c.contains("train_limit")) src.train_limit = c.at("train_limit").get<std::size_t>();
      if (c.contains("eval_limit")) src.eval_limit = c.at("eval_limit").get<std::size_t>();
      d.cifar10 = src;
    } else {
      const auto& s = j.at("synthetic");
      reject_unknown_keys(
          s, {"train_samples", "eval_samples", "image_size", "channels", "num_classes", "noise", "seed"},
          "dataset.synthetic");
      SyntheticSource src;
      src.train_samples = s.value("train_samples", src.train_samples);
      src.eval_samples = s.value("eval_samples", src.eval_samples);
      src.image_size = s.value("image_size", src.image_size);
      src.channels = s.value("channels", src.channels);
      src.num_classes = s.value("num_classes", src.num_classes);
      src.noise = s.value("noise", src.noise);
      src.seed = s.value("seed", src.seed);
      d.synthetic = src;
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("dataset: ") + e.what());
  }
  return d;
}

// Image geometry and class count a dataset spec will produce.
struct DataShape {
  std::size_t channels, image_size, num_classes;
};

DataShape shape_of(const DatasetSpec& d) {
  if (d.cifar10) return {3, 32, 10};
  return {d.synthetic->channels, d.synthetic->image_size, d.synthetic->num_classes};
}

void check_data_fits(const model::ModelConfig& m, const DataShape& s, const std::string& where) {
  if (m.channels != s.channels || m.image_size != s.image_size || m.num_classes != s.num_classes) {
    throw ConfigError(where + ": model expects " + std::to_string(m.channels) + "x" + std::to_string(m.image_size) +
                      "x" + std::to_string(m.image_size) + " images in " + std::to_string(m.num_classes) +
                      " classes, dataset has " + std::to_string(s.channels) + "x" + std::to_string(s.image_size) +
                      "x" + std::to_string(s.image_size) + " in " + std::to_string(s.num_classes));
  }
}

bool uniform_variants(const model::ModelConfig& c) {
  for (const auto& v : c.block_variants)
    if (!(v == c.block_variants.front())) return false;
  return true;
}

void validate_axis_values(const Ablation& a) {
  if (a.values.empty()) throw ConfigError("ablation: 'values' must not be empty");
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const auto& v = a.values[i];
    const std::string where = "ablation.values[" + std::to_string(i) + "]";
    switch (a.axis) {
      case SweepAxis::kDepth:
      case SweepAxis::kEmbedDim:
      case SweepAxis::kSharedFrom:
        if (!v.is_number_integer() || v.get<long long>() < 0) {
          throw ConfigError(where + ": expected a non-negative integer");
        }
        break;
      case SweepAxis::kLambda:
        if (!v.is_number()) throw ConfigError(where + ": expected a number");
        break;
      case SweepAxis::kVariant:
        if (!v.is_string() && !v.is_object()) throw ConfigError(where + ": expected a variant or split string");
        break;
    }
  }
}

std::string value_label(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_object()) return v.value("kind", std::string("variant"));
  return v.dump();
}

void apply_axis(SweepAxis axis, const json& value, model::ModelConfig& m, train::TrainConfig& t) {
  switch (axis) {
    case SweepAxis::kDepth: {
      if (m.shared_from || !uniform_variants(m)) {
        throw ConfigError("ablation depth: the base model must use one variant for every block");
      }
      const auto variant = m.block_variants.empty() ? attn::AttentionVariantConfig::vanilla() : m.block_variants[0];
      m.num_blocks = value.get<std::size_t>();
      m.block_variants.assign(m.num_blocks, variant);
      break;
    }
    case SweepAxis::kEmbedDim: {
      const auto d = value.get<std::size_t>();
      const double ratio = static_cast<double>(m.mlp_hidden) / static_cast<double>(m.embed_dim);
      m.embed_dim = d;
      m.mlp_hidden = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(d)));
      break;
    }
    case SweepAxis::kVariant:
      m.shared_from.reset();
      if (value.is_string() && value.get<std::string>().find('-') != std::string::npos) {
        const auto [vanilla, re] = model::parse_split_ratio(value.get<std::string>());
        if (vanilla + re != m.num_blocks) {
          throw ConfigError("ablation variant: split " + value.get<std::string>() + " does not add up to " +
                            std::to_string(m.num_blocks) + " blocks");
        }
        m.block_variants = model::split_variants(vanilla, re);
      } else {
        m.block_variants.assign(m.num_blocks, model::variant_from_json(value));
      }
      break;
    case SweepAxis::kSharedFrom: {
      if (m.shared_from) throw ConfigError("ablation shared_from: the base model already shares attention");
      const auto anchor = value.get<std::size_t>();
      if (anchor >= m.num_blocks) {
        throw ConfigError("ablation shared_from: anchor " + std::to_string(anchor) + " outside " +
                          std::to_string(m.num_blocks) + " blocks");
      }
      model::apply_sharing(m, anchor, m.block_variants[anchor].norm_mode.value_or(attn::NormMode::kBatch));
      break;
    }
    case SweepAxis::kLambda:
      t.lambda = value.get<double>();
      break;
  }
}

template <typename T>
RunSummary execute_typed(const RunPlan& plan, const DataSplits& data) {
  auto m = model::Model<T>::build(plan.model, plan.train.seed);
  std::filesystem::create_directories(plan.directory);
  write_json(plan.directory / "run.json", {{"label", plan.label},
                                           {"seed", plan.train.seed},
                                           {"model", model::to_json(plan.model)},
                                           {"train", train::to_json(plan.train)}});
  const auto log = train::train(m, data.train, data.eval, plan.train, {plan.directory, {}});
  RunSummary s;
  s.label = plan.label;
  s.seed = plan.train.seed;
  s.num_parameters = m.num_parameters();
  const auto& report = log.epochs.empty() ? log.initial_report : log.epochs.back().report;
  s.final_train_acc = log.epochs.empty() ? 0.0 : log.epochs.back().train_acc;
  s.final_eval_acc = log.epochs.empty() ? train::evaluate(m, data.eval, plan.train.batch_size)
                                        : log.epochs.back().eval_acc;
  s.similar_block_count = report.similar_block_count;
  s.mean_adjacent_ratio = report.mean_adjacent_ratio();
  return s;
}

template <typename T>
diag::SimilarityReport analyze_typed(const std::filesystem::path& checkpoint, const train::Dataset& probe,
                                     const AnalyzeOptions& options) {
  auto m = model::load_checkpoint<T>(checkpoint);
  const auto count = std::min(options.samples, probe.size());
  if (count == 0) throw DataError("probe set is empty");
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = i;
  num::Tape<T> tape(false);
  auto trace = m.forward(tape, probe.images<T>(idx), {false, 0});
  auto report = diag::similarity_report(trace.block_maps, trace.block_features, options.report);
  std::filesystem::create_directories(options.output);
  auto j = report.to_json();
  j["checkpoint"] = std::filesystem::absolute(checkpoint).string();
  j["probe_samples"] = count;
  write_json(options.output / "report.json", j);
  std::ofstream csv(options.output / "report.csv");
  csv << report.to_csv();
  if (!csv) throw IoError("failed writing " + (options.output / "report.csv").string());
  if (options.export_maps) {
    const auto dir = options.output / "maps";
    std::filesystem::create_directories(dir);
    for (std::size_t b = 0; b < trace.block_maps.size(); ++b) {
      std::ostringstream name;
      name << "block" << std::setw(2) << std::setfill('0') << b << "_attn.ratn";
      num::save_tensor(dir / name.str(), trace.block_maps[b]);
    }
  }
  return report;
}

}  // namespace

DataSplits load_dataset(const DatasetSpec& spec) {
  if (spec.cifar10) {
    const auto& c = *spec.cifar10;
    if (std::filesystem::is_directory(c.path)) {
      return {train::load_cifar10_split(c.path, true, c.train_limit),
              train::load_cifar10_split(c.path, false, c.eval_limit)};
    }
    // a single file serves both splits
    auto all = train::load_cifar10_split(c.path, true);
    const std::size_t n_train = std::min(all.size(), c.train_limit.value_or(all.size()));
    const std::size_t rest = all.size() - n_train;
    const std::size_t n_eval = std::min(rest, c.eval_limit.value_or(rest));
    return {all.subset(0, n_train), all.subset(n_train, n_eval)};
  }
  const auto& s = *spec.synthetic;
  train::SyntheticSpec base{s.train_samples, s.image_size, s.channels, s.num_classes, s.noise, s.seed};
  auto eval = base;
  eval.num_samples = s.eval_samples;
  eval.seed = model::derive_seed(s.seed, "eval");
  return {train::make_synthetic(base), train::make_synthetic(eval)};
}

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kDepth: return "depth";
    case SweepAxis::kEmbedDim: return "embed_dim";
    case SweepAxis::kVariant: return "variant";
    case SweepAxis::kSharedFrom: return "shared_from";
    case SweepAxis::kLambda: return "lambda";
  }
  return "?";
}

SweepAxis parse_sweep_axis(const std::string& text) {
  for (auto a : {SweepAxis::kDepth, SweepAxis::kEmbedDim, SweepAxis::kVariant, SweepAxis::kSharedFrom,
                 SweepAxis::kLambda})
    if (to_string(a) == text) return a;
  throw ConfigError("ablation: unknown axis '" + text +
                    "' (expected depth, embed_dim, variant, shared_from or lambda)");
}

json to_json(const ExperimentSpec& spec) {
  json j{{"name", spec.name},
         {"model", model::to_json(spec.model)},
         {"train", train::to_json(spec.train)},
         {"dataset", to_json(spec.dataset)},
         {"outputs", spec.outputs.string()}};
  if (spec.ablation) j["ablation"] = {{"axis", to_string(spec.ablation->axis)}, {"values", spec.ablation->values}};
  return j;
}

ExperimentSpec experiment_spec_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("experiment spec must be a JSON object");
  reject_unknown_keys(j, {"name", "model", "train", "dataset", "outputs", "ablation"}, "experiment");
  for (const char* key : {"name", "model", "dataset"})
    if (!j.contains(key)) throw ConfigError(std::string("experiment: missing field '") + key + "'");
  ExperimentSpec s;
  if (!j.at("name").is_string() || j.at("name").get<std::string>().empty()) {
    throw ConfigError("experiment: field 'name' must be a non-empty string");
  }
  s.name = j.at("name").get<std::string>();
  if (s.name.find('/') != std::string::npos || s.name == "." || s.name == "..") {
    throw ConfigError("experiment: name '" + s.name + "' is not a valid directory name");
  }
  s.model = model::model_config_from_json(j.at("model"));
  if (j.contains("train")) s.train = train::train_config_from_json(j.at("train"));
  s.dataset = dataset_from_json(j.at("dataset"));
  if (j.contains("outputs")) {
    if (!j.at("outputs").is_string()) throw ConfigError("experiment: field 'outputs' must be a path string");
    s.outputs = j.at("outputs").get<std::string>();
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    reject_unknown_keys(a, {"axis", "values"}, "ablation");
    if (!a.contains("axis") || !a.at("axis").is_string()) throw ConfigError("ablation: missing string field 'axis'");
    if (!a.contains("values") || !a.at("values").is_array()) throw ConfigError("ablation: missing array 'values'");
    Ablation ab;
    ab.axis = parse_sweep_axis(a.at("axis").get<std::string>());
    for (const auto& v : a.at("values")) ab.values.push_back(v);
    validate_axis_values(ab);
    s.ablation = ab;
  }
  expand_runs(s);  // validates every concrete run
  return s;
}

json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, column = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        column = 1;
      } else {
        ++column;
      }
    }
    throw ParseError(source + ":" + std::to_string(line) + ":" + std::to_string(column) + ": " + e.what());
  }
}

ExperimentSpec load_experiment_spec(const std::filesystem::path& path) {
  const auto j = read_json_file(path);
  try {
    return experiment_spec_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::vector<RunPlan> expand_runs(const ExperimentSpec& spec) {
  const auto root = spec.outputs / spec.name;
  const auto data_shape = shape_of(spec.dataset);
  std::vector<RunPlan> plans;
  auto finish = [&](RunPlan plan, std::size_t index) {
    plan.train.seed = spec.train.seed + index;
    const std::string where = plan.label.empty() ? "experiment" : "run " + plan.label;
    try {
      plan.model.validate();
      plan.train.validate(plan.model.num_blocks);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
    check_data_fits(plan.model, data_shape, where);
    plans.push_back(std::move(plan));
  };
  if (!spec.ablation) {
    finish({"", spec.model, spec.train, root}, 0);
    return plans;
  }
  const auto& a = *spec.ablation;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    RunPlan p{to_string(a.axis) + "_" + value_label(a.values[i]), spec.model, spec.train, {}};
    if (a.axis == SweepAxis::kVariant) p.label = "variant_" + std::to_string(i) + "_" + value_label(a.values[i]);
    try {
      apply_axis(a.axis, a.values[i], p.model, p.train);
    } catch (const json::exception& e) {
      throw ConfigError("ablation.values[" + std::to_string(i) + "]: " + e.what());
    }
    p.model.name = spec.model.name + "-" + p.label;
    p.directory = root / p.label;
    finish(std::move(p), i);
  }
  return plans;
}

json RunSummary::to_json() const {
  return {{"label", label},
          {"seed", seed},
          {"num_parameters", num_parameters},
          {"final_train_acc", final_train_acc},
          {"final_eval_acc", final_eval_acc},
          {"similar_block_count", similar_block_count},
          {"mean_adjacent_ratio", mean_adjacent_ratio}};
}

RunSummary execute_run(const RunPlan& plan, const DataSplits& data) {
  return plan.train.precision == train::Precision::kDouble ? execute_typed<double>(plan, data)
                                                           : execute_typed<float>(plan, data);
}

std::vector<RunSummary> run_experiment(const ExperimentSpec& spec, std::size_t workers) {
  const auto plans = expand_runs(spec);
  const auto data = load_dataset(spec.dataset);
  const auto root = spec.outputs / spec.name;
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw IoError("cannot create output directory " + root.string() + ": " + ec.message());
  write_json(root / "spec.json", to_json(spec));

  std::vector<RunSummary> summaries(plans.size());
  std::vector<std::exception_ptr> errors(plans.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < plans.size(); i = next++) {
      try {
        summaries[i] = execute_run(plans[i], data);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(workers, plans.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  json runs = json::array();
  for (const auto& s : summaries) runs.push_back(s.to_json());
  write_json(root / "summary.json", {{"name", spec.name}, {"runs", runs}});
  return summaries;
}

std::size_t worker_limit() {
  const char* env = std::getenv("REATTN_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("REATTN_THREADS must be a positive integer, got '" + std::string(env) + "'");
  return static_cast<std::size_t>(v);
}

diag::SimilarityReport analyze_checkpoint(const std::filesystem::path& checkpoint, const train::Dataset& probe,
                                          const AnalyzeOptions& options) {
  const auto config = model::read_checkpoint_config(checkpoint);
  check_data_fits(config, {probe.channels, probe.image_size, probe.num_classes}, "analyze");
  probe.validate();
  const auto manifest = read_json_file(checkpoint / "manifest.json");
  const auto precision = manifest.value("precision", std::string("single"));
  if (precision == "double") return analyze_typed<double>(checkpoint, probe, options);
  if (precision == "single") return analyze_typed<float>(checkpoint, probe, options);
  throw ManifestError(checkpoint.string() + ": unknown precision '" + precision + "'");
}

train::Dataset load_probe(const std::filesystem::path& path) {
  if (path.extension() == ".json") {
    DatasetSpec spec;
    try {
      spec = dataset_from_json(read_json_file(path));
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
    return load_dataset(spec).eval;
  }
  return train::load_cifar10_split(path, false);
}

std::vector<model::ModelConfig> load_model_configs(const std::filesystem::path& path) {
  const auto j = read_json_file(path);
  std::vector<model::ModelConfig> out;
  try {
    if (j.is_array()) {
      for (const auto& c : j) out.push_back(model::model_config_from_json(c));
    } else {
      out.push_back(model::model_config_from_json(j));
    }
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return out;
}

std::vector<ParamRow> parameter_table(const std::vector<model::ModelConfig>& configs) {
  std::vector<ParamRow> rows;
  for (const auto& c : configs) rows.push_back({c.name, c.num_blocks, c.embed_dim, c.mlp_hidden, model::count_params(c)});
  return rows;
}

std::string format_parameter_table(const std::vector<ParamRow>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(20) << "name" << std::right << std::setw(8) << "blocks" << std::setw(11) << "embed_dim"
      << std::setw(8) << "mlp" << std::setw(14) << "params" << std::setw(10) << "millions" << "\n";
  for (const auto& r : rows) {
    out << std::left << std::setw(20) << r.name << std::right << std::setw(8) << r.blocks << std::setw(11)
        << r.embed_dim << std::setw(8) << r.mlp_hidden << std::setw(14) << r.count << std::setw(9) << std::fixed
        << std::setprecision(2) << static_cast<double>(r.count) / 1e6 << "M\n";
  }
  return out.str();
}

}  // namespace reattn::cli
