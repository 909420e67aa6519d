#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "reattn/cli/experiment.hpp"
#include "reattn/cli/gradient_suite.hpp"
#include "reattn/error.hpp"

using namespace reattn;

namespace {

enum ExitCode { kOk = 0, kCheckFailed = 1, kConfig = 2, kIo = 3, kNumerical = 4, kOther = 5 };

int cmd_train(const std::string& spec_path) {
  const auto spec = cli::load_experiment_spec(spec_path);
  const auto workers = cli::worker_limit();
  const auto plans = cli::expand_runs(spec);
  std::cout << "experiment " << spec.name << ": " << plans.size() << " run(s), " << workers << " worker(s), output "
            << (spec.outputs / spec.name).string() << "\n";
  for (const auto& p : plans)
    std::cout << "  " << (p.label.empty() ? spec.name : p.label) << " seed " << p.train.seed << "\n";
  const auto summaries = cli::run_experiment(spec, workers);
  for (const auto& s : summaries) {
    std::printf("%-28s params %9zu  train %.4f  eval %.4f  similar blocks %zu  mean adj ratio %.4f\n",
                (s.label.empty() ? spec.name : s.label).c_str(), s.num_parameters, s.final_train_acc,
                s.final_eval_acc, s.similar_block_count, s.mean_adjacent_ratio);
  }
  return kOk;
}

int cmd_analyze(const std::string& checkpoint, const std::string& probe, const cli::AnalyzeOptions& options) {
  const auto data = cli::load_probe(probe);
  const auto report = cli::analyze_checkpoint(checkpoint, data, options);
  std::printf("blocks %zu  samples %zu  similar blocks %zu  last unique block %zu%s  mean adj ratio %.4f\n",
              report.num_blocks, report.num_samples, report.similar_block_count, report.last_unique_block,
              report.unique_degenerate ? " (degenerate)" : "", report.mean_adjacent_ratio());
  for (const auto& w : report.warnings) std::printf("warning: %s\n", w.c_str());
  std::printf("report written to %s\n", options.output.string().c_str());
  return kOk;
}

int cmd_params(const std::vector<std::string>& files) {
  std::vector<model::ModelConfig> configs;
  for (const auto& f : files)
    for (auto& c : cli::load_model_configs(f)) configs.push_back(std::move(c));
  std::cout << cli::format_parameter_table(cli::parameter_table(configs));
  return kOk;
}

int cmd_gradcheck(const std::string& module, double tolerance, std::uint64_t seed) {
  bool ok = true;
  for (const auto& c : cli::run_gradient_suite(module, seed)) {
    const double err = c.report.max_rel_error();
    const bool pass = err < tolerance;
    ok = ok && pass;
    std::printf("%s  %-10s %-34s max rel error %.3e\n", pass ? "PASS" : "FAIL", c.module.c_str(), c.name.c_str(), err);
    if (!pass) std::printf("%s\n", c.report.summary().c_str());
  }
  return ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Re-attention vision transformers: training, diagnostics and checks"};
  app.require_subcommand(1);

  std::string spec_path;
  auto* train = app.add_subcommand("train", "Run an experiment spec (with its ablation sweep)");
  train->add_option("spec", spec_path, "Experiment spec JSON")->required();

  std::string checkpoint, probe;
  cli::AnalyzeOptions analyze_options;
  auto* analyze = app.add_subcommand("analyze", "Attention-collapse diagnostics of a checkpoint");
  analyze->add_option("checkpoint", checkpoint, "Checkpoint directory")->required();
  analyze->add_option("--probe", probe, "CIFAR-10 path or dataset spec .json")->required();
  analyze->add_flag("--export-maps", analyze_options.export_maps, "Write raw attention maps per block");
  analyze->add_option("--out", analyze_options.output, "Output directory")->capture_default_str();
  analyze->add_option("--samples", analyze_options.samples, "Probe samples")->capture_default_str();
  analyze->add_option("--vector-threshold", analyze_options.report.thresholds.vector_threshold)->capture_default_str();
  analyze->add_option("--block-threshold", analyze_options.report.thresholds.block_threshold)->capture_default_str();
  analyze->add_option("--unique-threshold", analyze_options.report.thresholds.unique_threshold)->capture_default_str();
  analyze->add_option("--window", analyze_options.report.moving_average_window, "Moving-average window")
      ->capture_default_str();

  std::vector<std::string> config_files;
  auto* params = app.add_subcommand("params", "Parameter-count table of model configs");
  params->add_option("configs", config_files, "Model config JSON files")->required();

  std::string module;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_option("--module", module, "attention, model or loss (default all)")
      ->check(CLI::IsMember({"attention", "model", "loss"}));
  gradcheck->add_option("--tolerance", tolerance)->capture_default_str();
  gradcheck->add_option("--seed", seed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(spec_path);
    if (*analyze) return cmd_analyze(checkpoint, probe, analyze_options);
    if (*params) return cmd_params(config_files);
    if (*gradcheck) return cmd_gradcheck(module, tolerance, seed);
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kConfig;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfig;
  } catch (const ParameterError& e) {
    std::cerr << "parameter error: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kIo;
  } catch (const ManifestError& e) {
    std::cerr << "manifest error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOther;
}
