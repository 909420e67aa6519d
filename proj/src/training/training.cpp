#include "reattn/training/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "reattn/error.hpp"
#include "reattn/numerics/ops.hpp"

namespace reattn::train {

using num::Shape;
using nlohmann::json;

template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy expects [N, C] logits, got " + num::shape_str(logits.shape()));
  if (labels.size() != logits.dim(0)) {
    throw DataError("cross_entropy got " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(logits.dim(0)) + " rows");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= logits.dim(1)) {
      throw DataError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) + " is outside [0, " +
                      std::to_string(logits.dim(1)) + ")");
    }
  }
  return num::cross_entropy(tape, logits, labels);
}

template <typename T>
Tensor<T> mean_map_cosine(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 4 || a.shape() != b.shape()) {
    throw DimensionError("map cosine expects matching [N, H, T, T] maps, got " + num::shape_str(a.shape()) + " and " +
                         num::shape_str(b.shape()));
  }
  auto dot = num::sum_axis(tape, num::mul(tape, a, b), 2);
  auto na = num::sum_axis(tape, num::mul(tape, a, a), 2);
  auto nb = num::sum_axis(tape, num::mul(tape, b, b), 2);
  auto denom = num::sqrt(tape, num::add_scalar(tape, num::mul(tape, na, nb), T(1e-12)));
  return num::mean(tape, num::div(tape, dot, denom));
}

template <typename T>
Tensor<T> similarity_regularizer(Tape<T>& tape, const std::vector<Tensor<T>>& block_maps, double lambda,
                                 std::size_t reg_blocks) {
  if (reg_blocks + 2 > block_maps.size()) {
    throw ParameterError("regularizing pairs 0.." + std::to_string(reg_blocks) + " needs " +
                         std::to_string(reg_blocks + 2) + " attention maps, got " + std::to_string(block_maps.size()));
  }
  if (lambda < 0) throw ParameterError("lambda must be non-negative");
  Tensor<T> total;
  for (std::size_t l = 0; l <= reg_blocks; ++l) {
    auto c = mean_map_cosine(tape, block_maps[l], block_maps[l + 1]);
    total = total.defined() ? num::add(tape, total, c) : c;
  }
  return num::scale(tape, total, static_cast<T>(lambda));
}

template <typename T>
Tensor<T> similarity_regularized_loss(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::size_t> labels,
                                      const std::vector<Tensor<T>>& block_maps, double lambda,
                                      std::size_t reg_blocks) {
  auto ce = train::cross_entropy(tape, logits, labels);
  if (lambda == 0.0) return ce;
  return num::add(tape, ce, similarity_regularizer(tape, block_maps, lambda, reg_blocks));
}

template <typename T>
void adamw_step(std::span<T> param, std::span<const T> grad, AdamState& state, double lr, double weight_decay,
                const AdamWHyper& hyper) {
  if (grad.size() != param.size()) {
    throw ContractError("adamw: gradient has " + std::to_string(grad.size()) + " entries for " +
                        std::to_string(param.size()) + " parameters");
  }
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  if (state.m.size() != param.size() || state.v.size() != param.size()) {
    throw ContractError("adamw: optimizer state does not match parameter size " + std::to_string(param.size()));
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
    state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
    const double update = (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + hyper.epsilon);
    param[i] = static_cast<T>(static_cast<double>(param[i]) * decay - lr * update);
  }
}

template <typename T>
AdamW<T>::AdamW(std::vector<model::NamedParameter<T>> params, AdamWHyper hyper)
    : params_(std::move(params)), states_(params_.size()), hyper_(hyper) {}

template <typename T>
void AdamW<T>::step(double lr, double weight_decay) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& p = params_[i];
    if (!p.tensor.has_grad()) continue;
    adamw_step<T>(p.tensor.mutable_data(), p.tensor.grad(), states_[i], lr, p.decay ? weight_decay : 0.0, hyper_);
  }
}

std::string to_string(Precision p) { return p == Precision::kSingle ? "single" : "double"; }

Precision parse_precision(const std::string& text) {
  if (text == "single") return Precision::kSingle;
  if (text == "double") return Precision::kDouble;
  throw ConfigError("precision must be 'single' or 'double', got '" + text + "'");
}

std::size_t TrainConfig::resolved_reg_blocks(std::size_t num_blocks) const {
  if (reg_blocks) return *reg_blocks;
  switch (num_blocks) {
    case 16: return 4;
    case 24: return 8;
    case 32: return 12;
    default:
      throw ConfigError("reg_blocks has no default for " + std::to_string(num_blocks) +
                        " blocks; set it explicitly or use lambda 0");
  }
}

void TrainConfig::validate(std::size_t num_blocks) const {
  if (total_epochs > 0 && warmup_epochs >= total_epochs) {
    throw ConfigError("warmup_epochs " + std::to_string(warmup_epochs) + " must be < total_epochs " +
                      std::to_string(total_epochs));
  }
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(base_lr >= 0.0)) throw ConfigError("base_lr must be non-negative");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (reg_blocks && *reg_blocks >= num_blocks) {
    throw ConfigError("reg_blocks " + std::to_string(*reg_blocks) + " must be < num_blocks " +
                      std::to_string(num_blocks));
  }
  if (lambda > 0.0) {
    const auto b = resolved_reg_blocks(num_blocks);
    if (b + 2 > num_blocks) {
      throw ConfigError("reg_blocks " + std::to_string(b) + " regularizes " + std::to_string(b + 1) +
                        " adjacent pairs, which needs " + std::to_string(b + 2) + " blocks; the model has " +
                        std::to_string(num_blocks));
    }
  }
  const auto& th = thresholds;
  for (double v : {th.vector_threshold, th.block_threshold, th.unique_threshold}) {
    if (!(v > 0.0 && v < 1.0)) throw ConfigError("diagnostic thresholds must lie in (0, 1)");
  }
}

json to_json(const TrainConfig& c) {
  json j{{"base_lr", c.base_lr},
         {"warmup_epochs", c.warmup_epochs},
         {"total_epochs", c.total_epochs},
         {"batch_size", c.batch_size},
         {"weight_decay", c.weight_decay},
         {"lambda", c.lambda},
         {"seed", c.seed},
         {"precision", to_string(c.precision)},
         {"probe_size", c.probe_size},
         {"checkpoint_every", c.checkpoint_every},
         {"moving_average_window", c.moving_average_window},
         {"thresholds",
          {{"vector_threshold", c.thresholds.vector_threshold},
           {"block_threshold", c.thresholds.block_threshold},
           {"unique_threshold", c.thresholds.unique_threshold}}}};
  if (c.reg_blocks) j["reg_blocks"] = *c.reg_blocks;
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  model::reject_unknown_keys(j,
                             {"base_lr", "warmup_epochs", "total_epochs", "batch_size", "weight_decay", "lambda",
                              "reg_blocks", "seed", "precision", "probe_size", "checkpoint_every",
                              "moving_average_window", "thresholds"},
                             "train");
  TrainConfig c;
  try {
    c.base_lr = j.value("base_lr", c.base_lr);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.total_epochs = j.value("total_epochs", c.total_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lambda = j.value("lambda", c.lambda);
    if (j.contains("reg_blocks")) c.reg_blocks = j.at("reg_blocks").get<std::size_t>();
    c.seed = j.value("seed", c.seed);
    c.precision = parse_precision(j.value("precision", to_string(c.precision)));
    c.probe_size = j.value("probe_size", c.probe_size);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.moving_average_window = j.value("moving_average_window", c.moving_average_window);
    if (j.contains("thresholds")) {
      const auto& t = j.at("thresholds");
      model::reject_unknown_keys(t, {"vector_threshold", "block_threshold", "unique_threshold"}, "train.thresholds");
      c.thresholds.vector_threshold = t.value("vector_threshold", c.thresholds.vector_threshold);
      c.thresholds.block_threshold = t.value("block_threshold", c.thresholds.block_threshold);
      c.thresholds.unique_threshold = t.value("unique_threshold", c.thresholds.unique_threshold);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  return c;
}

double lr_at(std::size_t step, const TrainConfig& config, std::size_t steps_per_epoch) {
  const double warm = static_cast<double>(config.warmup_epochs * steps_per_epoch);
  const double total = static_cast<double>(config.total_epochs * steps_per_epoch);
  const double s = static_cast<double>(step);
  if (s < warm) return config.base_lr * s / warm;
  if (total <= warm) return config.base_lr;
  const double progress = std::min(1.0, (s - warm) / (total - warm));
  return std::max(0.0, config.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

json EpochRecord::to_json() const {
  return {{"epoch", epoch},
          {"lr", lr},
          {"train_loss", train_loss},
          {"train_acc", train_acc},
          {"eval_acc", eval_acc},
          {"similar_block_count", similar_block_count},
          {"adj_ratios", adj_ratios}};
}

template <typename T>
double accuracy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("accuracy expects [N, C] logits matching " + std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) return 0.0;
  const std::size_t c = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = logits.data().subspan(i * c, c);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += best == labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

namespace {

void check_compatible(const model::ModelConfig& c, const Dataset& d, const char* what) {
  if (d.num_classes != c.num_classes || d.channels != c.channels || d.image_size != c.image_size) {
    throw DataError(std::string(what) + " data (" + std::to_string(d.num_classes) + " classes, " +
                    std::to_string(d.channels) + "x" + std::to_string(d.image_size) + "x" +
                    std::to_string(d.image_size) + ") does not match model '" + c.name + "' (" +
                    std::to_string(c.num_classes) + " classes, " + std::to_string(c.channels) + "x" +
                    std::to_string(c.image_size) + "x" + std::to_string(c.image_size) + ")");
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string epoch_tag(std::size_t epoch) {
  std::ostringstream s;
  s << "epoch_" << std::setw(3) << std::setfill('0') << epoch;
  return s.str();
}

void write_report(const std::filesystem::path& dir, const std::string& tag, const diag::SimilarityReport& r) {
  write_text(dir / "reports" / (tag + ".json"), r.to_json().dump(2) + "\n");
  write_text(dir / "reports" / (tag + ".csv"), r.to_csv());
}

}  // namespace

template <typename T>
double evaluate(model::Model<T>& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) return 0.0;
  if (batch_size == 0) throw ParameterError("evaluate: batch_size must be positive");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.resize(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    Tape<T> tape(false);
    auto trace = model.forward(tape, data.images<T>(idx), {false, 0});
    const auto labels = data.labels_of(idx);
    correct += static_cast<std::size_t>(std::lround(accuracy(trace.logits, labels) * static_cast<double>(idx.size())));
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

template <typename T>
diag::SimilarityReport probe_report(model::Model<T>& model, const Dataset& probe, std::size_t count,
                                    const diag::ReportOptions& options) {
  const std::size_t n = std::min(count, probe.size());
  if (n == 0) throw DataError("probe set is empty");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Tape<T> tape(false);
  auto trace = model.forward(tape, probe.images<T>(idx), {false, 0});
  return diag::similarity_report(trace.block_maps, trace.block_features, options);
}

template <typename T>
RunLog train(model::Model<T>& model, const Dataset& train_data, const Dataset& eval_data, const TrainConfig& config,
             const RunOutputs& outputs) {
  const auto& mc = model.config();
  config.validate(mc.num_blocks);
  train_data.validate();
  eval_data.validate();
  check_compatible(mc, train_data, "training");
  check_compatible(mc, eval_data, "evaluation");
  if (train_data.size() == 0) throw DataError("training set is empty");
  const Dataset& probe = eval_data.size() > 0 ? eval_data : train_data;
  const std::size_t reg_blocks = config.lambda > 0.0 ? config.resolved_reg_blocks(mc.num_blocks) : 0;
  const diag::ReportOptions report_options{config.thresholds, config.moving_average_window};
  const std::size_t steps_per_epoch = (train_data.size() + config.batch_size - 1) / config.batch_size;

  RunLog log;
  std::optional<std::filesystem::path> last_checkpoint;
  auto numerical_failure = [&](const std::string& what) {
    return NumericalError(what + "; last good checkpoint: " +
                          (last_checkpoint ? last_checkpoint->string() : std::string("none")));
  };
  auto guarded = [&](const std::string& where, auto&& fn) {
    try {
      return fn();
    } catch (const NumericalError& e) {
      throw numerical_failure(where + ": " + e.what());
    }
  };
  log.initial_report =
      guarded("initial probe", [&] { return probe_report(model, probe, config.probe_size, report_options); });
  if (outputs.directory) {
    std::filesystem::create_directories(*outputs.directory);
    write_report(*outputs.directory, "initial", log.initial_report);
    std::ofstream(*outputs.directory / "log.jsonl", std::ios::trunc);
  }
  auto save = [&](const std::string& tag, std::size_t epoch) {
    if (!outputs.directory) return;
    const auto dir = *outputs.directory / "checkpoints" / tag;
    model::save_checkpoint(dir, model, {{"epoch", epoch}, {"train", to_json(config)}});
    last_checkpoint = dir;
  };
  if (config.total_epochs == 0) {
    save("final", 0);
    return log;
  }

  AdamW<T> optimizer(model.parameters());
  std::vector<std::size_t> order(train_data.size());
  for (std::size_t epoch = 1; epoch <= config.total_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(model::derive_seed(config.seed, "shuffle." + std::to_string(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0, correct = 0, lr = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(config.batch_size, order.size() - start));
      const auto labels = train_data.labels_of(idx);
      Tape<T> tape;
      auto trace = guarded("epoch " + std::to_string(epoch), [&] {
        return model.forward(tape, train_data.images<T>(idx),
                             {true, model::derive_seed(config.seed, "step." + std::to_string(log.steps))});
      });
      auto loss = similarity_regularized_loss(tape, trace.logits, std::span<const std::size_t>(labels),
                                              trace.block_maps, config.lambda, reg_blocks);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw numerical_failure("loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                                std::to_string(log.steps));
      }
      tape.backward(loss);
      lr = lr_at(log.steps, config, steps_per_epoch);
      optimizer.step(lr, config.weight_decay);
      ++log.steps;
      loss_sum += value * static_cast<double>(idx.size());
      correct += accuracy(trace.logits, labels) * static_cast<double>(idx.size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_acc = correct / static_cast<double>(order.size());
    const std::string where = "evaluation after epoch " + std::to_string(epoch);
    rec.eval_acc = guarded(where, [&] { return evaluate(model, eval_data, config.batch_size); });
    rec.report = guarded(where, [&] { return probe_report(model, probe, config.probe_size, report_options); });
    rec.similar_block_count = rec.report.similar_block_count;
    rec.adj_ratios = rec.report.adjacent_ratios;
    if (outputs.directory) {
      std::ofstream out(*outputs.directory / "log.jsonl", std::ios::app);
      out << rec.to_json().dump() << "\n";
      write_report(*outputs.directory, epoch_tag(epoch), rec.report);
      if (config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0) save(epoch_tag(epoch), epoch);
    }
    if (outputs.on_epoch) outputs.on_epoch(rec);
    log.epochs.push_back(std::move(rec));
  }
  save("final", config.total_epochs);
  return log;
}

#define REATTN_INSTANTIATE_TRAINING(T)                                                                            \
  template Tensor<T> cross_entropy(Tape<T>&, const Tensor<T>&, std::span<const std::size_t>);                     \
  template Tensor<T> mean_map_cosine(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> similarity_regularizer(Tape<T>&, const std::vector<Tensor<T>>&, double, std::size_t);        \
  template Tensor<T> similarity_regularized_loss(Tape<T>&, const Tensor<T>&, std::span<const std::size_t>,        \
                                                 const std::vector<Tensor<T>>&, double, std::size_t);             \
  template void adamw_step(std::span<T>, std::span<const T>, AdamState&, double, double, const AdamWHyper&);       \
  template class AdamW<T>;                                                                                        \
  template double accuracy(const Tensor<T>&, std::span<const std::size_t>);                                       \
  template double evaluate(model::Model<T>&, const Dataset&, std::size_t);                                        \
  template diag::SimilarityReport probe_report(model::Model<T>&, const Dataset&, std::size_t,                     \
                                               const diag::ReportOptions&);                                       \
  template RunLog train(model::Model<T>&, const Dataset&, const Dataset&, const TrainConfig&, const RunOutputs&);

REATTN_INSTANTIATE_TRAINING(float)
REATTN_INSTANTIATE_TRAINING(double)

}  // namespace reattn::train
