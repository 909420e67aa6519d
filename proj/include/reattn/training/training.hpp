#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "reattn/diagnostics/similarity.hpp"
#include "reattn/model/model.hpp"
#include "reattn/numerics/tensor.hpp"
#include "reattn/training/data.hpp"

namespace reattn::train {

using num::Tape;
using num::Tensor;

// Mean negative log-likelihood of the true class; DataError on bad labels.
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::size_t> labels);

// Mean over batch, heads and tokens of the cosine between column t of
// head h in maps a and b ([N, H, T, T]); differentiable.
template <typename T>
Tensor<T> mean_map_cosine(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

// lambda * sum_{l = 0}^{reg_blocks} mean_map_cosine(maps[l], maps[l + 1]);
// requires reg_blocks + 2 <= maps.size().
template <typename T>
Tensor<T> similarity_regularizer(Tape<T>& tape, const std::vector<Tensor<T>>& block_maps, double lambda,
                                 std::size_t reg_blocks);

// cross_entropy + similarity_regularizer; lambda == 0 skips the regularizer.
template <typename T>
Tensor<T> similarity_regularized_loss(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::size_t> labels,
                                      const std::vector<Tensor<T>>& block_maps, double lambda,
                                      std::size_t reg_blocks);

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
};

// One decoupled AdamW update: p *= 1 - lr * weight_decay, then
// p -= lr * m_hat / (sqrt(v_hat) + eps). ContractError on size mismatch.
template <typename T>
void adamw_step(std::span<T> param, std::span<const T> grad, AdamState& state, double lr, double weight_decay,
                const AdamWHyper& hyper = {});

template <typename T>
class AdamW {
 public:
  AdamW(std::vector<model::NamedParameter<T>> params, AdamWHyper hyper = {});
  // Parameters without a gradient are skipped; decay applies only to
  // parameters flagged for it.
  void step(double lr, double weight_decay);
  const std::vector<AdamState>& states() const { return states_; }

 private:
  std::vector<model::NamedParameter<T>> params_;
  std::vector<AdamState> states_;
  AdamWHyper hyper_;
};

enum class Precision { kSingle, kDouble };
std::string to_string(Precision p);
Precision parse_precision(const std::string& text);

struct TrainConfig {
  double base_lr = 5e-4;
  std::size_t warmup_epochs = 3;
  std::size_t total_epochs = 10;
  std::size_t batch_size = 64;
  double weight_decay = 0.05;
  double lambda = 0.1;
  std::optional<std::size_t> reg_blocks;  // defaults from the model depth
  std::uint64_t seed = 0;
  Precision precision = Precision::kSingle;
  std::size_t probe_size = 32;        // held-out samples for per-epoch diagnostics
  std::size_t checkpoint_every = 0;   // epochs; 0 keeps only the final checkpoint
  std::size_t moving_average_window = 1;
  diag::Thresholds thresholds;

  // ConfigError on violated invariants (checked against the model depth).
  void validate(std::size_t num_blocks) const;
  // reg_blocks, or the 16/24/32-block defaults 4/8/12.
  std::size_t resolved_reg_blocks(std::size_t num_blocks) const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Linear ramp over warmup, then half-cosine to zero.
double lr_at(std::size_t step, const TrainConfig& config, std::size_t steps_per_epoch);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;  // at the last step of the epoch
  double train_loss = 0;
  double train_acc = 0;
  double eval_acc = 0;
  std::size_t similar_block_count = 0;
  std::vector<double> adj_ratios;
  diag::SimilarityReport report;

  // The JSON-lines record (report excluded).
  nlohmann::json to_json() const;
};

struct RunLog {
  diag::SimilarityReport initial_report;
  std::vector<EpochRecord> epochs;
  std::size_t steps = 0;
};

struct RunOutputs {
  // When set: log.jsonl, reports/, checkpoints/ are written here.
  std::optional<std::filesystem::path> directory;
  std::function<void(const EpochRecord&)> on_epoch;
};

// Top-1 accuracy; argmax ties go to the lowest class index.
template <typename T>
double accuracy(const Tensor<T>& logits, std::span<const std::size_t> labels);

template <typename T>
double evaluate(model::Model<T>& model, const Dataset& data, std::size_t batch_size = 64);

// Eval-mode forward over the first `count` samples, diagnostics report.
template <typename T>
diag::SimilarityReport probe_report(model::Model<T>& model, const Dataset& probe, std::size_t count,
                                    const diag::ReportOptions& options);

// Throws NumericalError (with the last good checkpoint, if any) when the
// loss or an activation becomes non-finite.
template <typename T>
RunLog train(model::Model<T>& model, const Dataset& train_data, const Dataset& eval_data, const TrainConfig& config,
             const RunOutputs& outputs = {});

}  // namespace reattn::train
