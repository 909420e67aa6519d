#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "reattn/numerics/tensor.hpp"

// Collapse diagnostics over attention maps. Single-sample maps are [H, T, T]
// (head, output token, input token); batched maps are [N, H, T, T]. Column t
// of a head is the contribution of input token t to every output token.
namespace reattn::diag {

using num::Tensor;

struct Thresholds {
  double vector_threshold = 0.5;  // a (head, token) column pair counts as similar above this cosine
  double block_threshold = 0.8;   // a block is similar when its ratio exceeds this
  double unique_threshold = 0.9;  // a block is unique when its ratios stay below this

  bool operator==(const Thresholds&) const = default;
};

struct SimilarityMatrix {
  std::size_t heads = 0;
  std::size_t tokens = 0;
  std::vector<double> values;  // [H, T] row-major
  std::pair<std::size_t, std::size_t> layer_pair{0, 0};
  // (h, t) entries where a column had zero norm; their value is 0
  std::size_t zero_norm_columns = 0;

  double at(std::size_t h, std::size_t t) const { return values[h * tokens + t]; }
  double mean() const;
};

template <typename T>
SimilarityMatrix cross_layer_similarity(const Tensor<T>& map_p, const Tensor<T>& map_q,
                                        std::pair<std::size_t, std::size_t> layer_pair = {0, 1});

// Fraction of entries strictly above the threshold; threshold in (0, 1).
double similarity_ratio(const SimilarityMatrix& m, double vector_threshold);

struct BlockCount {
  std::size_t count = 0;
  std::vector<double> ratios;  // ratios[b - 1] compares blocks b - 1 and b
};

template <typename T>
BlockCount count_similar_blocks(const std::vector<Tensor<T>>& block_maps, double vector_threshold = 0.5,
                                double block_threshold = 0.8);
std::size_t count_from_ratios(const std::vector<double>& ratios, double block_threshold);

struct UniqueBlock {
  std::size_t index = 0;
  bool degenerate = false;  // nothing qualified; index is the last block
};

template <typename T>
UniqueBlock find_last_unique_block(const std::vector<Tensor<T>>& block_maps, double vector_threshold = 0.5,
                                   double unique_threshold = 0.9);
// `ratios` as in BlockCount; describes ratios.size() + 1 blocks.
UniqueBlock last_unique_from_ratios(const std::vector<double>& ratios, double unique_threshold);

struct CrossHead {
  double mean = 0.0;           // over ordered pairs h != h'
  std::vector<double> matrix;  // [H, H]
  std::size_t heads = 0;
};

template <typename T>
CrossHead cross_head_similarity(const Tensor<T>& map, double vector_threshold = 0.5);

// features: B tensors [N, T, D]. Entry b is the cosine between flattened
// block-b and last-block features, averaged over the batch.
template <typename T>
std::vector<double> feature_similarity(const std::vector<Tensor<T>>& block_features);

// [N, H, T, T] -> sample n as [H, T, T]
template <typename T>
Tensor<T> sample_map(const Tensor<T>& maps, std::size_t n);

struct ReportOptions {
  Thresholds thresholds;
  std::size_t moving_average_window = 1;  // centered window over adjacent ratios
};

struct SimilarityReport {
  Thresholds thresholds;
  std::size_t num_blocks = 0;
  std::size_t num_samples = 0;
  std::vector<double> adjacent_ratios;           // B - 1, batch means
  std::vector<double> adjacent_ratios_smoothed;  // moving average of adjacent_ratios
  std::size_t moving_average_window = 1;
  std::vector<double> adjacent_mean_cosine;  // B - 1, mean cross-layer cosine
  std::size_t similar_block_count = 0;
  std::size_t last_unique_block = 0;
  bool unique_degenerate = false;
  std::vector<double> cross_head_ratios;  // B, empty for single-head models
  std::vector<double> feature_similarities;
  std::size_t zero_norm_columns = 0;
  std::vector<std::string> warnings;

  double mean_adjacent_ratio() const;
  double mean_adjacent_cosine() const;
  nlohmann::json to_json() const;
  // block, adj_ratio, feature_sim, cross_head_mean
  std::string to_csv() const;
};

// Every per-pair quantity is computed per sample, then averaged over the
// batch; counts and the unique block derive from the averaged ratios.
template <typename T>
SimilarityReport similarity_report(const std::vector<Tensor<T>>& block_maps,
                                   const std::vector<Tensor<T>>& block_features, const ReportOptions& options = {});

std::vector<double> moving_average(const std::vector<double>& values, std::size_t window);

}  // namespace reattn::diag
