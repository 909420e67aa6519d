#include "reattn/diagnostics/similarity.hpp"

#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "reattn/error.hpp"

namespace reattn::diag {

using num::Shape;
using num::shape_str;

namespace {

struct Cosine {
  double value = 0.0;
  bool degenerate = false;
};

Cosine cosine(const double* a, const double* b, std::size_t n, std::size_t stride) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a[i * stride], y = b[i * stride];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 || nb == 0.0) return {0.0, true};
  return {std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0), false};
}

template <typename T>
std::vector<double> as_double(const Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

void check_map(const Shape& s, const char* what) {
  if (s.size() != 3 || s[1] != s[2]) {
    throw DimensionError(std::string(what) + " expects an [H, T, T] attention map, got " + shape_str(s));
  }
}

// Per-sample views of a rank-3 or rank-4 map.
template <typename T>
std::vector<Tensor<T>> samples_of(const Tensor<T>& maps) {
  if (maps.rank() == 3) return {maps};
  if (maps.rank() != 4) throw DimensionError("expected [H, T, T] or [N, H, T, T] maps, got " + shape_str(maps.shape()));
  std::vector<Tensor<T>> out;
  for (std::size_t n = 0; n < maps.dim(0); ++n) out.push_back(sample_map(maps, n));
  return out;
}

void check_threshold(double threshold, const char* name) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ParameterError(std::string(name) + " must lie in (0, 1), got " + std::to_string(threshold));
  }
}

// Batch-mean ratio and mean cosine for each adjacent pair.
template <typename T>
void adjacent_stats(const std::vector<Tensor<T>>& block_maps, double vector_threshold, std::vector<double>& ratios,
                    std::vector<double>* mean_cosines, std::size_t* zero_columns) {
  if (block_maps.size() < 2) {
    throw ParameterError("similar-block analysis needs at least 2 attention maps, got " +
                         std::to_string(block_maps.size()));
  }
  ratios.assign(block_maps.size() - 1, 0.0);
  if (mean_cosines) mean_cosines->assign(block_maps.size() - 1, 0.0);
  std::vector<Tensor<T>> prev = samples_of(block_maps[0]);
  for (std::size_t b = 1; b < block_maps.size(); ++b) {
    auto cur = samples_of(block_maps[b]);
    if (cur.size() != prev.size()) {
      throw DimensionError("block " + std::to_string(b) + " map batch size differs from block " + std::to_string(b - 1));
    }
    for (std::size_t n = 0; n < cur.size(); ++n) {
      auto m = cross_layer_similarity(prev[n], cur[n], {b - 1, b});
      ratios[b - 1] += similarity_ratio(m, vector_threshold);
      if (mean_cosines) (*mean_cosines)[b - 1] += m.mean();
      if (zero_columns) *zero_columns += m.zero_norm_columns;
    }
    ratios[b - 1] /= static_cast<double>(cur.size());
    if (mean_cosines) (*mean_cosines)[b - 1] /= static_cast<double>(cur.size());
    prev = std::move(cur);
  }
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double SimilarityMatrix::mean() const { return mean_of(values); }

template <typename T>
Tensor<T> sample_map(const Tensor<T>& maps, std::size_t n) {
  if (maps.rank() != 4 || n >= maps.dim(0)) {
    throw DimensionError("cannot take sample " + std::to_string(n) + " of maps " + shape_str(maps.shape()));
  }
  const std::size_t per = maps.numel() / maps.dim(0);
  std::vector<T> v(maps.data().begin() + n * per, maps.data().begin() + (n + 1) * per);
  return Tensor<T>({maps.dim(1), maps.dim(2), maps.dim(3)}, std::move(v));
}

template <typename T>
SimilarityMatrix cross_layer_similarity(const Tensor<T>& map_p, const Tensor<T>& map_q,
                                        std::pair<std::size_t, std::size_t> layer_pair) {
  check_map(map_p.shape(), "cross_layer_similarity");
  if (map_p.shape() != map_q.shape()) {
    throw DimensionError("cross_layer_similarity: maps " + shape_str(map_p.shape()) + " and " +
                         shape_str(map_q.shape()) + " differ in shape");
  }
  const std::size_t h = map_p.dim(0), t = map_p.dim(1);
  const auto p = as_double(map_p), q = as_double(map_q);
  SimilarityMatrix m{h, t, std::vector<double>(h * t), layer_pair, 0};
  for (std::size_t head = 0; head < h; ++head) {
    for (std::size_t col = 0; col < t; ++col) {
      const std::size_t base = head * t * t + col;
      const auto c = cosine(p.data() + base, q.data() + base, t, t);
      m.values[head * t + col] = c.value;
      m.zero_norm_columns += c.degenerate ? 1 : 0;
    }
  }
  return m;
}

double similarity_ratio(const SimilarityMatrix& m, double vector_threshold) {
  check_threshold(vector_threshold, "vector_threshold");
  if (m.values.empty()) return 0.0;
  std::size_t hits = 0;
  for (double v : m.values) hits += v > vector_threshold ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(m.values.size());
}

std::size_t count_from_ratios(const std::vector<double>& ratios, double block_threshold) {
  std::size_t count = 0;
  for (double r : ratios) count += r > block_threshold ? 1 : 0;
  return count;
}

template <typename T>
BlockCount count_similar_blocks(const std::vector<Tensor<T>>& block_maps, double vector_threshold,
                                double block_threshold) {
  BlockCount out;
  adjacent_stats(block_maps, vector_threshold, out.ratios, nullptr, nullptr);
  out.count = count_from_ratios(out.ratios, block_threshold);
  return out;
}

UniqueBlock last_unique_from_ratios(const std::vector<double>& ratios, double unique_threshold) {
  const std::size_t blocks = ratios.size() + 1;
  for (std::size_t b = blocks; b-- > 0;) {
    const bool below_next = b + 1 >= blocks || ratios[b] < unique_threshold;
    const bool below_prev = b == 0 || ratios[b - 1] < unique_threshold;
    if (below_next && below_prev) return {b, false};
  }
  return {blocks - 1, true};
}

template <typename T>
UniqueBlock find_last_unique_block(const std::vector<Tensor<T>>& block_maps, double vector_threshold,
                                   double unique_threshold) {
  std::vector<double> ratios;
  adjacent_stats(block_maps, vector_threshold, ratios, nullptr, nullptr);
  return last_unique_from_ratios(ratios, unique_threshold);
}

template <typename T>
CrossHead cross_head_similarity(const Tensor<T>& map, double vector_threshold) {
  check_threshold(vector_threshold, "vector_threshold");
  const auto samples = samples_of(map);
  check_map(samples.front().shape(), "cross_head_similarity");
  const std::size_t h = samples.front().dim(0), t = samples.front().dim(1);
  if (h < 2) throw ParameterError("cross-head similarity needs at least 2 heads, got " + std::to_string(h));
  CrossHead out{0.0, std::vector<double>(h * h, 0.0), h};
  for (const auto& s : samples) {
    const auto a = as_double(s);
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < h; ++j) {
        std::size_t hits = 0;
        for (std::size_t col = 0; col < t; ++col) {
          const auto c = cosine(a.data() + i * t * t + col, a.data() + j * t * t + col, t, t);
          hits += c.value > vector_threshold ? 1 : 0;
        }
        out.matrix[i * h + j] += static_cast<double>(hits) / static_cast<double>(t);
      }
    }
  }
  double off = 0;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < h; ++j) {
      out.matrix[i * h + j] /= static_cast<double>(samples.size());
      if (i != j) off += out.matrix[i * h + j];
    }
  }
  out.mean = off / static_cast<double>(h * (h - 1));
  return out;
}

template <typename T>
std::vector<double> feature_similarity(const std::vector<Tensor<T>>& block_features) {
  if (block_features.empty()) throw ParameterError("feature similarity needs at least one block");
  const auto& last = block_features.back();
  if (last.rank() < 2) throw DimensionError("features must be [N, T, D], got " + shape_str(last.shape()));
  const std::size_t n = last.dim(0), per = last.numel() / n;
  const auto ref = as_double(last);
  std::vector<double> out;
  for (const auto& f : block_features) {
    if (f.shape() != last.shape()) {
      throw DimensionError("feature shapes differ: " + shape_str(f.shape()) + " vs " + shape_str(last.shape()));
    }
    const auto x = as_double(f);
    double acc = 0;
    for (std::size_t s = 0; s < n; ++s) acc += cosine(x.data() + s * per, ref.data() + s * per, per, 1).value;
    out.push_back(acc / static_cast<double>(n));
  }
  return out;
}

std::vector<double> moving_average(const std::vector<double>& values, std::size_t window) {
  if (window <= 1) return values;
  const std::size_t half = window / 2;
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(values.size(), lo + window);
    double s = 0;
    for (std::size_t k = lo; k < hi; ++k) s += values[k];
    out[i] = s / static_cast<double>(hi - lo);
  }
  return out;
}

template <typename T>
SimilarityReport similarity_report(const std::vector<Tensor<T>>& block_maps,
                                   const std::vector<Tensor<T>>& block_features, const ReportOptions& options) {
  SimilarityReport r;
  r.thresholds = options.thresholds;
  r.num_blocks = block_maps.size();
  r.moving_average_window = std::max<std::size_t>(1, options.moving_average_window);
  if (block_maps.empty()) {
    r.warnings.push_back("model has no blocks");
    return r;
  }
  r.num_samples = block_maps.front().rank() == 4 ? block_maps.front().dim(0) : 1;
  if (block_maps.size() >= 2) {
    adjacent_stats(block_maps, r.thresholds.vector_threshold, r.adjacent_ratios, &r.adjacent_mean_cosine,
                   &r.zero_norm_columns);
    r.similar_block_count = count_from_ratios(r.adjacent_ratios, r.thresholds.block_threshold);
    const auto unique = last_unique_from_ratios(r.adjacent_ratios, r.thresholds.unique_threshold);
    r.last_unique_block = unique.index;
    r.unique_degenerate = unique.degenerate;
    if (unique.degenerate) r.warnings.push_back("no block is unique; last block used as the anchor");
  } else {
    r.unique_degenerate = true;
    r.warnings.push_back("single block: adjacent similarity undefined");
  }
  r.adjacent_ratios_smoothed = moving_average(r.adjacent_ratios, r.moving_average_window);
  const std::size_t heads = block_maps.front().dim(block_maps.front().rank() - 3);
  if (heads >= 2) {
    for (const auto& m : block_maps) r.cross_head_ratios.push_back(cross_head_similarity(m, r.thresholds.vector_threshold).mean);
  }
  if (!block_features.empty()) r.feature_similarities = feature_similarity(block_features);
  if (r.zero_norm_columns > 0) {
    r.warnings.push_back(std::to_string(r.zero_norm_columns) + " zero-norm attention columns scored as 0");
  }
  return r;
}

double SimilarityReport::mean_adjacent_ratio() const { return mean_of(adjacent_ratios); }
double SimilarityReport::mean_adjacent_cosine() const { return mean_of(adjacent_mean_cosine); }

nlohmann::json SimilarityReport::to_json() const {
  return {{"thresholds",
           {{"vector_threshold", thresholds.vector_threshold},
            {"block_threshold", thresholds.block_threshold},
            {"unique_threshold", thresholds.unique_threshold}}},
          {"num_blocks", num_blocks},
          {"num_samples", num_samples},
          {"adjacent_ratios", adjacent_ratios},
          {"adjacent_ratios_smoothed", adjacent_ratios_smoothed},
          {"moving_average_window", moving_average_window},
          {"adjacent_mean_cosine", adjacent_mean_cosine},
          {"similar_block_count", similar_block_count},
          {"last_unique_block", last_unique_block},
          {"unique_degenerate", unique_degenerate},
          {"cross_head_ratios", cross_head_ratios},
          {"feature_similarities", feature_similarities},
          {"zero_norm_columns", zero_norm_columns},
          {"warnings", warnings}};
}

std::string SimilarityReport::to_csv() const {
  std::ostringstream out;
  out << std::setprecision(10);
  out << "block,adj_ratio,feature_sim,cross_head_mean\n";
  for (std::size_t b = 0; b < num_blocks; ++b) {
    out << b << ',';
    if (b > 0 && b - 1 < adjacent_ratios.size()) out << adjacent_ratios[b - 1];
    out << ',';
    if (b < feature_similarities.size()) out << feature_similarities[b];
    out << ',';
    if (b < cross_head_ratios.size()) out << cross_head_ratios[b];
    out << '\n';
  }
  return out.str();
}

#define REATTN_INSTANTIATE_DIAG(T)                                                                                \
  template Tensor<T> sample_map(const Tensor<T>&, std::size_t);                                                   \
  template SimilarityMatrix cross_layer_similarity(const Tensor<T>&, const Tensor<T>&,                            \
                                                   std::pair<std::size_t, std::size_t>);                          \
  template BlockCount count_similar_blocks(const std::vector<Tensor<T>>&, double, double);                        \
  template UniqueBlock find_last_unique_block(const std::vector<Tensor<T>>&, double, double);                     \
  template CrossHead cross_head_similarity(const Tensor<T>&, double);                                             \
  template std::vector<double> feature_similarity(const std::vector<Tensor<T>>&);                                 \
  template SimilarityReport similarity_report(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&,       \
                                              const ReportOptions&);

REATTN_INSTANTIATE_DIAG(float)
REATTN_INSTANTIATE_DIAG(double)

}  // namespace reattn::diag
