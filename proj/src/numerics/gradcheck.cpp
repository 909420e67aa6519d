#include "reattn/numerics/gradcheck.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "reattn/error.hpp"
#include "reattn/numerics/ops.hpp"

namespace reattn::num {
namespace {

class ScalarProbe {
 public:
  ScalarProbe(const CheckedFunction& fn, std::uint64_t seed) : fn_(fn), seed_(seed) {}

  Tensor<double> build(Tape<double>& tape) {
    Tensor<double> out = fn_(tape);
    if (out.numel() == 1) return out;
    if (!weights_.defined() || weights_.shape() != out.shape()) {
      std::mt19937_64 rng(seed_);
      std::uniform_real_distribution<double> dist(-1.0, 1.0);
      std::vector<double> w(out.numel());
      for (auto& v : w) v = dist(rng);
      weights_ = Tensor<double>(out.shape(), std::move(w));
    }
    return sum(tape, mul(tape, out, weights_));
  }

  double value() {
    Tape<double> tape(false);
    return build(tape).item();
  }

 private:
  const CheckedFunction& fn_;
  std::uint64_t seed_;
  Tensor<double> weights_;
};

}  // namespace

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
  return worst;
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os.precision(3);
  for (const auto& e : entries) {
    os << "  " << e.name << ": max rel err " << std::scientific << e.max_rel_error << " (index "
       << e.worst_index << ", analytic " << e.analytic << ", numeric " << e.numeric << ")\n";
  }
  return os.str();
}

GradCheckReport grad_check(const CheckedFunction& fn, std::vector<NamedTensor> inputs,
                           const GradCheckOptions& options) {
  ScalarProbe probe(fn, options.projection_seed);
  for (auto& in : inputs) in.tensor.set_requires_grad(true);

  const double base_a = probe.value();
  const double base_b = probe.value();
  if (base_a != base_b || !std::isfinite(base_a)) {
    throw CheckInvalidError("checked function is not deterministic (" + std::to_string(base_a) +
                            " vs " + std::to_string(base_b) + ")");
  }

  Tape<double> tape;
  Tensor<double> loss = probe.build(tape);
  tape.backward(loss);

  GradCheckReport report;
  const double h = options.step;
  for (auto& in : inputs) {
    GradCheckEntry entry;
    entry.name = in.name;
    std::vector<double> analytic(in.tensor.numel(), 0.0);
    if (in.tensor.has_grad()) {
      analytic.assign(in.tensor.grad().begin(), in.tensor.grad().end());
    }
    auto values = in.tensor.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = probe.value();
      values[i] = saved - h;
      const double down = probe.value();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double rel = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + std::abs(numeric) + 1e-8);
      if (rel > entry.max_rel_error || i == 0) {
        entry.max_rel_error = std::max(entry.max_rel_error, rel);
        entry.worst_index = i;
        entry.analytic = analytic[i];
        entry.numeric = numeric;
      }
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace reattn::num
