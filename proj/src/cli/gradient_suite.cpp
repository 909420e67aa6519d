#include "reattn/cli/gradient_suite.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "reattn/attention/attention.hpp"
#include "reattn/error.hpp"
#include "reattn/model/model.hpp"
#include "reattn/training/data.hpp"
#include "reattn/training/training.hpp"

namespace reattn::cli {

namespace {

using TD = num::Tensor<double>;
using num::NamedTensor;
using num::Tape;

TD random_tensor(std::mt19937_64& rng, num::Shape shape, double scale = 0.5) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return TD(std::move(shape), std::move(v), true);
}

attn::Linear<double> random_linear(std::mt19937_64& rng, std::size_t in, std::size_t out) {
  return {random_tensor(rng, {in, out}), random_tensor(rng, {out})};
}

TD random_maps(std::mt19937_64& rng, std::size_t n, std::size_t h, std::size_t t) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::vector<double> v(n * h * t * t);
  for (std::size_t r = 0; r < n * h * t; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < t; ++c) sum += v[r * t + c] = u(rng);
    for (std::size_t c = 0; c < t; ++c) v[r * t + c] /= sum;
  }
  return TD({n, h, t, t}, std::move(v), true);
}

std::vector<GradientCase> attention_cases(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t n = 2, t = 3, d = 4, h = 2;
  auto x = random_tensor(rng, {n, t, d}, 1.0);
  attn::ProjectionWeights<double> w{random_linear(rng, d, d), random_linear(rng, d, d), random_linear(rng, d, d)};
  auto proj = random_linear(rng, d, d);
  std::mt19937_64 init(seed + 1);
  auto theta = attn::init_theta<double>(h, init);
  for (auto& v : theta.mutable_data()) v += std::uniform_real_distribution<double>(-0.2, 0.2)(rng);
  // the key bias only shifts softmax rows, its gradient is identically zero
  const std::vector<NamedTensor> base{{"x", x},
                                      {"query.weight", w.query.weight},
                                      {"query.bias", w.query.bias},
                                      {"key.weight", w.key.weight},
                                      {"value.weight", w.value.weight},
                                      {"value.bias", w.value.bias},
                                      {"out.weight", proj.weight},
                                      {"out.bias", proj.bias}};
  auto with = [&](std::vector<NamedTensor> extra) {
    auto p = base;
    p.insert(p.end(), extra.begin(), extra.end());
    return p;
  };

  std::vector<GradientCase> out;
  out.push_back({"attention", "mhsa", num::grad_check(
                                          [&](Tape<double>& tp) {
                                            auto qkv = attn::qkv_project(tp, x, w, h);
                                            return attn::mhsa(tp, qkv.q, qkv.k, qkv.v, 1.0, &proj).out;
                                          },
                                          base)});
  out.push_back({"attention", "temperature fixed", num::grad_check(
                                                       [&](Tape<double>& tp) {
                                                         auto qkv = attn::qkv_project(tp, x, w, h);
                                                         return attn::mhsa(tp, qkv.q, qkv.k, qkv.v, 0.6, &proj).out;
                                                       },
                                                       base)});
  auto log_tau = TD({1}, {std::log(0.8)}, true);
  out.push_back({"attention", "temperature learnable",
                 num::grad_check(
                     [&](Tape<double>& tp) {
                       auto qkv = attn::qkv_project(tp, x, w, h);
                       return attn::mhsa(tp, qkv.q, qkv.k, qkv.v, 1.0, &proj, &log_tau).out;
                     },
                     with({{"log_tau", log_tau}}))});
  for (auto mode : {attn::NormMode::kBatch, attn::NormMode::kPerSample, attn::NormMode::kIdentity}) {
    attn::HeadNorm<double> norm(mode, h);
    std::vector<NamedTensor> extra{{"theta", theta}};
    if (norm.has_affine()) {
      // a zero shift makes normalized rows sum to zero and hides the value bias
      for (auto& v : norm.normalization().shift().mutable_data()) v = 0.3;
      extra.push_back({"norm.scale", norm.normalization().scale()});
      extra.push_back({"norm.shift", norm.normalization().shift()});
    }
    out.push_back({"attention", "re-attention " + attn::to_string(mode) + " norm",
                   num::grad_check(
                       [&](Tape<double>& tp) {
                         auto qkv = attn::qkv_project(tp, x, w, h);
                         return attn::re_attention(tp, qkv.q, qkv.k, qkv.v, theta, norm, true, &proj).out;
                       },
                       with(extra))});
  }
  std::mt19937_64 mask_rng(seed + 2);
  const auto mask = attn::sample_drop_mask<double>({n, h, t, t}, 0.3, mask_rng);
  out.push_back({"attention", "drop-attention", num::grad_check(
                                                    [&](Tape<double>& tp) {
                                                      auto qkv = attn::qkv_project(tp, x, w, h);
                                                      return attn::drop_attention(tp, qkv.q, qkv.k, qkv.v, 0.3, mask,
                                                                                  &proj)
                                                          .out;
                                                    },
                                                    base)});
  attn::HeadNorm<double> shared_norm(attn::NormMode::kPerSample, h);
  auto shared_map = random_maps(rng, n, h, t);
  out.push_back({"attention", "shared attention",
                 num::grad_check(
                     [&](Tape<double>& tp) {
                       return attn::shared_attention_forward(tp, x, shared_map, theta, shared_norm, w.value, true,
                                                             &proj)
                           .out;
                     },
                     {{"x", x},
                      {"map", shared_map},
                      {"theta", theta},
                      {"value.weight", w.value.weight},
                      {"value.bias", w.value.bias},
                      {"out.weight", proj.weight},
                      {"norm.scale", shared_norm.normalization().scale()},
                      {"norm.shift", shared_norm.normalization().shift()}})});
  return out;
}

struct TinyBatch {
  TD images;
  std::vector<std::size_t> labels;
};

TinyBatch tiny_batch(std::uint64_t seed) {
  train::SyntheticSpec spec{3, 4, 1, 3, 0.3, seed};
  const auto data = train::make_synthetic(spec);
  const std::size_t idx[] = {0, 1, 2};
  return {data.images<double>(idx), data.labels_of(idx)};
}

// Parameters jittered away from init so no entry sits at a special point.
std::vector<NamedTensor> jittered_inputs(model::Model<double>& m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  std::vector<NamedTensor> inputs;
  for (auto& p : m.parameters()) {
    for (auto& x : p.tensor.mutable_data()) x += u(rng);
    if (!p.name.ends_with("attn.key.bias")) inputs.push_back({p.name, p.tensor});
  }
  return inputs;
}

model::ModelConfig tiny_model(std::vector<attn::AttentionVariantConfig> variants) {
  auto c = model::ModelConfig::uniform("gradcheck", variants.size(), 4, 2, 6, 4, 2, 3, {}, 1);
  c.block_variants = std::move(variants);
  return c;
}

std::vector<GradientCase> model_cases(std::uint64_t seed) {
  using V = attn::AttentionVariantConfig;
  const std::vector<std::pair<std::string, model::ModelConfig>> configs{
      {"vanilla model", tiny_model({V::vanilla(), V::vanilla()})},
      {"re-attention model", tiny_model({V::re_attention(), V::re_attention()})},
      {"learnable temperature model", tiny_model({V::learnable_temperature(0.9), V::learnable_temperature(1.1)})},
      {"shared attention model", [] {
         auto c = tiny_model({V::vanilla(), V::vanilla(), V::vanilla()});
         model::apply_sharing(c, 0, attn::NormMode::kPerSample);
         return c;
       }()}};
  const auto batch = tiny_batch(seed);
  std::vector<GradientCase> out;
  std::mt19937_64 rng(seed);
  for (const auto& [name, config] : configs) {
    auto m = model::Model<double>::build(config, seed);
    auto inputs = jittered_inputs(m, rng);
    out.push_back({"model", name, num::grad_check(
                                      [&](Tape<double>& tp) {
                                        auto tr = m.forward(tp, batch.images, {true, 0});
                                        return train::cross_entropy(tp, tr.logits, batch.labels);
                                      },
                                      inputs)});
  }
  return out;
}

std::vector<GradientCase> loss_cases(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradientCase> out;
  auto logits = random_tensor(rng, {4, 3}, 2.0);
  const std::vector<std::size_t> labels{0, 2, 1, 2};
  out.push_back({"loss", "cross entropy", num::grad_check(
                                              [&](Tape<double>& tp) {
                                                return train::cross_entropy(tp, logits, labels);
                                              },
                                              {{"logits", logits}})});
  std::vector<TD> maps;
  std::vector<NamedTensor> inputs{{"logits", logits}};
  for (int b = 0; b < 3; ++b) {
    maps.push_back(random_maps(rng, 4, 2, 3));
    inputs.push_back({"maps." + std::to_string(b), maps.back()});
  }
  out.push_back({"loss", "similarity regularizer", num::grad_check(
                                                       [&](Tape<double>& tp) {
                                                         return train::similarity_regularized_loss(tp, logits, labels,
                                                                                                   maps, 0.7, 1);
                                                       },
                                                       inputs)});
  using V = attn::AttentionVariantConfig;
  auto m = model::Model<double>::build(tiny_model({V::re_attention(), V::vanilla(), V::re_attention()}), seed);
  auto params = jittered_inputs(m, rng);
  const auto batch = tiny_batch(seed);
  out.push_back({"loss", "regularized loss through model",
                 num::grad_check(
                     [&](Tape<double>& tp) {
                       auto tr = m.forward(tp, batch.images, {true, 0});
                       return train::similarity_regularized_loss(tp, tr.logits, batch.labels, tr.block_maps, 0.7, 1);
                     },
                     params)});
  return out;
}

}  // namespace

const std::vector<std::string>& gradient_modules() {
  static const std::vector<std::string> modules{"attention", "model", "loss"};
  return modules;
}

std::vector<GradientCase> run_gradient_suite(const std::string& module, std::uint64_t seed) {
  const auto& all = gradient_modules();
  if (!module.empty() && std::find(all.begin(), all.end(), module) == all.end()) {
    throw ParameterError("unknown gradcheck module '" + module + "' (expected attention, model or loss)");
  }
  std::vector<GradientCase> out;
  auto append = [&](std::vector<GradientCase> cases) {
    for (auto& c : cases) out.push_back(std::move(c));
  };
  if (module.empty() || module == "attention") append(attention_cases(seed));
  if (module.empty() || module == "model") append(model_cases(seed));
  if (module.empty() || module == "loss") append(loss_cases(seed));
  return out;
}

}  // namespace reattn::cli
