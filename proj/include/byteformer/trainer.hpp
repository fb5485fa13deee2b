#pragma once

// AdamW with linear warmup and cosine decay, EMA shadow weights, and top-1
// evaluation with a confusion matrix.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "byteformer/dataset.hpp"
#include "byteformer/errors.hpp"
#include "byteformer/model.hpp"
#include "byteformer/random.hpp"
#include "byteformer/tensor.hpp"

namespace byteformer {

struct TrainConfig {
  double lr_max = 1e-3;
  double lr_min = 2e-5;
  double weight_decay = 0.05;
  std::size_t warmup_iters = 100;
  std::size_t total_iters = 1000;
  std::size_t batch_size = 32;
  double ema_momentum = 1e-4;
  bool ema_enabled = false;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t eval_every = 0;  // 0: evaluate only at the end
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr_min > 0 && lr_min <= lr_max)) throw ConfigError("train.lr_min must satisfy 0 < lr_min <= lr_max");
    if (warmup_iters > total_iters) throw ConfigError("train.warmup_iters exceeds train.total_iters");
    if (total_iters == 0) throw ConfigError("train.total_iters must be >= 1");
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
    if (ema_momentum < 0 || ema_momentum > 1) throw ConfigError("train.ema_momentum must be in [0, 1]");
  }
};

// Linear warmup from 0 to lr_max, then cosine annealing to lr_min at total_iters.
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (step < cfg.warmup_iters) return cfg.lr_max * static_cast<double>(step) / static_cast<double>(cfg.warmup_iters);
  if (step >= cfg.total_iters) return cfg.lr_min;
  if (step == cfg.warmup_iters) return cfg.lr_max;
  const double span = static_cast<double>(cfg.total_iters - cfg.warmup_iters);
  const double progress = static_cast<double>(step - cfg.warmup_iters) / span;
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

// First and second moments, one buffer per parameter in named() order.
template <typename T>
struct AdamMoments {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  static AdamMoments zeros_like(std::span<const NamedParam<T>> params) {
    AdamMoments out;
    for (const auto& p : params) {
      out.m.emplace_back(p.tensor.size(), T(0));
      out.v.emplace_back(p.tensor.size(), T(0));
    }
    return out;
  }
};

// One AdamW update with decoupled weight decay. `step` counts from 1.
template <typename T>
void adamw_update(std::span<const NamedParam<T>> params, AdamMoments<T>& moments, std::size_t step, double lr,
                  const TrainConfig& cfg) {
  if (moments.m.size() != params.size()) throw ShapeError("optimizer state does not match parameters");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> tensor = params[i].tensor;
    auto values = tensor.data();
    const auto grad = std::as_const(tensor).grad();
    auto& m = moments.m[i];
    auto& v = moments.v[i];
    if (m.size() != values.size()) throw ShapeError("moment shape mismatch for " + params[i].name);
    const double decay = params[i].decay ? cfg.weight_decay : 0.0;
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]);
      m[j] = static_cast<T>(cfg.beta1 * m[j] + (1 - cfg.beta1) * g);
      v[j] = static_cast<T>(cfg.beta2 * v[j] + (1 - cfg.beta2) * g * g);
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.adam_eps);
      values[j] = static_cast<T>(values[j] - lr * (update + decay * values[j]));
    }
  }
}

// shadow <- (1 - m) shadow + m param
template <typename T>
void ema_update(std::span<const NamedParam<T>> shadow, std::span<const NamedParam<T>> params, double momentum) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> target = shadow[i].tensor;
    auto s = target.data();
    auto p = params[i].tensor.data();
    for (std::size_t j = 0; j < s.size(); ++j) s[j] = static_cast<T>((1 - momentum) * s[j] + momentum * p[j]);
  }
}

template <typename T>
struct TrainState {
  ByteFormerParams<T> params;
  AdamMoments<T> moments;
  ByteFormerParams<T> ema;  // empty unless EMA is enabled
  std::size_t step = 0;

  bool has_ema() const { return ema.token_embedding.defined(); }
  // Weights used for evaluation: the EMA shadow when kept, else the live parameters.
  const ByteFormerParams<T>& eval_params() const { return has_ema() ? ema : params; }
};

template <typename T>
TrainState<T> make_train_state(const ByteFormerConfig& model_cfg, const TrainConfig& cfg) {
  TrainState<T> state;
  state.params = init_params<T>(model_cfg, mix_seed({cfg.seed, 0x696e6974ull}), true);
  const auto named = state.params.named();
  state.moments = AdamMoments<T>::zeros_like(named);
  if (cfg.ema_enabled) state.ema = clone_params(model_cfg, state.params, false);
  return state;
}

// Forward, cross-entropy, backward, AdamW, EMA. Returns the pre-update loss.
template <typename T>
double train_step(TrainState<T>& state, const Batch& batch, const ByteFormerConfig& model_cfg, const TrainConfig& cfg) {
  state.params.zero_grad();
  Tensor<T> loss = softmax_cross_entropy(forward(batch, state.params, model_cfg), batch.labels);
  const double value = static_cast<double>(loss.item());
  if (!std::isfinite(value)) {
    throw NumericError("non-finite loss " + std::to_string(value) + " at step " + std::to_string(state.step));
  }
  backward(loss, true);
  state.step += 1;
  const auto named = state.params.named();
  adamw_update<T>(named, state.moments, state.step, lr_at(state.step - 1, cfg), cfg);
  if (state.has_ema()) ema_update<T>(state.ema.named(), named, cfg.ema_momentum);
  return value;
}

struct EvalMetrics {
  std::size_t count = 0;
  std::size_t correct = 0;
  double loss = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]

  double top1() const { return count ? static_cast<double>(correct) / static_cast<double>(count) : 0.0; }
  double class_accuracy(std::size_t c) const {
    const auto total = std::accumulate(confusion[c].begin(), confusion[c].end(), std::size_t{0});
    return total ? static_cast<double>(confusion[c][c]) / static_cast<double>(total) : 0.0;
  }
};

// Accumulates a [B, C] logit block into the metrics. Ties go to the lowest class.
template <typename T>
void accumulate_metrics(EvalMetrics& metrics, std::span<const T> logits, std::span<const int> labels,
                        std::size_t num_classes) {
  if (logits.size() != labels.size() * num_classes) throw ShapeError("logit block does not match labels");
  if (metrics.confusion.empty()) metrics.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const T* row = logits.data() + b * num_classes;
    const auto pred = static_cast<std::size_t>(std::max_element(row, row + num_classes) - row);
    const auto label = static_cast<std::size_t>(labels[b]);
    if (label >= num_classes) throw IndexError("label " + std::to_string(labels[b]) + " outside logits");
    const double top = static_cast<double>(*std::max_element(row, row + num_classes));
    double sum = 0;
    for (std::size_t c = 0; c < num_classes; ++c) sum += std::exp(static_cast<double>(row[c]) - top);
    metrics.loss += top + std::log(sum) - static_cast<double>(row[label]);
    metrics.confusion[label][pred] += 1;
    metrics.correct += pred == label;
    metrics.count += 1;
  }
}

struct EvalOptions {
  std::size_t batch_size = 32;
  std::size_t max_input_bytes = 1 << 20;
  std::uint64_t seed = 0;
};

// Top-1 and mean loss over every sample of the source, rendered in eval mode.
template <typename T>
EvalMetrics evaluate(const ByteFormerParams<T>& params, const DataSource& source, const Pipeline& pipeline,
                     const ByteFormerConfig& model_cfg, const EvalOptions& opts) {
  if (source.size() == 0) throw DataError("cannot evaluate an empty dataset");
  EvalMetrics metrics;
  for (std::size_t start = 0; start < source.size(); start += opts.batch_size) {
    std::vector<LabeledBytes> samples;
    for (std::size_t i = start; i < std::min(source.size(), start + opts.batch_size); ++i) {
      samples.push_back(render_sample(source, pipeline, i, false, opts.seed, 0));
    }
    const Batch batch = collate(samples, opts.max_input_bytes);
    const Tensor<T> logits = forward(batch, params, model_cfg);
    accumulate_metrics<T>(metrics, logits.data(), batch.labels, model_cfg.num_classes);
  }
  metrics.loss /= static_cast<double>(metrics.count);
  return metrics;
}

// Sample indices for a training step: a pure function of (seed, step), so a
// resumed run draws exactly the batches the uninterrupted run would have.
inline std::vector<std::size_t> batch_indices(std::size_t step, std::size_t batch_size, std::size_t dataset_size,
                                              std::uint64_t seed, std::uint64_t* epoch_out = nullptr) {
  std::vector<std::size_t> out;
  std::uint64_t cached_epoch = ~0ull;
  std::vector<std::size_t> order;
  for (std::size_t k = 0; k < batch_size; ++k) {
    const std::size_t pos = step * batch_size + k;
    const std::uint64_t epoch = pos / dataset_size;
    if (epoch != cached_epoch) {
      order.resize(dataset_size);
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(mix_seed({seed, epoch, 0x6f72646572ull}));
      for (std::size_t i = dataset_size - 1; i > 0; --i) std::swap(order[i], order[bounded(rng, i + 1)]);
      cached_epoch = epoch;
    }
    if (k == 0 && epoch_out) *epoch_out = epoch;
    out.push_back(order[pos % dataset_size]);
  }
  return out;
}

template <typename T>
Batch training_batch(const TrainState<T>& state, const DataSource& source, const Pipeline& pipeline,
                     const TrainConfig& cfg, std::size_t max_input_bytes) {
  if (source.size() == 0) throw DataError("training set is empty");
  std::uint64_t epoch = 0;
  const auto indices = batch_indices(state.step, cfg.batch_size, source.size(), cfg.seed, &epoch);
  std::vector<LabeledBytes> samples;
  samples.reserve(indices.size());
  for (auto i : indices) samples.push_back(render_sample(source, pipeline, i, true, cfg.seed, epoch));
  return collate(samples, max_input_bytes);
}

struct StepRecord {
  std::size_t step = 0;
  double loss = 0;
  double lr = 0;
};

struct EvalRecord {
  std::size_t step = 0;
  EvalMetrics metrics;
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EvalRecord&)> on_eval;
};

// Runs from state.step to cfg.total_iters, evaluating every eval_every steps
// and once at the end. Returns the final evaluation.
template <typename T>
EvalMetrics train(TrainState<T>& state, const DataSource& train_set, const DataSource& val_set,
                  const Pipeline& train_pipeline, const Pipeline& val_pipeline, const ByteFormerConfig& model_cfg,
                  const TrainConfig& cfg, std::size_t max_input_bytes, const TrainHooks& hooks = {}) {
  cfg.validate();
  model_cfg.validate();
  const EvalOptions eval_opts{cfg.batch_size, max_input_bytes, cfg.seed};
  while (state.step < cfg.total_iters) {
    const double lr = lr_at(state.step, cfg);
    const Batch batch = training_batch(state, train_set, train_pipeline, cfg, max_input_bytes);
    const double loss = train_step(state, batch, model_cfg, cfg);
    if (hooks.on_step) hooks.on_step({state.step, loss, lr});
    if (cfg.eval_every && state.step % cfg.eval_every == 0 && state.step < cfg.total_iters && hooks.on_eval) {
      hooks.on_eval({state.step, evaluate(state.eval_params(), val_set, val_pipeline, model_cfg, eval_opts)});
    }
  }
  EvalMetrics final_metrics = evaluate(state.eval_params(), val_set, val_pipeline, model_cfg, eval_opts);
  if (hooks.on_eval) hooks.on_eval({state.step, final_metrics});
  return final_metrics;
}

}  // namespace byteformer
