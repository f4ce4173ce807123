#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "brunet/checkpoint.hpp"
#include "brunet/datapipe.hpp"
#include "brunet/model.hpp"
#include "brunet/parallel.hpp"

namespace brunet {

// -- losses ---------------------------------------------------------------------------------

template <class T>
struct LossResult {
  double value = 0.0;
  Tensor<T> grad;  // d(loss)/d(pred)
};

template <class T>
LossResult<T> loss_mse(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require_same_shape(pred, target, "loss_mse");
  const double n = static_cast<double>(pred.size());
  LossResult<T> r{0.0, Tensor<T>(pred.shape())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    r.value += d * d;
    r.grad[i] = static_cast<T>(2.0 * d / n);
  }
  r.value /= n;
  return r;
}

inline constexpr double kBceEpsilon = 1e-7;

/// Mean binary cross-entropy with predictions clipped to [eps, 1 - eps]; the gradient is zero where clipping is active.
template <class T>
LossResult<T> loss_bce(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require_same_shape(pred, target, "loss_bce");
  const double n = static_cast<double>(pred.size());
  LossResult<T> r{0.0, Tensor<T>(pred.shape())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double raw = pred[i];
    const double p = std::clamp(raw, kBceEpsilon, 1.0 - kBceEpsilon);
    const double t = target[i];
    r.value -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    const bool clipped = raw < kBceEpsilon || raw > 1.0 - kBceEpsilon;
    r.grad[i] = clipped ? T(0) : static_cast<T>((p - t) / (p * (1.0 - p)) / n);
  }
  r.value /= n;
  return r;
}

enum class LossKind { mse, bce };

template <class T>
LossResult<T> compute_loss(LossKind kind, const Tensor<T>& pred, const Tensor<T>& target) {
  return kind == LossKind::mse ? loss_mse(pred, target) : loss_bce(pred, target);
}

// -- Adam -------------------------------------------------------------------------------------

template <class T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;

  AdamState() = default;
  explicit AdamState(const ParamStore<T>& params) {
    for (const auto& e : params) {
      m.emplace_back(e.shape);
      v.emplace_back(e.shape);
    }
  }
};

template <class T>
void adam_step(ParamStore<T>& params, const Grads<T>& grads, AdamState<T>& st, double lr) {
  if (grads.size() != params.size() || st.m.size() != params.size())
    throw InvalidArgument("adam_step: parameter, gradient and state counts differ");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = params.mutable_value(i);
    const Tensor<T>& g = grads[i];
    if (!(p.shape() == g.shape()) || !(st.m[i].shape() == p.shape()))
      throw InvalidArgument("adam_step: shape mismatch for '" + params.entry(i).name + "'");
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k];
      const double mk = st.beta1 * static_cast<double>(st.m[i][k]) + (1.0 - st.beta1) * gk;
      const double vk = st.beta2 * static_cast<double>(st.v[i][k]) + (1.0 - st.beta2) * gk * gk;
      st.m[i][k] = static_cast<T>(mk);
      st.v[i][k] = static_cast<T>(vk);
      const double update = lr * (mk / c1) / (std::sqrt(vk / c2) + st.epsilon);
      p[k] = static_cast<T>(static_cast<double>(p[k]) - update);
    }
  }
}

// -- training loop ------------------------------------------------------------------------------

struct TrainConfig {
  LossKind loss = LossKind::mse;
  double learning_rate = 1e-4;
  std::size_t batch_size = 2;
  std::size_t max_epochs = 1;
  double dropout_rate = 0.5;
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint_path;  // empty: keep the best parameters in memory only

  static TrainConfig precipitation() { return {LossKind::mse, 1e-4, 2, 1, 0.5, 0, {}}; }
  static TrainConfig cloud() { return {LossKind::bce, 1e-3, 8, 1, 0.5, 0, {}}; }

  void validate() const {
    if (!(learning_rate >= 0.0)) throw InvalidArgument("learning rate must be >= 0");
    if (batch_size < 1 || max_epochs < 1) throw InvalidArgument("batch size and epochs must be >= 1");
    check_dropout_rate(dropout_rate);
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

template <class T>
struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<Tensor<T>> best_params;
};

template <class T>
Tensor<T> as_type(const Tensor<float>& x) {
  if constexpr (std::is_same_v<T, float>) return x;
  else return x.template cast<T>();
}

template <class T>
double sample_loss(const Model<T>& m, const Sample& s, LossKind kind) {
  auto ctx = Context<T>::inference();
  return compute_loss(kind, m.forward(as_type<T>(s.input), ctx), as_type<T>(s.target)).value;
}

template <class T>
double mean_loss(const Model<T>& m, const SampleSet& set, LossKind kind) {
  std::vector<double> losses(set.size());
  parallel_for(set.size(), std::size_t{1} << 20, [&](std::size_t i) { losses[i] = sample_loss(m, set.samples[i], kind); });
  return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(set.size());
}

template <class T>
void check_sample_shapes(const Model<T>& m, const SampleSet& set, const char* which) {
  for (const auto& s : set.samples) {
    if (!(s.input.shape() == m.config().input_shape()) || !(s.target.shape() == m.config().output_shape()))
      throw InvalidArgument(std::string(which) + " sample shapes " + s.input.shape().str() + " -> " +
                            s.target.shape().str() + " do not match the model " + m.config().input_shape().str() +
                            " -> " + m.config().output_shape().str());
  }
}

/// Mini-batch Adam training; the checkpoint is rewritten whenever the validation loss improves.
template <class T>
TrainResult<T> train(Model<T>& model, const SampleSet& train_set, const SampleSet& val_set, const TrainConfig& cfg,
                     const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) throw InvalidArgument("training and validation sets must be nonempty");
  check_sample_shapes(model, train_set, "training");
  check_sample_shapes(model, val_set, "validation");
  if (!cfg.checkpoint_path.empty()) {
    const auto dir = cfg.checkpoint_path.parent_path();
    if (!dir.empty() && !std::filesystem::is_directory(dir))
      throw IoError("checkpoint directory '" + dir.string() + "' does not exist");
  }

  TrainResult<T> result;
  AdamState<T> adam(model.params());
  std::mt19937_64 shuffle_rng(mix_seed(cfg.seed));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0, step = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::size_t b = std::min(cfg.batch_size, order.size() - start);
      std::vector<Grads<T>> per_sample(b);
      std::vector<double> losses(b);
      parallel_for(b, std::size_t{1} << 20, [&](std::size_t j) {
        const Sample& s = train_set.samples[order[start + j]];
        const std::uint64_t stream = mix_seed(cfg.seed ^ mix_seed(epoch * 0x100000001b3ULL + step) ^ (j + 1));
        auto ctx = Context<T>::training(stream);
        ctx.dropout_rate = cfg.dropout_rate;
        const Tensor<T> y = model.forward(as_type<T>(s.input), ctx);
        auto l = compute_loss(cfg.loss, y, as_type<T>(s.target));
        per_sample[j] = Grads<T>(model.params());
        model.backward(l.grad, ctx, per_sample[j]);
        losses[j] = l.value;
      });
      Grads<T> total = std::move(per_sample[0]);
      for (std::size_t j = 1; j < b; ++j) total.add(per_sample[j]);
      total.scale(static_cast<T>(1.0 / static_cast<double>(b)));
      for (double l : losses) {
        if (!std::isfinite(l)) throw NumericError("non-finite training loss in epoch " + std::to_string(epoch));
        loss_sum += l;
      }
      adam_step(model.params(), total, adam, cfg.learning_rate);
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(train_set.size()), mean_loss(model, val_set, cfg.loss)};
    if (!std::isfinite(rec.val_loss)) throw NumericError("non-finite validation loss in epoch " + std::to_string(epoch));
    result.history.push_back(rec);
    if (rec.val_loss < result.best_val_loss) {
      result.best_val_loss = rec.val_loss;
      result.best_epoch = epoch;
      result.best_params.clear();
      for (const auto& e : model.params()) result.best_params.push_back(e.value);
      if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, model);
    }
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

template <class T>
void restore_params(Model<T>& m, const std::vector<Tensor<T>>& values) {
  if (values.size() != m.params().size()) throw InvalidArgument("parameter count mismatch on restore");
  for (std::size_t i = 0; i < values.size(); ++i) m.params().mutable_value(i) = values[i];
}

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,val_loss\n";
  char buf[128];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_loss);
    out += buf;
  }
  return out;
}

inline void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  const std::string text = history_csv(history);
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// -- metrics ----------------------------------------------------------------------------------

/// 1 where value >= threshold, else 0.
template <class T>
Tensor<T> binarize(const Tensor<T>& x, double threshold) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(x[i]) >= threshold ? T(1) : T(0);
  return out;
}

struct Confusion {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const noexcept { return tp + fp + tn + fn; }
  double accuracy() const { return total() ? static_cast<double>(tp + tn) / static_cast<double>(total()) : 1.0; }
  // no predicted positives: 1 when there was nothing to find, else 0
  double precision() const {
    if (tp + fp == 0) return tp + fn == 0 ? 1.0 : 0.0;
    return static_cast<double>(tp) / static_cast<double>(tp + fp);
  }
  double recall() const {
    if (tp + fn == 0) return tp + fp == 0 ? 1.0 : 0.0;
    return static_cast<double>(tp) / static_cast<double>(tp + fn);
  }

  template <class T>
  void accumulate(const Tensor<T>& pred_mask, const Tensor<T>& truth_mask) {
    detail::require_same_shape(pred_mask, truth_mask, "confusion");
    for (std::size_t i = 0; i < pred_mask.size(); ++i) {
      const bool p = pred_mask[i] > T(0.5);
      const bool t = truth_mask[i] > T(0.5);
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
      tn += !p && !t;
    }
  }
};

struct MetricsReport {
  double mse = 0.0;
  double mse_binarized = 0.0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double threshold = 0.0;
  std::uint64_t n_pixels = 0;
  double denormalization_factor = 1.0;
  Confusion confusion;
};

using Predictor = std::function<Tensor<float>(const Tensor<float>&)>;

/// MSE on denormalized values; binary metrics from confusion counts pooled over every pixel.
inline MetricsReport evaluate(const Predictor& predict_fn, const SampleSet& test_set, double threshold,
                              double denorm_factor) {
  if (test_set.empty()) throw InvalidArgument("evaluation set is empty");
  std::vector<Tensor<float>> preds(test_set.size());
  parallel_for(test_set.size(), std::size_t{1} << 20,
               [&](std::size_t i) { preds[i] = predict_fn(test_set.samples[i].input); });
  MetricsReport rep;
  rep.threshold = threshold;
  rep.denormalization_factor = denorm_factor;
  double se = 0.0, se_bin = 0.0;
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    const Tensor<float>& target = test_set.samples[i].target;
    const Tensor<float>& pred = preds[i];
    detail::require_same_shape(pred, target, "evaluate");
    const Tensor<float> pm = binarize(pred, threshold);
    const Tensor<float> tm = binarize(target, threshold);
    for (std::size_t k = 0; k < pred.size(); ++k) {
      const double d = (static_cast<double>(pred[k]) - static_cast<double>(target[k])) * denorm_factor;
      se += d * d;
      const double db = static_cast<double>(pm[k]) - static_cast<double>(tm[k]);
      se_bin += db * db;
    }
    rep.confusion.accumulate(pm, tm);
    rep.n_pixels += pred.size();
  }
  rep.mse = se / static_cast<double>(rep.n_pixels);
  rep.mse_binarized = se_bin / static_cast<double>(rep.n_pixels);
  rep.accuracy = rep.confusion.accuracy();
  rep.precision = rep.confusion.precision();
  rep.recall = rep.confusion.recall();
  return rep;
}

inline MetricsReport evaluate(const Model<float>& m, const SampleSet& test_set, double threshold, double denorm_factor) {
  return evaluate([&m](const Tensor<float>& x) { return predict(m, x); }, test_set, threshold, denorm_factor);
}

inline MetricsReport evaluate_persistence(const SampleSet& test_set, double threshold, double denorm_factor) {
  return evaluate([](const Tensor<float>& x) { return persistence_predict(x); }, test_set, threshold, denorm_factor);
}

}  // namespace brunet
