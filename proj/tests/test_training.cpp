#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include <unistd.h>

#include "brunet/checkpoint.hpp"
#include "brunet/datapipe.hpp"
#include "brunet/gradcheck.hpp"
#include "brunet/training.hpp"
#include "support.hpp"

using namespace brunet;

namespace {

ModelConfig mini() {
  ModelConfig c;
  c.lags = 2;
  c.height = c.width = 16;
  c.base_filters = 2;
  return c;
}

SampleSet synth_set(std::size_t n, std::uint64_t seed) {
  SynthConfig sc;
  sc.height = sc.width = 16;
  sc.n_frames = n + 2;
  sc.n_blobs = 2;
  sc.blob_sigma = 2.0;
  sc.seed = seed;
  return make_samples(synth_advection(sc), 2, 1);
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 4;
  tc.max_epochs = epochs;
  tc.seed = 5;
  return tc;
}

std::filesystem::path temp_dir() {
  const auto d = std::filesystem::temp_directory_path() / ("brunet_train_" + std::to_string(::getpid()));
  std::filesystem::create_directories(d);
  return d;
}

Tensor<float> tensor_of(std::initializer_list<float> v) {
  return Tensor<float>(Shape{1, 1, v.size(), 1}, std::vector<float>(v));
}

}  // namespace

// -- losses ------------------------------------------------------------------------------------

TEST(LossMse, Examples) {
  const auto x = oracle::random_tensor(Shape{2, 3, 3, 1}, 1);
  EXPECT_EQ(loss_mse(x, x).value, 0.0);
  Tensor<double> p(Shape{2}, 0.0), t(Shape{2}, 1.0);
  const auto r = loss_mse(p, t);
  EXPECT_EQ(r.value, 1.0);
  EXPECT_EQ(r.grad[0], -1.0);
  EXPECT_THROW(loss_mse(p, Tensor<double>(Shape{3})), InvalidArgument);
}

TEST(LossMse, GradientMatchesFiniteDifference) {
  const auto p = oracle::random_tensor(Shape{2, 4, 3, 1}, 2);
  const auto t = oracle::random_tensor(Shape{2, 4, 3, 1}, 3);
  const auto num = oracle::numeric_gradient([&](const Tensor<double>& q) { return loss_mse(q, t).value; }, p);
  EXPECT_LT(oracle::max_rel_error(oracle::as_vector(loss_mse(p, t).grad), num), 1e-8);
}

TEST(LossBce, HalfEverywhereIsLn2) {
  Tensor<double> p(Shape{1, 2, 2, 1}, 0.5);
  Tensor<double> t(Shape{1, 2, 2, 1}, std::vector<double>{0, 1, 1, 0});
  EXPECT_NEAR(loss_bce(p, t).value, std::log(2.0), 1e-12);
  EXPECT_NEAR(loss_bce(p, Tensor<double>(p.shape(), 1.0)).value, std::log(2.0), 1e-12);
}

TEST(LossBce, PerfectPredictionAtClip) {
  Tensor<double> t(Shape{4}, std::vector<double>{0, 1, 1, 0});
  const auto r = loss_bce(t, t);
  EXPECT_LE(r.value, -std::log(1.0 - kBceEpsilon) + 1e-15);
  EXPECT_TRUE(std::isfinite(r.value));
  for (double g : r.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(LossBce, GradientMatchesFiniteDifference) {
  const auto p = oracle::random_tensor(Shape{1, 4, 4, 1}, 4, 0.1, 0.9);
  auto t = oracle::random_tensor(Shape{1, 4, 4, 1}, 5, 0.0, 1.0);
  for (auto& v : t.values()) v = v >= 0.5 ? 1.0 : 0.0;
  const auto num = oracle::numeric_gradient([&](const Tensor<double>& q) { return loss_bce(q, t).value; }, p);
  EXPECT_LT(oracle::max_rel_error(oracle::as_vector(loss_bce(p, t).grad), num), 1e-6);
}

// -- Adam --------------------------------------------------------------------------------------

namespace {

struct Scalar {
  ParamStore<double> store;
  explicit Scalar(double v) { store.add("p", Shape{1}, Tensor<double>(Shape{1}, v)); }
  double value() const { return store.value(0)[0]; }
};

Grads<double> grad_of(const ParamStore<double>& s, double g) {
  Grads<double> out(s);
  out[0][0] = g;
  return out;
}

}  // namespace

TEST(Adam, ZeroGradientIsFixedPoint) {
  Model<double> m(mini(), {.seed = 1});
  std::vector<Tensor<double>> before;
  for (const auto& e : m.params()) before.push_back(e.value);
  AdamState<double> st(m.params());
  Grads<double> g(m.params());
  for (int i = 0; i < 3; ++i) adam_step(m.params(), g, st, 0.1);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(m.params().value(i), before[i]);
  EXPECT_EQ(st.step, 3u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Scalar s(1.0);
  AdamState<double> st(s.store);
  adam_step(s.store, grad_of(s.store, 1.0), st, 0.1);
  // m_hat = 1, v_hat = 1
  EXPECT_NEAR(s.value(), 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(st.m[0][0], 0.1, 1e-15);
  EXPECT_NEAR(st.v[0][0], 0.001, 1e-15);
}

TEST(Adam, BitwiseReproducible) {
  Scalar a(0.3), b(0.3);
  AdamState<double> sa(a.store), sb(b.store);
  for (double g : {0.7, -0.2}) {
    adam_step(a.store, grad_of(a.store, g), sa, 0.01);
    adam_step(b.store, grad_of(b.store, g), sb, 0.01);
  }
  EXPECT_EQ(a.value(), b.value());
}

TEST(Adam, DecreasesQuadratic) {
  Scalar s(0.0);
  AdamState<double> st(s.store);
  auto loss = [](double p) { return (p - 3.0) * (p - 3.0); };
  double prev = loss(s.value());
  for (int i = 0; i < 10; ++i) {
    adam_step(s.store, grad_of(s.store, 2.0 * (s.value() - 3.0)), st, 0.1);
    const double now = loss(s.value());
    EXPECT_LT(now, prev) << "step " << i;
    prev = now;
  }
}

TEST(Adam, ShapeMismatch) {
  Scalar s(1.0);
  ParamStore<double> other;
  other.add("p", Shape{2}, Tensor<double>(Shape{2}));
  AdamState<double> st(s.store);
  EXPECT_THROW(adam_step(s.store, Grads<double>(other), st, 0.1), InvalidArgument);
}

// -- training loop -----------------------------------------------------------------------------

TEST(Train, PresetsMatchProtocol) {
  const auto p = TrainConfig::precipitation();
  EXPECT_EQ(p.loss, LossKind::mse);
  EXPECT_EQ(p.learning_rate, 1e-4);
  EXPECT_EQ(p.batch_size, 2u);
  EXPECT_EQ(p.dropout_rate, 0.5);
  const auto c = TrainConfig::cloud();
  EXPECT_EQ(c.loss, LossKind::bce);
  EXPECT_EQ(c.learning_rate, 1e-3);
  EXPECT_EQ(c.batch_size, 8u);
  EXPECT_EQ(c.dropout_rate, 0.5);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  Model<float> m(mini(), {.seed = 1});
  std::vector<Tensor<float>> before;
  for (const auto& e : m.params()) before.push_back(e.value);
  auto tc = quick(2);
  tc.learning_rate = 0.0;
  train(m, synth_set(8, 1), synth_set(4, 2), tc);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(m.params().value(i), before[i]);
}

TEST(Train, LossDecreasesOnSmallSet) {
  Model<float> m(mini(), {.seed = 3});
  const auto r = train(m, synth_set(64, 1), synth_set(16, 2), quick(10));
  ASSERT_EQ(r.history.size(), 10u);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
}

TEST(Train, BestCheckpointHasMinimumValidationLoss) {
  const auto dir = temp_dir();
  const auto val = synth_set(8, 2);
  Model<float> m(mini(), {.seed = 4});
  auto tc = quick(5);
  tc.checkpoint_path = dir / "best.btar";
  const auto r = train(m, synth_set(16, 1), val, tc);
  double min_val = r.history[0].val_loss;
  std::size_t arg = 1;
  for (const auto& e : r.history)
    if (e.val_loss < min_val) {
      min_val = e.val_loss;
      arg = e.epoch;
    }
  EXPECT_EQ(r.best_val_loss, min_val);
  EXPECT_EQ(r.best_epoch, arg);
  const auto best = load_checkpoint<float>(tc.checkpoint_path);
  EXPECT_EQ(mean_loss(best, val, LossKind::mse), min_val);
  restore_params(m, r.best_params);
  for (std::size_t i = 0; i < m.params().size(); ++i) EXPECT_EQ(m.params().value(i), best.params().value(i));
  std::filesystem::remove_all(dir);
}

TEST(Train, SeededRunsAreBitwiseIdentical) {
  const auto tr = synth_set(12, 1), val = synth_set(4, 2);
  std::string csv[2];
  std::vector<Tensor<float>> params[2];
  for (int k = 0; k < 2; ++k) {
    Model<float> m(mini(), {.seed = 6});
    csv[k] = history_csv(train(m, tr, val, quick(3)).history);
    for (const auto& e : m.params()) params[k].push_back(e.value);
  }
  EXPECT_EQ(csv[0], csv[1]);
  for (std::size_t i = 0; i < params[0].size(); ++i) EXPECT_EQ(params[0][i], params[1][i]);

  Model<float> other(mini(), {.seed = 6});
  auto tc = quick(3);
  tc.seed = 6;
  EXPECT_NE(history_csv(train(other, tr, val, tc).history), csv[0]);
}

TEST(Train, BceOnBinaryHead) {
  ModelConfig c = mini();
  c.head = Head::binary;
  Model<float> m(c, {.seed = 2});
  auto tr = synth_set(16, 1), val = synth_set(4, 2);
  for (auto* set : {&tr, &val})
    for (auto& s : set->samples) s.target = binarize(s.target, 0.3);
  auto tc = quick(6);
  tc.loss = LossKind::bce;
  const auto r = train(m, tr, val, tc);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
}

TEST(Train, Errors) {
  Model<float> m(mini(), {.seed = 1});
  const auto tr = synth_set(4, 1);
  EXPECT_THROW(train(m, SampleSet{}, tr, quick(1)), InvalidArgument);
  SampleSet wrong;
  wrong.samples.push_back({Tensor<float>(Shape{3, 16, 16, 1}), Tensor<float>(Shape{1, 16, 16, 1}), 0, 0});
  EXPECT_THROW(train(m, wrong, tr, quick(1)), InvalidArgument);
  auto tc = quick(1);
  tc.checkpoint_path = "/nonexistent_brunet_dir/x/best.btar";
  EXPECT_THROW(train(m, tr, tr, tc), IoError);
  tc = quick(1);
  tc.batch_size = 0;
  EXPECT_THROW(train(m, tr, tr, tc), InvalidArgument);
}

TEST(Train, HistoryCsvFormat) {
  const std::vector<EpochRecord> h{{1, 0.5, 0.25}, {2, 0.125, 1.0 / 3.0}};
  const auto csv = history_csv(h);
  EXPECT_EQ(csv.rfind("epoch,train_loss,val_loss\n1,0.5,0.25\n2,0.125,0.3333", 0), 0u);
  EXPECT_EQ(csv.back(), '\n');
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  const auto dir = temp_dir();
  write_history_csv(dir / "h.csv", h);
  const auto bytes = read_file(dir / "h.csv");
  EXPECT_EQ(std::string(bytes.begin(), bytes.end()), csv);
  std::filesystem::remove_all(dir);
}

// -- metrics -----------------------------------------------------------------------------------

TEST(Binarize, Examples) {
  const auto b = binarize(tensor_of({0.2f, 0.5f, 0.7f}), 0.5);
  EXPECT_EQ(b, tensor_of({0, 1, 1}));
  EXPECT_EQ(binarize(tensor_of({0.2f, 0.5f, 0.7f}), 0.71), tensor_of({0, 0, 0}));
  EXPECT_EQ(binarize(b, 0.5), b);
}

TEST(Metrics, HandEnumeratedConfusion) {
  Confusion c;
  c.accumulate(tensor_of({1, 1, 0, 0}), tensor_of({1, 0, 1, 0}));
  EXPECT_EQ(c.tp, 1u);
  EXPECT_EQ(c.fp, 1u);
  EXPECT_EQ(c.fn, 1u);
  EXPECT_EQ(c.tn, 1u);
  EXPECT_EQ(c.accuracy(), 0.5);
  EXPECT_EQ(c.precision(), 0.5);
  EXPECT_EQ(c.recall(), 0.5);

  SampleSet s;
  s.samples.push_back({tensor_of({1, 1, 0, 0}), tensor_of({1, 0, 1, 0}), 0, 0});
  const auto rep = evaluate([](const Tensor<float>& x) { return x; }, s, 0.5, 1.0);
  EXPECT_EQ(rep.accuracy, 0.5);
  EXPECT_EQ(rep.precision, 0.5);
  EXPECT_EQ(rep.recall, 0.5);
  EXPECT_EQ(rep.mse, 0.5);
  EXPECT_EQ(rep.n_pixels, 4u);
}

TEST(Metrics, UndefinedDenominators) {
  Confusion none;
  none.accumulate(tensor_of({0, 0}), tensor_of({0, 0}));
  EXPECT_EQ(none.precision(), 1.0);
  EXPECT_EQ(none.recall(), 1.0);
  Confusion missed;
  missed.accumulate(tensor_of({0, 0}), tensor_of({1, 0}));
  EXPECT_EQ(missed.precision(), 0.0);
  EXPECT_EQ(missed.recall(), 0.0);
  Confusion spurious;
  spurious.accumulate(tensor_of({1, 0}), tensor_of({0, 0}));
  EXPECT_EQ(spurious.precision(), 0.0);
  EXPECT_EQ(spurious.recall(), 0.0);
}

TEST(Metrics, PerfectPredictorScoresOne) {
  const auto set = synth_set(6, 3);
  std::size_t i = 0;
  const auto rep = evaluate([&](const Tensor<float>&) { return set.samples[i++].target; }, set, 0.3, 1.0);
  EXPECT_EQ(rep.mse, 0.0);
  EXPECT_EQ(rep.accuracy, 1.0);
  EXPECT_EQ(rep.precision, 1.0);
  EXPECT_EQ(rep.recall, 1.0);
  EXPECT_EQ(rep.mse_binarized, 0.0);
}

TEST(Metrics, DenormalizationScalesQuadratically) {
  const auto set = synth_set(5, 4);
  const auto a = evaluate_persistence(set, 0.3, 1.0);
  const auto b = evaluate_persistence(set, 0.3, 2.0);
  EXPECT_GT(a.mse, 0.0);
  EXPECT_NEAR(b.mse, 4.0 * a.mse, 1e-12 * b.mse);
  EXPECT_EQ(a.accuracy, b.accuracy);
}

TEST(Metrics, PersistenceOnStaticSequence) {
  SynthConfig sc;
  sc.height = sc.width = 16;
  sc.n_frames = 8;
  sc.velocity_x = sc.velocity_y = 0.0;
  sc.seed = 2;
  const auto set = make_samples(synth_advection(sc), 3, 2);
  const auto rep = evaluate_persistence(set, 0.2, 1.0);
  EXPECT_EQ(rep.mse, 0.0);
  EXPECT_EQ(rep.accuracy, 1.0);
  EXPECT_EQ(rep.precision, 1.0);
  EXPECT_EQ(rep.recall, 1.0);
}

TEST(Metrics, EmptySetRejected) {
  EXPECT_THROW(evaluate_persistence(SampleSet{}, 0.5, 1.0), InvalidArgument);
}

// -- gradient-check harness --------------------------------------------------------------------

namespace {

// Data gradient computed with doubled weights.
class DoubledBackward final : public Layer<double> {
 public:
  DoubledBackward(LayerPtr<double> inner) : Layer<double>("doubled"), inner_(std::move(inner)) {}
  Tensor<double> forward(const Tensor<double>& x, const ParamStore<double>& p, Context<double>& ctx) const override {
    return inner_->forward(x, p, ctx);
  }
  Tensor<double> backward(const Tensor<double>& g, const ParamStore<double>& p, Context<double>& ctx,
                          Grads<double>& grads) const override {
    return 2.0 * inner_->backward(g, p, ctx, grads);
  }
  Shape trace(const Shape& in, std::vector<LayerRow>& rows) const override { return inner_->trace(in, rows); }

 private:
  LayerPtr<double> inner_;
};

}  // namespace

TEST(GradCheckHarness, LinearToyIsExact) {
  ParamStore<double> store;
  std::mt19937_64 rng(1);
  auto conv = make_conv<double>("lin", block_kernel(3, 2, 2, 3), store, &rng);
  const auto rep = grad_check(*conv, store, Shape{2, 5, 5, 2}, GradCheckOptions{});
  EXPECT_TRUE(rep.passed);
  EXPECT_EQ(rep.skipped_kinks, 0u);
  // at step 1e-6 only round-off remains: ~eps * |loss| / step over the 1e-3 floor
  EXPECT_LT(rep.max_rel_error(), 1e-6) << rep.worst().name;
  // central differences are exact on a linear map for any step
  GradCheckOptions unit;
  unit.step = 1.0;
  const auto exact = grad_check(*conv, store, Shape{2, 5, 5, 2}, unit);
  EXPECT_LT(exact.max_rel_error(), 1e-10) << exact.worst().name;
}

TEST(GradCheckHarness, CorruptedBackwardFails) {
  ParamStore<double> store;
  std::mt19937_64 rng(1);
  DoubledBackward bad(make_conv<double>("lin", block_kernel(3, 1, 2, 2), store, &rng));
  const auto rep = grad_check(bad, store, Shape{1, 5, 5, 2}, GradCheckOptions{});
  EXPECT_FALSE(rep.passed);
  EXPECT_EQ(rep.worst().name, "input");
  EXPECT_NEAR(rep.max_rel_error(), 0.5, 1e-6);
}

TEST(GradCheckHarness, ReportsPerTensorEntries) {
  ParamStore<double> store;
  std::mt19937_64 rng(2);
  auto conv = make_conv<double>("c", block_kernel(1, 1, 2, 2), store, &rng);
  GradCheckOptions opt;
  opt.check_input = false;
  const auto rep = grad_check(*conv, store, Shape{1, 3, 3, 2}, opt);
  ASSERT_EQ(rep.entries.size(), 2u);
  EXPECT_EQ(rep.entries[0].name, "c.weight");
  EXPECT_EQ(rep.entries[1].name, "c.bias");
  EXPECT_EQ(rep.checked, 6u);
}
