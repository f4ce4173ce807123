// Train a small Broad-UNet on synthetic advecting blobs and compare it to persistence.

#include <cstdio>

#include "brunet/datapipe.hpp"
#include "brunet/model.hpp"
#include "brunet/training.hpp"

using namespace brunet;

namespace {

SampleSet samples_from(std::uint64_t seed, std::size_t n, std::size_t lags) {
  SynthConfig sc;
  sc.height = sc.width = 32;
  sc.n_frames = n + lags;
  sc.seed = seed;
  return make_samples(synth_advection(sc), lags, 1);
}

}  // namespace

int main() {
  const std::size_t lags = 4;
  const SampleSet train_set = samples_from(1, 128, lags);
  const SampleSet val_set = samples_from(2, 32, lags);
  const SampleSet test_set = samples_from(3, 32, lags);

  ModelConfig mc;
  mc.lags = lags;
  mc.height = mc.width = 32;
  mc.base_filters = 4;
  Model<float> model(mc, {.seed = 3});
  std::printf("parameters: %zu\n", count_params(model).total);

  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 1;
  tc.max_epochs = 15;
  auto result = train(model, train_set, val_set, tc, [](const EpochRecord& r) {
    std::printf("epoch %2zu  train %.5f  val %.5f\n", r.epoch, r.train_loss, r.val_loss);
  });
  restore_params(model, result.best_params);

  const auto net = evaluate(model, test_set, 0.5, 1.0);
  const auto base = evaluate_persistence(test_set, 0.5, 1.0);
  std::printf("test mse: model %.5f  persistence %.5f\n", net.mse, base.mse);
  std::printf("accuracy: model %.4f  persistence %.4f\n", net.accuracy, base.accuracy);
  return 0;
}
