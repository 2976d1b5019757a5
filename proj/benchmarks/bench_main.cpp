#include <benchmark/benchmark.h>

#include <random>

#include "geomattn/acm.hpp"
#include "geomattn/data.hpp"
#include "geomattn/losses.hpp"
#include "geomattn/ops.hpp"
#include "geomattn/train.hpp"

using namespace geomattn;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

// Args: channels, spatial size.
void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto s = static_cast<std::size_t>(state.range(1));
  Tensor x = random_tensor({16, c, s, s}, 1);
  Tensor w = random_tensor({c, c, 3, 3}, 2);
  x.set_requires_grad();
  w.set_requires_grad();
  for (auto _ : state) {
    x.zero_grad();
    w.zero_grad();
    sum(conv2d(x, w, 1, 1)).backward();
    benchmark::DoNotOptimize(w.grad().data());
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Args({16, 32})->Args({64, 8})->Unit(benchmark::kMillisecond);

// Args: neighborhood.
void BM_AttentionMask(benchmark::State& state) {
  const Tensor local = positive_activation(random_tensor({16, 64, 8, 8}, 3));
  AcmConfig cfg;
  cfg.neighborhood = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(attention_mask(local, cfg).q.data());
}
BENCHMARK(BM_AttentionMask)->Arg(3)->Arg(7)->Unit(benchmark::kMicrosecond);

void BM_HardTripletLoss(benchmark::State& state) {
  const Tensor f = random_tensor({16, 128}, 4);
  std::vector<int> labels;
  for (int i = 0; i < 16; ++i) labels.push_back(i / 4);
  for (auto _ : state) benchmark::DoNotOptimize(hard_triplet_loss(f, labels, 0.5).item());
}
BENCHMARK(BM_HardTripletLoss)->Unit(benchmark::kMicrosecond);

// One P=K=4 step of the desk model: forward, backward and Adam.
void BM_TrainingStep(benchmark::State& state) {
  SyntheticSpec spec;
  spec.num_identities = 8;
  spec.images_per_identity = 8;
  const SyntheticDataset data = generate_synthetic_dataset(spec);
  ArchConfig arch;
  arch.num_identities = LabelMap(data.train).size();
  arch.acm_neighborhood = 3;
  ReidModel model(arch, 7);
  TrainConfig tc;
  tc.steps_per_epoch = 1;
  OptimConfig optim;
  optim.epochs = 1000000;
  optim.milestones = {};
  Trainer trainer(model, data.train, tc, optim);
  std::size_t epoch = 0;
  for (auto _ : state) benchmark::DoNotOptimize(trainer.train_epoch(epoch++).mean_total());
}
BENCHMARK(BM_TrainingStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
