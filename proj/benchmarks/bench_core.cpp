#include <benchmark/benchmark.h>

#include "rvit/adversarial.hpp"
#include "rvit/pipeline.hpp"
#include "rvit/saliency.hpp"

namespace {

using namespace rvit;

Tensor random_image(int side, uint64_t seed) {
  Rng rng(seed);
  Tensor x({side, side, 1});
  for (auto& v : x.vec()) v = rng.uniform(0.0f, 1.0f);
  return x;
}

ViTClassifier small_vit(int side, int layers, int hidden) {
  Rng rng(7);
  ModelShape shape{layers, hidden, 2, hidden * 2, 4};
  return ViTClassifier::make(side, side, 1, 2, shape, hidden, rng);
}

void BM_EncoderForward(benchmark::State& state) {
  ViTClassifier model = small_vit(16, static_cast<int>(state.range(0)), 32);
  Tensor x = random_image(16, 1);
  for (auto _ : state) {
    Tape tape;
    benchmark::DoNotOptimize(model.forward(tape, x));
  }
}
BENCHMARK(BM_EncoderForward)->Arg(1)->Arg(2)->Arg(4);

void BM_TrainStepBackward(benchmark::State& state) {
  ViTClassifier model = small_vit(16, 2, 32);
  Tensor x = random_image(16, 2);
  NamedParams p;
  model.collect("m", p);
  for (auto _ : state) {
    Tape tape;
    for (auto& [name, t] : p.items) tape.watch(t);
    Tensor logits = model.forward(tape, x);
    Tensor loss = tape.cross_entropy_logits(tape.reshape(logits, {1, 2}), {1});
    benchmark::DoNotOptimize(tape.backward(loss));
  }
}
BENCHMARK(BM_TrainStepBackward);

void BM_FgsmLL(benchmark::State& state) {
  ViTClassifier model = small_vit(16, 2, 32);
  Tensor x = random_image(16, 3);
  AdvConfig cfg;
  cfg.targeted = true;
  Rng rng(11);
  for (auto _ : state) {
    benchmark::DoNotOptimize(fgsm_ll(model, x, cfg, rng));
  }
}
BENCHMARK(BM_FgsmLL);

void BM_GuidedBackprop(benchmark::State& state) {
  ViTClassifier model = small_vit(16, 2, 32);
  Tensor x = random_image(16, 4);
  for (auto _ : state) {
    benchmark::DoNotOptimize(guided_backprop(model, x));
  }
}
BENCHMARK(BM_GuidedBackprop);

}  // namespace

BENCHMARK_MAIN();
