#include "bdlab/nets.hpp"
#include "bdlab/rng.hpp"
#include "bdlab/tensor.hpp"

#include <benchmark/benchmark.h>

using namespace bdlab;

namespace {

Tensor filled(Rng& rng, Shape shape, bool grad = false) {
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    return Tensor(std::move(shape), std::move(v), grad);
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    const Tensor a = filled(rng, {n, n}), b = filled(rng, {n, n});
    NoGradGuard ng;
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b).data().data());
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_Conv2dForwardBackward(benchmark::State& state) {
    const auto batch = static_cast<std::size_t>(state.range(0));
    Rng rng(2);
    const Tensor x = filled(rng, {batch, 4, 16, 16});
    Tensor k = filled(rng, {8, 4, 3, 3}, true);
    for (auto _ : state) {
        const Tensor loss = sum(conv2d(x, k, 1, 1));
        backward(loss);
        k.zero_grad();
    }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(32);

void BM_TrainEpoch(benchmark::State& state) {
    const SplitPair sp = synth_strokes_split(512, 16, 10, 1);
    const ModelSpec spec = zoo_spec(state.range(0) == 0 ? "mlp-2" : "cnn-4+3", sp.train.image_shape(), 10, 8);
    TrainConfig tc;
    tc.epochs = 1;
    for (auto _ : state) benchmark::DoNotOptimize(train(spec, sp.train, tc).history.epochs.back().loss);
    state.SetLabel(spec.name);
}
BENCHMARK(BM_TrainEpoch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

} // namespace
