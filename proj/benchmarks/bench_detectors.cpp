#include "bdlab/abs_scan.hpp"
#include "bdlab/mntd.hpp"
#include "bdlab/neural_cleanse.hpp"
#include "bdlab/rng.hpp"

#include <benchmark/benchmark.h>

using namespace bdlab;

namespace {

struct Victim {
    SplitPair sp = synth_strokes_split(400, 200, 10, 3);
    Model model;

    Victim() {
        TrainConfig tc;
        tc.epochs = 2;
        model = train(zoo_spec("cnn-4+3", sp.train.image_shape(), 10, 8), sp.train, tc).model;
    }
};

const Victim& victim() {
    static const Victim v;
    return v;
}

void BM_Nsf(benchmark::State& state) {
    const Victim& v = victim();
    const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    const Tensor x = v.sp.test.batch(idx);
    const std::size_t layer = v.model.spec().hidden_activation_layers().front();
    const auto grid = stimulation_grid(4.0, 20);
    for (auto _ : state) benchmark::DoNotOptimize(compute_nsf(v.model, x, layer, 0, grid).outputs.size());
}
BENCHMARK(BM_Nsf)->Unit(benchmark::kMillisecond);

void BM_ReverseTrigger(benchmark::State& state) {
    const Victim& v = victim();
    ReverseConfig rc;
    rc.epochs = 2;
    for (auto _ : state) benchmark::DoNotOptimize(reverse_trigger(v.model, 0, v.sp.test, rc).l1_norm);
}
BENCHMARK(BM_ReverseTrigger)->Unit(benchmark::kMillisecond);

void BM_Auc(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(5);
    std::vector<double> a(n), b(n);
    for (auto& x : a) x = rng.normal();
    for (auto& x : b) x = rng.normal() + 0.5;
    for (auto _ : state) benchmark::DoNotOptimize(compute_auc(a, b));
}
BENCHMARK(BM_Auc)->Arg(64)->Arg(4096);

} // namespace
