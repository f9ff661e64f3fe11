#include <doctest.h>

#include "bdlab/abs_scan.hpp"
#include "bdlab/errors.hpp"
#include "support.hpp"

#include <algorithm>

using namespace bdlab;

namespace {

struct Fixture {
    SplitPair sp = synth_strokes_split(200, 100, 4, 7, {.side = 8});
    Model model;

    Fixture() {
        TrainConfig tc;
        tc.epochs = 2;
        model = train(zoo_spec("cnn-4+3", sp.train.image_shape(), 4, 2), sp.train, tc).model;
    }
};

StimulationProfile hand_profile(std::size_t unit, std::vector<double> base, std::vector<std::vector<double>> rows) {
    StimulationProfile p;
    p.neuron = {1, unit};
    p.base = std::move(base);
    p.outputs = std::move(rows);
    for (std::size_t i = 0; i < p.outputs.size(); ++i) p.grid.push_back(static_cast<double>(i));
    return p;
}

} // namespace

TEST_SUITE("abs") {

TEST_CASE("stimulation grid is equispaced from zero to twice the peak") {
    const auto g = stimulation_grid(1.5, 7);
    REQUIRE(g.size() == 7);
    CHECK(g.front() == 0.0);
    CHECK(g.back() == doctest::Approx(3.0));
    for (std::size_t i = 1; i < g.size(); ++i) CHECK(g[i] - g[i - 1] == doctest::Approx(0.5));
    CHECK_THROWS_AS(stimulation_grid(1.0, 1), ConfigError);
    CHECK_THROWS_AS(stimulation_grid(0.0, 5), ConfigError);
}

TEST_CASE("override sets the unit and leaves the others alone") {
    Rng rng(2);
    const std::vector<double> vals{0.25, -1.0, 3.0};
    for (const Shape& s : {Shape{3, 5}, Shape{3, 4, 2, 3}}) {
        const Tensor a = test::random_tensor(rng, s);
        const Tensor o = override_unit(a, 2, vals);
        const auto got = unit_values(o, 2);
        for (std::size_t b = 0; b < 3; ++b) CHECK(got[b] == doctest::Approx(vals[b]).epsilon(1e-5));
        for (std::size_t u : {0, 1, 3}) CHECK(unit_values(o, u) == unit_values(a, u));
    }
    CHECK_THROWS_AS(unit_values(test::random_tensor(rng, {2, 3}), 3), IndexError);
}

TEST_CASE("NSF rows equal forward passes with the unit overridden") {
    Fixture f;
    const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5};
    const Tensor x = f.sp.test.batch(idx);
    for (std::size_t layer : f.model.spec().hidden_activation_layers()) {
        const auto grid = stimulation_grid(2.0, 4);
        const StimulationProfile p = compute_nsf(f.model, x, layer, 1, grid);
        const Tensor act = f.model.forward_to(layer, x);
        for (std::size_t g = 0; g < grid.size(); ++g) {
            const std::vector<double> vals(idx.size(), grid[g]);
            const Tensor logits = f.model.forward_from(layer, override_unit(act, 1, vals));
            const std::size_t k = logits.dim(1);
            for (std::size_t c = 0; c < k; ++c) {
                double m = 0.0;
                for (std::size_t b = 0; b < idx.size(); ++b) m += logits.data()[b * k + c];
                CHECK(p.outputs[g][c] == doctest::Approx(m / idx.size()).epsilon(1e-5));
            }
        }
    }
    const std::vector<double> bad{1.0, 1.0};
    CHECK_THROWS_AS(compute_nsf(f.model, x, 1, 0, bad), ConfigError);
}

TEST_CASE("elevation picks the label whose margin rises most") {
    // Label 2 climbs from a margin of -1 to +5; label 0 is already on top.
    const auto p = hand_profile(0, {3, 1, 2}, {{3, 1, 2}, {2, 1, 5}, {1, 0, 6}});
    const CandidateNeuron c = elevation(p);
    CHECK(c.label == 2);
    CHECK(c.score == doctest::Approx(6.0));
}

TEST_CASE("candidate ties break by neuron id") {
    std::vector<StimulationProfile> ps;
    for (std::size_t u : {4, 1, 3, 0}) ps.push_back(hand_profile(u, {0, 0}, {{0, 0}, {1, 0}}));
    ps.push_back(hand_profile(9, {0, 0}, {{0, 0}, {3, 0}}));
    const auto c = select_candidates(ps, 3);
    REQUIRE(c.size() == 3);
    CHECK(c[0].neuron.unit == 9);
    CHECK(c[1].neuron.unit == 0);
    CHECK(c[2].neuron.unit == 1);
}

TEST_CASE("REASR of an empty mask is the plain prediction rate") {
    Fixture f;
    ReversedTrigger t;
    t.image_shape = f.sp.test.image_shape();
    t.mask.assign(64, 0.0f);
    t.pattern.assign(64, 1.0f);
    const auto idx = f.sp.test.indices_not_of_class(2);
    CHECK(reasr(f.model, f.sp.test, t, 2) == doctest::Approx(fraction_predicted(f.model, f.sp.test.batch(idx), 2)));
}

TEST_CASE("a small scan is self-consistent") {
    Fixture f;
    AbsConfig cfg;
    cfg.candidates = 3;
    cfg.grid_points = 5;
    cfg.nsf_samples = 5;
    cfg.reverse_steps = 10;
    cfg.reasr_samples = 40;
    const AbsReport r = scan_abs(f.model, f.sp.test, cfg);
    REQUIRE(r.results.size() == r.candidates.size());
    CHECK(r.candidates.size() <= 3);
    double best = 0.0;
    for (const auto& res : r.results) best = std::max(best, res.trigger.reversed_asr);
    CHECK(r.max_reasr == best);
    CHECK((r.verdict == Verdict::backdoored) == (r.max_reasr > r.threshold));
    CHECK(AbsReport::from_json(r.to_json()).to_json() == r.to_json());
    CHECK(scan_abs(f.model, f.sp.test, cfg).to_json() == r.to_json());
}

TEST_CASE("invalid ABS configs are configuration errors") {
    AbsConfig c;
    c.grid_points = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.candidates = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(AbsConfig::from_json(AbsConfig{}.to_json()).to_json() == AbsConfig{}.to_json());
}

} // TEST_SUITE
