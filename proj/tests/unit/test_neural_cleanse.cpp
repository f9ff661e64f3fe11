#include <doctest.h>

#include "bdlab/errors.hpp"
#include "bdlab/neural_cleanse.hpp"
#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

using namespace bdlab;

namespace {

// Sort-free median: smallest value with at least half of the set at or below it,
// averaged with its upper partner for even counts.
double rank_median(const std::vector<double>& v) {
    auto nth = [&](std::size_t k) {
        for (double x : v) {
            std::size_t below = 0, equal = 0;
            for (double y : v) {
                below += y < x;
                equal += y == x;
            }
            if (below <= k && k < below + equal) return x;
        }
        return std::numeric_limits<double>::quiet_NaN();
    };
    const std::size_t n = v.size();
    return n % 2 ? nth(n / 2) : (nth(n / 2 - 1) + nth(n / 2)) / 2.0;
}

std::vector<double> random_norms(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(0.5, 40.0);
    return v;
}

} // namespace

TEST_SUITE("neural_cleanse") {

TEST_CASE("anomaly index matches the direct formula") {
    Rng rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        const auto norms = random_norms(rng, 2 + rng.below(15));
        const double med = rank_median(norms);
        std::vector<double> dev;
        for (double x : norms) dev.push_back(std::abs(x - med));
        const double mad = rank_median(dev);
        const double lo = *std::min_element(norms.begin(), norms.end());
        const AnomalyReport r = anomaly_index(norms);
        CHECK(r.median == doctest::Approx(med).epsilon(1e-12));
        CHECK(r.mad == doctest::Approx(mad).epsilon(1e-12));
        CHECK(r.anomaly_index == doctest::Approx((med - lo) / (kMadConsistency * mad)).epsilon(1e-9));
        CHECK((r.verdict == Verdict::backdoored) == (r.anomaly_index > kAnomalyThreshold));
    }
}

TEST_CASE("two labels always give 1 / C") {
    Rng rng(3);
    for (int trial = 0; trial < 500; ++trial) {
        const double a = rng.uniform(0.0, 100.0), b = rng.uniform(0.0, 100.0);
        if (a == b) continue;
        const std::vector<double> norms{a, b};
        const AnomalyReport r = anomaly_index(norms);
        CHECK(std::abs(r.anomaly_index - 1.0 / kMadConsistency) <= 1e-12);
        CHECK(r.verdict == Verdict::benign);
    }
}

TEST_CASE("anomaly index ignores scale and order") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        auto norms = random_norms(rng, 10);
        const double ai = anomaly_index(norms).anomaly_index;
        auto scaled = norms;
        const double k = rng.uniform(0.01, 100.0);
        for (auto& x : scaled) x *= k;
        CHECK(anomaly_index(scaled).anomaly_index == doctest::Approx(ai).epsilon(1e-9));
        rng.shuffle(std::span<double>(norms));
        CHECK(anomaly_index(norms).anomaly_index == doctest::Approx(ai).epsilon(1e-12));
    }
}

TEST_CASE("the flagged label is the smallest norm") {
    const std::vector<double> norms{30, 31, 29, 2, 30.5, 29.5, 30.2};
    const AnomalyReport r = anomaly_index(norms);
    CHECK(r.verdict == Verdict::backdoored);
    REQUIRE(r.flagged_label.has_value());
    CHECK(*r.flagged_label == 3);
}

TEST_CASE("zero MAD is zero for ties and infinite for an outlier") {
    const std::vector<double> flat{4, 4, 4, 4};
    CHECK(anomaly_index(flat).anomaly_index == 0.0);
    const std::vector<double> spike{4, 4, 4, 1, 4};
    const AnomalyReport r = anomaly_index(spike);
    CHECK(std::isinf(r.anomaly_index));
    CHECK(r.verdict == Verdict::backdoored);
}

TEST_CASE("bad norm sets are rejected") {
    const std::vector<double> one{1.0}, neg{1.0, -1.0}, nan{1.0, std::nan("")};
    CHECK_THROWS_AS(anomaly_index(one), ContractError);
    CHECK_THROWS_AS(anomaly_index(neg), ContractError);
    CHECK_THROWS_AS(anomaly_index(nan), ContractError);
    CHECK_THROWS_AS(median_of({}), ContractError);
}

TEST_CASE("reversed triggers stay in range and round-trip") {
    const SplitPair sp = synth_strokes_split(200, 100, 4, 3, {.side = 8});
    TrainConfig tc;
    tc.epochs = 2;
    const Model m = train(zoo_spec("mlp-2", sp.train.image_shape(), 4, 4), sp.train, tc).model;
    ReverseConfig rc;
    rc.epochs = 3;
    rc.steps_per_epoch = 3;
    rc.sample_count = 60;
    const ReversedTrigger t = reverse_trigger(m, 1, sp.test, rc);
    CHECK(t.label == 1);
    REQUIRE(t.mask.size() == 64);
    REQUIRE(t.pattern.size() == 64);
    double l1 = 0.0;
    for (float v : t.mask) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        l1 += v;
    }
    for (float v : t.pattern) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    CHECK(t.l1_norm == doctest::Approx(l1).epsilon(1e-5));
    CHECK(t.reversed_asr >= 0.0);
    CHECK(t.reversed_asr <= 1.0);
    CHECK(parameter_hash(m) == parameter_hash(m.clone()));

    const ReversedTrigger back = trigger_from_container(to_container(t));
    CHECK(back.mask == t.mask);
    CHECK(back.pattern == t.pattern);
    CHECK(back.to_json() == t.to_json());

    std::vector<float> img(64, 0.5f);
    const auto stamped = t.apply(img);
    for (std::size_t i = 0; i < 64; ++i)
        CHECK(stamped[i] == doctest::Approx((1 - t.mask[i]) * 0.5 + t.mask[i] * t.pattern[i]));
}

TEST_CASE("invalid reverse configs are configuration errors") {
    ReverseConfig rc;
    rc.epochs = 0;
    CHECK_THROWS_AS(rc.validate(), ConfigError);
    rc = {};
    rc.learning_rate = 0;
    CHECK_THROWS_AS(rc.validate(), ConfigError);
    CHECK(ReverseConfig::from_json(ReverseConfig{}.to_json()).to_json() == ReverseConfig{}.to_json());
}

} // TEST_SUITE
