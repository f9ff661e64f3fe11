#include <doctest.h>

#include "bdlab/errors.hpp"
#include "bdlab/mntd.hpp"
#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

using namespace bdlab;

namespace {

double pairwise_auc(const std::vector<double>& benign, const std::vector<double>& backdoor) {
    double wins = 0.0;
    for (double b : backdoor)
        for (double n : benign) wins += b > n ? 1.0 : (b == n ? 0.5 : 0.0);
    return wins / static_cast<double>(benign.size() * backdoor.size());
}

std::vector<double> coarse_scores(Rng& rng, std::size_t n, double shift) {
    std::vector<double> v(n);
    // Rounded to quarters so ties are common.
    for (auto& x : v) x = std::round(4.0 * (rng.normal() + shift)) / 4.0;
    return v;
}

ShadowModelRecord scored(const std::string& id, Verdict label, double score) {
    ShadowModelRecord r;
    r.id = id;
    r.label = label;
    r.score = score;
    if (label == Verdict::backdoored) r.attack = sample_jumbo(1, {1, 8, 8}, 4);
    return r;
}

struct TinyWorld {
    SplitPair sp = synth_strokes_split(240, 120, 4, 5, {.side = 8});
    ShadowSetConfig cfg;
    ShadowPopulation pop;

    TinyWorld() {
        cfg.n_benign = 4;
        cfg.n_backdoor = 4;
        cfg.model = "mlp-2";
        cfg.base_width = 4;
        cfg.benign_train.epochs = 2;
        cfg.backdoor_train.epochs = 2;
        cfg.seed = 31;
        cfg.tag = "tiny";
        pop = generate_shadow_set(sp.train, sp.test, cfg);
    }
};

MetaConfig small_meta() {
    MetaConfig m;
    m.queries = 3;
    m.hidden = 6;
    m.epochs = 5;
    m.batch_models = 4;
    return m;
}

} // namespace

TEST_SUITE("mntd") {

TEST_CASE("AUC matches the pairwise definition with ties") {
    Rng rng(17);
    for (int trial = 0; trial < 300; ++trial) {
        const auto a = coarse_scores(rng, 1 + rng.below(20), 0.0);
        const auto b = coarse_scores(rng, 1 + rng.below(20), rng.uniform(-1.0, 1.5));
        const double auc = compute_auc(a, b);
        CHECK(auc == doctest::Approx(pairwise_auc(a, b)).epsilon(1e-12));
        CHECK(compute_auc(b, a) == doctest::Approx(1.0 - auc).epsilon(1e-12));
        auto ta = a, tb = b;
        for (auto& x : ta) x = std::exp(3 * x) - 7;
        for (auto& x : tb) x = std::exp(3 * x) - 7;
        CHECK(compute_auc(ta, tb) == doctest::Approx(auc).epsilon(1e-12));
    }
    const std::vector<double> one{1.0}, none;
    CHECK(compute_auc(one, one) == 0.5);
    CHECK_THROWS_AS(compute_auc(none, one), ContractError);
}

TEST_CASE("IQR uses linear interpolation") {
    CHECK(interquartile_range({4, 1, 3, 2}) == doctest::Approx(1.5));
    CHECK(interquartile_range({7}) == 0.0);
    CHECK(interquartile_range({0, 10, 20, 30, 40}) == doctest::Approx(20.0));
    CHECK_THROWS_AS(interquartile_range({}), ContractError);
}

TEST_CASE("threshold is the median score and verdicts flip across it") {
    std::vector<ShadowModelRecord> recs{scored("a", Verdict::benign, -1.0), scored("b", Verdict::benign, 0.5),
                                        scored("c", Verdict::backdoored, 1.0), scored("d", Verdict::backdoored, 3.0)};
    CHECK(choose_threshold(recs) == doctest::Approx(0.75));
    const PopulationEval at_median = evaluate_population(recs, 0.75, ThresholdPolicy::train_median);
    CHECK(at_median.accuracy == 1.0);
    CHECK(at_median.auc == 1.0);
    const PopulationEval high = evaluate_population(recs, 1.0);
    CHECK(high.verdicts[2].verdict == Verdict::benign); // ties stay benign
    CHECK(high.accuracy == 0.75);
    CHECK(evaluate_population(recs, -5.0).accuracy == 0.5);

    std::istringstream csv(at_median.to_csv());
    std::string line;
    std::getline(csv, line);
    CHECK(line == "model_id,label,score,verdict");
    std::getline(csv, line);
    CHECK(line == "a,benign,-1,benign");

    recs[1].failed = true;
    recs[1].score.reset();
    CHECK(choose_threshold(recs) == 1.0);
    CHECK(evaluate_population(recs, 0.0).verdicts.size() == 3);
    CHECK(threshold_policy_from("test_median") == ThresholdPolicy::test_median);
    CHECK_THROWS_AS(threshold_policy_from("mean"), ConfigError);
}

TEST_CASE("shadow populations are labelled, reproducible and persist") {
    TinyWorld w;
    REQUIRE(w.pop.size() == 8);
    std::size_t backdoored = 0;
    for (std::size_t i = 0; i < w.pop.size(); ++i) {
        const auto& r = w.pop.records[i];
        CHECK_FALSE(r.failed);
        CHECK(r.attack.has_value() == (r.label == Verdict::backdoored));
        CHECK(r.asr.has_value() == r.attack.has_value());
        backdoored += r.label == Verdict::backdoored;
        const ShadowMember m = train_shadow(w.sp.train, w.sp.test, w.cfg, r.label == Verdict::backdoored,
                                            r.label == Verdict::backdoored ? i - 4 : i);
        CHECK(m.record.id == r.id);
        CHECK(parameter_hash(m.model) == parameter_hash(w.pop.models[i]));
    }
    CHECK(backdoored == 4);

    test::TempDir dir("pop");
    save_population(w.pop, dir.path());
    const ShadowPopulation back = load_population(dir.path());
    REQUIRE(back.size() == w.pop.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back.records[i].to_json() == w.pop.records[i].to_json());
        CHECK(parameter_hash(back.models[i]) == parameter_hash(w.pop.models[i]));
    }
}

TEST_CASE("meta training keeps queries in the unit box and round-trips") {
    TinyWorld w;
    const MetaClassifier meta = train_meta(w.pop.models, w.pop.records, small_meta());
    CHECK(meta.frozen());
    CHECK(meta.training_loss().size() == 5);
    CHECK(meta.feature_length() == 12);
    for (float q : meta.queries().data()) {
        CHECK(q >= 0.0f);
        CHECK(q <= 1.0f);
    }
    const MetaClassifier back = meta_from_container(to_container(meta));
    for (const auto& m : w.pop.models) CHECK(back.score(m) == meta.score(m));

    const MetaClassifier again = train_meta(w.pop.models, w.pop.records, small_meta());
    CHECK(again.score(w.pop.models[0]) == meta.score(w.pop.models[0]));

    ShadowPopulation scored_pop = w.pop;
    score_population(meta, scored_pop);
    for (std::size_t i = 0; i < scored_pop.size(); ++i) CHECK(*scored_pop.records[i].score == meta.score(w.pop.models[i]));

    const std::span<const Model> benign_only(w.pop.models.data(), 4);
    const std::span<const ShadowModelRecord> benign_recs(w.pop.records.data(), 4);
    CHECK_THROWS_AS(train_meta(benign_only, benign_recs, small_meta()), ContractError);
}

} // TEST_SUITE
