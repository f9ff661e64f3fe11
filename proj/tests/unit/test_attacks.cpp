#include <doctest.h>

#include "bdlab/attacks.hpp"
#include "bdlab/errors.hpp"
#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <set>

using namespace bdlab;

TEST_SUITE("attacks") {

TEST_CASE("default patch sits in the bottom-right corner") {
    const Shape shape{1, 16, 16};
    const TriggerSpec trig = default_patch_trigger(3);
    const std::size_t side = patch_side(trig, 16, 16);
    CHECK(side == 3); // round(sqrt(0.035 * 256))
    const auto mask = trigger_mask(trig, shape);
    for (std::size_t r = 0; r < 16; ++r)
        for (std::size_t c = 0; c < 16; ++c) {
            const bool inside = r >= 16 - side && c >= 16 - side;
            CHECK(mask[r * 16 + c] == (inside ? 1.0f : 0.0f));
        }
}

TEST_CASE("stamping only touches the footprint") {
    Rng rng(6);
    const Shape shape{2, 9, 9};
    TriggerSpec trig;
    trig.anchor = Anchor::position;
    trig.row = 2;
    trig.col = 5;
    trig.side_px = 3;
    trig.value = 0.7f;
    std::vector<float> img(2 * 81);
    for (auto& v : img) v = static_cast<float>(rng.uniform());
    const auto out = apply_trigger(img, shape, trig);
    const auto mask = trigger_mask(trig, shape);
    for (std::size_t ch = 0; ch < 2; ++ch)
        for (std::size_t p = 0; p < 81; ++p) {
            const std::size_t i = ch * 81 + p;
            CHECK(out[i] == (mask[p] > 0 ? 0.7f : img[i]));
        }
    trig.col = 7;
    CHECK_THROWS_AS(apply_trigger(img, shape, trig), GeometryError);
}

TEST_CASE("blend mixes every pixel at alpha") {
    const Shape shape{1, 4, 4};
    const TriggerSpec trig = default_blend_trigger(shape, 0.25, 1);
    std::vector<float> img(16, 0.4f);
    const auto out = apply_trigger(img, shape, trig);
    for (std::size_t i = 0; i < 16; ++i) CHECK(out[i] == doctest::Approx(0.75 * 0.4 + 0.25 * trig.pattern[i]));
}

TEST_CASE("invalid triggers are configuration errors") {
    TriggerSpec t = default_patch_trigger();
    t.alpha = 0.5;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t = default_patch_trigger();
    t.size_fraction = 0.0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    CHECK(TriggerSpec::from_json(default_patch_trigger(4).to_json()).to_json() == default_patch_trigger(4).to_json());
}

TEST_CASE("poisoning relabels exactly round(rate * n) stamped samples") {
    const Dataset d = synth_strokes(200, 10, 5);
    for (double rate : {0.0, 0.015, 0.1, 0.5, 1.0}) {
        PoisonConfig cfg{default_patch_trigger(2), rate, 9};
        const PoisonedDataset p = poison_dataset(d, cfg);
        CHECK(p.poisoned_indices.size() == static_cast<std::size_t>(std::llround(rate * 200)));
        CHECK(std::is_sorted(p.poisoned_indices.begin(), p.poisoned_indices.end()));
        const std::set<std::size_t> hit(p.poisoned_indices.begin(), p.poisoned_indices.end());
        for (std::size_t i = 0; i < d.size(); ++i) {
            if (hit.count(i)) {
                CHECK(p.data.labels[i] == 2);
                const auto want = apply_trigger(d.image(i), d.image_shape(), cfg.trigger);
                CHECK(std::equal(want.begin(), want.end(), p.data.image(i).begin()));
            } else {
                CHECK(p.data.labels[i] == d.labels[i]);
                CHECK(std::equal(d.image(i).begin(), d.image(i).end(), p.data.image(i).begin()));
            }
        }
    }
    CHECK_THROWS_AS(poison_count(10, 1.5), ConfigError);
    CHECK_THROWS_AS(poison_dataset(d, PoisonConfig{default_patch_trigger(10), 0.1, 1}), ContractError);
}

TEST_CASE("poison selection is seeded") {
    const Dataset d = synth_strokes(100, 10, 5);
    const auto a = poison_dataset(d, {default_patch_trigger(), 0.2, 1}).poisoned_indices;
    CHECK(a == poison_dataset(d, {default_patch_trigger(), 0.2, 1}).poisoned_indices);
    CHECK(a != poison_dataset(d, {default_patch_trigger(), 0.2, 2}).poisoned_indices);
}

TEST_CASE("jumbo samples stay inside their bounds") {
    const Shape shape{1, 16, 16};
    const JumboBounds b;
    int blends = 0;
    for (std::uint64_t s = 0; s < 300; ++s) {
        const JumboSetting j = sample_jumbo(s, shape, 10, b);
        CHECK(j.trigger.kind == TriggerKind::jumbo);
        CHECK(j.poison_rate >= b.min_poison_rate);
        CHECK(j.poison_rate <= b.max_poison_rate);
        CHECK(j.trigger.target >= 0);
        CHECK(j.trigger.target < 10);
        if (j.blending()) {
            ++blends;
            CHECK(j.trigger.side_px == 16);
            CHECK(j.trigger.alpha >= b.min_blend_alpha);
            CHECK(j.trigger.alpha <= b.max_blend_alpha);
        } else {
            CHECK(j.trigger.side_px >= b.min_side);
            CHECK(j.trigger.side_px <= b.max_side);
            CHECK(j.trigger.row + j.trigger.side_px <= 16);
            CHECK(j.trigger.col + j.trigger.side_px <= 16);
        }
        CHECK(std::all_of(j.trigger.pattern.begin(), j.trigger.pattern.end(),
                          [](float p) { return p >= 0.f && p <= 1.f; }));
        CHECK(JumboSetting::from_json(j.to_json()).to_json() == j.to_json());
    }
    CHECK(blends > 90);
    CHECK(blends < 210);
    JumboBounds bad;
    bad.max_side = 20;
    CHECK_THROWS_AS(sample_jumbo(1, shape, 10, bad), ConfigError);
}

TEST_CASE("linf projection is exact in double") {
    Rng rng(12);
    for (double eps : {1e-3, 0.01, 0.3}) {
        std::vector<Tensor> ref{test::random_tensor(rng, {500}, -3, 3)};
        std::vector<Tensor> p{test::random_tensor(rng, {500}, -3, 3)};
        project_linf(p, ref, eps);
        for (std::size_t i = 0; i < 500; ++i) {
            const double d = std::abs(static_cast<double>(p[0].data()[i]) - static_cast<double>(ref[0].data()[i]));
            CHECK(d <= eps);
        }
    }
    std::vector<Tensor> ref{Tensor({2}, {0.1f, 0.2f})}, inside{Tensor({2}, {0.1005f, 0.1995f})};
    const std::vector<float> before(inside[0].data().begin(), inside[0].data().end());
    project_linf(inside, ref, 0.01);
    CHECK(std::equal(before.begin(), before.end(), inside[0].data().begin()));
    CHECK_THROWS_AS(project_linf(inside, ref, -1.0), ContractError);
}

TEST_CASE("weight fine-tuning stays within epsilon at every step") {
    const SplitPair sp = synth_strokes_split(300, 150, 10, 2);
    const ModelSpec spec = zoo_spec("mlp-2", sp.train.image_shape(), 10, 4);
    TrainConfig tc;
    tc.epochs = 2;
    tc.seed = 4;
    const Model clean = train(spec, sp.train, tc).model;
    const TriggerSpec trig = default_patch_trigger(0);
    const Dataset poisoned = poison_dataset(sp.train, {trig, 0.5, 3}).data;
    PerturbConfig pc;
    pc.epsilon = 0.02;
    pc.finetune = tc;
    pc.finetune.epochs = 1;
    const PerturbResult r = pgd_weight_finetune(clean, poisoned, sp.test, trig, pc);
    CHECK(r.max_step_delta > 0.0);
    CHECK(r.max_step_delta <= pc.epsilon);
    CHECK(r.max_abs_delta <= r.max_step_delta);
    CHECK(r.max_abs_delta == max_abs_delta(r.model, clean));
    CHECK(r.reached_floor == r.failure.empty());

    pc.epsilon = 0.0;
    const PerturbResult none = pgd_weight_finetune(clean, poisoned, sp.test, trig, pc);
    CHECK(parameter_hash(none.model) == parameter_hash(clean));
}

} // TEST_SUITE
