#include <doctest.h>

#include "bdlab/errors.hpp"
#include "bdlab/nets.hpp"
#include "support.hpp"

#include <algorithm>

using namespace bdlab;

namespace {

TrainConfig quick(int epochs = 2, std::uint64_t seed = 3) {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 32;
    t.seed = seed;
    return t;
}

} // namespace

TEST_SUITE("nets") {

TEST_CASE("every zoo model maps images to class logits") {
    Rng rng(2);
    const Tensor x = test::random_tensor(rng, {3, 1, 16, 16}, 0, 1);
    for (const auto& id : zoo_ids()) {
        const ModelSpec spec = zoo_spec(id, {1, 16, 16}, 10, 4);
        const Model m(spec, 1);
        CHECK(m.forward(x).shape() == Shape{3, 10});
        CHECK(spec.output_shapes().back() == Shape{10});
        CHECK_FALSE(spec.hidden_activation_layers().empty());
        CHECK(ModelSpec::from_json(spec.to_json()) == spec);
    }
    CHECK_THROWS_AS(zoo_spec("cnn-8", {1, 10, 10}, 10), ConfigError);
    CHECK_THROWS_AS(zoo_spec("resnet", {1, 16, 16}, 10), ConfigError);
}

TEST_CASE("forward_to then forward_from reproduces forward") {
    Rng rng(4);
    const Tensor x = test::random_tensor(rng, {2, 1, 16, 16}, 0, 1);
    const Model m(zoo_spec("cnn-4+3", {1, 16, 16}, 10, 2), 9);
    const Tensor full = m.forward(x);
    for (std::size_t layer : m.spec().hidden_activation_layers()) {
        const Tensor y = m.forward_from(layer, m.forward_to(layer, x));
        for (std::size_t i = 0; i < full.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(full.data()[i]));
    }
}

TEST_CASE("training is deterministic, reduces loss and freezes the model") {
    const SplitPair sp = synth_strokes_split(400, 200, 10, 1);
    const ModelSpec spec = zoo_spec("mlp-2", sp.train.image_shape(), 10, 4);
    const TrainResult a = train(spec, sp.train, quick(4));
    const TrainResult b = train(spec, sp.train, quick(4));
    CHECK(parameter_hash(a.model) == parameter_hash(b.model));
    CHECK(parameter_hash(train(spec, sp.train, quick(4, 4)).model) != parameter_hash(a.model));
    REQUIRE(a.history.epochs.size() == 4);
    CHECK(a.history.epochs.back().loss < a.history.epochs.front().loss);
    CHECK(evaluate_cda(a.model, sp.test) > 0.5);
    for (const auto& p : a.model.parameters()) CHECK_FALSE(p.requires_grad());
    const std::string csv = a.history.to_csv();
    CHECK(csv.rfind("epoch,loss,acc\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
}

TEST_CASE("training proportion keeps a seeded ceil-sized prefix") {
    TrainConfig t = quick();
    t.proportion = 0.021;
    const auto idx = training_indices(1000, t);
    CHECK(idx.size() == 21);
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    CHECK(idx == training_indices(1000, t));
    t.proportion = 1.0;
    CHECK(training_indices(7, t).size() == 7);
}

TEST_CASE("epoch hook sees every epoch in order") {
    const SplitPair sp = synth_strokes_split(200, 50, 10, 2);
    Model m(zoo_spec("mlp-2", sp.train.image_shape(), 10, 2), 1);
    std::vector<int> seen;
    train_in_place(m, sp.train, quick(3), {}, [&](const Model&, const EpochStats& s) { seen.push_back(s.epoch); });
    CHECK(seen == std::vector<int>{1, 2, 3});
}

TEST_CASE("invalid training configs and class mismatches are rejected") {
    TrainConfig t = quick();
    t.learning_rate = -1;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t = quick();
    t.epochs = 0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_json({{"epochs", 2}, {"lr", 0.1}}), ConfigError);
    const Dataset d = synth_binary(20, 1);
    Model m(zoo_spec("mlp-2", d.image_shape(), 10, 2), 1);
    CHECK_THROWS_AS(train_in_place(m, d, quick()), ContractError);
}

TEST_CASE("divergent training raises a training error") {
    const SplitPair sp = synth_strokes_split(200, 50, 10, 2);
    Model m(zoo_spec("mlp-2", sp.train.image_shape(), 10, 2), 1);
    TrainConfig t = quick(3);
    t.optimizer = OptimizerKind::sgd;
    t.learning_rate = 1e30;
    CHECK_THROWS_AS(train_in_place(m, sp.train, t), TrainingError);
}

TEST_CASE("checkpoint save, load, save is byte-identical and validates the spec") {
    test::TempDir dir("ckpt");
    const Model m(zoo_spec("cnn-4+3", {1, 16, 16}, 10, 2), 5);
    save_checkpoint(m, dir.path() / "a.bdlb", {{"note", "x"}});
    const Checkpoint c = load_checkpoint(dir.path() / "a.bdlb");
    CHECK(c.training.at("note") == "x");
    CHECK(parameter_hash(c.model) == parameter_hash(m));
    save_checkpoint(c.model, dir.path() / "b.bdlb", c.training);
    CHECK(read_file_bytes(dir.path() / "a.bdlb") == read_file_bytes(dir.path() / "b.bdlb"));
    CHECK_THROWS(load_checkpoint_into(dir.path() / "a.bdlb", zoo_spec("cnn-4+3", {1, 16, 16}, 10, 4)));
    CHECK_THROWS_AS(load_checkpoint(dir.path() / "missing.bdlb"), IoError);
}

TEST_CASE("clone is deep and predict agrees with argmax") {
    Rng rng(6);
    Model m(zoo_spec("mlp-2", {1, 8, 8}, 3, 2), 1);
    Model c = m.clone();
    c.parameters()[0].mutable_data()[0] += 1.0f;
    CHECK(parameter_hash(c) != parameter_hash(m));
    const Tensor x = test::random_tensor(rng, {4, 1, 8, 8}, 0, 1);
    const Tensor logits = m.forward(x);
    const auto pred = m.predict(x);
    for (std::size_t b = 0; b < 4; ++b) {
        auto row = logits.data().subspan(b * 3, 3);
        CHECK(pred[b] == std::max_element(row.begin(), row.end()) - row.begin());
    }
}

} // TEST_SUITE
