#include <doctest.h>

#include "bdlab/errors.hpp"
#include "bdlab/neural_cleanse.hpp"
#include "bdlab/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <optional>
#include <stdexcept>
#include <string>

using namespace bdlab;

namespace {

// Sets BDLAB_WORKERS for one scope.
class WorkersEnv {
public:
    explicit WorkersEnv(const char* value) {
        if (const char* old = std::getenv("BDLAB_WORKERS")) old_ = old;
        ::setenv("BDLAB_WORKERS", value, 1);
    }
    ~WorkersEnv() {
        if (old_) ::setenv("BDLAB_WORKERS", old_->c_str(), 1);
        else ::unsetenv("BDLAB_WORKERS");
    }

private:
    std::optional<std::string> old_;
};

} // namespace

TEST_SUITE("parallel") {

TEST_CASE("worker count follows the environment") {
    {
        WorkersEnv env("3");
        CHECK(worker_count() == 3);
    }
    for (const char* bad : {"0", "-2", "four", "2x", ""}) {
        WorkersEnv env(bad);
        CHECK(worker_count() >= 1);
    }
}

TEST_CASE("every index runs once and the lowest failure wins") {
    WorkersEnv env("4");
    std::vector<int> hits(101, 0);
    parallel_for(hits.size(), [&](std::size_t i) { hits[i] += 1; });
    CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
    try {
        parallel_for(50, [](std::size_t i) {
            if (i == 7 || i == 30) throw std::runtime_error("job " + std::to_string(i));
        });
        FAIL("expected a rethrow");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()) == "job 7");
    }
    parallel_for(0, [](std::size_t) { FAIL("no jobs expected"); });
}

TEST_CASE("a parallel scan does not depend on the worker count") {
    const SplitPair sp = synth_strokes_split(200, 100, 4, 8, {.side = 8});
    TrainConfig tc;
    tc.epochs = 2;
    const Model m = train(zoo_spec("mlp-2", sp.train.image_shape(), 4, 4), sp.train, tc).model;
    ReverseConfig rc;
    rc.epochs = 2;
    rc.steps_per_epoch = 2;
    rc.sample_count = 40;
    auto scan = [&](const char* workers) {
        WorkersEnv env(workers);
        return scan_nc(m, sp.test, rc).to_json().dump();
    };
    const std::string serial = scan("1");
    CHECK(scan("4") == serial);
    CHECK(scan("3") == serial);
}

} // TEST_SUITE
