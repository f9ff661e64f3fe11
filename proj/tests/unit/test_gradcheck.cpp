#include <doctest.h>

#include "gradcheck_battery.hpp"
#include "support.hpp"

using namespace bdlab;

TEST_SUITE("gradcheck") {

TEST_CASE("every op and full-model loss passes a double-precision finite-difference check") {
    test::GradcheckBattery battery;
    const auto entries = battery.run();
    CHECK(entries.size() > 60);
    for (const auto& e : entries) {
        INFO(e.name << " rel error " << e.max_rel_error);
        CHECK(e.max_rel_error < 1e-4);
    }
}

TEST_CASE("float32 gradcheck agrees loosely") {
    Rng rng(12);
    const Tensor a = test::random_tensor(rng, {3, 4});
    const auto res = finite_diff_gradcheck<float>([](const Tensor& x) { return sum(square(tanh(x))); }, a, 1e-2);
    CHECK(res.max_rel_error < 5e-2);
}

TEST_CASE("gradcheck rejects non-scalar outputs") {
    Rng rng(1);
    const Tensor a = test::random_tensor(rng, {2, 2});
    CHECK_THROWS(finite_diff_gradcheck<float>([](const Tensor& x) { return relu(x); }, a, 1e-3));
}

} // TEST_SUITE
