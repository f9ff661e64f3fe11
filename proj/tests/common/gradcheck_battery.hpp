#pragma once

// Finite-difference checks over every tensor op and over full-model losses,
// all evaluated in double.

#include "bdlab/nets.hpp"
#include "bdlab/rng.hpp"
#include "bdlab/tensor.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace bdlab::test {

struct GradcheckEntry {
    std::string name;
    double max_rel_error = 0.0;
};

inline TensorD random_d(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return TensorD(std::move(shape), std::move(v));
}

class GradcheckBattery {
public:
    static constexpr double kStep = 1e-5;

    std::vector<GradcheckEntry> run() {
        entries_.clear();
        ops();
        models();
        return entries_;
    }

private:
    Rng rng_{20240611};
    std::vector<GradcheckEntry> entries_;

    using Fn = std::function<TensorD(const TensorD&)>;

    // Scalarizes a tensor-valued op with a fixed random readout.
    void check(const std::string& name, const Fn& op, const TensorD& x) {
        auto readout = std::make_shared<TensorD>();
        auto seed = rng_.next_u64();
        Fn f = [op, readout, seed](const TensorD& in) {
            TensorD y = op(in);
            if (y.numel() == 1) return y;
            if (!readout->defined()) {
                Rng r(seed);
                *readout = random_d(r, y.shape());
            }
            return sum(mul(y, *readout));
        };
        entries_.push_back({name, finite_diff_gradcheck<double>(f, x, kStep).max_rel_error});
    }

    void ops() {
        Rng& r = rng_;
        const TensorD A = random_d(r, {3, 4}), B = random_d(r, {4, 5}), C = random_d(r, {3, 4});
        check("matmul/lhs", [&](const TensorD& x) { return matmul(x, B); }, A);
        check("matmul/rhs", [&](const TensorD& x) { return matmul(A, x); }, B);
        check("add", [&](const TensorD& x) { return add(x, C); }, A);
        check("sub/lhs", [&](const TensorD& x) { return sub(x, C); }, A);
        check("sub/rhs", [&](const TensorD& x) { return sub(C, x); }, A);
        check("mul", [&](const TensorD& x) { return mul(x, C); }, A);
        check("mul/self", [&](const TensorD& x) { return mul(x, x); }, A);
        check("scale", [](const TensorD& x) { return scale(x, -2.5); }, A);
        check("add_scalar", [](const TensorD& x) { return add_scalar(x, 0.7); }, A);
        const TensorD bias4 = random_d(r, {4});
        check("add_bias/dense/x", [&](const TensorD& x) { return add_bias(x, bias4); }, A);
        check("add_bias/dense/bias", [&](const TensorD& b) { return add_bias(A, b); }, bias4);
        const TensorD img = random_d(r, {2, 3, 6, 6}), bias3 = random_d(r, {3});
        check("add_bias/conv/x", [&](const TensorD& x) { return add_bias(x, bias3); }, img);
        check("add_bias/conv/bias", [&](const TensorD& b) { return add_bias(img, b); }, bias3);
        const TensorD k = random_d(r, {4, 3, 3, 3});
        check("conv2d/x", [&](const TensorD& x) { return conv2d(x, k, 1, 1); }, img);
        check("conv2d/kernel", [&](const TensorD& w) { return conv2d(img, w, 1, 1); }, k);
        const TensorD odd = random_d(r, {2, 3, 7, 7});
        check("conv2d/stride2/x", [&](const TensorD& x) { return conv2d(x, k, 2, 1); }, odd);
        check("conv2d/stride2/kernel", [&](const TensorD& w) { return conv2d(odd, w, 2, 1); }, k);
        check("conv2d/unbatched", [&](const TensorD& x) { return conv2d(x, k, 1, 0); }, random_d(r, {3, 5, 5}));
        check("relu", [](const TensorD& x) { return relu(x); }, A);
        check("sigmoid", [](const TensorD& x) { return sigmoid(x); }, scale(A, 3.0).detach());
        check("tanh", [](const TensorD& x) { return tanh(x); }, scale(A, 2.0).detach());
        check("max_pool2d", [](const TensorD& x) { return max_pool2d(x, 2); }, img);
        check("avg_pool2d", [](const TensorD& x) { return avg_pool2d(x, 2); }, img);
        check("reshape", [](const TensorD& x) { return reshape(x, Shape{2, 6}); }, A);
        check("flatten", [](const TensorD& x) { return flatten(x); }, img);
        check("select_channel/dense", [](const TensorD& x) { return select_channel(x, 2); }, A);
        check("select_channel/conv", [](const TensorD& x) { return select_channel(x, 1); }, img);
        check("concat_rows", [&](const TensorD& x) { return concat_rows<double>({x, C, x}); }, A);
        const TensorD sx = random_d(r, {2, 3, 4, 4}, 0, 1), mask = random_d(r, {4, 4}, 0, 1),
                      pattern = random_d(r, {3, 4, 4}, 0, 1);
        check("stamp/x", [&](const TensorD& x) { return stamp(x, mask, pattern); }, sx);
        check("stamp/mask", [&](const TensorD& m) { return stamp(sx, m, pattern); }, mask);
        check("stamp/pattern", [&](const TensorD& p) { return stamp(sx, mask, p); }, pattern);
        check("sum", [](const TensorD& x) { return sum(x); }, A);
        check("mean", [](const TensorD& x) { return mean(x); }, A);
        check("square", [](const TensorD& x) { return square(x); }, A);
        const std::vector<int> labels{1, 0, 4};
        check("softmax_cross_entropy",
              [&](const TensorD& x) { return softmax_cross_entropy(x, std::span<const int>(labels)); },
              scale(random_d(r, {3, 5}), 4.0).detach());
        const std::vector<double> targets{0.0, 1.0, 1.0, 0.25};
        check("bce_with_logits",
              [&](const TensorD& x) { return bce_with_logits(x, std::span<const double>(targets)); },
              scale(random_d(r, {4}), 3.0).detach());
    }

    void models() {
        const Shape in{1, 8, 8};
        const int classes = 3;
        const TensorD x = random_d(rng_, {2, 1, 8, 8}, 0, 1);
        const std::vector<int> labels{2, 0};
        for (const auto& id : zoo_ids()) {
            const Model model(zoo_spec(id, in, classes, 2), rng_.next_u64());
            std::vector<TensorD> params;
            for (const auto& p : model.parameters()) params.push_back(tensor_cast<double>(p));
            const auto& names = model.parameter_names();
            for (std::size_t slot = 0; slot < params.size(); ++slot) {
                check(id + "/loss/" + names[slot],
                      [&, slot](const TensorD& w) {
                          auto ps = params;
                          ps[slot] = w;
                          return softmax_cross_entropy(model.forward_with(ps, x), std::span<const int>(labels));
                      },
                      params[slot]);
            }
            check(id + "/loss/input",
                  [&](const TensorD& in_x) {
                      return softmax_cross_entropy(model.forward_with(params, in_x), std::span<const int>(labels));
                  },
                  x);
            // Trigger reversal objective through the squashed mask and pattern.
            const TensorD raw_mask = random_d(rng_, {8, 8}), raw_pattern = random_d(rng_, {1, 8, 8});
            const std::vector<int> target{1, 1};
            auto nc_loss = [&](const TensorD& m, const TensorD& p) {
                const TensorD sm = sigmoid(m);
                return add(softmax_cross_entropy(model.forward_with(params, stamp(x, sm, sigmoid(p))),
                                                 std::span<const int>(target)),
                           scale(sum(sm), 0.01));
            };
            check(id + "/reversal/mask", [&](const TensorD& m) { return nc_loss(m, raw_pattern); }, raw_mask);
            check(id + "/reversal/pattern", [&](const TensorD& p) { return nc_loss(raw_mask, p); }, raw_pattern);
        }
        // Meta-classifier objective with respect to the query images.
        const Model shadow(zoo_spec("mlp-2", in, classes, 2), 7);
        std::vector<TensorD> sp;
        for (const auto& p : shadow.parameters()) sp.push_back(tensor_cast<double>(p));
        const TensorD w1 = random_d(rng_, {4 * classes, 5}), b1 = random_d(rng_, {5}), w2 = random_d(rng_, {5, 1}),
                      b2 = random_d(rng_, {1});
        const std::vector<double> target{1.0};
        check("meta/queries",
              [&](const TensorD& q) {
                  const TensorD feat = reshape(shadow.forward_with(sp, q), Shape{1, 4 * static_cast<std::size_t>(classes)});
                  const TensorD logit = add_bias(matmul(relu(add_bias(matmul(feat, w1), b1)), w2), b2);
                  return bce_with_logits(reshape(logit, Shape{1}), std::span<const double>(target));
              },
              random_d(rng_, {4, 1, 8, 8}, 0, 1));
    }
};

} // namespace bdlab::test
