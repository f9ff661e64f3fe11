#include "bdlab/neural_cleanse.hpp"

#include "bdlab/errors.hpp"
#include "bdlab/parallel.hpp"
#include "bdlab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bdlab {

void ReverseConfig::validate() const {
    if (epochs < 1) throw ConfigError("reverse epochs must be >= 1");
    if (steps_per_epoch < 1 || batch_size < 1) throw ConfigError("reverse steps and batch size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("reverse learning rate must be positive");
    if (!(initial_lambda >= 0.0)) throw ConfigError("initial lambda must be nonnegative");
    if (!(lambda_factor > 1.0)) throw ConfigError("lambda factor must exceed 1");
    if (!(asr_floor > 0.0 && asr_floor <= 1.0)) throw ConfigError("ASR floor must lie in (0, 1]");
    if (sample_count < 2) throw ConfigError("reverse sample count must be >= 2");
}

nlohmann::json ReverseConfig::to_json() const {
    return {{"epochs", epochs},
            {"steps_per_epoch", steps_per_epoch},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"initial_lambda", initial_lambda},
            {"lambda_factor", lambda_factor},
            {"asr_floor", asr_floor},
            {"sample_count", sample_count},
            {"seed", seed}};
}

ReverseConfig ReverseConfig::from_json(const nlohmann::json& j) {
    ReverseConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "epochs") c.epochs = v.get<int>();
        else if (key == "steps_per_epoch") c.steps_per_epoch = v.get<std::size_t>();
        else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
        else if (key == "learning_rate") c.learning_rate = v.get<double>();
        else if (key == "initial_lambda") c.initial_lambda = v.get<double>();
        else if (key == "lambda_factor") c.lambda_factor = v.get<double>();
        else if (key == "asr_floor") c.asr_floor = v.get<double>();
        else if (key == "sample_count") c.sample_count = v.get<std::size_t>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else throw ConfigError("unknown reverse config key '" + key + "'");
    }
    c.validate();
    return c;
}

std::vector<float> ReversedTrigger::apply(std::span<const float> image) const {
    const std::size_t plane = mask.size();
    if (image.size() != pattern.size() || plane == 0 || image.size() % plane != 0) {
        throw DimensionError("reversed trigger does not match image of " + std::to_string(image.size()) + " values");
    }
    std::vector<float> out(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) {
        const float m = mask[i % plane];
        out[i] = std::clamp((1.0f - m) * image[i] + m * pattern[i], 0.0f, 1.0f);
    }
    return out;
}

nlohmann::json ReversedTrigger::to_json() const {
    return {{"label", label},           {"l1_norm", l1_norm},       {"reversed_asr", reversed_asr},
            {"iterations", iterations}, {"final_lambda", final_lambda}, {"converged", converged}};
}

Container to_container(const ReversedTrigger& t) {
    nlohmann::json meta = t.to_json();
    meta["kind"] = "reversed_trigger";
    meta["image_shape"] = t.image_shape;
    Container c;
    c.metadata = meta.dump();
    c.tensors.push_back({"mask", {t.image_shape.at(1), t.image_shape.at(2)}, t.mask});
    c.tensors.push_back({"pattern", t.image_shape, t.pattern});
    return c;
}

ReversedTrigger trigger_from_container(const Container& c) {
    const auto meta = nlohmann::json::parse(c.metadata);
    if (meta.value("kind", "") != "reversed_trigger") throw ConfigError("container does not hold a reversed trigger");
    ReversedTrigger t;
    t.label = meta.at("label").get<int>();
    t.l1_norm = meta.at("l1_norm").get<double>();
    t.reversed_asr = meta.at("reversed_asr").get<double>();
    t.iterations = meta.at("iterations").get<int>();
    t.final_lambda = meta.at("final_lambda").get<double>();
    t.converged = meta.at("converged").get<bool>();
    t.image_shape = meta.at("image_shape").get<Shape>();
    t.mask = c.at("mask").values;
    t.pattern = c.at("pattern").values;
    return t;
}

void save_trigger(const ReversedTrigger& t, const std::filesystem::path& path) { write_container(to_container(t), path); }

ReversedTrigger load_trigger(const std::filesystem::path& path) { return trigger_from_container(read_container(path)); }

nlohmann::json AnomalyReport::to_json() const {
    nlohmann::json j{{"norms", norms},
                     {"median", median},
                     {"mad", mad},
                     {"constant", constant},
                     {"anomaly_index", std::isinf(anomaly_index) ? nlohmann::json("inf") : nlohmann::json(anomaly_index)},
                     {"verdict", verdict_name(verdict)}};
    j["flagged_label"] = flagged_label ? nlohmann::json(*flagged_label) : nlohmann::json(nullptr);
    j["triggers"] = nlohmann::json::array();
    for (const auto& t : triggers) j["triggers"].push_back(t.to_json());
    return j;
}

double median_of(std::vector<double> values) {
    if (values.empty()) throw ContractError("median of an empty set");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 ? values[n / 2] : (values[n / 2 - 1] + values[n / 2]) / 2.0;
}

AnomalyReport anomaly_index(std::span<const double> norms, double constant) {
    if (norms.size() < 2) throw ContractError("anomaly index needs at least two norms");
    for (double v : norms)
        if (!std::isfinite(v) || v < 0.0) throw ContractError("norms must be finite and nonnegative");
    AnomalyReport r;
    r.norms.assign(norms.begin(), norms.end());
    r.constant = constant;
    r.median = median_of(r.norms);
    std::vector<double> dev(norms.size());
    for (std::size_t i = 0; i < norms.size(); ++i) dev[i] = std::abs(norms[i] - r.median);
    r.mad = median_of(dev);
    const auto argmin = static_cast<int>(std::min_element(norms.begin(), norms.end()) - norms.begin());
    const double gap = std::abs(norms[static_cast<std::size_t>(argmin)] - r.median);
    if (r.mad == 0.0) {
        r.anomaly_index = gap == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    } else {
        r.anomaly_index = gap / (r.mad * constant);
    }
    if (r.anomaly_index > kAnomalyThreshold) {
        r.verdict = Verdict::backdoored;
        r.flagged_label = argmin;
    }
    return r;
}

namespace {

double mask_sum(const Tensor& mask) {
    double s = 0.0;
    for (float v : mask.data()) s += v;
    return s;
}

} // namespace

ReversedTrigger reverse_trigger(const Model& model, int label, const Dataset& clean, const ReverseConfig& cfg) {
    cfg.validate();
    const int classes = model.spec().num_classes;
    if (label < 0 || label >= classes) throw ContractError("label " + std::to_string(label) + " outside the model's classes");
    if (clean.num_classes != classes) throw ContractError("clean data and model disagree on class count");
    for (int c = 0; c < classes; ++c) {
        if (c != label && clean.indices_of_class(c).empty()) {
            throw ContractError("no clean sample of class " + std::to_string(c) + " available");
        }
    }

    Model frozen = model.clone();
    frozen.set_trainable(false);

    std::vector<std::size_t> pool = clean.indices_not_of_class(label);
    Rng rng(mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(label)));
    rng.shuffle(std::span<std::size_t>(pool));
    pool.resize(std::min(pool.size(), cfg.sample_count));
    const std::size_t held = std::max<std::size_t>(1, pool.size() / 5);
    std::vector<std::size_t> held_out(pool.end() - static_cast<std::ptrdiff_t>(held), pool.end());
    std::vector<std::size_t> fit(pool.begin(), pool.end() - static_cast<std::ptrdiff_t>(held));
    if (fit.empty()) fit = held_out;

    const Shape ishape = clean.image_shape();
    const std::size_t plane = ishape[1] * ishape[2];
    std::vector<float> m0(plane), p0(shape_numel(ishape));
    for (auto& v : m0) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (auto& v : p0) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    std::vector<Tensor> raw{Tensor({ishape[1], ishape[2]}, m0, true), Tensor(ishape, p0, true)};

    TrainConfig opt_cfg;
    opt_cfg.learning_rate = cfg.learning_rate;
    Optimizer opt(opt_cfg, raw.size());

    double lambda = cfg.initial_lambda;
    ReversedTrigger best;
    double best_norm = std::numeric_limits<double>::infinity();
    double best_fallback_asr = -1.0;
    bool converged = false;
    auto snapshot = [&](ReversedTrigger& dst) {
        NoGradGuard ng;
        const Tensor mask = sigmoid(raw[0]);
        const Tensor pattern = sigmoid(raw[1]);
        dst.mask.assign(mask.data().begin(), mask.data().end());
        dst.pattern.assign(pattern.data().begin(), pattern.data().end());
        dst.l1_norm = mask_sum(mask);
    };

    std::size_t cursor = fit.size();
    std::vector<std::size_t> batch_idx;
    int iterations = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::size_t hits = 0, seen = 0;
        for (std::size_t step = 0; step < cfg.steps_per_epoch; ++step) {
            batch_idx.clear();
            while (batch_idx.size() < std::min(cfg.batch_size, fit.size())) {
                if (cursor == fit.size()) {
                    rng.shuffle(std::span<std::size_t>(fit));
                    cursor = 0;
                }
                batch_idx.push_back(fit[cursor++]);
            }
            const Tensor x = clean.batch(batch_idx);
            const std::vector<int> y(batch_idx.size(), label);
            const Tensor mask = sigmoid(raw[0]);
            const Tensor logits = frozen.forward(stamp(x, mask, sigmoid(raw[1])));
            const Tensor loss = add(softmax_cross_entropy(logits, std::span<const int>(y)),
                                    scale(sum(mask), static_cast<float>(lambda)));
            backward(loss);
            opt.step(raw);
            ++iterations;
            auto ld = logits.data();
            const auto cols = static_cast<std::size_t>(classes);
            for (std::size_t b = 0; b < batch_idx.size(); ++b) {
                const float* row = ld.data() + b * cols;
                if (std::max_element(row, row + cols) - row == label) ++hits;
            }
            seen += batch_idx.size();
        }
        const double epoch_asr = static_cast<double>(hits) / static_cast<double>(seen);
        if (epoch_asr >= cfg.asr_floor) {
            converged = true;
            ReversedTrigger cand;
            snapshot(cand);
            if (cand.l1_norm < best_norm) {
                best_norm = cand.l1_norm;
                best = std::move(cand);
            }
            lambda *= cfg.lambda_factor;
        } else {
            if (!converged && epoch_asr > best_fallback_asr) {
                best_fallback_asr = epoch_asr;
                snapshot(best);
            }
            lambda /= cfg.lambda_factor;
        }
    }

    best.label = label;
    best.image_shape = ishape;
    best.iterations = iterations;
    best.final_lambda = lambda;
    best.converged = converged;

    std::size_t hits = 0;
    {
        NoGradGuard ng;
        std::vector<float> stamped;
        stamped.reserve(held_out.size() * shape_numel(ishape));
        for (std::size_t i : held_out) {
            const auto s = best.apply(clean.image(i));
            stamped.insert(stamped.end(), s.begin(), s.end());
        }
        const Tensor x({held_out.size(), ishape[0], ishape[1], ishape[2]}, std::move(stamped));
        for (int p : frozen.predict(x))
            if (p == label) ++hits;
    }
    best.reversed_asr = static_cast<double>(hits) / static_cast<double>(held_out.size());
    return best;
}

AnomalyReport scan_nc(const Model& model, const Dataset& clean, const ReverseConfig& cfg) {
    const auto classes = static_cast<std::size_t>(model.spec().num_classes);
    std::vector<ReversedTrigger> triggers(classes);
    parallel_for(classes, [&](std::size_t c) { triggers[c] = reverse_trigger(model, static_cast<int>(c), clean, cfg); });
    std::vector<double> norms;
    for (const auto& t : triggers) norms.push_back(t.l1_norm);
    AnomalyReport r = anomaly_index(norms);
    r.triggers = std::move(triggers);
    return r;
}

} // namespace bdlab
