#include "bdlab/abs_scan.hpp"

#include "bdlab/errors.hpp"
#include "bdlab/parallel.hpp"
#include "bdlab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bdlab {

void AbsConfig::validate() const {
    if (grid_points < 2) throw ConfigError("stimulation grid needs at least 2 points");
    if (nsf_samples < 1) throw ConfigError("NSF sample count must be >= 1");
    if (candidates < 1) throw ConfigError("candidate count must be >= 1");
    if (!(mask_fraction > 0.0 && mask_fraction <= 1.0)) throw ConfigError("mask fraction must lie in (0, 1]");
    if (reverse_steps < 1 || batch_size < 1) throw ConfigError("reverse steps and batch size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("reverse learning rate must be positive");
    if (reasr_samples < 1) throw ConfigError("REASR sample count must be >= 1");
    if (!(reasr_threshold >= 0.0 && reasr_threshold <= 1.0)) throw ConfigError("REASR threshold must lie in [0, 1]");
}

nlohmann::json AbsConfig::to_json() const {
    return {{"grid_points", grid_points},       {"nsf_samples", nsf_samples},
            {"candidates", candidates},         {"layers", layers},
            {"mask_fraction", mask_fraction},   {"reverse_steps", reverse_steps},
            {"batch_size", batch_size},         {"learning_rate", learning_rate},
            {"others_weight", others_weight},   {"logit_weight", logit_weight},
            {"size_weight", size_weight},       {"reasr_samples", reasr_samples},
            {"reasr_threshold", reasr_threshold}, {"seed", seed}};
}

AbsConfig AbsConfig::from_json(const nlohmann::json& j) {
    AbsConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "grid_points") c.grid_points = v.get<std::size_t>();
        else if (key == "nsf_samples") c.nsf_samples = v.get<std::size_t>();
        else if (key == "candidates") c.candidates = v.get<std::size_t>();
        else if (key == "layers") c.layers = v.get<std::vector<std::size_t>>();
        else if (key == "mask_fraction") c.mask_fraction = v.get<double>();
        else if (key == "reverse_steps") c.reverse_steps = v.get<int>();
        else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
        else if (key == "learning_rate") c.learning_rate = v.get<double>();
        else if (key == "others_weight") c.others_weight = v.get<double>();
        else if (key == "logit_weight") c.logit_weight = v.get<double>();
        else if (key == "size_weight") c.size_weight = v.get<double>();
        else if (key == "reasr_samples") c.reasr_samples = v.get<std::size_t>();
        else if (key == "reasr_threshold") c.reasr_threshold = v.get<double>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else throw ConfigError("unknown ABS config key '" + key + "'");
    }
    c.validate();
    return c;
}

namespace {

nlohmann::json neuron_json(const NeuronId& n) { return {{"layer", n.layer}, {"unit", n.unit}}; }

NeuronId neuron_from(const nlohmann::json& j) { return {j.at("layer").get<std::size_t>(), j.at("unit").get<std::size_t>()}; }

nlohmann::json candidate_json(const CandidateNeuron& c) {
    return {{"neuron", neuron_json(c.neuron)}, {"label", c.label}, {"score", c.score}};
}

CandidateNeuron candidate_from(const nlohmann::json& j) {
    return {neuron_from(j.at("neuron")), j.at("label").get<int>(), j.at("score").get<double>()};
}

} // namespace

nlohmann::json AbsReport::to_json() const {
    nlohmann::json j{{"max_reasr", max_reasr}, {"threshold", threshold}, {"verdict", verdict_name(verdict)}};
    j["candidates"] = nlohmann::json::array();
    for (const auto& c : candidates) j["candidates"].push_back(candidate_json(c));
    j["results"] = nlohmann::json::array();
    for (const auto& r : results) {
        const auto& t = r.trigger;
        j["results"].push_back({{"candidate", candidate_json(r.candidate)},
                                {"activation", r.activation},
                                {"reasr", t.reversed_asr},
                                {"mask_l1", t.l1_norm},
                                {"iterations", t.iterations},
                                {"converged", t.converged},
                                {"image_shape", t.image_shape},
                                {"mask", t.mask},
                                {"pattern", t.pattern}});
    }
    return j;
}

AbsReport AbsReport::from_json(const nlohmann::json& j) {
    AbsReport r;
    r.max_reasr = j.at("max_reasr").get<double>();
    r.threshold = j.at("threshold").get<double>();
    r.verdict = verdict_from(j.at("verdict").get<std::string>());
    for (const auto& c : j.at("candidates")) r.candidates.push_back(candidate_from(c));
    for (const auto& e : j.at("results")) {
        CandidateResult cr;
        cr.candidate = candidate_from(e.at("candidate"));
        cr.activation = e.at("activation").get<double>();
        cr.trigger.label = cr.candidate.label;
        cr.trigger.reversed_asr = e.at("reasr").get<double>();
        cr.trigger.l1_norm = e.at("mask_l1").get<double>();
        cr.trigger.iterations = e.at("iterations").get<int>();
        cr.trigger.converged = e.at("converged").get<bool>();
        cr.trigger.image_shape = e.at("image_shape").get<Shape>();
        cr.trigger.mask = e.at("mask").get<std::vector<float>>();
        cr.trigger.pattern = e.at("pattern").get<std::vector<float>>();
        r.results.push_back(std::move(cr));
    }
    return r;
}

std::size_t layer_units(const Model& model, std::size_t layer) {
    const auto shapes = model.spec().output_shapes();
    if (layer >= shapes.size()) throw IndexError("layer " + std::to_string(layer) + " out of range");
    return shapes[layer].front();
}

std::vector<double> unit_values(const Tensor& activation, std::size_t unit) {
    if (activation.rank() != 2 && activation.rank() != 4) throw DimensionError("activation must be [B x N] or [B x C x H x W]");
    if (unit >= activation.dim(1)) throw IndexError("unit " + std::to_string(unit) + " out of range");
    const std::size_t batch = activation.dim(0), units = activation.dim(1);
    const std::size_t plane = activation.numel() / (batch * units);
    auto d = activation.data();
    std::vector<double> out(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        const float* p = d.data() + (b * units + unit) * plane;
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
        out[b] = s / static_cast<double>(plane);
    }
    return out;
}

Tensor override_unit(const Tensor& activation, std::size_t unit, std::span<const double> values) {
    const std::size_t batch = activation.dim(0), units = activation.dim(1);
    if (values.size() != batch) throw DimensionError("override needs one value per sample");
    const std::vector<double> current = unit_values(activation, unit);
    const std::size_t plane = activation.numel() / (batch * units);
    std::vector<float> data(activation.data().begin(), activation.data().end());
    for (std::size_t b = 0; b < batch; ++b) {
        float* p = data.data() + (b * units + unit) * plane;
        if (plane == 1) {
            p[0] = static_cast<float>(values[b]);
        } else {
            const auto shift = static_cast<float>(values[b] - current[b]);
            for (std::size_t i = 0; i < plane; ++i) p[i] += shift;
        }
    }
    return Tensor(activation.shape(), std::move(data));
}

std::vector<double> stimulation_grid(double max_activation, std::size_t points) {
    if (points < 2) throw ConfigError("stimulation grid needs at least 2 points");
    if (!(max_activation > 0.0) || !std::isfinite(max_activation)) {
        throw ConfigError("stimulation grid needs a positive finite maximum activation");
    }
    std::vector<double> grid(points);
    for (std::size_t i = 0; i < points; ++i)
        grid[i] = 2.0 * max_activation * static_cast<double>(i) / static_cast<double>(points - 1);
    return grid;
}

namespace {

std::vector<double> mean_rows(const Tensor& logits, std::size_t first, std::size_t count) {
    const std::size_t classes = logits.dim(1);
    std::vector<double> out(classes, 0.0);
    auto d = logits.data();
    for (std::size_t b = first; b < first + count; ++b)
        for (std::size_t c = 0; c < classes; ++c) out[c] += d[b * classes + c];
    for (auto& v : out) v /= static_cast<double>(count);
    return out;
}

StimulationProfile profile_from(const Model& model, const Tensor& activation, const std::vector<double>& base,
                                std::size_t layer, std::size_t unit, std::span<const double> grid) {
    NoGradGuard ng;
    const std::size_t batch = activation.dim(0);
    std::vector<Tensor> stimulated;
    stimulated.reserve(grid.size());
    for (double v : grid) {
        const std::vector<double> values(batch, v);
        stimulated.push_back(override_unit(activation, unit, values));
    }
    const Tensor logits = model.forward_from(layer, concat_rows(stimulated));
    StimulationProfile p;
    p.neuron = {layer, unit};
    p.grid.assign(grid.begin(), grid.end());
    p.base = base;
    for (std::size_t g = 0; g < grid.size(); ++g) p.outputs.push_back(mean_rows(logits, g * batch, batch));
    return p;
}

void check_layer(const Model& model, std::size_t layer) {
    const auto hidden = model.spec().hidden_activation_layers();
    if (std::find(hidden.begin(), hidden.end(), layer) == hidden.end()) {
        throw ConfigError("layer " + std::to_string(layer) + " of " + model.spec().name + " is not a hidden activation layer");
    }
}

} // namespace

StimulationProfile compute_nsf(const Model& model, const Tensor& samples, std::size_t layer, std::size_t unit,
                               std::span<const double> grid) {
    check_layer(model, layer);
    for (std::size_t i = 1; i < grid.size(); ++i)
        if (!(grid[i] > grid[i - 1])) throw ConfigError("stimulation grid must be strictly increasing");
    NoGradGuard ng;
    const Tensor act = model.forward_to(layer, samples);
    if (unit >= act.dim(1)) throw IndexError("unit " + std::to_string(unit) + " out of range");
    const Tensor logits = model.forward_from(layer, act);
    return profile_from(model, act, mean_rows(logits, 0, logits.dim(0)), layer, unit, grid);
}

CandidateNeuron elevation(const StimulationProfile& profile) {
    const std::size_t classes = profile.base.size();
    auto gap = [classes](const std::vector<double>& row, std::size_t label) {
        double other = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < classes; ++j)
            if (j != label) other = std::max(other, row[j]);
        return row[label] - other;
    };
    CandidateNeuron best{profile.neuron, 0, -std::numeric_limits<double>::infinity()};
    for (std::size_t l = 0; l < classes; ++l) {
        double peak = -std::numeric_limits<double>::infinity();
        for (const auto& row : profile.outputs) peak = std::max(peak, gap(row, l));
        const double lift = peak - gap(profile.base, l);
        if (lift > best.score) best = {profile.neuron, static_cast<int>(l), lift};
    }
    return best;
}

std::vector<CandidateNeuron> select_candidates(std::span<const StimulationProfile> profiles, std::size_t k) {
    std::vector<CandidateNeuron> all;
    all.reserve(profiles.size());
    for (const auto& p : profiles) all.push_back(elevation(p));
    std::stable_sort(all.begin(), all.end(), [](const CandidateNeuron& a, const CandidateNeuron& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.neuron < b.neuron;
    });
    if (all.size() > k) all.resize(k);
    return all;
}

double reasr(const Model& model, const Dataset& samples, const ReversedTrigger& trigger, int label) {
    NoGradGuard ng;
    const auto idx = samples.indices_not_of_class(label);
    if (idx.empty()) return 0.0;
    const Shape ishape = samples.image_shape();
    std::vector<float> stamped;
    stamped.reserve(idx.size() * shape_numel(ishape));
    for (std::size_t i : idx) {
        const auto s = trigger.apply(samples.image(i));
        stamped.insert(stamped.end(), s.begin(), s.end());
    }
    const Tensor x({idx.size(), ishape[0], ishape[1], ishape[2]}, std::move(stamped));
    std::size_t hits = 0;
    for (int p : model.predict(x))
        if (p == label) ++hits;
    return static_cast<double>(hits) / static_cast<double>(idx.size());
}

namespace {

struct AbsSplits {
    std::vector<std::size_t> nsf;
    std::vector<std::size_t> fit;
    std::vector<std::size_t> held;
};

// NSF samples take one per class in turn; the rest is shared between the
// reversal batches and the held-out REASR set.
AbsSplits abs_splits(const Dataset& clean, const AbsConfig& cfg) {
    std::vector<std::size_t> order(clean.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(cfg.seed, 31));
    rng.shuffle(std::span<std::size_t>(order));
    AbsSplits s;
    std::vector<bool> used(clean.size(), false);
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(clean.num_classes));
    for (std::size_t i : order) by_class[static_cast<std::size_t>(clean.labels[i])].push_back(i);
    for (std::size_t round = 0; s.nsf.size() < cfg.nsf_samples; ++round) {
        bool any = false;
        for (auto& bucket : by_class) {
            if (round < bucket.size() && s.nsf.size() < cfg.nsf_samples) {
                s.nsf.push_back(bucket[round]);
                used[bucket[round]] = true;
                any = true;
            }
        }
        if (!any) break;
    }
    std::vector<std::size_t> rest;
    for (std::size_t i : order)
        if (!used[i]) rest.push_back(i);
    const std::size_t held = std::min(cfg.reasr_samples, rest.size() / 2);
    s.held.assign(rest.end() - static_cast<std::ptrdiff_t>(held), rest.end());
    s.fit.assign(rest.begin(), rest.end() - static_cast<std::ptrdiff_t>(held));
    if (s.nsf.empty() || s.fit.empty() || s.held.empty()) {
        throw ContractError("ABS needs more clean samples than " + std::to_string(clean.size()));
    }
    return s;
}

CandidateResult reverse_on(const Model& frozen, const CandidateNeuron& cand, const Dataset& clean,
                           const AbsSplits& splits, const AbsConfig& cfg) {
    const Shape ishape = clean.image_shape();
    const std::size_t plane = ishape[1] * ishape[2];
    const double bound = cfg.mask_fraction * static_cast<double>(plane);
    Rng rng(mix_seed(cfg.seed, 4000 + cand.neuron.layer * 4096 + cand.neuron.unit));
    std::vector<float> m0(plane), p0(shape_numel(ishape));
    for (auto& v : m0) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (auto& v : p0) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    std::vector<Tensor> raw{Tensor({ishape[1], ishape[2]}, m0, true), Tensor(ishape, p0, true)};
    TrainConfig opt_cfg;
    opt_cfg.learning_rate = cfg.learning_rate;
    Optimizer opt(opt_cfg, raw.size());

    std::vector<std::size_t> fit = splits.fit;
    std::size_t cursor = fit.size();
    std::vector<std::size_t> batch_idx;
    const std::vector<int> targets(std::min(cfg.batch_size, fit.size()), cand.label);
    double reached = 0.0;
    for (int step = 0; step < cfg.reverse_steps; ++step) {
        batch_idx.clear();
        while (batch_idx.size() < targets.size()) {
            if (cursor == fit.size()) {
                rng.shuffle(std::span<std::size_t>(fit));
                cursor = 0;
            }
            batch_idx.push_back(fit[cursor++]);
        }
        const Tensor mask = sigmoid(raw[0]);
        const Tensor x = stamp(clean.batch(batch_idx), mask, sigmoid(raw[1]));
        const Tensor act = frozen.forward_to(cand.neuron.layer, x);
        const Tensor unit = mean(select_channel(act, cand.neuron.unit));
        Tensor loss = add(scale(unit, -1.0f), scale(mean(act), static_cast<float>(cfg.others_weight)));
        if (cfg.logit_weight > 0.0) {
            const Tensor logits = frozen.forward_from(cand.neuron.layer, act);
            loss = add(loss, scale(softmax_cross_entropy(logits, std::span<const int>(targets)),
                                   static_cast<float>(cfg.logit_weight)));
        }
        loss = add(loss, scale(relu(add_scalar(sum(mask), static_cast<float>(-bound))), static_cast<float>(cfg.size_weight)));
        backward(loss);
        opt.step(raw);
        reached = unit.item();
    }

    CandidateResult r;
    r.candidate = cand;
    r.activation = reached;
    ReversedTrigger& t = r.trigger;
    {
        NoGradGuard ng;
        const Tensor mask = sigmoid(raw[0]);
        const Tensor pattern = sigmoid(raw[1]);
        t.mask.assign(mask.data().begin(), mask.data().end());
        t.pattern.assign(pattern.data().begin(), pattern.data().end());
    }
    t.label = cand.label;
    t.image_shape = ishape;
    t.l1_norm = 0.0;
    for (float v : t.mask) t.l1_norm += v;
    t.iterations = cfg.reverse_steps;
    t.converged = t.l1_norm <= bound * 1.1;
    t.reversed_asr = reasr(frozen, clean.subset(splits.held), t, cand.label);
    return r;
}

} // namespace

CandidateResult reverse_for_neuron(const Model& model, const CandidateNeuron& candidate, const Dataset& clean,
                                   const AbsConfig& cfg) {
    cfg.validate();
    check_layer(model, candidate.neuron.layer);
    Model frozen = model.clone();
    frozen.set_trainable(false);
    return reverse_on(frozen, candidate, clean, abs_splits(clean, cfg), cfg);
}

AbsReport scan_abs(const Model& model, const Dataset& clean, const AbsConfig& cfg) {
    cfg.validate();
    if (clean.num_classes != model.spec().num_classes) throw ContractError("clean data and model disagree on class count");
    std::vector<std::size_t> layers = cfg.layers.empty() ? model.spec().hidden_activation_layers() : cfg.layers;
    for (std::size_t l : layers) check_layer(model, l);
    const AbsSplits splits = abs_splits(clean, cfg);

    std::vector<StimulationProfile> profiles;
    {
        NoGradGuard ng;
        const Tensor samples = clean.batch(splits.nsf);
        const std::vector<Tensor> trace = model.forward_trace(samples);
        const std::vector<double> base = mean_rows(trace.back(), 0, samples.dim(0));
        for (std::size_t layer : layers) {
            const Tensor& act = trace[layer];
            const std::size_t units = act.dim(1);
            double peak = 0.0;
            for (std::size_t u = 0; u < units; ++u)
                for (double v : unit_values(act, u)) peak = std::max(peak, v);
            if (!(peak > 0.0)) continue; // dead layer: nothing to stimulate
            const auto grid = stimulation_grid(peak, cfg.grid_points);
            const std::size_t first = profiles.size();
            profiles.resize(first + units);
            parallel_for(units, [&](std::size_t u) { profiles[first + u] = profile_from(model, act, base, layer, u, grid); });
        }
    }

    AbsReport report;
    report.threshold = cfg.reasr_threshold;
    report.candidates = select_candidates(profiles, cfg.candidates);
    report.results.resize(report.candidates.size());
    Model frozen = model.clone();
    frozen.set_trainable(false);
    parallel_for(report.candidates.size(), [&](std::size_t i) {
        report.results[i] = reverse_on(frozen, report.candidates[i], clean, splits, cfg);
    });
    for (const auto& r : report.results) report.max_reasr = std::max(report.max_reasr, r.trigger.reversed_asr);
    report.verdict = report.max_reasr > report.threshold ? Verdict::backdoored : Verdict::benign;
    return report;
}

} // namespace bdlab
