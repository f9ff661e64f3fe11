#include "bdlab/attacks.hpp"

#include "bdlab/errors.hpp"
#include "bdlab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bdlab {

const char* trigger_kind_name(TriggerKind k) {
    switch (k) {
    case TriggerKind::patch_square: return "patch_square";
    case TriggerKind::patch_triangle: return "patch_triangle";
    case TriggerKind::blend: return "blend";
    case TriggerKind::jumbo: return "jumbo";
    }
    return "?";
}

namespace {

TriggerKind kind_from(const std::string& s) {
    if (s == "patch_square") return TriggerKind::patch_square;
    if (s == "patch_triangle") return TriggerKind::patch_triangle;
    if (s == "blend") return TriggerKind::blend;
    if (s == "jumbo") return TriggerKind::jumbo;
    throw ConfigError("unknown trigger kind '" + s + "'");
}

const char* anchor_name(Anchor a) {
    switch (a) {
    case Anchor::bottom_right: return "bottom_right";
    case Anchor::bottom_left: return "bottom_left";
    case Anchor::top_left: return "top_left";
    case Anchor::top_right: return "top_right";
    case Anchor::position: return "position";
    }
    return "?";
}

Anchor anchor_from(const std::string& s) {
    if (s == "bottom_right") return Anchor::bottom_right;
    if (s == "bottom_left") return Anchor::bottom_left;
    if (s == "top_left") return Anchor::top_left;
    if (s == "top_right") return Anchor::top_right;
    if (s == "position") return Anchor::position;
    throw ConfigError("unknown trigger anchor '" + s + "'");
}

bool is_patch(TriggerKind k) {
    return k == TriggerKind::patch_square || k == TriggerKind::patch_triangle;
}

// Triangle leg length whose area L(L+1)/2 best matches the target area.
std::size_t triangle_leg(const TriggerSpec& trig, std::size_t h, std::size_t w) {
    if (trig.side_px) return trig.side_px;
    const double area = trig.size_fraction * static_cast<double>(h * w);
    const double leg = (std::sqrt(8.0 * area + 1.0) - 1.0) / 2.0;
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(leg)));
}

struct Footprint {
    std::size_t row, col, side;
};

Footprint footprint(const TriggerSpec& trig, std::size_t h, std::size_t w) {
    const std::size_t side = trig.kind == TriggerKind::patch_triangle ? triangle_leg(trig, h, w) : patch_side(trig, h, w);
    if (side > h || side > w) {
        throw GeometryError("trigger footprint " + std::to_string(side) + "px exceeds image " + std::to_string(h) +
                            "x" + std::to_string(w));
    }
    Footprint f{0, 0, side};
    switch (trig.anchor) {
    case Anchor::bottom_right: f.row = h - side; f.col = w - side; break;
    case Anchor::bottom_left: f.row = h - side; f.col = 0; break;
    case Anchor::top_left: break;
    case Anchor::top_right: f.col = w - side; break;
    case Anchor::position:
        if (trig.row + side > h || trig.col + side > w) {
            throw GeometryError("trigger footprint at (" + std::to_string(trig.row) + "," + std::to_string(trig.col) +
                                ") with side " + std::to_string(side) + " leaves the image");
        }
        f.row = trig.row;
        f.col = trig.col;
        break;
    }
    return f;
}

// Right-angle corner of the triangle sits on the anchor's image corner.
bool in_triangle(Anchor anchor, std::size_t i, std::size_t j, std::size_t leg) {
    const std::size_t ri = leg - 1 - i, rj = leg - 1 - j;
    switch (anchor) {
    case Anchor::bottom_left: return j <= i;
    case Anchor::bottom_right: return rj <= i;
    case Anchor::top_left: return j <= ri;
    case Anchor::top_right: return rj <= ri;
    case Anchor::position: return j <= i;
    }
    return false;
}

} // namespace

void TriggerSpec::validate() const {
    if (!(size_fraction > 0.0 && size_fraction <= 1.0)) throw ConfigError("trigger size fraction must lie in (0, 1]");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("trigger alpha must lie in (0, 1]");
    if (is_patch(kind) && alpha != 1.0) throw ConfigError("patch triggers require alpha == 1");
    if (target < 0) throw ConfigError("trigger target must be nonnegative");
    for (float p : pattern)
        if (!(p >= 0.0f && p <= 1.0f)) throw ConfigError("trigger pattern values must lie in [0, 1]");
}

nlohmann::json TriggerSpec::to_json() const {
    nlohmann::json j{{"kind", trigger_kind_name(kind)}, {"anchor", anchor_name(anchor)}, {"row", row},
                     {"col", col}, {"size_fraction", size_fraction}, {"side_px", side_px},
                     {"value", value}, {"alpha", alpha}, {"target", target}};
    j["pattern"] = pattern;
    return j;
}

TriggerSpec TriggerSpec::from_json(const nlohmann::json& j) {
    TriggerSpec t;
    for (const auto& [key, v] : j.items()) {
        if (key == "kind") t.kind = kind_from(v.get<std::string>());
        else if (key == "anchor") t.anchor = anchor_from(v.get<std::string>());
        else if (key == "row") t.row = v.get<std::size_t>();
        else if (key == "col") t.col = v.get<std::size_t>();
        else if (key == "size_fraction") t.size_fraction = v.get<double>();
        else if (key == "side_px") t.side_px = v.get<std::size_t>();
        else if (key == "pattern") t.pattern = v.get<std::vector<float>>();
        else if (key == "value") t.value = v.get<float>();
        else if (key == "alpha") t.alpha = v.get<double>();
        else if (key == "target") t.target = v.get<int>();
        else throw ConfigError("unknown trigger key '" + key + "'");
    }
    t.validate();
    return t;
}

TriggerSpec default_patch_trigger(int target) {
    TriggerSpec t;
    t.target = target;
    return t;
}

TriggerSpec default_blend_trigger(const Shape& image_shape, double alpha, int target, std::uint64_t pattern_seed) {
    const std::size_t c = image_shape.at(0), h = image_shape.at(1), w = image_shape.at(2);
    Rng rng(pattern_seed);
    const double fr = rng.uniform(0.6, 1.2), fc = rng.uniform(0.6, 1.2), phase = rng.uniform(0.0, 6.28);
    TriggerSpec t;
    t.kind = TriggerKind::blend;
    t.alpha = alpha;
    t.target = target;
    t.size_fraction = 1.0;
    t.pattern.resize(c * h * w);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t col = 0; col < w; ++col) {
                const double v = 0.5 + 0.5 * std::sin(fr * static_cast<double>(r) + phase) *
                                           std::cos(fc * static_cast<double>(col) - phase);
                t.pattern[(ch * h + r) * w + col] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
    return t;
}

std::size_t patch_side(const TriggerSpec& trig, std::size_t height, std::size_t width) {
    if (trig.side_px) return trig.side_px;
    const double area = trig.size_fraction * static_cast<double>(height * width);
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(std::sqrt(area))));
}

std::vector<float> trigger_mask(const TriggerSpec& trig, const Shape& image_shape) {
    const std::size_t h = image_shape.at(1), w = image_shape.at(2);
    if (trig.kind == TriggerKind::blend) return std::vector<float>(h * w, static_cast<float>(trig.alpha));
    std::vector<float> mask(h * w, 0.0f);
    const Footprint f = footprint(trig, h, w);
    for (std::size_t i = 0; i < f.side; ++i)
        for (std::size_t j = 0; j < f.side; ++j) {
            if (trig.kind == TriggerKind::patch_triangle && !in_triangle(trig.anchor, i, j, f.side)) continue;
            mask[(f.row + i) * w + f.col + j] = static_cast<float>(trig.alpha);
        }
    return mask;
}

std::vector<float> apply_trigger(std::span<const float> image, const Shape& image_shape, const TriggerSpec& trig) {
    if (image_shape.size() != 3 || image.size() != shape_numel(image_shape)) {
        throw DimensionError("apply_trigger: image does not match shape " + shape_str(image_shape));
    }
    const std::size_t c = image_shape[0], h = image_shape[1], w = image_shape[2];
    const auto a = static_cast<float>(trig.alpha);
    std::vector<float> out(image.begin(), image.end());
    if (trig.kind == TriggerKind::blend) {
        if (!trig.pattern.empty() && trig.pattern.size() != c * h * w) {
            throw GeometryError("blend pattern has " + std::to_string(trig.pattern.size()) + " values, image has " +
                                std::to_string(c * h * w));
        }
        for (std::size_t i = 0; i < out.size(); ++i) {
            const float p = trig.pattern.empty() ? trig.value : trig.pattern[i];
            out[i] = std::clamp((1.0f - a) * out[i] + a * p, 0.0f, 1.0f);
        }
        return out;
    }
    const Footprint f = footprint(trig, h, w);
    if (!trig.pattern.empty() && trig.pattern.size() != c * f.side * f.side) {
        throw GeometryError("patch pattern has " + std::to_string(trig.pattern.size()) + " values, footprint needs " +
                            std::to_string(c * f.side * f.side));
    }
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < f.side; ++i)
            for (std::size_t j = 0; j < f.side; ++j) {
                if (trig.kind == TriggerKind::patch_triangle && !in_triangle(trig.anchor, i, j, f.side)) continue;
                const float p = trig.pattern.empty() ? trig.value : trig.pattern[(ch * f.side + i) * f.side + j];
                float& dst = out[(ch * h + f.row + i) * w + f.col + j];
                dst = std::clamp((1.0f - a) * dst + a * p, 0.0f, 1.0f);
            }
    return out;
}

Tensor apply_trigger(const Tensor& images, const TriggerSpec& trig) {
    if (images.rank() != 4) throw DimensionError("apply_trigger expects [B x C x H x W]");
    const Shape img_shape{images.dim(1), images.dim(2), images.dim(3)};
    const std::size_t per = shape_numel(img_shape);
    std::vector<float> out;
    out.reserve(images.numel());
    auto d = images.data();
    for (std::size_t b = 0; b < images.dim(0); ++b) {
        const auto s = apply_trigger(d.subspan(b * per, per), img_shape, trig);
        out.insert(out.end(), s.begin(), s.end());
    }
    return Tensor(images.shape(), std::move(out));
}

Dataset stamp_dataset(const Dataset& d, const TriggerSpec& trig) {
    Dataset out = d;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto s = apply_trigger(d.image(i), d.image_shape(), trig);
        std::copy(s.begin(), s.end(), out.image_mut(i).begin());
    }
    return out;
}

nlohmann::json PoisonConfig::to_json() const {
    return {{"trigger", trigger.to_json()}, {"poison_rate", poison_rate}, {"seed", seed}};
}

PoisonConfig PoisonConfig::from_json(const nlohmann::json& j) {
    PoisonConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "trigger") c.trigger = TriggerSpec::from_json(v);
        else if (key == "poison_rate") c.poison_rate = v.get<double>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else throw ConfigError("unknown poison config key '" + key + "'");
    }
    return c;
}

std::size_t poison_count(std::size_t n, double rate) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("poison rate must lie in [0, 1]");
    return std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(rate * static_cast<double>(n))));
}

PoisonedDataset poison_dataset(const Dataset& d, const PoisonConfig& cfg) {
    cfg.trigger.validate();
    if (cfg.trigger.target >= d.num_classes) {
        throw ContractError("trigger target " + std::to_string(cfg.trigger.target) + " outside the dataset's classes");
    }
    const std::size_t count = poison_count(d.size(), cfg.poison_rate);
    std::vector<std::size_t> order(d.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(cfg.seed, 17));
    rng.shuffle(std::span<std::size_t>(order));
    order.resize(count);
    std::sort(order.begin(), order.end());
    PoisonedDataset out{d, order};
    for (std::size_t i : order) {
        const auto s = apply_trigger(d.image(i), d.image_shape(), cfg.trigger);
        std::copy(s.begin(), s.end(), out.data.image_mut(i).begin());
        out.data.labels[i] = cfg.trigger.target;
    }
    return out;
}

nlohmann::json JumboSetting::to_json() const {
    return {{"trigger", trigger.to_json()}, {"poison_rate", poison_rate}, {"seed", seed}};
}

JumboSetting JumboSetting::from_json(const nlohmann::json& j) {
    JumboSetting s;
    s.trigger = TriggerSpec::from_json(j.at("trigger"));
    s.poison_rate = j.at("poison_rate").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

JumboSetting sample_jumbo(std::uint64_t seed, const Shape& image_shape, int num_classes, const JumboBounds& bounds) {
    const std::size_t c = image_shape.at(0), h = image_shape.at(1), w = image_shape.at(2);
    if (bounds.min_side < 1 || bounds.max_side < bounds.min_side || bounds.max_side > std::min(h, w)) {
        throw ConfigError("jumbo side bounds do not fit the image");
    }
    Rng rng(mix_seed(seed, 23));
    JumboSetting s;
    s.seed = seed;
    s.trigger.kind = TriggerKind::jumbo;
    s.trigger.anchor = Anchor::position;
    if (rng.uniform() < bounds.blend_probability) {
        if (h != w) throw ConfigError("blending jumbo settings need square images");
        s.trigger.side_px = h;
        s.trigger.size_fraction = 1.0;
        s.trigger.alpha = rng.uniform(bounds.min_blend_alpha, bounds.max_blend_alpha);
    } else {
        const std::size_t side = bounds.min_side + rng.below(bounds.max_side - bounds.min_side + 1);
        s.trigger.side_px = side;
        s.trigger.size_fraction = static_cast<double>(side * side) / static_cast<double>(h * w);
        s.trigger.row = rng.below(h - side + 1);
        s.trigger.col = rng.below(w - side + 1);
        s.trigger.alpha = 1.0;
    }
    const std::size_t side = s.trigger.side_px;
    s.trigger.pattern.resize(c * side * side);
    for (auto& p : s.trigger.pattern) p = static_cast<float>(rng.uniform());
    s.trigger.target = static_cast<int>(rng.below(static_cast<std::size_t>(num_classes)));
    s.poison_rate = rng.uniform(bounds.min_poison_rate, bounds.max_poison_rate);
    return s;
}

void project_linf(std::vector<Tensor>& params, const std::vector<Tensor>& reference, double epsilon) {
    if (params.size() != reference.size()) throw ContractError("project_linf: parameter count mismatch");
    if (!(epsilon >= 0.0)) throw ContractError("project_linf: epsilon must be nonnegative");
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto data = params[p].mutable_data();
        auto ref = reference[p].data();
        if (data.size() != ref.size()) throw DimensionError("project_linf: tensor size mismatch");
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double r = ref[i];
            float hi = static_cast<float>(r + epsilon);
            while (static_cast<double>(hi) - r > epsilon) hi = std::nextafter(hi, -std::numeric_limits<float>::infinity());
            float lo = static_cast<float>(r - epsilon);
            while (r - static_cast<double>(lo) > epsilon) lo = std::nextafter(lo, std::numeric_limits<float>::infinity());
            data[i] = std::clamp(data[i], lo, hi);
        }
    }
}

double max_abs_delta(const Model& a, const Model& b) {
    const auto& pa = a.parameters();
    const auto& pb = b.parameters();
    if (pa.size() != pb.size()) throw ContractError("max_abs_delta: models differ in structure");
    double m = 0.0;
    for (std::size_t p = 0; p < pa.size(); ++p) {
        auto da = pa[p].data(), db = pb[p].data();
        if (da.size() != db.size()) throw DimensionError("max_abs_delta: tensor size mismatch");
        for (std::size_t i = 0; i < da.size(); ++i)
            m = std::max(m, std::abs(static_cast<double>(da[i]) - static_cast<double>(db[i])));
    }
    return m;
}

PerturbResult pgd_weight_finetune(const Model& clean, const Dataset& poisoned_train, const Dataset& test,
                                  const TriggerSpec& trig, const PerturbConfig& cfg) {
    if (!(cfg.epsilon >= 0.0)) throw ContractError("epsilon must be nonnegative");
    PerturbResult result;
    result.model = clean.clone();
    std::vector<Tensor> reference;
    for (const auto& p : clean.parameters()) reference.push_back(p.detach());
    if (cfg.epsilon > 0.0) {
        result.history = train_in_place(result.model, poisoned_train, cfg.finetune, [&](Model& m) {
            project_linf(m.parameters(), reference, cfg.epsilon);
            result.max_step_delta = std::max(result.max_step_delta, max_abs_delta(m, clean));
        });
    }
    result.model.set_trainable(false);
    result.max_abs_delta = max_abs_delta(result.model, clean);
    result.asr = evaluate_asr(result.model, test, trig);
    result.cda = evaluate_cda(result.model, test);
    result.reached_floor = result.asr >= cfg.asr_floor;
    if (!result.reached_floor) {
        result.failure = "ASR " + std::to_string(result.asr) + " below floor " + std::to_string(cfg.asr_floor) +
                         " within the fine-tuning budget";
    }
    return result;
}

} // namespace bdlab
