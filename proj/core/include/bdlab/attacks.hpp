#pragma once

#include "bdlab/datasets.hpp"
#include "bdlab/nets.hpp"
#include "bdlab/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace bdlab {

enum class TriggerKind { patch_square, patch_triangle, blend, jumbo };
enum class Anchor { bottom_right, bottom_left, top_left, top_right, position };

const char* trigger_kind_name(TriggerKind k);

// Attack geometry. Patch kinds overwrite a footprint with the pattern; blend
// mixes a full-image pattern with transparency alpha; jumbo is a sampled
// square footprint (possibly the whole image) mixed with alpha.
struct TriggerSpec {
    TriggerKind kind = TriggerKind::patch_square;
    Anchor anchor = Anchor::bottom_right;
    std::size_t row = 0; // top-left of the footprint when anchor == position
    std::size_t col = 0;
    double size_fraction = 0.035; // footprint area / image area
    std::size_t side_px = 0;      // overrides size_fraction when nonzero
    // Empty: solid `value`. Otherwise one value per footprint pixel and
    // channel (patch/jumbo) or per image pixel and channel (blend).
    std::vector<float> pattern;
    float value = 1.0f;
    double alpha = 1.0;
    int target = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static TriggerSpec from_json(const nlohmann::json& j);
};

// White square, bottom-right, 3.5% of the image area, target class 0.
TriggerSpec default_patch_trigger(int target = 0);
// Fixed full-image pattern mixed at alpha.
TriggerSpec default_blend_trigger(const Shape& image_shape, double alpha = 0.2, int target = 0,
                                  std::uint64_t pattern_seed = 7);

// Footprint side length in pixels for a square patch on an H x W image.
std::size_t patch_side(const TriggerSpec& trig, std::size_t height, std::size_t width);
// Per-pixel [H x W] mask in {0,1} (patch kinds) or alpha (blend/jumbo).
std::vector<float> trigger_mask(const TriggerSpec& trig, const Shape& image_shape);

// Stamps one C x H x W image; result clamped to [0, 1]. Throws
// GeometryError when the footprint does not fit.
std::vector<float> apply_trigger(std::span<const float> image, const Shape& image_shape, const TriggerSpec& trig);
// Stamps every row of a [B x C x H x W] tensor.
Tensor apply_trigger(const Tensor& images, const TriggerSpec& trig);
Dataset stamp_dataset(const Dataset& d, const TriggerSpec& trig);

struct PoisonConfig {
    TriggerSpec trigger;
    double poison_rate = 0.1;
    std::uint64_t seed = 1;

    nlohmann::json to_json() const;
    static PoisonConfig from_json(const nlohmann::json& j);
};

struct PoisonedDataset {
    Dataset data;
    std::vector<std::size_t> poisoned_indices; // sorted
};

std::size_t poison_count(std::size_t n, double rate);
PoisonedDataset poison_dataset(const Dataset& d, const PoisonConfig& cfg);

struct JumboBounds {
    std::size_t min_side = 2;
    std::size_t max_side = 5;
    double blend_probability = 0.5;
    double min_blend_alpha = 0.05;
    double max_blend_alpha = 0.5;
    double min_poison_rate = 0.05;
    double max_poison_rate = 0.5;
};

struct JumboSetting {
    TriggerSpec trigger; // kind == jumbo
    double poison_rate = 0.0;
    std::uint64_t seed = 0;

    bool blending() const { return trigger.alpha < 1.0; }
    PoisonConfig poison_config() const { return {trigger, poison_rate, seed}; }
    nlohmann::json to_json() const;
    static JumboSetting from_json(const nlohmann::json& j);
};

JumboSetting sample_jumbo(std::uint64_t seed, const Shape& image_shape, int num_classes, const JumboBounds& bounds = {});

struct PerturbConfig {
    double epsilon = 0.01;
    TrainConfig finetune;
    double asr_floor = 0.95;
};

struct PerturbResult {
    Model model;
    double max_abs_delta = 0.0;      // final iterate
    double max_step_delta = 0.0;     // max over every projected iterate
    double asr = 0.0;
    double cda = 0.0;
    bool reached_floor = false;
    std::string failure;             // set when the ASR floor was missed
    TrainHistory history;
};

// Clamps every parameter into [ref - eps, ref + eps], choosing float bounds so
// that |theta - ref| <= eps holds exactly when evaluated in double.
void project_linf(std::vector<Tensor>& params, const std::vector<Tensor>& reference, double epsilon);
double max_abs_delta(const Model& a, const Model& b);

// Fine-tunes a copy of `clean` on poisoned data, projecting after every
// optimizer step. Missing the ASR floor is reported, never thrown.
PerturbResult pgd_weight_finetune(const Model& clean, const Dataset& poisoned_train, const Dataset& test,
                                  const TriggerSpec& trig, const PerturbConfig& cfg);

} // namespace bdlab
