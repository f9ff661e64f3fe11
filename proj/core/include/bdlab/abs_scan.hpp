#pragma once

#include "bdlab/datasets.hpp"
#include "bdlab/nets.hpp"
#include "bdlab/neural_cleanse.hpp"
#include "bdlab/verdict.hpp"

#include <nlohmann/json.hpp>

#include <compare>
#include <cstdint>
#include <span>
#include <vector>

namespace bdlab {

inline constexpr double kReasrThreshold = 0.88;

// A dense unit, or a whole channel of a conv feature map.
struct NeuronId {
    std::size_t layer = 0;
    std::size_t unit = 0;
    auto operator<=>(const NeuronId&) const = default;
};

struct StimulationProfile {
    NeuronId neuron;
    std::vector<double> grid;                 // strictly increasing
    std::vector<std::vector<double>> outputs; // grid.size() x classes, sample-mean logits
    std::vector<double> base;                 // sample-mean logits without override
};

struct CandidateNeuron {
    NeuronId neuron;
    int label = 0;
    double score = 0.0;
};

struct AbsConfig {
    std::size_t grid_points = 20;
    std::size_t nsf_samples = 10;
    std::size_t candidates = 10;
    // Restricts the scan to these layer indices; empty scans every hidden
    // activation layer.
    std::vector<std::size_t> layers;

    double mask_fraction = 0.04; // mask L1 bound / image area
    int reverse_steps = 300;
    std::size_t batch_size = 20;
    double learning_rate = 0.1;
    double others_weight = 5.0;   // penalizes the rest of the layer
    double logit_weight = 0.0;    // pull toward the elevated label's logit
    double size_weight = 1.0;     // per pixel of mask above the bound
    std::size_t reasr_samples = 200;
    double reasr_threshold = kReasrThreshold;
    std::uint64_t seed = 1;

    void validate() const;
    nlohmann::json to_json() const;
    static AbsConfig from_json(const nlohmann::json& j);
};

struct CandidateResult {
    CandidateNeuron candidate;
    ReversedTrigger trigger; // trigger.reversed_asr is the REASR
    double activation = 0.0; // candidate activation reached on stamped inputs
};

struct AbsReport {
    std::vector<CandidateNeuron> candidates;
    std::vector<CandidateResult> results;
    double max_reasr = 0.0;
    double threshold = kReasrThreshold;
    Verdict verdict = Verdict::benign;

    nlohmann::json to_json() const;
    static AbsReport from_json(const nlohmann::json& j);
};

// Units a layer exposes: features for [B x N] outputs, channels for
// [B x C x H x W] outputs.
std::size_t layer_units(const Model& model, std::size_t layer);

// Per-sample value of one unit: the activation itself, or the spatial mean
// of the channel.
std::vector<double> unit_values(const Tensor& activation, std::size_t unit);

// Copy of `activation` with the unit set to values[b] per sample; conv
// channels are mean-shifted so their spatial mean equals values[b].
Tensor override_unit(const Tensor& activation, std::size_t unit, std::span<const double> values);

// `points` equispaced values from 0 to 2 * max_activation.
std::vector<double> stimulation_grid(double max_activation, std::size_t points);

StimulationProfile compute_nsf(const Model& model, const Tensor& samples, std::size_t layer, std::size_t unit,
                               std::span<const double> grid);

// Elevated label and lift of one profile.
CandidateNeuron elevation(const StimulationProfile& profile);
// Top k by score, descending; ties by neuron id ascending.
std::vector<CandidateNeuron> select_candidates(std::span<const StimulationProfile> profiles, std::size_t k = 10);

// Fraction of samples not of `label` that the model assigns to `label` once
// stamped with `trigger`.
double reasr(const Model& model, const Dataset& samples, const ReversedTrigger& trigger, int label);

CandidateResult reverse_for_neuron(const Model& model, const CandidateNeuron& candidate, const Dataset& clean,
                                   const AbsConfig& cfg);

AbsReport scan_abs(const Model& model, const Dataset& clean, const AbsConfig& cfg);

} // namespace bdlab
