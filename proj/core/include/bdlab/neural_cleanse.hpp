#pragma once

#include "bdlab/container.hpp"
#include "bdlab/datasets.hpp"
#include "bdlab/nets.hpp"
#include "bdlab/verdict.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace bdlab {

inline constexpr double kMadConsistency = 1.4826;
inline constexpr double kAnomalyThreshold = 2.0;

struct ReverseConfig {
    int epochs = 30;
    std::size_t steps_per_epoch = 6;
    std::size_t batch_size = 32;
    double learning_rate = 0.1;
    double initial_lambda = 1e-3;
    double lambda_factor = 1.5;
    double asr_floor = 0.99;
    // Clean samples drawn per scan (excluding the probed label's own class);
    // a fifth of them is held out for the reported reversed ASR.
    std::size_t sample_count = 400;
    std::uint64_t seed = 1;

    void validate() const;
    nlohmann::json to_json() const;
    static ReverseConfig from_json(const nlohmann::json& j);
};

struct ReversedTrigger {
    int label = 0;
    std::vector<float> mask;    // H x W in [0, 1]
    std::vector<float> pattern; // C x H x W in [0, 1]
    Shape image_shape;
    double l1_norm = 0.0;
    double reversed_asr = 0.0; // on held-out samples
    int iterations = 0;
    double final_lambda = 0.0;
    bool converged = false; // the ASR floor was met at least once

    // (1 - mask) * x + mask * pattern for one image.
    std::vector<float> apply(std::span<const float> image) const;
    nlohmann::json to_json() const; // scalars only
};

Container to_container(const ReversedTrigger& t);
ReversedTrigger trigger_from_container(const Container& c);
void save_trigger(const ReversedTrigger& t, const std::filesystem::path& path);
ReversedTrigger load_trigger(const std::filesystem::path& path);

struct AnomalyReport {
    std::vector<double> norms;
    double median = 0.0;
    double mad = 0.0;
    double constant = kMadConsistency;
    double anomaly_index = 0.0; // +inf when MAD == 0 and min < median
    std::optional<int> flagged_label;
    Verdict verdict = Verdict::benign;
    std::vector<ReversedTrigger> triggers; // empty when built from norms only

    nlohmann::json to_json() const;
};

// Median with the mean-of-middle-two convention for even counts.
double median_of(std::vector<double> values);

// Outlier score of the smallest norm. Throws ContractError on fewer than two
// norms or on negative or non-finite entries.
AnomalyReport anomaly_index(std::span<const double> norms, double constant = kMadConsistency);

// Smallest mask (with pattern) that sends clean samples of other classes to
// `label`. Never throws on non-convergence; see ReversedTrigger::converged.
ReversedTrigger reverse_trigger(const Model& model, int label, const Dataset& clean, const ReverseConfig& cfg);

// Reverses every label (in parallel) and scores the norms.
AnomalyReport scan_nc(const Model& model, const Dataset& clean, const ReverseConfig& cfg);

} // namespace bdlab
