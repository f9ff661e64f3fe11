#pragma once

#include "bdlab/attacks.hpp"
#include "bdlab/container.hpp"
#include "bdlab/datasets.hpp"
#include "bdlab/nets.hpp"
#include "bdlab/verdict.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bdlab {

struct ShadowModelRecord {
    std::string id;
    Verdict label = Verdict::benign;
    std::optional<JumboSetting> attack; // present iff label == backdoored
    TrainConfig train;
    double cda = 0.0;
    std::optional<double> asr; // on the record's own trigger
    std::string checkpoint;    // file name inside the population directory
    std::optional<double> score;
    bool failed = false;
    std::string failure;

    nlohmann::json to_json() const;
    static ShadowModelRecord from_json(const nlohmann::json& j);
};

struct ShadowSetConfig {
    std::size_t n_benign = 64;
    std::size_t n_backdoor = 64;
    std::string model = "cnn-4+3";
    std::size_t base_width = 4;
    TrainConfig benign_train;   // seed is replaced per model
    TrainConfig backdoor_train; // seed is replaced per model
    JumboBounds jumbo;
    std::uint64_t seed = 1; // root of every per-model seed
    std::string tag = "shadow";

    void validate() const;
    nlohmann::json to_json() const;
    static ShadowSetConfig from_json(const nlohmann::json& j);
};

struct ShadowPopulation {
    std::vector<ShadowModelRecord> records;
    std::vector<Model> models; // parallel to records; failed entries hold an empty model

    std::size_t size() const { return records.size(); }
};

// Benign members differ only by seed; each backdoored member trains on data
// poisoned by its own jumbo sample. Throws TrainingError when fewer than 90%
// of the members train successfully.
ShadowPopulation generate_shadow_set(const Dataset& train, const Dataset& test, const ShadowSetConfig& cfg);

struct ShadowMember {
    ShadowModelRecord record;
    Model model;
};

// Trains member `index` of one class exactly as generate_shadow_set would;
// after_epoch sees every intermediate epoch. Metrics use `test`.
ShadowMember train_shadow(const Dataset& train, const Dataset& test, const ShadowSetConfig& cfg, bool backdoored,
                          std::size_t index, const EpochHook& after_epoch = {});

// Directory of checkpoints plus manifest.json.
void save_population(const ShadowPopulation& pop, const std::filesystem::path& dir);
ShadowPopulation load_population(const std::filesystem::path& dir);

struct MetaConfig {
    std::size_t queries = 10;
    std::size_t hidden = 20;
    int epochs = 60;
    std::size_t batch_models = 8;
    double learning_rate = 1e-3;
    double query_learning_rate = 1e-2;
    std::uint64_t seed = 1;

    void validate() const;
    nlohmann::json to_json() const;
    static MetaConfig from_json(const nlohmann::json& j);
};

class MetaClassifier {
public:
    MetaClassifier() = default;
    MetaClassifier(const Shape& image_shape, int num_classes, const MetaConfig& cfg);

    const Tensor& queries() const { return queries_; } // [k x C x H x W], values in [0, 1]
    const std::vector<Tensor>& weights() const { return weights_; }
    std::size_t feature_length() const { return cfg_.queries * static_cast<std::size_t>(num_classes_); }
    const MetaConfig& config() const { return cfg_; }
    bool frozen() const { return frozen_; }
    const std::vector<double>& training_loss() const { return loss_log_; }

    // Pre-sigmoid output; higher means more likely backdoored.
    double score(const Model& model) const;

    friend MetaClassifier train_meta(std::span<const Model> models, std::span<const ShadowModelRecord> records,
                                     const MetaConfig& cfg);
    friend Container to_container(const MetaClassifier& meta);
    friend MetaClassifier meta_from_container(const Container& c);

private:
    Shape image_shape_;
    int num_classes_ = 0;
    MetaConfig cfg_;
    Tensor queries_;
    std::vector<Tensor> weights_; // hidden weight, hidden bias, out weight, out bias
    std::vector<double> loss_log_;
    bool frozen_ = false;

    Tensor logits_for(std::span<const Model* const> models) const;
    void check_model(const Model& model) const;
};

// Jointly fits the queries and the classifier by binary cross-entropy.
// Throws ContractError unless both labels are present.
MetaClassifier train_meta(std::span<const Model> models, std::span<const ShadowModelRecord> records,
                          const MetaConfig& cfg);

Container to_container(const MetaClassifier& meta);
MetaClassifier meta_from_container(const Container& c);

// Fills every non-failed record's score; scoring runs in parallel.
void score_population(const MetaClassifier& meta, ShadowPopulation& pop);

enum class ThresholdPolicy { train_median, test_median, custom };
const char* threshold_policy_name(ThresholdPolicy p);
ThresholdPolicy threshold_policy_from(const std::string& s);

// Median of the scored records (mean of the middle two for even counts).
double choose_threshold(std::span<const ShadowModelRecord> records);

// Probability that a random backdoored score exceeds a random benign one,
// ties counting one half.
double compute_auc(std::span<const double> benign, std::span<const double> backdoor);

struct MntdVerdict {
    std::string id;
    Verdict truth = Verdict::benign;
    double score = 0.0;
    Verdict verdict = Verdict::benign;
};

struct PopulationEval {
    std::vector<MntdVerdict> verdicts;
    double threshold = 0.0;
    ThresholdPolicy policy = ThresholdPolicy::custom;
    double accuracy = 0.0;
    double auc = 0.0;

    // "model_id,label,score,verdict"
    std::string to_csv() const;
};

PopulationEval evaluate_population(std::span<const ShadowModelRecord> records, double threshold,
                                   ThresholdPolicy policy = ThresholdPolicy::custom);

// Score quartile spread (q3 - q1, linear interpolation).
double interquartile_range(std::vector<double> values);

} // namespace bdlab
