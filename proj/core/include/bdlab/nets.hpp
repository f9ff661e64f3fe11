#pragma once

#include "bdlab/container.hpp"
#include "bdlab/datasets.hpp"
#include "bdlab/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace bdlab {

struct DenseLayer {
    std::size_t in = 0;
    std::size_t out = 0;
};

struct ConvLayer {
    std::size_t cin = 0;
    std::size_t cout = 0;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 1;
};

struct ActivationLayer {
    Activation kind = Activation::relu;
};

struct FlattenLayer {};

enum class PoolKind { max, avg };

struct PoolLayer {
    PoolKind kind = PoolKind::max;
    std::size_t window = 2;
};

using LayerDesc = std::variant<DenseLayer, ConvLayer, ActivationLayer, FlattenLayer, PoolLayer>;

struct ModelSpec {
    std::string name; // depth tag, e.g. "mlp-2"
    Shape input_shape; // C x H x W
    int num_classes = 0;
    std::vector<LayerDesc> layers;

    // Per-sample output shape after every layer; throws ConfigError when
    // adjacent layers do not compose or the head width != num_classes.
    std::vector<Shape> output_shapes() const;
    void validate() const { (void)output_shapes(); }
    std::size_t parameter_count() const;
    // Layers whose output is a hidden activation (excludes the head).
    std::vector<std::size_t> hidden_activation_layers() const;

    nlohmann::json to_json() const;
    static ModelSpec from_json(const nlohmann::json& j);
    bool operator==(const ModelSpec& other) const { return to_json() == other.to_json(); }
};

// Model zoo. Ids: "mlp-2", "mlp-4", "cnn-4+3", "cnn-8". base_width scales
// hidden widths/channels. Spatial side must be divisible by 4 for the CNNs.
ModelSpec zoo_spec(const std::string& id, const Shape& input_shape, int num_classes, std::size_t base_width = 8);
std::vector<std::string> zoo_ids();

class Model {
public:
    Model() = default;
    Model(ModelSpec spec, std::uint64_t init_seed);
    // Adopts the given parameters; throws DimensionError naming any tensor
    // whose name or shape does not match the spec.
    Model(ModelSpec spec, std::vector<NamedTensor> params);

    const ModelSpec& spec() const { return spec_; }
    std::vector<Tensor>& parameters() { return params_; }
    const std::vector<Tensor>& parameters() const { return params_; }
    const std::vector<std::string>& parameter_names() const { return names_; }

    void set_trainable(bool on);
    // Deep copy; parameters share no storage with the original.
    Model clone() const;

    Tensor forward(const Tensor& x) const;
    // Same layer composition over an explicit parameter list; lets gradient
    // checks evaluate the full model in double precision.
    template <typename T>
    BasicTensor<T> forward_with(const std::vector<BasicTensor<T>>& params, const BasicTensor<T>& x) const;

    // Output of every layer, in order; back() is the logits.
    std::vector<Tensor> forward_trace(const Tensor& x) const;
    // Output of layers 0 .. layer.
    Tensor forward_to(std::size_t layer, const Tensor& x) const;
    // Runs layers (layer + 1) .. end on an activation produced by `layer`.
    Tensor forward_from(std::size_t layer, const Tensor& activation) const;

    std::vector<int> predict(const Tensor& x) const;
    std::vector<NamedTensor> named_parameters() const;

private:
    ModelSpec spec_;
    std::vector<Tensor> params_;
    std::vector<std::string> names_;
    // layer index -> index of its weight in params_ (bias follows), or -1
    std::vector<int> param_slot_;

    void build_slots();
    template <typename T>
    BasicTensor<T> apply_layer(std::size_t layer, const std::vector<BasicTensor<T>>& params,
                               const BasicTensor<T>& x) const;
};

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
    int epochs = 5;
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    // Fraction of the training split used, as a seeded permutation prefix.
    double proportion = 1.0;
    std::uint64_t seed = 1;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;
    double accuracy = 0.0;
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
    // "epoch,loss,acc" header plus one row per epoch.
    std::string to_csv() const;
};

struct TrainResult {
    Model model;
    TrainHistory history;
};

class Optimizer {
public:
    Optimizer(const TrainConfig& cfg, std::size_t param_count);
    // Applies one update from the current gradients, then zeroes them.
    void step(std::vector<Tensor>& params);

private:
    TrainConfig cfg_;
    std::vector<std::vector<float>> m_, v_;
    long long t_ = 0;
};

using StepHook = std::function<void(Model&)>;
using EpochHook = std::function<void(const Model&, const EpochStats&)>;

// Subset of the training indices a config trains on.
std::vector<std::size_t> training_indices(std::size_t n, const TrainConfig& cfg);

TrainResult train(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg);
// Continues training an existing model; after_step runs after every update,
// after_epoch at the end of every epoch. Stopping after epoch e leaves the
// same state as training with epochs == e.
TrainHistory train_in_place(Model& model, const Dataset& data, const TrainConfig& cfg,
                            const StepHook& after_step = {}, const EpochHook& after_epoch = {});

struct TriggerSpec;

double evaluate_cda(const Model& model, const Dataset& test);
// Fraction of trigger-stamped samples predicted as the trigger's target.
// Samples already of the target class are skipped unless include_target.
double evaluate_asr(const Model& model, const Dataset& test, const TriggerSpec& trig, bool include_target = false);
// Fraction of rows of x predicted as label.
double fraction_predicted(const Model& model, const Tensor& x, int label);

struct Checkpoint {
    Model model;
    nlohmann::json training; // config, final metrics, seed, free-form
};

Container to_container(const Model& model, const nlohmann::json& training = nlohmann::json::object());
Checkpoint from_container(const Container& c);
void save_checkpoint(const Model& model, const std::filesystem::path& path,
                     const nlohmann::json& training = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Loads parameters into a model built from `expected`; mismatches raise
// DimensionError naming the offending tensor.
Model load_checkpoint_into(const std::filesystem::path& path, const ModelSpec& expected);

// FNV-1a over the encoded parameter container; equal hashes == equal bits.
std::uint64_t parameter_hash(const Model& model);

} // namespace bdlab
