#include "bdlab/nets.hpp"

#include "bdlab/attacks.hpp"
#include "bdlab/errors.hpp"
#include "bdlab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace bdlab {

// ---------------------------------------------------------------------------
// ModelSpec

namespace {

template <class... Fs>
struct overloaded : Fs... {
    using Fs::operator()...;
};
template <class... Fs>
overloaded(Fs...) -> overloaded<Fs...>;

const char* activation_name(Activation a) {
    switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
    }
    return "?";
}

Activation activation_from(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "sigmoid") return Activation::sigmoid;
    if (s == "tanh") return Activation::tanh;
    throw ConfigError("unknown activation '" + s + "'");
}

std::string layer_label(std::size_t i) {
    return "layer" + std::to_string(i);
}

} // namespace

std::vector<Shape> ModelSpec::output_shapes() const {
    if (input_shape.size() != 3) throw ConfigError("model input shape must be C x H x W");
    if (layers.empty()) throw ConfigError("model has no layers");
    std::vector<Shape> shapes;
    Shape cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string where = name + " " + layer_label(i) + ": ";
        std::visit(overloaded{
                       [&](const DenseLayer& d) {
                           if (cur.size() != 1 || cur[0] != d.in) {
                               throw ConfigError(where + "dense expects [" + std::to_string(d.in) + "], got " +
                                                 shape_str(cur));
                           }
                           cur = {d.out};
                       },
                       [&](const ConvLayer& c) {
                           if (cur.size() != 3 || cur[0] != c.cin) {
                               throw ConfigError(where + "conv expects " + std::to_string(c.cin) +
                                                 " input channels, got " + shape_str(cur));
                           }
                           if (c.stride == 0) throw ConfigError(where + "conv stride must be positive");
                           const std::size_t sh = cur[1] + 2 * c.padding, sw = cur[2] + 2 * c.padding;
                           if (sh < c.kernel || sw < c.kernel || (sh - c.kernel) % c.stride || (sw - c.kernel) % c.stride) {
                               throw ConfigError(where + "conv output extent is not integral");
                           }
                           cur = {c.cout, (sh - c.kernel) / c.stride + 1, (sw - c.kernel) / c.stride + 1};
                       },
                       [&](const ActivationLayer&) {},
                       [&](const FlattenLayer&) { cur = {shape_numel(cur)}; },
                       [&](const PoolLayer& p) {
                           if (cur.size() != 3 || p.window == 0 || cur[1] % p.window || cur[2] % p.window) {
                               throw ConfigError(where + "pool window does not tile " + shape_str(cur));
                           }
                           cur = {cur[0], cur[1] / p.window, cur[2] / p.window};
                       },
                   },
                   layers[i]);
        shapes.push_back(cur);
    }
    if (cur.size() != 1 || cur[0] != static_cast<std::size_t>(num_classes)) {
        throw ConfigError(name + ": final layer width " + shape_str(cur) + " != num_classes " +
                          std::to_string(num_classes));
    }
    return shapes;
}

std::size_t ModelSpec::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) {
        if (const auto* d = std::get_if<DenseLayer>(&l)) n += d->in * d->out + d->out;
        if (const auto* c = std::get_if<ConvLayer>(&l)) n += c->cout * c->cin * c->kernel * c->kernel + c->cout;
    }
    return n;
}

std::vector<std::size_t> ModelSpec::hidden_activation_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (std::holds_alternative<ActivationLayer>(layers[i])) out.push_back(i);
    return out;
}

nlohmann::json ModelSpec::to_json() const {
    nlohmann::json j;
    j["name"] = name;
    j["input_shape"] = input_shape;
    j["num_classes"] = num_classes;
    auto arr = nlohmann::json::array();
    for (const auto& l : layers) {
        std::visit(overloaded{
                       [&](const DenseLayer& d) { arr.push_back({{"type", "dense"}, {"in", d.in}, {"out", d.out}}); },
                       [&](const ConvLayer& c) {
                           arr.push_back({{"type", "conv"},
                                          {"cin", c.cin},
                                          {"cout", c.cout},
                                          {"kernel", c.kernel},
                                          {"stride", c.stride},
                                          {"padding", c.padding}});
                       },
                       [&](const ActivationLayer& a) {
                           arr.push_back({{"type", "activation"}, {"kind", activation_name(a.kind)}});
                       },
                       [&](const FlattenLayer&) { arr.push_back({{"type", "flatten"}}); },
                       [&](const PoolLayer& p) {
                           arr.push_back({{"type", "pool"},
                                          {"kind", p.kind == PoolKind::max ? "max" : "avg"},
                                          {"window", p.window}});
                       },
                   },
                   l);
    }
    j["layers"] = std::move(arr);
    return j;
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
    ModelSpec s;
    try {
        s.name = j.at("name").get<std::string>();
        s.input_shape = j.at("input_shape").get<Shape>();
        s.num_classes = j.at("num_classes").get<int>();
        for (const auto& l : j.at("layers")) {
            const std::string type = l.at("type").get<std::string>();
            if (type == "dense") {
                s.layers.push_back(DenseLayer{l.at("in").get<std::size_t>(), l.at("out").get<std::size_t>()});
            } else if (type == "conv") {
                s.layers.push_back(ConvLayer{l.at("cin").get<std::size_t>(), l.at("cout").get<std::size_t>(),
                                             l.at("kernel").get<std::size_t>(), l.at("stride").get<std::size_t>(),
                                             l.at("padding").get<std::size_t>()});
            } else if (type == "activation") {
                s.layers.push_back(ActivationLayer{activation_from(l.at("kind").get<std::string>())});
            } else if (type == "flatten") {
                s.layers.push_back(FlattenLayer{});
            } else if (type == "pool") {
                const std::string kind = l.at("kind").get<std::string>();
                s.layers.push_back(PoolLayer{kind == "avg" ? PoolKind::avg : PoolKind::max, l.at("window").get<std::size_t>()});
            } else {
                throw ConfigError("unknown layer type '" + type + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed model spec: ") + e.what());
    }
    s.validate();
    return s;
}

ModelSpec zoo_spec(const std::string& id, const Shape& input_shape, int num_classes, std::size_t base_width) {
    if (input_shape.size() != 3) throw ConfigError("zoo_spec: input shape must be C x H x W");
    const std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
    const std::size_t b = base_width;
    const auto classes = static_cast<std::size_t>(num_classes);
    const ActivationLayer act{Activation::relu};
    ModelSpec s;
    s.name = id;
    s.input_shape = input_shape;
    s.num_classes = num_classes;
    auto& L = s.layers;
    if (id == "mlp-2") {
        L = {FlattenLayer{}, DenseLayer{c * h * w, 8 * b}, act, DenseLayer{8 * b, classes}};
    } else if (id == "mlp-4") {
        L = {FlattenLayer{}, DenseLayer{c * h * w, 8 * b}, act, DenseLayer{8 * b, 8 * b}, act,
             DenseLayer{8 * b, 8 * b}, act, DenseLayer{8 * b, classes}};
    } else if (id == "cnn-4+3") {
        if (h % 4 || w % 4) throw ConfigError("cnn-4+3 needs H and W divisible by 4");
        L = {ConvLayer{c, b}, act, ConvLayer{b, b}, act, PoolLayer{},
             ConvLayer{b, 2 * b}, act, ConvLayer{2 * b, 2 * b}, act, PoolLayer{},
             FlattenLayer{}, DenseLayer{2 * b * (h / 4) * (w / 4), 8 * b}, act,
             DenseLayer{8 * b, 4 * b}, act, DenseLayer{4 * b, classes}};
    } else if (id == "cnn-8") {
        if (h % 4 || w % 4) throw ConfigError("cnn-8 needs H and W divisible by 4");
        L = {ConvLayer{c, b}, act, ConvLayer{b, b}, act, ConvLayer{b, b}, act, ConvLayer{b, b}, act, PoolLayer{},
             ConvLayer{b, 2 * b}, act, ConvLayer{2 * b, 2 * b}, act, ConvLayer{2 * b, 2 * b}, act,
             ConvLayer{2 * b, 2 * b}, act, PoolLayer{},
             FlattenLayer{}, DenseLayer{2 * b * (h / 4) * (w / 4), 8 * b}, act, DenseLayer{8 * b, classes}};
    } else {
        throw ConfigError("unknown model zoo id '" + id + "'");
    }
    s.validate();
    return s;
}

std::vector<std::string> zoo_ids() {
    return {"mlp-2", "mlp-4", "cnn-4+3", "cnn-8"};
}

// ---------------------------------------------------------------------------
// Model

void Model::build_slots() {
    param_slot_.assign(spec_.layers.size(), -1);
    int slot = 0;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        if (std::holds_alternative<DenseLayer>(spec_.layers[i]) || std::holds_alternative<ConvLayer>(spec_.layers[i])) {
            param_slot_[i] = slot;
            slot += 2;
        }
    }
}

Model::Model(ModelSpec spec, std::uint64_t init_seed) : spec_(std::move(spec)) {
    spec_.validate();
    build_slots();
    Rng rng(init_seed);
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        Shape wshape;
        std::size_t fan_in = 0, fan_out = 0;
        if (const auto* d = std::get_if<DenseLayer>(&spec_.layers[i])) {
            wshape = {d->in, d->out};
            fan_in = d->in;
            fan_out = d->out;
        } else if (const auto* c = std::get_if<ConvLayer>(&spec_.layers[i])) {
            wshape = {c->cout, c->cin, c->kernel, c->kernel};
            fan_in = c->cin * c->kernel * c->kernel;
            fan_out = c->cout;
        } else {
            continue;
        }
        // He-uniform.
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::vector<float> wdata(shape_numel(wshape));
        for (auto& v : wdata) v = static_cast<float>(rng.uniform(-bound, bound));
        params_.emplace_back(wshape, std::move(wdata), true);
        names_.push_back(layer_label(i) + ".weight");
        params_.push_back(Tensor::zeros({fan_out}, true));
        names_.push_back(layer_label(i) + ".bias");
    }
}

Model::Model(ModelSpec spec, std::vector<NamedTensor> params) : spec_(std::move(spec)) {
    spec_.validate();
    build_slots();
    Model reference(spec_, 0);
    if (params.size() != reference.params_.size()) {
        throw DimensionError("model " + spec_.name + " expects " + std::to_string(reference.params_.size()) +
                             " parameter tensors, got " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& want_name = reference.names_[i];
        const auto& want_shape = reference.params_[i].shape();
        if (params[i].name != want_name) {
            throw DimensionError("parameter " + std::to_string(i) + " is '" + params[i].name + "', expected '" +
                                 want_name + "'");
        }
        if (params[i].shape != want_shape) {
            throw DimensionError("parameter '" + want_name + "' has shape " + shape_str(params[i].shape) +
                                 ", expected " + shape_str(want_shape));
        }
        params_.push_back(params[i].to_tensor(true));
        names_.push_back(want_name);
    }
}

void Model::set_trainable(bool on) {
    for (auto& p : params_) p.set_requires_grad(on);
}

Model Model::clone() const {
    Model m;
    m.spec_ = spec_;
    m.names_ = names_;
    m.param_slot_ = param_slot_;
    for (const auto& p : params_) {
        Tensor copy = p.detach();
        copy.set_requires_grad(p.requires_grad());
        m.params_.push_back(copy);
    }
    return m;
}

template <typename T>
BasicTensor<T> Model::apply_layer(std::size_t layer, const std::vector<BasicTensor<T>>& params,
                                  const BasicTensor<T>& x) const {
    const auto& desc = spec_.layers[layer];
    const int slot = param_slot_[layer];
    return std::visit(overloaded{
                          [&](const DenseLayer&) {
                              return add_bias(matmul(x, params[slot]), params[slot + 1]);
                          },
                          [&](const ConvLayer& c) {
                              return add_bias(conv2d(x, params[slot], c.stride, c.padding), params[slot + 1]);
                          },
                          [&](const ActivationLayer& a) { return activation(x, a.kind); },
                          [&](const FlattenLayer&) { return flatten(x); },
                          [&](const PoolLayer& p) {
                              return p.kind == PoolKind::max ? max_pool2d(x, p.window) : avg_pool2d(x, p.window);
                          },
                      },
                      desc);
}

template <typename T>
BasicTensor<T> Model::forward_with(const std::vector<BasicTensor<T>>& params, const BasicTensor<T>& x) const {
    if (params.size() != params_.size()) throw ContractError("forward_with: parameter count mismatch");
    if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != spec_.input_shape) {
        throw DimensionError("model " + spec_.name + " expects [B x " + shape_str(spec_.input_shape) + "], got " +
                             shape_str(x.shape()));
    }
    BasicTensor<T> h = x;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) h = apply_layer(i, params, h);
    return h;
}

Tensor Model::forward(const Tensor& x) const {
    return forward_with(params_, x);
}

std::vector<Tensor> Model::forward_trace(const Tensor& x) const {
    if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != spec_.input_shape) {
        throw DimensionError("model " + spec_.name + " expects [B x " + shape_str(spec_.input_shape) + "], got " +
                             shape_str(x.shape()));
    }
    std::vector<Tensor> outs;
    Tensor h = x;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        h = apply_layer(i, params_, h);
        outs.push_back(h);
    }
    return outs;
}

Tensor Model::forward_to(std::size_t layer, const Tensor& x) const {
    if (layer >= spec_.layers.size()) throw IndexError("layer " + std::to_string(layer) + " out of range");
    if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != spec_.input_shape) {
        throw DimensionError("model " + spec_.name + " expects [B x " + shape_str(spec_.input_shape) + "], got " +
                             shape_str(x.shape()));
    }
    Tensor h = x;
    for (std::size_t i = 0; i <= layer; ++i) h = apply_layer(i, params_, h);
    return h;
}

Tensor Model::forward_from(std::size_t layer, const Tensor& act) const {
    if (layer >= spec_.layers.size()) throw IndexError("layer " + std::to_string(layer) + " out of range");
    Tensor h = act;
    for (std::size_t i = layer + 1; i < spec_.layers.size(); ++i) h = apply_layer(i, params_, h);
    return h;
}

std::vector<int> Model::predict(const Tensor& x) const {
    NoGradGuard guard;
    const Tensor logits = forward(x);
    const std::size_t classes = logits.dim(1);
    std::vector<int> out(logits.dim(0));
    auto d = logits.data();
    for (std::size_t b = 0; b < out.size(); ++b) {
        const float* row = d.data() + b * classes;
        out[b] = static_cast<int>(std::max_element(row, row + classes) - row);
    }
    return out;
}

std::vector<NamedTensor> Model::named_parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < params_.size(); ++i) out.push_back(NamedTensor::from(names_[i], params_[i]));
    return out;
}

template BasicTensor<float> Model::forward_with<float>(const std::vector<BasicTensor<float>>&,
                                                      const BasicTensor<float>&) const;
template BasicTensor<double> Model::forward_with<double>(const std::vector<BasicTensor<double>>&,
                                                        const BasicTensor<double>&) const;

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1, got " + std::to_string(epochs));
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(proportion > 0.0 && proportion <= 1.0)) throw ConfigError("proportion must lie in (0, 1]");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"optimizer", optimizer == OptimizerKind::adam ? "adam" : "sgd"},
            {"beta1", beta1},
            {"beta2", beta2},
            {"epsilon", epsilon},
            {"proportion", proportion},
            {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "epochs") c.epochs = value.get<int>();
        else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
        else if (key == "learning_rate") c.learning_rate = value.get<double>();
        else if (key == "optimizer") {
            const auto s = value.get<std::string>();
            if (s != "adam" && s != "sgd") throw ConfigError("unknown optimizer '" + s + "'");
            c.optimizer = s == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
        } else if (key == "beta1") c.beta1 = value.get<double>();
        else if (key == "beta2") c.beta2 = value.get<double>();
        else if (key == "epsilon") c.epsilon = value.get<double>();
        else if (key == "proportion") c.proportion = value.get<double>();
        else if (key == "seed") c.seed = value.get<std::uint64_t>();
        else throw ConfigError("unknown train config key '" + key + "'");
    }
    return c;
}

std::string TrainHistory::to_csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "epoch,loss,acc\n";
    for (const auto& e : epochs) os << e.epoch << ',' << e.loss << ',' << e.accuracy << '\n';
    return os.str();
}

Optimizer::Optimizer(const TrainConfig& cfg, std::size_t param_count) : cfg_(cfg) {
    m_.resize(param_count);
    v_.resize(param_count);
}

void Optimizer::step(std::vector<Tensor>& params) {
    ++t_;
    const auto lr = static_cast<float>(cfg_.learning_rate);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const auto eps = static_cast<float>(cfg_.epsilon);
    const auto step_size = static_cast<float>(cfg_.learning_rate / bc1);
    const auto inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& t = params[p];
        if (!t.requires_grad() || !t.has_grad()) continue;
        auto data = t.mutable_data();
        auto g = t.grad();
        if (cfg_.optimizer == OptimizerKind::sgd) {
            for (std::size_t i = 0; i < data.size(); ++i) data[i] -= lr * g[i];
        } else {
            auto& m = m_[p];
            auto& v = v_[p];
            if (m.empty()) {
                m.assign(data.size(), 0.0f);
                v.assign(data.size(), 0.0f);
            }
            for (std::size_t i = 0; i < data.size(); ++i) {
                m[i] = b1 * m[i] + (1.0f - b1) * g[i];
                v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
                data[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
            }
        }
        t.zero_grad();
    }
}

std::vector<std::size_t> training_indices(std::size_t n, const TrainConfig& cfg) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (cfg.proportion < 1.0) {
        Rng rng(mix_seed(cfg.seed, 1));
        rng.shuffle(std::span<std::size_t>(idx));
        const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(cfg.proportion * static_cast<double>(n))));
        idx.resize(std::min(keep, n));
        std::sort(idx.begin(), idx.end());
    }
    return idx;
}

TrainHistory train_in_place(Model& model, const Dataset& data, const TrainConfig& cfg, const StepHook& after_step,
                            const EpochHook& after_epoch) {
    cfg.validate();
    if (data.num_classes != model.spec().num_classes) {
        throw ContractError("dataset has " + std::to_string(data.num_classes) + " classes, model expects " +
                            std::to_string(model.spec().num_classes));
    }
    if (data.size() == 0) throw ContractError("cannot train on an empty dataset");
    model.set_trainable(true);
    std::vector<std::size_t> order = training_indices(data.size(), cfg);
    Rng shuffle_rng(mix_seed(cfg.seed, 2));
    Optimizer opt(cfg, model.parameters().size());
    TrainHistory history;
    int last_finite = -1;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(std::span<std::size_t>(order));
        double loss_sum = 0.0;
        std::size_t correct = 0, seen = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::span<const std::size_t> idx(order.data() + start, end - start);
            const Tensor x = data.batch(idx);
            const std::vector<int> y = data.batch_labels(idx);
            const Tensor logits = model.forward(x);
            const Tensor loss = softmax_cross_entropy(logits, std::span<const int>(y));
            const float lv = loss.item();
            if (!std::isfinite(lv)) {
                throw TrainingError("non-finite loss in epoch " + std::to_string(epoch), last_finite);
            }
            backward(loss);
            opt.step(model.parameters());
            if (after_step) after_step(model);
            loss_sum += static_cast<double>(lv) * static_cast<double>(idx.size());
            const std::size_t classes = logits.dim(1);
            auto ld = logits.data();
            for (std::size_t b = 0; b < idx.size(); ++b) {
                const float* row = ld.data() + b * classes;
                if (std::max_element(row, row + classes) - row == y[b]) ++correct;
            }
            seen += idx.size();
        }
        const double epoch_loss = loss_sum / static_cast<double>(seen);
        history.epochs.push_back({epoch, epoch_loss, static_cast<double>(correct) / static_cast<double>(seen)});
        last_finite = epoch;
        if (after_epoch) after_epoch(model, history.epochs.back());
    }
    model.set_trainable(false);
    return history;
}

TrainResult train(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.num_classes != spec.num_classes) {
        throw ContractError("dataset has " + std::to_string(data.num_classes) + " classes, spec expects " +
                            std::to_string(spec.num_classes));
    }
    TrainResult result{Model(spec, mix_seed(cfg.seed, 0)), {}};
    result.history = train_in_place(result.model, data, cfg);
    return result;
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

constexpr std::size_t kEvalBatch = 256;

template <typename Fn>
void for_each_batch(std::size_t n, Fn&& fn) {
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < n; start += kEvalBatch) {
        const std::size_t end = std::min(n, start + kEvalBatch);
        idx.clear();
        for (std::size_t i = start; i < end; ++i) idx.push_back(i);
        fn(std::span<const std::size_t>(idx));
    }
}

} // namespace

double evaluate_cda(const Model& model, const Dataset& test) {
    if (test.size() == 0) return 0.0;
    std::size_t correct = 0;
    for_each_batch(test.size(), [&](std::span<const std::size_t> idx) {
        const auto pred = model.predict(test.batch(idx));
        for (std::size_t b = 0; b < idx.size(); ++b)
            if (pred[b] == test.labels[idx[b]]) ++correct;
    });
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

double evaluate_asr(const Model& model, const Dataset& test, const TriggerSpec& trig, bool include_target) {
    if (trig.target < 0 || trig.target >= model.spec().num_classes) {
        throw ContractError("trigger target " + std::to_string(trig.target) + " outside the model's classes");
    }
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < test.size(); ++i)
        if (include_target || test.labels[i] != trig.target) eligible.push_back(i);
    if (eligible.empty()) return 0.0;
    std::size_t hits = 0;
    std::vector<float> buf;
    for (std::size_t start = 0; start < eligible.size(); start += kEvalBatch) {
        const std::size_t end = std::min(eligible.size(), start + kEvalBatch);
        buf.clear();
        for (std::size_t k = start; k < end; ++k) {
            const auto stamped = apply_trigger(test.image(eligible[k]), test.image_shape(), trig);
            buf.insert(buf.end(), stamped.begin(), stamped.end());
        }
        const Tensor x({end - start, test.channels, test.height, test.width}, buf);
        for (int p : model.predict(x))
            if (p == trig.target) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(eligible.size());
}

double fraction_predicted(const Model& model, const Tensor& x, int label) {
    const auto pred = model.predict(x);
    if (pred.empty()) return 0.0;
    const auto hits = std::count(pred.begin(), pred.end(), label);
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Checkpoints

Container to_container(const Model& model, const nlohmann::json& training) {
    nlohmann::json meta;
    meta["kind"] = "model";
    meta["spec"] = model.spec().to_json();
    meta["training"] = training;
    Container c;
    c.metadata = meta.dump();
    c.tensors = model.named_parameters();
    return c;
}

Checkpoint from_container(const Container& c) {
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(c.metadata);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what(), 12);
    }
    if (meta.value("kind", "") != "model") throw FormatError("container does not hold a model", 12);
    ModelSpec spec = ModelSpec::from_json(meta.at("spec"));
    return {Model(std::move(spec), c.tensors), meta.value("training", nlohmann::json::object())};
}

void save_checkpoint(const Model& model, const std::filesystem::path& path, const nlohmann::json& training) {
    write_container(to_container(model, training), path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return from_container(read_container(path));
}

Model load_checkpoint_into(const std::filesystem::path& path, const ModelSpec& expected) {
    const Container c = read_container(path);
    return Model(expected, c.tensors);
}

std::uint64_t parameter_hash(const Model& model) {
    Container c;
    c.tensors = model.named_parameters();
    return fnv1a64(encode_container(c));
}

} // namespace bdlab
