#include "bdlab/mntd.hpp"

#include "bdlab/errors.hpp"
#include "bdlab/parallel.hpp"
#include "bdlab/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>

namespace bdlab {

namespace {

template <typename T>
nlohmann::json opt_json(const std::optional<T>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::string fmt_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

nlohmann::json bounds_json(const JumboBounds& b) {
    return {{"min_side", b.min_side},
            {"max_side", b.max_side},
            {"blend_probability", b.blend_probability},
            {"min_blend_alpha", b.min_blend_alpha},
            {"max_blend_alpha", b.max_blend_alpha},
            {"min_poison_rate", b.min_poison_rate},
            {"max_poison_rate", b.max_poison_rate}};
}

JumboBounds bounds_from(const nlohmann::json& j) {
    JumboBounds b;
    for (const auto& [key, v] : j.items()) {
        if (key == "min_side") b.min_side = v.get<std::size_t>();
        else if (key == "max_side") b.max_side = v.get<std::size_t>();
        else if (key == "blend_probability") b.blend_probability = v.get<double>();
        else if (key == "min_blend_alpha") b.min_blend_alpha = v.get<double>();
        else if (key == "max_blend_alpha") b.max_blend_alpha = v.get<double>();
        else if (key == "min_poison_rate") b.min_poison_rate = v.get<double>();
        else if (key == "max_poison_rate") b.max_poison_rate = v.get<double>();
        else throw ConfigError("unknown jumbo bounds key '" + key + "'");
    }
    return b;
}

} // namespace

nlohmann::json ShadowModelRecord::to_json() const {
    return {{"id", id},
            {"label", verdict_name(label)},
            {"attack", attack ? attack->to_json() : nlohmann::json(nullptr)},
            {"train", train.to_json()},
            {"cda", cda},
            {"asr", opt_json(asr)},
            {"checkpoint", checkpoint},
            {"score", opt_json(score)},
            {"failed", failed},
            {"failure", failure}};
}

ShadowModelRecord ShadowModelRecord::from_json(const nlohmann::json& j) {
    ShadowModelRecord r;
    r.id = j.at("id").get<std::string>();
    r.label = verdict_from(j.at("label").get<std::string>());
    if (!j.at("attack").is_null()) r.attack = JumboSetting::from_json(j.at("attack"));
    r.train = TrainConfig::from_json(j.at("train"));
    r.cda = j.at("cda").get<double>();
    if (!j.at("asr").is_null()) r.asr = j.at("asr").get<double>();
    r.checkpoint = j.at("checkpoint").get<std::string>();
    if (!j.at("score").is_null()) r.score = j.at("score").get<double>();
    r.failed = j.at("failed").get<bool>();
    r.failure = j.at("failure").get<std::string>();
    if (r.attack.has_value() != (r.label == Verdict::backdoored)) {
        throw ValidationError("record " + r.id + ": attack setting must be present exactly for backdoored models");
    }
    return r;
}

void ShadowSetConfig::validate() const {
    if (n_benign < 1 || n_backdoor < 1) throw ConfigError("shadow populations need at least one model per class");
    benign_train.validate();
    backdoor_train.validate();
}

nlohmann::json ShadowSetConfig::to_json() const {
    return {{"n_benign", n_benign},
            {"n_backdoor", n_backdoor},
            {"model", model},
            {"base_width", base_width},
            {"benign_train", benign_train.to_json()},
            {"backdoor_train", backdoor_train.to_json()},
            {"jumbo", bounds_json(jumbo)},
            {"seed", seed},
            {"tag", tag}};
}

ShadowSetConfig ShadowSetConfig::from_json(const nlohmann::json& j) {
    ShadowSetConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "n_benign") c.n_benign = v.get<std::size_t>();
        else if (key == "n_backdoor") c.n_backdoor = v.get<std::size_t>();
        else if (key == "model") c.model = v.get<std::string>();
        else if (key == "base_width") c.base_width = v.get<std::size_t>();
        else if (key == "benign_train") c.benign_train = TrainConfig::from_json(v);
        else if (key == "backdoor_train") c.backdoor_train = TrainConfig::from_json(v);
        else if (key == "jumbo") c.jumbo = bounds_from(v);
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else if (key == "tag") c.tag = v.get<std::string>();
        else throw ConfigError("unknown shadow set key '" + key + "'");
    }
    c.validate();
    return c;
}

namespace {

std::string member_id(const ShadowSetConfig& cfg, bool backdoored, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "-%s%03zu", backdoored ? "t" : "b", i);
    return cfg.tag + buf;
}

} // namespace

ShadowMember train_shadow(const Dataset& train, const Dataset& test, const ShadowSetConfig& cfg, bool backdoored,
                          std::size_t index, const EpochHook& after_epoch) {
    const ModelSpec spec = zoo_spec(cfg.model, train.image_shape(), train.num_classes, cfg.base_width);
    ShadowMember m;
    ShadowModelRecord& rec = m.record;
    rec.id = member_id(cfg, backdoored, index);
    rec.checkpoint = rec.id + ".bdlb";
    rec.label = backdoored ? Verdict::backdoored : Verdict::benign;
    rec.train = backdoored ? cfg.backdoor_train : cfg.benign_train;
    rec.train.seed = mix_seed(cfg.seed, 2 * index + (backdoored ? 1 : 0));
    try {
        m.model = Model(spec, mix_seed(rec.train.seed, 0));
        if (!backdoored) {
            train_in_place(m.model, train, rec.train, {}, after_epoch);
        } else {
            rec.attack = sample_jumbo(mix_seed(cfg.seed, 1'000'000 + index), train.image_shape(), train.num_classes,
                                      cfg.jumbo);
            const PoisonedDataset poisoned = poison_dataset(train, rec.attack->poison_config());
            train_in_place(m.model, poisoned.data, rec.train, {}, after_epoch);
            rec.asr = evaluate_asr(m.model, test, rec.attack->trigger);
        }
        rec.cda = evaluate_cda(m.model, test);
    } catch (const TrainingError& e) {
        rec.failed = true;
        rec.failure = e.what();
        m.model = Model();
    }
    return m;
}

ShadowPopulation generate_shadow_set(const Dataset& train, const Dataset& test, const ShadowSetConfig& cfg) {
    cfg.validate();
    const std::size_t total = cfg.n_benign + cfg.n_backdoor;
    ShadowPopulation pop;
    pop.records.resize(total);
    pop.models.resize(total);
    parallel_for(total, [&](std::size_t job) {
        const bool backdoored = job >= cfg.n_benign;
        ShadowMember m = train_shadow(train, test, cfg, backdoored, backdoored ? job - cfg.n_benign : job);
        pop.records[job] = std::move(m.record);
        pop.models[job] = std::move(m.model);
    });
    std::size_t ok = 0;
    for (const auto& r : pop.records)
        if (!r.failed) ++ok;
    if (10 * ok < 9 * total) {
        throw TrainingError("only " + std::to_string(ok) + " of " + std::to_string(total) + " shadow models trained", -1);
    }
    return pop;
}

void save_population(const ShadowPopulation& pop, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest{{"kind", "shadow_population"}, {"records", nlohmann::json::array()}};
    for (std::size_t i = 0; i < pop.size(); ++i) {
        const auto& r = pop.records[i];
        manifest["records"].push_back(r.to_json());
        if (!r.failed) save_checkpoint(pop.models[i], dir / r.checkpoint, {{"shadow_id", r.id}});
    }
    const std::string text = manifest.dump(2) + "\n";
    write_file_bytes(dir / "manifest.json",
                     std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

ShadowPopulation load_population(const std::filesystem::path& dir) {
    const auto bytes = read_file_bytes(dir / "manifest.json");
    const auto manifest = nlohmann::json::parse(bytes.begin(), bytes.end());
    if (manifest.value("kind", "") != "shadow_population") throw ConfigError(dir.string() + " is not a shadow population");
    ShadowPopulation pop;
    for (const auto& j : manifest.at("records")) {
        ShadowModelRecord r = ShadowModelRecord::from_json(j);
        pop.models.push_back(r.failed ? Model() : load_checkpoint(dir / r.checkpoint).model);
        pop.records.push_back(std::move(r));
    }
    return pop;
}

void MetaConfig::validate() const {
    if (queries < 1 || hidden < 1) throw ConfigError("meta-classifier needs at least one query and hidden unit");
    if (epochs < 1 || batch_models < 1) throw ConfigError("meta epochs and batch size must be >= 1");
    if (!(learning_rate > 0.0) || !(query_learning_rate > 0.0)) throw ConfigError("meta learning rates must be positive");
}

nlohmann::json MetaConfig::to_json() const {
    return {{"queries", queries},
            {"hidden", hidden},
            {"epochs", epochs},
            {"batch_models", batch_models},
            {"learning_rate", learning_rate},
            {"query_learning_rate", query_learning_rate},
            {"seed", seed}};
}

MetaConfig MetaConfig::from_json(const nlohmann::json& j) {
    MetaConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "queries") c.queries = v.get<std::size_t>();
        else if (key == "hidden") c.hidden = v.get<std::size_t>();
        else if (key == "epochs") c.epochs = v.get<int>();
        else if (key == "batch_models") c.batch_models = v.get<std::size_t>();
        else if (key == "learning_rate") c.learning_rate = v.get<double>();
        else if (key == "query_learning_rate") c.query_learning_rate = v.get<double>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else throw ConfigError("unknown meta config key '" + key + "'");
    }
    c.validate();
    return c;
}

MetaClassifier::MetaClassifier(const Shape& image_shape, int num_classes, const MetaConfig& cfg)
    : image_shape_(image_shape), num_classes_(num_classes), cfg_(cfg) {
    cfg.validate();
    if (num_classes < 2) throw ConfigError("meta-classifier needs at least two classes");
    Rng rng(mix_seed(cfg.seed, 77));
    Shape qshape{cfg.queries};
    qshape.insert(qshape.end(), image_shape.begin(), image_shape.end());
    std::vector<float> q(shape_numel(qshape));
    for (auto& v : q) v = static_cast<float>(rng.uniform());
    queries_ = Tensor(qshape, std::move(q), true);
    auto he = [&rng](std::size_t fan_in, std::size_t n) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::vector<float> w(n);
        for (auto& v : w) v = static_cast<float>(rng.uniform(-bound, bound));
        return w;
    };
    const std::size_t f = feature_length();
    weights_.emplace_back(Shape{f, cfg.hidden}, he(f, f * cfg.hidden), true);
    weights_.push_back(Tensor::zeros({cfg.hidden}, true));
    weights_.emplace_back(Shape{cfg.hidden, 1}, he(cfg.hidden, cfg.hidden), true);
    weights_.push_back(Tensor::zeros({1}, true));
}

void MetaClassifier::check_model(const Model& model) const {
    if (model.spec().input_shape != image_shape_ || model.spec().num_classes != num_classes_) {
        throw ContractError("model " + model.spec().name + " does not match the meta-classifier's query shape " +
                            shape_str(image_shape_) + " and " + std::to_string(num_classes_) + " classes");
    }
}

Tensor MetaClassifier::logits_for(std::span<const Model* const> models) const {
    std::vector<Tensor> rows;
    rows.reserve(models.size());
    for (const Model* m : models) rows.push_back(reshape(m->forward(queries_), {1, feature_length()}));
    const Tensor features = concat_rows(rows);
    const Tensor hidden = relu(add_bias(matmul(features, weights_[0]), weights_[1]));
    const Tensor out = add_bias(matmul(hidden, weights_[2]), weights_[3]);
    return reshape(out, {models.size()});
}

double MetaClassifier::score(const Model& model) const {
    check_model(model);
    NoGradGuard ng;
    const Model* ptr = &model;
    return logits_for(std::span<const Model* const>(&ptr, 1)).data()[0];
}

MetaClassifier train_meta(std::span<const Model> models, std::span<const ShadowModelRecord> records,
                          const MetaConfig& cfg) {
    if (models.size() != records.size()) throw ContractError("models and records differ in length");
    std::vector<std::size_t> usable;
    bool has_benign = false, has_backdoor = false;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].failed) continue;
        usable.push_back(i);
        (records[i].label == Verdict::backdoored ? has_backdoor : has_benign) = true;
    }
    if (!has_benign || !has_backdoor) throw ContractError("meta-classifier training needs benign and backdoored models");
    const Model& first = models[usable.front()];
    MetaClassifier meta(first.spec().input_shape, first.spec().num_classes, cfg);
    for (std::size_t i : usable) meta.check_model(models[i]);

    TrainConfig wcfg, qcfg;
    wcfg.learning_rate = cfg.learning_rate;
    qcfg.learning_rate = cfg.query_learning_rate;
    Optimizer wopt(wcfg, meta.weights_.size()), qopt(qcfg, 1);
    std::vector<Tensor> qparams{meta.queries_};
    Rng rng(mix_seed(cfg.seed, 78));
    std::vector<const Model*> batch;
    std::vector<float> targets;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(usable));
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < usable.size(); start += cfg.batch_models) {
            const std::size_t end = std::min(usable.size(), start + cfg.batch_models);
            batch.clear();
            targets.clear();
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(&models[usable[i]]);
                targets.push_back(records[usable[i]].label == Verdict::backdoored ? 1.0f : 0.0f);
            }
            const Tensor loss = bce_with_logits(meta.logits_for(batch), std::span<const float>(targets));
            backward(loss);
            wopt.step(meta.weights_);
            qopt.step(qparams);
            for (auto& v : meta.queries_.mutable_data()) v = std::clamp(v, 0.0f, 1.0f);
            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(end - start);
        }
        meta.loss_log_.push_back(loss_sum / static_cast<double>(usable.size()));
    }
    meta.queries_.set_requires_grad(false);
    for (auto& w : meta.weights_) w.set_requires_grad(false);
    meta.frozen_ = true;
    return meta;
}

Container to_container(const MetaClassifier& meta) {
    Container c;
    c.metadata = nlohmann::json{{"kind", "meta_classifier"},
                                {"config", meta.cfg_.to_json()},
                                {"image_shape", meta.image_shape_},
                                {"num_classes", meta.num_classes_},
                                {"frozen", meta.frozen_},
                                {"training_loss", meta.loss_log_}}
                     .dump();
    c.tensors.push_back(NamedTensor::from("queries", meta.queries_));
    const char* names[] = {"hidden.weight", "hidden.bias", "out.weight", "out.bias"};
    for (std::size_t i = 0; i < meta.weights_.size(); ++i) c.tensors.push_back(NamedTensor::from(names[i], meta.weights_[i]));
    return c;
}

MetaClassifier meta_from_container(const Container& c) {
    const auto j = nlohmann::json::parse(c.metadata);
    if (j.value("kind", "") != "meta_classifier") throw ConfigError("container does not hold a meta-classifier");
    MetaClassifier m;
    m.cfg_ = MetaConfig::from_json(j.at("config"));
    m.image_shape_ = j.at("image_shape").get<Shape>();
    m.num_classes_ = j.at("num_classes").get<int>();
    m.frozen_ = j.at("frozen").get<bool>();
    m.loss_log_ = j.at("training_loss").get<std::vector<double>>();
    m.queries_ = c.at("queries").to_tensor();
    for (const char* n : {"hidden.weight", "hidden.bias", "out.weight", "out.bias"}) m.weights_.push_back(c.at(n).to_tensor());
    Shape qshape{m.cfg_.queries};
    qshape.insert(qshape.end(), m.image_shape_.begin(), m.image_shape_.end());
    if (m.queries_.shape() != qshape || m.weights_[0].shape() != Shape{m.feature_length(), m.cfg_.hidden}) {
        throw DimensionError("meta-classifier tensors do not match its config");
    }
    return m;
}

void score_population(const MetaClassifier& meta, ShadowPopulation& pop) {
    parallel_for(pop.size(), [&](std::size_t i) {
        if (!pop.records[i].failed) pop.records[i].score = meta.score(pop.models[i]);
    });
}

const char* threshold_policy_name(ThresholdPolicy p) {
    switch (p) {
    case ThresholdPolicy::train_median: return "train_median";
    case ThresholdPolicy::test_median: return "test_median";
    case ThresholdPolicy::custom: return "custom";
    }
    return "?";
}

ThresholdPolicy threshold_policy_from(const std::string& s) {
    if (s == "train_median") return ThresholdPolicy::train_median;
    if (s == "test_median") return ThresholdPolicy::test_median;
    if (s == "custom") return ThresholdPolicy::custom;
    throw ConfigError("unknown threshold policy '" + s + "'");
}

double choose_threshold(std::span<const ShadowModelRecord> records) {
    std::vector<double> scores;
    for (const auto& r : records)
        if (!r.failed && r.score) scores.push_back(*r.score);
    if (scores.empty()) throw ContractError("threshold needs at least one scored record");
    std::sort(scores.begin(), scores.end());
    const std::size_t n = scores.size();
    return n % 2 ? scores[n / 2] : (scores[n / 2 - 1] + scores[n / 2]) / 2.0;
}

double compute_auc(std::span<const double> benign, std::span<const double> backdoor) {
    if (benign.empty() || backdoor.empty()) throw ContractError("AUC needs both score samples");
    struct Item {
        double score;
        bool backdoor;
    };
    std::vector<Item> all;
    all.reserve(benign.size() + backdoor.size());
    for (double s : benign) all.push_back({s, false});
    for (double s : backdoor) all.push_back({s, true});
    std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });
    // Mann-Whitney U of the backdoor sample, tied groups sharing their mean rank.
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < all.size();) {
        std::size_t j = i;
        std::size_t in_group = 0;
        while (j < all.size() && all[j].score == all[i].score) {
            if (all[j].backdoor) ++in_group;
            ++j;
        }
        const double mean_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        rank_sum += mean_rank * static_cast<double>(in_group);
        i = j;
    }
    const auto nb = static_cast<double>(backdoor.size()), na = static_cast<double>(benign.size());
    return (rank_sum - nb * (nb + 1.0) / 2.0) / (na * nb);
}

std::string PopulationEval::to_csv() const {
    std::string out = "model_id,label,score,verdict\n";
    for (const auto& v : verdicts) {
        out += v.id + "," + verdict_name(v.truth) + "," + fmt_double(v.score) + "," + verdict_name(v.verdict) + "\n";
    }
    return out;
}

PopulationEval evaluate_population(std::span<const ShadowModelRecord> records, double threshold, ThresholdPolicy policy) {
    PopulationEval e;
    e.threshold = threshold;
    e.policy = policy;
    std::vector<double> benign, backdoor;
    std::size_t correct = 0;
    for (const auto& r : records) {
        if (r.failed) continue;
        if (!r.score) throw ContractError("record " + r.id + " has no score");
        MntdVerdict v{r.id, r.label, *r.score, *r.score > threshold ? Verdict::backdoored : Verdict::benign};
        if (v.verdict == v.truth) ++correct;
        (r.label == Verdict::backdoored ? backdoor : benign).push_back(v.score);
        e.verdicts.push_back(std::move(v));
    }
    if (e.verdicts.empty()) throw ContractError("no scored records to evaluate");
    e.accuracy = static_cast<double>(correct) / static_cast<double>(e.verdicts.size());
    e.auc = benign.empty() || backdoor.empty() ? 0.5 : compute_auc(benign, backdoor);
    return e;
}

double interquartile_range(std::vector<double> values) {
    if (values.empty()) throw ContractError("IQR of an empty set");
    std::sort(values.begin(), values.end());
    auto q = [&](double p) {
        const double pos = p * static_cast<double>(values.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, values.size() - 1);
        return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
    };
    return q(0.75) - q(0.25);
}

} // namespace bdlab
