#include "bdlab/harness.hpp"

#include "bdlab/container.hpp"
#include "bdlab/errors.hpp"
#include "bdlab/parallel.hpp"
#include "bdlab/rng.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace bdlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("short write to " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double parse_double(const std::string& s) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ValidationError("not a number: '" + s + "'");
    return v;
}

bool is_numeric_seed(const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return std::nan("");
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string seed_dir(std::uint64_t seed) { return "seed" + std::to_string(seed); }

} // namespace

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

// ---------------------------------------------------------------------------
// Configuration

json DataConfig::to_json() const {
    return {{"kind", kind},   {"n_train", n_train}, {"n_test", n_test},  {"classes", classes},
            {"side", side},   {"seed", seed},       {"idx_dir", idx_dir}};
}

DataConfig DataConfig::from_json(const json& j) {
    DataConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "kind") c.kind = v.get<std::string>();
        else if (key == "n_train") c.n_train = v.get<std::size_t>();
        else if (key == "n_test") c.n_test = v.get<std::size_t>();
        else if (key == "classes") c.classes = v.get<int>();
        else if (key == "side") c.side = v.get<std::size_t>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else if (key == "idx_dir") c.idx_dir = v.get<std::string>();
        else throw ConfigError("unknown data key '" + key + "'");
    }
    return c;
}

namespace {

Dataset head(const Dataset& d, std::size_t n) {
    if (n == 0 || n >= d.size()) return d;
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return d.subset(idx);
}

Dataset to_side(const Dataset& d, std::size_t side) {
    if (d.height == side) return d;
    if (d.height % side != 0 || d.width % side != 0 || d.height / side != d.width / side) {
        throw ConfigError("cannot downsample " + std::to_string(d.height) + "x" + std::to_string(d.width) + " to " +
                          std::to_string(side));
    }
    return downsample(d, d.height / side);
}

} // namespace

SplitPair load_data(const DataConfig& cfg, std::uint64_t run_seed) {
    const std::uint64_t seed = cfg.seed != 0 ? cfg.seed : run_seed;
    SynthOptions opts;
    opts.side = cfg.side;
    if (cfg.kind == "strokes") return synth_strokes_split(cfg.n_train, cfg.n_test, cfg.classes, seed, opts);
    if (cfg.kind == "binary") {
        if (cfg.classes != 2) throw ConfigError("binary data has exactly 2 classes");
        return synth_binary_split(cfg.n_train, cfg.n_test, seed, opts);
    }
    if (cfg.kind == "idx") {
        const fs::path dir = cfg.idx_dir;
        SplitPair sp{load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", cfg.classes,
                              Split::train),
                     load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", cfg.classes,
                              Split::test)};
        sp.train = to_side(head(sp.train, cfg.n_train), cfg.side);
        sp.test = to_side(head(sp.test, cfg.n_test), cfg.side);
        return sp;
    }
    throw ConfigError("unknown data kind '" + cfg.kind + "'");
}

json MntdScenarioConfig::to_json() const {
    return {{"train_population", train_population.to_json()},
            {"matched_population", matched_population.to_json()},
            {"shifted_population", shifted_population.to_json()},
            {"meta", meta.to_json()},
            {"benign_epoch_sweep", benign_epoch_sweep},
            {"converged_epochs", converged_epochs}};
}

MntdScenarioConfig MntdScenarioConfig::from_json(const json& j) {
    MntdScenarioConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "train_population") c.train_population = ShadowSetConfig::from_json(v);
        else if (key == "matched_population") c.matched_population = ShadowSetConfig::from_json(v);
        else if (key == "shifted_population") c.shifted_population = ShadowSetConfig::from_json(v);
        else if (key == "meta") c.meta = MetaConfig::from_json(v);
        else if (key == "benign_epoch_sweep") c.benign_epoch_sweep = v.get<std::vector<int>>();
        else if (key == "converged_epochs") c.converged_epochs = v.get<int>();
        else throw ConfigError("unknown mntd key '" + key + "'");
    }
    return c;
}

void ScenarioConfig::validate() const {
    const auto& ids = scenario_ids();
    if (std::find(ids.begin(), ids.end(), id) == ids.end()) throw ConfigError("unknown scenario '" + id + "'");
    if (data.kind != "strokes" && data.kind != "binary" && data.kind != "idx") {
        throw ConfigError("unknown data kind '" + data.kind + "'");
    }
    if (data.n_train == 0 || data.n_test == 0 || data.classes < 2 || data.side == 0) {
        throw ConfigError("data needs samples, at least two classes and a positive side");
    }
    if (models.empty()) throw ConfigError("scenario lists no models");
    for (const auto& m : models) {
        try {
            (void)zoo_spec(m, {1, data.side, data.side}, data.classes, base_width);
        } catch (const Error& e) {
            throw ConfigError("model '" + m + "': " + e.what());
        }
    }
    train.validate();
    finetune.validate();
    trigger.validate();
    nc.validate();
    abs.validate();
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be positive");
    for (double r : poison_rates) {
        if (!(r >= 0.0 && r < 1.0)) throw ConfigError("poison rates must lie in [0, 1)");
    }
    if (seeds.empty()) throw ConfigError("scenario lists no seeds");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
        throw ConfigError("duplicate seeds");
    }
    const bool is_mntd = id.rfind("mntd_", 0) == 0;
    if (is_mntd) {
        if (!mntd) throw ConfigError(id + " needs an mntd block");
        mntd->train_population.validate();
        mntd->matched_population.validate();
        mntd->shifted_population.validate();
        mntd->meta.validate();
        const auto& sw = mntd->benign_epoch_sweep;
        if (sw.size() < 2 || sw.front() < 1 || !std::is_sorted(sw.begin(), sw.end()) ||
            std::adjacent_find(sw.begin(), sw.end()) != sw.end()) {
            throw ConfigError("benign_epoch_sweep needs at least two increasing positive epochs");
        }
        if (mntd->converged_epochs < 1) throw ConfigError("converged_epochs must be positive");
    } else if (poison_rates.empty()) {
        throw ConfigError(id + " needs poison_rates");
    }
    if (id == "nc_depth" && models.size() < 2) throw ConfigError("nc_depth compares at least two models");
    if (id == "abs_poison_sweep") {
        if (poison_rates.size() < 2 || poison_rates.back() != 0.0) {
            throw ConfigError("abs_poison_sweep needs at least two rates ending with 0");
        }
        for (std::size_t i = 1; i < poison_rates.size(); ++i) {
            if (!(poison_rates[i] < poison_rates[i - 1])) throw ConfigError("poison rates must decrease");
        }
    }
    if (id == "abs_weight_perturb" && !(poison_rates.front() > 0.0)) {
        throw ConfigError("abs_weight_perturb needs a positive poison rate");
    }
}

json ScenarioConfig::to_json() const {
    return {{"id", id},
            {"comment", comment},
            {"data", data.to_json()},
            {"models", models},
            {"base_width", base_width},
            {"train", train.to_json()},
            {"trigger", trigger.to_json()},
            {"poison_rates", poison_rates},
            {"nc", nc.to_json()},
            {"abs", abs.to_json()},
            {"epsilon", epsilon},
            {"finetune", finetune.to_json()},
            {"mntd", mntd ? mntd->to_json() : json(nullptr)},
            {"seeds", seeds}};
}

ScenarioConfig ScenarioConfig::from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("scenario config must be a JSON object");
    ScenarioConfig c;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "id") c.id = v.get<std::string>();
            else if (key == "comment") c.comment = v.get<std::string>();
            else if (key == "data") c.data = DataConfig::from_json(v);
            else if (key == "models") c.models = v.get<std::vector<std::string>>();
            else if (key == "base_width") c.base_width = v.get<std::size_t>();
            else if (key == "train") c.train = TrainConfig::from_json(v);
            else if (key == "trigger") c.trigger = TriggerSpec::from_json(v);
            else if (key == "poison_rates") c.poison_rates = v.get<std::vector<double>>();
            else if (key == "nc") c.nc = ReverseConfig::from_json(v);
            else if (key == "abs") c.abs = AbsConfig::from_json(v);
            else if (key == "epsilon") c.epsilon = v.get<double>();
            else if (key == "finetune") c.finetune = TrainConfig::from_json(v);
            else if (key == "mntd") {
                if (!v.is_null()) c.mntd = MntdScenarioConfig::from_json(v);
            } else if (key == "seeds") c.seeds = v.get<std::vector<std::uint64_t>>();
            else throw ConfigError("unknown scenario key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed scenario config: ") + e.what());
    }
    c.validate();
    return c;
}

std::string ScenarioConfig::hash() const { return hex64(fnv1a64(to_json().dump())); }

namespace {

ShadowSetConfig shadow_config(std::string tag, std::uint64_t seed, std::size_t per_class, int epochs,
                              double proportion) {
    ShadowSetConfig s;
    s.n_benign = s.n_backdoor = per_class;
    s.model = "mlp-2";
    s.base_width = 8;
    s.benign_train.epochs = epochs;
    s.benign_train.batch_size = 100;
    s.benign_train.proportion = proportion;
    s.backdoor_train = s.benign_train;
    s.seed = seed;
    s.tag = std::move(tag);
    return s;
}

} // namespace

ScenarioConfig default_scenario_config(const std::string& id) {
    ScenarioConfig c;
    c.id = id;
    c.models = {"mlp-2"};
    c.train.epochs = 8;
    c.train.batch_size = 32;
    c.trigger = default_patch_trigger(0);
    c.finetune.epochs = 3;
    c.finetune.batch_size = 32;
    c.finetune.seed = 100;
    if (id == "nc_binary") {
        c.comment = "two-class data: every label's norm is the median, so the anomaly index is fixed";
        c.data.kind = "binary";
        c.data.classes = 2;
        c.poison_rates = {0.1};
    } else if (id == "nc_depth") {
        c.comment = "anomaly index of backdoored vs clean models as depth grows";
        c.models = {"mlp-2", "cnn-4+3", "cnn-8"};
        c.poison_rates = {0.1};
    } else if (id == "abs_poison_sweep") {
        c.comment = "poison rates from heavy to none; rate 0 is the clean baseline";
        c.models = {"cnn-4+3"};
        c.poison_rates = {0.5, 0.11, 0.015, 0.0};
    } else if (id == "abs_weight_perturb") {
        c.comment = "backdoor injected by l-inf bounded fine-tuning of a clean model";
        c.models = {"cnn-4+3"};
        c.poison_rates = {0.5};
    } else if (id == "mntd_threshold" || id == "mntd_hparam_sweep") {
        c.comment = id == "mntd_threshold"
                        ? "seeds are meta-classifier seeds; training and matched members see 20 epochs on 2% of "
                          "the pool, shifted members 4 epochs on 50%"
                        : "seeds are meta-classifier seeds; benign test members are snapshotted at each sweep "
                          "epoch, converged members train converged_epochs (benign also twice as long)";
        c.data.n_train = 60000;
        c.data.seed = 11;
        MntdScenarioConfig m;
        m.train_population = shadow_config("train", 100, 64, 20, 0.02);
        m.matched_population = shadow_config("matched", 200, 32, 20, 0.02);
        m.shifted_population = shadow_config("shifted", 300, 32, 4, 0.5);
        m.meta.epochs = 15;
        c.mntd = m;
    } else {
        throw ConfigError("unknown scenario '" + id + "'");
    }
    c.validate();
    return c;
}

ScenarioConfig load_scenario_config(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("config file not found: " + path.string());
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return ScenarioConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// Scenario runs

bool ScenarioResult::passed() const {
    return failed_stage.empty() &&
           std::all_of(assertions.begin(), assertions.end(), [](const Assertion& a) { return a.passed; });
}

namespace {

struct Run {
    const ScenarioConfig& cfg;
    fs::path dir;
    ScenarioResult& res;
    std::string stage = "setup";

    void row(const std::string& seed, const std::string& stage_name, const std::string& metric, double value,
             const std::string& verdict = "", const std::string& artifact = "") {
        res.rows.push_back({cfg.id, seed, stage_name, metric, value, verdict, artifact});
    }
    void row(std::uint64_t seed, const std::string& stage_name, const std::string& metric, double value,
             const std::string& verdict = "", const std::string& artifact = "") {
        row(std::to_string(seed), stage_name, metric, value, verdict, artifact);
    }
    void check(const std::string& name, bool passed, const std::string& detail) {
        res.assertions.push_back({name, passed, detail});
    }
    void write_json(const std::string& rel, const json& j) const { write_text(dir / rel, j.dump(2) + "\n"); }
};

struct Trained {
    Model model;
    double cda = 0.0;
    double asr = 0.0;
    std::string checkpoint;
};

Trained train_victim(Run& run, const SplitPair& sp, const std::string& model_id, double rate, std::uint64_t seed,
                     const std::string& tag) {
    const ScenarioConfig& cfg = run.cfg;
    const ModelSpec spec = zoo_spec(model_id, sp.train.image_shape(), sp.train.num_classes, cfg.base_width);
    TrainConfig t = cfg.train;
    t.seed = seed;
    TrainResult tr = rate > 0.0 ? train(spec, poison_dataset(sp.train, {cfg.trigger, rate, seed}).data, t)
                                : train(spec, sp.train, t);
    Trained out;
    out.cda = evaluate_cda(tr.model, sp.test);
    out.asr = evaluate_asr(tr.model, sp.test, cfg.trigger);
    out.checkpoint = seed_dir(seed) + "/" + tag + ".bdlb";
    save_checkpoint(tr.model, run.dir / out.checkpoint,
                    {{"train", t.to_json()}, {"poison_rate", rate}, {"cda", out.cda}, {"asr", out.asr}});
    write_text(run.dir / (seed_dir(seed) + "/" + tag + "_history.csv"), tr.history.to_csv());
    out.model = std::move(tr.model);
    return out;
}

AnomalyReport nc_stage(Run& run, const Model& model, const Dataset& clean, std::uint64_t seed, const std::string& tag,
                       std::string& artifact) {
    ReverseConfig rc = run.cfg.nc;
    rc.seed = seed;
    AnomalyReport rep = scan_nc(model, clean, rc);
    artifact = seed_dir(seed) + "/" + tag + "_nc.json";
    run.write_json(artifact, rep.to_json());
    return rep;
}

AbsReport abs_stage(Run& run, const Model& model, const Dataset& clean, std::uint64_t seed, const std::string& tag,
                    std::string& artifact) {
    AbsConfig ac = run.cfg.abs;
    ac.seed = seed;
    AbsReport rep = scan_abs(model, clean, ac);
    artifact = seed_dir(seed) + "/" + tag + "_abs.json";
    run.write_json(artifact, rep.to_json());
    return rep;
}

std::string fmt(double v) { return format_double(v); }

std::string join(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(v[i]);
    return s;
}

bool majority(std::size_t hits, std::size_t n) { return 3 * hits >= 2 * n; }

void run_nc_binary(Run& run) {
    const ScenarioConfig& cfg = run.cfg;
    const double rate = cfg.poison_rates.front();
    bool asr_ok = true, ai_ok = true, verdict_ok = true;
    std::string asr_detail, ai_detail;
    for (std::uint64_t seed : cfg.seeds) {
        run.stage = "train seed " + std::to_string(seed);
        const SplitPair sp = load_data(cfg.data, seed);
        const Trained t = train_victim(run, sp, cfg.models.front(), rate, seed, "backdoored");
        run.row(seed, "train", "cda", t.cda, "", t.checkpoint);
        run.row(seed, "train", "asr", t.asr, "", t.checkpoint);
        run.stage = "nc seed " + std::to_string(seed);
        std::string art;
        const AnomalyReport rep = nc_stage(run, t.model, sp.test, seed, "backdoored", art);
        const double expected = 1.0 / rep.constant;
        run.row(seed, "nc", "anomaly_index", rep.anomaly_index, verdict_name(rep.verdict), art);
        for (std::size_t l = 0; l < rep.norms.size(); ++l) {
            run.row(seed, "nc", "norm_label" + std::to_string(l), rep.norms[l], "", art);
        }
        asr_ok = asr_ok && t.asr >= 0.95;
        ai_ok = ai_ok && std::abs(rep.anomaly_index - expected) <= 1e-6;
        verdict_ok = verdict_ok && rep.verdict == Verdict::benign;
        asr_detail += (asr_detail.empty() ? "" : ", ") + fmt(t.asr);
        ai_detail += (ai_detail.empty() ? "" : ", ") + fmt(rep.anomaly_index);
    }
    run.check("backdoor ASR >= 0.95 on every seed", asr_ok, "asr " + asr_detail);
    run.check("anomaly index equals 1/C within 1e-6", ai_ok,
              "ai " + ai_detail + "; 1/C = " + fmt(1.0 / kMadConsistency));
    run.check("two-class backdoored model reported benign", verdict_ok, "ai " + ai_detail);
}

void run_nc_depth(Run& run) {
    const ScenarioConfig& cfg = run.cfg;
    const double rate = cfg.poison_rates.front();
    const std::size_t n = cfg.seeds.size();
    std::vector<double> mean_gap;
    std::size_t flagged = 0, clean_ok = 0;
    bool shallow_asr = true;
    std::string shallow_detail, asr_detail;
    for (std::size_t mi = 0; mi < cfg.models.size(); ++mi) {
        const std::string& model_id = cfg.models[mi];
        std::vector<double> gaps;
        for (std::uint64_t seed : cfg.seeds) {
            run.stage = model_id + " seed " + std::to_string(seed);
            const SplitPair sp = load_data(cfg.data, seed);
            const Trained bd = train_victim(run, sp, model_id, rate, seed, model_id + "_backdoored");
            const Trained cl = train_victim(run, sp, model_id, 0.0, seed, model_id + "_clean");
            std::string art_bd, art_cl;
            const AnomalyReport rb = nc_stage(run, bd.model, sp.test, seed, model_id + "_backdoored", art_bd);
            const AnomalyReport rc = nc_stage(run, cl.model, sp.test, seed, model_id + "_clean", art_cl);
            const std::string sb = model_id + "/backdoored", sc = model_id + "/clean";
            run.row(seed, sb, "cda", bd.cda, "", bd.checkpoint);
            run.row(seed, sb, "asr", bd.asr, "", bd.checkpoint);
            run.row(seed, sb, "anomaly_index", rb.anomaly_index, verdict_name(rb.verdict), art_bd);
            run.row(seed, sb, "flagged_label", rb.flagged_label ? *rb.flagged_label : -1, "", art_bd);
            run.row(seed, sc, "cda", cl.cda, "", cl.checkpoint);
            run.row(seed, sc, "anomaly_index", rc.anomaly_index, verdict_name(rc.verdict), art_cl);
            const double gap = rb.anomaly_index - rc.anomaly_index;
            run.row(seed, model_id, "ai_gap", gap);
            gaps.push_back(gap);
            if (mi == 0) {
                shallow_asr = shallow_asr && bd.asr >= 0.95;
                asr_detail += (asr_detail.empty() ? "" : ", ") + fmt(bd.asr);
                const bool hit = rb.verdict == Verdict::backdoored && rb.flagged_label == cfg.trigger.target;
                flagged += hit ? 1 : 0;
                clean_ok += rc.anomaly_index < 2.0 ? 1 : 0;
                shallow_detail += "seed " + std::to_string(seed) + ": bd " + fmt(rb.anomaly_index) + " label " +
                                  std::to_string(rb.flagged_label ? *rb.flagged_label : -1) + ", clean " +
                                  fmt(rc.anomaly_index) + "; ";
            }
        }
        mean_gap.push_back(mean_of(gaps));
    }
    const std::string& shallow = cfg.models.front();
    run.check(shallow + " backdoor ASR >= 0.95 on every seed", shallow_asr, "asr " + asr_detail);
    run.check(shallow + " backdoored flagged with the target label in >= 2/3 of seeds", majority(flagged, n),
              std::to_string(flagged) + "/" + std::to_string(n) + " flagged; " + shallow_detail);
    run.check(shallow + " clean anomaly index < 2 in >= 2/3 of seeds", majority(clean_ok, n),
              std::to_string(clean_ok) + "/" + std::to_string(n) + " below 2");
    bool monotone = true;
    for (std::size_t i = 1; i < mean_gap.size(); ++i) monotone = monotone && mean_gap[i] <= mean_gap[i - 1];
    run.check("mean anomaly-index gap non-increasing with depth", monotone, "gaps " + join(mean_gap));
}

void run_abs_poison_sweep(Run& run) {
    const ScenarioConfig& cfg = run.cfg;
    const auto& rates = cfg.poison_rates;
    std::vector<std::vector<double>> reasr(rates.size());
    bool asr_ok = true;
    std::string asr_detail;
    for (std::uint64_t seed : cfg.seeds) {
        const SplitPair sp = load_data(cfg.data, seed);
        for (std::size_t ri = 0; ri < rates.size(); ++ri) {
            const std::string stage = "rate=" + fmt(rates[ri]);
            const std::string tag = "rate" + fmt(rates[ri]);
            run.stage = stage + " seed " + std::to_string(seed);
            const Trained t = train_victim(run, sp, cfg.models.front(), rates[ri], seed, tag);
            run.row(seed, stage, "cda", t.cda, "", t.checkpoint);
            run.row(seed, stage, "asr", t.asr, "", t.checkpoint);
            std::string art;
            const AbsReport rep = abs_stage(run, t.model, sp.test, seed, tag, art);
            run.row(seed, stage, "max_reasr", rep.max_reasr, verdict_name(rep.verdict), art);
            reasr[ri].push_back(rep.max_reasr);
            if (rates[ri] > 0.0) {
                asr_ok = asr_ok && t.asr >= 0.95;
                asr_detail += stage + "/" + std::to_string(seed) + " " + fmt(t.asr) + "; ";
            }
        }
    }
    std::vector<double> means;
    for (const auto& r : reasr) means.push_back(mean_of(r));
    run.check("backdoor ASR >= 0.95 at every positive rate", asr_ok, asr_detail);
    bool monotone = true;
    for (std::size_t i = 1; i < means.size(); ++i) monotone = monotone && means[i] <= means[i - 1];
    run.check("mean max REASR non-increasing as the poison rate drops", monotone, "means " + join(means));
    bool only_top = means.front() > cfg.abs.reasr_threshold;
    for (std::size_t i = 1; i < means.size(); ++i) only_top = only_top && means[i] <= cfg.abs.reasr_threshold;
    run.check("only the highest rate exceeds the REASR threshold", only_top,
              "means " + join(means) + "; threshold " + fmt(cfg.abs.reasr_threshold));
    const double low = means[means.size() - 2], clean = means.back();
    run.check("lowest positive rate within 0.1 REASR of clean", std::abs(low - clean) <= 0.1,
              "rate " + fmt(rates[rates.size() - 2]) + " " + fmt(low) + " vs clean " + fmt(clean));
}

void run_abs_weight_perturb(Run& run) {
    const ScenarioConfig& cfg = run.cfg;
    const double rate = cfg.poison_rates.front();
    std::vector<double> r_bd, r_clean;
    bool delta_ok = true, asr_ok = true, verdict_ok = true;
    std::string delta_detail, asr_detail, verdict_detail;
    for (std::uint64_t seed : cfg.seeds) {
        run.stage = "clean seed " + std::to_string(seed);
        const SplitPair sp = load_data(cfg.data, seed);
        const Trained cl = train_victim(run, sp, cfg.models.front(), 0.0, seed, "clean");
        run.row(seed, "clean", "cda", cl.cda, "", cl.checkpoint);
        run.row(seed, "clean", "asr", cl.asr, "", cl.checkpoint);

        run.stage = "perturb seed " + std::to_string(seed);
        const PoisonedDataset poisoned = poison_dataset(sp.train, {cfg.trigger, rate, seed});
        PerturbConfig pc;
        pc.epsilon = cfg.epsilon;
        pc.finetune = cfg.finetune;
        pc.finetune.seed = cfg.finetune.seed + seed;
        const PerturbResult pr = pgd_weight_finetune(cl.model, poisoned.data, sp.test, cfg.trigger, pc);
        const std::string ckpt = seed_dir(seed) + "/perturbed.bdlb";
        save_checkpoint(pr.model, run.dir / ckpt,
                        {{"finetune", pc.finetune.to_json()},
                         {"epsilon", pc.epsilon},
                         {"max_step_delta", pr.max_step_delta},
                         {"asr", pr.asr},
                         {"cda", pr.cda}});
        write_text(run.dir / (seed_dir(seed) + "/perturbed_history.csv"), pr.history.to_csv());
        run.row(seed, "perturbed", "cda", pr.cda, "", ckpt);
        run.row(seed, "perturbed", "asr", pr.asr, "", ckpt);
        run.row(seed, "perturbed", "max_abs_delta", pr.max_abs_delta, "", ckpt);
        run.row(seed, "perturbed", "max_step_delta", pr.max_step_delta, "", ckpt);

        run.stage = "abs seed " + std::to_string(seed);
        std::string art_cl, art_bd;
        const AbsReport rc = abs_stage(run, cl.model, sp.test, seed, "clean", art_cl);
        const AbsReport rb = abs_stage(run, pr.model, sp.test, seed, "perturbed", art_bd);
        run.row(seed, "clean", "max_reasr", rc.max_reasr, verdict_name(rc.verdict), art_cl);
        run.row(seed, "perturbed", "max_reasr", rb.max_reasr, verdict_name(rb.verdict), art_bd);
        r_clean.push_back(rc.max_reasr);
        r_bd.push_back(rb.max_reasr);

        delta_ok = delta_ok && pr.max_step_delta <= cfg.epsilon;
        asr_ok = asr_ok && pr.asr >= 0.95;
        verdict_ok = verdict_ok && rb.verdict == Verdict::benign;
        delta_detail += format_double(pr.max_step_delta) + " ";
        asr_detail += fmt(pr.asr) + " ";
        verdict_detail += std::string(verdict_name(rb.verdict)) + " ";
    }
    run.check("every projected iterate within epsilon", delta_ok,
              "max |delta| " + delta_detail + "vs " + format_double(cfg.epsilon));
    run.check("perturbed ASR >= 0.95 on every seed", asr_ok, "asr " + asr_detail);
    const double mb = mean_of(r_bd), mc = mean_of(r_clean);
    run.check("mean REASR of perturbed within 0.1 of clean", std::abs(mb - mc) <= 0.1,
              "perturbed " + join(r_bd) + " (mean " + fmt(mb) + "), clean " + join(r_clean) + " (mean " + fmt(mc) +
                  ")");
    run.check("perturbed model reported benign on every seed", verdict_ok, verdict_detail);
}

// --- MNTD --------------------------------------------------------------------

std::vector<double> score_models(const MetaClassifier& meta, const std::vector<const Model*>& models) {
    std::vector<double> out(models.size());
    parallel_for(models.size(), [&](std::size_t i) { out[i] = meta.score(*models[i]); });
    return out;
}

std::vector<double> class_scores(const ShadowPopulation& pop, Verdict label) {
    std::vector<double> out;
    for (const auto& r : pop.records)
        if (!r.failed && r.label == label) out.push_back(*r.score);
    return out;
}

void population_rows(Run& run, const ShadowPopulation& pop, const std::string& tag, const std::string& artifact) {
    std::vector<double> cda, asr;
    std::size_t failed = 0;
    for (const auto& r : pop.records) {
        if (r.failed) {
            ++failed;
            continue;
        }
        cda.push_back(r.cda);
        if (r.asr) asr.push_back(*r.asr);
    }
    run.row("population", tag, "mean_cda", mean_of(cda), "", artifact);
    if (!asr.empty()) run.row("population", tag, "mean_asr", mean_of(asr), "", artifact);
    run.row("population", tag, "failed", static_cast<double>(failed), "", artifact);
}

ShadowPopulation make_population(Run& run, const SplitPair& sp, const ShadowSetConfig& sc) {
    run.stage = "population " + sc.tag;
    ShadowPopulation pop = generate_shadow_set(sp.train, sp.test, sc);
    const std::string rel = "populations/" + sc.tag;
    save_population(pop, run.dir / rel);
    population_rows(run, pop, sc.tag, rel);
    return pop;
}

MetaClassifier fit_meta(Run& run, const ShadowPopulation& train_pop, std::uint64_t seed, std::string& artifact) {
    run.stage = "meta seed " + std::to_string(seed);
    MetaConfig mc = run.cfg.mntd->meta;
    mc.seed = seed;
    MetaClassifier meta = train_meta(train_pop.models, train_pop.records, mc);
    artifact = seed_dir(seed) + "/meta.bdlb";
    write_container(to_container(meta), run.dir / artifact);
    return meta;
}

void run_mntd_threshold(Run& run) {
    const ScenarioConfig& cfg = run.cfg;
    const MntdScenarioConfig& m = *cfg.mntd;
    const SplitPair sp = load_data(cfg.data, cfg.seeds.front());
    ShadowPopulation train_pop = make_population(run, sp, m.train_population);
    ShadowPopulation matched = make_population(run, sp, m.matched_population);
    ShadowPopulation shifted = make_population(run, sp, m.shifted_population);

    std::vector<double> aucs, accs, gaps, iqrs;
    for (std::uint64_t seed : cfg.seeds) {
        std::string meta_art;
        const MetaClassifier meta = fit_meta(run, train_pop, seed, meta_art);
        run.stage = "score seed " + std::to_string(seed);
        score_population(meta, train_pop);
        score_population(meta, matched);
        score_population(meta, shifted);

        const double thr = choose_threshold(train_pop.records);
        std::vector<double> train_scores;
        for (const auto& r : train_pop.records)
            if (!r.failed) train_scores.push_back(*r.score);
        const double iqr = interquartile_range(train_scores);
        run.row(seed, "train", "median", thr, "", meta_art);
        run.row(seed, "train", "iqr", iqr, "", meta_art);

        const PopulationEval me = evaluate_population(matched.records, thr, ThresholdPolicy::train_median);
        const std::string matched_csv = seed_dir(seed) + "/matched_scores.csv";
        write_text(run.dir / matched_csv, me.to_csv());
        run.row(seed, "matched", "auc", me.auc, "", matched_csv);
        run.row(seed, "matched", "accuracy_train_median", me.accuracy, "", matched_csv);

        const PopulationEval se = evaluate_population(shifted.records, thr, ThresholdPolicy::train_median);
        const double test_thr = choose_threshold(shifted.records);
        const PopulationEval st = evaluate_population(shifted.records, test_thr, ThresholdPolicy::test_median);
        const std::string shifted_csv = seed_dir(seed) + "/shifted_scores.csv";
        write_text(run.dir / shifted_csv, se.to_csv());
        write_text(run.dir / (seed_dir(seed) + "/shifted_scores_test_median.csv"), st.to_csv());
        const double gap = test_thr - thr;
        run.row(seed, "shifted", "auc", se.auc, "", shifted_csv);
        run.row(seed, "shifted", "accuracy_train_median", se.accuracy, "", shifted_csv);
        run.row(seed, "shifted", "accuracy_test_median", st.accuracy, "", shifted_csv);
        run.row(seed, "shifted", "median", test_thr, "", shifted_csv);
        run.row(seed, "shifted", "median_gap", gap, "", shifted_csv);
        for (const auto& v : se.verdicts) {
            run.row(seed, "shifted", "score:" + v.id, v.score, verdict_name(v.verdict), shifted_csv);
        }
        aucs.push_back(me.auc);
        accs.push_back(se.accuracy);
        gaps.push_back(gap);
        iqrs.push_back(iqr);
    }
    run.stage = "assertions";
    run.check("matched-population AUC >= 0.85", mean_of(aucs) >= 0.85,
              "auc " + join(aucs) + " (mean " + fmt(mean_of(aucs)) + ")");
    const double acc = mean_of(accs);
    run.check("shifted-population accuracy at the train median within [0.4, 0.6]", acc >= 0.4 && acc <= 0.6,
              "accuracy " + join(accs) + " (mean " + fmt(acc) + ")");
    const double g = mean_of(gaps), q = mean_of(iqrs);
    run.check("shifted median departs from the train median by > 3 IQR", std::abs(g) > 3.0 * q,
              "gap " + fmt(g) + " vs 3 x iqr " + fmt(3.0 * q));
}

// Benign members trained once for the longest epoch count, frozen copies kept
// at each requested epoch.
std::map<int, std::vector<Model>> benign_snapshots(const SplitPair& sp, ShadowSetConfig sc,
                                                   const std::vector<int>& epochs) {
    sc.benign_train.epochs = epochs.back();
    std::map<int, std::vector<Model>> snaps;
    for (int e : epochs) snaps[e].resize(sc.n_benign);
    std::vector<char> failed(sc.n_benign, 0);
    parallel_for(sc.n_benign, [&](std::size_t i) {
        ShadowMember m = train_shadow(sp.train, sp.test, sc, false, i, [&](const Model& model, const EpochStats& st) {
            auto it = snaps.find(st.epoch);
            if (it == snaps.end()) return;
            Model copy = model.clone();
            copy.set_trainable(false);
            it->second[i] = std::move(copy);
        });
        failed[i] = m.record.failed ? 1 : 0;
    });
    for (auto& [e, models] : snaps) {
        std::vector<Model> kept;
        for (std::size_t i = 0; i < models.size(); ++i)
            if (!failed[i]) kept.push_back(std::move(models[i]));
        models = std::move(kept);
    }
    return snaps;
}

std::vector<Model> backdoored_members(const SplitPair& sp, const ShadowSetConfig& sc) {
    std::vector<Model> models(sc.n_backdoor);
    std::vector<char> failed(sc.n_backdoor, 0);
    parallel_for(sc.n_backdoor, [&](std::size_t i) {
        ShadowMember m = train_shadow(sp.train, sp.test, sc, true, i);
        failed[i] = m.record.failed ? 1 : 0;
        models[i] = std::move(m.model);
    });
    std::vector<Model> kept;
    for (std::size_t i = 0; i < models.size(); ++i)
        if (!failed[i]) kept.push_back(std::move(models[i]));
    if (kept.empty()) throw TrainingError("no backdoored member trained", -1);
    return kept;
}

std::vector<const Model*> pointers(const std::vector<Model>& models) {
    std::vector<const Model*> out;
    for (const auto& m : models) out.push_back(&m);
    return out;
}

void run_mntd_hparam_sweep(Run& run) {
    const ScenarioConfig& cfg = run.cfg;
    const MntdScenarioConfig& m = *cfg.mntd;
    const SplitPair sp = load_data(cfg.data, cfg.seeds.front());
    ShadowPopulation train_pop = make_population(run, sp, m.train_population);

    run.stage = "benign epoch sweep";
    const ShadowSetConfig& shifted = m.shifted_population;
    const auto sweep = benign_snapshots(sp, shifted, m.benign_epoch_sweep);
    const std::vector<Model> sweep_bd = backdoored_members(sp, shifted);

    run.stage = "converged populations";
    ShadowSetConfig conv = shifted;
    conv.tag = "converged";
    conv.seed = shifted.seed + 100;
    conv.benign_train.epochs = conv.backdoor_train.epochs = m.converged_epochs;
    const auto conv_benign = benign_snapshots(sp, conv, {m.converged_epochs, 2 * m.converged_epochs});
    const std::vector<Model> conv_bd = backdoored_members(sp, conv);

    const auto& epochs = m.benign_epoch_sweep;
    std::vector<std::vector<double>> sweep_auc(epochs.size());
    std::vector<double> conv_auc, conv2_auc;
    for (std::uint64_t seed : cfg.seeds) {
        std::string meta_art;
        const MetaClassifier meta = fit_meta(run, train_pop, seed, meta_art);
        run.stage = "score seed " + std::to_string(seed);
        const std::vector<double> bd = score_models(meta, pointers(sweep_bd));
        for (std::size_t k = 0; k < epochs.size(); ++k) {
            const std::vector<double> ben = score_models(meta, pointers(sweep.at(epochs[k])));
            const double auc = compute_auc(ben, bd);
            run.row(seed, "benign_epochs=" + std::to_string(epochs[k]), "auc", auc, "", meta_art);
            sweep_auc[k].push_back(auc);
        }
        const std::vector<double> cbd = score_models(meta, pointers(conv_bd));
        const double c1 = compute_auc(score_models(meta, pointers(conv_benign.at(m.converged_epochs))), cbd);
        const double c2 = compute_auc(score_models(meta, pointers(conv_benign.at(2 * m.converged_epochs))), cbd);
        run.row(seed, "converged", "auc", c1, "", meta_art);
        run.row(seed, "converged_2x_benign", "auc", c2, "", meta_art);
        conv_auc.push_back(c1);
        conv2_auc.push_back(c2);
    }
    run.stage = "assertions";
    std::vector<double> means;
    for (const auto& a : sweep_auc) means.push_back(mean_of(a));
    bool monotone = true;
    for (std::size_t i = 1; i < means.size(); ++i) monotone = monotone && means[i] <= means[i - 1];
    run.check("mean AUC non-increasing as benign epochs grow", monotone, "means " + join(means));
    run.check("mean AUC drops by >= 0.15 across the sweep", means.front() - means.back() >= 0.15,
              "drop " + fmt(means.front() - means.back()));
    const double c1 = mean_of(conv_auc), c2 = mean_of(conv2_auc);
    run.check("converged-population AUC within [0.3, 0.6]", c1 >= 0.3 && c1 <= 0.6,
              "auc " + join(conv_auc) + " (mean " + fmt(c1) + ")");
    run.check("doubling benign epochs lowers the converged AUC", c2 < c1, "mean " + fmt(c1) + " -> " + fmt(c2));
}

const std::map<std::string, std::vector<std::string>>& scenario_plots() {
    static const std::map<std::string, std::vector<std::string>> plots{
        {"nc_binary", {"ai_bars"}},           {"nc_depth", {"ai_bars"}},
        {"abs_poison_sweep", {"reasr_bars"}}, {"abs_weight_perturb", {"reasr_bars"}},
        {"mntd_threshold", {"score_dist"}},   {"mntd_hparam_sweep", {"auc_curve"}}};
    return plots;
}

std::string utc_stamp(const char* format) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, format, &tm);
    return buf;
}

} // namespace

ScenarioResult run_scenario(const ScenarioConfig& cfg, const fs::path& run_dir) {
    cfg.validate();
    ScenarioResult res;
    res.scenario = cfg.id;
    res.config_hash = cfg.hash();
    res.run_dir = run_dir;
    fs::create_directories(run_dir);
    Run run{cfg, run_dir, res};
    write_text(run_dir / "config.json", cfg.to_json().dump(2) + "\n");
    const auto start = std::chrono::steady_clock::now();
    const std::string started = utc_stamp("%Y-%m-%dT%H:%M:%SZ");
    try {
        if (cfg.id == "nc_binary") run_nc_binary(run);
        else if (cfg.id == "nc_depth") run_nc_depth(run);
        else if (cfg.id == "abs_poison_sweep") run_abs_poison_sweep(run);
        else if (cfg.id == "abs_weight_perturb") run_abs_weight_perturb(run);
        else if (cfg.id == "mntd_threshold") run_mntd_threshold(run);
        else run_mntd_hparam_sweep(run);
    } catch (const std::exception& e) {
        res.failed_stage = run.stage;
        res.assertions.push_back({"stage '" + run.stage + "' completed", false, e.what()});
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    const std::vector<MetricRow> agg = aggregate_rows(res.rows);
    res.rows.insert(res.rows.end(), agg.begin(), agg.end());
    write_report(res.rows, ReportFormat::csv, run_dir / "report.csv");
    write_report(res.rows, ReportFormat::json, run_dir / "report.json");

    std::vector<std::string> plots;
    for (const auto& kind : scenario_plots().at(cfg.id)) {
        try {
            const std::string rel = "plots/" + kind + ".svg";
            write_text(run_dir / rel, emit_plot(res.rows, kind));
            plots.push_back(rel);
        } catch (const ConfigError&) {
            // nothing to draw when the stage feeding the plot failed
        }
    }

    json assertions = json::array();
    for (const auto& a : res.assertions) assertions.push_back({{"name", a.name}, {"passed", a.passed}, {"detail", a.detail}});
    write_text(run_dir / "run_info.json", json{{"scenario", cfg.id},
                                               {"config_hash", res.config_hash},
                                               {"started_utc", started},
                                               {"wall_seconds", wall},
                                               {"workers", worker_count()},
                                               {"provenance", cfg.data.kind == "idx" ? "mnist" : "synthetic"},
                                               {"failed_stage", res.failed_stage},
                                               {"passed", res.passed()},
                                               {"assertions", assertions},
                                               {"plots", plots}}
                                                  .dump(2) +
                                              "\n");
    return res;
}

fs::path new_run_dir(const fs::path& base, const std::string& scenario) {
    fs::create_directories(base);
    const std::string stem = scenario + "-" + utc_stamp("%Y%m%dT%H%M%SZ");
    for (int n = 1;; ++n) {
        const fs::path dir = base / (n == 1 ? stem : stem + "-" + std::to_string(n));
        if (fs::create_directory(dir)) return dir;
    }
}

std::vector<MetricRow> aggregate_rows(const std::vector<MetricRow>& rows) {
    std::vector<std::pair<std::string, std::string>> order;
    std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
    std::string scenario;
    for (const auto& r : rows) {
        if (!is_numeric_seed(r.seed) || r.metric.rfind("score:", 0) == 0) continue;
        scenario = r.scenario;
        auto key = std::make_pair(r.stage, r.metric);
        auto [it, fresh] = groups.try_emplace(key);
        if (fresh) order.push_back(key);
        it->second.push_back(r.value);
    }
    std::vector<MetricRow> out;
    for (const auto& key : order) {
        const auto& v = groups[key];
        const double mean = mean_of(v);
        double ss = 0.0;
        for (double x : v) ss += (x - mean) * (x - mean);
        const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
        out.push_back({scenario, "agg_mean", key.first, key.second, mean, "", ""});
        out.push_back({scenario, "agg_std", key.first, key.second, sd, "", ""});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

const char* const kColumns[] = {"scenario", "seed", "stage", "metric", "value", "verdict", "artifact_path"};

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::vector<std::vector<std::string>> split_csv(const std::string& text) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> rec;
    std::string field;
    bool quoted = false, any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
                field += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                field += c;
            }
        } else if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            rec.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\n') {
            rec.push_back(std::move(field));
            records.push_back(std::move(rec));
            field.clear();
            rec.clear();
            any = false;
        } else if (c != '\r') {
            field += c;
            any = true;
        }
    }
    if (quoted) throw ValidationError("unterminated quoted CSV field");
    if (any) {
        rec.push_back(std::move(field));
        records.push_back(std::move(rec));
    }
    return records;
}

json value_json(double v) { return std::isfinite(v) ? json(v) : json(format_double(v)); }

} // namespace

ReportFormat report_format_from(const std::string& s) {
    if (s == "csv") return ReportFormat::csv;
    if (s == "json") return ReportFormat::json;
    throw ConfigError("unknown report format '" + s + "'");
}

std::string emit_report(const std::vector<MetricRow>& rows, ReportFormat format) {
    if (format == ReportFormat::csv) {
        std::string out = "scenario,seed,stage,metric,value,verdict,artifact_path\n";
        for (const auto& r : rows) {
            out += csv_field(r.scenario) + ',' + csv_field(r.seed) + ',' + csv_field(r.stage) + ',' +
                   csv_field(r.metric) + ',' + format_double(r.value) + ',' + csv_field(r.verdict) + ',' +
                   csv_field(r.artifact_path) + '\n';
        }
        return out;
    }
    json arr = json::array();
    for (const auto& r : rows) {
        arr.push_back({{"scenario", r.scenario},
                       {"seed", r.seed},
                       {"stage", r.stage},
                       {"metric", r.metric},
                       {"value", value_json(r.value)},
                       {"verdict", r.verdict},
                       {"artifact_path", r.artifact_path}});
    }
    return json{{"columns", kColumns}, {"rows", arr}}.dump(2) + "\n";
}

void write_report(const std::vector<MetricRow>& rows, ReportFormat format, const fs::path& path) {
    write_text(path, emit_report(rows, format));
}

std::vector<MetricRow> parse_csv_report(const std::string& text) {
    const auto records = split_csv(text);
    if (records.empty()) throw ValidationError("empty report");
    if (records.front() != std::vector<std::string>(std::begin(kColumns), std::end(kColumns))) {
        throw ValidationError("report header does not match scenario,seed,stage,metric,value,verdict,artifact_path");
    }
    std::vector<MetricRow> rows;
    for (std::size_t i = 1; i < records.size(); ++i) {
        const auto& f = records[i];
        if (f.size() != 7) throw ValidationError("report line " + std::to_string(i + 1) + " has " +
                                                 std::to_string(f.size()) + " fields");
        rows.push_back({f[0], f[1], f[2], f[3], parse_double(f[4]), f[5], f[6]});
    }
    return rows;
}

std::vector<MetricRow> parse_json_report(const std::string& text) {
    std::vector<MetricRow> rows;
    try {
        const json j = json::parse(text);
        for (const auto& r : j.at("rows")) {
            const json& v = r.at("value");
            rows.push_back({r.at("scenario").get<std::string>(), r.at("seed").get<std::string>(),
                            r.at("stage").get<std::string>(), r.at("metric").get<std::string>(),
                            v.is_string() ? parse_double(v.get<std::string>()) : v.get<double>(),
                            r.at("verdict").get<std::string>(), r.at("artifact_path").get<std::string>()});
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed JSON report: ") + e.what());
    }
    return rows;
}

std::vector<MetricRow> load_run_rows(const fs::path& run_dir) {
    const fs::path path = run_dir / "report.json";
    if (!fs::exists(path)) throw IoError("no report.json in " + run_dir.string());
    return parse_json_report(read_text(path));
}

// ---------------------------------------------------------------------------
// Plots

const std::vector<std::string>& plot_kinds() {
    static const std::vector<std::string> kinds{"ai_bars", "reasr_bars", "auc_curve", "score_dist"};
    return kinds;
}

namespace {

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

constexpr double kTop = 40.0, kBottom = 260.0, kLeft = 50.0;

std::string svg_open(double width, const std::string& title) {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) + "\" height=\"320\" viewBox=\"0 0 " +
           num(width) + " 320\">\n<text x=\"" + num(kLeft) + "\" y=\"20\" font-size=\"14\">" + xml_escape(title) +
           "</text>\n<line x1=\"" + num(kLeft) + "\" y1=\"" + num(kBottom) + "\" x2=\"" + num(width - 10) +
           "\" y2=\"" + num(kBottom) + "\" stroke=\"black\"/>\n";
}

double y_of(double v, double ymax) {
    if (!std::isfinite(v)) return kTop;
    return kBottom - (kBottom - kTop) * std::clamp(v / ymax, 0.0, 1.0);
}

std::string bars(const std::vector<const MetricRow*>& sel, const std::string& title, double threshold) {
    double ymax = threshold;
    for (const auto* r : sel)
        if (std::isfinite(r->value)) ymax = std::max(ymax, r->value);
    ymax *= 1.1;
    const double slot = 28.0;
    const double width = std::max(320.0, kLeft + slot * static_cast<double>(sel.size()) + 20.0);
    std::string s = svg_open(width, title);
    for (std::size_t i = 0; i < sel.size(); ++i) {
        const MetricRow& r = *sel[i];
        const double x = kLeft + slot * static_cast<double>(i) + 4.0;
        const double y = y_of(r.value, ymax);
        const std::string value = format_double(r.value);
        s += "<rect class=\"bar\" x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"20\" height=\"" +
             num(kBottom - y) + "\" fill=\"" + (r.verdict == "backdoored" ? "#c0392b" : "#2e86c1") +
             "\" data-stage=\"" + xml_escape(r.stage) + "\" data-seed=\"" + xml_escape(r.seed) +
             "\" data-value=\"" + value + "\"><title>" + xml_escape(r.stage) + " seed " + xml_escape(r.seed) +
             ": " + value + "</title></rect>\n";
        s += "<text x=\"" + num(x + 10) + "\" y=\"" + num(y - 3) +
             "\" font-size=\"8\" text-anchor=\"middle\">" + value + "</text>\n";
        s += "<text x=\"" + num(x + 10) + "\" y=\"" + num(kBottom + 12) +
             "\" font-size=\"7\" text-anchor=\"end\" transform=\"rotate(-45 " + num(x + 10) + " " +
             num(kBottom + 12) + ")\">" + xml_escape(r.stage + " s" + r.seed) + "</text>\n";
    }
    const double ty = y_of(threshold, ymax);
    s += "<line class=\"threshold\" x1=\"" + num(kLeft) + "\" y1=\"" + num(ty) + "\" x2=\"" + num(width - 10) +
         "\" y2=\"" + num(ty) + "\" stroke=\"gray\" stroke-dasharray=\"4 3\" data-value=\"" +
         format_double(threshold) + "\"/>\n";
    return s + "</svg>\n";
}

std::string auc_curve(const std::vector<const MetricRow*>& sel) {
    std::vector<std::string> stages, seeds;
    for (const auto* r : sel) {
        if (std::find(stages.begin(), stages.end(), r->stage) == stages.end()) stages.push_back(r->stage);
        if (std::find(seeds.begin(), seeds.end(), r->seed) == seeds.end()) seeds.push_back(r->seed);
    }
    const double step = 70.0;
    const double width = std::max(320.0, kLeft + step * static_cast<double>(stages.size()) + 20.0);
    std::string s = svg_open(width, "AUC");
    auto x_of = [&](const std::string& stage) {
        const auto k = std::find(stages.begin(), stages.end(), stage) - stages.begin();
        return kLeft + step * (static_cast<double>(k) + 0.5);
    };
    for (const auto& stage : stages) {
        s += "<text x=\"" + num(x_of(stage)) + "\" y=\"" + num(kBottom + 14) +
             "\" font-size=\"8\" text-anchor=\"middle\">" + xml_escape(stage) + "</text>\n";
    }
    for (const auto& seed : seeds) {
        std::string points;
        for (const auto* r : sel) {
            if (r->seed != seed) continue;
            points += num(x_of(r->stage)) + "," + num(y_of(r->value, 1.0)) + " ";
        }
        s += "<polyline fill=\"none\" stroke=\"#555\" data-seed=\"" + xml_escape(seed) + "\" points=\"" + points +
             "\"/>\n";
    }
    for (const auto* r : sel) {
        const std::string value = format_double(r->value);
        s += "<circle class=\"point\" cx=\"" + num(x_of(r->stage)) + "\" cy=\"" + num(y_of(r->value, 1.0)) +
             "\" r=\"3\" data-stage=\"" + xml_escape(r->stage) + "\" data-seed=\"" + xml_escape(r->seed) +
             "\" data-value=\"" + value + "\"><title>" + xml_escape(r->stage) + " seed " + xml_escape(r->seed) +
             ": " + value + "</title></circle>\n";
    }
    return s + "</svg>\n";
}

std::string score_dist(const std::vector<const MetricRow*>& sel) {
    double lo = INFINITY, hi = -INFINITY;
    std::vector<std::string> seeds;
    for (const auto* r : sel) {
        if (std::isfinite(r->value)) {
            lo = std::min(lo, r->value);
            hi = std::max(hi, r->value);
        }
        if (std::find(seeds.begin(), seeds.end(), r->seed) == seeds.end()) seeds.push_back(r->seed);
    }
    if (!(hi > lo)) hi = lo + 1.0;
    const double width = 640.0;
    std::string s = svg_open(width, "meta-classifier scores");
    const double band = (kBottom - kTop) / static_cast<double>(seeds.size());
    for (std::size_t k = 0; k < seeds.size(); ++k) {
        s += "<text x=\"4\" y=\"" + num(kTop + band * (static_cast<double>(k) + 0.5)) +
             "\" font-size=\"9\">seed " + xml_escape(seeds[k]) + "</text>\n";
    }
    for (const auto* r : sel) {
        const auto k = std::find(seeds.begin(), seeds.end(), r->seed) - seeds.begin();
        const auto dash = r->metric.rfind('-');
        const bool backdoored = dash != std::string::npos && r->metric.compare(dash, 2, "-t") == 0;
        const double x = kLeft + (width - kLeft - 20.0) * (std::clamp(r->value, lo, hi) - lo) / (hi - lo);
        const double y = kTop + band * (static_cast<double>(k) + (backdoored ? 0.7 : 0.3));
        const std::string value = format_double(r->value);
        s += "<circle class=\"point\" cx=\"" + num(x) + "\" cy=\"" + num(y) + "\" r=\"2.5\" fill=\"" +
             (backdoored ? "#c0392b" : "#2e86c1") + "\" data-model=\"" + xml_escape(r->metric.substr(6)) +
             "\" data-seed=\"" + xml_escape(r->seed) + "\" data-verdict=\"" + xml_escape(r->verdict) +
             "\" data-value=\"" + value + "\"><title>" + xml_escape(r->metric.substr(6)) + ": " + value +
             "</title></circle>\n";
    }
    return s + "</svg>\n";
}

} // namespace

std::string emit_plot(const std::vector<MetricRow>& rows, const std::string& kind) {
    auto pick = [&](auto pred) {
        std::vector<const MetricRow*> sel;
        for (const auto& r : rows)
            if (is_numeric_seed(r.seed) && pred(r.metric)) sel.push_back(&r);
        if (sel.empty()) throw ConfigError("no rows to plot for " + kind);
        return sel;
    };
    if (kind == "ai_bars") {
        return bars(pick([](const std::string& m) { return m == "anomaly_index"; }), "anomaly index",
                    kAnomalyThreshold);
    }
    if (kind == "reasr_bars") {
        return bars(pick([](const std::string& m) { return m == "max_reasr"; }), "max REASR", kReasrThreshold);
    }
    if (kind == "auc_curve") return auc_curve(pick([](const std::string& m) { return m == "auc"; }));
    if (kind == "score_dist") {
        return score_dist(pick([](const std::string& m) { return m.rfind("score:", 0) == 0; }));
    }
    throw ConfigError("unknown plot kind '" + kind + "'");
}

} // namespace bdlab
