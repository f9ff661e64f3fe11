#include "cli.hpp"

#include "bdlab/errors.hpp"
#include "bdlab/harness.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>

namespace bdlab::cli {

namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Globals {
    std::uint64_t seed = 1;
    bool seed_set = false;
    std::string config;
    std::string out = "runs";
};

ScenarioConfig base_config(const Globals& g, const std::string& fallback_id) {
    if (g.config.empty()) return default_scenario_config(fallback_id);
    if (!fs::exists(g.config)) throw UsageError("config file not found: " + g.config);
    try {
        return load_scenario_config(g.config);
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
}

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
}

Model load_model(const std::string& path) {
    if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path);
    return load_checkpoint(path).model;
}

int cmd_train(const Globals& g, const std::string& model_id, double rate, const std::string& name, std::ostream& out) {
    const ScenarioConfig cfg = base_config(g, "nc_depth");
    const SplitPair sp = load_data(cfg.data, g.seed);
    const ModelSpec spec = zoo_spec(model_id, sp.train.image_shape(), sp.train.num_classes, cfg.base_width);
    TrainConfig t = cfg.train;
    t.seed = g.seed;
    const TrainResult tr = rate > 0.0 ? train(spec, poison_dataset(sp.train, {cfg.trigger, rate, g.seed}).data, t)
                                      : train(spec, sp.train, t);
    const double cda = evaluate_cda(tr.model, sp.test);
    const double asr = evaluate_asr(tr.model, sp.test, cfg.trigger);
    const fs::path dir = g.out;
    save_checkpoint(tr.model, dir / (name + ".bdlb"),
                    {{"train", t.to_json()}, {"poison_rate", rate}, {"cda", cda}, {"asr", asr}});
    write_file(dir / (name + "_history.csv"), tr.history.to_csv());
    out << "checkpoint " << (dir / (name + ".bdlb")).string() << "\ncda " << format_double(cda) << "\nasr "
        << format_double(asr) << "\n";
    return kExitOk;
}

int cmd_attack(const Globals& g, const std::string& checkpoint, std::optional<double> epsilon,
               std::optional<double> rate, std::ostream& out, std::ostream& err) {
    const ScenarioConfig cfg = base_config(g, "abs_weight_perturb");
    const Model clean = load_model(checkpoint);
    const SplitPair sp = load_data(cfg.data, g.seed);
    const double r = rate.value_or(cfg.poison_rates.empty() ? 0.5 : cfg.poison_rates.front());
    PerturbConfig pc;
    pc.epsilon = epsilon.value_or(cfg.epsilon);
    pc.finetune = cfg.finetune;
    pc.finetune.seed = cfg.finetune.seed + g.seed;
    const PerturbResult pr =
        pgd_weight_finetune(clean, poison_dataset(sp.train, {cfg.trigger, r, g.seed}).data, sp.test, cfg.trigger, pc);
    const fs::path path = fs::path(g.out) / "perturbed.bdlb";
    save_checkpoint(pr.model, path, {{"epsilon", pc.epsilon}, {"max_step_delta", pr.max_step_delta}, {"asr", pr.asr}});
    out << "checkpoint " << path.string() << "\nmax_abs_delta " << format_double(pr.max_step_delta) << "\nasr "
        << format_double(pr.asr) << "\ncda " << format_double(pr.cda) << "\n";
    if (!pr.reached_floor) {
        err << "attack failed: " << pr.failure << "\n";
        return kExitFailure;
    }
    return kExitOk;
}

int cmd_scan_nc(const Globals& g, const std::string& checkpoint, std::ostream& out) {
    const ScenarioConfig cfg = base_config(g, "nc_depth");
    const Model model = load_model(checkpoint);
    const SplitPair sp = load_data(cfg.data, g.seed);
    ReverseConfig rc = cfg.nc;
    rc.seed = g.seed;
    const AnomalyReport rep = scan_nc(model, sp.test, rc);
    const fs::path path = fs::path(g.out) / "nc_report.json";
    write_file(path, rep.to_json().dump(2) + "\n");
    out << "anomaly_index " << format_double(rep.anomaly_index) << "\nflagged_label "
        << (rep.flagged_label ? std::to_string(*rep.flagged_label) : "none") << "\nverdict "
        << verdict_name(rep.verdict) << "\nreport " << path.string() << "\n";
    return kExitOk;
}

int cmd_scan_abs(const Globals& g, const std::string& checkpoint, std::ostream& out) {
    const ScenarioConfig cfg = base_config(g, "abs_poison_sweep");
    const Model model = load_model(checkpoint);
    const SplitPair sp = load_data(cfg.data, g.seed);
    AbsConfig ac = cfg.abs;
    ac.seed = g.seed;
    const AbsReport rep = scan_abs(model, sp.test, ac);
    const fs::path path = fs::path(g.out) / "abs_report.json";
    write_file(path, rep.to_json().dump(2) + "\n");
    out << "max_reasr " << format_double(rep.max_reasr) << "\nverdict " << verdict_name(rep.verdict) << "\nreport "
        << path.string() << "\n";
    return kExitOk;
}

ShadowPopulation load_pop(const std::string& dir) {
    if (!fs::exists(fs::path(dir) / "manifest.json")) throw UsageError("no population manifest in " + dir);
    return load_population(dir);
}

int cmd_mntd_train(const Globals& g, std::string population, bool generate, std::ostream& out) {
    const ScenarioConfig cfg = base_config(g, "mntd_threshold");
    if (!cfg.mntd) throw UsageError("config has no mntd block");
    ShadowPopulation pop;
    if (generate) {
        const SplitPair sp = load_data(cfg.data, g.seed);
        pop = generate_shadow_set(sp.train, sp.test, cfg.mntd->train_population);
        if (population.empty()) population = (fs::path(g.out) / "populations" / cfg.mntd->train_population.tag).string();
        save_population(pop, population);
        out << "population " << population << "\n";
    } else {
        if (population.empty()) throw UsageError("mntd train needs --population or --generate");
        pop = load_pop(population);
    }
    MetaConfig mc = cfg.mntd->meta;
    mc.seed = g.seed;
    const MetaClassifier meta = train_meta(pop.models, pop.records, mc);
    const fs::path path = fs::path(g.out) / "meta.bdlb";
    fs::create_directories(path.parent_path());
    write_container(to_container(meta), path);
    out << "meta " << path.string() << "\nfinal_loss " << format_double(meta.training_loss().back()) << "\n";
    return kExitOk;
}

struct ScoreArgs {
    std::string meta;
    std::string population;
    std::string train_population;
    std::string policy = "test_median";
    std::optional<double> threshold;
};

PopulationEval score_and_eval(const ScoreArgs& a) {
    if (!fs::exists(a.meta)) throw UsageError("meta-classifier not found: " + a.meta);
    const MetaClassifier meta = meta_from_container(read_container(a.meta));
    ShadowPopulation pop = load_pop(a.population);
    score_population(meta, pop);
    ThresholdPolicy policy = a.threshold ? ThresholdPolicy::custom : threshold_policy_from(a.policy);
    double thr = a.threshold.value_or(0.0);
    if (policy == ThresholdPolicy::test_median) {
        thr = choose_threshold(pop.records);
    } else if (policy == ThresholdPolicy::train_median) {
        if (a.train_population.empty()) throw UsageError("train_median policy needs --train-population");
        ShadowPopulation tp = load_pop(a.train_population);
        score_population(meta, tp);
        thr = choose_threshold(tp.records);
    }
    return evaluate_population(pop.records, thr, policy);
}

int cmd_mntd_score(const Globals& g, const ScoreArgs& a, std::ostream& out) {
    const PopulationEval ev = score_and_eval(a);
    const fs::path path = fs::path(g.out) / "scores.csv";
    write_file(path, ev.to_csv());
    out << "scores " << path.string() << "\nthreshold " << format_double(ev.threshold) << "\n";
    return kExitOk;
}

int cmd_mntd_eval(const Globals& g, const ScoreArgs& a, std::ostream& out) {
    const PopulationEval ev = score_and_eval(a);
    const fs::path dir = g.out;
    write_file(dir / "scores.csv", ev.to_csv());
    write_file(dir / "eval.json", nlohmann::json{{"policy", threshold_policy_name(ev.policy)},
                                                 {"threshold", ev.threshold},
                                                 {"accuracy", ev.accuracy},
                                                 {"auc", ev.auc}}
                                          .dump(2) +
                                      "\n");
    out << "policy " << threshold_policy_name(ev.policy) << "\nthreshold " << format_double(ev.threshold)
        << "\naccuracy " << format_double(ev.accuracy) << "\nauc " << format_double(ev.auc) << "\n";
    return kExitOk;
}

int cmd_scenario_run(const Globals& g, const std::string& id, const std::string& presets, std::ostream& out) {
    const auto& ids = scenario_ids();
    if (std::find(ids.begin(), ids.end(), id) == ids.end()) throw UsageError("unknown scenario '" + id + "'");
    ScenarioConfig cfg;
    if (!g.config.empty()) {
        cfg = base_config(g, id);
    } else if (const fs::path preset = fs::path(presets) / (id + ".json"); fs::exists(preset)) {
        Globals p = g;
        p.config = preset.string();
        cfg = base_config(p, id);
    } else {
        cfg = default_scenario_config(id);
    }
    if (cfg.id != id) throw UsageError("config is for scenario '" + cfg.id + "', not '" + id + "'");
    if (g.seed_set) cfg.seeds = {g.seed};
    const fs::path dir = new_run_dir(g.out, id);
    const ScenarioResult res = run_scenario(cfg, dir);
    for (const auto& a : res.assertions) {
        out << (a.passed ? "PASS " : "FAIL ") << a.name << " (" << a.detail << ")\n";
    }
    out << "run " << dir.string() << "\n";
    return res.passed() ? kExitOk : kExitFailure;
}

int cmd_report(const std::string& run_dir, const std::string& format, const std::string& plot, std::ostream& out) {
    if (!fs::is_directory(run_dir)) throw UsageError("not a run directory: " + run_dir);
    const std::vector<MetricRow> rows = load_run_rows(run_dir);
    if (!plot.empty()) {
        out << emit_plot(rows, plot);
    } else {
        out << emit_report(rows, report_format_from(format));
    }
    return kExitOk;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Backdoor attack and defense lab", "bdlab"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    auto* seed_opt = app.add_option("--seed", g.seed, "Seed for single runs; restricts a scenario to this seed");
    app.add_option("--config", g.config, "Scenario config file (JSON)");
    app.add_option("--out", g.out, "Output directory")->capture_default_str();

    std::string model_id = "mlp-2", name = "model", checkpoint;
    double rate = 0.0;
    auto* train_cmd = app.add_subcommand("train", "Train a model, optionally on poisoned data");
    train_cmd->add_option("--model", model_id, "Zoo id: mlp-2, mlp-4, cnn-4+3, cnn-8")->capture_default_str();
    train_cmd->add_option("--poison-rate", rate, "Fraction of training samples stamped and relabeled");
    train_cmd->add_option("--name", name, "Output file stem")->capture_default_str();

    std::optional<double> epsilon, attack_rate;
    auto* attack_cmd = app.add_subcommand("attack", "Inject a backdoor by l-inf bounded fine-tuning");
    attack_cmd->add_option("--checkpoint", checkpoint, "Clean model")->required();
    attack_cmd->add_option("--epsilon", epsilon, "Per-parameter bound");
    attack_cmd->add_option("--poison-rate", attack_rate, "Poison rate of the fine-tuning data");

    auto* nc_cmd = app.add_subcommand("scan-nc", "Trigger reverse-engineering scan with anomaly index");
    nc_cmd->add_option("--checkpoint", checkpoint, "Model to scan")->required();
    auto* abs_cmd = app.add_subcommand("scan-abs", "Neuron stimulation scan");
    abs_cmd->add_option("--checkpoint", checkpoint, "Model to scan")->required();

    auto* mntd_cmd = app.add_subcommand("mntd", "Meta neural trojan detection");
    mntd_cmd->require_subcommand(1);
    std::string population;
    bool generate = false;
    auto* mntd_train = mntd_cmd->add_subcommand("train", "Train a meta-classifier on a shadow population");
    mntd_train->add_option("--population", population, "Population directory");
    mntd_train->add_flag("--generate", generate, "Train the config's shadow population first");
    ScoreArgs sa;
    auto add_score_opts = [&](CLI::App* sub) {
        sub->add_option("--meta", sa.meta, "Meta-classifier container")->required();
        sub->add_option("--population", sa.population, "Population to score")->required();
        sub->add_option("--policy", sa.policy, "test_median or train_median")->capture_default_str();
        sub->add_option("--train-population", sa.train_population, "Population for the train_median policy");
        sub->add_option("--threshold", sa.threshold, "Fixed threshold (overrides --policy)");
    };
    auto* mntd_score = mntd_cmd->add_subcommand("score", "Write model_id,label,score,verdict rows");
    add_score_opts(mntd_score);
    auto* mntd_eval = mntd_cmd->add_subcommand("eval", "Accuracy and AUC of a scored population");
    add_score_opts(mntd_eval);

    auto* scenario_cmd = app.add_subcommand("scenario", "Scenario runner");
    scenario_cmd->require_subcommand(1);
    std::string scenario_id, presets = BDLAB_PRESET_DIR;
    auto* scenario_run = scenario_cmd->add_subcommand("run", "Run a scenario into a fresh run directory");
    scenario_run->add_option("id", scenario_id, "Scenario id")->required();
    scenario_run->add_option("--presets", presets, "Preset directory")->capture_default_str();
    auto* scenario_list = scenario_cmd->add_subcommand("list", "List scenario ids");

    std::string run_dir, format = "csv", plot;
    auto* report_cmd = app.add_subcommand("report", "Re-emit a run's report or plot");
    report_cmd->add_option("run_dir", run_dir, "Run directory")->required();
    report_cmd->add_option("--format", format, "csv or json")->capture_default_str();
    report_cmd->add_option("--plot", plot, "Plot kind: ai_bars, reasr_bars, auc_curve, score_dist");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    }
    g.seed_set = seed_opt->count() > 0;

    try {
        if (*train_cmd) return cmd_train(g, model_id, rate, name, out);
        if (*attack_cmd) return cmd_attack(g, checkpoint, epsilon, attack_rate, out, err);
        if (*nc_cmd) return cmd_scan_nc(g, checkpoint, out);
        if (*abs_cmd) return cmd_scan_abs(g, checkpoint, out);
        if (*mntd_train) return cmd_mntd_train(g, population, generate, out);
        if (*mntd_score) return cmd_mntd_score(g, sa, out);
        if (*mntd_eval) return cmd_mntd_eval(g, sa, out);
        if (*scenario_list) {
            for (const auto& id : scenario_ids()) out << id << "\n";
            return kExitOk;
        }
        if (*scenario_run) return cmd_scenario_run(g, scenario_id, presets, out);
        if (*report_cmd) return cmd_report(run_dir, format, plot, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    err << app.help();
    return kExitUsage;
}

} // namespace bdlab::cli
