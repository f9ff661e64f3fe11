#include <doctest.h>

#include "bdlab/harness.hpp"
#include "cli.hpp"
#include "support.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace bdlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path write_config(const fs::path& dir, const ScenarioConfig& cfg) {
    const fs::path p = dir / (cfg.id + ".json");
    std::ofstream(p) << cfg.to_json().dump(2);
    return p;
}

ScenarioConfig small(const std::string& id) {
    ScenarioConfig c = default_scenario_config(id);
    c.data.n_train = 200;
    c.data.n_test = 100;
    c.data.side = 8;
    c.base_width = 4;
    c.train.epochs = 2;
    c.nc.epochs = 2;
    c.nc.steps_per_epoch = 2;
    c.nc.sample_count = 40;
    c.finetune.epochs = 1;
    c.abs.candidates = 2;
    c.abs.grid_points = 4;
    c.abs.nsf_samples = 4;
    c.abs.reverse_steps = 10;
    c.abs.reasr_samples = 40;
    if (c.mntd) {
        c.data.n_train = 3000;
        for (ShadowSetConfig* p : {&c.mntd->train_population, &c.mntd->shifted_population}) {
            p->n_benign = 3;
            p->n_backdoor = 3;
            p->base_width = 4;
            p->benign_train.epochs = 2;
            p->backdoor_train.epochs = 2;
        }
        c.mntd->meta.epochs = 2;
    }
    return c;
}

std::string value_after(const std::string& text, const std::string& key) {
    std::istringstream in(text);
    std::string k, v;
    while (in >> k >> v)
        if (k == key) return v;
    return {};
}

} // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit 2 and print usage to stderr") {
    for (const auto& args : std::vector<std::vector<std::string>>{
             {}, {"frobnicate"}, {"train", "--bogus"}, {"scan-nc"}, {"scenario", "run", "nc_wide"}}) {
        const Outcome o = run_cli(args);
        CHECK(o.code == cli::kExitUsage);
        CHECK(o.out.empty());
        CHECK_FALSE(o.err.empty());
    }
    const Outcome unknown = run_cli({"frobnicate"});
    CHECK(unknown.err.find("Usage") != std::string::npos);
}

TEST_CASE("a missing or malformed config file exits 2") {
    test::TempDir dir("cli-cfg");
    CHECK(run_cli({"--config", (dir.path() / "none.json").string(), "scenario", "run", "nc_binary"}).code ==
          cli::kExitUsage);
    const fs::path bad = dir.path() / "bad.json";
    std::ofstream(bad) << R"({"id": "nc_binary", "flavour": 1})";
    CHECK(run_cli({"scenario", "run", "nc_binary", "--config", bad.string()}).code == cli::kExitUsage);
    const fs::path other = write_config(dir.path(), small("nc_depth"));
    CHECK(run_cli({"scenario", "run", "nc_binary", "--config", other.string(), "--out", dir.path().string()}).code ==
          cli::kExitUsage);
}

TEST_CASE("help and scenario list succeed") {
    CHECK(run_cli({"--help"}).code == cli::kExitOk);
    const Outcome o = run_cli({"scenario", "list"});
    CHECK(o.code == cli::kExitOk);
    for (const auto& id : scenario_ids()) CHECK(o.out.find(id + "\n") != std::string::npos);
}

TEST_CASE("train writes a checkpoint and history, attack reports a missed floor") {
    test::TempDir dir("cli-train");
    const fs::path cfg = write_config(dir.path(), small("abs_weight_perturb"));
    const std::string out = dir.path().string();
    const Outcome t = run_cli({"train", "--seed", "2", "--config", cfg.string(), "--out", out, "--name", "clean"});
    REQUIRE(t.code == cli::kExitOk);
    CHECK(fs::exists(dir.path() / "clean.bdlb"));
    const std::string hist = test::slurp(dir.path() / "clean_history.csv");
    CHECK(hist.rfind("epoch,loss,acc\n", 0) == 0);

    const Outcome a = run_cli({"attack", "--checkpoint", (dir.path() / "clean.bdlb").string(), "--epsilon", "1e-9",
                               "--config", cfg.string(), "--out", out});
    CHECK(a.code == cli::kExitFailure);
    CHECK(a.err.find("attack failed") != std::string::npos);
    CHECK(std::stod(value_after(a.out, "max_abs_delta")) <= 1e-9);

    CHECK(run_cli({"scan-nc", "--checkpoint", (dir.path() / "nope.bdlb").string()}).code == cli::kExitUsage);
}

TEST_CASE("scan subcommands write their reports") {
    test::TempDir dir("cli-scan");
    const fs::path cfg = write_config(dir.path(), small("abs_poison_sweep"));
    const std::string out = dir.path().string();
    REQUIRE(run_cli({"train", "--config", cfg.string(), "--out", out, "--poison-rate", "0.1"}).code == cli::kExitOk);
    const std::string ck = (dir.path() / "model.bdlb").string();
    const Outcome nc = run_cli({"scan-nc", "--checkpoint", ck, "--config", cfg.string(), "--out", out});
    CHECK(nc.code == cli::kExitOk);
    CHECK_FALSE(value_after(nc.out, "anomaly_index").empty());
    CHECK(fs::exists(dir.path() / "nc_report.json"));
    const Outcome abs = run_cli({"scan-abs", "--checkpoint", ck, "--config", cfg.string(), "--out", out});
    CHECK(abs.code == cli::kExitOk);
    CHECK(AbsReport::from_json(nlohmann::json::parse(test::slurp(dir.path() / "abs_report.json"))).max_reasr ==
          std::stod(value_after(abs.out, "max_reasr")));
}

TEST_CASE("mntd train, score and eval chain through files") {
    test::TempDir dir("cli-mntd");
    const fs::path cfg = write_config(dir.path(), small("mntd_threshold"));
    const std::string out = dir.path().string();
    const Outcome t = run_cli({"mntd", "train", "--generate", "--config", cfg.string(), "--out", out});
    REQUIRE(t.code == cli::kExitOk);
    const std::string pop = value_after(t.out, "population"), meta = value_after(t.out, "meta");
    CHECK(fs::exists(fs::path(pop) / "manifest.json"));
    const Outcome sc = run_cli({"mntd", "score", "--meta", meta, "--population", pop, "--out", out});
    CHECK(sc.code == cli::kExitOk);
    const std::string csv = test::slurp(dir.path() / "scores.csv");
    CHECK(csv.rfind("model_id,label,score,verdict\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
    const Outcome ev = run_cli({"mntd", "eval", "--meta", meta, "--population", pop, "--policy", "train_median",
                                "--train-population", pop, "--out", out});
    CHECK(ev.code == cli::kExitOk);
    CHECK(value_after(ev.out, "threshold") == value_after(sc.out, "threshold"));
    CHECK(run_cli({"mntd", "eval", "--meta", meta, "--population", pop, "--policy", "train_median"}).code ==
          cli::kExitUsage);
    CHECK(run_cli({"mntd", "train", "--config", cfg.string()}).code == cli::kExitUsage);
}

TEST_CASE("scenario assertion failures exit 1 and reports re-emit byte for byte") {
    test::TempDir dir("cli-scenario");
    ScenarioConfig c = small("nc_binary");
    c.poison_rates = {0.0}; // no backdoor, so the ASR assertion fails
    const fs::path cfg = write_config(dir.path(), c);
    const Outcome o = run_cli({"scenario", "run", "nc_binary", "--seed", "4", "--config", cfg.string(), "--out",
                               dir.path().string()});
    CHECK(o.code == cli::kExitFailure);
    CHECK(o.out.find("FAIL ") != std::string::npos);
    const fs::path run = value_after(o.out, "run");
    REQUIRE(fs::is_directory(run));

    const Outcome csv = run_cli({"report", run.string(), "--format", "csv"});
    CHECK(csv.code == cli::kExitOk);
    CHECK(csv.out == test::slurp(run / "report.csv"));
    const Outcome json = run_cli({"report", run.string(), "--format", "json"});
    CHECK(parse_json_report(json.out) == parse_csv_report(csv.out));
    const Outcome plot = run_cli({"report", run.string(), "--plot", "ai_bars"});
    CHECK(plot.out == test::slurp(run / "plots" / "ai_bars.svg"));
    CHECK(run_cli({"report", run.string(), "--format", "xml"}).code == cli::kExitUsage);
    for (const auto& row : parse_csv_report(csv.out))
        if (row.seed != "agg_mean" && row.seed != "agg_std") CHECK(row.seed == "4");

    const Outcome again = run_cli({"scenario", "run", "nc_binary", "--seed", "4", "--config", cfg.string(), "--out",
                                   dir.path().string()});
    const fs::path run2 = value_after(again.out, "run");
    CHECK(run2 != run);
    CHECK(test::slurp(run2 / "report.csv") == test::slurp(run / "report.csv"));
}

} // TEST_SUITE
