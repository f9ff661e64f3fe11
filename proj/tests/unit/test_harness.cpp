#include <doctest.h>

#include "bdlab/errors.hpp"
#include "bdlab/harness.hpp"
#include "support.hpp"

#include <cmath>
#include <filesystem>
#include <limits>
#include <regex>
#include <set>

using namespace bdlab;
namespace fs = std::filesystem;

namespace {

std::vector<MetricRow> sample_rows() {
    return {{"s", "1", "train", "cda", 0.9, "", ""},
            {"s", "2", "train", "cda", 0.7, "", ""},
            {"s", "3", "train", "cda", 0.8, "", ""},
            {"s", "1", "nc, \"odd\" stage", "anomaly_index", 2.5, "backdoored", "seed-1/nc.json"},
            {"s", "2", "nc, \"odd\" stage", "anomaly_index", 0.4, "benign", ""},
            {"s", "1", "pop", "score:m-b000", 1.25, "benign", ""},
            {"s", "1", "x", "gap", std::numeric_limits<double>::infinity(), "", ""},
            {"s", "population", "pop", "failed", 0, "", ""}};
}

ScenarioConfig tiny_nc_binary() {
    ScenarioConfig c = default_scenario_config("nc_binary");
    c.data.n_train = 200;
    c.data.n_test = 100;
    c.data.side = 8;
    c.base_width = 4;
    c.train.epochs = 2;
    c.nc.epochs = 2;
    c.nc.steps_per_epoch = 2;
    c.nc.sample_count = 40;
    c.seeds = {5};
    return c;
}

} // namespace

TEST_SUITE("harness") {

TEST_CASE("defaults validate and the shipped presets equal them") {
    for (const auto& id : scenario_ids()) {
        const ScenarioConfig c = default_scenario_config(id);
        CHECK_NOTHROW(c.validate());
        CHECK(c.seeds == std::vector<std::uint64_t>{1, 2, 3});
        CHECK(ScenarioConfig::from_json(c.to_json()).hash() == c.hash());
        const fs::path preset = fs::path(BDLAB_PRESET_DIR) / (id + ".json");
        REQUIRE(fs::exists(preset));
        CHECK(load_scenario_config(preset).hash() == c.hash());
    }
    CHECK_THROWS_AS(default_scenario_config("nc_wide"), ConfigError);
}

TEST_CASE("config parsing rejects unknown keys and bad values") {
    auto j = default_scenario_config("nc_binary").to_json();
    auto extra = j;
    extra["colour"] = "blue";
    CHECK_THROWS_AS(ScenarioConfig::from_json(extra), ConfigError);
    extra = j;
    extra["train"]["momentum"] = 0.9;
    CHECK_THROWS_AS(ScenarioConfig::from_json(extra), ConfigError);
    extra = j;
    extra["nc"]["steps"] = 3;
    CHECK_THROWS_AS(ScenarioConfig::from_json(extra), ConfigError);

    ScenarioConfig c = default_scenario_config("abs_poison_sweep");
    c.poison_rates = {0.5, 0.6, 0};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = default_scenario_config("nc_binary");
    c.seeds = {1, 1};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = default_scenario_config("abs_weight_perturb");
    c.epsilon = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    test::TempDir dir("cfg");
    CHECK_THROWS_AS(load_scenario_config(dir.path() / "missing.json"), IoError);
}

TEST_CASE("format_double reads back exactly") {
    Rng rng(4);
    for (int i = 0; i < 2000; ++i) {
        const double v = std::ldexp(rng.uniform(-1.0, 1.0), static_cast<int>(rng.below(80)) - 40);
        CHECK(std::stod(format_double(v)) == v);
    }
    CHECK(format_double(0.5) == "0.5");
    CHECK(format_double(std::nan("")) == "nan");
}

TEST_CASE("CSV and JSON reports round-trip losslessly") {
    const auto rows = sample_rows();
    const std::string csv = emit_report(rows, ReportFormat::csv);
    CHECK(csv.rfind("scenario,seed,stage,metric,value,verdict,artifact_path\n", 0) == 0);
    CHECK(parse_csv_report(csv) == rows);
    CHECK(emit_report(parse_csv_report(csv), ReportFormat::csv) == csv);
    const std::string json = emit_report(rows, ReportFormat::json);
    CHECK(parse_json_report(json) == rows);
    CHECK(emit_report(parse_json_report(json), ReportFormat::csv) == csv);
    CHECK_THROWS_AS(parse_csv_report("scenario,seed\n"), ValidationError);
    CHECK_THROWS_AS(report_format_from("xml"), ConfigError);
}

TEST_CASE("aggregates are the mean and sample deviation per stage and metric") {
    const auto agg = aggregate_rows(sample_rows());
    auto find = [&](const std::string& seed, const std::string& stage, const std::string& metric) {
        for (const auto& r : agg)
            if (r.seed == seed && r.stage == stage && r.metric == metric) return r.value;
        FAIL("missing aggregate " << stage << "/" << metric);
        return 0.0;
    };
    CHECK(find("agg_mean", "train", "cda") == doctest::Approx(0.8));
    CHECK(find("agg_std", "train", "cda") == doctest::Approx(0.1));
    CHECK(find("agg_mean", "nc, \"odd\" stage", "anomaly_index") == doctest::Approx(1.45));
    for (const auto& r : agg) {
        CHECK(r.metric.rfind("score:", 0) != 0);
        CHECK(r.stage != "pop");
    }
}

TEST_CASE("plots embed the plotted values") {
    const auto rows = sample_rows();
    const std::string svg = emit_plot(rows, "ai_bars");
    const std::regex bar("class=\"bar\"[^>]*data-value=\"([^\"]+)\"");
    std::vector<std::string> got;
    for (auto it = std::sregex_iterator(svg.begin(), svg.end(), bar); it != std::sregex_iterator(); ++it)
        got.push_back((*it)[1]);
    CHECK(got == std::vector<std::string>{"2.5", "0.4"});
    CHECK(svg.find("data-value=\"2\"") != std::string::npos); // threshold line
    CHECK(emit_plot(rows, "score_dist").find("data-value=\"1.25\"") != std::string::npos);
    CHECK_THROWS_AS(emit_plot(rows, "reasr_bars"), ConfigError);
    CHECK_THROWS_AS(emit_plot(rows, "pie"), ConfigError);
}

TEST_CASE("run directories are never reused") {
    test::TempDir dir("runs");
    std::set<fs::path> seen;
    for (int i = 0; i < 5; ++i) {
        const fs::path p = new_run_dir(dir.path(), "nc_binary");
        CHECK(fs::is_directory(p));
        CHECK(seen.insert(p).second);
        CHECK(p.filename().string().rfind("nc_binary-", 0) == 0);
    }
}

TEST_CASE("a small scenario writes a consistent run directory") {
    test::TempDir dir("scenario");
    const ScenarioConfig cfg = tiny_nc_binary();
    const ScenarioResult r = run_scenario(cfg, dir.path());
    CHECK(r.failed_stage.empty());
    CHECK(r.config_hash == cfg.hash());
    for (const char* f : {"config.json", "report.csv", "report.json", "run_info.json", "plots/ai_bars.svg"})
        CHECK(fs::exists(dir.path() / f));
    CHECK(load_run_rows(dir.path()) == r.rows);
    CHECK(test::slurp(dir.path() / "report.csv") == emit_report(r.rows, ReportFormat::csv));
    CHECK(load_scenario_config(dir.path() / "config.json").hash() == cfg.hash());
    bool has_ai = false;
    for (const auto& row : r.rows) has_ai |= row.metric == "anomaly_index" && row.seed == "5";
    CHECK(has_ai);
}

TEST_CASE("a stage that throws fails the scenario") {
    test::TempDir dir("broken");
    ScenarioConfig cfg = tiny_nc_binary();
    cfg.data.kind = "idx";
    cfg.data.classes = 2;
    cfg.data.idx_dir = (dir.path() / "nowhere").string();
    const ScenarioResult r = run_scenario(cfg, dir.path());
    CHECK_FALSE(r.failed_stage.empty());
    CHECK_FALSE(r.passed());
    CHECK(fs::exists(dir.path() / "report.csv"));
}

} // TEST_SUITE
