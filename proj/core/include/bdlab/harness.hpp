#pragma once

#include "bdlab/abs_scan.hpp"
#include "bdlab/attacks.hpp"
#include "bdlab/datasets.hpp"
#include "bdlab/mntd.hpp"
#include "bdlab/nets.hpp"
#include "bdlab/neural_cleanse.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace bdlab {

inline const std::vector<std::string>& scenario_ids() {
    static const std::vector<std::string> ids{"nc_binary",        "nc_depth",       "abs_poison_sweep",
                                              "abs_weight_perturb", "mntd_threshold", "mntd_hparam_sweep"};
    return ids;
}

struct DataConfig {
    std::string kind = "strokes"; // strokes | binary | idx
    std::size_t n_train = 2000;
    std::size_t n_test = 1000;
    int classes = 10;
    std::size_t side = 16;
    // 0 draws the split from each run seed; anything else fixes it.
    std::uint64_t seed = 0;
    // kind == idx: directory holding train/t10k image and label files.
    std::string idx_dir;

    nlohmann::json to_json() const;
    static DataConfig from_json(const nlohmann::json& j);
};

SplitPair load_data(const DataConfig& cfg, std::uint64_t run_seed = 1);

struct MntdScenarioConfig {
    ShadowSetConfig train_population;
    ShadowSetConfig matched_population;
    ShadowSetConfig shifted_population;
    MetaConfig meta;
    std::vector<int> benign_epoch_sweep{4, 5, 6, 7, 8};
    int converged_epochs = 16;

    nlohmann::json to_json() const;
    static MntdScenarioConfig from_json(const nlohmann::json& j);
};

struct ScenarioConfig {
    std::string id;
    std::string comment;
    DataConfig data;
    std::vector<std::string> models;
    std::size_t base_width = 8;
    TrainConfig train; // seed replaced by the run seed
    TriggerSpec trigger;
    std::vector<double> poison_rates;
    ReverseConfig nc;
    AbsConfig abs;
    double epsilon = 0.01;
    TrainConfig finetune; // seed is added to the run seed
    std::optional<MntdScenarioConfig> mntd;
    std::vector<std::uint64_t> seeds{1, 2, 3};

    // Throws ConfigError on unknown ids, models or out-of-range values.
    void validate() const;
    nlohmann::json to_json() const;
    // Unknown keys are errors.
    static ScenarioConfig from_json(const nlohmann::json& j);
    std::string hash() const; // FNV-1a of the canonical JSON
};

ScenarioConfig default_scenario_config(const std::string& id);
ScenarioConfig load_scenario_config(const std::filesystem::path& path);

// One CSV row: scenario,seed,stage,metric,value,verdict,artifact_path
struct MetricRow {
    std::string scenario;
    std::string seed; // numeric seed, or agg_mean / agg_std
    std::string stage;
    std::string metric;
    double value = 0.0;
    std::string verdict;
    std::string artifact_path;

    bool operator==(const MetricRow&) const = default;
};

struct Assertion {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct ScenarioResult {
    std::string scenario;
    std::string config_hash;
    std::vector<MetricRow> rows; // per-seed rows, then aggregate rows
    std::vector<Assertion> assertions;
    std::string failed_stage; // set when a stage threw
    std::filesystem::path run_dir;

    bool passed() const;
};

// Runs the scenario and writes artifacts plus report.csv, report.json and
// plots under run_dir.
ScenarioResult run_scenario(const ScenarioConfig& cfg, const std::filesystem::path& run_dir);

// Fresh <base>/<scenario>-<UTC timestamp>[-n] directory.
std::filesystem::path new_run_dir(const std::filesystem::path& base, const std::string& scenario);

// Mean and sample standard deviation rows per (stage, metric) over the
// numeric-seed rows.
std::vector<MetricRow> aggregate_rows(const std::vector<MetricRow>& rows);

enum class ReportFormat { csv, json };
ReportFormat report_format_from(const std::string& s);
std::string emit_report(const std::vector<MetricRow>& rows, ReportFormat format);
void write_report(const std::vector<MetricRow>& rows, ReportFormat format, const std::filesystem::path& path);
std::vector<MetricRow> parse_csv_report(const std::string& text);
std::vector<MetricRow> parse_json_report(const std::string& text);
// Rows recovered from a run directory's report.json.
std::vector<MetricRow> load_run_rows(const std::filesystem::path& run_dir);

// Plot kinds: ai_bars, reasr_bars, auc_curve, score_dist. Bars/points carry
// their numeric value as text and as a data-value attribute. Throws
// ConfigError when no row has the metric the kind needs.
std::string emit_plot(const std::vector<MetricRow>& rows, const std::string& kind);
const std::vector<std::string>& plot_kinds();

// Shortest decimal that reads back to the same double.
std::string format_double(double v);

} // namespace bdlab
