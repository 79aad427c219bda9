#pragma once

// Experiment driver: configuration, replication loop (optionally over a sweep
// of selection-bias levels), MBRL-versus-baseline evaluation, and report files.

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbrl/data.hpp"
#include "mbrl/model.hpp"

namespace mbrl {

enum class SourceKind { kSimulator, kCsv, kTwins };

struct DataSource {
  SourceKind kind = SourceKind::kSimulator;
  SimConfig sim;                   // kSimulator
  std::vector<std::string> paths;  // kCsv: one file per replication
  std::string twins_path;          // kTwins: z1..zs,y0,y1 table
  OutcomeKind outcome_kind = OutcomeKind::kContinuous;
};

/// Estimator keys: plugin, psi1, psi2 (on the eps_p-selected MBRL fit),
/// plugin_rmse_selected (same fit, RMSE-selected snapshot), ols_lr1, ols_lr2, knn.
const std::vector<std::string>& known_estimators();

struct ExperimentConfig {
  DataSource source;
  SplitSpec split;
  TrainConfig train;
  std::vector<std::string> estimators{"plugin", "psi1", "psi2"};
  /// Extra MBRL fits per replication; each is reported as a plug-in row named
  /// after the ablation.
  std::vector<Ablation> ablations;
  int knn_k = 5;
  int replications = 1;
  std::vector<double> kl_levels;  // simulator only; empty = no sweep
  std::uint64_t seed = 0;
  std::string out = "out";
  int threads = 1;
  int cross_fit_folds = 0;  // 0 = off; otherwise >= 2

  void validate() const;
  int level_count() const { return kl_levels.empty() ? 1 : static_cast<int>(kl_levels.size()); }
};

/// Unknown keys are rejected. Relative csv/twins paths resolve against base_dir.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j,
                                             const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
/// Everything that determines results (no output directory, no thread count).
nlohmann::json to_json(const ExperimentConfig& cfg);

struct MethodResult {
  std::string method;
  double ate_in = 0.0;   // |tau - tau_hat| on train + val units
  double ate_out = 0.0;  // same on test units
  std::optional<double> pehe_in, pehe_out, auc_in, auc_out;
  std::optional<double> rmse, eps_p;  // factual, test units
  std::optional<int> best_epoch;

  bool operator==(const MethodResult&) const = default;
};

struct ReplicationResult {
  int level = 0;
  int replication = 0;
  std::optional<double> kl_target, kl_realized;
  std::uint64_t seed = 0;
  bool ok = true;
  std::string error;
  double tau_in = 0.0, tau_out = 0.0;
  long propensity_clamps = 0;
  long eps_clips = 0;
  std::vector<MethodResult> methods;
  double wall_seconds = 0.0;  // kept out of report.json

  bool operator==(const ReplicationResult& o) const;
};

struct MetricSummary {
  double mean = 0.0;
  double se = 0.0;  // sample sd / sqrt(count); 0 for one sample
  int count = 0;
  bool operator==(const MetricSummary&) const = default;
};

struct Aggregate {
  int level = 0;
  std::optional<double> kl;
  std::string method;
  int replications = 0;
  std::map<std::string, MetricSummary> metrics;
  bool operator==(const Aggregate&) const = default;
};

struct Report {
  nlohmann::json config;
  std::vector<ReplicationResult> rows;  // ordered by (level, replication)
  std::vector<int> failures;            // per level
  std::vector<Aggregate> aggregates;

  bool operator==(const Report&) const;
};

/// Metric names used in aggregates and summary.csv.
const std::vector<std::string>& metric_names();
std::vector<Aggregate> aggregate(const std::vector<ReplicationResult>& rows, int levels);

/// Runs one replication; throws on failure.
ReplicationResult run_replication(const ExperimentConfig& cfg, int level, int replication);
Report run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr);

nlohmann::json report_to_json(const Report& report);
Report report_from_json(const nlohmann::json& j);

std::string summary_csv(const Report& report);
std::string boxplot_csv(const Report& report);
std::string timing_csv(const Report& report);

/// MBRL_OUT_DIR overrides cfg.out when set and non-empty.
std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg);
/// Writes report.json, summary.csv, boxplot_data.csv and timing.csv.
void emit_report(const Report& report, const std::filesystem::path& dir);

/// Shortest round-trip decimal form.
std::string format_double(double v);

}  // namespace mbrl
