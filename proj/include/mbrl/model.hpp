#pragma once

// The moderately-balanced representation network: encoder Phi, treatment
// discriminator pi on top of Phi, outcome heads f0/f1, and the free scalars
// eps_y / eps_d of the noise regularizers. Training alternates three tasks
// per minibatch (discriminate, balance, fit outcomes) and selects the epoch
// with the lowest validation perturbation error.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbrl/data.hpp"
#include "mbrl/ipm.hpp"
#include "mbrl/nn.hpp"

namespace mbrl {

struct Architecture {
  int phi_depth = 4;
  int phi_width = 200;
  int pi_depth = 4;
  int pi_width = 200;
  int f_depth = 3;
  int f_width = 100;

  void validate() const;
  bool operator==(const Architecture&) const = default;
};

struct Subnet {
  nn::NetSpec spec;
  nn::ParamSet params;
};

inline constexpr const char* kEpsY = "eps_y";
inline constexpr const char* kEpsD = "eps_d";
/// Guard on |eps_y|, |eps_d|; the ascent/descent objectives are unbounded in
/// these scalars.
inline constexpr double kEpsClip = 100.0;

struct MBRLNet {
  Subnet phi, pi, f0, f1;
  nn::ParamSet noise;  // scalars eps_y and eps_d
  OutcomeKind outcome_kind = OutcomeKind::kContinuous;

  static MBRLNet create(int input_dim, const Architecture& arch, OutcomeKind kind,
                        std::uint64_t seed);

  double eps_y() const { return noise.scalars.at(kEpsY); }
  double eps_d() const { return noise.scalars.at(kEpsD); }
  int input_dim() const { return phi.spec.input_width(); }
  void validate() const;
  bool operator==(const MBRLNet& other) const;
};

struct Prediction {
  Vector yhat0, yhat1, propensity;
  Vector factual(const Vector& treatment) const;
};

Prediction predict(const MBRLNet& net, const Matrix& z);

struct Batch {
  Matrix z;
  Vector d, y;
  OutcomeKind outcome_kind = OutcomeKind::kContinuous;

  static Batch from(const Dataset& data);
  static Batch rows(const Dataset& data, const std::vector<Eigen::Index>& idx);
};

double factual_outcome_loss(const MBRLNet& net, const Batch& batch);
double distinguishability_loss(const MBRLNet& net, const Batch& batch);

struct NoiseRegularizers {
  double omega_y = 0.0;
  double omega_d = 0.0;
};
NoiseRegularizers noise_regularizers(const MBRLNet& net, const Batch& batch);

/// Empty-group batches have imbalance 0.
double imbalance_loss(const MBRLNet& net, const Batch& batch, const ipm::SinkhornConfig& cfg);

/// Value and gradients of one task objective. Parameter groups a task does
/// not touch are left as zeros.
struct TaskGradient {
  double value = 0.0;
  double loss = 0.0;   // value without its regularizer term
  double omega = 0.0;  // regularizer Omega_d or Omega_y (before lambda)
  nn::ParamSet phi, pi, f0, f1, noise;
};

/// Task 1 objective L_dis - lambda1 * Omega_d (to be maximized) w.r.t. pi and eps_d.
TaskGradient discrimination_task(const MBRLNet& net, const Batch& batch, double lambda1);
/// Task 2 objective L_imb w.r.t. Phi (envelope gradient of the transport cost).
TaskGradient balance_task(const MBRLNet& net, const Batch& batch, const ipm::SinkhornConfig& cfg);
/// Task 3 objective L_fo + lambda2 * Omega_y w.r.t. Phi, f0, f1 and eps_y.
TaskGradient outcome_task(const MBRLNet& net, const Batch& batch, double lambda2);

enum class Ablation { kFullMbrl, kNoEpsP, kNoOrthogonality, kTarnet, kCfr };

std::string to_string(Ablation a);
Ablation ablation_from_string(const std::string& name);

struct TrainConfig {
  double lambda1 = 0.01;
  double lambda2 = 0.01;
  double beta = 0.1;
  int batch_size = 100;
  int epochs = 1000;
  double learning_rate = 1e-3;
  /// Step size of the Task 2 optimizer; unset means learning_rate.
  std::optional<double> balance_learning_rate;
  Ablation ablation = Ablation::kFullMbrl;
  std::uint64_t seed = 0;
  Architecture arch;
  ipm::SinkhornConfig sinkhorn = ipm::SinkhornConfig::training();

  void validate() const;
  /// Defaults for continuous (IHDP-like) or binary (Twins-like) outcomes.
  static TrainConfig defaults_for(OutcomeKind kind);

  double effective_lambda1() const;
  double effective_lambda2() const;
  bool trains_noise_scalars() const;
  bool runs_balance_task() const;
  bool selects_on_eps_p() const;
  double task2_learning_rate() const { return balance_learning_rate.value_or(learning_rate); }
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct StepLosses {
  double l_fo = 0.0, l_dis = 0.0, l_imb = 0.0, omega_y = 0.0, omega_d = 0.0;
  bool balance_skipped = false;
};

/// Mutable training state: the network plus one Adam state per parameter
/// group and task. Phi has separate moments for the balance and outcome tasks.
struct TrainState {
  MBRLNet net;
  nn::AdamState pi_opt, eps_d_opt;
  nn::AdamState phi_balance_opt;
  nn::AdamState phi_outcome_opt, f0_opt, f1_opt, eps_y_opt;
  long clip_events = 0;

  static TrainState create(MBRLNet net, double learning_rate);
  static TrainState create(MBRLNet net, const TrainConfig& cfg);
};

/// Task 1 (ascend), Task 2 (descend, skipped without both groups), Task 3
/// (descend), applied in this order.
StepLosses multitask_step(TrainState& state, const Batch& batch, const TrainConfig& cfg);

/// RMSE(y, yhat) + beta * |mean((y - yhat)(d - dhat))|.
double perturbation_error(const Vector& y, const Vector& yhat, const Vector& d,
                          const Vector& dhat, double beta);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double l_fo = 0.0, l_dis = 0.0, l_imb = 0.0, omega_y = 0.0, omega_d = 0.0;
  double val_rmse = 0.0, val_eps_p = 0.0;
};

struct Selection {
  MBRLNet net;
  double score = 0.0;
  int epoch = 0;
};

struct Checkpoint {
  /// Snapshot chosen by the configured criterion: validation eps_p for
  /// full_mbrl, validation RMSE for every ablation. `best.score` holds that
  /// criterion's minimum.
  Selection best;
  /// Snapshot with minimum validation RMSE on the same trajectory. Training
  /// never reads the selection rule, so this equals the no_eps_p ablation run
  /// with the same seed.
  Selection best_rmse;
  std::vector<EpochRecord> history;
  TrainConfig config;
  long clip_events = 0;
};

struct EpochScore {
  double rmse = 0.0;
  double eps_p = 0.0;
};
EpochScore validation_score(const MBRLNet& net, const Dataset& val, double beta);

/// Index (0-based) of the first minimum.
std::size_t argmin_first(const std::vector<double>& values);

Checkpoint fit(const Dataset& train, const Dataset& val, const TrainConfig& cfg);

std::string format_training_log(const std::vector<EpochRecord>& history);

nlohmann::json net_to_json(const MBRLNet& net);
MBRLNet net_from_json(const nlohmann::json& j);
/// Model checkpoint plus sidecar: {"model": ..., "config": ..., "best_epoch",
/// "best_score", "history": [...]}.
nlohmann::json checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& j);

struct HyperGrid {
  std::vector<double> lambdas;  // lambda1 = lambda2
  std::vector<int> phi_depths, phi_widths, pi_depths, pi_widths, f_depths, f_widths;
  std::vector<int> batch_sizes, epochs;

  std::size_t candidate_count() const;
  std::vector<TrainConfig> expand(const TrainConfig& base) const;
  /// Searching ranges per dataset kind (IHDP-like continuous, Twins-like binary).
  static HyperGrid table4(OutcomeKind kind);
};

struct HyperSearchResult {
  TrainConfig best;
  double best_score = 0.0;
  std::size_t best_index = 0;
  std::vector<double> scores;
};

HyperSearchResult hyper_search(const Dataset& train, const Dataset& val, const HyperGrid& grid,
                               const TrainConfig& base);

}  // namespace mbrl
