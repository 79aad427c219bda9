#pragma once

// Observational datasets, train/val/test splitting, synthetic generators with
// known nuisance functions, and assumption diagnostics.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mbrl/common.hpp"

namespace mbrl {

enum class OutcomeKind { kContinuous, kBinary };

std::string to_string(OutcomeKind kind);
OutcomeKind outcome_kind_from_string(const std::string& name);

/// Covariates Z (N x s), binary treatment D, factual outcome Y and, for
/// synthetic or semi-synthetic data, the potential outcomes Y(0), Y(1) and
/// their noiseless means.
struct Dataset {
  Matrix covariates;
  Vector treatment;
  Vector outcome;
  OutcomeKind outcome_kind = OutcomeKind::kContinuous;
  std::optional<Vector> y0, y1;
  std::optional<Vector> mu0, mu1;

  Eigen::Index size() const { return covariates.rows(); }
  Eigen::Index dim() const { return covariates.cols(); }
  bool has_potential_outcomes() const { return y0.has_value() && y1.has_value(); }
  bool has_noiseless_means() const { return mu0.has_value() && mu1.has_value(); }
  Eigen::Index treated_count() const;

  /// Throws ValidationError naming the first violated invariant.
  void validate() const;
};

/// Rows `indices` of `data`, in the given order.
Dataset subset(const Dataset& data, const std::vector<Eigen::Index>& indices);
/// Row-wise concatenation; both parts must share dimension and outcome kind.
Dataset concat(const Dataset& a, const Dataset& b);

Dataset load_csv(const std::string& path, OutcomeKind kind);
Dataset parse_csv(const std::string& text, OutcomeKind kind);
void write_csv(const Dataset& data, const std::string& path);
std::string format_csv(const Dataset& data);

struct SplitSpec {
  double train_frac = 0.63;
  double val_frac = 0.27;
  double test_frac = 0.10;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SplitIndices {
  std::vector<Eigen::Index> train, val, test;
};

struct DataSplit {
  Dataset train, val, test;
  SplitIndices indices;
};

/// Validation and test sizes are floor(N * frac); the remainder goes to train.
SplitIndices split_indices(Eigen::Index n, const SplitSpec& spec);
DataSplit split(const Dataset& data, const SplitSpec& spec);

/// Ground-truth nuisance functions of a generator: a linear outcome model
/// g0(d, z) = w_d' z (absent for data whose outcome law is unknown) and a
/// logistic propensity m0(z) = sigmoid(a' z + c).
struct TrueModel {
  struct LinearOutcome {
    Vector w_treated, w_control;
  };
  std::optional<LinearOutcome> outcome;
  Vector propensity_weights;
  double propensity_intercept = 0.0;
  double noise_sd_outcome = 0.0;

  double g0(int d, const Eigen::Ref<const Eigen::RowVectorXd>& z) const;
  double m0(const Eigen::Ref<const Eigen::RowVectorXd>& z) const;
  Vector g0(int d, const Matrix& z) const;
  Vector m0(const Matrix& z) const;
};

struct SimConfig {
  int n_treated = 2500;
  int n_control = 5000;
  int dim = 10;
  Vector mu1;  // empty -> zeros
  Vector mu0;  // empty -> zeros
  double sigma_scale = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  Vector mu1_or_zero() const;
  Vector mu0_or_zero() const;
};

/// Seed-determined pieces of the simulator shared by both groups: the mixing
/// matrix behind the covariance and the outcome coefficients.
struct SimStructure {
  Matrix covariance;
  Vector w_treated, w_control;
};

SimStructure draw_sim_structure(const SimConfig& cfg, std::uint64_t seed);

struct Simulation {
  Dataset data;
  TrueModel truth;
  SimStructure structure;
};

Simulation generate_simulation(const SimConfig& cfg, std::uint64_t seed);
/// Same as above with a pre-drawn structure (used by the KL sweep, which
/// needs the covariance before choosing mu1).
Simulation generate_simulation(const SimConfig& cfg, const SimStructure& structure,
                               std::uint64_t seed);

struct TwinsAssignmentOptions {
  bool zero_coefficients = false;  // debug hook: w = 0 and n = 0
};

struct TwinsAssignment {
  Vector treatment;
  TrueModel truth;
};

TwinsAssignment generate_twins_assignment(const Matrix& covariates, std::uint64_t seed,
                                          TwinsAssignmentOptions options = {});

/// Builds a Dataset from twin pairs: treatment drawn by the assignment model,
/// factual outcome picked from (y0, y1) accordingly.
/// Twin-pair table: columns z1..zs, y0, y1 (any d/y columns are ignored).
struct TwinsSource {
  Matrix covariates;
  Vector y0, y1;
};

TwinsSource load_twins_csv(const std::string& path);
TwinsSource parse_twins_csv(const std::string& text);

Dataset make_twins_dataset(const Matrix& covariates, const Vector& y0, const Vector& y1,
                           const TwinsAssignment& assignment);

/// KL(N(mu1, cov) || N(mu0, cov)) = 0.5 (mu1 - mu0)' cov^-1 (mu1 - mu0).
double kl_selection_bias(const Vector& mu1, const Vector& mu0, const Matrix& cov);

/// mu1 placed on the ray mu0 + s * direction, s >= 0, with the requested KL.
Vector mu1_for_kl(const Vector& mu0, const Vector& direction, const Matrix& cov,
                  double target_kl);

struct OverlapReport {
  bool passed = true;
  std::vector<Eigen::Index> violations;
  double eps = 0.0;
};

OverlapReport check_overlap(const Vector& propensities, double eps);

/// Mean of mu1 - mu0 when noiseless means exist, else of y1 - y0.
double true_ate(const Dataset& data);

}  // namespace mbrl
