#pragma once

// ATE estimators on top of fitted nuisances: plug-in, the orthogonal scores
// psi1 (AIPW form) and psi2 (squared-propensity-residual form), numerical
// orthogonality probes, and simple regression / matching baselines.

#include <functional>
#include <optional>

#include "mbrl/data.hpp"

namespace mbrl {

inline constexpr double kPropensityClamp = 1e-4;

struct NuisanceEstimates {
  Vector g0_hat, g1_hat;
  Vector m_hat;  // clamped into [kPropensityClamp, 1 - kPropensityClamp]
  long clamp_events = 0;

  /// Clamps m and counts the entries that moved.
  static NuisanceEstimates make(Vector g0, Vector g1, Vector m);
  Eigen::Index size() const { return g0_hat.size(); }
  const Vector& g(int arm) const { return arm == 1 ? g1_hat : g0_hat; }
  void validate() const;
};

struct ThetaPair {
  double theta0 = 0.0, theta1 = 0.0, ate = 0.0;
  static ThetaPair of(double theta0, double theta1) { return {theta0, theta1, theta1 - theta0}; }
};

ThetaPair plug_in_ate(const NuisanceEstimates& nuis);

/// theta - g_i - (y - g_i) * [i d + (1-i)(1-d)] / [i m + (1-i)(1-m)].
double score_psi1(double y, double d, double g_i, double m, double theta, int i);
/// theta - g_i - (y - g_d) (d - m)^2 / (m (1 - m)).
double score_psi2(double y, double d, double g_i, double g_d, double m, double theta, int i);

enum class Score { kPsi1, kPsi2 };

double mean_score(Score kind, const Dataset& data, const NuisanceEstimates& nuis, double theta,
                  int i);
/// Root of the mean score; both scores have unit slope in theta.
double solve_theta(Score kind, const Dataset& data, const NuisanceEstimates& nuis, int i);
ThetaPair ate_orthogonal(Score kind, const Dataset& data, const NuisanceEstimates& nuis);

/// Evaluates the true g0 and m0 on the data's covariates.
NuisanceEstimates true_nuisances(const Dataset& data, const TrueModel& truth);

enum class ProbeScore { kPsi1, kPsi2, kPluginNaive };
enum class ProbeDirection { kPerturbG, kPerturbM };

struct ProbeOptions {
  int arm = 1;
  /// Perturbation Delta(z). Empty means 0.1 * tanh(z_1). For kPerturbG the
  /// whole outcome function moves, g(d, z) + t Delta(z) for both d.
  std::function<double(const Eigen::Ref<const Eigen::RowVectorXd>&)> delta;
};

struct ProbeResult {
  double derivative = 0.0;  // [S(t) - S(-t)] / (2t)
  double std_error = 0.0;   // Monte Carlo SE of the per-unit difference quotient
};

ProbeResult orthogonality_probe(ProbeScore kind, const Dataset& data, const TrueModel& truth,
                                ProbeDirection direction, double t, const ProbeOptions& opts = {});

struct NoiseOrthogonality {
  double value = 0.0;  // mean (y - g0(d, z)) (d - m0(z))
  double sd = 0.0;     // sample sd of the summands
};

NoiseOrthogonality noise_orthogonality_stat(const Dataset& data, const TrueModel& truth);

enum class BaselineKind { kOlsLr1, kOlsLr2, kKnn };

struct BaselineResult {
  ThetaPair theta;
  Vector ite, yhat0, yhat1;
  bool rank_deficient = false;  // normal equations singular; pseudoinverse used
};

/// Fits on `train` and predicts for `eval`. OLS fits include an intercept.
BaselineResult baseline(BaselineKind kind, const Dataset& train, const Dataset& eval, int k = 5);

}  // namespace mbrl
