#include "mbrl/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <Eigen/QR>

namespace mbrl {

NuisanceEstimates NuisanceEstimates::make(Vector g0, Vector g1, Vector m) {
  NuisanceEstimates n;
  for (Eigen::Index k = 0; k < m.size(); ++k) {
    const double c = std::clamp(m[k], kPropensityClamp, 1.0 - kPropensityClamp);
    if (c != m[k]) ++n.clamp_events;
    m[k] = c;
  }
  n.g0_hat = std::move(g0);
  n.g1_hat = std::move(g1);
  n.m_hat = std::move(m);
  n.validate();
  return n;
}

void NuisanceEstimates::validate() const {
  if (g0_hat.size() == 0) throw ValidationError("nuisance estimates are empty");
  if (g1_hat.size() != g0_hat.size() || m_hat.size() != g0_hat.size())
    throw ValidationError("nuisance estimates have unequal lengths");
  if (!g0_hat.allFinite() || !g1_hat.allFinite() || !m_hat.allFinite())
    throw ValidationError("nuisance estimates are not finite");
  if ((m_hat.array() <= 0.0).any() || (m_hat.array() >= 1.0).any())
    throw ValidationError("propensity estimates must lie strictly inside (0, 1)");
}

ThetaPair plug_in_ate(const NuisanceEstimates& nuis) {
  nuis.validate();
  return ThetaPair::of(nuis.g0_hat.mean(), nuis.g1_hat.mean());
}

double score_psi1(double y, double d, double g_i, double m, double theta, int i) {
  const double ind = i == 1 ? d : 1.0 - d;
  const double prob = i == 1 ? m : 1.0 - m;
  return theta - g_i - (y - g_i) * ind / prob;
}

double score_psi2(double y, double d, double g_i, double g_d, double m, double theta, int) {
  const double nu = d - m;
  return theta - g_i - (y - g_d) * nu * nu / (m * (1.0 - m));
}

namespace {

void check_arm(int i) {
  if (i != 0 && i != 1) throw ValidationError("treatment arm must be 0 or 1");
}

void check_sizes(const Dataset& data, const NuisanceEstimates& nuis) {
  nuis.validate();
  if (data.size() == 0) throw ValidationError("empty dataset");
  if (data.size() != nuis.size()) throw ValidationError("dataset and nuisances differ in length");
}

double unit_score(Score kind, const Dataset& data, const NuisanceEstimates& nuis, double theta,
                  int i, Eigen::Index k) {
  const double y = data.outcome[k];
  const double d = data.treatment[k];
  const double g_i = nuis.g(i)[k];
  const double m = nuis.m_hat[k];
  if (kind == Score::kPsi1) return score_psi1(y, d, g_i, m, theta, i);
  const double g_d = d == 1.0 ? nuis.g1_hat[k] : nuis.g0_hat[k];
  return score_psi2(y, d, g_i, g_d, m, theta, i);
}

}  // namespace

double mean_score(Score kind, const Dataset& data, const NuisanceEstimates& nuis, double theta,
                  int i) {
  check_arm(i);
  check_sizes(data, nuis);
  double s = 0.0;
  for (Eigen::Index k = 0; k < data.size(); ++k) s += unit_score(kind, data, nuis, theta, i, k);
  return s / static_cast<double>(data.size());
}

double solve_theta(Score kind, const Dataset& data, const NuisanceEstimates& nuis, int i) {
  // psi = theta - T_k with T_k = psi(theta = 0) negated.
  check_arm(i);
  check_sizes(data, nuis);
  double s = 0.0;
  for (Eigen::Index k = 0; k < data.size(); ++k) s -= unit_score(kind, data, nuis, 0.0, i, k);
  return s / static_cast<double>(data.size());
}

ThetaPair ate_orthogonal(Score kind, const Dataset& data, const NuisanceEstimates& nuis) {
  return ThetaPair::of(solve_theta(kind, data, nuis, 0), solve_theta(kind, data, nuis, 1));
}

NuisanceEstimates true_nuisances(const Dataset& data, const TrueModel& truth) {
  if (!truth.outcome) throw ValidationError("truth missing: outcome model unknown");
  return NuisanceEstimates::make(truth.g0(0, data.covariates), truth.g0(1, data.covariates),
                                 truth.m0(data.covariates));
}

ProbeResult orthogonality_probe(ProbeScore kind, const Dataset& data, const TrueModel& truth,
                                ProbeDirection direction, double t, const ProbeOptions& opts) {
  if (t == 0.0) throw ValidationError("degenerate step");
  if (!(std::abs(t) <= 0.1)) throw ValidationError("probe step must satisfy |t| <= 0.1");
  check_arm(opts.arm);
  if (!truth.outcome) throw ValidationError("truth missing: outcome model unknown");
  if (data.size() < 2) throw ValidationError("probe needs at least two units");

  const int i = opts.arm;
  const NuisanceEstimates base = true_nuisances(data, truth);
  const double theta = base.g(i).mean();
  const auto n = data.size();

  auto score_at = [&](Eigen::Index k, double s, double delta) {
    double g0 = base.g0_hat[k], g1 = base.g1_hat[k], m = base.m_hat[k];
    if (direction == ProbeDirection::kPerturbG) {
      g0 += s * delta;
      g1 += s * delta;
    } else {
      m = std::clamp(m + s * delta, kPropensityClamp, 1.0 - kPropensityClamp);
    }
    const double y = data.outcome[k];
    const double d = data.treatment[k];
    const double g_i = i == 1 ? g1 : g0;
    switch (kind) {
      case ProbeScore::kPsi1: return score_psi1(y, d, g_i, m, theta, i);
      case ProbeScore::kPsi2: return score_psi2(y, d, g_i, d == 1.0 ? g1 : g0, m, theta, i);
      case ProbeScore::kPluginNaive: return theta - g_i;
    }
    return 0.0;
  };

  Vector q(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto z = data.covariates.row(k);
    const double delta = opts.delta ? opts.delta(z) : 0.1 * std::tanh(z[0]);
    q[k] = (score_at(k, t, delta) - score_at(k, -t, delta)) / (2.0 * t);
  }
  return {q.mean(), sample_sd(q) / std::sqrt(static_cast<double>(n))};
}

NoiseOrthogonality noise_orthogonality_stat(const Dataset& data, const TrueModel& truth) {
  if (!truth.outcome) throw ValidationError("truth missing: outcome model unknown");
  if (data.size() == 0) throw ValidationError("empty dataset");
  const Vector g0 = truth.g0(0, data.covariates);
  const Vector g1 = truth.g0(1, data.covariates);
  const Vector m = truth.m0(data.covariates);
  const Vector g_d = (data.treatment.array() == 1.0).select(g1, g0);
  const Vector prod = ((data.outcome - g_d).array() * (data.treatment - m).array()).matrix();
  return {prod.mean(), sample_sd(prod)};
}

namespace {

Matrix with_intercept(const Matrix& z) {
  Matrix x(z.rows(), z.cols() + 1);
  x.col(0).setOnes();
  x.rightCols(z.cols()) = z;
  return x;
}

struct LeastSquares {
  Vector coef;
  bool rank_deficient = false;
};

LeastSquares least_squares(const Matrix& x, const Vector& y) {
  if (x.rows() == 0) throw ValidationError("baseline: empty treatment group");
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(x);
  return {cod.solve(y), cod.rank() < x.cols()};
}

std::vector<Eigen::Index> group_rows(const Dataset& data, double arm) {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index k = 0; k < data.size(); ++k)
    if (data.treatment[k] == arm) rows.push_back(k);
  return rows;
}

double knn_mean(const Dataset& train, const std::vector<Eigen::Index>& pool,
                const Eigen::Ref<const Eigen::RowVectorXd>& z, int k) {
  std::vector<std::pair<double, Eigen::Index>> dist;
  dist.reserve(pool.size());
  for (Eigen::Index r : pool) dist.emplace_back((train.covariates.row(r) - z).squaredNorm(), r);
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), dist.size());
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk), dist.end());
  double s = 0.0;
  for (std::size_t j = 0; j < kk; ++j) s += train.outcome[dist[j].second];
  return s / static_cast<double>(kk);
}

}  // namespace

BaselineResult baseline(BaselineKind kind, const Dataset& train, const Dataset& eval, int k) {
  if (train.size() == 0 || eval.size() == 0) throw ValidationError("baseline: empty dataset");
  if (train.dim() != eval.dim()) throw ValidationError("baseline: covariate dimension differs");
  const auto treated = group_rows(train, 1.0);
  const auto control = group_rows(train, 0.0);
  if (treated.empty() || control.empty()) throw ValidationError("baseline: a treatment group is empty");

  BaselineResult out;
  const Eigen::Index n = eval.size();
  switch (kind) {
    case BaselineKind::kOlsLr1: {
      Matrix x(train.size(), train.dim() + 2);
      x.leftCols(train.dim() + 1) = with_intercept(train.covariates);
      x.col(train.dim() + 1) = train.treatment;
      const LeastSquares ls = least_squares(x, train.outcome);
      out.rank_deficient = ls.rank_deficient;
      const double effect = ls.coef[train.dim() + 1];
      out.yhat0 = with_intercept(eval.covariates) * ls.coef.head(train.dim() + 1);
      out.yhat1 = out.yhat0.array() + effect;
      break;
    }
    case BaselineKind::kOlsLr2: {
      const Dataset t = subset(train, treated);
      const Dataset c = subset(train, control);
      const LeastSquares l1 = least_squares(with_intercept(t.covariates), t.outcome);
      const LeastSquares l0 = least_squares(with_intercept(c.covariates), c.outcome);
      out.rank_deficient = l1.rank_deficient || l0.rank_deficient;
      const Matrix xe = with_intercept(eval.covariates);
      out.yhat1 = xe * l1.coef;
      out.yhat0 = xe * l0.coef;
      break;
    }
    case BaselineKind::kKnn: {
      if (k < 1) throw ValidationError("knn: k must be >= 1");
      out.yhat0.resize(n);
      out.yhat1.resize(n);
      for (Eigen::Index r = 0; r < n; ++r) {
        const auto z = eval.covariates.row(r);
        if (eval.treatment[r] == 1.0) {
          out.yhat1[r] = eval.outcome[r];
          out.yhat0[r] = knn_mean(train, control, z, k);
        } else {
          out.yhat0[r] = eval.outcome[r];
          out.yhat1[r] = knn_mean(train, treated, z, k);
        }
      }
      break;
    }
  }
  out.ite = out.yhat1 - out.yhat0;
  out.theta = ThetaPair::of(out.yhat0.mean(), out.yhat1.mean());
  return out;
}

}  // namespace mbrl
