#include "mbrl/ipm.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace mbrl::ipm {

void SinkhornConfig::validate() const {
  if (!(entropic_reg > 0.0)) throw ValidationError("entropic_reg must be > 0");
  if (max_iters < 1) throw ValidationError("max_iters must be >= 1");
  if (!(tol > 0.0)) throw ValidationError("tol must be > 0");
}

double pair_cost(const Eigen::Ref<const Eigen::RowVectorXd>& x,
                 const Eigen::Ref<const Eigen::RowVectorXd>& y, Cost cost) {
  const double sq = (x - y).squaredNorm();
  return cost == Cost::kEuclidean ? std::sqrt(sq) : sq;
}

namespace {

Matrix cost_matrix(const Matrix& a, const Matrix& b, Cost cost) {
  // |a|^2 + |b|^2 - 2ab' loses precision for nearby points; compute directly.
  Matrix c(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) c(i, j) = pair_cost(a.row(i), b.row(j), cost);
  return c;
}

// Cost spread (in units of eps) up to which the scaling form is used.
constexpr double kKernelRange = 200.0;

void check_inputs(const Matrix& a, const Matrix& b) {
  if (a.rows() < 1 || b.rows() < 1) throw ValidationError("transport needs non-empty clouds");
  if (a.cols() != b.cols() || a.cols() < 1)
    throw ValidationError("transport clouds must share a positive dimension");
  if (!a.allFinite() || !b.allFinite()) throw ValidationError("non-finite transport input");
}

}  // namespace

SinkhornResult wasserstein_sinkhorn(const Matrix& a, const Matrix& b, const SinkhornConfig& cfg) {
  cfg.validate();
  check_inputs(a, b);
  const Eigen::Index n1 = a.rows();
  const Eigen::Index n0 = b.rows();
  const double eps = cfg.entropic_reg;
  const double log_a = -std::log(static_cast<double>(n1));
  const double log_b = -std::log(static_cast<double>(n0));
  const Matrix cost = cost_matrix(a, b, cfg.cost);
  const Matrix scaled = cost / eps;

  SinkhornResult result;
  Vector f = Vector::Zero(n1);
  Vector g = Vector::Zero(n0);
  Matrix plan(n1, n0);
  const double c_min = cost.minCoeff();
  if ((cost.maxCoeff() - c_min) / eps <= kKernelRange) {
    // Scaling form: the kernel exp(-(C - c_min) / eps) stays far from
    // underflow, so iterate u = a / (K v), v = b / (K' u) without logs.
    const Matrix kernel = (-(cost.array() - c_min) / eps).exp().matrix();
    const double a_w = std::exp(log_a), b_w = std::exp(log_b);
    Vector u = Vector::Constant(n1, a_w);
    Vector v = (b_w / (kernel.transpose() * u).array()).matrix();
    for (int it = 1; it <= cfg.max_iters; ++it) {
      result.iterations = it;
      const Vector kv = kernel * v;
      result.marginal_violation = ((u.array() * kv.array()) - a_w).abs().sum();
      if (result.marginal_violation <= cfg.tol) {
        result.converged = true;
        break;
      }
      u = (a_w / kv.array()).matrix();
      v = (b_w / (kernel.transpose() * u).array()).matrix();
    }
    plan = u.asDiagonal() * kernel * v.asDiagonal();
    f = eps * (u.array() / a_w).log();
    g = (eps * (v.array() / b_w).log() + c_min).matrix();
  } else {
    Vector f_new(n1);
    Vector work(std::max(n1, n0));

    // Column update: makes column marginals exact for the current f.
    auto update_g = [&] {
      for (Eigen::Index j = 0; j < n0; ++j) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < n1; ++i) {
          work[i] = f[i] / eps - scaled(i, j);
          mx = std::max(mx, work[i]);
        }
        double s = 0.0;
        for (Eigen::Index i = 0; i < n1; ++i) s += std::exp(work[i] - mx);
        g[j] = -eps * (mx + std::log(s) + log_a);
      }
    };

    update_g();
    for (int it = 1; it <= cfg.max_iters; ++it) {
      result.iterations = it;
      // Row update. The row sums of the current plan are a_i exp((f_i - f_new_i) / eps),
      // which gives the marginal violation for free.
      double violation = 0.0;
      for (Eigen::Index i = 0; i < n1; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < n0; ++j) {
          work[j] = g[j] / eps - scaled(i, j);
          mx = std::max(mx, work[j]);
        }
        double s = 0.0;
        for (Eigen::Index j = 0; j < n0; ++j) s += std::exp(work[j] - mx);
        f_new[i] = -eps * (mx + std::log(s) + log_b);
        violation += std::abs(std::exp(log_a + (f[i] - f_new[i]) / eps) - std::exp(log_a));
      }
      result.marginal_violation = violation;
      if (violation <= cfg.tol) {
        result.converged = true;
        break;
      }
      f = f_new;
      update_g();
    }

    for (Eigen::Index i = 0; i < n1; ++i)
      for (Eigen::Index j = 0; j < n0; ++j)
        plan(i, j) = std::exp((f[i] + g[j]) / eps - scaled(i, j) + log_a + log_b);
  }

  result.distance = (plan.array() * cost.array()).sum();
  result.objective = f.mean() + g.mean() - eps * (plan.sum() - 1.0);
  // grad_a_i = sum_j w_ij (a_i - b_j), grad_b_j = -sum_i w_ij (a_i - b_j).
  Matrix w(n1, n0);
  if (cfg.cost == Cost::kEuclidean) {
    for (Eigen::Index i = 0; i < n1; ++i)
      for (Eigen::Index j = 0; j < n0; ++j)
        w(i, j) = cost(i, j) > 0.0 ? plan(i, j) / cost(i, j) : 0.0;  // subgradient 0 at coincident points
  } else {
    w = 2.0 * plan;
  }
  result.grad_a = w.rowwise().sum().asDiagonal() * a - w * b;
  result.grad_b = w.colwise().sum().transpose().asDiagonal() * b - w.transpose() * a;
  return result;
}

double exact_ot_small(const Matrix& a, const Matrix& b, Cost cost) {
  check_inputs(a, b);
  const Eigen::Index n1 = a.rows();
  const Eigen::Index n0 = b.rows();
  if (n1 * n0 > 64) throw ValidationError("instance too large");
  const int n = static_cast<int>(n1 * n0);

  // Row k is copy of a[k / n0]; column l is copy of b[l / n1].
  std::vector<std::vector<double>> c(n + 1, std::vector<double>(n + 1, 0.0));
  for (int k = 0; k < n; ++k)
    for (int l = 0; l < n; ++l)
      c[k + 1][l + 1] = pair_cost(a.row(k / n0), b.row(l / n1), cost);

  // Hungarian algorithm with potentials, 1-based.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c[i0][j] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0.0;
  for (int j = 1; j <= n; ++j) total += c[p[j]][j];
  return total / static_cast<double>(n);
}

}  // namespace mbrl::ipm
