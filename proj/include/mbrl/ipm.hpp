#pragma once

// Wasserstein imbalance between treated and control representation clouds.

#include "mbrl/common.hpp"

namespace mbrl::ipm {

enum class Cost { kEuclidean, kSquaredEuclidean };

struct SinkhornConfig {
  double entropic_reg = 0.1;
  int max_iters = 200;
  double tol = 1e-6;  // L1 marginal violation
  Cost cost = Cost::kEuclidean;

  void validate() const;
  static SinkhornConfig training() { return {}; }
  static SinkhornConfig evaluation() { return {0.01, 200, 1e-6, Cost::kEuclidean}; }
};

struct SinkhornResult {
  double distance = 0.0;   // transport cost of the entropic plan (no entropy term)
  double objective = 0.0;  // entropic OT value (dual form); grad_a/grad_b are its gradients
  Matrix grad_a;          // n1 x r
  Matrix grad_b;          // n0 x r
  int iterations = 0;
  bool converged = false;
  double marginal_violation = 0.0;
};

/// Log-domain Sinkhorn with uniform marginals. Gradients hold the plan fixed
/// (envelope approximation): exact for `objective` at convergence, first-order
/// for `distance`.
SinkhornResult wasserstein_sinkhorn(const Matrix& a, const Matrix& b, const SinkhornConfig& cfg);

/// Exact optimal transport cost with uniform marginals for n1 * n0 <= 64,
/// by min-cost perfect matching between n0 copies of each row of `a` and n1
/// copies of each row of `b` (Hungarian algorithm).
double exact_ot_small(const Matrix& a, const Matrix& b, Cost cost);

double pair_cost(const Eigen::Ref<const Eigen::RowVectorXd>& x,
                 const Eigen::Ref<const Eigen::RowVectorXd>& y, Cost cost);

}  // namespace mbrl::ipm
