#pragma once

// Quality metrics for average and individual treatment-effect estimates.

#include <optional>

#include "mbrl/common.hpp"

namespace mbrl {

struct EvalResult {
  double ate_error = 0.0;
  std::optional<double> pehe_root;
  std::optional<double> auc;
  double rmse_factual = 0.0;
  double eps_p = 0.0;
};

/// |tau - tau_hat|.
double ate_error(double tau_true, double tau_hat);

/// sqrt(mean(((y1 - y0) - (yhat1 - yhat0))^2)).
double pehe_root(const Vector& y1, const Vector& y0, const Vector& yhat1, const Vector& yhat0);

/// Mann-Whitney AUC: P(score of a positive > score of a negative), ties count 1/2.
double auc(const Vector& labels, const Vector& scores);

double rmse(const Vector& y, const Vector& yhat);

}  // namespace mbrl
