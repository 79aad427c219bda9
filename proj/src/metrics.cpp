#include "mbrl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace mbrl {

double ate_error(double tau_true, double tau_hat) {
  if (!std::isfinite(tau_true) || !std::isfinite(tau_hat))
    throw ValidationError("ate_error: non-finite input");
  return std::abs(tau_true - tau_hat);
}

double pehe_root(const Vector& y1, const Vector& y0, const Vector& yhat1, const Vector& yhat0) {
  const auto n = y1.size();
  if (y0.size() != n || yhat1.size() != n || yhat0.size() != n)
    throw ValidationError("pehe_root: length mismatch");
  if (n == 0) throw ValidationError("pehe_root: missing ground truth");
  return std::sqrt(((y1 - y0) - (yhat1 - yhat0)).squaredNorm() / static_cast<double>(n));
}

double auc(const Vector& labels, const Vector& scores) {
  if (labels.size() != scores.size()) throw ValidationError("auc: length mismatch");
  const auto n = static_cast<std::size_t>(labels.size());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mid-ranks over tie groups; AUC = (R+ - n+(n+ + 1)/2) / (n+ n-).
  double rank_sum = 0.0;
  double n_pos = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      const double l = labels[order[k]];
      if (l != 0.0 && l != 1.0) throw ValidationError("auc: labels must be 0/1");
      if (l == 1.0) {
        rank_sum += mid;
        n_pos += 1.0;
      }
    }
    i = j;
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw ValidationError("auc: single-class input");
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

double rmse(const Vector& y, const Vector& yhat) {
  if (y.size() != yhat.size()) throw ValidationError("rmse: length mismatch");
  if (y.size() == 0) throw ValidationError("rmse: empty input");
  return std::sqrt((y - yhat).squaredNorm() / static_cast<double>(y.size()));
}

}  // namespace mbrl
