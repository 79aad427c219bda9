#pragma once

// Self-checks behind `mbrl check`: gradient checks, the transport oracle,
// orthogonality probes and the noise-orthogonality statistic.

#include <cstdint>
#include <string>
#include <vector>

#include "mbrl/model.hpp"

namespace mbrl {

struct CheckResult {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool passed = false;
  std::string detail;
};

enum class TaskKind { kDiscrimination, kBalance, kOutcome };

/// Max grad_check error of one task objective over every parameter group the
/// task updates (Phi, pi, f0, f1, noise scalars).
double task_gradient_error(const MBRLNet& net, const Batch& batch, TaskKind task, double lambda,
                           const ipm::SinkhornConfig& sinkhorn, double h, std::uint64_t seed);

std::vector<CheckResult> run_checks(std::uint64_t seed);
std::string format_check_table(const std::vector<CheckResult>& results);

}  // namespace mbrl
