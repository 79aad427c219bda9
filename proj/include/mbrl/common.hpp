#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace mbrl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Raised when inputs violate a documented precondition (bad schema, bad
/// configuration, out-of-range arguments). The CLI maps it to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation fails at run time (non-finite training signal,
/// IO failure). The CLI maps it to exit code 2.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mixes a base seed with stream identifiers (splitmix64 finalizer) so that
// replications, folds and subnetworks draw from independent RNG streams.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

double sigmoid(double x);
double logit(double p);

double mean(const Vector& v);
// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
double sample_sd(const Vector& v);

}  // namespace mbrl
