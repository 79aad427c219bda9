#pragma once

// Small dense-network engine: forward pass with cached intermediates,
// reverse-mode gradients, Adam, and a finite-difference gradient checker.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbrl/common.hpp"

namespace mbrl::nn {

enum class Activation { kIdentity, kElu, kSigmoid };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

/// Probability clamp applied to sigmoid outputs so logs stay finite.
inline constexpr double kProbClamp = 1e-7;

struct NetSpec {
  std::vector<int> layer_widths;  // input, hidden..., output
  Activation hidden_activation = Activation::kElu;
  Activation output_activation = Activation::kIdentity;

  void validate() const;
  int input_width() const { return layer_widths.front(); }
  int output_width() const { return layer_widths.back(); }
  std::size_t num_layers() const { return layer_widths.size() - 1; }
  bool operator==(const NetSpec&) const = default;
};

/// Dense layer y = act(W x + b); W is (out x in).
struct DenseLayer {
  Matrix weight;
  Vector bias;
};

/// Layer parameters plus named free scalars. Also used for gradients and Adam
/// moments, which mirror the parameter shapes.
struct ParamSet {
  std::vector<DenseLayer> layers;
  std::map<std::string, double> scalars;

  std::size_t size() const;
  /// Flat coordinate access: layer weights (row-major), then biases, layer by
  /// layer, then scalars in name order.
  double get(std::size_t index) const;
  void set(std::size_t index, double value);

  ParamSet zeros_like() const;
  bool all_finite() const;
  bool same_shape(const ParamSet& other) const;
  bool operator==(const ParamSet& other) const;
};

ParamSet init_params(const NetSpec& spec, std::uint64_t seed);

struct ForwardCache {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // pre-activation of each layer
  Matrix output;
  std::vector<int> widths;  // shape signature of the producing network
};

Matrix forward(const ParamSet& params, const NetSpec& spec, const Matrix& x,
               ForwardCache* cache = nullptr);

double elu(double x);
double elu_derivative(double x);

struct Gradients {
  ParamSet params;
  Matrix input;  // d(loss)/d(x), B x in
};

/// Reverse pass for a scalar loss whose gradient w.r.t. the network output is
/// `output_grad`. The clamped sigmoid has zero derivative where the clamp is
/// active.
Gradients backward(const ParamSet& params, const NetSpec& spec, const ForwardCache& cache,
                   const Matrix& output_grad);

struct AdamState {
  ParamSet m, v;
  long step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_hat = 1e-8;

  static AdamState for_params(const ParamSet& params, double learning_rate = 1e-3);
};

/// One bias-corrected Adam update in place. `maximize` ascends instead.
void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, bool maximize = false);

/// Max over checked coordinates of |analytic - numeric| / max(1, |analytic| +
/// |numeric|), numeric from central differences with step h. Above 10^4
/// coordinates a seeded random subsample of 10^4 is checked.
double grad_check(const ParamSet& params, const std::function<double(const ParamSet&)>& loss,
                  const ParamSet& analytic, double h, std::uint64_t seed = 0);

// Checkpoint format "mbrl-net" version 1:
//   {"format": "mbrl-net", "version": 1,
//    "spec": {"layer_widths": [...], "hidden_activation": "elu",
//             "output_activation": "identity" | "sigmoid"},
//    "params": {"layer0.weight": {"shape": [out, in], "data": [row-major]},
//               "layer0.bias": {"shape": [out], "data": [...]}, ...,
//               "scalars": {"name": value, ...}}}
// Doubles are written in shortest round-trip form, so reload is exact.
inline constexpr int kCheckpointVersion = 1;

nlohmann::json net_to_json(const NetSpec& spec, const ParamSet& params);
void net_from_json(const nlohmann::json& j, NetSpec& spec, ParamSet& params);
nlohmann::json params_to_json(const ParamSet& params);
ParamSet params_from_json(const nlohmann::json& j);

}  // namespace mbrl::nn
