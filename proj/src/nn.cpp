#include "mbrl/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace mbrl::nn {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kIdentity: return "identity";
    case Activation::kElu: return "elu";
    case Activation::kSigmoid: return "sigmoid";
  }
  return "identity";
}

Activation activation_from_string(const std::string& name) {
  if (name == "identity") return Activation::kIdentity;
  if (name == "elu") return Activation::kElu;
  if (name == "sigmoid") return Activation::kSigmoid;
  throw ValidationError("unknown activation '" + name + "'");
}

void NetSpec::validate() const {
  if (layer_widths.size() < 2) throw ValidationError("NetSpec needs at least 2 widths");
  for (int w : layer_widths)
    if (w < 1) throw ValidationError("NetSpec widths must be >= 1");
  if (hidden_activation != Activation::kElu)
    throw ValidationError("hidden activation must be elu");
  if (output_activation == Activation::kElu)
    throw ValidationError("output activation must be identity or sigmoid");
}

// ---------------------------------------------------------------------------
// ParamSet

std::size_t ParamSet::size() const {
  std::size_t n = scalars.size();
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

namespace {

// Locates a flat coordinate; returns a pointer to the stored double.
template <typename P>
auto* locate(P& p, std::size_t index) {
  for (auto& l : p.layers) {
    const auto nw = static_cast<std::size_t>(l.weight.size());
    if (index < nw) {
      const auto cols = static_cast<std::size_t>(l.weight.cols());
      return &l.weight(static_cast<Eigen::Index>(index / cols),
                       static_cast<Eigen::Index>(index % cols));
    }
    index -= nw;
    const auto nb = static_cast<std::size_t>(l.bias.size());
    if (index < nb) return &l.bias[static_cast<Eigen::Index>(index)];
    index -= nb;
  }
  for (auto& [name, value] : p.scalars) {
    if (index == 0) return &value;
    --index;
  }
  throw ValidationError("ParamSet coordinate out of range");
}

}  // namespace

double ParamSet::get(std::size_t index) const { return *locate(*this, index); }
void ParamSet::set(std::size_t index, double value) { *locate(*this, index) = value; }

ParamSet ParamSet::zeros_like() const {
  ParamSet z;
  z.layers.reserve(layers.size());
  for (const auto& l : layers)
    z.layers.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()),
                        Vector::Zero(l.bias.size())});
  for (const auto& [name, value] : scalars) z.scalars[name] = 0.0;
  return z;
}

bool ParamSet::all_finite() const {
  for (const auto& l : layers)
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  for (const auto& [name, value] : scalars)
    if (!std::isfinite(value)) return false;
  return true;
}

bool ParamSet::same_shape(const ParamSet& other) const {
  if (layers.size() != other.layers.size() || scalars.size() != other.scalars.size())
    return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].weight.rows() != other.layers[i].weight.rows() ||
        layers[i].weight.cols() != other.layers[i].weight.cols() ||
        layers[i].bias.size() != other.layers[i].bias.size())
      return false;
  }
  auto it = other.scalars.begin();
  for (const auto& [name, value] : scalars) {
    if (it->first != name) return false;
    ++it;
  }
  return true;
}

bool ParamSet::operator==(const ParamSet& other) const {
  if (!same_shape(other)) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].weight != other.layers[i].weight) return false;
    if (layers[i].bias != other.layers[i].bias) return false;
  }
  return scalars == other.scalars;
}

ParamSet init_params(const NetSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  ParamSet p;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const int fan_in = spec.layer_widths[l];
    const int fan_out = spec.layer_widths[l + 1];
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> unif(-a, a);
    DenseLayer layer{Matrix(fan_out, fan_in), Vector::Zero(fan_out)};
    for (int r = 0; r < fan_out; ++r)
      for (int c = 0; c < fan_in; ++c) layer.weight(r, c) = unif(rng);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
double elu_derivative(double x) { return x >= 0.0 ? 1.0 : std::exp(x); }

namespace {

void check_shapes(const ParamSet& params, const NetSpec& spec) {
  if (params.layers.size() != spec.num_layers())
    throw ValidationError("parameter layer count does not match NetSpec");
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const auto& layer = params.layers[l];
    if (layer.weight.rows() != spec.layer_widths[l + 1] ||
        layer.weight.cols() != spec.layer_widths[l] ||
        layer.bias.size() != spec.layer_widths[l + 1])
      throw ValidationError("parameter shapes do not match NetSpec at layer " +
                            std::to_string(l));
  }
}

void apply_activation(Activation act, Matrix& m) {
  switch (act) {
    case Activation::kIdentity: break;
    case Activation::kElu: m = m.unaryExpr([](double x) { return elu(x); }); break;
    case Activation::kSigmoid:
      m = m.unaryExpr([](double x) {
        return std::clamp(sigmoid(x), kProbClamp, 1.0 - kProbClamp);
      });
      break;
  }
}

}  // namespace

Matrix forward(const ParamSet& params, const NetSpec& spec, const Matrix& x,
               ForwardCache* cache) {
  check_shapes(params, spec);
  if (x.cols() != spec.input_width())
    throw ValidationError("input width " + std::to_string(x.cols()) + " != network input " +
                          std::to_string(spec.input_width()));
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
    cache->widths = spec.layer_widths;
  }
  Matrix h = x;
  const std::size_t last = spec.num_layers() - 1;
  for (std::size_t l = 0; l <= last; ++l) {
    const auto& layer = params.layers[l];
    Matrix z = h * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    if (cache) {
      cache->inputs.push_back(std::move(h));
      cache->pre.push_back(z);
    }
    apply_activation(l == last ? spec.output_activation : spec.hidden_activation, z);
    h = std::move(z);
  }
  if (cache) cache->output = h;
  return h;
}

Gradients backward(const ParamSet& params, const NetSpec& spec, const ForwardCache& cache,
                   const Matrix& output_grad) {
  check_shapes(params, spec);
  if (cache.widths != spec.layer_widths || cache.pre.size() != spec.num_layers())
    throw ValidationError("stale forward cache: network shape changed");
  if (output_grad.rows() != cache.output.rows() || output_grad.cols() != cache.output.cols())
    throw ValidationError("output gradient shape does not match forward cache");

  Gradients grads;
  grads.params = params.zeros_like();
  Matrix g = output_grad;
  const std::size_t last = spec.num_layers() - 1;
  for (std::size_t li = spec.num_layers(); li-- > 0;) {
    const Matrix& pre = cache.pre[li];
    const Activation act = li == last ? spec.output_activation : spec.hidden_activation;
    switch (act) {
      case Activation::kIdentity: break;
      case Activation::kElu:
        g.array() *= pre.unaryExpr([](double x) { return elu_derivative(x); }).array();
        break;
      case Activation::kSigmoid:
        g.array() *= pre.unaryExpr([](double x) {
                         const double s = sigmoid(x);
                         if (s < kProbClamp || s > 1.0 - kProbClamp) return 0.0;
                         return s * (1.0 - s);
                       }).array();
        break;
    }
    auto& out = grads.params.layers[li];
    out.weight.noalias() = g.transpose() * cache.inputs[li];
    out.bias = g.colwise().sum().transpose();
    g = g * params.layers[li].weight;
  }
  grads.input = std::move(g);
  return grads;
}

// ---------------------------------------------------------------------------
// Adam

AdamState AdamState::for_params(const ParamSet& params, double learning_rate) {
  AdamState st;
  st.m = params.zeros_like();
  st.v = params.zeros_like();
  st.learning_rate = learning_rate;
  return st;
}

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, bool maximize) {
  if (!params.same_shape(grads) || !params.same_shape(state.m) || !params.same_shape(state.v))
    throw ValidationError("adam_step: parameter, gradient and state shapes differ");
  if (!grads.all_finite()) throw RuntimeFailure("adam_step: non-finite gradient entries");
  ++state.step;
  const double sign = maximize ? -1.0 : 1.0;
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double lr = state.learning_rate;
  const double eps = state.eps_hat;

  auto update = [&](auto p, auto g, auto m, auto v) {
    m = b1 * m + (1.0 - b1) * (sign * g);
    v = b2 * v + (1.0 - b2) * g.square();
    p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
  };
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    update(params.layers[l].weight.array(), grads.layers[l].weight.array(),
           state.m.layers[l].weight.array(), state.v.layers[l].weight.array());
    update(params.layers[l].bias.array(), grads.layers[l].bias.array(),
           state.m.layers[l].bias.array(), state.v.layers[l].bias.array());
  }
  for (auto& [name, p] : params.scalars) {
    const double g = sign * grads.scalars.at(name);
    double& m = state.m.scalars.at(name);
    double& v = state.v.scalars.at(name);
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    p -= lr * (m / c1) / (std::sqrt(v / c2) + eps);
  }
}

// ---------------------------------------------------------------------------
// Gradient check

double grad_check(const ParamSet& params, const std::function<double(const ParamSet&)>& loss,
                  const ParamSet& analytic, double h, std::uint64_t seed) {
  if (!(h > 1e-7 && h < 1e-3)) throw ValidationError("invalid step");
  if (!params.same_shape(analytic))
    throw ValidationError("grad_check: analytic gradient shape differs from parameters");
  const std::size_t n = params.size();
  std::vector<std::size_t> coords(n);
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  constexpr std::size_t kMaxCoords = 10000;
  if (n > kMaxCoords) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(kMaxCoords);
  }
  ParamSet probe = params;
  double worst = 0.0;
  for (std::size_t idx : coords) {
    const double x = params.get(idx);
    probe.set(idx, x + h);
    const double up = loss(probe);
    probe.set(idx, x - h);
    const double down = loss(probe);
    probe.set(idx, x);
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic.get(idx);
    const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a) + std::abs(numeric));
    worst = std::max(worst, rel);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

nlohmann::json matrix_json(const Matrix& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  return {{"shape", {m.rows(), m.cols()}}, {"data", data}};
}

nlohmann::json vector_json(const Vector& v) {
  return {{"shape", {v.size()}}, {"data", std::vector<double>(v.data(), v.data() + v.size())}};
}

Matrix matrix_from(const nlohmann::json& j) {
  const auto shape = j.at("shape").get<std::vector<Eigen::Index>>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (shape.size() != 2 || static_cast<std::size_t>(shape[0] * shape[1]) != data.size())
    throw ValidationError("checkpoint: malformed matrix entry");
  Matrix m(shape[0], shape[1]);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < shape[0]; ++r)
    for (Eigen::Index c = 0; c < shape[1]; ++c) m(r, c) = data[k++];
  return m;
}

Vector vector_from(const nlohmann::json& j) {
  const auto shape = j.at("shape").get<std::vector<Eigen::Index>>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (shape.size() != 1 || static_cast<std::size_t>(shape[0]) != data.size())
    throw ValidationError("checkpoint: malformed vector entry");
  return Eigen::Map<const Vector>(data.data(), shape[0]);
}

}  // namespace

nlohmann::json params_to_json(const ParamSet& params) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l);
    j[prefix + ".weight"] = matrix_json(params.layers[l].weight);
    j[prefix + ".bias"] = vector_json(params.layers[l].bias);
  }
  j["scalars"] = nlohmann::json::object();
  for (const auto& [name, value] : params.scalars) j["scalars"][name] = value;
  return j;
}

ParamSet params_from_json(const nlohmann::json& j) {
  ParamSet p;
  for (std::size_t l = 0;; ++l) {
    const std::string prefix = "layer" + std::to_string(l);
    if (!j.contains(prefix + ".weight")) break;
    p.layers.push_back({matrix_from(j.at(prefix + ".weight")), vector_from(j.at(prefix + ".bias"))});
  }
  if (j.contains("scalars"))
    for (const auto& [name, value] : j.at("scalars").items()) p.scalars[name] = value.get<double>();
  return p;
}

nlohmann::json net_to_json(const NetSpec& spec, const ParamSet& params) {
  return {{"format", "mbrl-net"},
          {"version", kCheckpointVersion},
          {"spec",
           {{"layer_widths", spec.layer_widths},
            {"hidden_activation", to_string(spec.hidden_activation)},
            {"output_activation", to_string(spec.output_activation)}}},
          {"params", params_to_json(params)}};
}

void net_from_json(const nlohmann::json& j, NetSpec& spec, ParamSet& params) {
  try {
    if (j.at("format").get<std::string>() != "mbrl-net")
      throw ValidationError("checkpoint: unexpected format tag");
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw ValidationError("checkpoint: unsupported version");
    const auto& s = j.at("spec");
    spec.layer_widths = s.at("layer_widths").get<std::vector<int>>();
    spec.hidden_activation = activation_from_string(s.at("hidden_activation").get<std::string>());
    spec.output_activation = activation_from_string(s.at("output_activation").get<std::string>());
    spec.validate();
    params = params_from_json(j.at("params"));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: ") + e.what());
  }
  check_shapes(params, spec);
}

}  // namespace mbrl::nn
