#include "mbrl/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "mbrl/metrics.hpp"

namespace mbrl {

using nn::Activation;
using nn::ForwardCache;
using nn::NetSpec;
using nn::ParamSet;

void Architecture::validate() const {
  for (int v : {phi_depth, phi_width, pi_depth, pi_width, f_depth, f_width})
    if (v < 1) throw ValidationError("architecture depths and widths must be >= 1");
}

namespace {

NetSpec make_spec(int input, int depth, int width, int output, Activation out_act) {
  NetSpec spec;
  spec.layer_widths.push_back(input);
  for (int i = 0; i < depth; ++i) spec.layer_widths.push_back(width);
  if (output > 0) spec.layer_widths.push_back(output);
  spec.hidden_activation = Activation::kElu;
  spec.output_activation = out_act;
  return spec;
}

double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

MBRLNet MBRLNet::create(int input_dim, const Architecture& arch, OutcomeKind kind,
                        std::uint64_t seed) {
  arch.validate();
  if (input_dim < 1) throw ValidationError("input dimension must be >= 1");
  MBRLNet net;
  net.outcome_kind = kind;
  // Phi has depth ELU layers; the last one is the representation.
  net.phi.spec = make_spec(input_dim, arch.phi_depth - 1, arch.phi_width, arch.phi_width,
                           Activation::kIdentity);
  const int rep = arch.phi_width;
  const Activation head_act =
      kind == OutcomeKind::kBinary ? Activation::kSigmoid : Activation::kIdentity;
  net.pi.spec = make_spec(rep, arch.pi_depth, arch.pi_width, 1, Activation::kSigmoid);
  net.f0.spec = make_spec(rep, arch.f_depth, arch.f_width, 1, head_act);
  net.f1.spec = make_spec(rep, arch.f_depth, arch.f_width, 1, head_act);
  net.phi.params = nn::init_params(net.phi.spec, derive_seed(seed, 11));
  net.pi.params = nn::init_params(net.pi.spec, derive_seed(seed, 12));
  net.f0.params = nn::init_params(net.f0.spec, derive_seed(seed, 13));
  net.f1.params = nn::init_params(net.f1.spec, derive_seed(seed, 14));
  net.noise.scalars = {{kEpsD, 0.0}, {kEpsY, 0.0}};
  return net;
}

void MBRLNet::validate() const {
  for (const Subnet* s : {&phi, &pi, &f0, &f1}) s->spec.validate();
  const int rep = phi.spec.output_width();
  if (pi.spec.input_width() != rep || f0.spec.input_width() != rep ||
      f1.spec.input_width() != rep)
    throw ValidationError("pi/f0/f1 input width must equal the representation width");
  if (pi.spec.output_width() != 1 || f0.spec.output_width() != 1 || f1.spec.output_width() != 1)
    throw ValidationError("pi/f0/f1 must have a single output");
  if (!noise.scalars.contains(kEpsY) || !noise.scalars.contains(kEpsD))
    throw ValidationError("missing noise scalars eps_y/eps_d");
  if (!std::isfinite(eps_y()) || !std::isfinite(eps_d()))
    throw ValidationError("noise scalars must be finite");
}

bool MBRLNet::operator==(const MBRLNet& o) const {
  return outcome_kind == o.outcome_kind && phi.spec == o.phi.spec && pi.spec == o.pi.spec &&
         f0.spec == o.f0.spec && f1.spec == o.f1.spec && phi.params == o.phi.params &&
         pi.params == o.pi.params && f0.params == o.f0.params && f1.params == o.f1.params &&
         noise == o.noise;
}

// The encoder's last layer is ELU like its hidden layers. NetSpec gives the
// output layer its own activation, so Phi is evaluated as a net whose output
// activation is identity followed by an explicit ELU.
namespace {

struct PhiPass {
  Matrix h;  // representation
  ForwardCache cache;
};

PhiPass phi_forward(const MBRLNet& net, const Matrix& z) {
  PhiPass pass;
  pass.h = nn::forward(net.phi.params, net.phi.spec, z, &pass.cache);
  pass.h = pass.h.unaryExpr([](double x) { return nn::elu(x); });
  return pass;
}

ParamSet phi_backward(const MBRLNet& net, const PhiPass& pass, const Matrix& grad_h) {
  Matrix g = grad_h.array() *
             pass.cache.output.unaryExpr([](double x) { return nn::elu_derivative(x); }).array();
  return nn::backward(net.phi.params, net.phi.spec, pass.cache, g).params;
}

Vector column(const Matrix& m) { return m.col(0); }

}  // namespace

Vector Prediction::factual(const Vector& treatment) const {
  return (treatment.array() == 1.0).select(yhat1, yhat0);
}

Prediction predict(const MBRLNet& net, const Matrix& z) {
  const Matrix h = phi_forward(net, z).h;
  Prediction p;
  p.yhat0 = column(nn::forward(net.f0.params, net.f0.spec, h));
  p.yhat1 = column(nn::forward(net.f1.params, net.f1.spec, h));
  p.propensity = column(nn::forward(net.pi.params, net.pi.spec, h));
  return p;
}

Batch Batch::from(const Dataset& data) {
  return Batch{data.covariates, data.treatment, data.outcome, data.outcome_kind};
}

Batch Batch::rows(const Dataset& data, const std::vector<Eigen::Index>& idx) {
  Batch b;
  const auto n = static_cast<Eigen::Index>(idx.size());
  b.outcome_kind = data.outcome_kind;
  b.z.resize(n, data.dim());
  b.d.resize(n);
  b.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    b.z.row(i) = data.covariates.row(idx[static_cast<std::size_t>(i)]);
    b.d[i] = data.treatment[idx[static_cast<std::size_t>(i)]];
    b.y[i] = data.outcome[idx[static_cast<std::size_t>(i)]];
  }
  return b;
}

namespace {

void require_nonempty(const Batch& batch) {
  if (batch.z.rows() == 0) throw ValidationError("empty batch");
}

double factual_loss_value(const Vector& y, const Vector& yhat, OutcomeKind kind) {
  if (kind == OutcomeKind::kContinuous) return (y - yhat).squaredNorm() / static_cast<double>(y.size());
  double s = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double p = std::clamp(yhat[i], nn::kProbClamp, 1.0 - nn::kProbClamp);
    s += y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p);
  }
  return -s / static_cast<double>(y.size());
}

double log_likelihood(const Vector& d, const Vector& p) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    const double q = std::clamp(p[i], nn::kProbClamp, 1.0 - nn::kProbClamp);
    s += d[i] * std::log(q) + (1.0 - d[i]) * std::log(1.0 - q);
  }
  return s / static_cast<double>(d.size());
}

// Task 1 on a precomputed representation.
TaskGradient discrimination_core(const MBRLNet& net, const Matrix& h, const Batch& batch,
                                 double lambda1) {
  ForwardCache cache;
  const Vector p = column(nn::forward(net.pi.params, net.pi.spec, h, &cache));
  const double inv_n = 1.0 / static_cast<double>(p.size());
  const double mean_nu = (batch.d - p).mean();
  const double eps_d = net.eps_d();

  TaskGradient out;
  out.loss = log_likelihood(batch.d, p);
  out.omega = eps_d * std::abs(mean_nu);
  out.value = out.loss - lambda1 * out.omega;
  Matrix gp(p.size(), 1);
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double d = batch.d[i];
    const double dll = (d / p[i] - (1.0 - d) / (1.0 - p[i])) * inv_n;
    const double domega = eps_d * sign_of(mean_nu) * (-inv_n);
    gp(i, 0) = dll - lambda1 * domega;
  }
  out.pi = nn::backward(net.pi.params, net.pi.spec, cache, gp).params;
  out.noise = net.noise.zeros_like();
  out.noise.scalars[kEpsD] = -lambda1 * std::abs(mean_nu);
  return out;
}

TaskGradient balance_core(const MBRLNet& net, const PhiPass& pass, const Batch& batch,
                          const ipm::SinkhornConfig& cfg, bool* skipped) {
  TaskGradient out;
  std::vector<Eigen::Index> treated, control;
  for (Eigen::Index i = 0; i < batch.d.size(); ++i)
    (batch.d[i] == 1.0 ? treated : control).push_back(i);
  if (treated.empty() || control.empty()) {
    if (skipped) *skipped = true;
    out.phi = net.phi.params.zeros_like();
    return out;
  }
  if (skipped) *skipped = false;
  const Matrix& h = pass.h;
  Matrix ht(static_cast<Eigen::Index>(treated.size()), h.cols());
  Matrix hc(static_cast<Eigen::Index>(control.size()), h.cols());
  for (std::size_t k = 0; k < treated.size(); ++k) ht.row(static_cast<Eigen::Index>(k)) = h.row(treated[k]);
  for (std::size_t k = 0; k < control.size(); ++k) hc.row(static_cast<Eigen::Index>(k)) = h.row(control[k]);
  const auto ot = ipm::wasserstein_sinkhorn(ht, hc, cfg);
  // Task 2 descends the entropic OT value, whose gradient the envelope
  // formula gives exactly; the reported imbalance is the transport cost.
  out.value = ot.objective;
  out.loss = ot.distance;
  Matrix grad_h = Matrix::Zero(h.rows(), h.cols());
  for (std::size_t k = 0; k < treated.size(); ++k) grad_h.row(treated[k]) = ot.grad_a.row(static_cast<Eigen::Index>(k));
  for (std::size_t k = 0; k < control.size(); ++k) grad_h.row(control[k]) = ot.grad_b.row(static_cast<Eigen::Index>(k));
  out.phi = phi_backward(net, pass, grad_h);
  return out;
}

TaskGradient outcome_core(const MBRLNet& net, const PhiPass& pass, const Batch& batch,
                          double lambda2) {
  ForwardCache c0, c1;
  const Vector o0 = column(nn::forward(net.f0.params, net.f0.spec, pass.h, &c0));
  const Vector o1 = column(nn::forward(net.f1.params, net.f1.spec, pass.h, &c1));
  const Eigen::Index n = batch.d.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  const Vector yhat = (batch.d.array() == 1.0).select(o1, o0);
  const Vector resid = batch.y - yhat;
  const double mean_r = resid.mean();
  const double eps_y = net.eps_y();

  TaskGradient out;
  out.loss = factual_loss_value(batch.y, yhat, batch.outcome_kind);
  out.omega = eps_y * std::abs(mean_r);
  out.value = out.loss + lambda2 * out.omega;
  Matrix g0 = Matrix::Zero(n, 1);
  Matrix g1 = Matrix::Zero(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    double g;
    if (batch.outcome_kind == OutcomeKind::kContinuous) {
      g = -2.0 * resid[i] * inv_n;
    } else {
      const double p = yhat[i];
      g = -(batch.y[i] / p - (1.0 - batch.y[i]) / (1.0 - p)) * inv_n;
    }
    g += lambda2 * eps_y * sign_of(mean_r) * (-inv_n);
    (batch.d[i] == 1.0 ? g1 : g0)(i, 0) = g;
  }
  const auto b0 = nn::backward(net.f0.params, net.f0.spec, c0, g0);
  const auto b1 = nn::backward(net.f1.params, net.f1.spec, c1, g1);
  out.f0 = b0.params;
  out.f1 = b1.params;
  out.phi = phi_backward(net, pass, b0.input + b1.input);
  out.noise = net.noise.zeros_like();
  out.noise.scalars[kEpsY] = lambda2 * std::abs(mean_r);
  return out;
}

}  // namespace

double factual_outcome_loss(const MBRLNet& net, const Batch& batch) {
  require_nonempty(batch);
  const Prediction p = predict(net, batch.z);
  return factual_loss_value(batch.y, p.factual(batch.d), batch.outcome_kind);
}

double distinguishability_loss(const MBRLNet& net, const Batch& batch) {
  require_nonempty(batch);
  return log_likelihood(batch.d, predict(net, batch.z).propensity);
}

NoiseRegularizers noise_regularizers(const MBRLNet& net, const Batch& batch) {
  require_nonempty(batch);
  const Prediction p = predict(net, batch.z);
  NoiseRegularizers out;
  out.omega_y = net.eps_y() * std::abs((batch.y - p.factual(batch.d)).mean());
  out.omega_d = net.eps_d() * std::abs((batch.d - p.propensity).mean());
  return out;
}

double imbalance_loss(const MBRLNet& net, const Batch& batch, const ipm::SinkhornConfig& cfg) {
  require_nonempty(batch);
  return balance_core(net, phi_forward(net, batch.z), batch, cfg, nullptr).loss;
}

TaskGradient discrimination_task(const MBRLNet& net, const Batch& batch, double lambda1) {
  require_nonempty(batch);
  TaskGradient t = discrimination_core(net, phi_forward(net, batch.z).h, batch, lambda1);
  t.phi = net.phi.params.zeros_like();
  t.f0 = net.f0.params.zeros_like();
  t.f1 = net.f1.params.zeros_like();
  return t;
}

TaskGradient balance_task(const MBRLNet& net, const Batch& batch, const ipm::SinkhornConfig& cfg) {
  require_nonempty(batch);
  TaskGradient t = balance_core(net, phi_forward(net, batch.z), batch, cfg, nullptr);
  t.pi = net.pi.params.zeros_like();
  t.f0 = net.f0.params.zeros_like();
  t.f1 = net.f1.params.zeros_like();
  t.noise = net.noise.zeros_like();
  return t;
}

TaskGradient outcome_task(const MBRLNet& net, const Batch& batch, double lambda2) {
  require_nonempty(batch);
  TaskGradient t = outcome_core(net, phi_forward(net, batch.z), batch, lambda2);
  t.pi = net.pi.params.zeros_like();
  return t;
}

// ---------------------------------------------------------------------------
// Configuration

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kFullMbrl: return "full_mbrl";
    case Ablation::kNoEpsP: return "no_eps_p";
    case Ablation::kNoOrthogonality: return "no_orthogonality";
    case Ablation::kTarnet: return "tarnet_mode";
    case Ablation::kCfr: return "cfr_mode";
  }
  return "full_mbrl";
}

Ablation ablation_from_string(const std::string& name) {
  for (Ablation a : {Ablation::kFullMbrl, Ablation::kNoEpsP, Ablation::kNoOrthogonality,
                     Ablation::kTarnet, Ablation::kCfr})
    if (to_string(a) == name) return a;
  throw ValidationError("unknown ablation '" + name + "'");
}

void TrainConfig::validate() const {
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw ValidationError("lambdas must be >= 0");
  if (!(beta >= 0.0)) throw ValidationError("beta must be >= 0");
  if (batch_size < 2) throw ValidationError("batch_size must be >= 2");
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw ValidationError("learning_rate must be finite and >= 0");
  if (balance_learning_rate &&
      (!(*balance_learning_rate >= 0.0) || !std::isfinite(*balance_learning_rate)))
    throw ValidationError("balance_learning_rate must be finite and >= 0");
  arch.validate();
  sinkhorn.validate();
}

TrainConfig TrainConfig::defaults_for(OutcomeKind kind) {
  TrainConfig cfg;
  if (kind == OutcomeKind::kBinary) {
    cfg.lambda1 = cfg.lambda2 = 0.1;
    cfg.beta = 100.0;
    cfg.batch_size = 1000;
    cfg.epochs = 250;
  }
  return cfg;
}

double TrainConfig::effective_lambda1() const {
  return ablation == Ablation::kFullMbrl || ablation == Ablation::kNoEpsP ? lambda1 : 0.0;
}
double TrainConfig::effective_lambda2() const {
  return ablation == Ablation::kFullMbrl || ablation == Ablation::kNoEpsP ? lambda2 : 0.0;
}
bool TrainConfig::trains_noise_scalars() const {
  return ablation == Ablation::kFullMbrl || ablation == Ablation::kNoEpsP;
}
bool TrainConfig::runs_balance_task() const { return ablation != Ablation::kTarnet; }
bool TrainConfig::selects_on_eps_p() const { return ablation == Ablation::kFullMbrl; }

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lambda1", c.lambda1},
          {"lambda2", c.lambda2},
          {"beta", c.beta},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"balance_learning_rate",
           c.balance_learning_rate ? nlohmann::json(*c.balance_learning_rate) : nlohmann::json()},
          {"ablation", to_string(c.ablation)},
          {"seed", c.seed},
          {"architecture",
           {{"phi_depth", c.arch.phi_depth},
            {"phi_width", c.arch.phi_width},
            {"pi_depth", c.arch.pi_depth},
            {"pi_width", c.arch.pi_width},
            {"f_depth", c.arch.f_depth},
            {"f_width", c.arch.f_width}}},
          {"sinkhorn",
           {{"entropic_reg", c.sinkhorn.entropic_reg},
            {"max_iters", c.sinkhorn.max_iters},
            {"tol", c.sinkhorn.tol},
            {"cost", c.sinkhorn.cost == ipm::Cost::kEuclidean ? "euclidean"
                                                               : "squared_euclidean"}}}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  try {
    c.lambda1 = j.value("lambda1", c.lambda1);
    c.lambda2 = j.value("lambda2", c.lambda2);
    if (j.contains("lambda")) c.lambda1 = c.lambda2 = j.at("lambda").get<double>();
    c.beta = j.value("beta", c.beta);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    if (j.contains("balance_learning_rate")) {
      const auto& v = j.at("balance_learning_rate");
      c.balance_learning_rate =
          v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    }
    if (j.contains("ablation")) c.ablation = ablation_from_string(j.at("ablation").get<std::string>());
    c.seed = j.value("seed", c.seed);
    if (j.contains("architecture")) {
      const auto& a = j.at("architecture");
      c.arch.phi_depth = a.value("phi_depth", c.arch.phi_depth);
      c.arch.phi_width = a.value("phi_width", c.arch.phi_width);
      c.arch.pi_depth = a.value("pi_depth", c.arch.pi_depth);
      c.arch.pi_width = a.value("pi_width", c.arch.pi_width);
      c.arch.f_depth = a.value("f_depth", c.arch.f_depth);
      c.arch.f_width = a.value("f_width", c.arch.f_width);
    }
    if (j.contains("sinkhorn")) {
      const auto& s = j.at("sinkhorn");
      c.sinkhorn.entropic_reg = s.value("entropic_reg", c.sinkhorn.entropic_reg);
      c.sinkhorn.max_iters = s.value("max_iters", c.sinkhorn.max_iters);
      c.sinkhorn.tol = s.value("tol", c.sinkhorn.tol);
      if (s.contains("cost")) {
        const auto name = s.at("cost").get<std::string>();
        if (name == "euclidean") c.sinkhorn.cost = ipm::Cost::kEuclidean;
        else if (name == "squared_euclidean") c.sinkhorn.cost = ipm::Cost::kSquaredEuclidean;
        else throw ValidationError("unknown transport cost '" + name + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Training

TrainState TrainState::create(MBRLNet net, double lr) {
  TrainState st;
  st.pi_opt = nn::AdamState::for_params(net.pi.params, lr);
  st.eps_d_opt = nn::AdamState::for_params(net.noise, lr);
  st.phi_balance_opt = nn::AdamState::for_params(net.phi.params, lr);
  st.phi_outcome_opt = nn::AdamState::for_params(net.phi.params, lr);
  st.f0_opt = nn::AdamState::for_params(net.f0.params, lr);
  st.f1_opt = nn::AdamState::for_params(net.f1.params, lr);
  st.eps_y_opt = nn::AdamState::for_params(net.noise, lr);
  st.net = std::move(net);
  return st;
}

TrainState TrainState::create(MBRLNet net, const TrainConfig& cfg) {
  TrainState st = create(std::move(net), cfg.learning_rate);
  st.phi_balance_opt.learning_rate = cfg.task2_learning_rate();
  return st;
}

namespace {

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw RuntimeFailure(std::string("non-finite ") + what);
}

void clip_noise(TrainState& st) {
  for (auto& [name, v] : st.net.noise.scalars) {
    if (std::abs(v) > kEpsClip) {
      v = std::clamp(v, -kEpsClip, kEpsClip);
      ++st.clip_events;
    }
  }
}

}  // namespace

StepLosses multitask_step(TrainState& st, const Batch& batch, const TrainConfig& cfg) {
  require_nonempty(batch);
  StepLosses losses;
  MBRLNet& net = st.net;
  const bool train_noise = cfg.trains_noise_scalars();

  // Task 1: discriminator ascent.
  PhiPass pass = phi_forward(net, batch.z);
  {
    TaskGradient t1 = discrimination_core(net, pass.h, batch, cfg.effective_lambda1());
    losses.l_dis = t1.loss;
    losses.omega_d = t1.omega;
    require_finite(t1.value, "distinguishability objective");
    nn::adam_step(net.pi.params, t1.pi, st.pi_opt, /*maximize=*/true);
    if (train_noise) nn::adam_step(net.noise, t1.noise, st.eps_d_opt, /*maximize=*/true);
  }

  // Task 2: balance the representation.
  if (cfg.runs_balance_task()) {
    bool skipped = false;
    TaskGradient t2 = balance_core(net, pass, batch, cfg.sinkhorn, &skipped);
    losses.balance_skipped = skipped;
    if (!skipped) {
      require_finite(t2.value, "imbalance loss");
      losses.l_imb = t2.loss;
      nn::adam_step(net.phi.params, t2.phi, st.phi_balance_opt);
    }
  } else {
    losses.balance_skipped = true;
  }

  // Task 3: factual outcome fit.
  pass = phi_forward(net, batch.z);
  {
    TaskGradient t3 = outcome_core(net, pass, batch, cfg.effective_lambda2());
    require_finite(t3.value, "factual outcome objective");
    losses.l_fo = t3.loss;
    losses.omega_y = t3.omega;
    nn::adam_step(net.phi.params, t3.phi, st.phi_outcome_opt);
    nn::adam_step(net.f0.params, t3.f0, st.f0_opt);
    nn::adam_step(net.f1.params, t3.f1, st.f1_opt);
    if (train_noise) nn::adam_step(net.noise, t3.noise, st.eps_y_opt);
  }
  if (train_noise) clip_noise(st);
  return losses;
}

double perturbation_error(const Vector& y, const Vector& yhat, const Vector& d,
                          const Vector& dhat, double beta) {
  if (y.size() != yhat.size() || y.size() != d.size() || y.size() != dhat.size())
    throw ValidationError("perturbation_error: length mismatch");
  if (y.size() == 0) throw ValidationError("perturbation_error: empty input");
  const double cross = ((y - yhat).array() * (d - dhat).array()).mean();
  return rmse(y, yhat) + beta * std::abs(cross);
}

EpochScore validation_score(const MBRLNet& net, const Dataset& val, double beta) {
  const Prediction p = predict(net, val.covariates);
  const Vector yhat = p.factual(val.treatment);
  return {rmse(val.outcome, yhat),
          perturbation_error(val.outcome, yhat, val.treatment, p.propensity, beta)};
}

std::size_t argmin_first(const std::vector<double>& values) {
  if (values.empty()) throw ValidationError("argmin of empty sequence");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] < values[best]) best = i;
  return best;
}

Checkpoint fit(const Dataset& train, const Dataset& val, const TrainConfig& cfg) {
  cfg.validate();
  if (train.size() == 0 || val.size() == 0) throw ValidationError("empty split");
  if (train.dim() != val.dim()) throw ValidationError("train/val covariate dimension differs");
  if (train.outcome_kind != val.outcome_kind) throw ValidationError("train/val outcome kind differs");

  TrainState st = TrainState::create(
      MBRLNet::create(static_cast<int>(train.dim()), cfg.arch, train.outcome_kind,
                      derive_seed(cfg.seed, 1)),
      cfg);
  std::mt19937_64 rng(derive_seed(cfg.seed, 2));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  Checkpoint ckpt;
  ckpt.config = cfg;
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    int steps = 0, balance_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t stop = std::min(order.size(), start + batch);
      const Batch b = Batch::rows(train, {order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(stop)});
      StepLosses l;
      try {
        l = multitask_step(st, b, cfg);
      } catch (const RuntimeFailure& e) {
        std::ostringstream msg;
        msg << e.what() << " (epoch " << epoch << ", batch starting at " << start << ")";
        throw RuntimeFailure(msg.str());
      }
      rec.l_fo += l.l_fo;
      rec.l_dis += l.l_dis;
      rec.omega_y += l.omega_y;
      rec.omega_d += l.omega_d;
      if (!l.balance_skipped) {
        rec.l_imb += l.l_imb;
        ++balance_steps;
      }
      ++steps;
    }
    rec.l_fo /= steps;
    rec.l_dis /= steps;
    rec.omega_y /= steps;
    rec.omega_d /= steps;
    if (balance_steps > 0) rec.l_imb /= balance_steps;

    const EpochScore score = validation_score(st.net, val, cfg.beta);
    if (!std::isfinite(score.rmse) || !std::isfinite(score.eps_p))
      throw RuntimeFailure("non-finite validation score at epoch " + std::to_string(epoch));
    rec.val_rmse = score.rmse;
    rec.val_eps_p = score.eps_p;
    ckpt.history.push_back(rec);

    const double primary = cfg.selects_on_eps_p() ? score.eps_p : score.rmse;
    if (epoch == 1 || primary < ckpt.best.score) ckpt.best = {st.net, primary, epoch};
    if (epoch == 1 || score.rmse < ckpt.best_rmse.score) ckpt.best_rmse = {st.net, score.rmse, epoch};
  }
  ckpt.clip_events = st.clip_events;
  return ckpt;
}

std::string format_training_log(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,L_fo,L_dis,L_imb,Omega_y,Omega_d,val_RMSE,val_eps_p\n";
  for (const auto& r : history)
    out << r.epoch << ',' << r.l_fo << ',' << r.l_dis << ',' << r.l_imb << ',' << r.omega_y << ','
        << r.omega_d << ',' << r.val_rmse << ',' << r.val_eps_p << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json net_to_json(const MBRLNet& net) {
  return {{"outcome_kind", to_string(net.outcome_kind)},
          {"phi", nn::net_to_json(net.phi.spec, net.phi.params)},
          {"pi", nn::net_to_json(net.pi.spec, net.pi.params)},
          {"f0", nn::net_to_json(net.f0.spec, net.f0.params)},
          {"f1", nn::net_to_json(net.f1.spec, net.f1.params)},
          {"noise", nn::params_to_json(net.noise)}};
}

MBRLNet net_from_json(const nlohmann::json& j) {
  MBRLNet net;
  try {
    net.outcome_kind = outcome_kind_from_string(j.at("outcome_kind").get<std::string>());
    nn::net_from_json(j.at("phi"), net.phi.spec, net.phi.params);
    nn::net_from_json(j.at("pi"), net.pi.spec, net.pi.params);
    nn::net_from_json(j.at("f0"), net.f0.spec, net.f0.params);
    nn::net_from_json(j.at("f1"), net.f1.spec, net.f1.params);
    net.noise = nn::params_from_json(j.at("noise"));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model checkpoint: ") + e.what());
  }
  net.validate();
  return net;
}

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& r : ckpt.history)
    history.push_back({{"epoch", r.epoch},
                       {"L_fo", r.l_fo},
                       {"L_dis", r.l_dis},
                       {"L_imb", r.l_imb},
                       {"Omega_y", r.omega_y},
                       {"Omega_d", r.omega_d},
                       {"val_RMSE", r.val_rmse},
                       {"val_eps_p", r.val_eps_p}});
  return {{"format", "mbrl-checkpoint"},
          {"version", nn::kCheckpointVersion},
          {"model", net_to_json(ckpt.best.net)},
          {"best_epoch", ckpt.best.epoch},
          {"best_score", ckpt.best.score},
          {"selection", ckpt.config.selects_on_eps_p() ? "val_eps_p" : "val_RMSE"},
          {"model_best_rmse", net_to_json(ckpt.best_rmse.net)},
          {"best_rmse_epoch", ckpt.best_rmse.epoch},
          {"best_rmse", ckpt.best_rmse.score},
          {"clip_events", ckpt.clip_events},
          {"config", to_json(ckpt.config)},
          {"history", history}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  Checkpoint c;
  try {
    if (j.at("format").get<std::string>() != "mbrl-checkpoint")
      throw ValidationError("checkpoint: unexpected format tag");
    if (j.at("version").get<int>() != nn::kCheckpointVersion)
      throw ValidationError("checkpoint: unsupported version");
    c.config = train_config_from_json(j.at("config"));
    c.best = {net_from_json(j.at("model")), j.at("best_score").get<double>(),
              j.at("best_epoch").get<int>()};
    c.best_rmse = {net_from_json(j.at("model_best_rmse")), j.at("best_rmse").get<double>(),
                   j.at("best_rmse_epoch").get<int>()};
    c.clip_events = j.value("clip_events", 0L);
    for (const auto& r : j.at("history")) {
      EpochRecord e;
      e.epoch = r.at("epoch").get<int>();
      e.l_fo = r.at("L_fo").get<double>();
      e.l_dis = r.at("L_dis").get<double>();
      e.l_imb = r.at("L_imb").get<double>();
      e.omega_y = r.at("Omega_y").get<double>();
      e.omega_d = r.at("Omega_d").get<double>();
      e.val_rmse = r.at("val_RMSE").get<double>();
      e.val_eps_p = r.at("val_eps_p").get<double>();
      c.history.push_back(e);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Hyperparameter search

std::size_t HyperGrid::candidate_count() const {
  return lambdas.size() * phi_depths.size() * phi_widths.size() * pi_depths.size() *
         pi_widths.size() * f_depths.size() * f_widths.size() * batch_sizes.size() *
         epochs.size();
}

std::vector<TrainConfig> HyperGrid::expand(const TrainConfig& base) const {
  std::vector<TrainConfig> out;
  out.reserve(candidate_count());
  for (double lam : lambdas)
    for (int pd : phi_depths)
      for (int pw : phi_widths)
        for (int qd : pi_depths)
          for (int qw : pi_widths)
            for (int fd : f_depths)
              for (int fw : f_widths)
                for (int bs : batch_sizes)
                  for (int ep : epochs) {
                    TrainConfig c = base;
                    c.lambda1 = c.lambda2 = lam;
                    c.arch = {pd, pw, qd, qw, fd, fw};
                    c.batch_size = bs;
                    c.epochs = ep;
                    out.push_back(c);
                  }
  return out;
}

HyperGrid HyperGrid::table4(OutcomeKind kind) {
  HyperGrid g;
  g.lambdas = {0.01, 0.1, 1.0};
  g.phi_depths = g.pi_depths = g.f_depths = {2, 3, 4};
  g.phi_widths = g.pi_widths = g.f_widths = {100, 200};
  if (kind == OutcomeKind::kContinuous) {
    g.batch_sizes = {100, 300};
    g.epochs = {500, 1000};
  } else {
    g.batch_sizes = {500, 1000};
    g.epochs = {250, 500};
  }
  return g;
}

HyperSearchResult hyper_search(const Dataset& train, const Dataset& val, const HyperGrid& grid,
                               const TrainConfig& base) {
  const auto candidates = grid.expand(base);
  if (candidates.empty()) throw ValidationError("empty hyperparameter grid");
  HyperSearchResult r;
  for (const auto& cfg : candidates) r.scores.push_back(fit(train, val, cfg).best.score);
  r.best_index = argmin_first(r.scores);
  r.best = candidates[r.best_index];
  r.best_score = r.scores[r.best_index];
  return r;
}

}  // namespace mbrl
