#include "mbrl/checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "mbrl/estimators.hpp"
#include "mbrl/harness.hpp"

namespace mbrl {

namespace {

TaskGradient evaluate_task(const MBRLNet& net, const Batch& batch, TaskKind task, double lambda,
                           const ipm::SinkhornConfig& sinkhorn) {
  switch (task) {
    case TaskKind::kDiscrimination: return discrimination_task(net, batch, lambda);
    case TaskKind::kBalance: return balance_task(net, batch, sinkhorn);
    case TaskKind::kOutcome: return outcome_task(net, batch, lambda);
  }
  return {};
}

}  // namespace

double task_gradient_error(const MBRLNet& net, const Batch& batch, TaskKind task, double lambda,
                           const ipm::SinkhornConfig& sinkhorn, double h, std::uint64_t seed) {
  const TaskGradient analytic = evaluate_task(net, batch, task, lambda, sinkhorn);
  double worst = 0.0;
  auto check_group = [&](auto getter, const nn::ParamSet& grad,
                         std::uint64_t stream) {
    MBRLNet probe = net;
    nn::ParamSet& target = getter(probe);
    const nn::ParamSet base = target;
    auto loss = [&](const nn::ParamSet& p) {
      target = p;
      const double v = evaluate_task(probe, batch, task, lambda, sinkhorn).value;
      target = base;
      return v;
    };
    worst = std::max(worst, nn::grad_check(base, loss, grad, h, derive_seed(seed, stream)));
  };
  auto phi = [](MBRLNet& n) -> nn::ParamSet& { return n.phi.params; };
  auto pi = [](MBRLNet& n) -> nn::ParamSet& { return n.pi.params; };
  auto f0 = [](MBRLNet& n) -> nn::ParamSet& { return n.f0.params; };
  auto f1 = [](MBRLNet& n) -> nn::ParamSet& { return n.f1.params; };
  auto noise = [](MBRLNet& n) -> nn::ParamSet& { return n.noise; };
  switch (task) {
    case TaskKind::kDiscrimination:
      check_group(pi, analytic.pi, 1);
      check_group(noise, analytic.noise, 2);
      break;
    case TaskKind::kBalance:
      check_group(phi, analytic.phi, 3);
      break;
    case TaskKind::kOutcome:
      check_group(phi, analytic.phi, 4);
      check_group(f0, analytic.f0, 5);
      check_group(f1, analytic.f1, 6);
      check_group(noise, analytic.noise, 7);
      break;
  }
  return worst;
}

namespace {

Batch random_batch(int n, int dim, OutcomeKind kind, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Batch b;
  b.outcome_kind = kind;
  b.z.resize(n, dim);
  b.d.resize(n);
  b.y.resize(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < dim; ++j) b.z(i, j) = normal(rng);
    b.d[i] = i % 3 == 0 ? 1.0 : 0.0;
    b.y[i] = kind == OutcomeKind::kBinary ? static_cast<double>(normal(rng) > 0.0) : normal(rng);
  }
  return b;
}

CheckResult make(std::string name, double value, double threshold, bool passed,
                 std::string detail = {}) {
  return {std::move(name), value, threshold, passed, std::move(detail)};
}

}  // namespace

std::vector<CheckResult> run_checks(std::uint64_t seed) {
  std::vector<CheckResult> out;
  std::mt19937_64 rng(derive_seed(seed, 0xC4EC));

  // Dense-network gradients.
  {
    double worst = 0.0;
    std::uniform_int_distribution<int> width(1, 6);
    for (int k = 0; k < 5; ++k) {
      nn::NetSpec spec;
      spec.layer_widths = {width(rng), width(rng), width(rng), 1};
      spec.output_activation = k % 2 ? nn::Activation::kSigmoid : nn::Activation::kIdentity;
      const nn::ParamSet params = nn::init_params(spec, derive_seed(seed, 10, k));
      Matrix x = Matrix::Random(7, spec.input_width());
      auto loss = [&](const nn::ParamSet& p) { return nn::forward(p, spec, x).sum(); };
      nn::ForwardCache cache;
      nn::forward(params, spec, x, &cache);
      const auto g = nn::backward(params, spec, cache, Matrix::Ones(7, 1));
      worst = std::max(worst, nn::grad_check(params, loss, g.params, 1e-5, derive_seed(seed, 11, k)));
    }
    out.push_back(make("grad_check dense nets", worst, 1e-4, worst <= 1e-4));
  }

  // MBRL task objectives.
  {
    Architecture arch{2, 6, 2, 6, 2, 5};
    MBRLNet net = MBRLNet::create(4, arch, OutcomeKind::kContinuous, derive_seed(seed, 20));
    net.noise.scalars[kEpsY] = 0.7;
    net.noise.scalars[kEpsD] = -0.4;
    const Batch b = random_batch(12, 4, OutcomeKind::kContinuous, rng);
    const double e1 = task_gradient_error(net, b, TaskKind::kDiscrimination, 0.5, {}, 1e-5, seed);
    const double e3 = task_gradient_error(net, b, TaskKind::kOutcome, 0.5, {}, 1e-5, seed);
    ipm::SinkhornConfig sk = ipm::SinkhornConfig::training();
    sk.tol = 1e-12;
    sk.max_iters = 5000;
    const double e2 = task_gradient_error(net, b, TaskKind::kBalance, 0.0, sk, 1e-6, seed);
    out.push_back(make("grad_check task 1 (discrimination)", e1, 1e-4, e1 <= 1e-4));
    out.push_back(make("grad_check task 2 (imbalance, envelope)", e2, 1e-3, e2 <= 1e-3));
    out.push_back(make("grad_check task 3 (outcome)", e3, 1e-4, e3 <= 1e-4));
  }

  // Sinkhorn against the exact transport oracle.
  {
    std::uniform_int_distribution<int> size(1, 8);
    std::normal_distribution<double> normal(0.0, 1.0);
    double worst = 0.0;
    int failures = 0;
    for (int k = 0; k < 20; ++k) {
      const int n1 = size(rng), n0 = size(rng);
      Matrix a(n1, 2), b(n0, 2);
      for (int i = 0; i < a.size(); ++i) a.data()[i] = normal(rng);
      for (int i = 0; i < b.size(); ++i) b.data()[i] = normal(rng);
      const double exact = ipm::exact_ot_small(a, b, ipm::Cost::kEuclidean);
      ipm::SinkhornConfig cfg = ipm::SinkhornConfig::evaluation();
      cfg.max_iters = 10000;
      const double approx = ipm::wasserstein_sinkhorn(a, b, cfg).distance;
      const double err = std::abs(approx - exact);
      const double allowed = std::max(0.05 * exact, 1e-3);
      worst = std::max(worst, err / allowed);
      if (err > allowed) ++failures;
    }
    out.push_back(make("sinkhorn vs exact OT (20 instances)", worst, 1.0, failures == 0,
                       "error / allowance, worst case"));
  }

  // Orthogonality probes and noise orthogonality on a simulator draw.
  {
    SimConfig sc;
    sc.n_treated = 10000;
    sc.n_control = 20000;
    const Simulation sim = generate_simulation(sc, derive_seed(seed, 30));
    for (ProbeScore kind : {ProbeScore::kPsi1, ProbeScore::kPsi2}) {
      for (ProbeDirection dir : {ProbeDirection::kPerturbG, ProbeDirection::kPerturbM}) {
        const ProbeResult r = orthogonality_probe(kind, sim.data, sim.truth, dir, 0.01);
        const double ratio = std::abs(r.derivative) / r.std_error;
        std::string name = std::string("orthogonality ") + (kind == ProbeScore::kPsi1 ? "psi1" : "psi2") +
                           (dir == ProbeDirection::kPerturbG ? " perturb_g" : " perturb_m");
        out.push_back(make(name, ratio, 3.0, ratio <= 3.0, "|derivative| / MC standard error"));
      }
    }
    ProbeOptions unit;
    unit.delta = [](const Eigen::Ref<const Eigen::RowVectorXd>&) { return 1.0; };
    const ProbeResult naive = orthogonality_probe(ProbeScore::kPluginNaive, sim.data, sim.truth,
                                                  ProbeDirection::kPerturbG, 0.01, unit);
    const double gap = std::abs(naive.derivative + 1.0);
    out.push_back(make("naive plug-in derivative = -1", gap, 0.05, gap <= 0.05, "|derivative + 1|"));

    SimConfig small;
    small.n_treated = 3333;
    small.n_control = 6667;
    const Simulation s2 = generate_simulation(small, derive_seed(seed, 31));
    const NoiseOrthogonality stat = noise_orthogonality_stat(s2.data, s2.truth);
    const double z = std::abs(stat.value) / (stat.sd / std::sqrt(static_cast<double>(s2.data.size())));
    out.push_back(make("noise orthogonality (N=1e4)", z, 3.0, z <= 3.0, "|stat| / (sd / sqrt(N))"));
  }
  return out;
}

std::string format_check_table(const std::vector<CheckResult>& results) {
  std::size_t width = 5;
  for (const auto& r : results) width = std::max(width, r.name.size());
  std::ostringstream out;
  out << std::left;
  out.width(static_cast<std::streamsize>(width));
  out << "check" << "  result  value         threshold\n";
  for (const auto& r : results) {
    out.width(static_cast<std::streamsize>(width));
    char value[32];
    std::snprintf(value, sizeof(value), "%-12.4g", r.value);
    out << r.name << "  " << (r.passed ? "PASS" : "FAIL") << "    " << value << "  "
        << format_double(r.threshold);
    if (!r.detail.empty()) out << "  (" << r.detail << ")";
    out << '\n';
  }
  return out.str();
}

}  // namespace mbrl
