#include "mbrl/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "mbrl/estimators.hpp"
#include "mbrl/metrics.hpp"

namespace mbrl {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& known_estimators() {
  static const std::vector<std::string> names{"plugin",  "psi1",    "psi2", "plugin_rmse_selected",
                                              "ols_lr1", "ols_lr2", "knn"};
  return names;
}

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"ate_in",  "ate_out", "pehe_in", "pehe_out",
                                              "auc_in",  "auc_out", "rmse",    "eps_p"};
  return names;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw RuntimeFailure("number formatting failed");
  return {buf, ptr};
}

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::validate() const {
  if (replications < 1) throw ValidationError("replications must be >= 1");
  if (estimators.empty() && ablations.empty()) throw ValidationError("estimator list is empty");
  const auto& known = known_estimators();
  std::set<std::string> seen;
  for (const auto& e : estimators) {
    if (std::find(known.begin(), known.end(), e) == known.end())
      throw ValidationError("unknown estimator '" + e + "'");
    if (!seen.insert(e).second) throw ValidationError("duplicate estimator '" + e + "'");
  }
  if (knn_k < 1) throw ValidationError("knn_k must be >= 1");
  if (threads < 1) throw ValidationError("threads must be >= 1");
  if (cross_fit_folds != 0 && cross_fit_folds < 2)
    throw ValidationError("cross_fit_folds must be 0 (off) or >= 2");
  for (double kl : kl_levels)
    if (!(kl >= 0.0) || !std::isfinite(kl)) throw ValidationError("kl_levels must be finite and >= 0");
  if (!kl_levels.empty() && source.kind != SourceKind::kSimulator)
    throw ValidationError("kl_levels require the simulator source");
  switch (source.kind) {
    case SourceKind::kSimulator: source.sim.validate(); break;
    case SourceKind::kCsv:
      if (source.paths.empty()) throw ValidationError("csv source needs at least one path");
      if (static_cast<std::size_t>(replications) > source.paths.size())
        throw ValidationError("csv source has fewer files than replications");
      break;
    case SourceKind::kTwins:
      if (source.twins_path.empty()) throw ValidationError("twins source needs a path");
      break;
  }
  split.validate();
  train.validate();
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const char* where) {
  for (const auto& [k, v] : j.items())
    if (std::none_of(keys.begin(), keys.end(), [&](const char* x) { return k == x; }))
      throw ValidationError(std::string(where) + ": unknown key '" + k + "'");
}

Vector vector_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

std::string resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return (path.is_relative() && !base.empty() ? base / path : path).string();
}

DataSource source_from_json(const json& j, const fs::path& base) {
  DataSource s;
  const std::string type = j.at("type").get<std::string>();
  if (type == "simulator") {
    reject_unknown(j, {"type", "n_treated", "n_control", "dim", "mu1", "mu0", "sigma_scale"},
                   "source");
    s.kind = SourceKind::kSimulator;
    s.sim.n_treated = j.value("n_treated", s.sim.n_treated);
    s.sim.n_control = j.value("n_control", s.sim.n_control);
    s.sim.dim = j.value("dim", s.sim.dim);
    s.sim.sigma_scale = j.value("sigma_scale", s.sim.sigma_scale);
    if (j.contains("mu1")) s.sim.mu1 = vector_from_json(j.at("mu1"));
    if (j.contains("mu0")) s.sim.mu0 = vector_from_json(j.at("mu0"));
  } else if (type == "csv") {
    reject_unknown(j, {"type", "paths", "dir", "outcome_kind"}, "source");
    s.kind = SourceKind::kCsv;
    if (j.contains("paths"))
      for (const auto& p : j.at("paths")) s.paths.push_back(resolve(base, p.get<std::string>()));
    if (j.contains("dir")) {
      const fs::path dir = resolve(base, j.at("dir").get<std::string>());
      if (!fs::is_directory(dir)) throw ValidationError("csv dir not found: " + dir.string());
      std::vector<std::string> found;
      for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".csv") found.push_back(e.path().string());
      std::sort(found.begin(), found.end());
      s.paths.insert(s.paths.end(), found.begin(), found.end());
    }
    if (j.contains("outcome_kind"))
      s.outcome_kind = outcome_kind_from_string(j.at("outcome_kind").get<std::string>());
  } else if (type == "twins") {
    reject_unknown(j, {"type", "path"}, "source");
    s.kind = SourceKind::kTwins;
    s.twins_path = resolve(base, j.at("path").get<std::string>());
    s.outcome_kind = OutcomeKind::kBinary;
  } else {
    throw ValidationError("unknown source type '" + type + "'");
  }
  return s;
}

json source_to_json(const DataSource& s) {
  switch (s.kind) {
    case SourceKind::kSimulator: {
      json j{{"type", "simulator"},
             {"n_treated", s.sim.n_treated},
             {"n_control", s.sim.n_control},
             {"dim", s.sim.dim},
             {"sigma_scale", s.sim.sigma_scale}};
      if (s.sim.mu1.size()) j["mu1"] = vector_to_json(s.sim.mu1);
      if (s.sim.mu0.size()) j["mu0"] = vector_to_json(s.sim.mu0);
      return j;
    }
    case SourceKind::kCsv:
      return {{"type", "csv"}, {"paths", s.paths}, {"outcome_kind", to_string(s.outcome_kind)}};
    case SourceKind::kTwins:
      return {{"type", "twins"}, {"path", s.twins_path}};
  }
  return {};
}

}  // namespace

ExperimentConfig experiment_config_from_json(const json& j, const fs::path& base_dir) {
  ExperimentConfig c;
  try {
    if (!j.is_object()) throw ValidationError("experiment config must be a JSON object");
    reject_unknown(j,
                   {"source", "split", "train", "estimators", "ablations", "knn_k", "replications",
                    "kl_levels", "seed", "out", "threads", "cross_fit_folds"},
                   "experiment config");
    if (j.contains("source")) c.source = source_from_json(j.at("source"), base_dir);
    if (j.contains("split")) {
      const auto& s = j.at("split");
      reject_unknown(s, {"train", "val", "test"}, "split");
      c.split.train_frac = s.value("train", c.split.train_frac);
      c.split.val_frac = s.value("val", c.split.val_frac);
      c.split.test_frac = s.value("test", c.split.test_frac);
    }
    c.train = train_config_from_json(j.value("train", json::object()),
                                     TrainConfig::defaults_for(c.source.outcome_kind));
    if (j.contains("estimators")) c.estimators = j.at("estimators").get<std::vector<std::string>>();
    if (j.contains("ablations"))
      for (const auto& a : j.at("ablations")) c.ablations.push_back(ablation_from_string(a.get<std::string>()));
    c.knn_k = j.value("knn_k", c.knn_k);
    c.replications = j.value("replications", c.replications);
    if (j.contains("kl_levels")) c.kl_levels = j.at("kl_levels").get<std::vector<double>>();
    c.seed = j.value("seed", c.seed);
    c.out = j.value("out", c.out);
    c.threads = j.value("threads", c.threads);
    c.cross_fit_folds = j.value("cross_fit_folds", c.cross_fit_folds);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("config '" + path.string() + "': " + e.what());
  }
  return experiment_config_from_json(j, path.parent_path());
}

json to_json(const ExperimentConfig& c) {
  json ablations = json::array();
  for (Ablation a : c.ablations) ablations.push_back(to_string(a));
  return {{"source", source_to_json(c.source)},
          {"split", {{"train", c.split.train_frac}, {"val", c.split.val_frac}, {"test", c.split.test_frac}}},
          {"train", to_json(c.train)},
          {"estimators", c.estimators},
          {"ablations", ablations},
          {"knn_k", c.knn_k},
          {"replications", c.replications},
          {"kl_levels", c.kl_levels},
          {"seed", c.seed},
          {"cross_fit_folds", c.cross_fit_folds}};
}

// ---------------------------------------------------------------------------
// One replication

namespace {

struct Units {
  Dataset in;   // train + val
  Dataset out;  // test
};

bool wants(const ExperimentConfig& cfg, const char* name) {
  return std::find(cfg.estimators.begin(), cfg.estimators.end(), name) != cfg.estimators.end();
}

std::optional<double> pehe_of(const Dataset& d, const Vector& yhat0, const Vector& yhat1) {
  if (d.outcome_kind != OutcomeKind::kContinuous) return std::nullopt;
  if (d.has_noiseless_means()) return pehe_root(*d.mu1, *d.mu0, yhat1, yhat0);
  if (d.has_potential_outcomes()) return pehe_root(*d.y1, *d.y0, yhat1, yhat0);
  return std::nullopt;
}

std::optional<double> auc_of(const Dataset& d, const Vector& yhat0, const Vector& yhat1) {
  if (d.outcome_kind != OutcomeKind::kBinary || !d.has_potential_outcomes()) return std::nullopt;
  const auto n = d.size();
  Vector labels(2 * n), scores(2 * n);
  labels << *d.y0, *d.y1;
  scores << yhat0, yhat1;
  if ((labels.array() == labels[0]).all()) return std::nullopt;
  return auc(labels, scores);
}

NuisanceEstimates nuisances_of(const MBRLNet& net, const Dataset& d) {
  Prediction p = predict(net, d.covariates);
  return NuisanceEstimates::make(std::move(p.yhat0), std::move(p.yhat1), std::move(p.propensity));
}

// In-sample nuisances from K models, each fitted without one fold of the
// in-sample units; rows come back in in-sample order.
NuisanceEstimates cross_fitted(const ExperimentConfig& cfg, const DataSplit& sp, const Units& u,
                               const TrainConfig& tc) {
  const auto n_train = sp.train.size();
  const auto n = u.in.size();
  const int k = cfg.cross_fit_folds;
  Vector g0(n), g1(n), m(n);
  for (int fold = 0; fold < k; ++fold) {
    std::vector<Eigen::Index> tr, va, held;
    for (Eigen::Index r = 0; r < n; ++r) {
      if (r % k == fold) held.push_back(r);
      else (r < n_train ? tr : va).push_back(r);
    }
    TrainConfig fc = tc;
    fc.seed = derive_seed(tc.seed, 0xF01D, static_cast<std::uint64_t>(fold));
    const Checkpoint ck = fit(subset(u.in, tr), subset(u.in, va), fc);
    const Prediction p = predict(ck.best.net, subset(u.in, held).covariates);
    for (std::size_t j = 0; j < held.size(); ++j) {
      g0[held[j]] = p.yhat0[static_cast<Eigen::Index>(j)];
      g1[held[j]] = p.yhat1[static_cast<Eigen::Index>(j)];
      m[held[j]] = p.propensity[static_cast<Eigen::Index>(j)];
    }
  }
  return NuisanceEstimates::make(g0, g1, m);
}

MethodResult model_row(const std::string& name, const Selection& sel, const Units& u,
                       double tau_in, double tau_out, double beta,
                       const NuisanceEstimates& in, const NuisanceEstimates& out,
                       std::optional<Score> score) {
  MethodResult r;
  r.method = name;
  const ThetaPair t_in = score ? ate_orthogonal(*score, u.in, in) : plug_in_ate(in);
  const ThetaPair t_out = score ? ate_orthogonal(*score, u.out, out) : plug_in_ate(out);
  r.ate_in = ate_error(tau_in, t_in.ate);
  r.ate_out = ate_error(tau_out, t_out.ate);
  r.pehe_in = pehe_of(u.in, in.g0_hat, in.g1_hat);
  r.pehe_out = pehe_of(u.out, out.g0_hat, out.g1_hat);
  r.auc_in = auc_of(u.in, in.g0_hat, in.g1_hat);
  r.auc_out = auc_of(u.out, out.g0_hat, out.g1_hat);
  const EpochScore s = validation_score(sel.net, u.out, beta);
  r.rmse = s.rmse;
  r.eps_p = s.eps_p;
  r.best_epoch = sel.epoch;
  return r;
}

MethodResult baseline_row(const std::string& name, BaselineKind kind, const Units& u,
                          double tau_in, double tau_out, int k) {
  const BaselineResult bin = baseline(kind, u.in, u.in, k);
  const BaselineResult bout = baseline(kind, u.in, u.out, k);
  MethodResult r;
  r.method = name;
  r.ate_in = ate_error(tau_in, bin.theta.ate);
  r.ate_out = ate_error(tau_out, bout.theta.ate);
  r.pehe_in = pehe_of(u.in, bin.yhat0, bin.yhat1);
  r.pehe_out = pehe_of(u.out, bout.yhat0, bout.yhat1);
  r.auc_in = auc_of(u.in, bin.yhat0, bin.yhat1);
  r.auc_out = auc_of(u.out, bout.yhat0, bout.yhat1);
  const Vector factual = (u.out.treatment.array() == 1.0).select(bout.yhat1, bout.yhat0);
  r.rmse = rmse(u.out.outcome, factual);
  return r;
}

}  // namespace

ReplicationResult run_replication(const ExperimentConfig& cfg, int level, int replication) {
  ReplicationResult res;
  res.level = level;
  res.replication = replication;
  // The data stream depends on the replication only, so every KL level of a
  // replication shares covariance, outcome weights and noise draws.
  const std::uint64_t rep_seed = derive_seed(cfg.seed, 0xE7E7, static_cast<std::uint64_t>(replication));
  res.seed = rep_seed;

  Dataset data;
  switch (cfg.source.kind) {
    case SourceKind::kSimulator: {
      SimConfig sc = cfg.source.sim;
      const SimStructure st = draw_sim_structure(sc, derive_seed(rep_seed, 1));
      if (!cfg.kl_levels.empty()) {
        const double target = cfg.kl_levels[static_cast<std::size_t>(level)];
        const Vector mu0 = sc.mu0_or_zero();
        Vector dir = sc.mu1_or_zero() - mu0;
        if (dir.isZero(0.0)) dir = Vector::Unit(sc.dim, 0);
        sc.mu1 = mu1_for_kl(mu0, dir, st.covariance, target);
        sc.mu0 = mu0;
        const double realized = kl_selection_bias(sc.mu1, mu0, st.covariance);
        if (!(std::abs(realized - target) <= 1e-9 * std::max(1.0, target)))
          throw RuntimeFailure("realized KL " + format_double(realized) + " misses target " +
                               format_double(target));
        res.kl_target = target;
        res.kl_realized = realized;
      }
      data = generate_simulation(sc, st, derive_seed(rep_seed, 2)).data;
      break;
    }
    case SourceKind::kCsv:
      data = load_csv(cfg.source.paths[static_cast<std::size_t>(replication)], cfg.source.outcome_kind);
      break;
    case SourceKind::kTwins: {
      const TwinsSource src = load_twins_csv(cfg.source.twins_path);
      const TwinsAssignment a = generate_twins_assignment(src.covariates, derive_seed(rep_seed, 1));
      data = make_twins_dataset(src.covariates, src.y0, src.y1, a);
      break;
    }
  }

  SplitSpec ss = cfg.split;
  ss.seed = derive_seed(rep_seed, 3);
  const DataSplit sp = split(data, ss);
  const Units u{concat(sp.train, sp.val), sp.test};
  res.tau_in = true_ate(u.in);
  res.tau_out = true_ate(u.out);

  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(rep_seed, 4);
  const bool need_main = wants(cfg, "plugin") || wants(cfg, "psi1") || wants(cfg, "psi2") ||
                         wants(cfg, "plugin_rmse_selected");
  if (need_main) {
    const Checkpoint ck = fit(sp.train, sp.val, tc);
    res.eps_clips += ck.clip_events;
    const NuisanceEstimates in = cfg.cross_fit_folds >= 2 ? cross_fitted(cfg, sp, u, tc)
                                                          : nuisances_of(ck.best.net, u.in);
    const NuisanceEstimates out = nuisances_of(ck.best.net, u.out);
    res.propensity_clamps += in.clamp_events + out.clamp_events;
    for (const auto& name : cfg.estimators) {
      if (name == "plugin")
        res.methods.push_back(model_row(name, ck.best, u, res.tau_in, res.tau_out, tc.beta, in, out, std::nullopt));
      else if (name == "psi1")
        res.methods.push_back(model_row(name, ck.best, u, res.tau_in, res.tau_out, tc.beta, in, out, Score::kPsi1));
      else if (name == "psi2")
        res.methods.push_back(model_row(name, ck.best, u, res.tau_in, res.tau_out, tc.beta, in, out, Score::kPsi2));
      else if (name == "plugin_rmse_selected")
        res.methods.push_back(model_row(name, ck.best_rmse, u, res.tau_in, res.tau_out, tc.beta,
                                        nuisances_of(ck.best_rmse.net, u.in),
                                        nuisances_of(ck.best_rmse.net, u.out), std::nullopt));
    }
  }
  for (const auto& name : cfg.estimators) {
    if (name == "ols_lr1") res.methods.push_back(baseline_row(name, BaselineKind::kOlsLr1, u, res.tau_in, res.tau_out, cfg.knn_k));
    if (name == "ols_lr2") res.methods.push_back(baseline_row(name, BaselineKind::kOlsLr2, u, res.tau_in, res.tau_out, cfg.knn_k));
    if (name == "knn") res.methods.push_back(baseline_row(name, BaselineKind::kKnn, u, res.tau_in, res.tau_out, cfg.knn_k));
  }
  for (Ablation a : cfg.ablations) {
    TrainConfig ac = tc;
    ac.ablation = a;
    const Checkpoint ck = fit(sp.train, sp.val, ac);
    res.eps_clips += ck.clip_events;
    res.methods.push_back(model_row(to_string(a), ck.best, u, res.tau_in, res.tau_out, ac.beta,
                                    nuisances_of(ck.best.net, u.in),
                                    nuisances_of(ck.best.net, u.out), std::nullopt));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Aggregation

bool ReplicationResult::operator==(const ReplicationResult& o) const {
  return level == o.level && replication == o.replication && kl_target == o.kl_target &&
         kl_realized == o.kl_realized && seed == o.seed && ok == o.ok && error == o.error &&
         tau_in == o.tau_in && tau_out == o.tau_out && propensity_clamps == o.propensity_clamps &&
         eps_clips == o.eps_clips && methods == o.methods;
}

bool Report::operator==(const Report& o) const {
  return config == o.config && rows == o.rows && failures == o.failures &&
         aggregates == o.aggregates;
}

namespace {

std::optional<double> metric_value(const MethodResult& m, const std::string& name) {
  if (name == "ate_in") return m.ate_in;
  if (name == "ate_out") return m.ate_out;
  if (name == "pehe_in") return m.pehe_in;
  if (name == "pehe_out") return m.pehe_out;
  if (name == "auc_in") return m.auc_in;
  if (name == "auc_out") return m.auc_out;
  if (name == "rmse") return m.rmse;
  if (name == "eps_p") return m.eps_p;
  return std::nullopt;
}

}  // namespace

std::vector<Aggregate> aggregate(const std::vector<ReplicationResult>& rows, int levels) {
  std::vector<Aggregate> out;
  for (int level = 0; level < levels; ++level) {
    std::vector<std::string> methods;  // first-seen order
    std::optional<double> kl;
    for (const auto& r : rows) {
      if (r.level != level || !r.ok) continue;
      if (!kl) kl = r.kl_target;
      for (const auto& m : r.methods)
        if (std::find(methods.begin(), methods.end(), m.method) == methods.end())
          methods.push_back(m.method);
    }
    for (const auto& method : methods) {
      Aggregate a;
      a.level = level;
      a.kl = kl;
      a.method = method;
      std::map<std::string, std::vector<double>> values;
      for (const auto& r : rows) {
        if (r.level != level || !r.ok) continue;
        for (const auto& m : r.methods) {
          if (m.method != method) continue;
          ++a.replications;
          for (const auto& name : metric_names())
            if (auto v = metric_value(m, name)) values[name].push_back(*v);
        }
      }
      for (const auto& [name, vs] : values) {
        const Vector v = Eigen::Map<const Vector>(vs.data(), static_cast<Eigen::Index>(vs.size()));
        MetricSummary s;
        s.count = static_cast<int>(vs.size());
        s.mean = v.mean();
        s.se = sample_sd(v) / std::sqrt(static_cast<double>(vs.size()));
        a.metrics[name] = s;
      }
      out.push_back(std::move(a));
    }
  }
  return out;
}

Report run_experiment(const ExperimentConfig& cfg, std::ostream* log) {
  cfg.validate();
  const int levels = cfg.level_count();
  const int jobs = levels * cfg.replications;
  std::vector<ReplicationResult> rows(static_cast<std::size_t>(jobs));
  std::atomic<int> next{0};
  std::mutex log_mutex;

  auto worker = [&] {
    for (int job = next++; job < jobs; job = next++) {
      const int level = job / cfg.replications;
      const int rep = job % cfg.replications;
      const auto t0 = std::chrono::steady_clock::now();
      ReplicationResult r;
      try {
        r = run_replication(cfg, level, rep);
      } catch (const std::exception& e) {
        r = ReplicationResult{};
        r.level = level;
        r.replication = rep;
        r.seed = derive_seed(cfg.seed, 0xE7E7, static_cast<std::uint64_t>(rep));
        if (!cfg.kl_levels.empty()) r.kl_target = cfg.kl_levels[static_cast<std::size_t>(level)];
        r.ok = false;
        r.error = e.what();
      }
      r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (log) {
        std::lock_guard<std::mutex> lock(log_mutex);
        *log << "level " << level << " replication " << rep << (r.ok ? " ok" : " FAILED: " + r.error)
             << " (" << format_double(std::round(r.wall_seconds * 10) / 10) << " s)\n";
        log->flush();
      }
      rows[static_cast<std::size_t>(job)] = std::move(r);
    }
  };
  const int n_threads = std::min(cfg.threads, jobs);
  std::vector<std::thread> pool;
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  Report report;
  report.config = to_json(cfg);
  report.failures.assign(static_cast<std::size_t>(levels), 0);
  for (const auto& r : rows)
    if (!r.ok) ++report.failures[static_cast<std::size_t>(r.level)];
  report.aggregates = aggregate(rows, levels);
  report.rows = std::move(rows);
  return report;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(); }

std::optional<double> opt_double(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

json report_to_json(const Report& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    json methods = json::array();
    for (const auto& m : r.methods)
      methods.push_back({{"method", m.method},
                         {"ate_error_in", m.ate_in},
                         {"ate_error_out", m.ate_out},
                         {"pehe_in", opt(m.pehe_in)},
                         {"pehe_out", opt(m.pehe_out)},
                         {"auc_in", opt(m.auc_in)},
                         {"auc_out", opt(m.auc_out)},
                         {"rmse", opt(m.rmse)},
                         {"eps_p", opt(m.eps_p)},
                         {"best_epoch", m.best_epoch ? json(*m.best_epoch) : json()}});
    rows.push_back({{"level", r.level},
                    {"replication", r.replication},
                    {"kl_target", opt(r.kl_target)},
                    {"kl_realized", opt(r.kl_realized)},
                    {"seed", r.seed},
                    {"ok", r.ok},
                    {"error", r.error},
                    {"tau_in", r.tau_in},
                    {"tau_out", r.tau_out},
                    {"propensity_clamps", r.propensity_clamps},
                    {"eps_clips", r.eps_clips},
                    {"methods", methods}});
  }
  json aggs = json::array();
  for (const auto& a : report.aggregates) {
    json metrics = json::object();
    for (const auto& [name, s] : a.metrics)
      metrics[name] = {{"mean", s.mean}, {"se", s.se}, {"count", s.count}};
    aggs.push_back({{"level", a.level},
                    {"kl", opt(a.kl)},
                    {"method", a.method},
                    {"replications", a.replications},
                    {"metrics", metrics}});
  }
  return {{"format", "mbrl-report"},
          {"version", 1},
          {"in_sample", "train+val"},
          {"out_of_sample", "test"},
          {"config", report.config},
          {"failures", report.failures},
          {"replications", rows},
          {"aggregates", aggs}};
}

Report report_from_json(const json& j) {
  Report report;
  try {
    if (j.at("format").get<std::string>() != "mbrl-report")
      throw ValidationError("report: unexpected format tag");
    report.config = j.at("config");
    report.failures = j.at("failures").get<std::vector<int>>();
    for (const auto& r : j.at("replications")) {
      ReplicationResult row;
      row.level = r.at("level").get<int>();
      row.replication = r.at("replication").get<int>();
      row.kl_target = opt_double(r, "kl_target");
      row.kl_realized = opt_double(r, "kl_realized");
      row.seed = r.at("seed").get<std::uint64_t>();
      row.ok = r.at("ok").get<bool>();
      row.error = r.at("error").get<std::string>();
      row.tau_in = r.at("tau_in").get<double>();
      row.tau_out = r.at("tau_out").get<double>();
      row.propensity_clamps = r.at("propensity_clamps").get<long>();
      row.eps_clips = r.at("eps_clips").get<long>();
      for (const auto& m : r.at("methods")) {
        MethodResult mr;
        mr.method = m.at("method").get<std::string>();
        mr.ate_in = m.at("ate_error_in").get<double>();
        mr.ate_out = m.at("ate_error_out").get<double>();
        mr.pehe_in = opt_double(m, "pehe_in");
        mr.pehe_out = opt_double(m, "pehe_out");
        mr.auc_in = opt_double(m, "auc_in");
        mr.auc_out = opt_double(m, "auc_out");
        mr.rmse = opt_double(m, "rmse");
        mr.eps_p = opt_double(m, "eps_p");
        if (m.contains("best_epoch") && !m.at("best_epoch").is_null())
          mr.best_epoch = m.at("best_epoch").get<int>();
        row.methods.push_back(std::move(mr));
      }
      report.rows.push_back(std::move(row));
    }
    for (const auto& a : j.at("aggregates")) {
      Aggregate ag;
      ag.level = a.at("level").get<int>();
      ag.kl = opt_double(a, "kl");
      ag.method = a.at("method").get<std::string>();
      ag.replications = a.at("replications").get<int>();
      for (const auto& [name, s] : a.at("metrics").items())
        ag.metrics[name] = {s.at("mean").get<double>(), s.at("se").get<double>(),
                            s.at("count").get<int>()};
      report.aggregates.push_back(std::move(ag));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("report: ") + e.what());
  }
  return report;
}

std::string summary_csv(const Report& report) {
  std::ostringstream out;
  out << "level,kl,method,replications,failures";
  for (const auto& name : metric_names()) out << ',' << name << "_mean," << name << "_se";
  out << '\n';
  for (const auto& a : report.aggregates) {
    out << a.level << ',' << (a.kl ? format_double(*a.kl) : "") << ',' << a.method << ','
        << a.replications << ',' << report.failures.at(static_cast<std::size_t>(a.level));
    for (const auto& name : metric_names()) {
      const auto it = a.metrics.find(name);
      if (it == a.metrics.end()) out << ",,";
      else out << ',' << format_double(it->second.mean) << ',' << format_double(it->second.se);
    }
    out << '\n';
  }
  return out.str();
}

std::string boxplot_csv(const Report& report) {
  std::ostringstream out;
  out << "level,kl,replication,method,ate_error_in,ate_error_out\n";
  for (const auto& r : report.rows) {
    if (!r.ok) continue;
    for (const auto& m : r.methods)
      out << r.level << ',' << (r.kl_target ? format_double(*r.kl_target) : "") << ','
          << r.replication << ',' << m.method << ',' << format_double(m.ate_in) << ','
          << format_double(m.ate_out) << '\n';
  }
  return out.str();
}

std::string timing_csv(const Report& report) {
  std::ostringstream out;
  out << "level,replication,wall_seconds\n";
  for (const auto& r : report.rows)
    out << r.level << ',' << r.replication << ',' << format_double(r.wall_seconds) << '\n';
  return out.str();
}

fs::path resolve_output_dir(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("MBRL_OUT_DIR"); env && *env) return env;
  return cfg.out;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw RuntimeFailure("write failed for '" + path.string() + "'");
}

}  // namespace

void emit_report(const Report& report, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw RuntimeFailure("cannot create '" + dir.string() + "': " + ec.message());
  write_text(dir / "report.json", report_to_json(report).dump(2) + "\n");
  write_text(dir / "summary.csv", summary_csv(report));
  write_text(dir / "boxplot_data.csv", boxplot_csv(report));
  write_text(dir / "timing.csv", timing_csv(report));
}

}  // namespace mbrl
