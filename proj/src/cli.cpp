#include "mbrl/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "mbrl/checks.hpp"
#include "mbrl/estimators.hpp"
#include "mbrl/harness.hpp"
#include "mbrl/metrics.hpp"

namespace mbrl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_globals(CLI::App* cmd, GlobalFlags& g) {
  cmd->add_option("--config", g.config, "JSON configuration file");
  cmd->add_option("--seed", g.seed, "Base seed");
  cmd->add_option("--out", g.out, "Output path");
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw ValidationError("'" + path + "': " + e.what());
  }
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw RuntimeFailure("cannot write '" + path.string() + "'");
}

// generate: simulator draw -> CSV with ground-truth columns.
int cmd_generate(const GlobalFlags& g, std::optional<double> kl, std::ostream& out) {
  if (g.out.empty()) throw ValidationError("generate needs --out <file.csv>");
  json j = g.config.empty() ? json::object() : read_json(g.config);
  if (j.contains("source")) j = j.at("source");
  if (!j.contains("type")) j["type"] = "simulator";
  if (!j.contains("kl") && kl) j["kl"] = *kl;
  std::optional<double> target;
  if (j.contains("kl")) {
    target = j.at("kl").get<double>();
    j.erase("kl");
  }
  std::uint64_t seed = 0;
  if (j.contains("seed")) {
    seed = j.at("seed").get<std::uint64_t>();
    j.erase("seed");
  }
  if (g.seed) seed = *g.seed;
  ExperimentConfig cfg = experiment_config_from_json({{"source", j}});
  if (cfg.source.kind != SourceKind::kSimulator) throw ValidationError("generate needs a simulator source");
  SimConfig sc = cfg.source.sim;
  const SimStructure st = draw_sim_structure(sc, derive_seed(seed, 1));
  if (target) {
    const Vector mu0 = sc.mu0_or_zero();
    Vector dir = sc.mu1_or_zero() - mu0;
    if (dir.isZero(0.0)) dir = Vector::Unit(sc.dim, 0);
    sc.mu1 = mu1_for_kl(mu0, dir, st.covariance, *target);
    sc.mu0 = mu0;
  }
  const Simulation sim = generate_simulation(sc, st, derive_seed(seed, 2));
  write_csv(sim.data, g.out);
  out << "wrote " << sim.data.size() << " rows to " << g.out << " (KL "
      << format_double(kl_selection_bias(sc.mu1_or_zero(), sc.mu0_or_zero(), st.covariance))
      << ", true ATE " << format_double(true_ate(sim.data)) << ")\n";
  return 0;
}

struct TrainJob {
  OutcomeKind kind = OutcomeKind::kContinuous;
  SplitSpec split;
  TrainConfig train;
};

TrainJob train_job(const GlobalFlags& g, const std::string& kind_flag) {
  TrainJob job;
  json j = g.config.empty() ? json::object() : read_json(g.config);
  if (!kind_flag.empty()) job.kind = outcome_kind_from_string(kind_flag);
  else if (j.contains("outcome_kind")) job.kind = outcome_kind_from_string(j.at("outcome_kind").get<std::string>());
  json t = j.contains("train") ? j.at("train") : j;
  for (const char* k : {"outcome_kind", "split", "train"}) t.erase(k);
  job.train = train_config_from_json(t, TrainConfig::defaults_for(job.kind));
  if (j.contains("split")) {
    const auto& s = j.at("split");
    job.split.train_frac = s.value("train", job.split.train_frac);
    job.split.val_frac = s.value("val", job.split.val_frac);
    job.split.test_frac = s.value("test", job.split.test_frac);
  }
  if (g.seed) {
    job.train.seed = *g.seed;
    job.split.seed = derive_seed(*g.seed, 3);
  }
  job.split.validate();
  return job;
}

int cmd_train(const GlobalFlags& g, const std::string& data_path, const std::string& kind_flag,
              std::ostream& out) {
  if (data_path.empty()) throw ValidationError("train needs --data <file.csv>");
  const TrainJob job = train_job(g, kind_flag);
  const Dataset data = load_csv(data_path, job.kind);
  const DataSplit sp = split(data, job.split);
  const Checkpoint ck = fit(sp.train, sp.val, job.train);
  const fs::path dir = g.out.empty() ? fs::path("train_out") : fs::path(g.out);
  write_file(dir / "checkpoint.json", checkpoint_to_json(ck).dump() + "\n");
  write_file(dir / "training_log.csv", format_training_log(ck.history));
  out << "best epoch " << ck.best.epoch << " of " << job.train.epochs << ", validation "
      << (job.train.selects_on_eps_p() ? "eps_p " : "RMSE ") << format_double(ck.best.score)
      << "; wrote " << (dir / "checkpoint.json").string() << '\n';
  return 0;
}

int cmd_evaluate(const GlobalFlags& g, const std::string& ckpt_path, const std::string& data_path,
                 std::ostream& out) {
  if (ckpt_path.empty() || data_path.empty())
    throw ValidationError("evaluate needs --checkpoint <file> and --data <file.csv>");
  const Checkpoint ck = checkpoint_from_json(read_json(ckpt_path));
  const MBRLNet& net = ck.best.net;
  const Dataset data = load_csv(data_path, net.outcome_kind);
  if (data.dim() != net.input_dim()) throw ValidationError("data dimension does not match the model");
  Prediction p = predict(net, data.covariates);
  const EpochScore s = validation_score(net, data, ck.config.beta);
  const NuisanceEstimates nuis = NuisanceEstimates::make(p.yhat0, p.yhat1, p.propensity);
  const ThetaPair plug = plug_in_ate(nuis);
  const ThetaPair psi1 = ate_orthogonal(Score::kPsi1, data, nuis);
  const ThetaPair psi2 = ate_orthogonal(Score::kPsi2, data, nuis);
  json r{{"n", data.size()},
         {"rmse", s.rmse},
         {"eps_p", s.eps_p},
         {"ate", {{"plugin", plug.ate}, {"psi1", psi1.ate}, {"psi2", psi2.ate}}},
         {"propensity_clamps", nuis.clamp_events}};
  if (data.has_noiseless_means() || data.has_potential_outcomes()) {
    const double tau = true_ate(data);
    r["true_ate"] = tau;
    r["ate_error"] = {{"plugin", ate_error(tau, plug.ate)},
                      {"psi1", ate_error(tau, psi1.ate)},
                      {"psi2", ate_error(tau, psi2.ate)}};
    if (data.outcome_kind == OutcomeKind::kContinuous) {
      r["pehe_root"] = data.has_noiseless_means()
                           ? pehe_root(*data.mu1, *data.mu0, p.yhat1, p.yhat0)
                           : pehe_root(*data.y1, *data.y0, p.yhat1, p.yhat0);
    } else if (data.has_potential_outcomes()) {
      Vector labels(2 * data.size()), scores(2 * data.size());
      labels << *data.y0, *data.y1;
      scores << p.yhat0, p.yhat1;
      r["auc"] = auc(labels, scores);
    }
  }
  const std::string text = r.dump(2) + "\n";
  if (!g.out.empty()) write_file(g.out, text);
  out << text;
  return 0;
}

int cmd_bench(const GlobalFlags& g, std::optional<int> threads, std::ostream& out,
              std::ostream& err) {
  if (g.config.empty()) throw ValidationError("bench needs --config <file.json>");
  ExperimentConfig cfg = load_experiment_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (threads) cfg.threads = *threads;
  cfg.validate();
  const fs::path dir = g.out.empty() ? resolve_output_dir(cfg) : fs::path(g.out);
  const Report report = run_experiment(cfg, &err);
  emit_report(report, dir);
  int failed = 0;
  for (int f : report.failures) failed += f;
  out << summary_csv(report);
  out << "wrote " << (dir / "report.json").string() << " (" << failed << " failed replications)\n";
  return 0;
}

int cmd_check(const GlobalFlags& g, std::ostream& out) {
  const auto results = run_checks(g.seed.value_or(0));
  out << format_check_table(results);
  const bool ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
  out << (ok ? "all checks passed\n" : "some checks FAILED\n");
  return ok ? 0 : 2;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Treatment-effect estimation with moderately balanced representations"};
  app.name("mbrl");
  app.require_subcommand(1);

  GlobalFlags g;
  std::string data_path, kind_flag, ckpt_path;
  std::optional<double> kl;
  std::optional<int> threads;

  auto* generate = app.add_subcommand("generate", "Draw a simulator dataset and write it as CSV");
  add_globals(generate, g);
  generate->add_option("--kl", kl, "Target KL selection bias (mu1 placed along mu1 - mu0)");
  auto* train = app.add_subcommand("train", "Fit MBRL on a CSV dataset and write a checkpoint");
  add_globals(train, g);
  train->add_option("--data", data_path, "Dataset CSV");
  train->add_option("--outcome-kind", kind_flag, "continuous | binary");
  auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on a CSV dataset");
  add_globals(evaluate, g);
  evaluate->add_option("--checkpoint", ckpt_path, "checkpoint.json written by train");
  evaluate->add_option("--data", data_path, "Dataset CSV");
  auto* bench = app.add_subcommand("bench", "Run an experiment and write report files");
  add_globals(bench, g);
  bench->add_option("--threads", threads, "Worker threads for replications");
  auto* check = app.add_subcommand("check", "Run gradient, transport and orthogonality self-checks");
  add_globals(check, g);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*generate) return cmd_generate(g, kl, out);
    if (*train) return cmd_train(g, data_path, kind_flag, out);
    if (*evaluate) return cmd_evaluate(g, ckpt_path, data_path, out);
    if (*bench) return cmd_bench(g, threads, out, err);
    if (*check) return cmd_check(g, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const RuntimeFailure& e) {
    err << "runtime failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "runtime failure: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace mbrl
