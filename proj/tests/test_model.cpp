#include <gtest/gtest.h>

#include <cmath>

#include "mbrl/checks.hpp"
#include "mbrl/model.hpp"

using namespace mbrl;

namespace {

Architecture tiny_arch() { return {2, 6, 2, 5, 2, 4}; }

void zero_out(nn::ParamSet& p) {
  for (auto& l : p.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
}

// Net whose heads return fixed constants: yhat0 = c0, yhat1 = c1, pi = sigmoid(cp).
MBRLNet constant_net(int dim, double c0, double c1, double cp,
                     OutcomeKind kind = OutcomeKind::kContinuous) {
  MBRLNet net = MBRLNet::create(dim, tiny_arch(), kind, 3);
  zero_out(net.f0.params);
  zero_out(net.f1.params);
  zero_out(net.pi.params);
  net.f0.params.layers.back().bias(0) = c0;
  net.f1.params.layers.back().bias(0) = c1;
  net.pi.params.layers.back().bias(0) = cp;
  return net;
}

Batch batch_of(const Matrix& z, const Vector& d, const Vector& y,
               OutcomeKind kind = OutcomeKind::kContinuous) {
  Batch b;
  b.z = z;
  b.d = d;
  b.y = y;
  b.outcome_kind = kind;
  return b;
}

Dataset small_sim(int n1, int n0, std::uint64_t seed) {
  SimConfig cfg;
  cfg.n_treated = n1;
  cfg.n_control = n0;
  cfg.dim = 3;
  cfg.mu1 = Vector::Constant(3, 0.4);
  return generate_simulation(cfg, seed).data;
}

TrainConfig quick_config(std::uint64_t seed) {
  TrainConfig c;
  c.arch = tiny_arch();
  c.epochs = 3;
  c.batch_size = 16;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Predict, ZeroHeadsAndHalfPropensity) {
  const MBRLNet net = constant_net(3, 0.0, 0.0, 0.0);
  const Prediction p = predict(net, Matrix::Random(5, 3));
  EXPECT_TRUE(p.yhat0.isZero(0.0));
  EXPECT_TRUE(p.yhat1.isZero(0.0));
  EXPECT_TRUE(p.propensity.isApproxToConstant(0.5, 0.0));
}

TEST(Predict, FactualPicksArm) {
  const MBRLNet net = constant_net(2, -1.0, 4.0, 0.0);
  const Prediction p = predict(net, Matrix::Random(3, 2));
  const Vector d = (Vector(3) << 1, 0, 1).finished();
  const Vector f = p.factual(d);
  EXPECT_DOUBLE_EQ(f(0), 4.0);
  EXPECT_DOUBLE_EQ(f(1), -1.0);
  EXPECT_DOUBLE_EQ(f(2), 4.0);
}

TEST(Predict, RowPermutationEquivariant) {
  const MBRLNet net = MBRLNet::create(3, tiny_arch(), OutcomeKind::kContinuous, 10);
  Matrix z = Matrix::Random(4, 3);
  const Prediction a = predict(net, z);
  z.row(0).swap(z.row(3));
  const Prediction b = predict(net, z);
  EXPECT_EQ(a.yhat1(0), b.yhat1(3));
  EXPECT_EQ(a.propensity(3), b.propensity(0));
  EXPECT_EQ(a.yhat0(1), b.yhat0(1));
}

TEST(Losses, FactualContinuous) {
  const MBRLNet net = constant_net(1, 0.0, 0.0, 0.0);
  const Matrix z = Matrix::Zero(2, 1);
  const Vector d = (Vector(2) << 1, 0).finished();
  EXPECT_DOUBLE_EQ(factual_outcome_loss(net, batch_of(z, d, (Vector(2) << 0, 2).finished())), 2.0);
  EXPECT_DOUBLE_EQ(factual_outcome_loss(net, batch_of(z, d, Vector::Zero(2))), 0.0);
}

TEST(Losses, FactualBinaryIsLog2AtHalf) {
  const MBRLNet net = constant_net(1, 0.0, 0.0, 0.0, OutcomeKind::kBinary);
  const Batch b = batch_of(Matrix::Zero(1, 1), Vector::Ones(1), Vector::Ones(1), OutcomeKind::kBinary);
  EXPECT_NEAR(factual_outcome_loss(net, b), std::log(2.0), 1e-15);
}

TEST(Losses, Distinguishability) {
  MBRLNet net = constant_net(1, 0.0, 0.0, 0.0);
  const Vector d = (Vector(2) << 1, 0).finished();
  EXPECT_NEAR(distinguishability_loss(net, batch_of(Matrix::Zero(2, 1), d, Vector::Zero(2))),
              -std::log(2.0), 1e-15);
  net = constant_net(1, 0.0, 0.0, 60.0);
  EXPECT_NEAR(distinguishability_loss(net, batch_of(Matrix::Zero(1, 1), Vector::Ones(1), Vector::Zero(1))),
              0.0, 1e-6);
}

TEST(Losses, NoiseRegularizers) {
  MBRLNet net = constant_net(1, 0.0, 0.0, 0.0);
  const Matrix z = Matrix::Zero(2, 1);
  const Vector d = (Vector(2) << 1, 0).finished();
  const Batch b = batch_of(z, d, (Vector(2) << 1, -3).finished());
  EXPECT_DOUBLE_EQ(noise_regularizers(net, b).omega_y, 0.0);  // eps_y starts at 0
  net.noise.scalars[kEpsY] = 2.0;
  net.noise.scalars[kEpsD] = 5.0;
  const auto r = noise_regularizers(net, b);
  EXPECT_DOUBLE_EQ(r.omega_y, 2.0);
  EXPECT_DOUBLE_EQ(r.omega_d, 0.0);  // mean(d - 0.5) = 0
  const Batch zero_resid = batch_of(z, d, (Vector(2) << 1, -1).finished());
  EXPECT_DOUBLE_EQ(noise_regularizers(net, zero_resid).omega_y, 0.0);
}

TEST(Losses, ImbalanceZeroWithoutBothGroups) {
  const MBRLNet net = MBRLNet::create(2, tiny_arch(), OutcomeKind::kContinuous, 1);
  const Batch b = batch_of(Matrix::Random(4, 2), Vector::Zero(4), Vector::Zero(4));
  EXPECT_EQ(imbalance_loss(net, b, ipm::SinkhornConfig::training()), 0.0);
}

TEST(TaskGradients, MatchFiniteDifferences) {
  const Dataset data = small_sim(6, 6, 2);
  const Batch b = Batch::from(data);
  MBRLNet net = MBRLNet::create(3, tiny_arch(), OutcomeKind::kContinuous, 5);
  net.noise.scalars[kEpsY] = 0.7;
  net.noise.scalars[kEpsD] = -0.4;
  EXPECT_LE(task_gradient_error(net, b, TaskKind::kDiscrimination, 0.5, {}, 1e-5, 1), 1e-4);
  EXPECT_LE(task_gradient_error(net, b, TaskKind::kOutcome, 0.5, {}, 1e-5, 1), 1e-4);
  ipm::SinkhornConfig sc;
  sc.tol = 1e-12;
  sc.max_iters = 5000;
  EXPECT_LE(task_gradient_error(net, b, TaskKind::kBalance, 0.0, sc, 1e-6, 1), 1e-3);
}

TEST(TaskGradients, UntouchedGroupsAreZero) {
  const Batch b = Batch::from(small_sim(4, 4, 6));
  const MBRLNet net = MBRLNet::create(3, tiny_arch(), OutcomeKind::kContinuous, 5);
  const TaskGradient t3 = outcome_task(net, b, 0.1);
  EXPECT_TRUE(t3.pi == net.pi.params.zeros_like());  // Task 3 never reads pi
  const TaskGradient t1 = discrimination_task(net, b, 0.1);
  EXPECT_TRUE(t1.phi == net.phi.params.zeros_like());
  EXPECT_TRUE(t1.f0 == net.f0.params.zeros_like());
}

TEST(TaskGradients, StationarityLinksToZeroMeanResidual) {
  // d(-lambda1 Omega_d)/d eps_d = -lambda1 |mean(d - pi)|, zero iff the mean vanishes.
  MBRLNet net = constant_net(1, 0.0, 0.0, 0.0);
  const Matrix z = Matrix::Zero(4, 1);
  const Vector d = (Vector(4) << 1, 0, 1, 0).finished();
  TaskGradient t = discrimination_task(net, batch_of(z, d, Vector::Zero(4)), 0.3);
  EXPECT_EQ(t.noise.scalars.at(kEpsD), 0.0);
  const Vector d2 = (Vector(4) << 1, 1, 1, 0).finished();
  t = discrimination_task(net, batch_of(z, d2, Vector::Zero(4)), 0.3);
  EXPECT_NEAR(t.noise.scalars.at(kEpsD), -0.3 * 0.25, 1e-15);
}

TEST(Step, AllControlSkipsBalance) {
  TrainConfig cfg = quick_config(1);
  cfg.lambda1 = cfg.lambda2 = 0.0;
  TrainState st = TrainState::create(MBRLNet::create(3, cfg.arch, OutcomeKind::kContinuous, 1), cfg);
  const MBRLNet before = st.net;
  const Batch b = batch_of(Matrix::Random(5, 3), Vector::Zero(5), Vector::Random(5));
  const StepLosses l = multitask_step(st, b, cfg);
  EXPECT_TRUE(l.balance_skipped);
  EXPECT_EQ(l.l_imb, 0.0);
  EXPECT_EQ(st.phi_balance_opt.step, 0);
  EXPECT_EQ(st.pi_opt.step, 1);
  EXPECT_EQ(st.f0_opt.step, 1);
  EXPECT_FALSE(st.net.pi.params == before.pi.params);
}

TEST(Step, ZeroLearningRateKeepsParameters) {
  TrainConfig cfg = quick_config(1);
  cfg.learning_rate = 0.0;
  TrainState st = TrainState::create(MBRLNet::create(3, cfg.arch, OutcomeKind::kContinuous, 1), cfg);
  const MBRLNet before = st.net;
  const StepLosses l = multitask_step(st, Batch::from(small_sim(5, 5, 3)), cfg);
  EXPECT_TRUE(st.net == before);
  EXPECT_GT(l.l_fo, 0.0);
  EXPECT_LT(l.l_dis, 0.0);
  EXPECT_GT(l.l_imb, 0.0);
}

TEST(Step, TarnetFreezesNoiseAndSkipsBalance) {
  TrainConfig cfg = quick_config(1);
  cfg.ablation = Ablation::kTarnet;
  TrainState st = TrainState::create(MBRLNet::create(3, cfg.arch, OutcomeKind::kContinuous, 1), cfg);
  const StepLosses l = multitask_step(st, Batch::from(small_sim(5, 5, 3)), cfg);
  EXPECT_TRUE(l.balance_skipped);
  EXPECT_EQ(st.net.eps_y(), 0.0);
  EXPECT_EQ(st.net.eps_d(), 0.0);
  EXPECT_EQ(cfg.effective_lambda1(), 0.0);
  cfg.ablation = Ablation::kCfr;
  EXPECT_TRUE(cfg.runs_balance_task());
  EXPECT_FALSE(cfg.trains_noise_scalars());
}

TEST(PerturbationError, Examples) {
  const Vector y = (Vector(2) << 1, -1).finished();
  const Vector half = Vector::Constant(2, 0.5);
  EXPECT_DOUBLE_EQ(perturbation_error(y, Vector::Zero(2), half, Vector::Zero(2), 0.1), 1.0);
  EXPECT_DOUBLE_EQ(perturbation_error(Vector::Ones(2), Vector::Zero(2), half, Vector::Zero(2), 0.1), 1.05);
  EXPECT_DOUBLE_EQ(perturbation_error(Vector::Ones(2), Vector::Zero(2), half, Vector::Zero(2), 0.0), 1.0);
  EXPECT_THROW(perturbation_error(y, Vector::Zero(3), half, half, 0.1), ValidationError);
}

TEST(Selection, ArgminFirst) {
  EXPECT_EQ(argmin_first({1.0, 0.8, 0.9}), 1u);
  EXPECT_EQ(argmin_first({0.5, 0.5}), 0u);
  EXPECT_THROW(argmin_first({}), ValidationError);
}

TEST(Fit, OneEpochSelectsEpochOne) {
  const Dataset train = small_sim(20, 20, 1), val = small_sim(8, 8, 2);
  TrainConfig cfg = quick_config(4);
  cfg.epochs = 1;
  const Checkpoint ck = fit(train, val, cfg);
  EXPECT_EQ(ck.best.epoch, 1);
  EXPECT_EQ(ck.history.size(), 1u);
}

TEST(Fit, SelectionMatchesHistoryAndIsDeterministic) {
  const Dataset train = small_sim(30, 40, 1), val = small_sim(10, 12, 2);
  TrainConfig cfg = quick_config(9);
  cfg.epochs = 5;
  const Checkpoint a = fit(train, val, cfg);
  const Checkpoint b = fit(train, val, cfg);
  EXPECT_TRUE(a.best.net == b.best.net);
  EXPECT_EQ(checkpoint_to_json(a).dump(), checkpoint_to_json(b).dump());

  double min_eps = 1e300, min_rmse = 1e300;
  for (const auto& e : a.history) {
    min_eps = std::min(min_eps, e.val_eps_p);
    min_rmse = std::min(min_rmse, e.val_rmse);
  }
  EXPECT_EQ(a.best.score, min_eps);
  EXPECT_EQ(a.best_rmse.score, min_rmse);
  EXPECT_EQ(validation_score(a.best.net, val, cfg.beta).eps_p, min_eps);

  cfg.ablation = Ablation::kNoEpsP;
  const Checkpoint c = fit(train, val, cfg);
  EXPECT_EQ(c.best.score, min_rmse);
  EXPECT_TRUE(c.best.net == a.best_rmse.net);
}

TEST(Fit, RejectsMismatchedSplits) {
  SimConfig sc;
  sc.n_treated = sc.n_control = 5;
  sc.dim = 2;
  EXPECT_THROW(fit(small_sim(5, 5, 1), generate_simulation(sc, 1).data, quick_config(1)), ValidationError);
}

TEST(Config, DefaultsAndJsonRoundTrip) {
  const TrainConfig cont = TrainConfig::defaults_for(OutcomeKind::kContinuous);
  EXPECT_EQ(cont.batch_size, 100);
  EXPECT_EQ(cont.epochs, 1000);
  EXPECT_DOUBLE_EQ(cont.beta, 0.1);
  const TrainConfig bin = TrainConfig::defaults_for(OutcomeKind::kBinary);
  EXPECT_EQ(bin.batch_size, 1000);
  EXPECT_EQ(bin.epochs, 250);
  EXPECT_DOUBLE_EQ(bin.beta, 100.0);
  EXPECT_NO_THROW(cont.validate());
  EXPECT_NO_THROW(bin.validate());

  TrainConfig c = cont;
  c.ablation = Ablation::kCfr;
  c.balance_learning_rate = 1e-4;
  c.sinkhorn.cost = ipm::Cost::kSquaredEuclidean;
  const TrainConfig r = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(r).dump(), to_json(c).dump());
  EXPECT_THROW(train_config_from_json({{"batch_size", 1}}), ValidationError);
}

TEST(Checkpoint, JsonRoundTrip) {
  const Checkpoint ck = fit(small_sim(10, 10, 1), small_sim(5, 5, 2), quick_config(2));
  const auto j = nlohmann::json::parse(checkpoint_to_json(ck).dump());
  const Checkpoint back = checkpoint_from_json(j);
  EXPECT_TRUE(back.best.net == ck.best.net);
  EXPECT_EQ(back.best.epoch, ck.best.epoch);
  EXPECT_EQ(back.history.size(), ck.history.size());
  EXPECT_EQ(checkpoint_to_json(back).dump(), j.dump());
}

TEST(TrainingLog, HeaderAndRows) {
  std::vector<EpochRecord> h(2);
  h[0].epoch = 1;
  h[1].epoch = 2;
  const std::string log = format_training_log(h);
  EXPECT_EQ(log.substr(0, log.find('\n')), "epoch,L_fo,L_dis,L_imb,Omega_y,Omega_d,val_RMSE,val_eps_p");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 3);
}

TEST(HyperSearch, GridCountsAndTieBreak) {
  EXPECT_EQ(HyperGrid::table4(OutcomeKind::kContinuous).candidate_count(), 2592u);
  EXPECT_EQ(HyperGrid::table4(OutcomeKind::kBinary).candidate_count(), 2592u);

  HyperGrid g;
  g.lambdas = {0.1};
  g.phi_depths = {2};
  g.phi_widths = {6};
  g.pi_depths = {2};
  g.pi_widths = {5};
  g.f_depths = {2};
  g.f_widths = {4};
  g.batch_sizes = {16};
  g.epochs = {2};
  const Dataset train = small_sim(15, 15, 1), val = small_sim(6, 6, 2);
  auto r = hyper_search(train, val, g, quick_config(3));
  EXPECT_EQ(r.best_index, 0u);
  EXPECT_EQ(r.best.epochs, 2);

  g.lambdas = {0.1, 0.1};  // identical candidates tie exactly
  r = hyper_search(train, val, g, quick_config(3));
  ASSERT_EQ(r.scores.size(), 2u);
  EXPECT_EQ(r.scores[0], r.scores[1]);
  EXPECT_EQ(r.best_index, 0u);

  g.lambdas.clear();
  EXPECT_THROW(hyper_search(train, val, g, quick_config(3)), ValidationError);
}
