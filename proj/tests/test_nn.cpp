#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mbrl/nn.hpp"

using namespace mbrl;
using namespace mbrl::nn;

namespace {

NetSpec spec_of(std::vector<int> widths, Activation out = Activation::kIdentity) {
  NetSpec s;
  s.layer_widths = std::move(widths);
  s.output_activation = out;
  return s;
}

// Half sum of squared outputs against a fixed target.
double mse(const ParamSet& p, const NetSpec& s, const Matrix& x, const Matrix& target) {
  return 0.5 * (forward(p, s, x) - target).squaredNorm() / static_cast<double>(x.rows());
}

}  // namespace

TEST(Init, ShapesZeroBiasesAndBounds) {
  const NetSpec s = spec_of({2, 3, 1});
  const ParamSet p = init_params(s, 4);
  ASSERT_EQ(p.layers.size(), 2u);
  EXPECT_EQ(p.layers[0].weight.rows(), 3);
  EXPECT_EQ(p.layers[0].weight.cols(), 2);
  EXPECT_EQ(p.layers[1].weight.rows(), 1);
  EXPECT_EQ(p.layers[1].weight.cols(), 3);
  EXPECT_TRUE(p.layers[0].bias.isZero(0.0));
  EXPECT_TRUE(p.layers[1].bias.isZero(0.0));
  EXPECT_LT(p.layers[0].weight.cwiseAbs().maxCoeff(), std::sqrt(6.0 / 5.0));
  EXPECT_LT(p.layers[1].weight.cwiseAbs().maxCoeff(), std::sqrt(6.0 / 4.0));
  EXPECT_EQ(p.size(), 6u + 3u + 3u + 1u);
}

TEST(Init, Deterministic) {
  const NetSpec s = spec_of({5, 8, 8, 2});
  EXPECT_TRUE(init_params(s, 17) == init_params(s, 17));
  EXPECT_FALSE(init_params(s, 17) == init_params(s, 18));
}

TEST(Spec, Validation) {
  EXPECT_THROW(spec_of({3}).validate(), ValidationError);
  EXPECT_THROW(spec_of({3, 0, 1}).validate(), ValidationError);
  EXPECT_NO_THROW(spec_of({3, 1}, Activation::kSigmoid).validate());
}

TEST(Forward, ZeroParamsGiveZero) {
  const NetSpec s = spec_of({3, 4, 2});
  ParamSet p = init_params(s, 1);
  for (auto& l : p.layers) l.weight.setZero();
  EXPECT_TRUE(forward(p, s, Matrix::Random(5, 3)).isZero(0.0));
}

TEST(Forward, EluDefinition) {
  EXPECT_DOUBLE_EQ(elu(2.0), 2.0);
  EXPECT_NEAR(elu(-50.0), -1.0, 1e-15);
  EXPECT_DOUBLE_EQ(elu(-1.0), std::exp(-1.0) - 1.0);
  EXPECT_DOUBLE_EQ(elu_derivative(1.0), 1.0);
  EXPECT_DOUBLE_EQ(elu_derivative(-1.0), std::exp(-1.0));
  EXPECT_DOUBLE_EQ(elu_derivative(0.0), 1.0);
}

TEST(Forward, SigmoidAtZeroAndClamp) {
  const NetSpec s = spec_of({1, 1}, Activation::kSigmoid);
  ParamSet p = init_params(s, 0);
  p.layers[0].weight(0, 0) = 1.0;
  Matrix x(3, 1);
  x << 0.0, 100.0, -100.0;
  const Matrix y = forward(p, s, x);
  EXPECT_DOUBLE_EQ(y(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(y(1, 0), 1.0 - kProbClamp);
  EXPECT_DOUBLE_EQ(y(2, 0), kProbClamp);
}

TEST(Forward, ShapeMismatchThrows) {
  const NetSpec s = spec_of({3, 2});
  EXPECT_THROW(forward(init_params(s, 0), s, Matrix::Zero(2, 4)), ValidationError);
}

TEST(Forward, RowPermutationEquivariant) {
  const NetSpec s = spec_of({4, 6, 3});
  const ParamSet p = init_params(s, 9);
  const Matrix x = Matrix::Random(7, 4);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(7);
  perm.setIdentity();
  std::mt19937_64 rng(3);
  std::shuffle(perm.indices().data(), perm.indices().data() + 7, rng);
  EXPECT_TRUE((forward(p, s, perm * x) - perm * forward(p, s, x)).isZero(0.0));
}

TEST(Backward, LinearNetSumLoss) {
  // y = W x + b, L = sum(y): dL/dW = sum_b x_b', dL/db = B, dL/dx = W' per row.
  const NetSpec s = spec_of({3, 2});
  const ParamSet p = init_params(s, 5);
  const Matrix x = Matrix::Random(4, 3);
  ForwardCache cache;
  forward(p, s, x, &cache);
  const Gradients g = backward(p, s, cache, Matrix::Ones(4, 2));
  for (int r = 0; r < 2; ++r) {
    EXPECT_TRUE(g.params.layers[0].weight.row(r).isApprox(x.colwise().sum(), 1e-14));
    EXPECT_DOUBLE_EQ(g.params.layers[0].bias(r), 4.0);
  }
  const Eigen::RowVectorXd dx = p.layers[0].weight.colwise().sum();
  for (int b = 0; b < 4; ++b) EXPECT_TRUE(g.input.row(b).isApprox(dx, 1e-14));
}

TEST(Backward, StaleCacheRejected) {
  const NetSpec s = spec_of({3, 4, 1});
  ParamSet p = init_params(s, 5);
  ForwardCache cache;
  forward(p, s, Matrix::Random(2, 3), &cache);
  const NetSpec other = spec_of({3, 5, 1});
  EXPECT_THROW(backward(init_params(other, 1), other, cache, Matrix::Ones(2, 1)), ValidationError);
}

TEST(GradCheck, QuadraticIsExact) {
  const NetSpec s = spec_of({3, 2});
  ParamSet p = init_params(s, 2);
  p.layers[0].bias << 0.3, -0.7;
  ParamSet grad = p;
  for (auto& l : grad.layers) {
    l.weight *= 2.0;
    l.bias *= 2.0;
  }
  auto loss = [](const ParamSet& q) {
    double v = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) v += q.get(i) * q.get(i);
    return v;
  };
  EXPECT_LE(grad_check(p, loss, grad, 1e-5), 1e-8);
}

TEST(GradCheck, RandomEluNetsMse) {
  std::mt19937_64 rng(123);
  std::uniform_int_distribution<int> width(1, 16), batch(1, 8);
  for (int trial = 0; trial < 10; ++trial) {
    const int in = width(rng), out = width(rng), b = batch(rng);
    const NetSpec s = spec_of({in, width(rng), width(rng), out});
    const ParamSet p = init_params(s, rng());
    const Matrix x = Matrix::Random(b, in);
    const Matrix target = Matrix::Random(b, out);
    ForwardCache cache;
    const Matrix y = forward(p, s, x, &cache);
    const Gradients g = backward(p, s, cache, (y - target) / static_cast<double>(b));
    const double err = grad_check(p, [&](const ParamSet& q) { return mse(q, s, x, target); }, g.params, 1e-5);
    EXPECT_LE(err, 1e-4) << "trial " << trial;
  }
}

TEST(GradCheck, SigmoidOutputCrossEntropy) {
  const NetSpec s = spec_of({4, 8, 1}, Activation::kSigmoid);
  const ParamSet p = init_params(s, 77);
  const Matrix x = Matrix::Random(6, 4);
  const Vector t = (Vector(6) << 1, 0, 1, 1, 0, 0).finished();
  auto loss = [&](const ParamSet& q) {
    const Vector pr = forward(q, s, x).col(0);
    double v = 0.0;
    for (int i = 0; i < 6; ++i) v -= t(i) * std::log(pr(i)) + (1 - t(i)) * std::log(1 - pr(i));
    return v;
  };
  ForwardCache cache;
  const Vector pr = forward(p, s, x, &cache).col(0);
  Matrix dy(6, 1);
  for (int i = 0; i < 6; ++i) dy(i, 0) = -t(i) / pr(i) + (1 - t(i)) / (1 - pr(i));
  const Gradients g = backward(p, s, cache, dy);
  EXPECT_LE(grad_check(p, loss, g.params, 1e-5), 1e-4);
}

TEST(GradCheck, InvalidStep) {
  const NetSpec s = spec_of({1, 1});
  const ParamSet p = init_params(s, 0);
  auto loss = [](const ParamSet&) { return 0.0; };
  EXPECT_THROW(grad_check(p, loss, p.zeros_like(), 1e-2), ValidationError);
  EXPECT_THROW(grad_check(p, loss, p.zeros_like(), 1e-8), ValidationError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamSet p;
  p.scalars["x"] = 0.0;
  ParamSet g;
  g.scalars["x"] = 1.0;
  AdamState st = AdamState::for_params(p, 1e-3);
  adam_step(p, g, st);
  EXPECT_NEAR(p.scalars["x"], -1e-3, 1e-10);
  EXPECT_EQ(st.step, 1);

  ParamSet q;
  q.scalars["x"] = 0.0;
  AdamState sq = AdamState::for_params(q, 1e-3);
  adam_step(q, g, sq, /*maximize=*/true);
  EXPECT_NEAR(q.scalars["x"], 1e-3, 1e-10);
}

TEST(Adam, ZeroGradientIsIdentity) {
  const NetSpec s = spec_of({3, 4, 2});
  ParamSet p = init_params(s, 8);
  p.scalars["e"] = 0.25;
  const ParamSet before = p;
  AdamState st = AdamState::for_params(p);
  for (int i = 0; i < 3; ++i) adam_step(p, p.zeros_like(), st);
  EXPECT_TRUE(p == before);
  EXPECT_EQ(st.step, 3);
}

TEST(Adam, NonFiniteGradientRejected) {
  ParamSet p;
  p.scalars["x"] = 0.0;
  ParamSet g = p;
  g.scalars["x"] = std::nan("");
  AdamState st = AdamState::for_params(p);
  EXPECT_THROW(adam_step(p, g, st), RuntimeFailure);
}

TEST(Checkpoint, RoundTripIsExact) {
  const NetSpec s = spec_of({3, 5, 1}, Activation::kSigmoid);
  ParamSet p = init_params(s, 31);
  p.scalars["eps_y"] = 0.1 + 1e-17;
  p.layers[1].bias(0) = 1.0 / 3.0;
  NetSpec s2;
  ParamSet p2;
  net_from_json(nlohmann::json::parse(net_to_json(s, p).dump()), s2, p2);
  EXPECT_EQ(s, s2);
  EXPECT_TRUE(p == p2);
}

TEST(Checkpoint, RejectsWrongFormat) {
  const NetSpec s = spec_of({2, 1});
  auto j = net_to_json(s, init_params(s, 0));
  j["version"] = 99;
  NetSpec s2;
  ParamSet p2;
  EXPECT_THROW(net_from_json(j, s2, p2), ValidationError);
}
