#include "ido/problems.hpp"
#include "ido/reference.hpp"
#include "ido/sde.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ido;

namespace {

// dX = b dX + dW with linear drift -a x (a = 0: Brownian motion).
SdeModel linear_model(std::size_t d, double a, double x0 = 0.0) {
  SdeModel m;
  m.dim = d;
  m.horizon = 1.0;
  m.drift = [a](const Var& x, double) { return scale(x, -a); };
  m.diffusion = [](const Var&, double, const Var& w) { return w; };
  m.terminal_cost = [](const Var& x) { return row_sum(x); };
  m.x_init = Vector::Constant(static_cast<Eigen::Index>(d), x0);
  return m;
}

ControlFn constant_control(double c) {
  return [c](const Var& x, double) { return filled(x.rows(), x.cols(), c); };
}

struct Moments {
  double mean, var;
};

Moments moments(const Vector& v) {
  const double m = v.mean();
  return {m, (v.array() - m).square().sum() / static_cast<double>(v.size() - 1)};
}

OuLinearProblem scalar_ou() {
  OuLinearProblem p;
  p.a = -Dense::Identity(1, 1);
  p.b = Dense::Identity(1, 1);
  p.gamma = Vector::Ones(1);
  p.x_init = Vector::Zero(1);
  p.horizon = 1.0;
  return p;
}

}  // namespace

TEST(TimeGrid, DividesHorizon) {
  const TimeGrid g = TimeGrid::make(1.0, 0.01);
  EXPECT_EQ(g.steps, 100u);
  EXPECT_NEAR(g.horizon(), 1.0, 1e-14);
  EXPECT_THROW(TimeGrid::make(1.0, 0.3), std::invalid_argument);
  EXPECT_THROW(TimeGrid::make(1.0, 0.0), std::invalid_argument);
}

TEST(Simulate, FrozenDynamics) {
  SdeModel m = linear_model(2, 0.0, 0.5);
  const PathBatch b = simulate(m, ControlFn(), TimeGrid::make(1.0, 0.1), 4, 1, {.zero_noise = true});
  ASSERT_EQ(b.states.size(), 11u);
  for (const auto& x : b.states) EXPECT_EQ((x.value().array() - 0.5).abs().maxCoeff(), 0.0);
}

TEST(Simulate, InitialStateAndShapes) {
  SdeModel m = linear_model(3, 1.0, 0.25);
  const PathBatch b = simulate(m, ControlFn(), TimeGrid::make(1.0, 0.1), 5, 9);
  EXPECT_EQ(b.size(), 5u);
  EXPECT_EQ(b.dim(), 3u);
  EXPECT_EQ(b.noise.size(), 10u);
  EXPECT_EQ(b.controls.size(), 10u);
  EXPECT_EQ((b.states[0].value().array() - 0.25).abs().maxCoeff(), 0.0);
}

TEST(Simulate, EulerMaruyamaRecursion) {
  SdeModel m = linear_model(2, 0.7);
  const TimeGrid g = TimeGrid::make(1.0, 0.05);
  const PathBatch b = simulate(m, constant_control(0.3), g, 3, 4);
  for (std::size_t n = 0; n < g.steps; ++n) {
    const Matrix& x = b.states[n].value();
    const Matrix expect = x + (-0.7 * x.array() + 0.3).matrix() * g.dt + b.noise[n] * std::sqrt(g.dt);
    EXPECT_LT((b.states[n + 1].value() - expect).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(Simulate, BrownianMoments) {
  SdeModel m = linear_model(1, 0.0);
  const std::size_t n = 100000;
  const PathBatch b = simulate(m, ControlFn(), TimeGrid::make(1.0, 0.1), n, 42);
  const Moments mo = moments(column(b.states.back()));
  const double se_mean = std::sqrt(1.0 / n);
  const double se_var = std::sqrt(2.0 / n);
  EXPECT_NEAR(mo.mean, 0.0, 4 * se_mean);
  EXPECT_NEAR(mo.var, 1.0, 4 * se_var);
}

TEST(Simulate, NoiseMeanIsZero) {
  SdeModel m = linear_model(2, 0.0);
  const std::size_t n = 20000;
  const TimeGrid g = TimeGrid::make(1.0, 0.1);
  const PathBatch b = simulate(m, ControlFn(), g, n, 3);
  Eigen::RowVectorXd s = Eigen::RowVectorXd::Zero(2);
  for (const auto& xi : b.noise) s += xi.colwise().sum();
  const double count = static_cast<double>(n * g.steps);
  for (int k = 0; k < 2; ++k) EXPECT_LT(std::abs(s(k) / count), 4.0 / std::sqrt(count * 2));
}

TEST(Simulate, OuTerminalVariance) {
  // (1 - e^{-2}) / 2 by quadrature of e^{-2(1-s)}
  double quad = 0.0;
  const int q = 100000;
  for (int i = 0; i < q; ++i) quad += std::exp(-2.0 * (1.0 - (i + 0.5) / q)) / q;
  EXPECT_NEAR(quad, 0.5 * (1.0 - std::exp(-2.0)), 1e-9);
  SdeModel m = linear_model(1, 1.0);
  const std::size_t n = 100000;
  const PathBatch b = simulate(m, ControlFn(), TimeGrid::make(1.0, 0.002), n, 17);
  const Moments mo = moments(column(b.states.back()));
  EXPECT_NEAR(mo.var, quad, 4.0 * quad * std::sqrt(2.0 / n));
}

TEST(Simulate, BitwiseIdenticalAcrossWorkerCounts) {
  SdeModel m = linear_model(2, 1.0);
  const TimeGrid g = TimeGrid::make(1.0, 0.1);
  const std::size_t n = 2 * detail::kSimulationChunk + 123;
  const PathBatch a = simulate(m, constant_control(0.2), g, n, 77, {.workers = 1});
  const PathBatch b = simulate(m, constant_control(0.2), g, n, 77, {.workers = 3});
  const PathBatch c = simulate(m, constant_control(0.2), g, n, 77, {.workers = 1});
  for (std::size_t k = 0; k <= g.steps; ++k) {
    EXPECT_TRUE(a.states[k].value() == b.states[k].value());
    EXPECT_TRUE(a.states[k].value() == c.states[k].value());
  }
}

TEST(Simulate, NoiseKeyedByGlobalPathIndex) {
  SdeModel m = linear_model(1, 1.0);
  const TimeGrid g = TimeGrid::make(1.0, 0.1);
  const PathBatch whole = simulate(m, ControlFn(), g, 10, 5);
  const PathBatch tail = simulate(m, ControlFn(), g, 4, 5, {.first_path = 6});
  EXPECT_TRUE(whole.states.back().value().bottomRows(4) == tail.states.back().value());
}

TEST(Simulate, SingletonBatchAllowed) {
  SdeModel m = linear_model(1, 1.0);
  const PathBatch b = simulate(m, ControlFn(), TimeGrid::make(1.0, 0.1), 1, 5);
  EXPECT_EQ(b.size(), 1u);
  EXPECT_EQ(work(b, m).rows(), 1);
  EXPECT_THROW(simulate(m, ControlFn(), TimeGrid::make(1.0, 0.1), 0, 5), std::invalid_argument);
}

TEST(Simulate, NanControlAbortsWithPathAndStep) {
  SdeModel m = linear_model(1, 1.0);
  ControlFn bad = [](const Var& x, double t) {
    Matrix u = Matrix::Zero(x.rows(), 1);
    if (t > 0.25) u(3, 0) = std::nan("");
    return constant(u);
  };
  try {
    simulate(m, bad, TimeGrid::make(1.0, 0.1), 6, 1);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.path(), 3u);
    EXPECT_EQ(e.step(), 3u);
  }
}

TEST(Simulate, ExplodingStateAborts) {
  SdeModel m = linear_model(1, 0.0, 10.0);
  m.drift = [](const Var& x, double) { return mul(x, square(x)); };
  EXPECT_THROW(simulate(m, ControlFn(), TimeGrid::make(1.0, 0.1), 2, 1), NumericalError);
}

TEST(Simulate, DifferentiableBatchCarriesGradients) {
  SdeModel m = linear_model(1, 1.0);
  Tape tape;
  Var c = tape.parameter(Matrix::Constant(1, 1, 0.5));
  ControlFn u = [c](const Var& x, double) { return mul(filled(x.rows(), 1, 1.0), c); };
  const PathBatch b = simulate(m, u, TimeGrid::make(1.0, 0.1), 3, 1, {.differentiable = true});
  EXPECT_TRUE(b.states.back().requires_grad());
  // X_K is affine in c with slope sum_n (1 - dt)^n dt
  double slope = 0.0;
  for (int n = 0; n < 10; ++n) slope += std::pow(0.9, n) * 0.1;
  EXPECT_NEAR(tape.backward(mean(b.states.back()))(0), slope, 1e-12);
  const PathBatch plain = simulate(m, u, TimeGrid::make(1.0, 0.1), 3, 1);
  EXPECT_FALSE(plain.states.back().requires_grad());
}

TEST(Model, ValidationRejectsDegenerateDiffusionAndNegativeCost) {
  SdeModel m = linear_model(2, 1.0);
  EXPECT_NO_THROW(m.validate());
  SdeModel flat = m;
  flat.diffusion = [](const Var&, double, const Var& w) { return scale(w, 0.0); };
  EXPECT_THROW(flat.validate(), std::invalid_argument);
  SdeModel neg = m;
  neg.running_cost = [](const Var& x, double) { return filled(x.rows(), 1, -1.0); };
  EXPECT_THROW(neg.validate(), std::invalid_argument);
  SdeModel wrong = m;
  wrong.x_init = Vector::Zero(3);
  EXPECT_THROW(wrong.validate(), std::invalid_argument);
}

TEST(Model, GaussianStartIsChunkInvariant) {
  SdeModel m = linear_model(2, 1.0);
  m.initial_sampler = gaussian_start(Vector::Zero(2), 1.0);
  const PathBatch whole = simulate(m, ControlFn(), TimeGrid::make(1.0, 0.5), 8, 3);
  const PathBatch tail = simulate(m, ControlFn(), TimeGrid::make(1.0, 0.5), 3, 3, {.first_path = 5});
  EXPECT_TRUE(whole.states[0].value().bottomRows(3) == tail.states[0].value());
  EXPECT_GT(whole.states[0].value().cwiseAbs().sum(), 0.0);
}

TEST(Work, Examples) {
  SdeModel m = linear_model(1, 0.0);
  PathBatch frozen = simulate(m, ControlFn(), TimeGrid::make(1.0, 0.01), 3, 1, {.zero_noise = true});
  EXPECT_EQ(work(frozen, m).value().cwiseAbs().maxCoeff(), 0.0);

  SdeModel unit = linear_model(1, 1.0);
  unit.running_cost = [](const Var& x, double) { return filled(x.rows(), 1, 1.0); };
  unit.terminal_cost = [](const Var& x) { return filled(x.rows(), 1, 0.0); };
  const PathBatch b = simulate(unit, ControlFn(), TimeGrid::make(1.0, 0.01), 5, 2);
  EXPECT_NEAR(work(b, unit).value().maxCoeff(), 1.0, 1e-12);
  EXPECT_NEAR(work(b, unit).value().minCoeff(), 1.0, 1e-12);

  SdeModel dw = double_well_model(DoubleWellProblem::standard(1, 5.0, 3.0, 1));
  const PathBatch still = simulate(dw, ControlFn(), TimeGrid::make(1.0, 0.01), 2, 1, {.zero_noise = true});
  EXPECT_DOUBLE_EQ(work(still, dw).value()(0, 0), 12.0);
}

TEST(Work, LeftPointQuadratureIsFirstOrder) {
  // x' = -x, x0 = 1 (no noise), f = x^2: int = (1 - e^{-2}) / 2
  SdeModel m = linear_model(1, 1.0, 1.0);
  m.running_cost = [](const Var& x, double) { return square(x); };
  m.terminal_cost = [](const Var& x) { return filled(x.rows(), 1, 0.0); };
  const double exact = 0.5 * (1.0 - std::exp(-2.0));
  std::vector<double> err;
  for (double dt : {0.02, 0.01, 0.005}) {
    const PathBatch b = simulate(m, ControlFn(), TimeGrid::make(1.0, dt), 1, 1, {.zero_noise = true});
    err.push_back(std::abs(work(b, m).item() - exact));
  }
  for (int k = 0; k < 2; ++k) {
    const double ratio = err[k] / err[k + 1];
    EXPECT_GT(ratio, 1.7);
    EXPECT_LT(ratio, 2.3);
  }
}

TEST(Girsanov, ZeroControl) {
  SdeModel m = linear_model(2, 1.0);
  const PathBatch b = simulate(m, ControlFn(), TimeGrid::make(1.0, 0.1), 7, 3);
  EXPECT_EQ(girsanov_log_rn(b).value().cwiseAbs().maxCoeff(), 0.0);
}

TEST(Girsanov, ConstantControlCollapses) {
  SdeModel m = linear_model(1, 0.0);
  const double c = 0.8;
  const TimeGrid g = TimeGrid::make(1.0, 0.05);
  const PathBatch b = simulate(m, constant_control(c), g, 6, 3);
  Vector wt = Vector::Zero(6);
  for (const auto& xi : b.noise) wt += xi.col(0) * std::sqrt(g.dt);
  const Vector expect = (-c * wt).array() - 0.5 * c * c * 1.0;
  EXPECT_LT((column(girsanov_log_rn(b)) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Girsanov, MartingaleNormalization) {
  SdeModel m = linear_model(1, 1.0);
  ControlFn u = [](const Var& x, double t) { return add(scale(x, -0.5), filled(x.rows(), 1, std::sin(3 * t))); };
  const std::size_t n = 100000;
  const PathBatch b = simulate(m, u, TimeGrid::make(1.0, 0.02), n, 8);
  const Vector w = column(girsanov_log_rn(b)).array().exp();
  const Moments mo = moments(w);
  EXPECT_NEAR(mo.mean, 1.0, 4.0 * std::sqrt(mo.var / n));
}

TEST(Girsanov, ImportanceSamplingConsistency) {
  OuLinearProblem p = scalar_ou();
  SdeModel m = ou_linear_model(p);
  const TimeGrid g = TimeGrid::make(1.0, 0.02);
  const std::size_t n = 50000;
  auto estimate = [&](const ControlFn& u, std::uint64_t seed) {
    const PathBatch b = simulate(m, u, g, n, seed);
    const Vector w = (column(girsanov_log_rn(b)) - column(work(b, m))).array().exp();
    const Moments mo = moments(w);
    return std::make_pair(mo.mean, std::sqrt(mo.var / n));
  };
  const auto [m0, s0] = estimate(ControlFn(), 1);
  const auto [m1, s1] = estimate(constant_control(-0.3), 2);
  EXPECT_LT(std::abs(m0 - m1), 4.0 * std::hypot(s0, s1));
}

TEST(Ytilde, ZeroControlsNoCost) {
  SdeModel m = linear_model(2, 1.0);
  const PathBatch b = simulate(m, ControlFn(), TimeGrid::make(1.0, 0.1), 5, 3);
  EXPECT_EQ(ytilde(b, m, ControlFn()).value().cwiseAbs().maxCoeff(), 0.0);
}

TEST(Ytilde, SignCollapseWhenUEqualsV) {
  SdeModel m = linear_model(2, 1.0);
  m.running_cost = [](const Var& x, double) { return row_dot(x, x); };
  ControlFn u = [](const Var& x, double t) { return add(scale(x, 0.4), filled(x.rows(), x.cols(), t)); };
  const TimeGrid g = TimeGrid::make(1.0, 0.1);
  const PathBatch b = simulate(m, u, g, 5, 3);
  Vector expect = Vector::Zero(5);
  for (std::size_t n = 0; n < g.steps; ++n) {
    const Matrix& un = b.controls[n].value();
    const Matrix& x = b.states[n].value();
    expect -= x.rowwise().squaredNorm() * g.dt;
    expect -= un.cwiseProduct(b.noise[n]).rowwise().sum() * std::sqrt(g.dt);
    expect -= 0.5 * un.rowwise().squaredNorm() * g.dt;
  }
  EXPECT_LT((column(ytilde(b, m, u)) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Ytilde, ZeroVarianceAtOptimumUnderRefinement) {
  OuLinearProblem p = scalar_ou();
  SdeModel m = ou_linear_model(p);
  const ControlFn u = ou_linear_control(p);
  std::vector<double> var;
  for (double dt : {0.04, 0.02, 0.01}) {
    const PathBatch b = simulate(m, u, TimeGrid::make(1.0, dt), 4000, 6);
    const Vector r = column(ytilde(b, m, u)) - column(m.terminal_cost(b.states.back()));
    var.push_back(moments(r).var);
  }
  EXPECT_LT(var[0], 0.05 * 0.04);
  EXPECT_LT(var[1], var[0]);
  EXPECT_LT(var[2], var[1]);
}
