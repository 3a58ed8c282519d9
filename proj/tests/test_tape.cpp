#include "fd.hpp"
#include "ido/rng.hpp"
#include "ido/tape.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace ido;
using ido::test::central_fd;
using ido::test::rel_error;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

Matrix random_matrix(std::mt19937_64& gen, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(gen);
  return m;
}

// Tape gradient and FD gradient of a scalar function of one parameter matrix.
std::pair<Vector, Vector> both_gradients(const Matrix& x0, const std::function<Var(const Var&)>& f) {
  Tape tape;
  Var x = tape.parameter(x0);
  Vector g = tape.backward(f(x));
  auto value = [&](const Vector& flat) {
    Matrix m = Eigen::Map<const Matrix>(flat.data(), x0.rows(), x0.cols());
    return f(constant(m)).item();
  };
  Vector flat = Eigen::Map<const Vector>(x0.data(), x0.size());
  return {g, central_fd(value, flat)};
}

}  // namespace

TEST(Tape, SquareOfLeaf) {
  Tape tape;
  Var x = tape.parameter(Matrix::Constant(1, 1, 3.0));
  Var y = square(x);
  EXPECT_DOUBLE_EQ(y.item(), 9.0);
  EXPECT_DOUBLE_EQ(tape.backward(y)(0), 6.0);
}

TEST(Tape, ExpAtZero) {
  Tape tape;
  Var x = tape.parameter(Matrix::Constant(1, 1, 0.0));
  Var y = exp(x);
  EXPECT_DOUBLE_EQ(y.item(), 1.0);
  EXPECT_DOUBLE_EQ(tape.backward(y)(0), 1.0);
}

TEST(Tape, DotProduct) {
  Tape tape;
  Var a = tape.parameter(mat({{1, 2}}));
  Var b = tape.parameter(mat({{3, 4}}));
  Var y = dot(a, b);
  EXPECT_DOUBLE_EQ(y.item(), 11.0);
  Vector g = tape.backward(y);
  ASSERT_EQ(g.size(), 4);
  EXPECT_DOUBLE_EQ(g(0), 3.0);
  EXPECT_DOUBLE_EQ(g(1), 4.0);
  EXPECT_DOUBLE_EQ(g(2), 1.0);
  EXPECT_DOUBLE_EQ(g(3), 2.0);
}

TEST(Tape, ConstantRootGivesZeroGradient) {
  Tape tape;
  tape.parameter(Matrix::Constant(2, 2, 1.0));
  Vector g = tape.backward(constant(5.0));
  EXPECT_EQ(g.size(), 4);
  EXPECT_EQ(g.norm(), 0.0);
}

TEST(Tape, ThetaSquared) {
  Tape tape;
  Var t = tape.parameter(Matrix::Constant(1, 1, 3.0));
  EXPECT_DOUBLE_EQ(tape.backward(mul(t, t))(0), 6.0);
}

TEST(Tape, NonScalarRootRejected) {
  Tape tape;
  Var x = tape.parameter(Matrix::Ones(2, 1));
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Tape, ShapeMismatchNamesOpAndShapes) {
  try {
    add(constant(Matrix::Ones(2, 3)), constant(Matrix::Ones(3, 2)));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("2x3"), std::string::npos);
    EXPECT_NE(msg.find("3x2"), std::string::npos);
  }
  EXPECT_THROW(matmul(constant(Matrix::Ones(2, 3)), constant(Matrix::Ones(2, 3))), ShapeError);
  EXPECT_THROW(affine(constant(Matrix::Ones(4, 3)), constant(Matrix::Ones(2, 2))), ShapeError);
  EXPECT_THROW(row_dot(constant(Matrix::Ones(4, 3)), constant(Matrix::Ones(4, 2))), ShapeError);
}

TEST(Tape, PrimitiveDispatcherChecksArity) {
  const Var a = constant(2.0);
  const Var one[] = {a};
  EXPECT_THROW(primitive(Op::add, one), std::invalid_argument);
  const Var two[] = {a, a};
  EXPECT_DOUBLE_EQ(primitive(Op::mul, two).item(), 4.0);
  EXPECT_DOUBLE_EQ(primitive(Op::scale, one, 3.0).item(), 6.0);
}

TEST(Detach, SeversFlow) {
  Tape tape;
  Var x = tape.parameter(Matrix::Constant(1, 1, 3.0));
  Var y = square(detach(x));
  EXPECT_DOUBLE_EQ(y.item(), 9.0);
  EXPECT_EQ(tape.backward(y)(0), 0.0);
}

TEST(Detach, ProductWithOneBranchCut) {
  Tape tape;
  Var x = tape.parameter(Matrix::Constant(1, 1, 3.0));
  EXPECT_DOUBLE_EQ(tape.backward(mul(x, detach(x)))(0), 3.0);
}

TEST(Detach, Idempotent) {
  Tape tape;
  Var x = tape.parameter(Matrix::Constant(1, 1, 2.0));
  Var once = detach(x);
  Var twice = detach(once);
  EXPECT_FALSE(twice.requires_grad());
  EXPECT_EQ(twice.item(), once.item());
  EXPECT_EQ(tape.backward(exp(twice))(0), 0.0);
}

TEST(Detach, NeverChangesForwardValues) {
  std::mt19937_64 gen(7);
  Tape tape;
  Var x = tape.parameter(random_matrix(gen, 3, 2));
  Var live = add(tanh(x), mul(x, x));
  Var cut = add(tanh(detach(x)), mul(x, detach(x)));
  EXPECT_EQ((live.value() - cut.value()).norm(), 0.0);
}

// Every differentiable primitive against central differences.
TEST(TapeFd, EveryPrimitive) {
  std::mt19937_64 gen(11);
  const Matrix x0 = random_matrix(gen, 3, 2, 0.2, 1.5);  // positive for log/sqrt
  const Matrix other = random_matrix(gen, 3, 2, 0.5, 1.0);
  const Matrix row = random_matrix(gen, 1, 2);
  const Matrix col = random_matrix(gen, 3, 1);
  const Matrix w = random_matrix(gen, 4, 2);
  const Matrix bias = random_matrix(gen, 1, 4);
  const Matrix right = random_matrix(gen, 2, 3);
  const std::vector<std::pair<std::string, std::function<Var(const Var&)>>> cases = {
      {"add", [&](const Var& x) { return sum(square(add(x, constant(other)))); }},
      {"add_row", [&](const Var& x) { return sum(square(add(x, constant(row)))); }},
      {"add_col_param", [&](const Var& x) { return sum(square(add(constant(other), row_sum(x)))); }},
      {"sub", [&](const Var& x) { return sum(square(sub(constant(other), x))); }},
      {"mul", [&](const Var& x) { return sum(mul(x, mul(x, constant(other)))); }},
      {"mul_col", [&](const Var& x) { return sum(mul(constant(col), x)); }},
      {"div", [&](const Var& x) { return sum(div(constant(other), x)); }},
      {"div_num", [&](const Var& x) { return sum(div(square(x), constant(other))); }},
      {"matmul", [&](const Var& x) { return sum(square(matmul(x, constant(right)))); }},
      {"dot", [&](const Var& x) { return dot(x, square(x)); }},
      {"row_dot", [&](const Var& x) { return sum(square(row_dot(x, constant(other)))); }},
      {"mean", [&](const Var& x) { return mean(square(x)); }},
      {"row_sum", [&](const Var& x) { return sum(square(row_sum(x))); }},
      {"sqrt", [&](const Var& x) { return sum(sqrt(x)); }},
      {"exp", [&](const Var& x) { return sum(exp(x)); }},
      {"log", [&](const Var& x) { return sum(log(x)); }},
      {"tanh", [&](const Var& x) { return sum(square(tanh(x))); }},
      {"relu", [&](const Var& x) { return sum(square(relu(sub(x, constant(0.7))))); }},
      {"concat", [&](const Var& x) { return sum(square(concat(x, square(x)))); }},
      {"scale", [&](const Var& x) { return sum(square(scale(x, -2.5))); }},
      {"affine", [&](const Var& x) { return sum(square(affine(x, constant(w), constant(bias)))); }},
      {"affine_nobias", [&](const Var& x) { return sum(tanh(affine(x, constant(w)))); }},
  };
  for (const auto& [name, f] : cases) {
    auto [g, fd] = both_gradients(x0, f);
    EXPECT_LT(rel_error(g, fd), 1e-4) << name;
  }
}

TEST(TapeFd, AffineWeightAndBias) {
  std::mt19937_64 gen(3);
  const Matrix x = random_matrix(gen, 5, 3);
  const Matrix w0 = random_matrix(gen, 2, 3);
  const Matrix b0 = random_matrix(gen, 1, 2);
  auto f = [&](const Var& w, const Var& b) { return sum(tanh(affine(constant(x), w, b))); };
  Tape tape;
  Var w = tape.parameter(w0);
  Var b = tape.parameter(b0);
  Vector g = tape.backward(f(w, b));
  Vector flat(8);
  flat << Eigen::Map<const Vector>(w0.data(), 6), Eigen::Map<const Vector>(b0.data(), 2);
  auto value = [&](const Vector& p) {
    Matrix wm = Eigen::Map<const Matrix>(p.data(), 2, 3);
    Matrix bm = Eigen::Map<const Matrix>(p.data() + 6, 1, 2);
    return f(constant(wm), constant(bm)).item();
  };
  EXPECT_LT(rel_error(g, central_fd(value, flat)), 1e-4);
}

TEST(TapeFd, RandomCompositionsDepth50) {
  std::mt19937_64 gen(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x0 = random_matrix(gen, 2, 3);
    std::vector<int> ops;
    std::uniform_int_distribution<int> pick(0, 7);
    for (int k = 0; k < 50; ++k) ops.push_back(pick(gen));
    const Matrix c = random_matrix(gen, 2, 3, 0.5, 1.0);
    auto f = [&](const Var& x) {
      Var h = x;
      for (int op : ops) {
        switch (op) {
          case 0: h = tanh(h); break;
          case 1: h = add(h, mul(x, constant(c))); break;
          case 2: h = scale(h, 0.9); break;
          case 3: h = sub(h, scale(x, 0.3)); break;
          case 4: h = mul(h, constant(c)); break;
          case 5: h = div(h, add(square(h), constant(1.0))); break;
          case 6: h = sqrt(add(square(h), constant(0.5))); break;
          case 7: h = log(add(exp(h), constant(1.0))); break;
        }
      }
      return sum(h);
    };
    auto [g, fd] = both_gradients(x0, f);
    EXPECT_LT(rel_error(g, fd, 1e-6), 1e-4) << "trial " << trial;
  }
}

TEST(Tape, Linearity) {
  std::mt19937_64 gen(5);
  const Matrix x0 = random_matrix(gen, 3, 3);
  auto f = [](const Var& x) { return sum(tanh(matmul(x, x))); };
  auto g = [](const Var& x) { return mean(exp(x)); };
  const double a = 1.7, b = -0.4;
  Tape t1, t2, t3;
  Vector gf = t1.backward(f(t1.parameter(x0)));
  Vector gg = t2.backward(g(t2.parameter(x0)));
  Var x = t3.parameter(x0);
  Vector gl = t3.backward(add(scale(f(x), a), scale(g(x), b)));
  EXPECT_LT((gl - (a * gf + b * gg)).norm(), 1e-12 * (1.0 + gl.norm()));
}

TEST(Tape, ReluSubgradientZeroAtKink) {
  Tape tape;
  Var x = tape.parameter(Matrix::Zero(1, 1));
  EXPECT_EQ(tape.backward(sum(relu(x)))(0), 0.0);
}

TEST(Tape, ConstantsAreNotRecorded) {
  Tape tape;
  Var c = constant(Matrix::Ones(100, 10));
  for (int i = 0; i < 10; ++i) c = tanh(add(c, c));
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(c.requires_grad());
}

TEST(Tape, SlotsFlattenRowMajorInRegistrationOrder) {
  Tape tape;
  Var a = tape.parameter(mat({{1, 2, 3}, {4, 5, 6}}));
  Var b = tape.parameter(mat({{7}}));
  EXPECT_EQ(tape.parameter_slots(), 2u);
  EXPECT_EQ(tape.parameter_count(), 7u);
  // d/da of sum(a .* C) is C
  Matrix coef = mat({{10, 20, 30}, {40, 50, 60}});
  Vector g = tape.backward(add(sum(mul(a, constant(coef))), scale(b, 2.0)));
  for (int k = 0; k < 6; ++k) EXPECT_DOUBLE_EQ(g(k), 10.0 * (k + 1));
  EXPECT_DOUBLE_EQ(g(6), 2.0);
}

TEST(Tape, BackwardIsRepeatable) {
  Tape tape;
  Var x = tape.parameter(mat({{0.3, -0.2}}));
  Var y = sum(exp(mul(x, x)));
  Vector g1 = tape.backward(y);
  Vector g2 = tape.backward(y);
  EXPECT_EQ((g1 - g2).norm(), 0.0);
}

TEST(Tape, MixingTapesRejected) {
  Tape t1, t2;
  Var a = t1.parameter(Matrix::Ones(1, 1));
  Var b = t2.parameter(Matrix::Ones(1, 1));
  EXPECT_THROW(add(a, b), std::invalid_argument);
}

TEST(Rng, PhiloxIsDeterministicAndKeyed) {
  const rng::Philox a(1), b(1), c(2);
  EXPECT_EQ(a({1, 2, 3, 4}), b({1, 2, 3, 4}));
  EXPECT_NE(a({1, 2, 3, 4}), c({1, 2, 3, 4}));
  EXPECT_NE(a({1, 2, 3, 4}), a({1, 2, 3, 5}));
}

TEST(Rng, NormalMoments) {
  const rng::Philox gen(99);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n / 2; ++i) {
    const auto z = rng::normal_pair(gen, static_cast<std::uint64_t>(i), 0, 0);
    s += z[0] + z[1];
    s2 += z[0] * z[0] + z[1] * z[1];
  }
  EXPECT_NEAR(s / n, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(s2 / n, 1.0, 4.0 * std::sqrt(2.0 / n));
}

TEST(Rng, UniformInHalfOpenUnitInterval) {
  const rng::Philox gen(5);
  for (std::uint64_t i = 0; i < 10000; ++i) {
    const double u = rng::uniform(gen, i, 0);
    EXPECT_GT(u, 0.0);
    EXPECT_LE(u, 1.0);
  }
}
