#pragma once

// Ground-truth solutions: matrix exponential, the analytic OU-linear control and
// free energy, matrix Riccati for linear-quadratic problems, and a 1D
// Crank-Nicolson solver for the linearized (Hopf-Cole) HJB equation.

#include "ido/sde.hpp"
#include "ido/tape.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace ido {

using Dense = Eigen::MatrixXd;

/// Scaling and squaring with a [6/6] Pade approximant.
inline Dense expm(const Dense& m) {
  if (m.rows() != m.cols()) throw ShapeError("expm needs a square matrix");
  if (!m.allFinite()) throw std::invalid_argument("expm of a non-finite matrix");
  const Eigen::Index n = m.rows();
  const double norm = m.cwiseAbs().rowwise().sum().maxCoeff();
  int s = 0;
  if (norm > 0.5) s = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
  const Dense a = m / std::ldexp(1.0, s);

  // c_k = (2q-k)! q! / ((2q)! k! (q-k)!), q = 6
  constexpr double c[] = {1.0, 0.5, 5.0 / 44.0, 1.0 / 66.0, 1.0 / 792.0, 1.0 / 15840.0, 1.0 / 665280.0};
  const Dense id = Dense::Identity(n, n);
  Dense power = id;
  Dense num = Dense::Zero(n, n), den = Dense::Zero(n, n);
  for (int k = 0; k <= 6; ++k) {
    num += c[k] * power;
    den += ((k % 2) ? -c[k] : c[k]) * power;
    power = power * a;
  }
  Dense r = den.partialPivLu().solve(num);
  for (int k = 0; k < s; ++k) r = r * r;
  return r;
}

struct OuLinearProblem {
  Dense a;
  Dense b;
  Vector gamma;
  double horizon = 1.0;
  Vector x_init;

  std::size_t dim() const { return static_cast<std::size_t>(gamma.size()); }

  void validate() const {
    const auto d = gamma.size();
    if (d == 0 || a.rows() != d || a.cols() != d || b.rows() != d || b.cols() != d || x_init.size() != d) {
      throw std::invalid_argument("OU-linear problem has inconsistent dimensions");
    }
    if (!(horizon > 0.0)) throw std::invalid_argument("horizon must be positive");
  }
};

/// u*(x, t) = -B^T exp(A^T (T - t)) gamma, independent of x.
inline Vector ou_linear_u_star(const OuLinearProblem& p, double t) {
  return -p.b.transpose() * expm(Dense(p.a.transpose() * (p.horizon - t))) * p.gamma;
}

/// u* as a batch control.
inline ControlFn ou_linear_control(const OuLinearProblem& p) {
  return [p](const Var& x, double t) {
    const Vector u = ou_linear_u_star(p, t);
    if (u.size() != x.cols()) throw ShapeError("u* dimension does not match the state");
    return constant(Matrix(u.transpose().replicate(x.rows(), 1)));
  };
}

namespace detail {

inline Dense ou_cov_integrand(const OuLinearProblem& p, double s) {
  const Dense e = expm(Dense(p.a * s));
  return e * p.b * p.b.transpose() * e.transpose();
}

inline Dense simpson_cov(const OuLinearProblem& p, int panels) {
  const double h = p.horizon / panels;
  Dense acc = ou_cov_integrand(p, 0.0) + ou_cov_integrand(p, p.horizon);
  for (int i = 1; i < panels; ++i) acc += (i % 2 ? 4.0 : 2.0) * ou_cov_integrand(p, i * h);
  return acc * (h / 3.0);
}

}  // namespace detail

/// Sigma_0 = int_0^T e^{As} B B^T e^{A^T s} ds by composite Simpson, refined
/// until two successive Richardson-corrected values agree to `tol`.
inline Dense ou_linear_covariance(const OuLinearProblem& p, double tol = 1e-10) {
  int panels = 16;
  Dense coarse = detail::simpson_cov(p, panels);
  Dense prev_rich;
  for (int level = 0; level < 12; ++level) {
    panels *= 2;
    const Dense fine = detail::simpson_cov(p, panels);
    const Dense rich = fine + (fine - coarse) / 15.0;
    if (level > 0 && (rich - prev_rich).cwiseAbs().maxCoeff() <= tol * std::max(1.0, rich.cwiseAbs().maxCoeff())) {
      return rich;
    }
    prev_rich = rich;
    coarse = fine;
  }
  return prev_rich;
}

/// Free energy -log Z = gamma . (e^{AT} x_init - 1/2 Sigma_0 gamma).
inline double ou_linear_free_energy(const OuLinearProblem& p) {
  p.validate();
  const Dense sigma = ou_linear_covariance(p);
  const Vector mu = expm(Dense(p.a * p.horizon)) * p.x_init;
  return p.gamma.dot(mu - 0.5 * sigma * p.gamma);
}

/// Mean and covariance of X_K for the uncontrolled Euler-Maruyama chain.
inline std::pair<Vector, Dense> ou_linear_em_moments(const OuLinearProblem& p, const TimeGrid& grid) {
  const auto d = static_cast<Eigen::Index>(p.dim());
  const Dense m = Dense::Identity(d, d) + grid.dt * p.a;
  Vector mean = p.x_init;
  Dense cov = Dense::Zero(d, d);
  const Dense bb = grid.dt * p.b * p.b.transpose();
  for (std::size_t n = 0; n < grid.steps; ++n) {
    mean = m * mean;
    cov = m * cov * m.transpose() + bb;
  }
  return {mean, cov};
}

/// -log Z of the discretized problem (exact for the Euler-Maruyama chain).
inline double ou_linear_free_energy_em(const OuLinearProblem& p, const TimeGrid& grid) {
  const auto [mean, cov] = ou_linear_em_moments(p, grid);
  return p.gamma.dot(mean - 0.5 * cov * p.gamma);
}

// ---------------------------------------------------------------------------
// Riccati

struct RiccatiSolution {
  double horizon = 0.0;
  double h = 0.0;          // fine step
  std::vector<Dense> f;    // f[k] = F at t = k h

  /// Linear interpolation in t.
  Dense at(double t) const {
    const double s = std::clamp(t / h, 0.0, static_cast<double>(f.size() - 1));
    const auto k = std::min(static_cast<std::size_t>(s), f.size() - 2);
    const double w = s - static_cast<double>(k);
    return (1.0 - w) * f[k] + w * f[k + 1];
  }
};

/// Backward RK4 for dF/dt = -A^T F - F A + 2 F B B^T F - P, F_T = R.
inline RiccatiSolution riccati_solve(const Dense& a, const Dense& b, const Dense& p, const Dense& r,
                                     double horizon, std::size_t steps) {
  const auto d = a.rows();
  if (a.cols() != d || b.rows() != d || p.rows() != d || p.cols() != d || r.rows() != d || r.cols() != d) {
    throw ShapeError("riccati_solve: inconsistent matrix shapes");
  }
  if (steps < 1) throw std::invalid_argument("riccati_solve needs at least one step");
  const Dense bbt = b * b.transpose();
  auto rhs = [&](const Dense& f) -> Dense {
    return -a.transpose() * f - f * a + 2.0 * f * bbt * f - p;
  };
  RiccatiSolution sol;
  sol.horizon = horizon;
  sol.h = horizon / static_cast<double>(steps);
  sol.f.assign(steps + 1, Dense());
  Dense f = 0.5 * (r + r.transpose());
  sol.f[steps] = f;
  const double h = -sol.h;  // integrate backward in time
  for (std::size_t k = steps; k-- > 0;) {
    const Dense k1 = rhs(f);
    const Dense k2 = rhs(f + 0.5 * h * k1);
    const Dense k3 = rhs(f + 0.5 * h * k2);
    const Dense k4 = rhs(f + h * k3);
    f += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    f = 0.5 * (f + f.transpose()).eval();
    if (!f.allFinite()) {
      throw NumericalError("Riccati solution blew up at t = " + std::to_string(sol.h * static_cast<double>(k)), 0, k);
    }
    sol.f[k] = f;
  }
  return sol;
}

/// u*(x, t) = -2 B^T F_t x.
inline ControlFn lqg_control(std::shared_ptr<const RiccatiSolution> sol, Dense b) {
  return [sol = std::move(sol), b = std::move(b)](const Var& x, double t) {
    const Matrix gain = -2.0 * b.transpose() * sol->at(t);
    return constant(Matrix(x.value() * gain.transpose()));
  };
}

// ---------------------------------------------------------------------------
// 1D finite differences

struct Grid1dValue {
  double x_lo = 0.0, x_hi = 0.0;
  std::size_t nodes = 0;
  double dx = 0.0;
  double horizon = 0.0;
  std::size_t time_steps = 0;
  double dt = 0.0;
  // value[n * nodes + j] = V(x_j, t_n), likewise control
  std::vector<double> value;
  std::vector<double> control;
  std::shared_ptr<std::atomic<std::size_t>> extrapolations = std::make_shared<std::atomic<std::size_t>>(0);

  double x(std::size_t j) const { return x_lo + dx * static_cast<double>(j); }
  double t(std::size_t n) const { return dt * static_cast<double>(n); }
  double v_at(std::size_t n, std::size_t j) const { return value[n * nodes + j]; }
  double u_at(std::size_t n, std::size_t j) const { return control[n * nodes + j]; }

  /// Bilinear interpolation; queries outside [x_lo, x_hi] use the nearest node and are counted.
  double interpolate(const std::vector<double>& table, double xq, double tq) const {
    if (xq < x_lo || xq > x_hi) extrapolations->fetch_add(1, std::memory_order_relaxed);
    const double sx = std::clamp((xq - x_lo) / dx, 0.0, static_cast<double>(nodes - 1));
    const double st = std::clamp(tq / dt, 0.0, static_cast<double>(time_steps));
    const auto j = std::min(static_cast<std::size_t>(sx), nodes - 2);
    const auto n = std::min(static_cast<std::size_t>(st), time_steps - 1);
    const double wx = sx - static_cast<double>(j);
    const double wt = st - static_cast<double>(n);
    auto at = [&](std::size_t nn, std::size_t jj) { return table[nn * nodes + jj]; };
    return (1 - wt) * ((1 - wx) * at(n, j) + wx * at(n, j + 1)) +
           wt * ((1 - wx) * at(n + 1, j) + wx * at(n + 1, j + 1));
  }

  double value_at(double xq, double tq) const { return interpolate(value, xq, tq); }
  double control_at(double xq, double tq) const { return interpolate(control, xq, tq); }
};

struct FdOptions {
  double x_lo = -3.0;
  double x_hi = 3.0;
  std::size_t nodes = 2401;
  std::size_t time_steps = 1000;
};

/// Crank-Nicolson for d_t psi + 1/2 sigma^2 psi_xx + b psi_x - f psi = 0,
/// psi(., T) = exp(-g), homogeneous Neumann boundaries. V = -log psi and
/// u = -sigma dV/dx by central differences.
inline Grid1dValue hjb_fd_1d(const SdeModel& model, const FdOptions& opt = {}) {
  if (model.dim != 1) throw std::invalid_argument("hjb_fd_1d needs a one-dimensional model");
  if (opt.nodes < 3 || opt.time_steps < 1 || !(opt.x_hi > opt.x_lo)) {
    throw std::invalid_argument("hjb_fd_1d: invalid grid");
  }
  Grid1dValue out;
  out.x_lo = opt.x_lo;
  out.x_hi = opt.x_hi;
  out.nodes = opt.nodes;
  out.dx = (opt.x_hi - opt.x_lo) / static_cast<double>(opt.nodes - 1);
  out.horizon = model.horizon;
  out.time_steps = opt.time_steps;
  out.dt = model.horizon / static_cast<double>(opt.time_steps);
  const std::size_t m = opt.nodes;
  const auto mi = static_cast<Eigen::Index>(m);

  Matrix xs(mi, 1);
  for (std::size_t j = 0; j < m; ++j) xs(static_cast<Eigen::Index>(j), 0) = out.x(j);
  const Var xv = constant(xs);

  struct Coeffs {
    std::vector<double> lower, diag, upper;  // L as a tridiagonal operator
    std::vector<double> sigma;
  };
  auto operator_at = [&](double t) {
    Coeffs c;
    c.lower.assign(m, 0.0);
    c.diag.assign(m, 0.0);
    c.upper.assign(m, 0.0);
    c.sigma.assign(m, 0.0);
    const Matrix b = model.drift(xv, t).value();
    const Matrix s = model.diffusion(xv, t, filled(mi, 1, 1.0)).value();
    Matrix f = Matrix::Zero(mi, 1);
    if (model.running_cost) f = model.running_cost(xv, t).value();
    const double dx2 = out.dx * out.dx;
    for (std::size_t j = 0; j < m; ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      const double a = 0.5 * s(jj, 0) * s(jj, 0);
      c.sigma[j] = s(jj, 0);
      if (j == 0 || j + 1 == m) {
        // ghost node mirrors the interior neighbour: psi_x = 0
        const double two = 2.0 * a / dx2;
        c.diag[j] = -two - f(jj, 0);
        (j == 0 ? c.upper[j] : c.lower[j]) = two;
      } else {
        c.lower[j] = a / dx2 - b(jj, 0) / (2.0 * out.dx);
        c.upper[j] = a / dx2 + b(jj, 0) / (2.0 * out.dx);
        c.diag[j] = -2.0 * a / dx2 - f(jj, 0);
      }
    }
    return c;
  };

  std::vector<std::vector<double>> psi(opt.time_steps + 1, std::vector<double>(m));
  {
    const Matrix g = model.terminal_cost(xv).value();
    for (std::size_t j = 0; j < m; ++j) psi[opt.time_steps][j] = std::exp(-g(static_cast<Eigen::Index>(j), 0));
  }
  std::vector<double> rhs(m), cp(m), dp(m);
  for (std::size_t n = opt.time_steps; n-- > 0;) {
    const Coeffs c = operator_at(out.t(n) + 0.5 * out.dt);
    const std::vector<double>& next = psi[n + 1];
    const double h = 0.5 * out.dt;
    for (std::size_t j = 0; j < m; ++j) {
      double lv = c.diag[j] * next[j];
      if (j > 0) lv += c.lower[j] * next[j - 1];
      if (j + 1 < m) lv += c.upper[j] * next[j + 1];
      rhs[j] = next[j] + h * lv;
    }
    // (I - h L) psi_n = rhs by the Thomas algorithm
    for (std::size_t j = 0; j < m; ++j) {
      const double lo = j > 0 ? -h * c.lower[j] : 0.0;
      const double di = 1.0 - h * c.diag[j];
      const double up = j + 1 < m ? -h * c.upper[j] : 0.0;
      const double denom = j > 0 ? di - lo * cp[j - 1] : di;
      cp[j] = up / denom;
      dp[j] = (rhs[j] - (j > 0 ? lo * dp[j - 1] : 0.0)) / denom;
    }
    std::vector<double>& cur = psi[n];
    cur[m - 1] = dp[m - 1];
    for (std::size_t j = m - 1; j-- > 0;) cur[j] = dp[j] - cp[j] * cur[j + 1];
    for (std::size_t j = 0; j < m; ++j) {
      if (!(cur[j] > 0.0)) {
        throw NumericalError("hjb_fd_1d: psi <= 0 at x = " + std::to_string(out.x(j)) + ", t = " +
                                 std::to_string(out.t(n)) + " (domain too small or grid too coarse)",
                             j, n);
      }
    }
  }

  out.value.resize((opt.time_steps + 1) * m);
  out.control.resize((opt.time_steps + 1) * m);
  for (std::size_t n = 0; n <= opt.time_steps; ++n) {
    const Coeffs c = operator_at(out.t(n));
    for (std::size_t j = 0; j < m; ++j) out.value[n * m + j] = -std::log(psi[n][j]);
    for (std::size_t j = 0; j < m; ++j) {
      double dv = 0.0;
      if (j > 0 && j + 1 < m) dv = (out.value[n * m + j + 1] - out.value[n * m + j - 1]) / (2.0 * out.dx);
      out.control[n * m + j] = -c.sigma[j] * dv;
    }
  }
  return out;
}

/// FD control as a batch control (d = 1).
inline ControlFn fd_control(std::shared_ptr<const Grid1dValue> table) {
  return [table = std::move(table)](const Var& x, double t) {
    if (x.cols() != 1) throw ShapeError("FD reference control is one-dimensional");
    Matrix u(x.rows(), 1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) u(i, 0) = table->control_at(x.value()(i, 0), t);
    return constant(std::move(u));
  };
}

}  // namespace ido
