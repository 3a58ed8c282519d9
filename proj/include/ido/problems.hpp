#pragma once

// Concrete control problems as SdeModels.

#include "ido/reference.hpp"
#include "ido/rng.hpp"
#include "ido/sde.hpp"
#include "ido/tape.hpp"

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace ido {

/// A = -I + xi, B = I + xi' with independent N(0, nu^2) entries drawn from
/// `problem_seed` (A first, then B).
inline std::pair<Dense, Dense> perturbed_ou_matrices(std::size_t d, double nu, std::uint64_t problem_seed) {
  const auto n = static_cast<Eigen::Index>(d);
  const rng::Philox gen(rng::derive(problem_seed, 0x0B));
  Dense a = -Dense::Identity(n, n);
  Dense b = Dense::Identity(n, n);
  std::uint64_t k = 0;
  for (Dense* m : {&a, &b}) {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j, ++k) {
        (*m)(i, j) += nu * rng::normal_pair(gen, k, 0, 0, rng::Stream::initial)[0];
      }
    }
  }
  return {a, b};
}

namespace detail {

// Linear drift x A^T and diffusion w B^T in batch form.
inline void set_linear_dynamics(SdeModel& m, const Dense& a, const Dense& b) {
  m.drift = [at = Matrix(a)](const Var& x, double) { return affine(x, constant(at)); };
  m.diffusion = [bt = Matrix(b)](const Var&, double, const Var& w) { return affine(w, constant(bt)); };
}

}  // namespace detail

/// dX = (AX + Bu) dt + B dW, f = 0, g(x) = gamma . x.
inline SdeModel ou_linear_model(const OuLinearProblem& p) {
  p.validate();
  SdeModel m;
  m.dim = p.dim();
  m.horizon = p.horizon;
  detail::set_linear_dynamics(m, p.a, p.b);
  m.terminal_cost = [g = Matrix(p.gamma)](const Var& x) { return matmul(x, constant(g)); };
  m.x_init = p.x_init;
  m.validate();
  return m;
}

/// Block-diagonal product of `copies` independent instances of `p`.
inline OuLinearProblem tensorize(const OuLinearProblem& p, std::size_t copies) {
  if (copies < 1) throw std::invalid_argument("tensorize needs at least one copy");
  const auto d = static_cast<Eigen::Index>(p.dim());
  const auto n = d * static_cast<Eigen::Index>(copies);
  OuLinearProblem out;
  out.a = Dense::Zero(n, n);
  out.b = Dense::Zero(n, n);
  out.gamma = Vector(n);
  out.x_init = Vector(n);
  out.horizon = p.horizon;
  for (std::size_t c = 0; c < copies; ++c) {
    const auto o = d * static_cast<Eigen::Index>(c);
    out.a.block(o, o, d, d) = p.a;
    out.b.block(o, o, d, d) = p.b;
    out.gamma.segment(o, d) = p.gamma;
    out.x_init.segment(o, d) = p.x_init;
  }
  return out;
}

struct LqgProblem {
  Dense a, b, p, r;
  double horizon = 1.0;
  Vector x_init;
  std::size_t dim() const { return static_cast<std::size_t>(a.rows()); }
};

/// dX = (AX + Bu) dt + B dW, f = x^T P x, g = x^T R x.
inline SdeModel lqg_model(const LqgProblem& q) {
  SdeModel m;
  m.dim = q.dim();
  m.horizon = q.horizon;
  detail::set_linear_dynamics(m, q.a, q.b);
  m.running_cost = [pm = Matrix(q.p)](const Var& x, double) { return row_dot(x, affine(x, constant(pm))); };
  m.terminal_cost = [rm = Matrix(q.r)](const Var& x) { return row_dot(x, affine(x, constant(rm))); };
  m.x_init = q.x_init;
  m.validate();
  return m;
}

struct DoubleWellProblem {
  Vector kappa;  // potential sum kappa_i (x_i^2 - 1)^2
  Vector nu;     // terminal cost sum nu_i (x_i - 1)^2
  Dense b;       // diffusion
  double horizon = 1.0;
  Vector x_init;
  std::size_t dim() const { return static_cast<std::size_t>(kappa.size()); }

  /// kappa_i = nu_i = (k, n) for the first `metastable` coordinates, 1 otherwise;
  /// B = I, x_init = -1.
  static DoubleWellProblem standard(std::size_t d, double k, double n, std::size_t metastable, double horizon = 1.0) {
    const auto dd = static_cast<Eigen::Index>(d);
    DoubleWellProblem p;
    p.kappa = Vector::Ones(dd);
    p.nu = Vector::Ones(dd);
    for (std::size_t i = 0; i < std::min(metastable, d); ++i) {
      p.kappa(static_cast<Eigen::Index>(i)) = k;
      p.nu(static_cast<Eigen::Index>(i)) = n;
    }
    p.b = Dense::Identity(dd, dd);
    p.horizon = horizon;
    p.x_init = -Vector::Ones(dd);
    return p;
  }
};

/// dX = -grad Psi dt + B dW, f = 0.
inline SdeModel double_well_model(const DoubleWellProblem& p) {
  const auto d = p.kappa.size();
  if (d == 0 || p.nu.size() != d || p.b.rows() != d || p.b.cols() != d || p.x_init.size() != d) {
    throw std::invalid_argument("double well problem has inconsistent dimensions");
  }
  SdeModel m;
  m.dim = static_cast<std::size_t>(d);
  m.horizon = p.horizon;
  // -grad Psi = -4 kappa x (x^2 - 1)
  m.drift = [k = Matrix(-4.0 * p.kappa.transpose())](const Var& x, double) {
    return mul(mul(x, sub(square(x), constant(1.0))), constant(k));
  };
  m.diffusion = [bt = Matrix(p.b)](const Var&, double, const Var& w) { return affine(w, constant(bt)); };
  m.terminal_cost = [nu = Matrix(p.nu.transpose())](const Var& x) {
    return row_sum(mul(square(sub(x, constant(1.0))), constant(nu)));
  };
  m.x_init = p.x_init;
  m.validate();
  return m;
}

}  // namespace ido
