#pragma once

// Monte Carlo loss estimators recorded on a tape. The forward control v that
// generates the paths is always a constant: gradients only see u.
//
// Large batches are split into chunks that each own a tape. Mean-type losses
// average the chunk gradients; variance-type losses first compute the per-path
// terms a_i without a tape and then differentiate the surrogate
// 2/(N-1) sum_i (a_i - mean(a)) a_i chunk by chunk, which has the same gradient.

#include "ido/approx.hpp"
#include "ido/sde.hpp"
#include "ido/tape.hpp"

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ido {

enum class LossKind { relative_entropy, cross_entropy, variance, log_variance, moment };
enum class ForwardPolicy { zero, current_u, frozen };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::relative_entropy: return "relative_entropy";
    case LossKind::cross_entropy: return "cross_entropy";
    case LossKind::variance: return "variance";
    case LossKind::log_variance: return "log_variance";
    case LossKind::moment: return "moment";
  }
  return "?";
}

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "relative_entropy" || s == "re") return LossKind::relative_entropy;
  if (s == "cross_entropy" || s == "ce") return LossKind::cross_entropy;
  if (s == "variance" || s == "var") return LossKind::variance;
  if (s == "log_variance" || s == "logvar") return LossKind::log_variance;
  if (s == "moment") return LossKind::moment;
  throw std::invalid_argument("unknown loss kind '" + s + "'");
}

inline const char* to_string(ForwardPolicy p) {
  switch (p) {
    case ForwardPolicy::zero: return "zero";
    case ForwardPolicy::current_u: return "current_u";
    case ForwardPolicy::frozen: return "frozen";
  }
  return "?";
}

inline ForwardPolicy parse_forward_policy(const std::string& s) {
  if (s == "zero") return ForwardPolicy::zero;
  if (s == "current_u") return ForwardPolicy::current_u;
  if (s == "frozen") return ForwardPolicy::frozen;
  throw std::invalid_argument("unknown forward policy '" + s + "'");
}

struct LossSpec {
  LossKind kind = LossKind::log_variance;
  ForwardPolicy forward = ForwardPolicy::current_u;
  Vector frozen_params;  // parameters of v for ForwardPolicy::frozen
};

inline bool needs_two_paths(LossKind k) { return k == LossKind::variance || k == LossKind::log_variance; }

struct LossValue {
  double value = 0.0;
  Vector gradient;  // over theta, then d/dy0 for the moment loss
  Vector std_error;   // between-chunk standard error of the gradient; empty for one chunk
  std::size_t n = 0;
  std::uint64_t seed = 0;
  double max_exponent = std::numeric_limits<double>::quiet_NaN();
};

struct LossOptions {
  /// Paths per tape; 0 keeps the whole batch on one tape.
  std::size_t chunk = 0;
  /// Exponents above this abort the cross-entropy and variance losses.
  double max_exponent = 700.0;
  /// Deterministic dynamics (all Gaussians 0); for degenerate-case checks.
  bool zero_noise = false;
};

/// Exponential reweighting overflowed; carries the largest exponent seen.
class ExponentOverflow : public NumericalError {
 public:
  ExponentOverflow(const std::string& what, std::size_t path, double exponent)
      : NumericalError(what, path, 0), exponent_(exponent) {}
  double exponent() const { return exponent_; }

 private:
  double exponent_;
};

namespace detail {

inline double check_exponent(const Matrix& e, double limit, std::size_t first_path, const char* loss) {
  Eigen::Index arg = 0;
  const double top = e.col(0).maxCoeff(&arg);
  if (!std::isfinite(top) || top > limit) {
    throw ExponentOverflow(std::string(loss) + ": exponent " + std::to_string(top) + " at path " +
                               std::to_string(first_path + static_cast<std::size_t>(arg)) +
                               " exceeds the overflow limit " + std::to_string(limit),
                           first_path + static_cast<std::size_t>(arg), top);
  }
  return top;
}

struct ChunkRange {
  std::size_t first;
  std::size_t count;
};

inline std::vector<ChunkRange> chunk_ranges(std::size_t n, std::size_t chunk) {
  if (chunk == 0 || chunk >= n) return {{0, n}};
  std::vector<ChunkRange> out;
  for (std::size_t first = 0; first < n; first += chunk) out.push_back({first, std::min(chunk, n - first)});
  return out;
}

inline Var sample_variance(const Var& a) {
  const auto n = static_cast<double>(a.rows());
  return scale(sum(square(sub(a, mean(a)))), 1.0 / (n - 1.0));
}

// Per-path term whose batch mean (mean-type) or variance (variance-type) is the loss.
// `u` is bound to a tape or constant; `batch` was simulated under the constant v.
inline Var path_terms(LossKind kind, const SdeModel& model, const PathBatch& batch, const ControlFn& u,
                      const Var& y0, const LossOptions& opt, double& max_exp) {
  switch (kind) {
    case LossKind::relative_entropy: {
      // batch simulated under u itself, differentiably
      const double dt = batch.grid.dt;
      Var acc = work(batch, model);
      for (std::size_t n = 0; n < batch.grid.steps; ++n) {
        acc = add(acc, scale(row_dot(batch.controls[n], batch.controls[n]), 0.5 * dt));
      }
      return acc;
    }
    case LossKind::cross_entropy: {
      Var w = work(batch, model);
      Matrix expo = girsanov_log_rn(batch).value() - w.value();
      max_exp = std::max(max_exp, check_exponent(expo, opt.max_exponent, batch.first_path, "cross_entropy"));
      Var weight = constant(Matrix(expo.array().exp().matrix()));
      // 1/2 int |u|^2 - int u.v - int u.dW = Ytilde + int f
      Var pre = ytilde(batch, model, u);
      if (model.running_cost) {
        for (std::size_t n = 0; n < batch.grid.steps; ++n) {
          pre = add(pre, scale(model.running_cost(batch.states[n], batch.grid.time(n)), batch.grid.dt));
        }
      }
      return mul(pre, weight);
    }
    case LossKind::variance: {
      Var a = sub(ytilde(batch, model, u), model.terminal_cost(batch.states.back()));
      max_exp = std::max(max_exp, check_exponent(a.value(), opt.max_exponent, batch.first_path, "variance"));
      return exp(a);
    }
    case LossKind::log_variance:
      return sub(ytilde(batch, model, u), model.terminal_cost(batch.states.back()));
    case LossKind::moment: {
      Var r = add(sub(ytilde(batch, model, u), model.terminal_cost(batch.states.back())), y0);
      return square(r);
    }
  }
  throw std::logic_error("unhandled loss kind");
}

inline PathBatch loss_batch(LossKind kind, const SdeModel& model, const ControlFn& u, const ControlFn& v,
                            const TimeGrid& grid, ChunkRange r, std::uint64_t seed, bool zero_noise) {
  if (kind == LossKind::relative_entropy) {
    return simulate(model, u, grid, r.count, seed,
                    {.differentiable = true, .first_path = r.first, .zero_noise = zero_noise});
  }
  return simulate(model, v, grid, r.count, seed,
                  {.differentiable = false, .first_path = r.first, .zero_noise = zero_noise});
}

inline void fill_stderr(LossValue& out, const std::vector<Vector>& per_chunk) {
  const std::size_t c = per_chunk.size();
  if (c < 2) return;
  Vector m = Vector::Zero(per_chunk.front().size());
  for (const auto& g : per_chunk) m += g;
  m /= static_cast<double>(c);
  Vector s = Vector::Zero(m.size());
  for (const auto& g : per_chunk) s += (g - m).cwiseAbs2();
  out.std_error = (s / (static_cast<double>(c) * static_cast<double>(c - 1))).cwiseSqrt();
}

}  // namespace detail

/// Generic estimator. `y0` is used by the moment loss only; `v` by all but
/// relative entropy (empty v = zero control).
inline LossValue estimate_loss(LossKind kind, const SdeModel& model, const ControlField& u,
                               const ControlFn& v, double y0, const TimeGrid& grid, std::size_t n,
                               std::uint64_t seed, const LossOptions& opt = {}) {
  if (n < 1) throw std::invalid_argument("loss needs N >= 1");
  if (needs_two_paths(kind) && n < 2) {
    throw std::invalid_argument(std::string(to_string(kind)) + " loss needs N >= 2");
  }
  const bool moment = kind == LossKind::moment;
  const Eigen::Index p = static_cast<Eigen::Index>(u.size()) + (moment ? 1 : 0);
  LossValue out;
  out.n = n;
  out.seed = seed;
  out.gradient = Vector::Zero(p);
  double max_exp = -std::numeric_limits<double>::infinity();
  const auto ranges = detail::chunk_ranges(n, opt.chunk);
  std::vector<Vector> per_chunk;

  auto run_chunk = [&](detail::ChunkRange r, auto&& objective) {
    Tape tape;
    ControlFn uf = u.bind(tape);
    Var y0v = moment ? tape.parameter(Matrix::Constant(1, 1, y0)) : Var();
    PathBatch batch = detail::loss_batch(kind, model, uf, v, grid, r, seed, opt.zero_noise);
    Var terms = detail::path_terms(kind, model, batch, uf, y0v, opt, max_exp);
    Var obj = objective(terms);
    Vector g = tape.backward(obj);
    return std::make_pair(obj.item(), std::move(g));
  };

  if (!needs_two_paths(kind)) {
    for (const auto& r : ranges) {
      auto [val, g] = run_chunk(r, [](const Var& terms) { return mean(terms); });
      const double w = static_cast<double>(r.count) / static_cast<double>(n);
      out.value += w * val;
      out.gradient += w * g;
      per_chunk.push_back(std::move(g));
    }
  } else if (ranges.size() == 1) {
    auto [val, g] = run_chunk(ranges.front(), [](const Var& terms) { return detail::sample_variance(terms); });
    out.value = val;
    out.gradient = std::move(g);
  } else {
    // pass 1: terms without a tape
    const ControlFn uc = u.bind_constant();
    Vector a(static_cast<Eigen::Index>(n));
    for (const auto& r : ranges) {
      PathBatch batch = detail::loss_batch(kind, model, uc, v, grid, r, seed, opt.zero_noise);
      Var terms = detail::path_terms(kind, model, batch, uc, Var(), opt, max_exp);
      a.segment(static_cast<Eigen::Index>(r.first), static_cast<Eigen::Index>(r.count)) = terms.value().col(0);
    }
    const double abar = a.mean();
    out.value = (a.array() - abar).square().sum() / static_cast<double>(n - 1);
    // pass 2: surrogate gradients
    for (const auto& r : ranges) {
      Matrix coef = (a.segment(static_cast<Eigen::Index>(r.first), static_cast<Eigen::Index>(r.count)).array() -
                     abar).matrix();
      auto [val, g] = run_chunk(r, [&](const Var& terms) {
        return scale(dot(terms, constant(coef)), 2.0 / static_cast<double>(n - 1));
      });
      (void)val;
      out.gradient += g;
      per_chunk.push_back(g * static_cast<double>(n) / static_cast<double>(r.count));
    }
  }
  detail::fill_stderr(out, per_chunk);
  if (kind == LossKind::cross_entropy || kind == LossKind::variance) out.max_exponent = max_exp;
  return out;
}

inline LossValue re_loss(const SdeModel& model, const ControlField& u, const TimeGrid& grid, std::size_t n,
                         std::uint64_t seed, const LossOptions& opt = {}) {
  return estimate_loss(LossKind::relative_entropy, model, u, ControlFn(), 0.0, grid, n, seed, opt);
}

inline LossValue ce_loss(const SdeModel& model, const ControlField& u, const ControlFn& v,
                         const TimeGrid& grid, std::size_t n, std::uint64_t seed, const LossOptions& opt = {}) {
  return estimate_loss(LossKind::cross_entropy, model, u, v, 0.0, grid, n, seed, opt);
}

inline LossValue var_loss(const SdeModel& model, const ControlField& u, const ControlFn& v,
                          const TimeGrid& grid, std::size_t n, std::uint64_t seed, const LossOptions& opt = {}) {
  return estimate_loss(LossKind::variance, model, u, v, 0.0, grid, n, seed, opt);
}

inline LossValue logvar_loss(const SdeModel& model, const ControlField& u, const ControlFn& v,
                             const TimeGrid& grid, std::size_t n, std::uint64_t seed,
                             const LossOptions& opt = {}) {
  return estimate_loss(LossKind::log_variance, model, u, v, 0.0, grid, n, seed, opt);
}

inline LossValue moment_loss(const SdeModel& model, const ControlField& u, double y0, const ControlFn& v,
                             const TimeGrid& grid, std::size_t n, std::uint64_t seed,
                             const LossOptions& opt = {}) {
  return estimate_loss(LossKind::moment, model, u, v, y0, grid, n, seed, opt);
}

/// The forward control v selected by a policy for the current parameters.
inline ControlFn forward_control(const LossSpec& spec, const ControlField& u) {
  switch (spec.forward) {
    case ForwardPolicy::zero: return ControlFn();
    case ForwardPolicy::current_u: return u.bind_constant();
    case ForwardPolicy::frozen: {
      ControlField frozen = u;
      frozen.unpack(spec.frozen_params);
      return frozen.bind_constant();
    }
  }
  return ControlFn();
}

inline LossValue evaluate(const LossSpec& spec, const SdeModel& model, const ControlField& u, double y0,
                          const TimeGrid& grid, std::size_t n, std::uint64_t seed,
                          const LossOptions& opt = {}) {
  const ControlFn v = spec.kind == LossKind::relative_entropy ? ControlFn() : forward_control(spec, u);
  return estimate_loss(spec.kind, model, u, v, y0, grid, n, seed, opt);
}

struct GradientEstimate {
  Vector mean;
  Vector std_error;
  std::size_t n = 0;
};

/// Directional derivatives of the relative entropy from the closed form
/// E[(g - Ytilde^{u,u}) int phi . dW] along explicit vector fields phi_k.
/// Standard errors are per path.
inline GradientEstimate exact_re_gradient(const SdeModel& model, const ControlField& u,
                                          const std::vector<ControlFn>& directions, const TimeGrid& grid,
                                          std::size_t n, std::uint64_t seed, std::size_t chunk = 4096) {
  if (n < 2) throw std::invalid_argument("exact_re_gradient needs N >= 2");
  const auto k = static_cast<Eigen::Index>(directions.size());
  Vector s1 = Vector::Zero(k), s2 = Vector::Zero(k);
  const ControlFn uc = u.bind_constant();
  const double sqrt_dt = std::sqrt(grid.dt);
  for (const auto& r : detail::chunk_ranges(n, chunk)) {
    PathBatch batch = simulate(model, uc, grid, r.count, seed, {.first_path = r.first});
    const Vector c = column(model.terminal_cost(batch.states.back())) - column(ytilde(batch, model, uc));
    for (Eigen::Index j = 0; j < k; ++j) {
      Vector stoch = Vector::Zero(static_cast<Eigen::Index>(r.count));
      for (std::size_t m = 0; m < grid.steps; ++m) {
        const Matrix phi = directions[static_cast<std::size_t>(j)](batch.states[m], grid.time(m)).value();
        stoch += phi.cwiseProduct(batch.noise[m]).rowwise().sum() * sqrt_dt;
      }
      const Vector x = c.cwiseProduct(stoch);
      s1(j) += x.sum();
      s2(j) += x.squaredNorm();
    }
  }
  GradientEstimate out;
  out.n = n;
  const double nn = static_cast<double>(n);
  out.mean = s1 / nn;
  const Vector var = ((s2 / nn) - out.mean.cwiseAbs2()) * (nn / (nn - 1.0));
  out.std_error = (var.cwiseMax(0.0) / nn).cwiseSqrt();
  return out;
}

/// Same closed form with phi = d u_theta / d theta_i for the listed parameter
/// indices, via one backward sweep per chunk. Standard errors are between chunks.
inline GradientEstimate exact_re_gradient(const SdeModel& model, const ControlField& u,
                                          const std::vector<std::size_t>& indices, const TimeGrid& grid,
                                          std::size_t n, std::uint64_t seed, std::size_t chunk = 1000) {
  const ControlFn uc = u.bind_constant();
  const double sqrt_dt = std::sqrt(grid.dt);
  std::vector<Vector> per_chunk;
  Vector total = Vector::Zero(static_cast<Eigen::Index>(indices.size()));
  for (const auto& r : detail::chunk_ranges(n, chunk)) {
    PathBatch batch = simulate(model, uc, grid, r.count, seed, {.first_path = r.first});
    const Matrix c = model.terminal_cost(batch.states.back()).value() - ytilde(batch, model, uc).value();
    Tape tape;
    ControlFn ut = u.bind(tape);
    Var acc = filled(static_cast<Eigen::Index>(r.count), 1, 0.0);
    for (std::size_t m = 0; m < grid.steps; ++m) {
      acc = add(acc, row_dot(ut(batch.states[m], grid.time(m)), constant(Matrix(sqrt_dt * batch.noise[m]))));
    }
    Var obj = scale(dot(acc, constant(c)), 1.0 / static_cast<double>(r.count));
    const Vector g = tape.backward(obj);
    Vector pick(static_cast<Eigen::Index>(indices.size()));
    for (std::size_t j = 0; j < indices.size(); ++j) pick(static_cast<Eigen::Index>(j)) = g(static_cast<Eigen::Index>(indices[j]));
    total += pick * (static_cast<double>(r.count) / static_cast<double>(n));
    per_chunk.push_back(std::move(pick));
  }
  GradientEstimate out;
  out.n = n;
  out.mean = total;
  LossValue tmp;
  detail::fill_stderr(tmp, per_chunk);
  out.std_error = tmp.std_error;
  return out;
}

}  // namespace ido
