#pragma once

// Controlled diffusions dX = (b + sigma u) dt + sigma dW, simulated with
// Euler-Maruyama on a uniform grid, plus the per-path functionals every loss
// estimator is built from. All time integrals use the left point (Ito).

#include "ido/rng.hpp"
#include "ido/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ido {

/// Control vector field evaluated on a batch: x is (N x d), result (N x d).
using ControlFn = std::function<Var(const Var& x, double t)>;

/// Raised when a simulation produces a non-finite state or control.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::size_t path, std::size_t step)
      : std::runtime_error(what), path_(path), step_(step) {}
  std::size_t path() const { return path_; }
  std::size_t step() const { return step_; }

 private:
  std::size_t path_;
  std::size_t step_;
};

struct TimeGrid {
  std::size_t steps = 0;
  double dt = 0.0;

  double time(std::size_t n) const { return static_cast<double>(n) * dt; }
  double horizon() const { return static_cast<double>(steps) * dt; }

  static TimeGrid make(double horizon, double dt) {
    if (!(horizon > 0.0) || !(dt > 0.0)) throw std::invalid_argument("grid needs horizon > 0 and dt > 0");
    const double k = std::round(horizon / dt);
    if (k < 1.0 || std::abs(k * dt - horizon) > 1e-9 * std::max(1.0, horizon)) {
      throw std::invalid_argument("dt = " + std::to_string(dt) + " does not divide horizon " +
                                  std::to_string(horizon));
    }
    return {static_cast<std::size_t>(k), horizon / k};
  }
};

/// Draws `count` initial states for global path indices first..first+count-1.
using InitialSampler =
    std::function<Matrix(std::size_t first_path, std::size_t count, std::uint64_t seed)>;

struct SdeModel {
  std::size_t dim = 0;
  double horizon = 1.0;
  std::function<Var(const Var& x, double t)> drift;
  /// Applies sigma(x_i, t) to row w_i. Must be linear in w.
  std::function<Var(const Var& x, double t, const Var& w)> diffusion;
  /// (N x 1); may be left empty for f = 0.
  std::function<Var(const Var& x, double t)> running_cost;
  /// (N x 1)
  std::function<Var(const Var& x)> terminal_cost;
  Vector x_init;
  InitialSampler initial_sampler;  // overrides x_init when set

  Matrix initial_states(std::size_t first_path, std::size_t count, std::uint64_t seed) const {
    if (initial_sampler) return initial_sampler(first_path, count, seed);
    return x_init.transpose().replicate(static_cast<Eigen::Index>(count), 1);
  }

  /// sigma(x, t) as a dense matrix.
  Matrix sigma_at(const Vector& x, double t) const {
    const auto d = static_cast<Eigen::Index>(dim);
    Var xs = constant(Matrix(x.transpose().replicate(d, 1)));
    // row j of the result is sigma e_j, i.e. the transpose of sigma
    Matrix rows = diffusion(xs, t, constant(Matrix(Matrix::Identity(d, d)))).value();
    return rows.transpose();
  }

  /// Ellipticity of sigma sigma^T and f >= 0 on a fixed probe set.
  void validate() const {
    if (dim == 0) throw std::invalid_argument("model dimension must be positive");
    if (!drift || !diffusion || !terminal_cost) {
      throw std::invalid_argument("model needs drift, diffusion and terminal cost");
    }
    if (!initial_sampler && static_cast<std::size_t>(x_init.size()) != dim) {
      throw std::invalid_argument("x_init has " + std::to_string(x_init.size()) +
                                  " components, model dimension is " + std::to_string(dim));
    }
    const rng::Philox gen(0x5EED);
    const auto d = static_cast<Eigen::Index>(dim);
    for (std::uint32_t probe = 0; probe < 8; ++probe) {
      Vector x(d);
      for (Eigen::Index k = 0; k < d; ++k) {
        x(k) = 4.0 * rng::uniform(gen, static_cast<std::uint64_t>(k), probe) - 2.0;
      }
      for (double t : {0.0, 0.5 * horizon, horizon}) {
        const Matrix s = sigma_at(x, t);
        Eigen::LLT<Eigen::MatrixXd> llt(Eigen::MatrixXd(s * s.transpose()));
        if (llt.info() != Eigen::Success) {
          throw std::invalid_argument("sigma sigma^T is not positive definite at probe " +
                                      std::to_string(probe) + ", t = " + std::to_string(t));
        }
        if (running_cost) {
          const double f = running_cost(constant(Matrix(x.transpose())), t).value()(0, 0);
          if (f < 0.0) {
            throw std::invalid_argument("running cost is negative at probe " + std::to_string(probe));
          }
        }
      }
    }
  }
};

/// N discretized trajectories together with the noise that drove them.
struct PathBatch {
  TimeGrid grid;
  std::uint64_t seed = 0;
  std::size_t first_path = 0;
  std::vector<Var> states;    // steps + 1 entries, each (N x d)
  std::vector<Matrix> noise;  // steps entries, standard normals (N x d)
  std::vector<Var> controls;  // steps entries, the simulating control at (X_n, t_n)

  std::size_t size() const { return states.empty() ? 0 : static_cast<std::size_t>(states.front().rows()); }
  std::size_t dim() const { return states.empty() ? 0 : static_cast<std::size_t>(states.front().cols()); }
};

/// Standard normals for paths [first, first + count), step n.
inline Matrix brownian_noise(std::uint64_t seed, std::size_t first, std::size_t count,
                             std::size_t dim, std::size_t step) {
  const rng::Philox gen(seed);
  Matrix xi(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t k = 0; k < dim; k += 2) {
      const auto z = rng::normal_pair(gen, first + i, static_cast<std::uint32_t>(step),
                                      static_cast<std::uint32_t>(k / 2));
      xi(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = z[0];
      if (k + 1 < dim) xi(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k + 1)) = z[1];
    }
  }
  return xi;
}

/// Initial states drawn from N(mean, stddev^2 I), keyed by path index.
inline InitialSampler gaussian_start(Vector mean, double stddev) {
  return [mean = std::move(mean), stddev](std::size_t first, std::size_t count, std::uint64_t seed) {
    const rng::Philox gen(rng::derive(seed, 0xA11CE));
    const auto d = mean.size();
    Matrix x(static_cast<Eigen::Index>(count), d);
    for (std::size_t i = 0; i < count; ++i) {
      for (Eigen::Index k = 0; k < d; k += 2) {
        const auto z = rng::normal_pair(gen, first + i, 0, static_cast<std::uint32_t>(k / 2),
                                        rng::Stream::initial);
        x(static_cast<Eigen::Index>(i), k) = mean(k) + stddev * z[0];
        if (k + 1 < d) x(static_cast<Eigen::Index>(i), k + 1) = mean(k + 1) + stddev * z[1];
      }
    }
    return x;
  };
}

struct SimulateOptions {
  /// Record states on the tape the control is bound to.
  bool differentiable = false;
  /// Global index of the first path; noise is keyed by global index.
  std::size_t first_path = 0;
  /// Threads for non-differentiable runs. Results do not depend on it.
  std::size_t workers = 1;
  /// Replace every Gaussian by 0 (deterministic dynamics; for degenerate-case checks).
  bool zero_noise = false;
};

namespace detail {

// Non-differentiable batches are always processed in chunks of this many rows.
inline constexpr std::size_t kSimulationChunk = 4096;

inline void check_finite(const Matrix& m, const char* what, std::size_t first_path, std::size_t step) {
  if (m.allFinite()) return;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (!m.row(i).allFinite()) {
      throw NumericalError(std::string("non-finite ") + what + " at path " +
                               std::to_string(first_path + static_cast<std::size_t>(i)) + ", step " +
                               std::to_string(step),
                           first_path + static_cast<std::size_t>(i), step);
    }
  }
}

inline PathBatch simulate_block(const SdeModel& model, const ControlFn& control, const TimeGrid& grid,
                                std::size_t count, std::uint64_t seed, std::size_t first_path,
                                bool differentiable, bool zero_noise) {
  PathBatch batch;
  batch.grid = grid;
  batch.seed = seed;
  batch.first_path = first_path;
  batch.states.reserve(grid.steps + 1);
  batch.noise.reserve(grid.steps);
  batch.controls.reserve(grid.steps);

  const double sqrt_dt = std::sqrt(grid.dt);
  Var x = constant(model.initial_states(first_path, count, seed));
  check_finite(x.value(), "initial state", first_path, 0);
  batch.states.push_back(x);
  for (std::size_t n = 0; n < grid.steps; ++n) {
    const double t = grid.time(n);
    Var u = control ? control(x, t) : filled(x.rows(), x.cols(), 0.0);
    if (!differentiable) u = detach(u);
    if (u.rows() != x.rows() || u.cols() != x.cols()) {
      throw ShapeError("control returned " + detail::shape_str(u.value()) + " for state " +
                       detail::shape_str(x.value()));
    }
    check_finite(u.value(), "control", first_path, n);
    Matrix xi = zero_noise ? Matrix::Zero(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(model.dim))
                           : brownian_noise(seed, first_path, count, model.dim, n);
    // sigma is linear in its argument: sigma (u dt + xi sqrt(dt)) in one application
    Var kick = add(scale(u, grid.dt), constant(Matrix(xi * sqrt_dt)));
    Var next = add(add(x, scale(model.drift(x, t), grid.dt)), model.diffusion(x, t, kick));
    if (!differentiable) next = detach(next);
    check_finite(next.value(), "state", first_path, n + 1);
    batch.controls.push_back(u);
    batch.noise.push_back(std::move(xi));
    batch.states.push_back(next);
    x = next;
  }
  return batch;
}

inline Var stack_rows(const std::vector<Var>& parts) {
  Eigen::Index rows = 0;
  for (const auto& p : parts) rows += p.rows();
  Matrix out(rows, parts.front().cols());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return constant(std::move(out));
}

inline Matrix stack_rows(const std::vector<Matrix>& parts) {
  Eigen::Index rows = 0;
  for (const auto& p : parts) rows += p.rows();
  Matrix out(rows, parts.front().cols());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  return out;
}

}  // namespace detail

/// Euler-Maruyama simulation of N paths under `control` (empty = zero control).
inline PathBatch simulate(const SdeModel& model, const ControlFn& control, const TimeGrid& grid,
                          std::size_t n, std::uint64_t seed, const SimulateOptions& options = {}) {
  if (n < 1) throw std::invalid_argument("simulate needs N >= 1");
  if (options.differentiable || n <= detail::kSimulationChunk) {
    return detail::simulate_block(model, control, grid, n, seed, options.first_path,
                                  options.differentiable, options.zero_noise);
  }

  const std::size_t chunks = (n + detail::kSimulationChunk - 1) / detail::kSimulationChunk;
  std::vector<std::optional<PathBatch>> parts(chunks);
  std::vector<std::exception_ptr> errors(chunks);
  auto run = [&](std::size_t c) {
    const std::size_t first = c * detail::kSimulationChunk;
    const std::size_t count = std::min(detail::kSimulationChunk, n - first);
    try {
      parts[c] = detail::simulate_block(model, control, grid, count, seed, options.first_path + first, false,
                                          options.zero_noise);
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, chunks));
  if (workers == 1) {
    for (std::size_t c = 0; c < chunks; ++c) run(c);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t c = w; c < chunks; c += workers) run(c);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  PathBatch batch;
  batch.grid = grid;
  batch.seed = seed;
  batch.first_path = options.first_path;
  for (std::size_t k = 0; k <= grid.steps; ++k) {
    std::vector<Var> rows;
    rows.reserve(chunks);
    for (auto& p : parts) rows.push_back(p->states[k]);
    batch.states.push_back(detail::stack_rows(rows));
    if (k == grid.steps) break;
    std::vector<Var> ctrl;
    std::vector<Matrix> xi;
    for (auto& p : parts) {
      ctrl.push_back(p->controls[k]);
      xi.push_back(std::move(p->noise[k]));
    }
    batch.controls.push_back(detail::stack_rows(ctrl));
    batch.noise.push_back(detail::stack_rows(xi));
  }
  return batch;
}

/// Running plus terminal cost per path: sum_{n<K} f(X_n, t_n) dt + g(X_K). (N x 1)
inline Var work(const PathBatch& batch, const SdeModel& model) {
  Var w = model.terminal_cost(batch.states.back());
  if (model.running_cost) {
    for (std::size_t n = 0; n < batch.grid.steps; ++n) {
      w = add(w, scale(model.running_cost(batch.states[n], batch.grid.time(n)), batch.grid.dt));
    }
  }
  return w;
}

/// log dP/dP^u per path for a batch simulated under u (the batch's own control):
/// -sum u.xi sqrt(dt) - 1/2 sum |u|^2 dt. (N x 1)
inline Var girsanov_log_rn(const PathBatch& batch) {
  const double dt = batch.grid.dt;
  const double sqrt_dt = std::sqrt(dt);
  Var acc = filled(static_cast<Eigen::Index>(batch.size()), 1, 0.0);
  for (std::size_t n = 0; n < batch.grid.steps; ++n) {
    const Var& u = batch.controls[n];
    // u . (-xi sqrt(dt) - u dt / 2)
    Var rhs = add(scale(u, -0.5 * dt), constant(Matrix(-sqrt_dt * batch.noise[n])));
    acc = add(acc, row_dot(u, rhs));
  }
  return acc;
}

/// u evaluated along every state X_n, n < K.
inline std::vector<Var> control_along(const PathBatch& batch, const ControlFn& u) {
  std::vector<Var> out;
  out.reserve(batch.grid.steps);
  for (std::size_t n = 0; n < batch.grid.steps; ++n) {
    out.push_back(u ? u(batch.states[n], batch.grid.time(n))
                    : filled(batch.states[n].rows(), batch.states[n].cols(), 0.0));
  }
  return out;
}

/// Ytilde^{u,v}_T per path for a batch simulated under v (taken from the batch):
/// -sum (u.v) dt - sum f dt - sum u.xi sqrt(dt) + 1/2 sum |u|^2 dt. (N x 1)
inline Var ytilde(const PathBatch& batch, const SdeModel& model, const std::vector<Var>& u_values) {
  if (u_values.size() != batch.grid.steps) {
    throw std::invalid_argument("ytilde needs one control value per time step");
  }
  const double dt = batch.grid.dt;
  const double sqrt_dt = std::sqrt(dt);
  Var acc = filled(static_cast<Eigen::Index>(batch.size()), 1, 0.0);
  for (std::size_t n = 0; n < batch.grid.steps; ++n) {
    const Var& u = u_values[n];
    // u . (u dt / 2 - v dt - xi sqrt(dt))
    Matrix fixed = -dt * batch.controls[n].value() - sqrt_dt * batch.noise[n];
    Var rhs = add(scale(u, 0.5 * dt), constant(std::move(fixed)));
    acc = add(acc, row_dot(u, rhs));
    if (model.running_cost) {
      acc = sub(acc, scale(model.running_cost(batch.states[n], batch.grid.time(n)), dt));
    }
  }
  return acc;
}

inline Var ytilde(const PathBatch& batch, const SdeModel& model, const ControlFn& u) {
  return ytilde(batch, model, control_along(batch, u));
}

/// Column of a (N x 1) node as a plain vector.
inline Vector column(const Var& v) { return v.value().col(0); }

}  // namespace ido
