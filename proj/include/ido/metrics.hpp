#pragma once

// Evaluation quantities: importance-sampling relative error, L2 distance to a
// reference control, crossing ratio, divergence relative errors under
// tensorisation and gradient-variance summaries.

#include "ido/approx.hpp"
#include "ido/losses.hpp"
#include "ido/problems.hpp"
#include "ido/reference.hpp"
#include "ido/rng.hpp"
#include "ido/sde.hpp"

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace ido {

struct IsreReport {
  double mean = 0.0;      // importance-sampled estimate of E[exp(-W)]
  double std_dev = 0.0;   // sample std of exp(-W) dP/dP^u
  double isre = 0.0;
  double log_mean = 0.0;  // log of `mean`, finite even when `mean` underflows
  std::size_t n = 0;
  std::uint64_t seed = 0;
};

/// Paths per simulation chunk inside metrics.
inline constexpr std::size_t kMetricChunk = 20000;

/// ISRE = std / mean of the per-path weights exp(-W_i) dP/dP^u_i, both from the
/// same batch simulated under u. Weights are shifted by their maximum exponent
/// before exponentiating; the ratio is invariant under that shift.
inline IsreReport isre(const SdeModel& model, const ControlFn& u, const TimeGrid& grid, std::size_t n,
                       std::uint64_t seed, std::size_t workers = 1) {
  if (n < 2) throw std::invalid_argument("isre needs N >= 2");
  Vector expo(static_cast<Eigen::Index>(n));
  for (const auto& r : detail::chunk_ranges(n, kMetricChunk)) {
    PathBatch batch = simulate(model, u, grid, r.count, seed, {.first_path = r.first, .workers = workers});
    expo.segment(static_cast<Eigen::Index>(r.first), static_cast<Eigen::Index>(r.count)) =
        column(girsanov_log_rn(batch)) - column(work(batch, model));
  }
  const double top = expo.maxCoeff();
  const Vector w = (expo.array() - top).exp().matrix();
  const double m = w.mean();
  if (!(m > 0.0) || !std::isfinite(top)) {
    throw NumericalError("isre: importance-sampled mean is not positive", 0, grid.steps);
  }
  const double var = (w.array() - m).square().sum() / static_cast<double>(n - 1);
  IsreReport rep;
  rep.n = n;
  rep.seed = seed;
  rep.isre = std::sqrt(var) / m;
  rep.log_mean = std::log(m) + top;
  rep.mean = std::exp(rep.log_mean);
  rep.std_dev = std::sqrt(var) * std::exp(top);
  return rep;
}

/// Mean over paths of sum_n |u - u_ref|^2 (X_n, t_n) dt on a given batch.
inline double l2_error_on(const PathBatch& batch, const ControlFn& u, const ControlFn& u_ref) {
  double acc = 0.0;
  for (std::size_t n = 0; n < batch.grid.steps; ++n) {
    const double t = batch.grid.time(n);
    const Var& x = batch.states[n];
    const Matrix a = u ? u(x, t).value() : Matrix::Zero(x.rows(), x.cols());
    const Matrix b = u_ref ? u_ref(x, t).value() : Matrix::Zero(x.rows(), x.cols());
    acc += (a - b).squaredNorm();
  }
  return acc * batch.grid.dt / static_cast<double>(batch.size());
}

/// L2 error of u against u_ref along paths simulated under u.
inline double l2_error(const SdeModel& model, const ControlFn& u, const ControlFn& u_ref, const TimeGrid& grid,
                       std::size_t n, std::uint64_t seed) {
  double acc = 0.0;
  for (const auto& r : detail::chunk_ranges(n, kMetricChunk)) {
    PathBatch batch = simulate(model, u, grid, r.count, seed, {.first_path = r.first});
    acc += l2_error_on(batch, u, u_ref) * static_cast<double>(r.count);
  }
  return acc / static_cast<double>(n);
}

/// Fraction of paths whose listed coordinates are all positive at T.
inline double crossing_ratio(const SdeModel& model, const ControlFn& u, const TimeGrid& grid, std::size_t n,
                             std::uint64_t seed, const std::vector<std::size_t>& coords = {0},
                             std::size_t workers = 1) {
  if (coords.empty()) throw std::invalid_argument("crossing_ratio needs at least one coordinate");
  for (std::size_t c : coords) {
    if (c >= model.dim) throw std::invalid_argument("crossing coordinate out of range");
  }
  std::size_t crossed = 0;
  for (const auto& r : detail::chunk_ranges(n, kMetricChunk)) {
    PathBatch batch = simulate(model, u, grid, r.count, seed, {.first_path = r.first, .workers = workers});
    const Matrix& xt = batch.states.back().value();
    for (Eigen::Index i = 0; i < xt.rows(); ++i) {
      bool all = true;
      for (std::size_t c : coords) all = all && xt(i, static_cast<Eigen::Index>(c)) > 0.0;
      crossed += all ? 1 : 0;
    }
  }
  return static_cast<double>(crossed) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Tensorisation

enum class Divergence { log_variance, cross_entropy, relative_entropy, variance };

inline const char* to_string(Divergence k) {
  switch (k) {
    case Divergence::log_variance: return "log_variance";
    case Divergence::cross_entropy: return "cross_entropy";
    case Divergence::relative_entropy: return "relative_entropy";
    case Divergence::variance: return "variance";
  }
  return "?";
}

inline Divergence parse_divergence(const std::string& s) {
  if (s == "log_variance") return Divergence::log_variance;
  if (s == "cross_entropy") return Divergence::cross_entropy;
  if (s == "relative_entropy") return Divergence::relative_entropy;
  if (s == "variance") return Divergence::variance;
  throw std::invalid_argument("unknown divergence '" + s + "'");
}

/// Divergence between the target Q and the uncontrolled P for the product
/// OU-linear problem, exact for the Euler-Maruyama chain. s2 = gamma^T Sigma_K gamma.
inline double divergence_exact(Divergence kind, double s2) {
  switch (kind) {
    case Divergence::log_variance: return s2;
    case Divergence::cross_entropy: return 0.5 * s2;
    case Divergence::relative_entropy: return 0.5 * s2;
    case Divergence::variance: return std::expm1(s2);
  }
  return 0.0;
}

/// Per-path log-likelihood ratios L_i = log dQ/dP = -g_i - log Z at u = v = 0
/// on the OU-linear problem (Ytilde = 0 for f = 0).
inline Vector log_likelihood_ratios(const SdeModel& model, const TimeGrid& grid, std::size_t n, std::uint64_t seed,
                                    double free_energy) {
  Vector l(static_cast<Eigen::Index>(n));
  for (const auto& r : detail::chunk_ranges(n, kMetricChunk)) {
    PathBatch batch = simulate(model, ControlFn(), grid, r.count, seed, {.first_path = r.first});
    l.segment(static_cast<Eigen::Index>(r.first), static_cast<Eigen::Index>(r.count)) =
        (-column(model.terminal_cost(batch.states.back()))).array() + free_energy;
  }
  return l;
}

/// Divergence estimate from log-likelihood ratios; NaN when the exponential
/// weights overflow.
inline double divergence_from(Divergence kind, const Vector& l) {
  const double nn = static_cast<double>(l.size());
  switch (kind) {
    case Divergence::log_variance: return (l.array() - l.mean()).square().sum() / (nn - 1.0);
    case Divergence::relative_entropy: return -l.mean();
    case Divergence::cross_entropy: {
      if (l.maxCoeff() > 700.0) return std::numeric_limits<double>::quiet_NaN();
      return (l.array() * l.array().exp()).mean();
    }
    case Divergence::variance: {
      if (l.maxCoeff() > 700.0) return std::numeric_limits<double>::quiet_NaN();
      const Vector w = l.array().exp().matrix();
      return (w.array() - w.mean()).square().sum() / (nn - 1.0);
    }
  }
  return 0.0;
}

inline double divergence_estimate(Divergence kind, const SdeModel& model, const TimeGrid& grid, std::size_t n,
                                  std::uint64_t seed, double free_energy) {
  return divergence_from(kind, log_likelihood_ratios(model, grid, n, seed, free_energy));
}

struct TensorisationRow {
  Divergence kind;
  std::size_t copies;
  std::size_t rep;
  double estimate;  // NaN when saturated
  double exact;
};

struct TensorisationSummary {
  Divergence kind;
  std::size_t copies;
  double exact;
  double mean;
  double std_dev;
  double relative_error;     // std / exact divergence
  double relative_to_mean;   // std / |mean|
  std::size_t saturated;
};

struct RobustnessStudy {
  std::vector<TensorisationRow> rows;
  std::vector<TensorisationSummary> summary;
};

/// For each M, builds the M-fold product of `base`, estimates the divergence
/// `reps` times with independent seeds and reports the relative error.
inline RobustnessStudy tensorisation_study(const std::vector<Divergence>& kinds, const OuLinearProblem& base,
                                           const std::vector<std::size_t>& copies, const TimeGrid& grid,
                                           std::size_t n, std::size_t reps, std::uint64_t seed) {
  if (reps < 2) throw std::invalid_argument("tensorisation study needs reps >= 2");
  if (n < 2) throw std::invalid_argument("tensorisation study needs N >= 2");
  RobustnessStudy out;
  for (std::size_t m : copies) {
    const OuLinearProblem prod = tensorize(base, m);
    const SdeModel model = ou_linear_model(prod);
    const auto [mu, cov] = ou_linear_em_moments(prod, grid);
    const double s2 = prod.gamma.dot(cov * prod.gamma);
    const double free_energy = ou_linear_free_energy_em(prod, grid);
    // one batch per repetition serves every divergence
    std::vector<std::vector<double>> est(kinds.size());
    std::vector<std::size_t> saturated(kinds.size(), 0);
    for (std::size_t r = 0; r < reps; ++r) {
      const Vector l = log_likelihood_ratios(model, grid, n, rng::derive(seed, r), free_energy);
      for (std::size_t k = 0; k < kinds.size(); ++k) {
        const double e = divergence_from(kinds[k], l);
        out.rows.push_back({kinds[k], m, r, e, divergence_exact(kinds[k], s2)});
        if (std::isnan(e)) {
          ++saturated[k];
        } else {
          est[k].push_back(e);
        }
      }
    }
    for (std::size_t k = 0; k < kinds.size(); ++k) {
      const double exact = divergence_exact(kinds[k], s2);
      const double nan = std::numeric_limits<double>::quiet_NaN();
      TensorisationSummary s{kinds[k], m, exact, nan, nan, nan, nan, saturated[k]};
      const auto& e = est[k];
      if (e.size() >= 2) {
        double mean = 0.0;
        for (double x : e) mean += x;
        mean /= static_cast<double>(e.size());
        double var = 0.0;
        for (double x : e) var += (x - mean) * (x - mean);
        var /= static_cast<double>(e.size() - 1);
        s.mean = mean;
        s.std_dev = std::sqrt(var);
        s.relative_error = s.std_dev / exact;
        s.relative_to_mean = s.std_dev / std::abs(mean);
      }
      out.summary.push_back(s);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient statistics

struct GradientVarianceReport {
  Vector mean;
  Vector variance;
  double mean_variance = 0.0;        // averaged over all components
  double mean_relative_error = 0.0;  // |std / mean| averaged over components above the floor
  std::size_t above_floor = 0;
  std::size_t reps = 0;
};

/// Summary over a set of gradient samples (one per row).
inline GradientVarianceReport summarize_gradients(const std::vector<Vector>& samples, double floor = 0.01,
                                                  const std::vector<Eigen::Index>& components = {}) {
  if (samples.size() < 2) throw std::invalid_argument("gradient summary needs at least two samples");
  GradientVarianceReport rep;
  rep.reps = samples.size();
  const Eigen::Index p = samples.front().size();
  rep.mean = Vector::Zero(p);
  for (const auto& g : samples) rep.mean += g;
  rep.mean /= static_cast<double>(samples.size());
  rep.variance = Vector::Zero(p);
  for (const auto& g : samples) rep.variance += (g - rep.mean).cwiseAbs2();
  rep.variance /= static_cast<double>(samples.size() - 1);
  std::vector<Eigen::Index> idx = components;
  if (idx.empty()) {
    for (Eigen::Index i = 0; i < p; ++i) idx.push_back(i);
  }
  double vsum = 0.0, rsum = 0.0;
  for (Eigen::Index i : idx) {
    vsum += rep.variance(i);
    if (std::abs(rep.mean(i)) >= floor) {
      rsum += std::sqrt(rep.variance(i)) / std::abs(rep.mean(i));
      ++rep.above_floor;
    }
  }
  rep.mean_variance = vsum / static_cast<double>(idx.size());
  rep.mean_relative_error =
      rep.above_floor ? rsum / static_cast<double>(rep.above_floor) : std::numeric_limits<double>::quiet_NaN();
  return rep;
}

/// Re-estimates the loss gradient `reps` times with fresh noise.
inline GradientVarianceReport gradient_variance_diag(const LossSpec& spec, const SdeModel& model,
                                                     const ControlField& u, double y0, const TimeGrid& grid,
                                                     std::size_t reps, std::size_t n, std::uint64_t seed,
                                                     double floor = 0.01,
                                                     const std::vector<Eigen::Index>& components = {},
                                                     const LossOptions& opt = {}) {
  if (reps < 2) throw std::invalid_argument("gradient_variance_diag needs reps >= 2");
  std::vector<Vector> samples;
  samples.reserve(reps);
  for (std::size_t r = 0; r < reps; ++r) {
    samples.push_back(evaluate(spec, model, u, y0, grid, n, rng::derive(seed, r), opt).gradient);
  }
  return summarize_gradients(samples, floor, components);
}

/// Trailing moving average; the first window-1 entries average what is available.
inline std::vector<double> moving_average(const std::vector<double>& x, std::size_t window) {
  if (window == 0) throw std::invalid_argument("moving average window must be positive");
  std::vector<double> out(x.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    acc += x[i];
    if (i >= window) acc -= x[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

/// Coefficient of determination of the least-squares line y ~ a + b x.
inline double r_squared(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 3) throw std::invalid_argument("r_squared needs >= 3 paired points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy * sxy / (sxx * syy);
}

}  // namespace ido
