#pragma once

// Gradient steps and the training loop: simulate, estimate the loss, backward,
// step. Each iteration draws fresh noise from a seed derived from the master
// seed and the iteration index.

#include "ido/approx.hpp"
#include "ido/losses.hpp"
#include "ido/metrics.hpp"
#include "ido/rng.hpp"
#include "ido/sde.hpp"

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ido {

enum class OptimizerKind { sgd, adam };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Vector m;  // Adam moments, sized on first use
  Vector v;
  std::size_t steps = 0;
  std::size_t skipped = 0;

  /// Updates theta in place; returns false (and leaves everything untouched)
  /// when the gradient is not finite.
  bool step(Vector& theta, const Vector& grad) {
    if (grad.size() != theta.size()) {
      throw std::invalid_argument("gradient has " + std::to_string(grad.size()) + " entries, parameters " +
                                  std::to_string(theta.size()));
    }
    if (!grad.allFinite()) {
      ++skipped;
      return false;
    }
    if (kind == OptimizerKind::sgd) {
      theta -= lr * grad;
      ++steps;
      return true;
    }
    if (m.size() != theta.size()) {
      m = Vector::Zero(theta.size());
      v = Vector::Zero(theta.size());
    }
    ++steps;
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    return true;
  }
};

struct TrainRecord {
  std::size_t iteration = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double isre = std::numeric_limits<double>::quiet_NaN();
  double l2_error = std::numeric_limits<double>::quiet_NaN();
  double wall_ms = 0.0;
  bool skipped = false;
  double y0 = std::numeric_limits<double>::quiet_NaN();
};

struct TrainConfig {
  LossSpec loss;
  std::size_t batch = 200;
  std::size_t iterations = 0;
  TimeGrid grid;
  std::uint64_t seed = 0;
  LossOptions loss_options;

  /// Metrics every `metric_every` iterations (0 = never) and after the last one.
  std::size_t metric_every = 0;
  TimeGrid eval_grid;  // defaults to `grid` when steps == 0
  std::size_t eval_paths = 1000;
  std::uint64_t eval_seed = 0x5EEDE7A1ULL;
  bool isre = true;
  ControlFn reference;  // enables the L2 column

  /// Called after every record; returning true stops training.
  std::function<bool(const TrainRecord&)> stop;
};

struct TrainState {
  ControlField control;
  double y0 = 0.0;  // moment loss only
  OptimizerState opt;
  std::size_t iteration = 0;
};

struct TrainResult {
  std::vector<TrainRecord> records;
  std::optional<std::string> abort_reason;
  bool stopped_early = false;
};

/// ISRE and L2 columns for the current control.
inline void fill_metrics(TrainRecord& rec, const SdeModel& model, const ControlField& u, const TrainConfig& cfg) {
  const TimeGrid& g = cfg.eval_grid.steps ? cfg.eval_grid : cfg.grid;
  const ControlFn uc = u.bind_constant();
  if (cfg.isre) rec.isre = isre(model, uc, g, cfg.eval_paths, cfg.eval_seed).isre;
  if (cfg.reference) rec.l2_error = l2_error(model, uc, cfg.reference, g, cfg.eval_paths, cfg.eval_seed);
}

/// Runs cfg.iterations steps from state.iteration on. Numerical aborts end the
/// loop and are reported; records up to that point are kept.
inline TrainResult train(const SdeModel& model, TrainState& state, const TrainConfig& cfg) {
  if (needs_two_paths(cfg.loss.kind) && cfg.batch < 2) {
    throw std::invalid_argument(std::string(to_string(cfg.loss.kind)) + " loss needs batch >= 2");
  }
  if (cfg.batch < 1) throw std::invalid_argument("batch size must be positive");
  const bool moment = cfg.loss.kind == LossKind::moment;
  TrainResult out;
  const std::size_t end = state.iteration + cfg.iterations;
  while (state.iteration < end) {
    const std::size_t j = state.iteration;
    const auto t0 = std::chrono::steady_clock::now();
    TrainRecord rec;
    rec.iteration = j;
    try {
      const LossValue lv = evaluate(cfg.loss, model, state.control, state.y0, cfg.grid, cfg.batch,
                                    rng::derive(cfg.seed, j), cfg.loss_options);
      rec.loss = lv.value;
      rec.grad_norm = lv.gradient.norm();
      Vector theta(lv.gradient.size());
      theta.head(static_cast<Eigen::Index>(state.control.size())) = state.control.params();
      if (moment) theta(theta.size() - 1) = state.y0;
      rec.skipped = !state.opt.step(theta, lv.gradient);
      state.control.params() = theta.head(static_cast<Eigen::Index>(state.control.size()));
      if (moment) state.y0 = theta(theta.size() - 1);
      ++state.iteration;
      const bool last = state.iteration == end;
      if (cfg.metric_every && (state.iteration % cfg.metric_every == 0 || last)) {
        fill_metrics(rec, model, state.control, cfg);
      }
    } catch (const NumericalError& e) {
      out.abort_reason = std::string("iteration ") + std::to_string(j) + ": " + e.what();
      return out;
    }
    if (moment) rec.y0 = state.y0;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    out.records.push_back(rec);
    if (cfg.stop && cfg.stop(rec)) {
      out.stopped_early = true;
      break;
    }
  }
  return out;
}

}  // namespace ido
