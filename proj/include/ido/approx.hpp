#pragma once

// Parametric control fields u_theta(x, t): a feed-forward net and a DenseNet on
// the space-time input (x, t), and the time-indexed linear ansatz u = Xi_n x.
//
// The flat parameter vector is packed block by block. Networks: for every
// layer the weight matrix (out x in, row-major) followed by its bias (out).
// Time-indexed linear: Xi_0, ..., Xi_{K-1}, each d x d row-major.

#include "ido/rng.hpp"
#include "ido/sde.hpp"
#include "ido/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ido {

enum class Activation { tanh, relu };
enum class ControlKind { feed_forward, dense_net, time_linear };

inline const char* to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

inline const char* to_string(ControlKind k) {
  switch (k) {
    case ControlKind::feed_forward: return "feed_forward";
    case ControlKind::dense_net: return "dense_net";
    case ControlKind::time_linear: return "time_linear";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

inline ControlKind parse_control_kind(const std::string& s) {
  if (s == "feed_forward") return ControlKind::feed_forward;
  if (s == "dense_net") return ControlKind::dense_net;
  if (s == "time_linear") return ControlKind::time_linear;
  throw std::invalid_argument("unknown architecture '" + s + "'");
}

class ControlField {
 public:
  struct Block {
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    Eigen::Index offset = 0;
    Eigen::Index size() const { return rows * cols; }
  };

  /// (x, t) -> hidden widths -> d, activation on hidden layers only.
  static ControlField feed_forward(std::size_t dim, std::vector<std::size_t> hidden, Activation act) {
    ControlField c(ControlKind::feed_forward, dim, std::move(hidden), act);
    Eigen::Index in = static_cast<Eigen::Index>(dim) + 1;
    for (std::size_t w : c.hidden_) {
      c.add_layer(static_cast<Eigen::Index>(w), in);
      in = static_cast<Eigen::Index>(w);
    }
    c.add_layer(static_cast<Eigen::Index>(dim), in);
    c.params_.setZero(c.size_);
    return c;
  }

  /// Skip connections: every hidden layer sees all previous features.
  static ControlField dense_net(std::size_t dim, std::vector<std::size_t> hidden, Activation act) {
    ControlField c(ControlKind::dense_net, dim, std::move(hidden), act);
    Eigen::Index in = static_cast<Eigen::Index>(dim) + 1;
    for (std::size_t w : c.hidden_) {
      c.add_layer(static_cast<Eigen::Index>(w), in);
      in += static_cast<Eigen::Index>(w);
    }
    c.add_layer(static_cast<Eigen::Index>(dim), in);
    c.params_.setZero(c.size_);
    return c;
  }

  /// u(x, t) = Xi_n x with n = floor(t / dt) clamped to [0, K-1].
  static ControlField time_linear(std::size_t dim, const TimeGrid& grid) {
    if (grid.steps == 0) throw std::invalid_argument("time_linear needs at least one step");
    ControlField c(ControlKind::time_linear, dim, {}, Activation::tanh);
    c.grid_ = grid;
    const auto d = static_cast<Eigen::Index>(dim);
    for (std::size_t n = 0; n < grid.steps; ++n) c.add_block(d, d);
    c.params_.setZero(c.size_);
    return c;
  }

  ControlKind kind() const { return kind_; }
  Activation activation() const { return act_; }
  std::size_t dim() const { return dim_; }
  const std::vector<std::size_t>& hidden() const { return hidden_; }
  const TimeGrid& grid() const { return grid_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  std::size_t size() const { return static_cast<std::size_t>(size_); }

  const Vector& params() const { return params_; }
  Vector& params() { return params_; }

  Vector pack() const { return params_; }
  void unpack(const Vector& theta) {
    if (theta.size() != size_) {
      throw std::invalid_argument("parameter vector has " + std::to_string(theta.size()) +
                                  " entries, control expects " + std::to_string(size_));
    }
    params_ = theta;
  }

  /// Glorot-uniform weights, zero biases; time_linear starts at zero.
  void init(std::uint64_t seed) {
    params_.setZero(size_);
    if (kind_ == ControlKind::time_linear) return;
    const rng::Philox gen(seed);
    for (std::size_t l = 0; l < blocks_.size(); l += 2) {
      const Block& w = blocks_[l];
      const double bound = std::sqrt(6.0 / static_cast<double>(w.rows + w.cols));
      for (Eigen::Index k = 0; k < w.size(); ++k) {
        const auto idx = static_cast<std::uint64_t>(w.offset + k);
        params_(w.offset + k) = bound * (2.0 * rng::uniform(gen, idx, 0, rng::Stream::init_weights) - 1.0);
      }
    }
  }

  /// Registers every block as a parameter slot on `tape` (in packing order) and
  /// returns the control recorded against them.
  ControlFn bind(Tape& tape) const {
    std::vector<Var> vars;
    vars.reserve(blocks_.size());
    for (const Block& b : blocks_) vars.push_back(tape.parameter(block_matrix(b)));
    return make_fn(std::move(vars));
  }

  /// Same field with parameters as untracked constants.
  ControlFn bind_constant() const {
    std::vector<Var> vars;
    vars.reserve(blocks_.size());
    for (const Block& b : blocks_) vars.push_back(constant(block_matrix(b)));
    return make_fn(std::move(vars));
  }

  Matrix eval(const Matrix& x, double t) const { return bind_constant()(constant(x), t).value(); }

  Vector eval_point(const Vector& x, double t) const {
    return eval(Matrix(x.transpose()), t).row(0).transpose();
  }

  Matrix block_matrix(const Block& b) const {
    return Eigen::Map<const Matrix>(params_.data() + b.offset, b.rows, b.cols);
  }

  /// Architecture summary, e.g. "dense_net tanh d=1 hidden=30,30".
  std::string describe() const {
    std::string s = std::string(to_string(kind_)) + " d=" + std::to_string(dim_);
    if (kind_ == ControlKind::time_linear) return s + " steps=" + std::to_string(grid_.steps);
    s += std::string(" ") + to_string(act_) + " hidden=";
    for (std::size_t i = 0; i < hidden_.size(); ++i) s += (i ? "," : "") + std::to_string(hidden_[i]);
    return s;
  }

  /// Optional fixed control added to the network output: u = base + u_theta.
  /// Not part of the parameters and not written to checkpoints.
  void set_offset(ControlFn base) { offset_ = std::move(base); }
  const ControlFn& offset() const { return offset_; }

  bool same_architecture(const ControlField& o) const {
    if (kind_ != o.kind_ || dim_ != o.dim_ || size_ != o.size_) return false;
    if (kind_ == ControlKind::time_linear) return grid_.steps == o.grid_.steps;
    return act_ == o.act_ && hidden_ == o.hidden_;
  }

 private:
  ControlField(ControlKind kind, std::size_t dim, std::vector<std::size_t> hidden, Activation act)
      : kind_(kind), act_(act), dim_(dim), hidden_(std::move(hidden)) {
    if (dim == 0) throw std::invalid_argument("control dimension must be positive");
    for (std::size_t w : hidden_) {
      if (w == 0) throw std::invalid_argument("hidden layer widths must be >= 1");
    }
  }

  void add_block(Eigen::Index rows, Eigen::Index cols) {
    blocks_.push_back({rows, cols, size_});
    size_ += rows * cols;
    params_.conservativeResize(size_);
  }

  void add_layer(Eigen::Index out, Eigen::Index in) {
    add_block(out, in);
    add_block(1, out);
  }

  ControlFn make_fn(std::vector<Var> vars) const {
    ControlFn fn = make_raw_fn(std::move(vars));
    if (!offset_) return fn;
    return [base = offset_, fn = std::move(fn)](const Var& x, double t) { return add(base(x, t), fn(x, t)); };
  }

  ControlFn make_raw_fn(std::vector<Var> vars) const {
    const auto d = static_cast<Eigen::Index>(dim_);
    if (kind_ == ControlKind::time_linear) {
      return [vars = std::move(vars), d, grid = grid_](const Var& x, double t) {
        if (x.cols() != d) {
          throw ShapeError("control expects " + std::to_string(d) + " state components, got " +
                           std::to_string(x.cols()));
        }
        auto n = static_cast<long long>(std::floor(t / grid.dt + 1e-9));
        n = std::clamp<long long>(n, 0, static_cast<long long>(grid.steps) - 1);
        return affine(x, vars[static_cast<std::size_t>(n)]);
      };
    }
    const bool dense = kind_ == ControlKind::dense_net;
    return [this_act = act_, vars = std::move(vars), d, dense](const Var& x, double t) {
      if (x.cols() != d) {
        throw ShapeError("control expects " + std::to_string(d) + " state components, got " +
                         std::to_string(x.cols()));
      }
      Var h = concat(x, filled(x.rows(), 1, t));
      const std::size_t layers = vars.size() / 2;
      for (std::size_t l = 0; l + 1 < layers; ++l) {
        Var z = affine(h, vars[2 * l], vars[2 * l + 1]);
        Var y = this_act == Activation::tanh ? tanh(z) : relu(z);
        h = dense ? concat(h, y) : y;
      }
      return affine(h, vars[2 * (layers - 1)], vars[2 * (layers - 1) + 1]);
    };
  }

  ControlKind kind_;
  Activation act_;
  std::size_t dim_;
  std::vector<std::size_t> hidden_;
  TimeGrid grid_;
  std::vector<Block> blocks_;
  Eigen::Index size_ = 0;
  Vector params_;
  ControlFn offset_;
};

/// State-independent control u(x, t) = c(t), broadcast over the batch.
inline ControlFn time_only_control(std::function<Vector(double)> c) {
  return [c = std::move(c)](const Var& x, double t) {
    const Vector v = c(t);
    if (v.size() != x.cols()) throw ShapeError("time-only control has wrong dimension");
    return constant(Matrix(v.transpose().replicate(x.rows(), 1)));
  };
}

}  // namespace ido
