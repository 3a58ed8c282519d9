#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Var is a handle to a node holding an (rows x cols) value. Batched path
// data uses rows for the path index and columns for the state components,
// so every primitive below is written for matrices and a scalar is a 1x1.
//
// Only nodes that depend on a trainable leaf are recorded on a Tape. Pure
// constants carry no history, so simulations without parameters release
// their intermediate values as soon as the handles go out of scope.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ido {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Op : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  div,
  matmul,  // a (r x k) * b (k x c); matrix-vector products are the c == 1 case
  dot,     // sum of elementwise products -> 1x1
  row_dot, // per-row dot product -> r x 1
  sum,
  row_sum,
  mean,
  square,
  sqrt,
  exp,
  log,
  tanh,
  relu,
  concat, // column-wise
  scale,
  affine, // x W^T + b, with b broadcast over rows
  detach,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::matmul: return "matmul";
    case Op::dot: return "dot";
    case Op::row_dot: return "row_dot";
    case Op::sum: return "sum";
    case Op::row_sum: return "row_sum";
    case Op::mean: return "mean";
    case Op::square: return "square";
    case Op::sqrt: return "sqrt";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::tanh: return "tanh";
    case Op::relu: return "relu";
    case Op::concat: return "concat";
    case Op::scale: return "scale";
    case Op::affine: return "affine";
    case Op::detach: return "detach";
  }
  return "?";
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tape;

namespace detail {

struct Node {
  Matrix value;
  Matrix adjoint;  // sized lazily during the reverse sweep
  Op op = Op::leaf;
  double scalar = 0.0;
  bool requires_grad = false;
  Tape* tape = nullptr;
  std::vector<std::shared_ptr<Node>> parents;
};

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace detail

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool empty() const { return !node_; }
  Op op() const { return node_->op; }
  Tape* tape() const { return node_ ? node_->tape : nullptr; }

  /// Value of a 1x1 node.
  double item() const {
    if (rows() != 1 || cols() != 1) {
      throw ShapeError("item() on non-scalar node of shape " + detail::shape_str(value()));
    }
    return node_->value(0, 0);
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Untracked value. Never receives an adjoint.
inline Var constant(Matrix value) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

inline Var constant(double value) {
  Matrix m(1, 1);
  m(0, 0) = value;
  return constant(std::move(m));
}

inline Var filled(Eigen::Index rows, Eigen::Index cols, double value) {
  return constant(Matrix::Constant(rows, cols, value));
}

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a trainable leaf. Slots are numbered in registration order.
  Var parameter(Matrix value) {
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    node->tape = this;
    nodes_.push_back(node);
    params_.push_back(node);
    return Var(std::move(node));
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t parameter_slots() const { return params_.size(); }

  /// Total scalar count over all parameter slots.
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  /// Reverse sweep from a scalar root. Returns the flat gradient over all
  /// parameter slots, each slot flattened row-major, in registration order.
  Vector backward(const Var& root);

  void record(const std::shared_ptr<detail::Node>& node) { nodes_.push_back(node); }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  std::vector<std::shared_ptr<detail::Node>> params_;
};

namespace detail {

enum class Broadcast { none, scalar, row, col };

// How `small` expands to (rows x cols).
inline Broadcast broadcast_kind(const Matrix& small, Eigen::Index rows, Eigen::Index cols) {
  if (small.rows() == rows && small.cols() == cols) return Broadcast::none;
  if (small.rows() == 1 && small.cols() == 1) return Broadcast::scalar;
  if (small.rows() == 1 && small.cols() == cols) return Broadcast::row;
  if (small.cols() == 1 && small.rows() == rows) return Broadcast::col;
  throw ShapeError("cannot broadcast");
}

inline Matrix expand(const Matrix& m, Eigen::Index rows, Eigen::Index cols) {
  switch (broadcast_kind(m, rows, cols)) {
    case Broadcast::none: return m;
    case Broadcast::scalar: return Matrix::Constant(rows, cols, m(0, 0));
    case Broadcast::row: return m.replicate(rows, 1);
    case Broadcast::col: return m.replicate(1, cols);
  }
  return m;
}

// Sums an adjoint of the broadcast shape back down to `target`'s shape.
inline Matrix reduce_to(const Matrix& g, const Matrix& target) {
  switch (broadcast_kind(target, g.rows(), g.cols())) {
    case Broadcast::none: return g;
    case Broadcast::scalar: return Matrix::Constant(1, 1, g.sum());
    case Broadcast::row: return g.colwise().sum();
    case Broadcast::col: return g.rowwise().sum();
  }
  return g;
}

inline std::pair<Eigen::Index, Eigen::Index> binary_shape(Op op, const Matrix& a, const Matrix& b) {
  const Eigen::Index r = std::max(a.rows(), b.rows());
  const Eigen::Index c = std::max(a.cols(), b.cols());
  try {
    broadcast_kind(a, r, c);
    broadcast_kind(b, r, c);
  } catch (const ShapeError&) {
    throw ShapeError(std::string("shape mismatch in ") + op_name(op) + ": " + shape_str(a) +
                     " vs " + shape_str(b));
  }
  return {r, c};
}

inline void accumulate(Node& node, const Matrix& g) {
  if (!node.requires_grad) return;
  if (node.adjoint.size() == 0) {
    node.adjoint = g;
  } else {
    node.adjoint += g;
  }
}

inline Var make_node(Op op, Matrix value, std::initializer_list<Var> inputs, double scalar = 0.0) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  node->scalar = scalar;
  Tape* tape = nullptr;
  for (const auto& in : inputs) {
    if (!in.requires_grad()) continue;
    if (tape != nullptr && in.tape() != tape) {
      throw std::invalid_argument(std::string("inputs of ") + op_name(op) +
                                  " are recorded on different tapes");
    }
    tape = in.tape();
  }
  if (tape != nullptr && op != Op::detach) {
    node->requires_grad = true;
    node->tape = tape;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    tape->record(node);
  }
  return Var(std::move(node));
}

inline Var make_node_list(Op op, Matrix value, std::span<const Var> inputs) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  Tape* tape = nullptr;
  for (const auto& in : inputs) {
    if (!in.requires_grad()) continue;
    if (tape != nullptr && in.tape() != tape) {
      throw std::invalid_argument(std::string("inputs of ") + op_name(op) +
                                  " are recorded on different tapes");
    }
    tape = in.tape();
  }
  if (tape != nullptr) {
    node->requires_grad = true;
    node->tape = tape;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    tape->record(node);
  }
  return Var(std::move(node));
}

// Propagates node.adjoint into its parents.
inline void reverse_rule(Node& node) {
  const Matrix& g = node.adjoint;
  auto& p = node.parents;
  switch (node.op) {
    case Op::leaf:
    case Op::detach:
      break;
    case Op::add:
      if (p[0]->requires_grad) accumulate(*p[0], reduce_to(g, p[0]->value));
      if (p[1]->requires_grad) accumulate(*p[1], reduce_to(g, p[1]->value));
      break;
    case Op::sub:
      if (p[0]->requires_grad) accumulate(*p[0], reduce_to(g, p[0]->value));
      if (p[1]->requires_grad) accumulate(*p[1], reduce_to(-g, p[1]->value));
      break;
    case Op::mul: {
      const Eigen::Index r = g.rows(), c = g.cols();
      if (p[0]->requires_grad) {
        Matrix prod = g.cwiseProduct(expand(p[1]->value, r, c));
        accumulate(*p[0], reduce_to(prod, p[0]->value));
      }
      if (p[1]->requires_grad) {
        Matrix prod = g.cwiseProduct(expand(p[0]->value, r, c));
        accumulate(*p[1], reduce_to(prod, p[1]->value));
      }
      break;
    }
    case Op::div: {
      const Eigen::Index r = g.rows(), c = g.cols();
      const Matrix b = expand(p[1]->value, r, c);
      if (p[0]->requires_grad) {
        Matrix q = g.cwiseQuotient(b);
        accumulate(*p[0], reduce_to(q, p[0]->value));
      }
      if (p[1]->requires_grad) {
        // d(a/b)/db = -(a/b)/b
        Matrix q = -(g.cwiseProduct(node.value)).cwiseQuotient(b);
        accumulate(*p[1], reduce_to(q, p[1]->value));
      }
      break;
    }
    case Op::matmul:
      if (p[0]->requires_grad) accumulate(*p[0], g * p[1]->value.transpose());
      if (p[1]->requires_grad) accumulate(*p[1], p[0]->value.transpose() * g);
      break;
    case Op::dot: {
      const double s = g(0, 0);
      if (p[0]->requires_grad) accumulate(*p[0], s * p[1]->value);
      if (p[1]->requires_grad) accumulate(*p[1], s * p[0]->value);
      break;
    }
    case Op::row_dot:
      if (p[0]->requires_grad) {
        accumulate(*p[0], (p[1]->value.array().colwise() * g.col(0).array()).matrix());
      }
      if (p[1]->requires_grad) {
        accumulate(*p[1], (p[0]->value.array().colwise() * g.col(0).array()).matrix());
      }
      break;
    case Op::sum:
      accumulate(*p[0], Matrix::Constant(p[0]->value.rows(), p[0]->value.cols(), g(0, 0)));
      break;
    case Op::mean: {
      const double n = static_cast<double>(p[0]->value.size());
      accumulate(*p[0], Matrix::Constant(p[0]->value.rows(), p[0]->value.cols(), g(0, 0) / n));
      break;
    }
    case Op::row_sum:
      accumulate(*p[0], g.replicate(1, p[0]->value.cols()));
      break;
    case Op::square:
      accumulate(*p[0], 2.0 * g.cwiseProduct(p[0]->value));
      break;
    case Op::sqrt:
      accumulate(*p[0], (0.5 * g.array() / node.value.array()).matrix());
      break;
    case Op::exp:
      accumulate(*p[0], g.cwiseProduct(node.value));
      break;
    case Op::log:
      accumulate(*p[0], g.cwiseQuotient(p[0]->value));
      break;
    case Op::tanh:
      accumulate(*p[0], (g.array() * (1.0 - node.value.array().square())).matrix());
      break;
    case Op::relu:
      // subgradient 0 at the kink
      accumulate(*p[0], (g.array() * (p[0]->value.array() > 0.0).cast<double>()).matrix());
      break;
    case Op::concat: {
      Eigen::Index col = 0;
      for (auto& parent : p) {
        const Eigen::Index w = parent->value.cols();
        if (parent->requires_grad) accumulate(*parent, g.middleCols(col, w));
        col += w;
      }
      break;
    }
    case Op::scale:
      accumulate(*p[0], node.scalar * g);
      break;
    case Op::affine: {
      const Matrix& x = p[0]->value;
      const Matrix& w = p[1]->value;
      if (p[0]->requires_grad) accumulate(*p[0], g * w);
      if (p[1]->requires_grad) accumulate(*p[1], g.transpose() * x);
      if (p.size() > 2 && p[2]->requires_grad) accumulate(*p[2], g.colwise().sum());
      break;
    }
  }
}

}  // namespace detail

inline Vector Tape::backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw ShapeError("backward() requires a scalar root, got " + detail::shape_str(root.value()));
  }
  Vector grad = Vector::Zero(static_cast<Eigen::Index>(parameter_count()));
  if (!root.requires_grad()) return grad;
  if (root.tape() != this) throw std::invalid_argument("backward() root belongs to another tape");

  for (auto& node : nodes_) node->adjoint.resize(0, 0);
  root.node()->adjoint = Matrix::Ones(1, 1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node& node = **it;
    if (node.adjoint.size() == 0 || node.op == Op::leaf) continue;
    detail::reverse_rule(node);
    node.adjoint.resize(0, 0);
  }

  Eigen::Index offset = 0;
  for (const auto& p : params_) {
    const Eigen::Index n = p->value.size();
    if (p->adjoint.size() != 0) {
      grad.segment(offset, n) = Eigen::Map<const Vector>(p->adjoint.data(), n);
    }
    offset += n;
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Primitives

inline Var add(const Var& a, const Var& b) {
  auto [r, c] = detail::binary_shape(Op::add, a.value(), b.value());
  Matrix v = detail::expand(a.value(), r, c);
  v += detail::expand(b.value(), r, c);
  return detail::make_node(Op::add, std::move(v), {a, b});
}

inline Var sub(const Var& a, const Var& b) {
  auto [r, c] = detail::binary_shape(Op::sub, a.value(), b.value());
  Matrix v = detail::expand(a.value(), r, c);
  v -= detail::expand(b.value(), r, c);
  return detail::make_node(Op::sub, std::move(v), {a, b});
}

inline Var mul(const Var& a, const Var& b) {
  auto [r, c] = detail::binary_shape(Op::mul, a.value(), b.value());
  Matrix v = detail::expand(a.value(), r, c).cwiseProduct(detail::expand(b.value(), r, c));
  return detail::make_node(Op::mul, std::move(v), {a, b});
}

inline Var div(const Var& a, const Var& b) {
  auto [r, c] = detail::binary_shape(Op::div, a.value(), b.value());
  Matrix v = detail::expand(a.value(), r, c).cwiseQuotient(detail::expand(b.value(), r, c));
  return detail::make_node(Op::div, std::move(v), {a, b});
}

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("shape mismatch in matmul: " + detail::shape_str(a.value()) + " vs " +
                     detail::shape_str(b.value()));
  }
  return detail::make_node(Op::matmul, a.value() * b.value(), {a, b});
}

inline Var dot(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("shape mismatch in dot: " + detail::shape_str(a.value()) + " vs " +
                     detail::shape_str(b.value()));
  }
  Matrix v(1, 1);
  v(0, 0) = a.value().cwiseProduct(b.value()).sum();
  return detail::make_node(Op::dot, std::move(v), {a, b});
}

inline Var row_dot(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("shape mismatch in row_dot: " + detail::shape_str(a.value()) + " vs " +
                     detail::shape_str(b.value()));
  }
  Matrix v = a.value().cwiseProduct(b.value()).rowwise().sum();
  return detail::make_node(Op::row_dot, std::move(v), {a, b});
}

inline Var sum(const Var& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return detail::make_node(Op::sum, std::move(v), {a});
}

inline Var row_sum(const Var& a) {
  Matrix v = a.value().rowwise().sum();
  return detail::make_node(Op::row_sum, std::move(v), {a});
}

inline Var mean(const Var& a) {
  if (a.value().size() == 0) throw ShapeError("mean of empty node");
  Matrix v(1, 1);
  v(0, 0) = a.value().mean();
  return detail::make_node(Op::mean, std::move(v), {a});
}

inline Var square(const Var& a) {
  return detail::make_node(Op::square, a.value().array().square().matrix(), {a});
}

inline Var sqrt(const Var& a) {
  return detail::make_node(Op::sqrt, a.value().array().sqrt().matrix(), {a});
}

inline Var exp(const Var& a) {
  return detail::make_node(Op::exp, a.value().array().exp().matrix(), {a});
}

inline Var log(const Var& a) {
  return detail::make_node(Op::log, a.value().array().log().matrix(), {a});
}

inline Var tanh(const Var& a) {
  return detail::make_node(Op::tanh, a.value().array().tanh().matrix(), {a});
}

inline Var relu(const Var& a) {
  return detail::make_node(Op::relu, a.value().cwiseMax(0.0), {a});
}

inline Var scale(const Var& a, double factor) {
  return detail::make_node(Op::scale, factor * a.value(), {a}, factor);
}

inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat of zero inputs");
  const Eigen::Index r = parts.front().rows();
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) {
      throw ShapeError("shape mismatch in concat: " + detail::shape_str(parts.front().value()) +
                       " vs " + detail::shape_str(p.value()));
    }
    c += p.cols();
  }
  Matrix v(r, c);
  Eigen::Index col = 0;
  for (const auto& p : parts) {
    v.middleCols(col, p.cols()) = p.value();
    col += p.cols();
  }
  return detail::make_node_list(Op::concat, std::move(v), parts);
}

inline Var concat(const Var& a, const Var& b) {
  const Var parts[] = {a, b};
  return concat(std::span<const Var>(parts));
}

/// x W^T + b. `bias` may be an empty Var.
inline Var affine(const Var& x, const Var& weight, const Var& bias = Var()) {
  if (x.cols() != weight.cols()) {
    throw ShapeError("shape mismatch in affine: input " + detail::shape_str(x.value()) +
                     " vs weight " + detail::shape_str(weight.value()));
  }
  Matrix v = x.value() * weight.value().transpose();
  if (bias.empty()) return detail::make_node(Op::affine, std::move(v), {x, weight});
  if (bias.rows() != 1 || bias.cols() != weight.rows()) {
    throw ShapeError("shape mismatch in affine: bias " + detail::shape_str(bias.value()) +
                     " vs weight " + detail::shape_str(weight.value()));
  }
  v.rowwise() += bias.value().row(0);
  return detail::make_node(Op::affine, std::move(v), {x, weight, bias});
}

/// Same value, no gradient flows back through the result.
inline Var detach(const Var& a) {
  if (!a.requires_grad()) return a;
  return detail::make_node(Op::detach, a.value(), {a});
}

/// Generic entry point keyed by op tag. `factor` is used by scale only.
inline Var primitive(Op op, std::span<const Var> in, double factor = 0.0) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw std::invalid_argument(std::string(op_name(op)) + " expects " + std::to_string(n) +
                                  " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (op) {
    case Op::add: need(2); return add(in[0], in[1]);
    case Op::sub: need(2); return sub(in[0], in[1]);
    case Op::mul: need(2); return mul(in[0], in[1]);
    case Op::div: need(2); return div(in[0], in[1]);
    case Op::matmul: need(2); return matmul(in[0], in[1]);
    case Op::dot: need(2); return dot(in[0], in[1]);
    case Op::row_dot: need(2); return row_dot(in[0], in[1]);
    case Op::sum: need(1); return sum(in[0]);
    case Op::row_sum: need(1); return row_sum(in[0]);
    case Op::mean: need(1); return mean(in[0]);
    case Op::square: need(1); return square(in[0]);
    case Op::sqrt: need(1); return sqrt(in[0]);
    case Op::exp: need(1); return exp(in[0]);
    case Op::log: need(1); return log(in[0]);
    case Op::tanh: need(1); return tanh(in[0]);
    case Op::relu: need(1); return relu(in[0]);
    case Op::concat: return concat(in);
    case Op::scale: need(1); return scale(in[0], factor);
    case Op::affine:
      if (in.size() == 2) return affine(in[0], in[1]);
      need(3);
      return affine(in[0], in[1], in[2]);
    case Op::detach: need(1); return detach(in[0]);
    case Op::leaf: break;
  }
  throw std::invalid_argument("leaf is not a primitive");
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator-(const Var& a) { return scale(a, -1.0); }

}  // namespace ido
