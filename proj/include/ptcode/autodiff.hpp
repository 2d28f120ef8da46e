#pragma once

#include "ptcode/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptcode {

// Handle to a node on a Tape. Only meaningful for the tape that created it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

namespace detail {

template <class S>
S sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  S e = std::exp(x);
  return e / (S(1) + e);
}

// ln(1 + e^x) without overflow.
template <class S>
S softplus(S x) {
  return x > S(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace detail

// Reverse-mode differentiation over vector-valued nodes.
//
// A tape records one forward pass. Nodes are appended in evaluation order, so
// the recorded graph is acyclic by construction and backward() is a single
// reverse sweep. Parameters live in a ParameterStore; backward() accumulates
// into Parameter::grad for trainable tensors only, so frozen tensors never
// receive a gradient.
template <class S>
class Tape {
 public:
  using Vector = Vec<S>;

  explicit Tape(ParameterStore<S>& store) : store_(&store), mutable_store_(&store) {}

  // Forward-only tape; backward() throws. Several of these may read one store
  // concurrently.
  explicit Tape(const ParameterStore<S>& store) : store_(&store) {}

  const ParameterStore<S>& store() const { return *store_; }

  std::size_t node_count() const { return nodes_.size(); }

  const Vector& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }

  S scalar(Var v) const {
    const auto& x = value(v);
    if (x.size() != 1) throw std::invalid_argument("Tape::scalar: node is not scalar");
    return x(0);
  }

  // ---- leaves ------------------------------------------------------------

  Var constant(Vector v) { return push(Op::Constant, std::move(v)); }

  Var zeros(std::size_t n) { return constant(Vector::Zero(static_cast<Eigen::Index>(n))); }

  /// The whole tensor, flattened row-major, as a vector node.
  Var param(ParamId id) {
    const auto& p = (*store_)[id];
    Vector v = Eigen::Map<const Vector>(p.value.data(), p.value.size());
    Var out = push(Op::Param, std::move(v));
    node(out).param = id.index;
    return out;
  }

  /// Row `row` of a matrix parameter (embedding lookup).
  Var lookup(ParamId table, std::size_t row) {
    const auto& p = (*store_)[table];
    if (row >= static_cast<std::size_t>(p.value.rows()))
      throw std::out_of_range("Tape::lookup: row " + std::to_string(row) + " outside " + p.name);
    Vector v = p.value.row(static_cast<Eigen::Index>(row)).transpose();
    Var out = push(Op::Lookup, std::move(v));
    node(out).param = table.index;
    node(out).index = static_cast<std::int64_t>(row);
    return out;
  }

  // ---- linear algebra ----------------------------------------------------

  /// W x for a matrix parameter W.
  Var matvec(ParamId w, Var x) {
    const auto& p = (*store_)[w];
    const auto& xv = value(x);
    if (p.value.cols() != xv.size())
      throw std::invalid_argument("Tape::matvec: " + p.name + " has " + std::to_string(p.value.cols()) +
                                  " columns, input has " + std::to_string(xv.size()));
    Vector v(p.value.rows());
    v.noalias() = p.value * xv;
    Var out = push(Op::MatVec, std::move(v), x);
    node(out).param = w.index;
    return out;
  }

  /// W x + b.
  Var affine(ParamId w, Var x, ParamId b) { return add(matvec(w, x), param(b)); }

  Var add(Var a, Var b) {
    same_size(a, b, "add");
    return push(Op::Add, value(a) + value(b), a, b);
  }

  Var sub(Var a, Var b) {
    same_size(a, b, "sub");
    return push(Op::Sub, value(a) - value(b), a, b);
  }

  /// Element-wise product.
  Var mul(Var a, Var b) {
    same_size(a, b, "mul");
    return push(Op::Mul, value(a).cwiseProduct(value(b)), a, b);
  }

  Var scale(Var a, S c) {
    Var out = push(Op::Scale, value(a) * c, a);
    node(out).coef = c;
    return out;
  }

  Var neg(Var a) { return scale(a, S(-1)); }

  /// Element-wise product with a constant mask (dropout).
  Var mask(Var a, Vector m) {
    if (m.size() != value(a).size()) throw std::invalid_argument("Tape::mask: size mismatch");
    Var out = push(Op::Mask, value(a).cwiseProduct(m), a);
    node(out).aux = std::move(m);
    return out;
  }

  /// aᵀb as a 1-element node.
  Var dot(Var a, Var b) {
    same_size(a, b, "dot");
    Vector v(1);
    v(0) = value(a).dot(value(b));
    return push(Op::Dot, std::move(v), a, b);
  }

  Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

  Var concat(std::span<const Var> parts) {
    Eigen::Index n = 0;
    for (Var p : parts) n += value(p).size();
    Vector v(n);
    Eigen::Index at = 0;
    for (Var p : parts) {
      const auto& pv = value(p);
      v.segment(at, pv.size()) = pv;
      at += pv.size();
    }
    Var out = push(Op::Concat, std::move(v));
    set_inputs(out, parts);
    return out;
  }

  // ---- non-linearities ---------------------------------------------------

  Var tanh(Var a) { return push(Op::Tanh, value(a).array().tanh().matrix(), a); }

  Var sigmoid(Var a) {
    return push(Op::Sigmoid, value(a).unaryExpr([](S x) { return detail::sigmoid(x); }), a);
  }

  /// ln σ(x) computed as −softplus(−x).
  Var log_sigmoid(Var a) {
    return push(Op::LogSigmoid, value(a).unaryExpr([](S x) { return -detail::softplus(-x); }), a);
  }

  Var log_softmax(Var a) {
    const auto& x = value(a);
    S m = x.maxCoeff();
    S lse = m + std::log((x.array() - m).exp().sum());
    return push(Op::LogSoftmax, (x.array() - lse).matrix(), a);
  }

  /// max(x, floor) element-wise; zero gradient where clamped.
  Var clamp_min(Var a, S floor) {
    Var out = push(Op::ClampMin, value(a).cwiseMax(floor), a);
    node(out).coef = floor;
    return out;
  }

  /// Element i as a 1-element node.
  Var pick(Var a, std::size_t i) {
    const auto& x = value(a);
    if (i >= static_cast<std::size_t>(x.size())) throw std::out_of_range("Tape::pick");
    Vector v(1);
    v(0) = x(static_cast<Eigen::Index>(i));
    Var out = push(Op::Pick, std::move(v), a);
    node(out).index = static_cast<std::int64_t>(i);
    return out;
  }

  // ---- reductions over sequences -----------------------------------------

  /// Element-wise maximum over equally sized vectors. Ties go to the earliest
  /// element; the backward pass routes each coordinate's gradient to that
  /// element only.
  Var max_pool(std::span<const Var> xs) {
    require_nonempty(xs, "max_pool");
    const auto n = value(xs[0]).size();
    Vector v = value(xs[0]);
    std::vector<int> arg(static_cast<std::size_t>(n), 0);
    for (std::size_t t = 1; t < xs.size(); ++t) {
      const auto& x = value(xs[t]);
      if (x.size() != n) throw std::invalid_argument("Tape::max_pool: size mismatch");
      for (Eigen::Index i = 0; i < n; ++i) {
        if (x(i) > v(i)) {
          v(i) = x(i);
          arg[static_cast<std::size_t>(i)] = static_cast<int>(t);
        }
      }
    }
    Var out = push(Op::MaxPool, std::move(v));
    set_inputs(out, xs);
    node(out).argmax = arg;
    argmax_trace_.insert(argmax_trace_.end(), arg.begin(), arg.end());
    return out;
  }

  Var mean_pool(std::span<const Var> xs) {
    require_nonempty(xs, "mean_pool");
    Vector v = Vector::Zero(value(xs[0]).size());
    for (Var x : xs) {
      if (value(x).size() != v.size()) throw std::invalid_argument("Tape::mean_pool: size mismatch");
      v += value(x);
    }
    v /= static_cast<S>(xs.size());
    Var out = push(Op::MeanPool, std::move(v));
    set_inputs(out, xs);
    return out;
  }

  /// Σ_i xs[i] (all the same size).
  Var sum(std::span<const Var> xs) {
    require_nonempty(xs, "sum");
    Vector v = Vector::Zero(value(xs[0]).size());
    for (Var x : xs) {
      if (value(x).size() != v.size()) throw std::invalid_argument("Tape::sum: size mismatch");
      v += value(x);
    }
    Var out = push(Op::Sum, std::move(v));
    set_inputs(out, xs);
    return out;
  }

  /// Argmax choices of every max_pool recorded so far, in recording order.
  const std::vector<int>& argmax_trace() const { return argmax_trace_; }

  // ---- backward ----------------------------------------------------------

  /// Accumulates d(loss)/d(param) into every trainable parameter's grad.
  /// Gradients add to whatever is already there; call store().zero_grad()
  /// between independent steps.
  void backward(Var loss) {
    if (value(loss).size() != 1) throw std::invalid_argument("Tape::backward: loss must be scalar");
    if (!mutable_store_) throw std::logic_error("Tape::backward: tape was built over a const store");
    std::vector<Vector> g(nodes_.size());
    g[static_cast<std::size_t>(loss.id)] = Vector::Ones(1);
    for (int i = loss.id; i >= 0; --i) {
      auto& gi = g[static_cast<std::size_t>(i)];
      if (gi.size() == 0) continue;
      const Node& n = nodes_[static_cast<std::size_t>(i)];
      switch (n.op) {
        case Op::Constant:
          break;
        case Op::Param: {
          auto& p = mutable_store_->all()[n.param];
          if (p.trainable) Eigen::Map<Vector>(p.grad.data(), p.grad.size()) += gi;
          break;
        }
        case Op::Lookup: {
          auto& p = mutable_store_->all()[n.param];
          if (p.trainable) p.grad.row(static_cast<Eigen::Index>(n.index)) += gi.transpose();
          break;
        }
        case Op::MatVec: {
          auto& p = mutable_store_->all()[n.param];
          if (p.trainable) p.grad.noalias() += gi * value(Var{n.a}).transpose();
          Vector dx(p.value.cols());
          dx.noalias() = p.value.transpose() * gi;
          accumulate(g, n.a, dx);
          break;
        }
        case Op::Add:
          accumulate(g, n.a, gi);
          accumulate(g, n.b, gi);
          break;
        case Op::Sub:
          accumulate(g, n.a, gi);
          accumulate(g, n.b, -gi);
          break;
        case Op::Mul:
          accumulate(g, n.a, gi.cwiseProduct(value(Var{n.b})));
          accumulate(g, n.b, gi.cwiseProduct(value(Var{n.a})));
          break;
        case Op::Scale:
          accumulate(g, n.a, gi * n.coef);
          break;
        case Op::Mask:
          accumulate(g, n.a, gi.cwiseProduct(n.aux));
          break;
        case Op::Dot:
          accumulate(g, n.a, value(Var{n.b}) * gi(0));
          accumulate(g, n.b, value(Var{n.a}) * gi(0));
          break;
        case Op::Concat: {
          Eigen::Index at = 0;
          for (int in : n.inputs) {
            auto len = value(Var{in}).size();
            accumulate(g, in, gi.segment(at, len));
            at += len;
          }
          break;
        }
        case Op::Tanh:
          accumulate(g, n.a, gi.cwiseProduct((S(1) - n.value.array().square()).matrix()));
          break;
        case Op::Sigmoid:
          accumulate(g, n.a, gi.cwiseProduct((n.value.array() * (S(1) - n.value.array())).matrix()));
          break;
        case Op::LogSigmoid: {
          // d/dx ln σ(x) = σ(−x)
          Vector d = value(Var{n.a}).unaryExpr([](S x) { return detail::sigmoid(-x); });
          accumulate(g, n.a, gi.cwiseProduct(d));
          break;
        }
        case Op::LogSoftmax: {
          Vector p = n.value.array().exp().matrix();
          accumulate(g, n.a, gi - p * gi.sum());
          break;
        }
        case Op::ClampMin: {
          const auto& x = value(Var{n.a});
          Vector d = gi;
          for (Eigen::Index k = 0; k < d.size(); ++k)
            if (x(k) < n.coef) d(k) = S(0);
          accumulate(g, n.a, d);
          break;
        }
        case Op::Pick: {
          Vector d = Vector::Zero(value(Var{n.a}).size());
          d(static_cast<Eigen::Index>(n.index)) = gi(0);
          accumulate(g, n.a, d);
          break;
        }
        case Op::MaxPool: {
          for (std::size_t t = 0; t < n.inputs.size(); ++t) {
            Vector d = Vector::Zero(gi.size());
            bool any = false;
            for (Eigen::Index k = 0; k < gi.size(); ++k) {
              if (n.argmax[static_cast<std::size_t>(k)] == static_cast<int>(t)) {
                d(k) = gi(k);
                any = true;
              }
            }
            if (any) accumulate(g, n.inputs[t], d);
          }
          break;
        }
        case Op::MeanPool: {
          Vector d = gi / static_cast<S>(n.inputs.size());
          for (int in : n.inputs) accumulate(g, in, d);
          break;
        }
        case Op::Sum:
          for (int in : n.inputs) accumulate(g, in, gi);
          break;
      }
      gi.resize(0);
    }
  }

 private:
  enum class Op : std::uint8_t {
    Constant,
    Param,
    Lookup,
    MatVec,
    Add,
    Sub,
    Mul,
    Scale,
    Mask,
    Dot,
    Concat,
    Tanh,
    Sigmoid,
    LogSigmoid,
    LogSoftmax,
    ClampMin,
    Pick,
    MaxPool,
    MeanPool,
    Sum,
  };

  struct Node {
    Op op = Op::Constant;
    int a = -1;
    int b = -1;
    std::size_t param = 0;
    std::int64_t index = 0;
    S coef = S(0);
    std::vector<int> inputs;
    std::vector<int> argmax;
    Vector aux;
    Vector value;
  };

  Var push(Op op, Vector v, Var a = {}, Var b = {}) {
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    n.value = std::move(v);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }

  void set_inputs(Var out, std::span<const Var> xs) {
    auto& in = node(out).inputs;
    in.clear();
    for (Var x : xs) in.push_back(x.id);
  }

  void same_size(Var a, Var b, const char* what) const {
    if (value(a).size() != value(b).size())
      throw std::invalid_argument(std::string("Tape::") + what + ": size mismatch " +
                                  std::to_string(value(a).size()) + " vs " + std::to_string(value(b).size()));
  }

  static void require_nonempty(std::span<const Var> xs, const char* what) {
    if (xs.empty()) throw std::invalid_argument(std::string("Tape::") + what + ": empty input");
  }

  template <class Expr>
  static void accumulate(std::vector<Vector>& g, int target, const Expr& d) {
    auto& slot = g[static_cast<std::size_t>(target)];
    if (slot.size() == 0)
      slot = d;
    else
      slot += d;
  }

  const ParameterStore<S>* store_;
  ParameterStore<S>* mutable_store_ = nullptr;
  std::vector<Node> nodes_;
  std::vector<int> argmax_trace_;
};

}  // namespace ptcode
