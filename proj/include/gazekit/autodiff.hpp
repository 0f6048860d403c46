#pragma once

// Minimal reverse-mode automatic differentiation on a scalar tape.
//
// Every operation appends a node holding at most two parents and the local
// partial derivatives. Tape::gradient sweeps the nodes backwards once.

#include <cmath>
#include <cstdint>
#include <vector>

namespace gazekit::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(double constant) : value_(constant) {}  // NOLINT(google-explicit-constructor)

  double value() const { return value_; }
  std::int32_t index() const { return index_; }
  Tape* tape() const { return tape_; }
  bool is_constant() const { return tape_ == nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::int32_t index, double value) : tape_(tape), index_(index), value_(value) {}

  Tape* tape_ = nullptr;
  std::int32_t index_ = -1;
  double value_ = 0.0;
};

class Tape {
 public:
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  /// New independent variable.
  Var variable(double value) { return push(value, -1, 0.0, -1, 0.0); }

  /// Node with up to two parents; constants are dropped from the edge list.
  Var push(double value, const Var& a, double da) {
    return push(value, a.is_constant() ? -1 : a.index(), da, -1, 0.0);
  }
  Var push(double value, const Var& a, double da, const Var& b, double db) {
    return push(value, a.is_constant() ? -1 : a.index(), da, b.is_constant() ? -1 : b.index(), db);
  }

  /// Adjoints of every node with respect to `output`.
  std::vector<double> gradient(const Var& output) const {
    std::vector<double> adj;
    gradient(output, adj);
    return adj;
  }

  /// As above, reusing `adj` as storage.
  void gradient(const Var& output, std::vector<double>& adj) const {
    adj.assign(nodes_.size(), 0.0);
    if (output.is_constant()) return;
    adj[output.index()] = 1.0;
    for (std::int32_t i = output.index(); i >= 0; --i) {
      const double g = adj[i];
      if (g == 0.0) continue;
      const Node& n = nodes_[i];
      if (n.a >= 0) adj[n.a] += g * n.da;
      if (n.b >= 0) adj[n.b] += g * n.db;
    }
  }

 private:
  struct Node {
    std::int32_t a, b;
    double da, db;
  };

  Var push(double value, std::int32_t a, double da, std::int32_t b, double db) {
    nodes_.push_back({a, b, da, db});
    return Var(this, static_cast<std::int32_t>(nodes_.size() - 1), value);
  }

  std::vector<Node> nodes_;
};

namespace detail {
inline Tape* tape_of(const Var& a, const Var& b) { return a.tape() ? a.tape() : b.tape(); }
}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  if (!t) return Var(a.value() + b.value());
  return t->push(a.value() + b.value(), a, 1.0, b, 1.0);
}

inline Var operator-(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  if (!t) return Var(a.value() - b.value());
  return t->push(a.value() - b.value(), a, 1.0, b, -1.0);
}

inline Var operator*(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  if (!t) return Var(a.value() * b.value());
  return t->push(a.value() * b.value(), a, b.value(), b, a.value());
}

inline Var operator/(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  if (!t) return Var(a.value() / b.value());
  const double inv = 1.0 / b.value();
  const double q = a.value() * inv;
  return t->push(q, a, inv, b, -q * inv);
}

inline Var operator-(const Var& a) {
  if (a.is_constant()) return Var(-a.value());
  return a.tape()->push(-a.value(), a, -1.0);
}

inline Var sqrt(const Var& a) {
  const double s = std::sqrt(a.value());
  if (a.is_constant()) return Var(s);
  // Subgradient 0 at the kink so a zero miss distance does not produce inf.
  return a.tape()->push(s, a, s > 0.0 ? 0.5 / s : 0.0);
}

inline Var exp(const Var& a) {
  const double e = std::exp(a.value());
  if (a.is_constant()) return Var(e);
  return a.tape()->push(e, a, e);
}

inline Var tanh(const Var& a) {
  const double th = std::tanh(a.value());
  if (a.is_constant()) return Var(th);
  return a.tape()->push(th, a, 1.0 - th * th);
}

/// max(0, a)
inline Var positive_part(const Var& a) {
  if (a.value() > 0.0) return a;
  return Var(0.0);
}

inline Var square(const Var& a) { return a * a; }

}  // namespace gazekit::ad
