#pragma once

// Define-by-run reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records every operation of one forward pass. Tensor is a cheap
// handle (tape pointer + node index) and is only valid while its Tape lives.
// Parameters live outside the tape; Tape::backward accumulates into
// Parameter::grad.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "graphite/errors.hpp"

namespace graphite {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string name_, Matrix value_)
      : name(std::move(name_)), value(std::move(value_)),
        grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

class Tensor {
 public:
  Tensor() = default;

  const Matrix& value() const;
  /// Gradient accumulated by the last backward(); empty if none reached it.
  const Matrix& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double item() const;

  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Matrix value, const char* label = "constant") {
    Node node;
    node.op = label;
    node.value = std::move(value);
    nodes_.push_back(std::move(node));
    return Tensor(this, nodes_.size() - 1);
  }

  Tensor scalar(double v) { return constant(Matrix::Constant(1, 1, v), "scalar"); }

  Tensor parameter(Parameter& p) {
    Node node;
    node.op = "parameter";
    node.value = p.value;
    node.requires_grad = true;
    node.param = &p;
    nodes_.push_back(std::move(node));
    return Tensor(this, nodes_.size() - 1);
  }

  /// Appends an op result. `backward` is dropped when no input needs a gradient.
  Tensor record(const char* op, Matrix value, std::initializer_list<Tensor> inputs,
                Backward backward) {
    return record(op, std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  Tensor record(const char* op, Matrix value, std::span<const Tensor> inputs, Backward backward) {
    Node node;
    node.op = op;
    for (const Tensor& t : inputs) {
      check_owned(t, op);
      node.inputs.push_back(t.id_);
      node.requires_grad = node.requires_grad || nodes_[t.id_].requires_grad;
    }
    if (check_finite_ && !value.allFinite()) {
      std::ostringstream os;
      os << op << ": non-finite output";
      if (!inputs.empty()) {
        os << " from";
        for (const Tensor& t : inputs) os << ' ' << describe(t.id_);
      }
      throw NumericError(os.str());
    }
    node.value = std::move(value);
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Tensor(this, nodes_.size() - 1);
  }

  /// Reverse sweep from a 1x1 loss. Parameter gradients are accumulated
  /// (not overwritten), so call Parameter::zero_grad between steps.
  void backward(const Tensor& loss) {
    check_owned(loss, "backward");
    const Node& root = nodes_[loss.id_];
    if (root.value.rows() != 1 || root.value.cols() != 1) {
      throw ShapeError("backward: loss " + describe(loss.id_) + " is not scalar");
    }
    for (Node& n : nodes_) {
      n.grad.resize(0, 0);
      n.has_grad = false;
    }
    if (!root.requires_grad) return;
    accumulate(loss.id_, Matrix::Ones(1, 1));
    for (std::size_t id = loss.id_ + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.has_grad) continue;
      if (n.param != nullptr) {
        n.param->grad += n.grad;
      } else if (n.backward) {
        n.backward(*this, id);
      }
    }
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t input(std::size_t id, std::size_t k) const { return nodes_[id].inputs[k]; }
  std::size_t size() const { return nodes_.size(); }

  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  std::string describe(std::size_t id) const {
    const Node& n = nodes_[id];
    std::ostringstream os;
    if (n.param != nullptr) {
      os << "parameter '" << n.param->name << "'";
    } else {
      os << n.op << '#' << id;
    }
    os << '[' << n.value.rows() << 'x' << n.value.cols() << ']';
    return os.str();
  }

  /// Hash of the branch taken by every non-smooth op (relu sign pattern,
  /// clamp saturation). Finite differences are only meaningful when the
  /// signature is unchanged under perturbation.
  std::uint64_t branch_signature() const { return signature_; }
  /// Number of non-smooth op inputs that sat exactly on a kink.
  std::size_t kink_count() const { return kinks_; }

  void mix_branch(std::uint64_t v) {
    signature_ ^= v + 0x9e3779b97f4a7c15ULL + (signature_ << 6) + (signature_ >> 2);
  }
  void note_kinks(std::size_t k) { kinks_ += k; }

  void set_check_finite(bool on) { check_finite_ = on; }

 private:
  struct Node {
    const char* op = "";
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Parameter* param = nullptr;
    std::vector<std::size_t> inputs;
    Backward backward;
  };

  void check_owned(const Tensor& t, const char* op) const {
    if (t.tape_ != this) {
      throw Error(std::string(op) + ": operand belongs to a different tape");
    }
  }

  std::vector<Node> nodes_;
  std::uint64_t signature_ = 0;
  std::size_t kinks_ = 0;
  bool check_finite_ = true;
};

inline const Matrix& Tensor::value() const { return tape_->value(id_); }
inline const Matrix& Tensor::grad() const { return tape_->grad(id_); }
inline double Tensor::item() const {
  if (rows() != 1 || cols() != 1) {
    throw ShapeError("item: " + tape_->describe(id_) + " is not scalar");
  }
  return value()(0, 0);
}

namespace detail {

inline void require(bool ok, const char* op, const Tensor& a, const Tensor& b) {
  if (!ok) {
    throw ShapeError(std::string(op) + ": shape mismatch between " + a.tape().describe(a.id()) +
                     " and " + b.tape().describe(b.id()));
  }
}

inline void require_same_tape(const Tensor& a, const Tensor& b, const char* op) {
  if (&a.tape() != &b.tape()) throw Error(std::string(op) + ": operands on different tapes");
}

inline std::uint64_t pattern_hash(const Matrix& x, double lo, double hi, std::size_t& kinks) {
  std::uint64_t h = 1469598103934665603ULL;
  for (Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    const unsigned code = v < lo ? 0u : (v > hi ? 2u : 1u);
    if (v == lo || v == hi) ++kinks;
    h = (h ^ code) * 1099511628211ULL;
  }
  return h;
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_same_tape(a, b, "matmul");
  detail::require(a.cols() == b.rows(), "matmul", a, b);
  Matrix out = a.value() * b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_tape(a, b, "add");
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("add", a.value() + b.value(), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_tape(a, b, "sub");
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("sub", a.value() - b.value(), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, -t.grad(self));
  });
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  detail::require_same_tape(a, b, "hadamard");
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape().record("hadamard", std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

/// H + b where b is 1 x d (broadcast over rows) or n x d (per-row bias).
inline Tensor add_bias(const Tensor& h, const Tensor& b) {
  detail::require_same_tape(h, b, "add_bias");
  detail::require(b.cols() == h.cols() && (b.rows() == 1 || b.rows() == h.rows()), "add_bias", h,
                  b);
  const std::size_t ih = h.id(), ib = b.id();
  if (b.rows() == h.rows()) {
    return h.tape().record("add_bias", h.value() + b.value(), {h, b},
                           [ih, ib](Tape& t, std::size_t self) {
                             t.accumulate(ih, t.grad(self));
                             t.accumulate(ib, t.grad(self));
                           });
  }
  Matrix out = h.value().rowwise() + b.value().row(0);
  return h.tape().record("add_bias", std::move(out), {h, b}, [ih, ib](Tape& t, std::size_t self) {
    t.accumulate(ih, t.grad(self));
    if (t.requires_grad(ib)) t.accumulate(ib, t.grad(self).colwise().sum());
  });
}

inline Tensor scale(const Tensor& a, double s) {
  const std::size_t ia = a.id();
  return a.tape().record("scalar_mul", a.value() * s, {a}, [ia, s](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self) * s);
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  const std::size_t ia = a.id();
  Matrix out = a.value().array() + c;
  return a.tape().record("add_scalar", std::move(out), {a},
                         [ia](Tape& t, std::size_t self) { t.accumulate(ia, t.grad(self)); });
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Tape& tape = parts.front().tape();
  Index cols = 0;
  for (const Tensor& p : parts) {
    detail::require_same_tape(parts.front(), p, "concat_cols");
    detail::require(p.rows() == parts.front().rows(), "concat_cols", parts.front(), p);
    cols += p.cols();
  }
  Matrix out(parts.front().rows(), cols);
  std::vector<std::pair<std::size_t, Index>> blocks;
  Index offset = 0;
  for (const Tensor& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    blocks.emplace_back(p.id(), offset);
    offset += p.cols();
  }
  return tape.record("concat_cols", std::move(out), parts,
                     [blocks = std::move(blocks)](Tape& t, std::size_t self) {
                       const Matrix& g = t.grad(self);
                       for (const auto& [id, off] : blocks) {
                         if (t.requires_grad(id)) {
                           t.accumulate(id, g.middleCols(off, t.value(id).cols()));
                         }
                       }
                     });
}

inline Tensor concat_cols(std::initializer_list<Tensor> parts) {
  return concat_cols(std::span<const Tensor>(parts.begin(), parts.size()));
}

/// Each row divided by its Euclidean norm. All-zero rows map to zero rows
/// with zero gradient.
inline Tensor row_l2_normalize(const Tensor& a) {
  const Matrix& x = a.value();
  Vector norms = x.rowwise().norm();
  Matrix out = x;
  for (Index i = 0; i < x.rows(); ++i) {
    if (norms(i) > 0) out.row(i) /= norms(i);
  }
  const std::size_t ia = a.id();
  return a.tape().record("row_l2_normalize", std::move(out), {a},
                         [ia, norms = std::move(norms)](Tape& t, std::size_t self) {
                           const Matrix& g = t.grad(self);
                           const Matrix& y = t.value(self);
                           Matrix gx = Matrix::Zero(g.rows(), g.cols());
                           for (Index i = 0; i < g.rows(); ++i) {
                             if (norms(i) == 0) continue;
                             const double proj = y.row(i).dot(g.row(i));
                             gx.row(i) = (g.row(i) - proj * y.row(i)) / norms(i);
                           }
                           t.accumulate(ia, gx);
                         });
}

/// X / ||X||_F. Zero input is a numeric error.
inline Tensor frobenius_normalize(const Tensor& a) {
  const double norm = a.value().norm();
  if (!(norm > 0)) {
    throw NumericError("frobenius_normalize: zero norm input " + a.tape().describe(a.id()));
  }
  const std::size_t ia = a.id();
  return a.tape().record("frobenius_normalize", a.value() / norm, {a},
                         [ia, norm](Tape& t, std::size_t self) {
                           const Matrix& g = t.grad(self);
                           const Matrix& y = t.value(self);
                           const double proj = (y.array() * g.array()).sum();
                           t.accumulate(ia, (g - proj * y) / norm);
                         });
}

inline Tensor reduce_sum(const Tensor& a) {
  const std::size_t ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape().record("reduce_sum", Matrix::Constant(1, 1, a.value().sum()), {a},
                         [ia, r, c](Tape& t, std::size_t self) {
                           t.accumulate(ia, Matrix::Constant(r, c, t.grad(self)(0, 0)));
                         });
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t ia = a.id();
  return a.tape().record("transpose", a.value().transpose(), {a},
                         [ia](Tape& t, std::size_t self) {
                           t.accumulate(ia, t.grad(self).transpose());
                         });
}

/// Subgradient at exactly 0 is taken as 0.
inline Tensor relu(const Tensor& a) {
  std::size_t kinks = 0;
  a.tape().mix_branch(detail::pattern_hash(a.value(), 0.0, std::numeric_limits<double>::infinity(),
                                           kinks));
  a.tape().note_kinks(kinks);
  const std::size_t ia = a.id();
  return a.tape().record("relu", a.value().cwiseMax(0.0), {a}, [ia](Tape& t, std::size_t self) {
    const Matrix& x = t.value(ia);
    t.accumulate(ia, (x.array() > 0).select(t.grad(self).array(), 0.0).matrix());
  });
}

inline Tensor sigmoid(const Tensor& a) {
  const std::size_t ia = a.id();
  Matrix out = a.value().unaryExpr([](double v) { return detail::logistic(v); });
  return a.tape().record("sigmoid", std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    t.accumulate(ia, t.grad(self).cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

inline Tensor exp(const Tensor& a) {
  const std::size_t ia = a.id();
  return a.tape().record("exp", a.value().array().exp().matrix(), {a},
                         [ia](Tape& t, std::size_t self) {
                           t.accumulate(ia, t.grad(self).cwiseProduct(t.value(self)));
                         });
}

inline Tensor log(const Tensor& a) {
  if (!(a.value().array() > 0).all()) {
    throw NumericError("log: non-positive entry in " + a.tape().describe(a.id()));
  }
  const std::size_t ia = a.id();
  return a.tape().record("log", a.value().array().log().matrix(), {a},
                         [ia](Tape& t, std::size_t self) {
                           t.accumulate(ia, t.grad(self).cwiseQuotient(t.value(ia)));
                         });
}

/// Elementwise clamp to [lo, hi]; gradient flows only strictly inside.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  std::size_t kinks = 0;
  a.tape().mix_branch(detail::pattern_hash(a.value(), lo, hi, kinks));
  a.tape().note_kinks(kinks);
  const std::size_t ia = a.id();
  return a.tape().record("clamp", a.value().cwiseMax(lo).cwiseMin(hi), {a},
                         [ia, lo, hi](Tape& t, std::size_t self) {
                           const Matrix& x = t.value(ia);
                           t.accumulate(ia, (x.array() > lo && x.array() < hi)
                                                .select(t.grad(self).array(), 0.0)
                                                .matrix());
                         });
}

/// Constant sparse operator applied from the left: S * H.
inline Tensor spmm(std::shared_ptr<const SparseMatrix> s, const Tensor& h) {
  if (s->cols() != h.rows()) {
    throw ShapeError("spmm: operator [" + std::to_string(s->rows()) + "x" +
                     std::to_string(s->cols()) + "] does not conform with " +
                     h.tape().describe(h.id()));
  }
  Matrix out = (*s) * h.value();
  const std::size_t ih = h.id();
  return h.tape().record("spmm", std::move(out), {h}, [ih, s](Tape& t, std::size_t self) {
    t.accumulate(ih, s->transpose() * t.grad(self));
  });
}

/// Sum over entries of -[w t log sigmoid(x) + (1 - t) log(1 - sigmoid(x))]
/// with w = pos_weight. Targets may be fractional.
inline Tensor weighted_sigmoid_cross_entropy(const Tensor& logits,
                                             std::shared_ptr<const Matrix> targets,
                                             double pos_weight = 1.0) {
  if (targets->rows() != logits.rows() || targets->cols() != logits.cols()) {
    throw ShapeError("sigmoid_cross_entropy: targets [" + std::to_string(targets->rows()) + "x" +
                     std::to_string(targets->cols()) + "] vs " +
                     logits.tape().describe(logits.id()));
  }
  const Matrix& x = logits.value();
  const Matrix& y = *targets;
  double total = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i], tv = y.data()[i];
    total += pos_weight * tv * detail::softplus(-v) + (1.0 - tv) * detail::softplus(v);
  }
  const std::size_t il = logits.id();
  return logits.tape().record(
      "sigmoid_cross_entropy", Matrix::Constant(1, 1, total), {logits},
      [il, targets, pos_weight](Tape& t, std::size_t self) {
        const Matrix& xv = t.value(il);
        const Matrix& yv = *targets;
        const double g = t.grad(self)(0, 0);
        Matrix gx(xv.rows(), xv.cols());
        for (Index i = 0; i < xv.size(); ++i) {
          const double s = detail::logistic(xv.data()[i]);
          const double tv = yv.data()[i];
          gx.data()[i] = g * (pos_weight * tv * (s - 1.0) + (1.0 - tv) * s);
        }
        t.accumulate(il, gx);
      });
}

/// Column vector of <Z_i, Z_j> for the listed pairs; only those rows are touched.
inline Tensor pair_dots(const Tensor& z, std::shared_ptr<const std::vector<std::pair<Index, Index>>> pairs) {
  const Matrix& zv = z.value();
  Matrix out(static_cast<Index>(pairs->size()), 1);
  for (std::size_t p = 0; p < pairs->size(); ++p) {
    const auto [i, j] = (*pairs)[p];
    if (i < 0 || j < 0 || i >= zv.rows() || j >= zv.rows()) {
      throw ShapeError("pair_dots: pair index out of range for " + z.tape().describe(z.id()));
    }
    out(static_cast<Index>(p), 0) = zv.row(i).dot(zv.row(j));
  }
  const std::size_t iz = z.id();
  return z.tape().record("pair_dots", std::move(out), {z}, [iz, pairs](Tape& t, std::size_t self) {
    const Matrix& zv2 = t.value(iz);
    const Matrix& g = t.grad(self);
    Matrix gz = Matrix::Zero(zv2.rows(), zv2.cols());
    for (std::size_t p = 0; p < pairs->size(); ++p) {
      const auto [i, j] = (*pairs)[p];
      const double gp = g(static_cast<Index>(p), 0);
      gz.row(i) += gp * zv2.row(j);
      gz.row(j) += gp * zv2.row(i);
    }
    t.accumulate(iz, gz);
  });
}

/// Sum over selected rows of -log softmax(logits)[row, label].
inline Tensor softmax_cross_entropy(const Tensor& logits, std::shared_ptr<const std::vector<int>> labels,
                                    std::shared_ptr<const std::vector<Index>> rows) {
  const Matrix& x = logits.value();
  if (static_cast<Index>(labels->size()) != x.rows()) {
    throw ShapeError("softmax_cross_entropy: label count " + std::to_string(labels->size()) +
                     " vs " + logits.tape().describe(logits.id()));
  }
  double total = 0.0;
  for (Index r : *rows) {
    const int y = (*labels)[static_cast<std::size_t>(r)];
    if (y < 0 || y >= x.cols()) throw ShapeError("softmax_cross_entropy: label out of range");
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    total += lse - x(r, y);
  }
  const std::size_t il = logits.id();
  return logits.tape().record(
      "softmax_cross_entropy", Matrix::Constant(1, 1, total), {logits},
      [il, labels, rows](Tape& t, std::size_t self) {
        const Matrix& xv = t.value(il);
        const double g = t.grad(self)(0, 0);
        Matrix gx = Matrix::Zero(xv.rows(), xv.cols());
        for (Index r : *rows) {
          const double m = xv.row(r).maxCoeff();
          Eigen::RowVectorXd p = (xv.row(r).array() - m).exp();
          p /= p.sum();
          p((*labels)[static_cast<std::size_t>(r)]) -= 1.0;
          gx.row(r) += g * p;
        }
        t.accumulate(il, gx);
      });
}

}  // namespace graphite
