#pragma once

// First-order equivalence between mean-field embedding updates and a GNN
// layer. Embeddings are n x d (d = 1 is the scalar case). An update operator
// maps the masked neighbor matrix N_i (n x d) to a new d-vector.

#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "graphite/gnn.hpp"
#include "graphite/graph.hpp"

namespace graphite {

struct UpdateOperator {
  std::string name;
  Index dim = 1;
  std::function<Vector(const Matrix&)> value;
  /// d x (n d) Jacobian at N = 0; column j*d + b is d/dN(j, b). Optional.
  std::function<Matrix(Index n)> jacobian_at_zero;
};

/// Row i of the embeddings for neighbors of i, zero elsewhere.
inline Matrix neighbor_vector(const Matrix& adjacency, const Matrix& embeddings, Index i) {
  if (adjacency.rows() != adjacency.cols() || adjacency.rows() != embeddings.rows()) {
    throw ShapeError("neighbor_vector: adjacency and embeddings disagree on n");
  }
  Matrix out = Matrix::Zero(embeddings.rows(), embeddings.cols());
  for (Index j = 0; j < adjacency.cols(); ++j) {
    if (adjacency(i, j) != 0.0) out.row(j) = embeddings.row(j);
  }
  return out;
}

inline Matrix mf_embedding_update(const UpdateOperator& op, const Matrix& adjacency, const Matrix& embeddings) {
  Matrix out(embeddings.rows(), op.dim);
  for (Index i = 0; i < embeddings.rows(); ++i) {
    out.row(i) = op.value(neighbor_vector(adjacency, embeddings, i)).transpose();
  }
  return out;
}

inline Vector value_at_zero(const UpdateOperator& op, Index n) { return op.value(Matrix::Zero(n, op.dim)); }

/// Analytic Jacobian when provided, else central differences (eps = 1e-6).
inline Matrix jacobian_at_zero(const UpdateOperator& op, Index n, bool allow_numeric = true) {
  if (op.jacobian_at_zero) return op.jacobian_at_zero(n);
  if (!allow_numeric) throw ConfigError("update operator '" + op.name + "' has no gradient at 0");
  constexpr double eps = 1e-6;
  const Index d = op.dim;
  Matrix jac(d, n * d);
  for (Index j = 0; j < n; ++j) {
    for (Index b = 0; b < d; ++b) {
      Matrix plus = Matrix::Zero(n, d), minus = Matrix::Zero(n, d);
      plus(j, b) = eps;
      minus(j, b) = -eps;
      jac.col(j * d + b) = (op.value(plus) - op.value(minus)) / (2 * eps);
    }
  }
  return jac;
}

namespace detail {

inline Vector row_major_vec(const Matrix& m) {
  Vector v(m.size());
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) v(i * m.cols() + j) = m(i, j);
  return v;
}

}  // namespace detail

/// O(0) + J vec(N).
inline Vector taylor_first_order(const UpdateOperator& op, const Matrix& neighbors, bool allow_numeric = true) {
  const Index n = neighbors.rows();
  return value_at_zero(op, n) + jacobian_at_zero(op, n, allow_numeric) * detail::row_major_vec(neighbors);
}

/// eta = identity, W = 1, B = O(0) per node, and one operator per neighbor
/// coordinate (j, b): f(A)[(i, a), (j, b)] = J(a, (j, b)) A_ij. States are
/// flattened row-major to (n d) x 1, so d = 1 is literally the scalar case.
struct ConstructedGnn {
  Index n = 0;
  Index dim = 1;
  std::vector<GraphOperator> operators;
  GnnLayerSpec spec{1, 1, Activation::identity, BiasMode::full};
  GnnLayerParams params;

  Matrix apply(const Matrix& embeddings) {
    if (embeddings.rows() != n || embeddings.cols() != dim) throw ShapeError("ConstructedGnn: embedding shape");
    Tape tape;
    Tensor h = tape.constant(Matrix(detail::row_major_vec(embeddings)), "embeddings");
    const Matrix flat = gnn_layer(tape, operators, h, spec, params).value();
    Matrix out(n, dim);
    for (Index i = 0; i < n; ++i)
      for (Index a = 0; a < dim; ++a) out(i, a) = flat(i * dim + a, 0);
    return out;
  }
};

inline ConstructedGnn construct_equivalent_gnn(const UpdateOperator& op, const Matrix& adjacency,
                                               bool allow_numeric = true) {
  const Index n = adjacency.rows(), d = op.dim;
  const Matrix jac = jacobian_at_zero(op, n, allow_numeric);
  const Vector o0 = value_at_zero(op, n);
  ConstructedGnn gnn;
  gnn.n = n;
  gnn.dim = d;
  for (Index j = 0; j < n; ++j) {
    for (Index b = 0; b < d; ++b) {
      std::vector<Eigen::Triplet<double>> t;
      for (Index i = 0; i < n; ++i) {
        if (adjacency(i, j) == 0.0) continue;
        for (Index a = 0; a < d; ++a) {
          const double v = jac(a, j * d + b) * adjacency(i, j);
          if (v != 0.0) t.emplace_back(i * d + a, j * d + b, v);
        }
      }
      SparseMatrix f(n * d, n * d);
      f.setFromTriplets(t.begin(), t.end());
      gnn.operators.push_back(GraphOperator::sparse(std::move(f)));
    }
  }
  gnn.params.weight = Parameter("meanfield.weight", Matrix::Ones(1, 1));
  Matrix bias(n * d, 1);
  for (Index i = 0; i < n; ++i) bias.block(i * d, 0, d, 1) = o0;
  gnn.params.bias = Parameter("meanfield.bias", bias);
  return gnn;
}

struct TheoremReport {
  std::string operator_name;
  Index n = 0;
  Index dim = 1;
  double max_abs_diff_vs_taylor = 0;
  std::vector<double> scales;
  std::vector<double> remainders;  // max |GNN - mf_update| at each scale
  std::vector<double> ratios;      // remainders[s] / remainders[s + 1]
};

inline TheoremReport check_theorem(const UpdateOperator& op, const Matrix& adjacency, const Matrix& embeddings,
                                   std::vector<double> scales = {1.0, 0.5, 0.25}) {
  TheoremReport r;
  r.operator_name = op.name;
  r.n = adjacency.rows();
  r.dim = op.dim;
  ConstructedGnn gnn = construct_equivalent_gnn(op, adjacency);
  const Matrix from_gnn = gnn.apply(embeddings);
  for (Index i = 0; i < r.n; ++i) {
    const Vector t = taylor_first_order(op, neighbor_vector(adjacency, embeddings, i));
    r.max_abs_diff_vs_taylor =
        std::max(r.max_abs_diff_vs_taylor, (from_gnn.row(i).transpose() - t).cwiseAbs().maxCoeff());
  }
  r.scales = std::move(scales);
  for (double s : r.scales) {
    const Matrix scaled = s * embeddings;
    r.remainders.push_back((gnn.apply(scaled) - mf_embedding_update(op, adjacency, scaled)).cwiseAbs().maxCoeff());
  }
  for (std::size_t k = 0; k + 1 < r.remainders.size(); ++k) {
    r.ratios.push_back(r.remainders[k + 1] > 0 ? r.remainders[k] / r.remainders[k + 1] : 0.0);
  }
  return r;
}

inline nlohmann::json to_json(const TheoremReport& r) {
  return {{"operator", r.operator_name},
          {"n", r.n},
          {"dim", r.dim},
          {"max_abs_diff_vs_taylor", r.max_abs_diff_vs_taylor},
          {"remainder_vs_scale", {{"scales", r.scales}, {"remainders", r.remainders}, {"ratios", r.ratios}}}};
}

// Test operators. Each is smooth at 0 and comes with its analytic Jacobian.

/// O(N) = c + sum_j w_j N_j (scalar).
inline UpdateOperator linear_operator(Vector w, double c) {
  UpdateOperator op;
  op.name = "linear";
  op.value = [w, c](const Matrix& nb) { return Vector::Constant(1, c + w.dot(nb.col(0))); };
  op.jacobian_at_zero = [w](Index n) {
    if (w.size() != n) throw ShapeError("linear operator sized for a different n");
    return Matrix(w.transpose());
  };
  return op;
}

/// O(N) = sum_j sin(N_j) (scalar).
inline UpdateOperator sine_sum_operator() {
  UpdateOperator op;
  op.name = "sine-sum";
  op.value = [](const Matrix& nb) { return Vector::Constant(1, nb.col(0).array().sin().sum()); };
  op.jacobian_at_zero = [](Index n) { return Matrix(Matrix::Ones(1, n)); };
  return op;
}

/// O(N) = c + sum_j w_j N_j^2 (scalar); the gradient at 0 vanishes.
inline UpdateOperator quadratic_operator(Vector w = {}, double c = 0.0) {
  UpdateOperator op;
  op.name = "quadratic";
  op.value = [w, c](const Matrix& nb) {
    const Vector sq = nb.col(0).array().square();
    return Vector::Constant(1, c + (w.size() == 0 ? sq.sum() : w.dot(sq)));
  };
  op.jacobian_at_zero = [](Index n) { return Matrix(Matrix::Zero(1, n)); };
  return op;
}

/// O(N) = sigmoid(b + sum_j w_j N_j) (scalar).
inline UpdateOperator logistic_operator(Vector w, double b) {
  UpdateOperator op;
  op.name = "logistic";
  op.value = [w, b](const Matrix& nb) {
    return Vector::Constant(1, 1.0 / (1.0 + std::exp(-(b + w.dot(nb.col(0))))));
  };
  op.jacobian_at_zero = [w, b](Index) {
    const double s = 1.0 / (1.0 + std::exp(-b));
    return Matrix(s * (1 - s) * w.transpose());
  };
  return op;
}

/// O(N) = tanh(c + sum_j M_j N_j^T) for d x d matrices M_j (vector case).
inline UpdateOperator vector_tanh_operator(std::vector<Matrix> mixing, Vector c) {
  UpdateOperator op;
  op.name = "vector-tanh";
  op.dim = c.size();
  op.value = [mixing, c](const Matrix& nb) {
    Vector pre = c;
    for (Index j = 0; j < nb.rows(); ++j) pre += mixing[static_cast<std::size_t>(j)] * nb.row(j).transpose();
    return Vector(pre.array().tanh());
  };
  op.jacobian_at_zero = [mixing, c](Index n) {
    const Index d = c.size();
    const Vector slope = 1.0 - c.array().tanh().square();
    Matrix jac(d, n * d);
    for (Index j = 0; j < n; ++j) jac.block(0, j * d, d, d) = slope.asDiagonal() * mixing[static_cast<std::size_t>(j)];
    return jac;
  };
  return op;
}

/// A random scalar operator from the four families, for property runs.
inline UpdateOperator random_scalar_operator(Index n, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Vector w(n);
  for (Index j = 0; j < n; ++j) w(j) = nd(rng);
  const double c = nd(rng);
  switch (std::uniform_int_distribution<int>(0, 3)(rng)) {
    case 0: return linear_operator(w, c);
    case 1: return sine_sum_operator();
    case 2: return quadratic_operator(w.cwiseAbs(), c);
    default: return logistic_operator(w, c);
  }
}

}  // namespace graphite
