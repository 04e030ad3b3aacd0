#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "graphite/graph.hpp"
#include "graphite/tensor.hpp"

namespace graphite {

enum class Activation { identity, relu, sigmoid };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "unknown";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "identity" || s == "linear") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

inline Tensor activate(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
  }
  return x;
}

/// Broadcast biases are 1 x d and keep layers permutation equivariant; full
/// biases are n x d, one row per node.
enum class BiasMode { none, broadcast, full };

struct GnnLayerSpec {
  Index in_dim = 0;
  Index out_dim = 0;
  Activation activation = Activation::relu;
  BiasMode bias = BiasMode::broadcast;
};

struct GnnLayerParams {
  Parameter weight;
  std::optional<Parameter> bias;
};

struct GnnParams {
  std::vector<GnnLayerParams> layers;

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers) {
      out.push_back(&l.weight);
      if (l.bias) out.push_back(&*l.bias);
    }
    return out;
  }
};

inline Matrix glorot_uniform(Index rows, Index cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(rows, cols);
  for (Index c = 0; c < cols; ++c) {
    for (Index r = 0; r < rows; ++r) m(r, c) = dist(rng);
  }
  return m;
}

/// Glorot-uniform weights and zero biases. `node_count` sizes full biases.
inline GnnParams init_gnn_params(std::span<const GnnLayerSpec> specs, Rng& rng,
                                 std::string_view prefix, Index node_count = 0) {
  GnnParams params;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    const auto& s = specs[l];
    if (s.in_dim <= 0 || s.out_dim <= 0) throw ConfigError("gnn layer dims must be positive");
    GnnLayerParams lp;
    const std::string base = std::string(prefix) + "." + std::to_string(l);
    lp.weight = Parameter(base + ".weight", glorot_uniform(s.in_dim, s.out_dim, rng));
    if (s.bias == BiasMode::broadcast) {
      lp.bias = Parameter(base + ".bias", Matrix::Zero(1, s.out_dim));
    } else if (s.bias == BiasMode::full) {
      if (node_count <= 0) throw ConfigError("full biases need a node count");
      lp.bias = Parameter(base + ".bias", Matrix::Zero(node_count, s.out_dim));
    }
    params.layers.push_back(std::move(lp));
  }
  return params;
}

/// A linear graph operator f(A), applied by left multiplication.
class GraphOperator {
 public:
  using Apply = std::function<Tensor(const Tensor&)>;

  GraphOperator(Index size, Apply apply) : size_(size), apply_(std::move(apply)) {}

  static GraphOperator sparse(std::shared_ptr<const SparseMatrix> s) {
    const Index n = s->rows();
    return GraphOperator(n, [s](const Tensor& h) { return spmm(s, h); });
  }

  static GraphOperator sparse(SparseMatrix s) {
    return sparse(std::make_shared<const SparseMatrix>(std::move(s)));
  }

  static GraphOperator dense(std::shared_ptr<const Matrix> m) {
    const Index n = m->rows();
    return GraphOperator(n, [m](const Tensor& h) {
      return matmul(h.tape().constant(*m, "operator"), h);
    });
  }

  static GraphOperator dense(Matrix m) { return dense(std::make_shared<const Matrix>(std::move(m))); }

  /// A dense operator that is itself on the tape (gradients flow into it).
  static GraphOperator tensor(Tensor a) {
    const Index n = a.rows();
    return GraphOperator(n, [a](const Tensor& h) { return matmul(a, h); });
  }

  Tensor apply(const Tensor& h) const {
    if (h.rows() != size_) {
      throw ShapeError("graph operator of size " + std::to_string(size_) +
                       " applied to " + h.tape().describe(h.id()));
    }
    return apply_(h);
  }

  Index size() const { return size_; }

 private:
  Index size_;
  Apply apply_;
};

/// eta(B + sum_f f(A) H W). An empty `h` stands for H = I_n, so the layer
/// computes sum_f f(A) W directly.
inline Tensor gnn_layer(Tape& tape, std::span<const GraphOperator> operators,
                        const std::optional<Tensor>& h, const GnnLayerSpec& spec,
                        GnnLayerParams& params) {
  if (operators.empty()) throw ShapeError("gnn_layer: empty operator family");
  if (params.weight.value.rows() != spec.in_dim || params.weight.value.cols() != spec.out_dim) {
    throw ShapeError("gnn_layer: weight '" + params.weight.name + "' does not match layer spec");
  }
  Tensor w = tape.parameter(params.weight);
  Tensor hw = h ? matmul(*h, w) : w;
  if (!h && spec.in_dim != operators.front().size()) {
    throw ShapeError("gnn_layer: identity input needs in_dim == node count");
  }
  Tensor acc = operators.front().apply(hw);
  for (std::size_t k = 1; k < operators.size(); ++k) acc = add(acc, operators[k].apply(hw));
  if (spec.bias != BiasMode::none) {
    if (!params.bias) throw ShapeError("gnn_layer: spec needs a bias parameter");
    acc = add_bias(acc, tape.parameter(*params.bias));
  }
  return activate(acc, spec.activation);
}

/// GCN propagation eta(B + A_norm H W).
inline Tensor gcn_layer(Tape& tape, const GraphOperator& normalized, const std::optional<Tensor>& h,
                        const GnnLayerSpec& spec, GnnLayerParams& params) {
  return gnn_layer(tape, std::span<const GraphOperator>(&normalized, 1), h, spec, params);
}

/// Stacked layers sharing one operator family. Empty `x` means H0 = I_n.
inline Tensor gnn_forward(Tape& tape, std::span<const GraphOperator> operators,
                          const std::optional<Tensor>& x, std::span<const GnnLayerSpec> specs,
                          GnnParams& params) {
  if (specs.size() != params.layers.size()) {
    throw ShapeError("gnn_forward: spec/parameter layer count mismatch");
  }
  if (specs.empty()) {
    if (x) return *x;
    if (operators.empty()) throw ShapeError("gnn_forward: need an operator to size I_n");
    return tape.constant(Matrix::Identity(operators.front().size(), operators.front().size()),
                         "identity");
  }
  std::optional<Tensor> h = x;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    h = gnn_layer(tape, operators, h, specs[l], params.layers[l]);
  }
  return *h;
}

inline Tensor gnn_forward(Tape& tape, const GraphOperator& op, const std::optional<Tensor>& x,
                          std::span<const GnnLayerSpec> specs, GnnParams& params) {
  return gnn_forward(tape, std::span<const GraphOperator>(&op, 1), x, specs, params);
}

}  // namespace graphite
