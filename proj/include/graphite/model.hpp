#pragma once

// Graphite encoder/decoder and the VAE / AE objectives.
//
// Encoder: GCN trunk over the normalized input graph, then GCN heads for the
// posterior mean and log standard deviation of every node's latent vector.
//
// Decoder: each refinement round builds the dense intermediate graph
//   A_hat = N N^T + 1 1^T,  N = Z with unit-norm rows (or Z / ||Z||_F),
// and runs one GCN layer over it on [Z | X]. A_hat is never materialized by
// default: A_hat H = N (N^T H) + 1 (1^T H) costs O(n k d) instead of O(n^2 k),
// and its degrees N (N^T 1) + n come at the same cost.
// The last round's output is blended with the initial embedding and the
// edge logits are its Gram matrix.
//
// With no refinement rounds the model is exactly GAE (deterministic) or VGAE.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "graphite/gnn.hpp"
#include "graphite/graph.hpp"
#include "graphite/log.hpp"
#include "graphite/tensor.hpp"

namespace graphite {

enum class ModelKind { graphite_vae, graphite_ae, vgae, gae };
enum class SkipMode { convex, incremental };
enum class SimilarityNorm { row, frobenius };
enum class ObservationKind { bernoulli, gaussian };

inline std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::graphite_vae: return "graphite_vae";
    case ModelKind::graphite_ae: return "graphite_ae";
    case ModelKind::vgae: return "vgae";
    case ModelKind::gae: return "gae";
  }
  return "unknown";
}

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "graphite_vae" || s == "graphite-vae") return ModelKind::graphite_vae;
  if (s == "graphite_ae" || s == "graphite-ae") return ModelKind::graphite_ae;
  if (s == "vgae") return ModelKind::vgae;
  if (s == "gae") return ModelKind::gae;
  throw ConfigError("unknown model kind '" + std::string(s) + "'");
}

inline std::string_view to_string(SkipMode m) {
  return m == SkipMode::convex ? "convex" : "incremental";
}
inline SkipMode parse_skip_mode(std::string_view s) {
  if (s == "convex") return SkipMode::convex;
  if (s == "incremental") return SkipMode::incremental;
  throw ConfigError("unknown skip mode '" + std::string(s) + "'");
}
inline std::string_view to_string(SimilarityNorm m) {
  return m == SimilarityNorm::row ? "row" : "frobenius";
}
inline SimilarityNorm parse_similarity_norm(std::string_view s) {
  if (s == "row") return SimilarityNorm::row;
  if (s == "frobenius") return SimilarityNorm::frobenius;
  throw ConfigError("unknown similarity norm '" + std::string(s) + "'");
}
inline std::string_view to_string(ObservationKind k) {
  return k == ObservationKind::bernoulli ? "bernoulli" : "gaussian";
}
inline ObservationKind parse_observation(std::string_view s) {
  if (s == "bernoulli") return ObservationKind::bernoulli;
  if (s == "gaussian") return ObservationKind::gaussian;
  throw ConfigError("unknown observation model '" + std::string(s) + "'");
}

inline bool is_variational(ModelKind k) {
  return k == ModelKind::graphite_vae || k == ModelKind::vgae;
}
inline bool has_refinement(ModelKind k) {
  return k == ModelKind::graphite_vae || k == ModelKind::graphite_ae;
}

struct ModelConfig {
  ModelKind kind = ModelKind::graphite_vae;
  /// Node count; also the input width when the graph has no features.
  Index node_count = 0;
  /// Feature width m, 0 for featureless graphs (H0 = I_n).
  Index feature_dim = 0;
  std::vector<Index> encoder_hidden{32};
  Index latent_dim = 16;
  /// Output width of each refinement round; the last must equal the width
  /// of the embedding it is blended with.
  std::vector<Index> decoder_dims{32, 16};
  /// Dense layers applied to the sampled Z before decoding (empty = none).
  std::vector<Index> latent_mlp{};
  /// Blend every induced embedding (initial + each round) with
  /// `combine_weights` instead of the two-embedding skip connection.
  bool combine_all_rounds = false;
  std::vector<double> combine_weights{};
  double lambda = 0.5;
  SkipMode skip = SkipMode::convex;
  SimilarityNorm norm = SimilarityNorm::row;
  Activation hidden_activation = Activation::relu;
  BiasMode bias = BiasMode::broadcast;
  bool decoder_uses_features = true;
  bool fast_decode = true;
  /// Refinement layers are GCN layers, so they propagate over
  /// D^-1/2 A_hat D^-1/2; off means the raw A_hat.
  bool decoder_gcn_norm = true;
  ObservationKind observation = ObservationKind::bernoulli;
  double log_sigma_min = -10.0;
  double log_sigma_max = 10.0;
  std::uint64_t seed = 0;

  Index refinement_rounds() const {
    return has_refinement(kind) ? static_cast<Index>(decoder_dims.size()) : 0;
  }
  Index input_dim() const { return feature_dim > 0 ? feature_dim : node_count; }
  Index embedding_dim() const { return latent_mlp.empty() ? latent_dim : latent_mlp.back(); }
  Index final_dim() const { return embedding_dim(); }
};

struct Posterior {
  Tensor mu;
  /// Clamped log standard deviation; absent for deterministic models.
  std::optional<Tensor> log_sigma;
};

/// Everything one forward pass produces.
struct ForwardPass {
  Posterior posterior;
  Tensor z;        // sample (or mean for AE models)
  Tensor z_final;  // blended embedding fed to the inner-product decoder
};

// ---------------------------------------------------------------------------
// Matrix-level reference functions (no tape).

inline Matrix normalize_rows(const Matrix& z, std::size_t* zero_rows = nullptr) {
  Matrix n = z;
  std::size_t zeros = 0;
  for (Index i = 0; i < z.rows(); ++i) {
    const double norm = z.row(i).norm();
    if (norm > 0) {
      n.row(i) /= norm;
    } else {
      ++zeros;
    }
  }
  if (zero_rows) *zero_rows = zeros;
  return n;
}

inline Matrix similarity_factor(const Matrix& z, SimilarityNorm norm) {
  if (norm == SimilarityNorm::row) {
    std::size_t zeros = 0;
    Matrix n = normalize_rows(z, &zeros);
    if (zeros > 0) logging::debug("intermediate graph: ", zeros, " all-zero embedding rows");
    return n;
  }
  const double f = z.norm();
  if (!(f > 0)) throw NumericError("intermediate graph: all-zero embedding");
  return z / f;
}

/// A_hat = N N^T + 1 1^T. Row mode gives cosine similarity + 1, in [0, 2].
inline Matrix intermediate_graph(const Matrix& z, SimilarityNorm norm = SimilarityNorm::row) {
  const Matrix n = similarity_factor(z, norm);
  Matrix a = n * n.transpose();
  a.array() += 1.0;
  return a;
}

/// A_hat H computed as N (N^T H) + 1 (1^T H).
inline Matrix decode_fast(const Matrix& z, const Matrix& h, SimilarityNorm norm = SimilarityNorm::row) {
  if (z.rows() != h.rows()) throw ShapeError("decode_fast: Z and H row counts differ");
  const Matrix n = similarity_factor(z, norm);
  Matrix out = n * (n.transpose() * h);
  out.rowwise() += h.colwise().sum();
  return out;
}

inline Matrix combine_skip(const Matrix& z, const Matrix& z_star, double lambda, SkipMode mode) {
  if (z.rows() != z_star.rows() || z.cols() != z_star.cols()) {
    throw ShapeError("combine_skip: Z and Z* shapes differ");
  }
  if (mode == SkipMode::convex) {
    if (lambda < 0 || lambda > 1) throw ConfigError("combine_skip: convex lambda outside [0, 1]");
    return (1.0 - lambda) * z + lambda * z_star;
  }
  const double norm = z_star.norm();
  if (!(norm > 0)) throw NumericError("combine_skip: incremental mode needs ||Z*|| > 0");
  return z + lambda * z_star / norm;
}

/// Bernoulli: sigmoid(Z Z^T). Gaussian: Z Z^T (the mean).
inline Matrix edge_distribution(const Matrix& z_final,
                                ObservationKind kind = ObservationKind::bernoulli) {
  Matrix logits = z_final * z_final.transpose();
  if (kind == ObservationKind::gaussian) return logits;
  return logits.unaryExpr([](double v) { return detail::logistic(v); });
}

/// A + I: self-links are positive targets.
inline Matrix reconstruction_target(const Graph& g, bool diagonal_ones = true) {
  Matrix t = g.dense_adjacency();
  if (diagonal_ones) t.diagonal().setOnes();
  return t;
}

/// (n^2 - positives) / positives over target entries.
inline double positive_weight(const Matrix& target) {
  const double total = static_cast<double>(target.size());
  const double pos = target.sum();
  if (!(pos > 0)) return 1.0;
  return (total - pos) / pos;
}

// ---------------------------------------------------------------------------
// Tape-level building blocks.

inline Tensor similarity_factor(const Tensor& z, SimilarityNorm norm) {
  return norm == SimilarityNorm::row ? row_l2_normalize(z) : frobenius_normalize(z);
}

inline Tensor intermediate_graph(const Tensor& z, SimilarityNorm norm = SimilarityNorm::row) {
  Tensor n = similarity_factor(z, norm);
  return add_scalar(matmul(n, transpose(n)), 1.0);
}

/// Left multiplication by A_hat(Z), or by its GCN normalization, without
/// forming A_hat unless `fast` is off. Degrees of A_hat are N (N^T 1) + n.
inline GraphOperator intermediate_graph_operator(const Tensor& z, SimilarityNorm norm, bool fast,
                                                 bool gcn_norm = false) {
  const Index n_nodes = z.rows();
  Tape& tape = z.tape();
  Tensor n = similarity_factor(z, norm);
  Tensor nt = transpose(n);
  const Tensor ones_row = tape.constant(Matrix::Ones(1, n_nodes), "ones_row");
  const Tensor ones_col = tape.constant(Matrix::Ones(n_nodes, 1), "ones_col");
  auto raw = [n, nt, ones_row, ones_col](const Tensor& h) {
    return add(matmul(n, matmul(nt, h)), matmul(ones_col, matmul(ones_row, h)));
  };
  std::optional<Tensor> dense;
  if (!fast) dense = intermediate_graph(z, norm);
  auto apply_raw = [raw, dense](const Tensor& h) { return dense ? matmul(*dense, h) : raw(h); };
  if (!gcn_norm) return GraphOperator(n_nodes, apply_raw);

  // s = deg^-1/2, broadcast across columns by an outer product with ones.
  Tensor deg = dense ? matmul(*dense, ones_col) : raw(ones_col);
  Tensor s = exp(scale(log(deg), -0.5));
  return GraphOperator(n_nodes, [apply_raw, s](const Tensor& h) {
    Tape& t = h.tape();
    Tensor spread = matmul(s, t.constant(Matrix::Ones(1, h.cols()), "ones_row"));
    return hadamard(spread, apply_raw(hadamard(spread, h)));
  });
}

/// D^-1/2 A_hat D^-1/2 as a dense matrix.
inline Matrix normalized_intermediate_graph(const Matrix& z, SimilarityNorm norm = SimilarityNorm::row) {
  const Matrix a = intermediate_graph(z, norm);
  const Vector s = a.rowwise().sum().cwiseSqrt().cwiseInverse();
  return s.asDiagonal() * a * s.asDiagonal();
}

inline Tensor combine_skip(const Tensor& z, const Tensor& z_star, double lambda, SkipMode mode) {
  if (z.rows() != z_star.rows() || z.cols() != z_star.cols()) {
    throw ShapeError("combine_skip: Z " + z.tape().describe(z.id()) + " vs Z* " +
                     z.tape().describe(z_star.id()));
  }
  if (mode == SkipMode::convex) {
    if (lambda < 0 || lambda > 1) throw ConfigError("combine_skip: convex lambda outside [0, 1]");
    if (lambda == 0.0) return z;
    if (lambda == 1.0) return z_star;
    return add(scale(z, 1.0 - lambda), scale(z_star, lambda));
  }
  return add(z, scale(frobenius_normalize(z_star), lambda));
}

/// Z = mu + sigma * noise.
inline Tensor reparam_sample(const Posterior& q, const Matrix& noise) {
  Tape& tape = q.mu.tape();
  if (!q.log_sigma) return q.mu;
  if (noise.rows() != q.mu.rows() || noise.cols() != q.mu.cols()) {
    throw ShapeError("reparam_sample: noise shape does not match " + tape.describe(q.mu.id()));
  }
  Tensor sigma = exp(*q.log_sigma);
  return add(q.mu, hadamard(sigma, tape.constant(noise, "noise")));
}

/// Sum over nodes and dimensions of KL(N(mu, sigma^2) || N(0, 1)).
inline Tensor kl_to_standard_normal(const Posterior& q) {
  Tape& tape = q.mu.tape();
  if (!q.log_sigma) return tape.scalar(0.0);
  const Tensor& ls = *q.log_sigma;
  const double count = static_cast<double>(q.mu.rows() * q.mu.cols());
  Tensor mu2 = reduce_sum(hadamard(q.mu, q.mu));
  Tensor var = reduce_sum(exp(scale(ls, 2.0)));
  Tensor logvar = reduce_sum(scale(ls, 2.0));
  return scale(add_scalar(sub(add(mu2, var), logvar), -count), 0.5);
}

struct ReconOptions {
  ObservationKind observation = ObservationKind::bernoulli;
  double pos_weight = 1.0;
  bool mean = false;  // mean over entries instead of sum
};

/// Bernoulli: weighted binary cross-entropy of logits vs targets.
/// Gaussian: squared error of the mean matrix vs targets.
inline Tensor reconstruction_loss(const Tensor& logits, std::shared_ptr<const Matrix> target,
                                  const ReconOptions& opt = {}) {
  Tape& tape = logits.tape();
  const double count = static_cast<double>(logits.rows() * logits.cols());
  Tensor total;
  if (opt.observation == ObservationKind::bernoulli) {
    total = weighted_sigmoid_cross_entropy(logits, target, opt.pos_weight);
  } else {
    Tensor diff = sub(logits, tape.constant(*target, "target"));
    total = reduce_sum(hadamard(diff, diff));
  }
  return opt.mean ? scale(total, 1.0 / count) : total;
}

// ---------------------------------------------------------------------------

class GraphiteModel {
 public:
  explicit GraphiteModel(ModelConfig config) : config_(std::move(config)) {
    validate();
    Rng rng(config_.seed);
    init(rng);
  }

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }

  /// Posterior parameters from the GCN encoder.
  Posterior encode(Tape& tape, const GraphOperator& a_norm, const std::optional<Tensor>& x) {
    std::optional<Tensor> h = x;
    for (std::size_t l = 0; l < trunk_specs_.size(); ++l) {
      h = gcn_layer(tape, a_norm, h, trunk_specs_[l], trunk_.layers[l]);
    }
    Posterior q;
    q.mu = gcn_layer(tape, a_norm, h, head_spec_, mu_head_);
    if (log_sigma_head_) {
      q.log_sigma = clamp(gcn_layer(tape, a_norm, h, head_spec_, *log_sigma_head_),
                          config_.log_sigma_min, config_.log_sigma_max);
    }
    return q;
  }

  /// Refines Z into the final embedding. `x` is concatenated to the
  /// embedding in every round when the model uses features.
  Tensor decode(Tape& tape, const Tensor& z, const std::optional<Tensor>& x) {
    Tensor z0 = z;
    for (std::size_t l = 0; l < mlp_.size(); ++l) {
      Tensor w = tape.parameter(mlp_[l].weight);
      z0 = add_bias(matmul(z0, w), tape.parameter(*mlp_[l].bias));
      if (l + 1 < mlp_.size()) z0 = activate(z0, config_.hidden_activation);
    }
    if (decoder_specs_.empty()) return z0;

    std::vector<Tensor> induced{z0};
    Tensor current = z0;
    const bool concat = config_.decoder_uses_features && x.has_value();
    for (std::size_t r = 0; r < decoder_specs_.size(); ++r) {
      GraphOperator a_hat = intermediate_graph_operator(current, config_.norm, config_.fast_decode,
                                                        config_.decoder_gcn_norm);
      std::optional<Tensor> input = concat ? concat_cols({current, *x}) : current;
      current = gnn_layer(tape, std::span<const GraphOperator>(&a_hat, 1), input,
                          decoder_specs_[r], decoder_.layers[r]);
      induced.push_back(current);
    }
    if (config_.combine_all_rounds) {
      Tensor out = scale(induced[0], config_.combine_weights[0]);
      for (std::size_t k = 1; k < induced.size(); ++k) {
        out = add(out, scale(induced[k], config_.combine_weights[k]));
      }
      return out;
    }
    return combine_skip(z0, current, config_.lambda, config_.skip);
  }

  /// Encode, sample (VAE) or take the mean (AE, or `noise == nullptr`), decode.
  ForwardPass forward(Tape& tape, const GraphOperator& a_norm, const std::optional<Matrix>& x,
                      const Matrix* noise) {
    std::optional<Tensor> xt;
    if (x) xt = tape.constant(*x, "features");
    ForwardPass out;
    out.posterior = encode(tape, a_norm, xt);
    out.z = (noise != nullptr && out.posterior.log_sigma) ? reparam_sample(out.posterior, *noise)
                                                          : out.posterior.mu;
    out.z_final = decode(tape, out.z, xt);
    return out;
  }

  static Tensor logits(const Tensor& z_final) { return matmul(z_final, transpose(z_final)); }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out = trunk_.parameters();
    out.push_back(&mu_head_.weight);
    if (mu_head_.bias) out.push_back(&*mu_head_.bias);
    if (log_sigma_head_) {
      out.push_back(&log_sigma_head_->weight);
      if (log_sigma_head_->bias) out.push_back(&*log_sigma_head_->bias);
    }
    for (auto& l : mlp_) {
      out.push_back(&l.weight);
      out.push_back(&*l.bias);
    }
    for (Parameter* p : decoder_.parameters()) out.push_back(p);
    return out;
  }

  std::vector<Matrix> snapshot() {
    std::vector<Matrix> s;
    for (Parameter* p : parameters()) s.push_back(p->value);
    return s;
  }

  void restore(const std::vector<Matrix>& s) {
    auto params = parameters();
    if (s.size() != params.size()) throw ShapeError("restore: snapshot size mismatch");
    for (std::size_t k = 0; k < s.size(); ++k) params[k]->value = s[k];
  }

  void zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
  }

  const std::vector<GnnLayerSpec>& trunk_specs() const { return trunk_specs_; }
  const GnnLayerSpec& head_spec() const { return head_spec_; }
  const std::vector<GnnLayerSpec>& decoder_specs() const { return decoder_specs_; }

 private:
  void validate() {
    auto& c = config_;
    if (c.node_count <= 0 && c.feature_dim <= 0) {
      throw ConfigError("model: need a node count (featureless) or a feature width");
    }
    if (c.bias == BiasMode::full && c.node_count <= 0) {
      throw ConfigError("model: full biases need the node count");
    }
    if (c.latent_dim <= 0) throw ConfigError("model: latent_dim must be positive");
    if (has_refinement(c.kind)) {
      if (c.decoder_dims.empty()) throw ConfigError("model: Graphite needs at least one round");
      if (c.combine_all_rounds) {
        for (Index d : c.decoder_dims) {
          if (d != c.embedding_dim()) {
            throw ConfigError("model: blending all rounds needs every round width = embedding width");
          }
        }
        if (c.combine_weights.empty()) {
          c.combine_weights.assign(c.decoder_dims.size() + 1,
                                   1.0 / static_cast<double>(c.decoder_dims.size() + 1));
        }
        if (c.combine_weights.size() != c.decoder_dims.size() + 1) {
          throw ConfigError("model: combine_weights needs one weight per induced embedding");
        }
        double total = 0;
        for (double w : c.combine_weights) {
          if (w < 0) throw ConfigError("model: combine_weights must be non-negative");
          total += w;
        }
        if (std::abs(total - 1.0) > 1e-9) throw ConfigError("model: combine_weights must sum to 1");
      } else if (c.decoder_dims.back() != c.embedding_dim()) {
        throw ConfigError("model: last decoder width must equal the embedding width");
      }
      if (c.skip == SkipMode::convex && (c.lambda < 0 || c.lambda > 1)) {
        throw ConfigError("model: convex lambda must lie in [0, 1]");
      }
    }
  }

  void init(Rng& rng) {
    const auto& c = config_;
    Index in = c.input_dim();
    for (Index width : c.encoder_hidden) {
      trunk_specs_.push_back({in, width, c.hidden_activation, c.bias});
      in = width;
    }
    trunk_ = init_gnn_params(trunk_specs_, rng, "encoder", c.node_count);
    head_spec_ = {in, c.latent_dim, Activation::identity, c.bias};
    mu_head_ = std::move(init_gnn_params(std::span(&head_spec_, 1), rng, "encoder.mu",
                                         c.node_count).layers[0]);
    if (is_variational(c.kind)) {
      log_sigma_head_ = std::move(init_gnn_params(std::span(&head_spec_, 1), rng,
                                                  "encoder.log_sigma", c.node_count).layers[0]);
    }
    Index width = c.latent_dim;
    for (std::size_t l = 0; l < c.latent_mlp.size(); ++l) {
      GnnLayerParams lp;
      const std::string base = "latent_mlp." + std::to_string(l);
      lp.weight = Parameter(base + ".weight", glorot_uniform(width, c.latent_mlp[l], rng));
      lp.bias = Parameter(base + ".bias", Matrix::Zero(1, c.latent_mlp[l]));
      mlp_.push_back(std::move(lp));
      width = c.latent_mlp[l];
    }
    if (has_refinement(c.kind)) {
      const bool concat = c.decoder_uses_features && c.feature_dim > 0;
      for (std::size_t r = 0; r < c.decoder_dims.size(); ++r) {
        const bool last = r + 1 == c.decoder_dims.size();
        const Activation act =
            (last || c.combine_all_rounds) ? Activation::identity : c.hidden_activation;
        decoder_specs_.push_back({width + (concat ? c.feature_dim : 0), c.decoder_dims[r], act,
                                  c.bias});
        width = c.decoder_dims[r];
      }
      decoder_ = init_gnn_params(decoder_specs_, rng, "decoder", c.node_count);
    }
  }

  ModelConfig config_;
  std::vector<GnnLayerSpec> trunk_specs_;
  GnnParams trunk_;
  GnnLayerSpec head_spec_;
  GnnLayerParams mu_head_;
  std::optional<GnnLayerParams> log_sigma_head_;
  std::vector<GnnLayerParams> mlp_;
  std::vector<GnnLayerSpec> decoder_specs_;
  GnnParams decoder_;
};

// ---------------------------------------------------------------------------
// Objectives.

struct ObjectiveOptions {
  ReconOptions recon{};
  /// loss = recon_scale * recon + kl_scale * KL. The true negative ELBO uses 1, 1.
  double recon_scale = 1.0;
  double kl_scale = 1.0;
};

struct ObjectiveTerms {
  Tensor loss;
  Tensor recon;
  Tensor kl;
  ForwardPass pass;
};

/// Negative ELBO (VAE kinds) or reconstruction loss (AE kinds) of one graph.
/// `noise` is ignored for deterministic models.
inline ObjectiveTerms objective(Tape& tape, GraphiteModel& model, const GraphOperator& a_norm,
                                const std::optional<Matrix>& x,
                                std::shared_ptr<const Matrix> target, const Matrix* noise,
                                const ObjectiveOptions& opt = {}) {
  ObjectiveTerms t;
  t.pass = model.forward(tape, a_norm, x, noise);
  t.recon = reconstruction_loss(GraphiteModel::logits(t.pass.z_final), std::move(target), opt.recon);
  t.kl = kl_to_standard_normal(t.pass.posterior);
  t.loss = scale(t.recon, opt.recon_scale);
  if (t.pass.posterior.log_sigma) t.loss = add(t.loss, scale(t.kl, opt.kl_scale));
  return t;
}

/// Single-sample ELBO = -recon - KL (sum reduction, unit scales).
inline double elbo(GraphiteModel& model, const GraphOperator& a_norm,
                   const std::optional<Matrix>& x, const Matrix& target, const Matrix& noise,
                   const ReconOptions& recon = {}) {
  Tape tape;
  ObjectiveOptions opt;
  opt.recon = recon;
  opt.recon.mean = false;
  auto t = objective(tape, model, a_norm, x, std::make_shared<const Matrix>(target), &noise, opt);
  return -t.loss.item();
}

/// Reconstruction loss of the deterministic (mean) path.
inline double ae_loss(GraphiteModel& model, const GraphOperator& a_norm,
                      const std::optional<Matrix>& x, const Matrix& target,
                      const ReconOptions& recon = {}) {
  Tape tape;
  ForwardPass pass = model.forward(tape, a_norm, x, nullptr);
  return reconstruction_loss(GraphiteModel::logits(pass.z_final),
                             std::make_shared<const Matrix>(target), recon)
      .item();
}

/// Unbiased Monte Carlo estimate of the summed reconstruction loss from
/// `count` entries drawn uniformly with replacement. With `stratified` and a
/// count that is a multiple of n^2, every entry is used count / n^2 times
/// instead. Only Gram entries for the drawn pairs are formed.
inline Tensor mc_subsample_recon(const Tensor& z_final, const Matrix& target, std::size_t count,
                                 Rng& rng, const ReconOptions& opt = {}, bool stratified = false) {
  if (count == 0) throw ConfigError("mc_subsample_recon: count must be at least 1");
  const Index n = z_final.rows();
  const auto n2 = static_cast<std::size_t>(n * n);
  auto pairs = std::make_shared<std::vector<std::pair<Index, Index>>>();
  pairs->reserve(count);
  if (stratified && count % n2 == 0) {
    for (std::size_t rep = 0; rep < count / n2; ++rep) {
      for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < n; ++j) pairs->emplace_back(i, j);
      }
    }
  } else {
    std::uniform_int_distribution<Index> pick(0, n - 1);
    for (std::size_t k = 0; k < count; ++k) {
      const Index i = pick(rng);
      const Index j = pick(rng);
      pairs->emplace_back(i, j);
    }
  }
  auto sampled_targets = std::make_shared<Matrix>(static_cast<Index>(pairs->size()), 1);
  for (std::size_t k = 0; k < pairs->size(); ++k) {
    (*sampled_targets)(static_cast<Index>(k), 0) = target((*pairs)[k].first, (*pairs)[k].second);
  }
  Tensor dots = pair_dots(z_final, pairs);
  ReconOptions sum_opt = opt;
  sum_opt.mean = false;
  Tensor total = reconstruction_loss(dots, sampled_targets, sum_opt);
  return scale(total, static_cast<double>(n2) / static_cast<double>(count));
}

}  // namespace graphite
