#pragma once

// Experiment harnesses: link prediction, density estimation and
// semi-supervised node classification.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <future>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "graphite/adam.hpp"
#include "graphite/generators.hpp"
#include "graphite/metrics.hpp"
#include "graphite/model.hpp"

namespace graphite {

enum class TaskKind { link, density, classify };

inline std::string_view to_string(TaskKind t) {
  switch (t) {
    case TaskKind::link: return "link";
    case TaskKind::density: return "density";
    case TaskKind::classify: return "classify";
  }
  return "?";
}

inline TaskKind parse_task(std::string_view s) {
  if (s == "link" || s == "link-prediction") return TaskKind::link;
  if (s == "density" || s == "density-estimation") return TaskKind::density;
  if (s == "classify" || s == "node-classification") return TaskKind::classify;
  throw ConfigError("unknown task '" + std::string(s) + "'");
}

struct RunConfig {
  TaskKind task = TaskKind::link;
  ModelKind model = ModelKind::graphite_vae;

  // Architecture.
  std::vector<Index> encoder_hidden{32};
  Index latent_dim = 16;
  std::vector<Index> decoder_dims{32, 16};
  std::vector<Index> latent_mlp{};
  bool combine_all_rounds = false;
  SimilarityNorm norm = SimilarityNorm::row;
  bool decoder_gcn_norm = true;
  bool self_loops = true;  // encoder propagates over D^-1/2 (A + I) D^-1/2
  bool use_features = true;
  bool normalize_features = false;

  // Grids searched per seed on the validation metric.
  std::vector<double> lambda_grid{0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<double> dropout_grid{0.0, 0.25, 0.5};
  std::vector<SkipMode> skip_grid{SkipMode::convex};
  std::vector<double> gamma_grid{0.1, 0.5, 1.0};

  // Optimization.
  double learning_rate = 0.01;
  int iterations = 500;
  int eval_every = 1;
  int patience = 10;
  int seeds = 10;
  std::uint64_t base_seed = 0;

  // Data.
  std::string dataset;  // directory for ingest_citation_dataset
  std::optional<GraphFamily> family;
  Index nodes = 0;  // synthetic link/classify graphs
  Index graph_count = 300;
  Index n_min = 10;
  Index n_max = 20;
  double val_frac = 0.05;
  double test_frac = 0.10;
  int labels_per_class = 20;
  int val_nodes = 500;
  int test_nodes = 1000;

  // Objective and evaluation.
  std::size_t subsample_count = 0;  // 0 = exact reconstruction term
  bool weighted = true;             // pos_weight and norm of the sparse-graph objective
  int eval_samples = 1;
  bool importance_weighted = false;

  void validate() const {
    if (iterations <= 0) throw ConfigError("iters must be positive");
    if (seeds <= 0) throw ConfigError("seeds must be positive");
    if (eval_every <= 0) throw ConfigError("eval_every must be positive");
    if (!(learning_rate > 0)) throw ConfigError("lr must be positive");
    if (lambda_grid.empty() || dropout_grid.empty() || skip_grid.empty() || gamma_grid.empty()) {
      throw ConfigError("hyperparameter grids must be non-empty");
    }
    for (double d : dropout_grid)
      if (d < 0 || d >= 1) throw ConfigError("edge dropout must lie in [0, 1)");
    for (double g : gamma_grid)
      if (g < 0) throw ConfigError("gamma must be non-negative");
    if (eval_samples <= 0) throw ConfigError("eval_samples must be positive");
    if (task == TaskKind::density) {
      if (!family) throw ConfigError("density task needs a graph family");
      if (graph_count < 3) throw ConfigError("density task needs at least 3 graphs");
      if (n_min < 1 || n_min > n_max) throw ConfigError("need 1 <= n_min <= n_max");
    } else if (dataset.empty() && !(family && nodes > 0)) {
      throw ConfigError("need a dataset directory or a family with a node count");
    }
  }
};

/// Task defaults; density follows the small-graph architecture.
inline RunConfig default_run_config(TaskKind task) {
  RunConfig c;
  c.task = task;
  if (task == TaskKind::density) {
    c.latent_mlp = {16, 16};
    c.decoder_dims = {16, 16};
    c.combine_all_rounds = true;
    c.self_loops = false;
    c.use_features = false;
    c.weighted = false;
    c.eval_every = 10;
    c.eval_samples = 10;
    c.family = GraphFamily::erdos_renyi;
  } else if (task == TaskKind::classify) {
    c.normalize_features = true;
    c.iterations = 200;
  }
  return c;
}

struct RunRecord {
  std::uint64_t seed = 0;
  nlohmann::json selected;  // chosen hyperparameters
  std::map<std::string, double> metrics;
};

struct TaskReport {
  TaskKind task = TaskKind::link;
  ModelKind model = ModelKind::graphite_vae;
  std::vector<RunRecord> runs;

  MeanSe summary(const std::string& metric) const {
    std::vector<double> v;
    for (const auto& r : runs) {
      auto it = r.metrics.find(metric);
      if (it != r.metrics.end()) v.push_back(it->second);
    }
    return mean_se(v);
  }
};

inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline nlohmann::json to_json(const TaskReport& r, std::string_view config_hash = {}) {
  nlohmann::json j;
  j["task"] = to_string(r.task);
  j["model"] = to_string(r.model);
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  j["runs"] = nlohmann::json::array();
  std::map<std::string, int> names;
  for (const auto& run : r.runs) {
    j["runs"].push_back({{"seed", run.seed}, {"selected", run.selected}, {"metrics", run.metrics}});
    for (const auto& [k, v] : run.metrics) names[k] = 1;
  }
  for (const auto& [k, unused] : names) {
    const MeanSe s = r.summary(k);
    j["summary"][k] = {{"mean", s.mean}, {"se", s.se}, {"count", s.count}};
  }
  return j;
}

/// One row per run: config hash, seed, then metrics in name order.
inline std::string to_csv(const TaskReport& r, std::string_view config_hash) {
  std::map<std::string, int> names;
  for (const auto& run : r.runs)
    for (const auto& [k, v] : run.metrics) names[k] = 1;
  std::string out = "config_hash,seed";
  for (const auto& [k, unused] : names) out += "," + k;
  out += "\n";
  char buf[40];
  for (const auto& run : r.runs) {
    out += std::string(config_hash) + "," + std::to_string(run.seed);
    for (const auto& [k, unused] : names) {
      auto it = run.metrics.find(k);
      if (it == run.metrics.end()) {
        out += ",";
      } else {
        std::snprintf(buf, sizeof(buf), ",%.17g", it->second);
        out += buf;
      }
    }
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared pieces.

namespace detail {

inline Matrix gaussian_noise(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = nd(rng);
  return m;
}

/// Rows scaled to sum to 1; zero rows stay zero.
inline Matrix row_normalize_features(const Matrix& x) {
  Matrix out = x;
  for (Index i = 0; i < x.rows(); ++i) {
    const double s = x.row(i).sum();
    if (s != 0) out.row(i) /= s;
  }
  return out;
}

/// Keeps each off-diagonal pair with probability 1 - rate (symmetrically)
/// and rescales kept entries by 1 / (1 - rate). Diagonal entries stay.
inline SparseMatrix edge_dropout(const SparseMatrix& a, double rate, Rng& rng) {
  if (rate <= 0) return a;
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<Eigen::Triplet<double>> t;
  t.reserve(static_cast<std::size_t>(a.nonZeros()));
  const double s = 1.0 / (1.0 - rate);
  for (Index k = 0; k < a.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(a, k); it; ++it) {
      if (it.row() == it.col()) {
        t.emplace_back(it.row(), it.col(), it.value());
      } else if (it.row() < it.col() && keep(rng)) {
        t.emplace_back(it.row(), it.col(), it.value() * s);
        t.emplace_back(it.col(), it.row(), a.coeff(it.col(), it.row()) * s);
      }
    }
  }
  SparseMatrix out(a.rows(), a.cols());
  out.setFromTriplets(t.begin(), t.end());
  return out;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Runs `work(seed_index)` for every seed, `jobs` at a time, in seed order.
template <typename T, typename F>
std::vector<T> run_seeds(int seeds, int jobs, F&& work) {
  std::vector<T> out(static_cast<std::size_t>(seeds));
  jobs = std::max(1, jobs);
  for (int start = 0; start < seeds; start += jobs) {
    std::vector<std::future<T>> batch;
    for (int s = start; s < std::min(seeds, start + jobs); ++s) {
      batch.push_back(std::async(jobs == 1 ? std::launch::deferred : std::launch::async, work, s));
    }
    for (std::size_t k = 0; k < batch.size(); ++k) out[static_cast<std::size_t>(start) + k] = batch[k].get();
  }
  return out;
}

inline double bce(double logit, int label) {
  return label ? softplus(-logit) : softplus(logit);
}

}  // namespace detail

inline ModelConfig model_config_for(const RunConfig& rc, Index node_count, Index feature_dim) {
  ModelConfig c;
  c.kind = rc.model;
  c.node_count = node_count;
  c.feature_dim = rc.use_features ? feature_dim : 0;
  c.encoder_hidden = rc.encoder_hidden;
  c.latent_dim = rc.latent_dim;
  c.decoder_dims = rc.decoder_dims;
  c.latent_mlp = rc.latent_mlp;
  c.combine_all_rounds = rc.combine_all_rounds;
  c.norm = rc.norm;
  c.decoder_gcn_norm = rc.decoder_gcn_norm;
  return c;
}

/// Weights of the sparse-graph objective: positive entries weighted by
/// (n^2 - nnz) / nnz and the reconstruction sum scaled by norm / n^2, with
/// norm = n^2 / (2 (n^2 - nnz)). KL is averaged over n^2 as well.
struct SparseObjectiveWeights {
  double pos_weight = 1.0;
  double recon_scale = 1.0;
  double kl_scale = 1.0;
};

inline SparseObjectiveWeights sparse_objective_weights(Index n, double nnz) {
  const double n2 = static_cast<double>(n) * static_cast<double>(n);
  if (!(nnz > 0) || nnz >= n2) throw DataError("sparse objective needs 0 < nnz < n^2");
  SparseObjectiveWeights w;
  w.pos_weight = (n2 - nnz) / nnz;
  w.recon_scale = (n2 / (2.0 * (n2 - nnz))) / n2;
  w.kl_scale = 1.0 / n2;
  return w;
}

// ---------------------------------------------------------------------------
// Link prediction.

struct LinkHyper {
  double lambda = 0.5;
  double dropout = 0.0;
  SkipMode skip = SkipMode::convex;
};

struct LinkResult {
  LinkHyper hyper;
  double val_auc = 0, val_ap = 0, test_auc = 0, test_ap = 0;
  double best_val_loss = 0;
  int best_iteration = 0;
};

namespace detail {

struct PairSet {
  std::vector<NodePair> pairs;
  std::vector<int> labels;
};

inline PairSet labeled_pairs(const std::vector<NodePair>& pos, const std::vector<NodePair>& neg) {
  PairSet s;
  s.pairs = pos;
  s.pairs.insert(s.pairs.end(), neg.begin(), neg.end());
  s.labels.assign(pos.size(), 1);
  s.labels.resize(s.pairs.size(), 0);
  return s;
}

inline std::vector<double> pair_logits(const Matrix& z, const std::vector<NodePair>& pairs) {
  std::vector<double> out;
  out.reserve(pairs.size());
  for (auto [u, v] : pairs) out.push_back(z.row(u).dot(z.row(v)));
  return out;
}

inline std::vector<double> logistic_all(const std::vector<double>& logits) {
  std::vector<double> out(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) out[k] = logistic(logits[k]);
  return out;
}

}  // namespace detail

/// Deterministic embedding (posterior mean through the decoder).
inline Matrix mean_embedding(GraphiteModel& model, const GraphOperator& a_norm, const std::optional<Matrix>& x) {
  Tape tape;
  return model.forward(tape, a_norm, x, nullptr).z_final.value();
}

/// Trains one model on `split.train_graph` and evaluates the checkpoint with
/// the lowest validation loss.
inline LinkResult train_link_model(const EdgeSplit& split, const RunConfig& rc, const LinkHyper& hyper,
                                   std::uint64_t seed, std::optional<GraphiteModel>* out_model = nullptr) {
  const Graph& g = split.train_graph;
  const Index n = g.node_count();
  std::optional<Matrix> x;
  if (rc.use_features && g.features) {
    x = rc.normalize_features ? detail::row_normalize_features(*g.features) : *g.features;
  }
  ModelConfig mc = model_config_for(rc, n, x ? x->cols() : 0);
  mc.lambda = hyper.lambda;
  mc.skip = hyper.skip;
  mc.seed = detail::mix_seed(seed, 1);
  GraphiteModel model(mc);

  const SparseMatrix a_norm = normalize_sym(g, rc.self_loops);
  auto target = std::make_shared<const Matrix>(reconstruction_target(g));
  SparseObjectiveWeights w;
  if (rc.weighted) w = sparse_objective_weights(n, static_cast<double>(g.adjacency().nonZeros()));
  ObjectiveOptions opt;
  opt.recon.pos_weight = w.pos_weight;
  opt.recon_scale = w.recon_scale;
  opt.kl_scale = w.kl_scale;

  const auto val = detail::labeled_pairs(split.val_pos, split.val_neg);
  const auto test = detail::labeled_pairs(split.test_pos, split.test_neg);
  Rng rng(detail::mix_seed(seed, 2));
  Adam adam(AdamOptions{rc.learning_rate});
  auto params = model.parameters();

  LinkResult result;
  result.hyper = hyper;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<Matrix> best = model.snapshot();
  auto shared_norm = std::make_shared<const SparseMatrix>(a_norm);
  for (int it = 1; it <= rc.iterations; ++it) {
    model.zero_grad();
    Tape tape;
    GraphOperator op = hyper.dropout > 0
                           ? GraphOperator::sparse(detail::edge_dropout(a_norm, hyper.dropout, rng))
                           : GraphOperator::sparse(shared_norm);
    Matrix noise;
    if (is_variational(mc.kind)) noise = detail::gaussian_noise(n, mc.latent_dim, rng);
    const Matrix* noise_ptr = is_variational(mc.kind) ? &noise : nullptr;
    Tensor loss;
    if (rc.subsample_count > 0) {
      ForwardPass pass = model.forward(tape, op, x, noise_ptr);
      Tensor recon = mc_subsample_recon(pass.z_final, *target, rc.subsample_count, rng, opt.recon);
      loss = scale(recon, opt.recon_scale);
      if (pass.posterior.log_sigma) loss = add(loss, scale(kl_to_standard_normal(pass.posterior), opt.kl_scale));
    } else {
      loss = objective(tape, model, op, x, target, noise_ptr, opt).loss;
    }
    tape.backward(loss);
    adam.step(params);

    if (it % rc.eval_every == 0 || it == rc.iterations) {
      const Matrix z = mean_embedding(model, GraphOperator::sparse(shared_norm), x);
      const auto logits = detail::pair_logits(z, val.pairs);
      double vl = 0;
      for (std::size_t k = 0; k < logits.size(); ++k) vl += detail::bce(logits[k], val.labels[k]);
      vl = val.pairs.empty() ? 0.0 : vl / static_cast<double>(val.pairs.size());
      if (vl < result.best_val_loss) {
        result.best_val_loss = vl;
        result.best_iteration = it;
        best = model.snapshot();
      }
    }
  }
  model.restore(best);
  const Matrix z = mean_embedding(model, GraphOperator::sparse(shared_norm), x);
  if (!val.pairs.empty()) {
    const auto s = detail::logistic_all(detail::pair_logits(z, val.pairs));
    result.val_auc = auc(s, val.labels);
    result.val_ap = average_precision(s, val.labels);
  }
  if (!test.pairs.empty()) {
    const auto s = detail::logistic_all(detail::pair_logits(z, test.pairs));
    result.test_auc = auc(s, test.labels);
    result.test_ap = average_precision(s, test.labels);
  }
  if (out_model != nullptr) *out_model = std::move(model);
  return result;
}

inline std::vector<LinkHyper> link_grid(const RunConfig& rc) {
  std::vector<LinkHyper> grid;
  const bool refine = has_refinement(rc.model);
  for (double d : rc.dropout_grid) {
    if (!refine) {
      grid.push_back({0.0, d, SkipMode::convex});
      continue;
    }
    for (SkipMode m : rc.skip_grid)
      for (double l : rc.lambda_grid) grid.push_back({l, d, m});
  }
  return grid;
}

inline nlohmann::json to_json(const LinkHyper& h) {
  return {{"lambda", h.lambda}, {"edge_dropout", h.dropout}, {"skip", to_string(h.skip)}};
}

/// Per seed: split, train every grid point, keep the best validation AUC.
/// The input is reduced to its largest connected component.
/// `first_model` (optional) receives the selected model of the first seed.
inline TaskReport link_prediction_run(const Graph& input, const RunConfig& rc, int jobs = 1,
                                      std::optional<GraphiteModel>* first_model = nullptr) {
  rc.validate();
  const Graph g = largest_connected_component(input);
  if (g.node_count() != input.node_count()) {
    logging::info("link prediction: using the largest component (", g.node_count(), " of ", input.node_count(),
                  " nodes)");
  }
  TaskReport report;
  report.task = TaskKind::link;
  report.model = rc.model;
  const auto grid = link_grid(rc);
  report.runs = detail::run_seeds<RunRecord>(rc.seeds, jobs, [&](int s) {
    const std::uint64_t seed = rc.base_seed + static_cast<std::uint64_t>(s);
    const EdgeSplit split = split_edges(g, rc.val_frac, rc.test_frac, detail::mix_seed(seed, 0));
    std::optional<LinkResult> best;
    std::optional<GraphiteModel> kept;
    for (const auto& h : grid) {
      std::optional<GraphiteModel> trained;
      LinkResult r = train_link_model(split, rc, h, seed, &trained);
      logging::debug("seed ", seed, " lambda ", h.lambda, " dropout ", h.dropout, " val auc ", r.val_auc);
      if (!best || r.val_auc > best->val_auc) {
        best = r;
        if (first_model != nullptr && s == 0) kept = std::move(trained);
      }
    }
    if (first_model != nullptr && s == 0) *first_model = std::move(kept);
    RunRecord rec;
    rec.seed = seed;
    rec.selected = to_json(best->hyper);
    rec.selected["best_iteration"] = best->best_iteration;
    rec.metrics = {{"val_auc", best->val_auc}, {"val_ap", best->val_ap},
                   {"test_auc", best->test_auc}, {"test_ap", best->test_ap}};
    return rec;
  });
  return report;
}

// ---------------------------------------------------------------------------
// Density estimation.

struct GraphExample {
  Graph graph;  // padded
  Index true_nodes = 0;
  std::shared_ptr<const SparseMatrix> a_norm;
  std::shared_ptr<const Matrix> target;
};

inline GraphExample make_example(const Graph& padded, Index true_nodes, bool self_loops) {
  GraphExample e;
  e.graph = padded;
  e.true_nodes = true_nodes;
  e.a_norm = std::make_shared<const SparseMatrix>(normalize_sym(padded, self_loops));
  e.target = std::make_shared<const Matrix>(reconstruction_target(padded));
  return e;
}

/// `count` graphs with uniform node counts in [n_min, n_max], reduced to the
/// largest component and padded with dummy nodes to n_max.
inline std::vector<GraphExample> density_dataset(GraphFamily family, Index count, Index n_min, Index n_max,
                                                 std::uint64_t seed, bool self_loops = false) {
  Rng rng(seed);
  std::uniform_int_distribution<Index> size(n_min, n_max);
  std::vector<GraphExample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (Index k = 0; k < count; ++k) {
    const Graph g = largest_connected_component(generate(family, size(rng), rng));
    out.push_back(make_example(pad_with_dummy_nodes(g, n_max), g.node_count(), self_loops));
  }
  return out;
}

namespace detail {

inline double log_normal_density_sum(const Matrix& z, const Matrix& mu, const Matrix& log_sigma) {
  const double c = 0.5 * std::log(2.0 * std::numbers::pi);
  double s = 0;
  for (Index i = 0; i < z.size(); ++i) {
    const double u = (z.data()[i] - mu.data()[i]) * std::exp(-log_sigma.data()[i]);
    s += -0.5 * u * u - log_sigma.data()[i] - c;
  }
  return s;
}

}  // namespace detail

/// Negative ELBO (VAE kinds, averaged over `samples` draws) or reconstruction
/// error (AE kinds) of one graph. With `importance_weighted`, the VAE value
/// is -log (1/S) sum_s p(A, z_s) / q(z_s) instead.
inline double graph_nll(GraphiteModel& model, const GraphExample& e, int samples, Rng& rng,
                        bool importance_weighted = false) {
  const GraphOperator op = GraphOperator::sparse(e.a_norm);
  if (!is_variational(model.config().kind)) {
    Tape tape;
    ForwardPass pass = model.forward(tape, op, std::nullopt, nullptr);
    return reconstruction_loss(GraphiteModel::logits(pass.z_final), e.target).item();
  }
  std::vector<double> values;
  for (int s = 0; s < samples; ++s) {
    Tape tape;
    const Matrix noise = detail::gaussian_noise(e.graph.node_count(), model.config().latent_dim, rng);
    ObjectiveTerms t = objective(tape, model, op, std::nullopt, e.target, &noise);
    if (!importance_weighted) {
      values.push_back(t.loss.item());
      continue;
    }
    const Matrix mu = t.pass.posterior.mu.value();
    const Matrix ls = t.pass.posterior.log_sigma->value();
    const Matrix z = t.pass.z.value();
    const Matrix zero = Matrix::Zero(z.rows(), z.cols());
    values.push_back(-t.recon.item() + detail::log_normal_density_sum(z, zero, zero) -
                     detail::log_normal_density_sum(z, mu, ls));
  }
  if (!importance_weighted) return std::accumulate(values.begin(), values.end(), 0.0) / samples;
  const double top = *std::max_element(values.begin(), values.end());
  double acc = 0;
  for (double v : values) acc += std::exp(v - top);
  return -(top + std::log(acc / samples));
}

inline double mean_nll(GraphiteModel& model, const std::vector<GraphExample>& set, int samples, Rng& rng,
                       bool importance_weighted = false) {
  double total = 0;
  for (const auto& e : set) total += graph_nll(model, e, samples, rng, importance_weighted);
  return total / static_cast<double>(set.size());
}

struct DensityResult {
  double train_nll = 0, val_nll = 0, test_nll = 0;
  int best_iteration = 0;
};

/// Full-batch training on `train`: each step averages the objective over all
/// training graphs. The checkpoint with the best validation value is kept.
inline DensityResult train_density_model(GraphiteModel& model, const std::vector<GraphExample>& train,
                                         const std::vector<GraphExample>& val, const std::vector<GraphExample>& test,
                                         const RunConfig& rc, std::uint64_t seed) {
  Rng rng(detail::mix_seed(seed, 3));
  Adam adam(AdamOptions{rc.learning_rate});
  auto params = model.parameters();
  const bool vae = is_variational(model.config().kind);
  const double inv = 1.0 / static_cast<double>(train.size());
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<Matrix> best = model.snapshot();
  DensityResult r;
  for (int it = 1; it <= rc.iterations; ++it) {
    model.zero_grad();
    double total = 0;
    for (const auto& e : train) {
      Tape tape;
      Matrix noise;
      if (vae) noise = detail::gaussian_noise(e.graph.node_count(), model.config().latent_dim, rng);
      ObjectiveTerms t = objective(tape, model, GraphOperator::sparse(e.a_norm), std::nullopt, e.target,
                                   vae ? &noise : nullptr);
      Tensor loss = scale(t.loss, inv);
      total += loss.item();
      tape.backward(loss);
    }
    adam.step(params);
    if (it % rc.eval_every == 0 || it == rc.iterations) {
      Rng eval_rng(detail::mix_seed(seed, 4));  // common noise across checkpoints
      const double v = mean_nll(model, val, 1, eval_rng);
      logging::debug("density it ", it, " train ", total, " val ", v);
      if (v < best_val) {
        best_val = v;
        r.best_iteration = it;
        best = model.snapshot();
      }
    }
  }
  model.restore(best);
  Rng eval_rng(detail::mix_seed(seed, 5));
  r.train_nll = mean_nll(model, train, rc.eval_samples, eval_rng);
  r.val_nll = mean_nll(model, val, rc.eval_samples, eval_rng);
  r.test_nll = mean_nll(model, test, rc.eval_samples, eval_rng, rc.importance_weighted);
  return r;
}

/// graph_count graphs split evenly into train/val/test; one model per seed.
inline TaskReport density_estimation_run(const RunConfig& rc, int jobs = 1,
                                         std::optional<GraphiteModel>* first_model = nullptr) {
  rc.validate();
  TaskReport report;
  report.task = TaskKind::density;
  report.model = rc.model;
  report.runs = detail::run_seeds<RunRecord>(rc.seeds, jobs, [&](int s) {
    const std::uint64_t seed = rc.base_seed + static_cast<std::uint64_t>(s);
    auto all = density_dataset(*rc.family, rc.graph_count, rc.n_min, rc.n_max, detail::mix_seed(seed, 0),
                               rc.self_loops);
    const auto third = static_cast<std::ptrdiff_t>(all.size() / 3);
    std::vector<GraphExample> train(all.begin(), all.begin() + third);
    std::vector<GraphExample> val(all.begin() + third, all.begin() + 2 * third);
    std::vector<GraphExample> test(all.begin() + 2 * third, all.end());
    // Lambda: the first grid value (blending all rounds ignores it).
    ModelConfig mc = model_config_for(rc, rc.n_max, 0);
    mc.lambda = rc.lambda_grid.front();
    mc.skip = rc.skip_grid.front();
    mc.seed = detail::mix_seed(seed, 1);
    GraphiteModel model(mc);
    DensityResult r = train_density_model(model, train, val, test, rc, seed);
    if (first_model != nullptr && s == 0) *first_model = std::move(model);
    RunRecord rec;
    rec.seed = seed;
    rec.selected = {{"best_iteration", r.best_iteration}, {"family", to_string(*rc.family)}};
    const std::string key = is_variational(rc.model) ? "neg_elbo" : "recon_error";
    rec.metrics = {{"train_" + key, r.train_nll}, {"val_" + key, r.val_nll}, {"test_" + key, r.test_nll}};
    return rec;
  });
  return report;
}

// ---------------------------------------------------------------------------
// Node classification.

struct NodeSplit {
  std::vector<Index> train, val, test;
};

/// `per_class` labeled nodes of every class, then `val` and `test` nodes from
/// the rest, all chosen by one seeded shuffle.
inline NodeSplit split_nodes(const std::vector<int>& labels, int classes, int per_class, int val, int test,
                             std::uint64_t seed) {
  std::vector<Index> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  NodeSplit s;
  std::vector<int> taken(static_cast<std::size_t>(classes), 0);
  std::vector<Index> rest;
  for (Index v : order) {
    const int y = labels[static_cast<std::size_t>(v)];
    if (y < 0) continue;
    if (taken[static_cast<std::size_t>(y)] < per_class) {
      ++taken[static_cast<std::size_t>(y)];
      s.train.push_back(v);
    } else {
      rest.push_back(v);
    }
  }
  for (int c = 0; c < classes; ++c) {
    if (taken[static_cast<std::size_t>(c)] == 0) throw DataError("class " + std::to_string(c) + " has no labeled node");
  }
  const auto nv = std::min<std::size_t>(static_cast<std::size_t>(val), rest.size());
  const auto nt = std::min<std::size_t>(static_cast<std::size_t>(test), rest.size() - nv);
  s.val.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(nv));
  s.test.assign(rest.begin() + static_cast<std::ptrdiff_t>(nv), rest.begin() + static_cast<std::ptrdiff_t>(nv + nt));
  if (s.val.empty() || s.test.empty()) throw DataError("not enough labeled nodes for validation and test");
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

namespace detail {

inline std::vector<int> argmax_rows(const Matrix& logits, const std::vector<Index>& rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (Index r : rows) {
    Index best = 0;
    logits.row(r).maxCoeff(&best);
    out.push_back(static_cast<int>(best));
  }
  return out;
}

inline std::vector<int> pick(const std::vector<int>& labels, const std::vector<Index>& rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (Index r : rows) out.push_back(labels[static_cast<std::size_t>(r)]);
  return out;
}

}  // namespace detail

/// Graphite encoder shared between the generative objective and a one-layer
/// GCN classifier over [mu | sigma | X].
class HybridClassifier {
 public:
  HybridClassifier(ModelConfig config, int classes, std::uint64_t head_seed) : model_(std::move(config)) {
    const auto& c = model_.config();
    const Index width = c.latent_dim * (is_variational(c.kind) ? 2 : 1) + c.feature_dim;
    head_spec_ = {width, classes, Activation::identity, BiasMode::broadcast};
    Rng rng(head_seed);
    head_ = std::move(init_gnn_params(std::span(&head_spec_, 1), rng, "classifier").layers[0]);
  }

  GraphiteModel& model() { return model_; }

  Tensor class_logits(Tape& tape, const GraphOperator& a_norm, const Posterior& q, const std::optional<Tensor>& x) {
    std::vector<Tensor> parts{q.mu};
    if (q.log_sigma) parts.push_back(exp(*q.log_sigma));
    if (x) parts.push_back(*x);
    Tensor input = parts.size() == 1 ? parts[0] : concat_cols(parts);
    return gcn_layer(tape, a_norm, input, head_spec_, head_);
  }

  std::vector<Parameter*> parameters() {
    auto p = model_.parameters();
    p.push_back(&head_.weight);
    p.push_back(&*head_.bias);
    return p;
  }

  std::vector<Matrix> snapshot() {
    std::vector<Matrix> s;
    for (Parameter* p : parameters()) s.push_back(p->value);
    return s;
  }

  void restore(const std::vector<Matrix>& s) {
    auto p = parameters();
    for (std::size_t k = 0; k < p.size(); ++k) p[k]->value = s[k];
  }

 private:
  GraphiteModel model_;
  GnnLayerSpec head_spec_;
  GnnLayerParams head_;
};

struct ClassifyResult {
  double val_accuracy = 0, test_accuracy = 0;
  int best_iteration = 0;
  double gamma = 0;
};

namespace detail {

/// Early stopping: stop after `patience` evaluations without a strictly
/// better validation accuracy and keep the best checkpoint.
template <typename Step, typename Eval, typename Snapshot, typename Restore>
ClassifyResult early_stopping_loop(int iterations, int patience, Step&& step, Eval&& eval, Snapshot&& snap,
                                   Restore&& restore) {
  ClassifyResult r;
  r.val_accuracy = -1;
  auto best = snap();
  int since = 0;
  for (int it = 1; it <= iterations; ++it) {
    step();
    const double acc = eval().first;
    if (acc > r.val_accuracy) {
      r.val_accuracy = acc;
      r.best_iteration = it;
      best = snap();
      since = 0;
    } else if (++since >= patience) {
      break;
    }
  }
  restore(best);
  r.test_accuracy = eval().second;
  return r;
}

}  // namespace detail

/// Trains the hybrid objective CE + gamma * (normalized negative ELBO). With
/// gamma = 0 the generative term is not evaluated at all.
inline ClassifyResult train_hybrid_classifier(const Graph& g, const NodeSplit& split, const RunConfig& rc, double gamma,
                                              std::uint64_t seed, std::optional<GraphiteModel>* out_model = nullptr) {
  if (!g.labels) throw DataError("node classification needs labels");
  const Index n = g.node_count();
  int classes = 0;
  for (int y : *g.labels) classes = std::max(classes, y + 1);
  std::optional<Matrix> x;
  if (rc.use_features && g.features) {
    x = rc.normalize_features ? detail::row_normalize_features(*g.features) : *g.features;
  }
  ModelConfig mc = model_config_for(rc, n, x ? x->cols() : 0);
  mc.lambda = rc.lambda_grid.front();
  mc.skip = rc.skip_grid.front();
  mc.seed = detail::mix_seed(seed, 1);
  HybridClassifier net(mc, classes, detail::mix_seed(seed, 6));
  auto a_norm = std::make_shared<const SparseMatrix>(normalize_sym(g, rc.self_loops));
  const GraphOperator op = GraphOperator::sparse(a_norm);
  auto target = std::make_shared<const Matrix>(reconstruction_target(g));
  ObjectiveOptions opt;
  if (rc.weighted) {
    const auto w = sparse_objective_weights(n, static_cast<double>(g.adjacency().nonZeros()));
    opt.recon.pos_weight = w.pos_weight;
    opt.recon_scale = w.recon_scale;
    opt.kl_scale = w.kl_scale;
  }
  auto labels = std::make_shared<const std::vector<int>>(*g.labels);
  auto train_rows = std::make_shared<const std::vector<Index>>(split.train);
  const double ce_scale = 1.0 / static_cast<double>(split.train.size());
  Rng rng(detail::mix_seed(seed, 2));
  Adam adam(AdamOptions{rc.learning_rate});
  auto params = net.parameters();
  GraphiteModel& model = net.model();
  const bool vae = is_variational(mc.kind);

  auto step = [&] {
    for (Parameter* p : params) p->zero_grad();
    Tape tape;
    std::optional<Tensor> xt;
    if (x) xt = tape.constant(*x, "features");
    Posterior q = model.encode(tape, op, xt);
    Tensor loss = scale(softmax_cross_entropy(net.class_logits(tape, op, q, xt), labels, train_rows), ce_scale);
    if (gamma > 0) {
      const Tensor z = vae ? reparam_sample(q, detail::gaussian_noise(n, mc.latent_dim, rng)) : q.mu;
      Tensor recon = reconstruction_loss(GraphiteModel::logits(model.decode(tape, z, xt)), target, opt.recon);
      Tensor gen = scale(recon, opt.recon_scale);
      if (q.log_sigma) gen = add(gen, scale(kl_to_standard_normal(q), opt.kl_scale));
      loss = add(loss, scale(gen, gamma));
    }
    tape.backward(loss);
    adam.step(params);
  };
  auto eval = [&] {
    Tape tape;
    std::optional<Tensor> xt;
    if (x) xt = tape.constant(*x, "features");
    Posterior q = model.encode(tape, op, xt);
    const Matrix logits = net.class_logits(tape, op, q, xt).value();
    return std::make_pair(accuracy(detail::argmax_rows(logits, split.val), detail::pick(*labels, split.val)),
                          accuracy(detail::argmax_rows(logits, split.test), detail::pick(*labels, split.test)));
  };
  ClassifyResult r = detail::early_stopping_loop(
      rc.iterations, rc.patience, step, eval, [&] { return net.snapshot(); },
      [&](const std::vector<Matrix>& s) { net.restore(s); });
  r.gamma = gamma;
  if (out_model != nullptr) *out_model = std::move(model);
  return r;
}

/// Plain GCN classifier with the same layers as the hybrid model's encoder
/// and head, trained on cross-entropy alone. Coded separately so the hybrid
/// objective at gamma = 0 can be checked against it.
class GcnClassifier {
 public:
  GcnClassifier(const ModelConfig& c, int classes, std::uint64_t head_seed) : variational_(is_variational(c.kind)) {
    Index in = c.input_dim();
    for (Index width : c.encoder_hidden) {
      trunk_specs_.push_back({in, width, c.hidden_activation, c.bias});
      in = width;
    }
    Rng rng(c.seed);
    trunk_ = init_gnn_params(trunk_specs_, rng, "encoder", c.node_count);
    latent_spec_ = {in, c.latent_dim, Activation::identity, c.bias};
    mu_ = std::move(init_gnn_params(std::span(&latent_spec_, 1), rng, "encoder.mu", c.node_count).layers[0]);
    if (variational_) {
      log_sigma_ = std::move(
          init_gnn_params(std::span(&latent_spec_, 1), rng, "encoder.log_sigma", c.node_count).layers[0]);
    }
    log_sigma_min_ = c.log_sigma_min;
    log_sigma_max_ = c.log_sigma_max;
    head_spec_ = {c.latent_dim * (variational_ ? 2 : 1) + c.feature_dim, classes, Activation::identity,
                  BiasMode::broadcast};
    Rng head_rng(head_seed);
    head_ = std::move(init_gnn_params(std::span(&head_spec_, 1), head_rng, "classifier").layers[0]);
  }

  Tensor logits(Tape& tape, const GraphOperator& a_norm, const std::optional<Tensor>& x) {
    std::optional<Tensor> h = x;
    for (std::size_t l = 0; l < trunk_specs_.size(); ++l) h = gcn_layer(tape, a_norm, h, trunk_specs_[l], trunk_.layers[l]);
    std::vector<Tensor> parts{gcn_layer(tape, a_norm, h, latent_spec_, mu_)};
    if (variational_) {
      parts.push_back(exp(clamp(gcn_layer(tape, a_norm, h, latent_spec_, *log_sigma_), log_sigma_min_, log_sigma_max_)));
    }
    if (x) parts.push_back(*x);
    Tensor input = parts.size() == 1 ? parts[0] : concat_cols(parts);
    return gcn_layer(tape, a_norm, input, head_spec_, head_);
  }

  std::vector<Parameter*> parameters() {
    auto p = trunk_.parameters();
    p.push_back(&mu_.weight);
    if (mu_.bias) p.push_back(&*mu_.bias);
    if (log_sigma_) {
      p.push_back(&log_sigma_->weight);
      if (log_sigma_->bias) p.push_back(&*log_sigma_->bias);
    }
    p.push_back(&head_.weight);
    p.push_back(&*head_.bias);
    return p;
  }

 private:
  bool variational_;
  std::vector<GnnLayerSpec> trunk_specs_;
  GnnParams trunk_;
  GnnLayerSpec latent_spec_;
  GnnLayerParams mu_;
  std::optional<GnnLayerParams> log_sigma_;
  double log_sigma_min_ = -10, log_sigma_max_ = 10;
  GnnLayerSpec head_spec_;
  GnnLayerParams head_;
};

inline ClassifyResult train_gcn_classifier(const Graph& g, const NodeSplit& split, const RunConfig& rc,
                                           std::uint64_t seed) {
  if (!g.labels) throw DataError("node classification needs labels");
  int classes = 0;
  for (int y : *g.labels) classes = std::max(classes, y + 1);
  std::optional<Matrix> x;
  if (rc.use_features && g.features) {
    x = rc.normalize_features ? detail::row_normalize_features(*g.features) : *g.features;
  }
  ModelConfig mc = model_config_for(rc, g.node_count(), x ? x->cols() : 0);
  mc.seed = detail::mix_seed(seed, 1);
  GcnClassifier net(mc, classes, detail::mix_seed(seed, 6));
  const GraphOperator op = GraphOperator::sparse(normalize_sym(g, rc.self_loops));
  auto labels = std::make_shared<const std::vector<int>>(*g.labels);
  auto train_rows = std::make_shared<const std::vector<Index>>(split.train);
  const double ce_scale = 1.0 / static_cast<double>(split.train.size());
  Adam adam(AdamOptions{rc.learning_rate});
  auto params = net.parameters();
  auto step = [&] {
    for (Parameter* p : params) p->zero_grad();
    Tape tape;
    std::optional<Tensor> xt;
    if (x) xt = tape.constant(*x, "features");
    Tensor loss = scale(softmax_cross_entropy(net.logits(tape, op, xt), labels, train_rows), ce_scale);
    tape.backward(loss);
    adam.step(params);
  };
  auto eval = [&] {
    Tape tape;
    std::optional<Tensor> xt;
    if (x) xt = tape.constant(*x, "features");
    const Matrix logits = net.logits(tape, op, xt).value();
    return std::make_pair(accuracy(detail::argmax_rows(logits, split.val), detail::pick(*labels, split.val)),
                          accuracy(detail::argmax_rows(logits, split.test), detail::pick(*labels, split.test)));
  };
  auto snap = [&] {
    std::vector<Matrix> s;
    for (Parameter* p : params) s.push_back(p->value);
    return s;
  };
  auto restore = [&](const std::vector<Matrix>& s) {
    for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = s[k];
  };
  return detail::early_stopping_loop(rc.iterations, rc.patience, step, eval, snap, restore);
}

/// Per seed: split nodes, train the hybrid objective for every gamma, keep
/// the best validation accuracy. With `include_gcn`, the standalone GCN is
/// trained on the same split and reported as gcn_test_accuracy.
inline TaskReport node_classification_run(const Graph& g, const RunConfig& rc, int jobs = 1,
                                          bool include_gcn = false,
                                          std::optional<GraphiteModel>* first_model = nullptr) {
  rc.validate();
  if (!g.labels) throw DataError("node classification needs labels");
  int classes = 0;
  for (int y : *g.labels) classes = std::max(classes, y + 1);
  TaskReport report;
  report.task = TaskKind::classify;
  report.model = rc.model;
  report.runs = detail::run_seeds<RunRecord>(rc.seeds, jobs, [&](int s) {
    const std::uint64_t seed = rc.base_seed + static_cast<std::uint64_t>(s);
    const NodeSplit split =
        split_nodes(*g.labels, classes, rc.labels_per_class, rc.val_nodes, rc.test_nodes, detail::mix_seed(seed, 0));
    std::optional<ClassifyResult> best;
    std::optional<GraphiteModel> kept;
    for (double gamma : rc.gamma_grid) {
      std::optional<GraphiteModel> trained;
      ClassifyResult r = train_hybrid_classifier(g, split, rc, gamma, seed, &trained);
      if (!best || r.val_accuracy > best->val_accuracy) {
        best = r;
        if (first_model != nullptr && s == 0) kept = std::move(trained);
      }
    }
    if (first_model != nullptr && s == 0) *first_model = std::move(kept);
    RunRecord rec;
    rec.seed = seed;
    rec.selected = {{"gamma", best->gamma}, {"best_iteration", best->best_iteration}};
    rec.metrics = {{"val_accuracy", best->val_accuracy}, {"test_accuracy", best->test_accuracy}};
    if (include_gcn) rec.metrics["gcn_test_accuracy"] = train_gcn_classifier(g, split, rc, seed).test_accuracy;
    return rec;
  });
  return report;
}

/// Planted-partition graph with class-correlated binary features, used as a
/// small labeled stand-in when no citation dataset is at hand.
inline Graph planted_partition(Index n, int classes, double p_in, double p_out, Index feature_dim,
                               double feature_signal, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(i % classes);
  std::shuffle(labels.begin(), labels.end(), rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<NodePair> edges;
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) {
      const bool same = labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)];
      if (u(rng) < (same ? p_in : p_out)) edges.emplace_back(i, j);
    }
  Graph g = Graph::from_edges(n, edges);
  if (feature_dim > 0) {
    Matrix x(n, feature_dim);
    for (Index i = 0; i < n; ++i) {
      for (Index f = 0; f < feature_dim; ++f) {
        const bool owned = f % classes == labels[static_cast<std::size_t>(i)];
        x(i, f) = u(rng) < (owned ? feature_signal : 0.1) ? 1.0 : 0.0;
      }
    }
    g.features = std::move(x);
  }
  g.labels = std::move(labels);
  return g;
}

}  // namespace graphite
