#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "graphite/adam.hpp"
#include "graphite/generators.hpp"
#include "graphite/grad_check.hpp"
#include "graphite/model.hpp"

using namespace graphite;

namespace {

const double kLn2 = std::log(2.0);

Matrix gaussian(Index r, Index c, std::uint64_t seed, double s = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, s);
  Matrix m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = nd(rng);
  return m;
}

Matrix permutation_matrix(Index n, std::uint64_t seed) {
  std::vector<Index> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  Rng rng(seed);
  std::shuffle(p.begin(), p.end(), rng);
  Matrix P = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) P(i, p[static_cast<std::size_t>(i)]) = 1.0;
  return P;
}

Parameter& param(GraphiteModel& m, const std::string& name) {
  for (Parameter* p : m.parameters())
    if (p->name == name) return *p;
  throw std::runtime_error("no parameter " + name);
}

void randomize(GraphiteModel& m, std::uint64_t seed, double s = 0.5) {
  for (Parameter* p : m.parameters()) p->value = gaussian(p->value.rows(), p->value.cols(), seed++, s);
}

void zero_all(GraphiteModel& m) {
  for (Parameter* p : m.parameters()) p->value.setZero();
}

ModelConfig small_config(ModelKind kind, Index n, Index m = 0) {
  ModelConfig c;
  c.kind = kind;
  c.node_count = n;
  c.feature_dim = m;
  c.encoder_hidden = {6};
  c.latent_dim = 3;
  c.decoder_dims = {5, 3};
  c.seed = 11;
  return c;
}

}  // namespace

TEST(Encode, ZeroParametersGiveStandardNormal) {
  Graph g = generate(GraphFamily::erdos_renyi, 10, 1);
  ModelConfig c = small_config(ModelKind::graphite_vae, 10);
  c.latent_dim = 16;
  c.decoder_dims = {32, 16};
  GraphiteModel model(c);
  zero_all(model);
  Tape tape;
  Posterior q = model.encode(tape, GraphOperator::sparse(normalize_sym(g)), std::nullopt);
  EXPECT_EQ(q.mu.value(), Matrix::Zero(10, 16));
  EXPECT_EQ(exp(*q.log_sigma).value(), Matrix::Ones(10, 16));
  EXPECT_EQ(kl_to_standard_normal(q).item(), 0.0);
}

TEST(Encode, LatentShape) {
  ModelConfig c = small_config(ModelKind::graphite_vae, 12);
  c.encoder_hidden = {32};
  c.latent_dim = 16;
  c.decoder_dims = {32, 16};
  GraphiteModel model(c);
  Graph g = generate(GraphFamily::erdos_renyi, 12, 2);
  Tape tape;
  Posterior q = model.encode(tape, GraphOperator::sparse(normalize_sym(g)), std::nullopt);
  EXPECT_EQ(q.mu.rows(), 12);
  EXPECT_EQ(q.mu.cols(), 16);
  EXPECT_EQ(q.log_sigma->rows(), 12);
  EXPECT_EQ(q.log_sigma->cols(), 16);
}

TEST(Encode, PermutationEquivariance) {
  const Index n = 9;
  Graph g = generate(GraphFamily::erdos_renyi, n, 3);
  Matrix x = gaussian(n, 4, 4);
  Matrix P = permutation_matrix(n, 5);
  GraphiteModel model(small_config(ModelKind::graphite_vae, n, 4));
  randomize(model, 6);
  Matrix a = normalize_sym_dense(g.dense_adjacency());
  Tape tape;
  Posterior q = model.encode(tape, GraphOperator::dense(a), tape.constant(x));
  Posterior qp = model.encode(tape, GraphOperator::dense(Matrix(P * a * P.transpose())), tape.constant(P * x));
  EXPECT_LE((qp.mu.value() - P * q.mu.value()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((qp.log_sigma->value() - P * q.log_sigma->value()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Reparam, Cases) {
  Tape tape;
  Matrix mu = gaussian(4, 2, 1);
  Posterior q{tape.constant(mu), tape.constant(gaussian(4, 2, 2))};
  EXPECT_EQ(reparam_sample(q, Matrix::Zero(4, 2)).value(), mu);

  Posterior tight{tape.constant(mu), clamp(tape.constant(Matrix::Constant(4, 2, -50.0)), -10, 10)};
  EXPECT_LE((reparam_sample(tight, Matrix::Ones(4, 2)).value() - mu).cwiseAbs().maxCoeff(), 1e-4);
  EXPECT_THROW(reparam_sample(q, Matrix::Zero(3, 2)), ShapeError);
}

TEST(Reparam, SampleMean) {
  Matrix mu(1, 2);
  mu << 0.7, -1.3;
  Matrix ls(1, 2);
  ls << std::log(0.5), std::log(2.0);
  const int draws = 100000;
  Rng rng(9);
  std::normal_distribution<double> nd;
  Matrix total = Matrix::Zero(1, 2);
  for (int d = 0; d < draws; ++d) {
    Matrix eps(1, 2);
    eps << nd(rng), nd(rng);
    Tape t;
    Posterior qq{t.constant(mu), t.constant(ls)};
    total += reparam_sample(qq, eps).value();
  }
  Matrix mean = total / draws;
  EXPECT_LE(std::abs(mean(0, 0) - 0.7), 3 * 0.5 / std::sqrt(draws));
  EXPECT_LE(std::abs(mean(0, 1) + 1.3), 3 * 2.0 / std::sqrt(draws));
}

TEST(IntermediateGraph, Examples) {
  Matrix z(2, 2);
  z << 1, 0, 0, 1;
  Matrix e(2, 2);
  e << 2, 1, 1, 2;
  EXPECT_EQ(intermediate_graph(z), e);
  z << 1, 0, 1, 0;
  EXPECT_EQ(intermediate_graph(z), Matrix::Constant(2, 2, 2.0));
  z << 1, 0, -1, 0;
  e << 2, 0, 0, 2;
  EXPECT_EQ(intermediate_graph(z), e);
}

TEST(IntermediateGraph, ZeroRowIsNeutral) {
  Matrix z(3, 2);
  z << 1, 0, 0, 0, 0, 2;
  Matrix a = intermediate_graph(z);
  EXPECT_EQ(a.row(1), Matrix::Ones(1, 3));
  EXPECT_EQ(a.col(1), Matrix::Ones(3, 1));
}

TEST(IntermediateGraph, SymmetricInRange) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Matrix a = intermediate_graph(gaussian(15, 4, seed));
    EXPECT_LE((a - a.transpose()).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_GE(a.minCoeff(), -1e-15);
    EXPECT_LE(a.maxCoeff(), 2.0 + 1e-15);
    Matrix f = intermediate_graph(gaussian(15, 4, seed), SimilarityNorm::frobenius);
    EXPECT_GE(f.minCoeff(), 0.0);
  }
}

TEST(IntermediateGraph, TapeMatchesPlain) {
  Matrix z = gaussian(7, 3, 1);
  Tape tape;
  EXPECT_LE((intermediate_graph(tape.constant(z)).value() - intermediate_graph(z)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(DecodeFast, MatchesDense) {
  Matrix z = gaussian(50, 8, 1), h = gaussian(50, 4, 2);
  EXPECT_LE((decode_fast(z, h) - intermediate_graph(z) * h).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE((decode_fast(z, h, SimilarityNorm::frobenius) -
             intermediate_graph(z, SimilarityNorm::frobenius) * h).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_EQ(decode_fast(z, Matrix::Zero(50, 4)), Matrix::Zero(50, 4));
  EXPECT_THROW(decode_fast(z, Matrix::Zero(49, 4)), ShapeError);
}

TEST(DecodeFast, TapeOperatorMatchesDense) {
  Matrix z = gaussian(20, 3, 4), h = gaussian(20, 5, 5);
  Tape tape;
  Tensor zt = tape.constant(z), ht = tape.constant(h);
  Matrix fast = intermediate_graph_operator(zt, SimilarityNorm::row, true).apply(ht).value();
  Matrix dense = intermediate_graph_operator(zt, SimilarityNorm::row, false).apply(ht).value();
  EXPECT_LE((fast - dense).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DecodeFast, GcnNormalizedOperator) {
  Matrix z = gaussian(20, 3, 6), h = gaussian(20, 5, 7);
  Matrix oracle = normalized_intermediate_graph(z) * h;
  Tape tape;
  Tensor zt = tape.constant(z), ht = tape.constant(h);
  Matrix fast = intermediate_graph_operator(zt, SimilarityNorm::row, true, true).apply(ht).value();
  Matrix dense = intermediate_graph_operator(zt, SimilarityNorm::row, false, true).apply(ht).value();
  EXPECT_LE((fast - oracle).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((dense - oracle).cwiseAbs().maxCoeff(), 1e-12);
  // Row sums of D^-1/2 A D^-1/2 applied to sqrt(deg) reproduce sqrt(deg).
  Matrix a = intermediate_graph(z);
  Vector sq = a.rowwise().sum().cwiseSqrt();
  EXPECT_LE((normalized_intermediate_graph(z) * sq - sq).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DecodeFast, OperatorGradients) {
  Parameter z("z", gaussian(6, 2, 8));
  Parameter h("h", gaussian(6, 3, 9));
  std::vector<Parameter*> ps{&z, &h};
  const Matrix w = gaussian(6, 3, 10);
  for (bool fast : {true, false}) {
    for (bool gcn : {true, false}) {
      auto r = grad_check([&](Tape& t) {
        Tensor out = intermediate_graph_operator(t.parameter(z), SimilarityNorm::row, fast, gcn).apply(t.parameter(h));
        return reduce_sum(hadamard(out, t.constant(w)));
      }, ps);
      EXPECT_LE(r.max_rel_error, 1e-6) << fast << gcn;
    }
  }
}

TEST(Refine, ZeroDecoderWeightsGiveBias) {
  ModelConfig c = small_config(ModelKind::graphite_ae, 6);
  c.lambda = 1.0;
  c.decoder_dims = {3};
  GraphiteModel model(c);
  Parameter& w = param(model, "decoder.0.weight");
  Parameter& b = param(model, "decoder.0.bias");
  w.value.setZero();
  b.value = gaussian(1, 3, 3);
  Tape tape;
  Tensor out = model.decode(tape, tape.constant(gaussian(6, 3, 1)), std::nullopt);
  for (Index i = 0; i < 6; ++i) EXPECT_EQ(out.value().row(i), b.value.row(0));
}

TEST(Refine, NoRoundsIsIdentity) {
  GraphiteModel model(small_config(ModelKind::vgae, 6));
  EXPECT_EQ(model.config().refinement_rounds(), 0);
  Matrix z = gaussian(6, 3, 2);
  Tape tape;
  EXPECT_EQ(model.decode(tape, tape.constant(z), std::nullopt).value(), z);
}

TEST(Refine, FeaturelessShape) {
  ModelConfig c = small_config(ModelKind::graphite_vae, 30);
  c.latent_dim = 16;
  c.decoder_dims = {32, 16};
  GraphiteModel model(c);
  ASSERT_EQ(model.decoder_specs().size(), 2u);
  EXPECT_EQ(model.decoder_specs()[0].in_dim, 16);
  EXPECT_EQ(model.decoder_specs()[0].out_dim, 32);
  EXPECT_EQ(model.decoder_specs()[1].out_dim, 16);
  Tape tape;
  EXPECT_EQ(model.decode(tape, tape.constant(gaussian(30, 16, 1)), std::nullopt).cols(), 16);
}

TEST(Refine, FeaturesConcatenated) {
  GraphiteModel model(small_config(ModelKind::graphite_vae, 8, 5));
  EXPECT_EQ(model.decoder_specs()[0].in_dim, 3 + 5);
  EXPECT_EQ(model.decoder_specs()[1].in_dim, 5 + 5);
}

TEST(CombineSkip, Cases) {
  Matrix z = gaussian(4, 3, 1), zs = gaussian(4, 3, 2);
  EXPECT_EQ(combine_skip(z, zs, 0.0, SkipMode::convex), z);
  EXPECT_EQ(combine_skip(z, zs, 1.0, SkipMode::convex), zs);
  EXPECT_LE((combine_skip(z, z, 0.5, SkipMode::convex) - z).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LE((combine_skip(z, zs, 0.3, SkipMode::incremental) - (z + 0.3 * zs / zs.norm())).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_THROW(combine_skip(z, Matrix(gaussian(4, 2, 3)), 0.5, SkipMode::convex), ShapeError);
  EXPECT_THROW(combine_skip(z, zs, 1.5, SkipMode::convex), ConfigError);
  EXPECT_THROW(combine_skip(z, Matrix(Matrix::Zero(4, 3)), 0.5, SkipMode::incremental), NumericError);

  Tape tape;
  Tensor a = tape.constant(z), b = tape.constant(zs);
  EXPECT_LE((combine_skip(a, b, 0.25, SkipMode::convex).value() - combine_skip(z, zs, 0.25, SkipMode::convex)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LE((combine_skip(a, b, 0.25, SkipMode::incremental).value() - combine_skip(z, zs, 0.25, SkipMode::incremental)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(EdgeDistribution, Cases) {
  EXPECT_EQ(edge_distribution(Matrix::Zero(5, 2)), Matrix::Constant(5, 5, 0.5));
  Matrix z(2, 2);
  z << 1, 0, 0, 1;
  Matrix p = edge_distribution(z);
  EXPECT_EQ(p(0, 1), 0.5);
  Matrix r = edge_distribution(gaussian(10, 3, 1));
  EXPECT_EQ(r, r.transpose());
  EXPECT_GT(r.minCoeff(), 0.0);
  EXPECT_LT(r.maxCoeff(), 1.0);
  EXPECT_EQ(edge_distribution(z, ObservationKind::gaussian), z * z.transpose());
}

TEST(ReconstructionLoss, AllZeroLogits) {
  for (Index n : {3, 20}) {
    Graph g = generate(GraphFamily::erdos_renyi, n, 1);
    Tape tape;
    auto target = std::make_shared<const Matrix>(reconstruction_target(g));
    const double loss = reconstruction_loss(tape.constant(Matrix::Zero(n, n)), target).item();
    EXPECT_NEAR(loss, static_cast<double>(n * n) * kLn2, 1e-10);
  }
  Tape tape;
  auto t20 = std::make_shared<const Matrix>(Matrix::Zero(20, 20));
  EXPECT_NEAR(reconstruction_loss(tape.constant(Matrix::Zero(20, 20)), t20).item(), 277.26, 5e-3);
  ReconOptions mean;
  mean.mean = true;
  EXPECT_NEAR(reconstruction_loss(tape.constant(Matrix::Zero(20, 20)), t20, mean).item(), kLn2, 1e-12);
}

TEST(ReconstructionLoss, PerfectLogits) {
  Graph g = generate(GraphFamily::erdos_renyi, 8, 2);
  Matrix t = reconstruction_target(g);
  Matrix logits = (2.0 * t.array() - 1.0).matrix() * 40.0;
  Tape tape;
  EXPECT_LT(reconstruction_loss(tape.constant(logits), std::make_shared<const Matrix>(t)).item(), 1e-15);
}

TEST(ReconstructionLoss, PositiveWeightAndGaussian) {
  Matrix t = Matrix::Identity(4, 4);
  EXPECT_DOUBLE_EQ(positive_weight(t), 3.0);
  Tape tape;
  ReconOptions o;
  o.pos_weight = 3.0;
  auto tp = std::make_shared<const Matrix>(t);
  EXPECT_NEAR(reconstruction_loss(tape.constant(Matrix::Zero(4, 4)), tp, o).item(), (4 * 3 + 12) * kLn2, 1e-12);
  o.observation = ObservationKind::gaussian;
  o.mean = true;
  EXPECT_NEAR(reconstruction_loss(tape.constant(Matrix::Zero(4, 4)), tp, o).item(), 0.25, 1e-15);
}

TEST(Kl, ClosedForm) {
  Tape tape;
  Posterior q{tape.constant(Matrix::Ones(1, 1)), tape.constant(Matrix::Zero(1, 1))};
  EXPECT_DOUBLE_EQ(kl_to_standard_normal(q).item(), 0.5);
  Posterior q2{tape.constant(Matrix::Constant(2, 3, 0.3)), tape.constant(Matrix::Constant(2, 3, std::log(1.7)))};
  const double per = 0.5 * (0.09 + 1.7 * 1.7 - 1.0 - std::log(1.7 * 1.7));
  EXPECT_NEAR(kl_to_standard_normal(q2).item(), 6 * per, 1e-14);
}

TEST(AeLoss, ZeroParameters) {
  Graph g = generate(GraphFamily::erdos_renyi, 10, 3);
  GraphiteModel model(small_config(ModelKind::graphite_ae, 10));
  zero_all(model);
  const double loss = ae_loss(model, GraphOperator::sparse(normalize_sym(g)), std::nullopt, reconstruction_target(g));
  EXPECT_NEAR(loss, 100 * kLn2, 1e-10);
}

TEST(AeLoss, DecreasesUnderAdam) {
  Graph g = generate(GraphFamily::erdos_renyi, 10, 4);
  GraphiteModel model(small_config(ModelKind::graphite_ae, 10));
  auto op = GraphOperator::sparse(normalize_sym(g));
  auto target = std::make_shared<const Matrix>(reconstruction_target(g));
  const double before = ae_loss(model, op, std::nullopt, *target);
  Adam adam;
  auto params = model.parameters();
  for (int it = 0; it < 50; ++it) {
    model.zero_grad();
    Tape tape;
    auto t = objective(tape, model, op, std::nullopt, target, nullptr);
    tape.backward(t.loss);
    adam.step(params);
  }
  EXPECT_LT(ae_loss(model, op, std::nullopt, *target), before);
}

class ModelGradCheck : public ::testing::TestWithParam<ModelKind> {};

TEST_P(ModelGradCheck, FourNodeGraph) {
  const ModelKind kind = GetParam();
  Graph g = Graph::from_edges(4, std::vector<NodePair>{{0, 1}, {1, 2}, {2, 3}});
  ModelConfig c = small_config(kind, 4, 2);
  c.latent_dim = 2;
  c.decoder_dims = {3, 2};
  GraphiteModel model(c);
  randomize(model, 7, 0.6);
  const Matrix x = gaussian(4, 2, 8);
  const Matrix noise = gaussian(4, 2, 9);
  auto op = GraphOperator::sparse(normalize_sym(g));
  auto target = std::make_shared<const Matrix>(reconstruction_target(g));
  auto params = model.parameters();
  auto r = grad_check([&](Tape& tape) {
    return objective(tape, model, op, x, target, &noise).loss;
  }, params);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst.parameter << "(" << r.worst.row << "," << r.worst.col << ")";
  EXPECT_GT(r.checked, r.skipped.size());
}

INSTANTIATE_TEST_SUITE_P(Kinds, ModelGradCheck,
                         ::testing::Values(ModelKind::graphite_vae, ModelKind::graphite_ae, ModelKind::vgae,
                                           ModelKind::gae));

TEST(McSubsample, ExhaustiveEqualsFull) {
  Matrix z = gaussian(6, 3, 1);
  Graph g = generate(GraphFamily::erdos_renyi, 6, 2);
  Matrix t = reconstruction_target(g);
  Tape tape;
  Tensor zt = tape.constant(z);
  ReconOptions o;
  o.pos_weight = 2.0;
  const double full = reconstruction_loss(matmul(zt, transpose(zt)), std::make_shared<const Matrix>(t), o).item();
  Rng rng(1);
  EXPECT_NEAR(mc_subsample_recon(zt, t, 36, rng, o, true).item(), full, 1e-12);
  EXPECT_NEAR(mc_subsample_recon(zt, t, 72, rng, o, true).item(), full, 1e-12);
  EXPECT_THROW(mc_subsample_recon(zt, t, 0, rng, o), ConfigError);
}

TEST(McSubsample, Unbiased) {
  Matrix z = gaussian(8, 2, 3);
  Graph g = generate(GraphFamily::erdos_renyi, 8, 4);
  Matrix t = reconstruction_target(g);
  Tape tape;
  Tensor zt = tape.constant(z);
  const double full = reconstruction_loss(matmul(zt, transpose(zt)), std::make_shared<const Matrix>(t)).item();
  std::vector<double> est;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    Tape tp;
    est.push_back(mc_subsample_recon(tp.constant(z), t, 10, rng).item());
  }
  const double mean = std::accumulate(est.begin(), est.end(), 0.0) / 1000.0;
  double var = 0;
  for (double e : est) var += (e - mean) * (e - mean);
  const double se = std::sqrt(var / 999.0 / 1000.0);
  EXPECT_LE(std::abs(mean - full), 3 * se);
}

TEST(McSubsample, GradientMatchesFiniteDifferences) {
  Parameter z("z", gaussian(5, 2, 1));
  Graph g = generate(GraphFamily::erdos_renyi, 5, 1);
  Matrix t = reconstruction_target(g);
  std::vector<Parameter*> ps{&z};
  auto r = grad_check([&](Tape& tape) {
    Rng rng(3);
    return mc_subsample_recon(tape.parameter(z), t, 12, rng);
  }, ps);
  EXPECT_LE(r.max_rel_error, 1e-6);
}

// Direct VGAE: two GCN layers, mean/log-sigma heads, inner-product decoder.
TEST(SpecialCase, ZeroRoundsMatchesDirectVgae) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Index n = 9, m = 4;
    Graph g = generate(GraphFamily::erdos_renyi, n, seed);
    Matrix x = gaussian(n, m, seed + 1);
    ModelConfig c = small_config(ModelKind::vgae, n, m);
    GraphiteModel model(c);
    randomize(model, seed + 2, 0.4);
    Matrix noise = gaussian(n, c.latent_dim, seed + 3);
    Matrix a = normalize_sym_dense(g.dense_adjacency());
    Matrix t = reconstruction_target(g);
    const double pw = positive_weight(t);

    Matrix h = (a * x * param(model, "encoder.0.weight").value).rowwise() +
               param(model, "encoder.0.bias").value.row(0);
    h = h.cwiseMax(0.0);
    Matrix mu = (a * h * param(model, "encoder.mu.0.weight").value).rowwise() +
                param(model, "encoder.mu.0.bias").value.row(0);
    Matrix ls = (a * h * param(model, "encoder.log_sigma.0.weight").value).rowwise() +
                param(model, "encoder.log_sigma.0.bias").value.row(0);
    ls = ls.cwiseMax(-10.0).cwiseMin(10.0);
    Matrix z = mu + ls.array().exp().matrix().cwiseProduct(noise);
    Matrix logits = z * z.transpose();
    double recon = 0;
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) {
        const double l = logits(i, j);
        const double sp_pos = std::log1p(std::exp(-std::abs(l))) + std::max(-l, 0.0);
        const double sp_neg = std::log1p(std::exp(-std::abs(l))) + std::max(l, 0.0);
        recon += pw * t(i, j) * sp_pos + (1 - t(i, j)) * sp_neg;
      }
    }
    const double kl = 0.5 * (mu.squaredNorm() + (2 * ls).array().exp().sum() - 2 * ls.sum() -
                             static_cast<double>(n * c.latent_dim));
    const double direct = recon + kl;

    ObjectiveOptions opt;
    opt.recon.pos_weight = pw;
    Tape tape;
    auto terms = objective(tape, model, GraphOperator::dense(a), x, std::make_shared<const Matrix>(t), &noise, opt);
    EXPECT_NEAR(terms.loss.item(), direct, 1e-12 * std::max(1.0, std::abs(direct)));
  }
}

TEST(SpecialCase, LambdaZeroIgnoresDecoder) {
  const Index n = 8;
  Graph g = generate(GraphFamily::erdos_renyi, n, 1);
  ModelConfig cg = small_config(ModelKind::graphite_vae, n);
  cg.lambda = 0.0;
  ModelConfig cv = cg;
  cv.kind = ModelKind::vgae;
  GraphiteModel graphite(cg), vgae(cv);
  randomize(graphite, 3);
  for (Parameter* p : vgae.parameters()) p->value = param(graphite, p->name).value;
  Matrix noise = gaussian(n, 3, 5);
  auto op = GraphOperator::sparse(normalize_sym(g));
  Matrix t = reconstruction_target(g);
  EXPECT_EQ(elbo(graphite, op, std::nullopt, t, noise), elbo(vgae, op, std::nullopt, t, noise));
}

TEST(Pipeline, PermutationEquivariance) {
  const Index n = 10;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Graph g = generate(GraphFamily::erdos_renyi, n, seed);
    Matrix x = gaussian(n, 3, seed + 1);
    Matrix P = permutation_matrix(n, seed + 2);
    GraphiteModel model(small_config(ModelKind::graphite_vae, n, 3));
    randomize(model, seed + 3, 0.5);
    Matrix noise = gaussian(n, 3, seed + 4);
    Matrix a = normalize_sym_dense(g.dense_adjacency());
    Matrix pnoise = P * noise;
    Tape tape;
    Matrix z = model.forward(tape, GraphOperator::dense(a), x, &noise).z_final.value();
    Matrix zp = model.forward(tape, GraphOperator::dense(Matrix(P * a * P.transpose())), Matrix(P * x), &pnoise)
                    .z_final.value();
    EXPECT_LE((edge_distribution(zp) - P * edge_distribution(z) * P.transpose()).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(DensityVariant, MlpAndThreeEmbeddings) {
  ModelConfig c = small_config(ModelKind::graphite_vae, 20);
  c.latent_dim = 4;
  c.latent_mlp = {8, 4};
  c.decoder_dims = {4, 4};
  c.combine_all_rounds = true;
  GraphiteModel model(c);
  EXPECT_EQ(model.config().combine_weights.size(), 3u);
  Graph g = pad_with_dummy_nodes(largest_connected_component(generate(GraphFamily::ego, 14, 2)), 20);
  Matrix noise = gaussian(20, 4, 1);
  Matrix t = reconstruction_target(g);
  const double e = elbo(model, GraphOperator::sparse(normalize_sym(g)), std::nullopt, t, noise);
  EXPECT_TRUE(std::isfinite(e));
  EXPECT_LT(e, 0.0);

  // Combination weights are applied literally.
  ModelConfig only_last = c;
  only_last.combine_weights = {0.0, 0.0, 1.0};
  ModelConfig only_first = c;
  only_first.combine_weights = {1.0, 0.0, 0.0};
  GraphiteModel a(only_last), b(only_first);
  Tape tape;
  Tensor z0 = tape.constant(gaussian(20, 4, 2));
  Tensor first = b.decode(tape, z0, std::nullopt);
  ModelConfig no_rounds = only_first;
  no_rounds.kind = ModelKind::vgae;
  GraphiteModel mlp(no_rounds);
  Tensor mlp_only = mlp.decode(tape, z0, std::nullopt);
  EXPECT_LE((first.value() - mlp_only.value()).cwiseAbs().maxCoeff(), 1e-15);
  const Matrix last = a.decode(tape, z0, std::nullopt).value();
  EXPECT_NE(last, first.value());
}

TEST(ModelConfigValidation, Errors) {
  ModelConfig c = small_config(ModelKind::graphite_vae, 5);
  c.decoder_dims = {4};
  EXPECT_THROW(GraphiteModel{c}, ConfigError);
  c = small_config(ModelKind::graphite_vae, 5);
  c.lambda = 1.2;
  EXPECT_THROW(GraphiteModel{c}, ConfigError);
  c = small_config(ModelKind::graphite_vae, 0);
  EXPECT_THROW(GraphiteModel{c}, ConfigError);
  c = small_config(ModelKind::graphite_vae, 5);
  c.combine_all_rounds = true;
  c.decoder_dims = {3, 3};
  c.combine_weights = {0.5, 0.6, -0.1};
  EXPECT_THROW(GraphiteModel{c}, ConfigError);
  EXPECT_THROW(parse_model_kind("vae"), ConfigError);
  EXPECT_EQ(parse_model_kind("graphite-vae"), ModelKind::graphite_vae);
}

TEST(ModelState, SnapshotRestore) {
  GraphiteModel model(small_config(ModelKind::graphite_vae, 5));
  auto snap = model.snapshot();
  randomize(model, 1);
  model.restore(snap);
  EXPECT_EQ(model.snapshot(), snap);
  GraphiteModel same(small_config(ModelKind::graphite_vae, 5));
  EXPECT_EQ(same.snapshot(), snap);
}
