#include <gtest/gtest.h>

#include <random>

#include "graphite/generators.hpp"
#include "graphite/meanfield.hpp"

using namespace graphite;

namespace {

Matrix random_matrix(Index r, Index c, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = nd(rng);
  return m;
}

Matrix cycle3() {
  Matrix a = Matrix::Ones(3, 3);
  a.diagonal().setZero();
  return a;
}

UpdateOperator sum_operator() {
  return linear_operator(Vector::Ones(3), 0.0);
}

}  // namespace

TEST(NeighborVector, Cases) {
  Matrix a = Matrix::Zero(4, 4);
  a(0, 1) = a(1, 0) = a(0, 2) = a(2, 0) = a(0, 3) = a(3, 0) = 1;  // star K_{1,3}
  Matrix mu(4, 1);
  mu << 1, 2, 3, 4;
  Matrix center = neighbor_vector(a, mu, 0);
  EXPECT_EQ((center.array() != 0).count(), 3);
  EXPECT_EQ(center(0, 0), 0);
  Matrix isolated = neighbor_vector(Matrix::Zero(4, 4), mu, 2);
  EXPECT_TRUE(isolated.isZero());
  Matrix full = neighbor_vector(cycle3(), mu.topRows(3), 1);
  EXPECT_EQ(full(0, 0), 1);
  EXPECT_EQ(full(1, 0), 0);
  EXPECT_EQ(full(2, 0), 3);
  EXPECT_THROW(neighbor_vector(Matrix::Zero(3, 3), mu, 0), ShapeError);
}

TEST(MfUpdate, ConstantAndNeighborSum) {
  UpdateOperator c;
  c.name = "constant";
  c.value = [](const Matrix&) { return Vector::Constant(1, 2.5); };
  Matrix mu(3, 1);
  mu << 1, 2, 3;
  EXPECT_TRUE(mf_embedding_update(c, cycle3(), mu).isApproxToConstant(2.5));
  Matrix next = mf_embedding_update(sum_operator(), cycle3(), mu);
  EXPECT_EQ(next(0, 0), 5);
  EXPECT_EQ(next(1, 0), 4);
  EXPECT_EQ(next(2, 0), 3);
}

TEST(MfUpdate, Locality) {
  // Path 0-1-2-3: node 0 must ignore node 2 and 3.
  Matrix a = Matrix::Zero(4, 4);
  a(0, 1) = a(1, 0) = a(1, 2) = a(2, 1) = a(2, 3) = a(3, 2) = 1;
  Rng rng(5);
  UpdateOperator op = logistic_operator(random_matrix(4, 1, 1).col(0), 0.3);
  Matrix mu = random_matrix(4, 1, 2);
  Matrix before = mf_embedding_update(op, a, mu);
  mu(2, 0) += 10;
  mu(3, 0) -= 7;
  EXPECT_EQ(mf_embedding_update(op, a, mu)(0, 0), before(0, 0));
}

TEST(Taylor, Examples) {
  Matrix nb(3, 1);
  nb << 0.3, -0.2, 0.7;
  UpdateOperator lin = linear_operator(Vector::Constant(3, 2.0), 1.0);
  EXPECT_NEAR(taylor_first_order(lin, nb)(0), lin.value(nb)(0), 1e-15);
  EXPECT_NEAR(taylor_first_order(sine_sum_operator(), nb)(0), nb.sum(), 1e-15);
  UpdateOperator lg = logistic_operator(Vector::Ones(3), -0.4);
  EXPECT_EQ(taylor_first_order(lg, Matrix::Zero(3, 1))(0), lg.value(Matrix::Zero(3, 1))(0));
}

TEST(Taylor, NumericJacobianFallbackAndRefusal) {
  UpdateOperator sine = sine_sum_operator();
  sine.jacobian_at_zero = nullptr;
  Matrix jac = jacobian_at_zero(sine, 4);
  EXPECT_LE((jac - Matrix::Ones(1, 4)).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_THROW(taylor_first_order(sine, Matrix::Zero(4, 1), false), ConfigError);
}

TEST(ConstructedGnn, EqualsTaylorOnRandomGraphs) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng(seed);
    const Index n = 2 + static_cast<Index>(seed % 7);
    Matrix a = generate(GraphFamily::erdos_renyi, n, seed).dense_adjacency();
    UpdateOperator op = random_scalar_operator(n, rng);
    Matrix mu = random_matrix(n, 1, seed + 100);
    TheoremReport r = check_theorem(op, a, mu);
    EXPECT_LE(r.max_abs_diff_vs_taylor, 1e-12) << op.name << " seed " << seed;
  }
}

TEST(ConstructedGnn, LinearOperatorIsExact) {
  Matrix a = generate(GraphFamily::erdos_renyi, 8, 3).dense_adjacency();
  UpdateOperator op = linear_operator(random_matrix(8, 1, 4).col(0), 0.7);
  Matrix mu = random_matrix(8, 1, 5);
  ConstructedGnn gnn = construct_equivalent_gnn(op, a);
  EXPECT_LE((gnn.apply(mu) - mf_embedding_update(op, a, mu)).cwiseAbs().maxCoeff(), 1e-12);
  for (double rem : check_theorem(op, a, mu).remainders) EXPECT_LE(rem, 1e-12);
}

TEST(ConstructedGnn, QuadraticRemainderScalesByFour) {
  Matrix a = generate(GraphFamily::erdos_renyi, 8, 11).dense_adjacency();
  TheoremReport r = check_theorem(quadratic_operator(), a, random_matrix(8, 1, 12));
  ASSERT_EQ(r.ratios.size(), 2u);
  for (double ratio : r.ratios) EXPECT_NEAR(ratio, 4.0, 1e-9);
}

TEST(ConstructedGnn, SineRemainderIsThirdOrder) {
  Matrix a = generate(GraphFamily::erdos_renyi, 6, 2).dense_adjacency();
  TheoremReport r = check_theorem(sine_sum_operator(), a, 0.1 * random_matrix(6, 1, 3));
  for (double ratio : r.ratios) EXPECT_NEAR(ratio, 8.0, 0.05);
}

TEST(ConstructedGnn, VectorEmbeddings) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Index n = 5, d = 3;
    Matrix a = generate(GraphFamily::erdos_renyi, n, seed).dense_adjacency();
    std::vector<Matrix> mixing;
    for (Index j = 0; j < n; ++j) mixing.push_back(random_matrix(d, d, seed * 10 + static_cast<std::uint64_t>(j)));
    UpdateOperator op = vector_tanh_operator(mixing, random_matrix(d, 1, seed + 77).col(0));
    Matrix mu = random_matrix(n, d, seed + 5);
    EXPECT_LE(check_theorem(op, a, mu).max_abs_diff_vs_taylor, 1e-12);
    // Analytic Jacobian agrees with central differences.
    UpdateOperator numeric = op;
    numeric.jacobian_at_zero = nullptr;
    EXPECT_LE((jacobian_at_zero(op, n) - jacobian_at_zero(numeric, n)).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(TheoremReport, Json) {
  Matrix a = cycle3();
  Matrix mu(3, 1);
  mu << 1, 2, 3;
  auto j = to_json(check_theorem(sum_operator(), a, mu));
  EXPECT_EQ(j["operator"], "linear");
  EXPECT_LE(j["max_abs_diff_vs_taylor"].get<double>(), 1e-12);
  EXPECT_EQ(j["remainder_vs_scale"]["scales"].size(), 3u);
}
