#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <random>

#include "graphite/adam.hpp"
#include "graphite/grad_check.hpp"
#include "graphite/tensor.hpp"

using namespace graphite;

namespace {

Matrix random_matrix(Index r, Index c, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = u(rng);
  return m;
}

// Random-projection readout so every output entry gets a distinct weight.
Tensor readout(Tape& tape, const Tensor& t, std::uint64_t seed) {
  Matrix w = random_matrix(t.rows(), t.cols(), seed);
  return reduce_sum(hadamard(t, tape.constant(w)));
}

double check(const std::function<Tensor(Tape&, const Tensor&, const Tensor&)>& op, Parameter& a,
             Parameter& b) {
  std::vector<Parameter*> ps{&a, &b};
  auto report = grad_check(
      [&](Tape& tape) {
        Tensor out = op(tape, tape.parameter(a), tape.parameter(b));
        return readout(tape, out, 99);
      },
      ps, 1e-5);
  EXPECT_GT(report.checked, 0u);
  return report.max_rel_error;
}

}  // namespace

TEST(TensorOps, MatmulIdentity) {
  Tape tape;
  Matrix m = random_matrix(3, 2, 1);
  Tensor out = matmul(tape.constant(Matrix::Identity(3, 3)), tape.constant(m));
  EXPECT_EQ(out.value(), m);
}

TEST(TensorOps, SigmoidAtZero) {
  Tape tape;
  EXPECT_DOUBLE_EQ(sigmoid(tape.scalar(0.0)).item(), 0.5);
}

TEST(TensorOps, RowNormalize) {
  Tape tape;
  Matrix x(1, 2);
  x << 3, 4;
  Tensor out = row_l2_normalize(tape.constant(x));
  EXPECT_NEAR(out.value()(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(out.value()(0, 1), 0.8, 1e-15);
}

TEST(TensorOps, ZeroRowNormalizesToZero) {
  Tape tape;
  Matrix x = Matrix::Zero(2, 3);
  x(1, 2) = 2.0;
  Tensor out = row_l2_normalize(tape.constant(x));
  EXPECT_EQ(out.value().row(0).norm(), 0.0);
  EXPECT_DOUBLE_EQ(out.value()(1, 2), 1.0);
}

TEST(TensorOps, ShapeErrorNamesOperands) {
  Tape tape;
  Tensor a = tape.constant(Matrix::Zero(2, 3), "lhs");
  Tensor b = tape.constant(Matrix::Zero(2, 3), "rhs");
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("lhs"), std::string::npos) << msg;
    EXPECT_NE(msg.find("rhs"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(a, tape.constant(Matrix::Zero(3, 2))), ShapeError);
  EXPECT_THROW(hadamard(a, tape.constant(Matrix::Zero(1, 3))), ShapeError);
  EXPECT_THROW(concat_cols({a, tape.constant(Matrix::Zero(3, 1))}), ShapeError);
}

TEST(TensorOps, LogOfNonPositiveIsNumericError) {
  Tape tape;
  EXPECT_THROW(log(tape.scalar(0.0)), NumericError);
  EXPECT_THROW(log(tape.scalar(-1.0)), NumericError);
}

TEST(TensorOps, NonFiniteOutputIsNumericError) {
  Tape tape;
  EXPECT_THROW(exp(tape.scalar(1000.0)), NumericError);
}

TEST(TensorOps, ForwardValuesMatchDefinitions) {
  Tape tape;
  Matrix a = random_matrix(3, 4, 2), b = random_matrix(3, 4, 3);
  Tensor ta = tape.constant(a), tb = tape.constant(b);
  EXPECT_EQ(sub(ta, tb).value(), a - b);
  EXPECT_EQ(hadamard(ta, tb).value(), a.cwiseProduct(b));
  EXPECT_EQ(scale(ta, 2.5).value(), 2.5 * a);
  EXPECT_EQ(transpose(ta).value(), a.transpose());
  EXPECT_DOUBLE_EQ(reduce_sum(ta).item(), a.sum());
  Matrix c = concat_cols({ta, tb}).value();
  EXPECT_EQ(c.leftCols(4), a);
  EXPECT_EQ(c.rightCols(4), b);
  EXPECT_EQ(relu(ta).value(), a.cwiseMax(0.0));
  EXPECT_TRUE(exp(ta).value().isApprox(a.array().exp().matrix(), 1e-15));
}

TEST(Backward, SumGivesOnes) {
  Parameter w("w", random_matrix(3, 5, 4));
  Tape tape;
  Tensor loss = reduce_sum(tape.parameter(w));
  tape.backward(loss);
  EXPECT_EQ(w.grad, Matrix::Ones(3, 5));
}

TEST(Backward, SigmoidSlopeAtZero) {
  Parameter w("w", Matrix::Zero(2, 3));
  Tape tape;
  tape.backward(reduce_sum(sigmoid(tape.parameter(w))));
  EXPECT_TRUE(w.grad.isApprox(Matrix::Constant(2, 3, 0.25), 0.0));
}

TEST(Backward, NonScalarLossRejected) {
  Parameter w("w", Matrix::Zero(2, 2));
  Tape tape;
  Tensor t = tape.parameter(w);
  EXPECT_THROW(tape.backward(t), ShapeError);
}

TEST(Backward, ParameterUsedTwiceAccumulates) {
  Parameter w("w", Matrix::Constant(1, 1, 3.0));
  Tape tape;
  Tensor x = tape.parameter(w);
  tape.backward(hadamard(x, x));
  EXPECT_DOUBLE_EQ(w.grad(0, 0), 6.0);
}

// Every op kind against central differences at 1e-6 relative error.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  Parameter a("a", random_matrix(4, 3, seed));
  Parameter b("b", random_matrix(4, 3, seed + 100));
  Parameter sq("sq", random_matrix(3, 4, seed + 200));
  Parameter pos("pos", random_matrix(4, 3, seed + 300, 0.5, 2.0));
  const double tol = 1e-6;

  EXPECT_LT(check([&](Tape& t, const Tensor& x, const Tensor&) {
              return matmul(x, t.parameter(sq));
            }, a, b), tol);
  EXPECT_LT(check([](Tape&, const Tensor& x, const Tensor& y) { return add(x, y); }, a, b), tol);
  EXPECT_LT(check([](Tape&, const Tensor& x, const Tensor& y) { return sub(x, y); }, a, b), tol);
  EXPECT_LT(check([](Tape&, const Tensor& x, const Tensor& y) { return hadamard(x, y); }, a, b), tol);
  EXPECT_LT(check([](Tape&, const Tensor& x, const Tensor&) { return scale(x, -1.7); }, a, b), tol);
  EXPECT_LT(check([](Tape&, const Tensor& x, const Tensor& y) { return concat_cols({x, y}); }, a, b), tol);
  EXPECT_LT(check([](Tape&, const Tensor& x, const Tensor&) { return row_l2_normalize(x); }, a, b), tol);
  EXPECT_LT(check([](Tape&, const Tensor& x, const Tensor&) { return frobenius_normalize(x); }, a, b), tol);
  EXPECT_LT(check([](Tape&, const Tensor& x, const Tensor&) { return transpose(x); }, a, b), tol);
  EXPECT_LT(check([](Tape&, const Tensor& x, const Tensor&) { return sigmoid(x); }, a, b), tol);
  EXPECT_LT(check([](Tape&, const Tensor& x, const Tensor&) { return exp(x); }, a, b), tol);
  EXPECT_LT(check([&](Tape& t, const Tensor&, const Tensor&) { return log(t.parameter(pos)); }, pos, b), tol);
  EXPECT_LT(check([](Tape&, const Tensor& x, const Tensor&) { return relu(x); }, a, b), tol);
  EXPECT_LT(check([](Tape&, const Tensor& x, const Tensor& y) {
              return hadamard(reduce_sum(x), reduce_sum(y));
            }, a, b), tol);
  EXPECT_LT(check([](Tape&, const Tensor& x, const Tensor&) { return clamp(x, -0.5, 0.5); }, a, b), tol);
  EXPECT_LT(check([](Tape& t, const Tensor& x, const Tensor&) {
              Matrix bias = random_matrix(1, 3, 7);
              return add_bias(x, t.constant(bias));
            }, a, b), tol);
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradient, ::testing::Range(1, 6));

TEST(GradCheck, LinearFunctionIsExact) {
  Parameter w("w", random_matrix(3, 3, 11));
  std::vector<Parameter*> ps{&w};
  auto r = grad_check([&](Tape& t) { return scale(reduce_sum(t.parameter(w)), 3.0); }, ps);
  EXPECT_LE(r.max_rel_error, 1e-9);
  EXPECT_EQ(r.checked, 9u);
}

TEST(GradCheck, ReluKinkIsSkipped) {
  Matrix v(1, 2);
  v << 0.0, 1.0;
  Parameter w("w", v);
  std::vector<Parameter*> ps{&w};
  auto r = grad_check([&](Tape& t) { return reduce_sum(relu(t.parameter(w))); }, ps);
  ASSERT_EQ(r.skipped.size(), 1u);
  EXPECT_EQ(r.skipped[0].col, 0);
  EXPECT_EQ(r.checked, 1u);
  EXPECT_LE(r.max_rel_error, 1e-9);
}

TEST(GradCheck, SpecializedKernels) {
  Parameter z("z", random_matrix(5, 3, 21));
  std::vector<Parameter*> ps{&z};
  auto target = std::make_shared<const Matrix>(
      (random_matrix(5, 5, 22, 0.0, 1.0).array() > 0.5).cast<double>().matrix());
  auto r = grad_check([&](Tape& t) {
    Tensor zt = t.parameter(z);
    return weighted_sigmoid_cross_entropy(matmul(zt, transpose(zt)), target, 3.0);
  }, ps);
  EXPECT_LT(r.max_rel_error, 1e-6);

  auto pairs = std::make_shared<const std::vector<std::pair<Index, Index>>>(
      std::vector<std::pair<Index, Index>>{{0, 1}, {2, 2}, {4, 0}, {0, 1}});
  r = grad_check([&](Tape& t) { return readout(t, pair_dots(t.parameter(z), pairs), 5); }, ps);
  EXPECT_LT(r.max_rel_error, 1e-6);

  auto labels = std::make_shared<const std::vector<int>>(std::vector<int>{0, 2, 1, 1, 0});
  auto rows = std::make_shared<const std::vector<Index>>(std::vector<Index>{0, 1, 3});
  r = grad_check([&](Tape& t) { return softmax_cross_entropy(t.parameter(z), labels, rows); }, ps);
  EXPECT_LT(r.max_rel_error, 1e-6);

  SparseMatrix s(5, 5);
  s.insert(0, 1) = 0.5;
  s.insert(1, 0) = 0.5;
  s.insert(3, 4) = 2.0;
  s.makeCompressed();
  auto sp = std::make_shared<const SparseMatrix>(s);
  r = grad_check([&](Tape& t) { return readout(t, spmm(sp, t.parameter(z)), 6); }, ps);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Adam, FirstStepIsLearningRate) {
  Parameter p("p", Matrix::Constant(1, 1, 0.3));
  p.grad(0, 0) = 1.0;
  Adam adam;
  std::vector<Parameter*> ps{&p};
  adam.step(ps);
  EXPECT_NEAR(p.value(0, 0) - 0.3, -0.01, 1e-9);
  EXPECT_EQ(adam.state().step_count, 1);
}

TEST(Adam, FirstStepMagnitudeForConstantGradient) {
  Parameter p("p", Matrix::Zero(3, 2));
  p.grad = Matrix::Constant(3, 2, -4.2);
  Adam adam;
  std::vector<Parameter*> ps{&p};
  adam.step(ps);
  EXPECT_LT((p.value.array().abs() - 0.01).abs().maxCoeff(), 1e-6);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Parameter p("p", random_matrix(2, 2, 3));
  const Matrix before = p.value;
  Adam adam;
  std::vector<Parameter*> ps{&p};
  for (int i = 0; i < 3; ++i) adam.step(ps);
  EXPECT_EQ(p.value, before);
  EXPECT_EQ(adam.state().step_count, 3);
}

TEST(Adam, EqualGradientsGiveEqualUpdates) {
  Parameter a("a", Matrix::Constant(2, 2, 1.0)), b("b", Matrix::Constant(2, 2, 1.0));
  a.grad = b.grad = random_matrix(2, 2, 9);
  Adam adam;
  std::vector<Parameter*> ps{&a, &b};
  adam.step(ps);
  EXPECT_EQ(a.value, b.value);
}

TEST(Adam, Errors) {
  AdamOptions bad;
  bad.learning_rate = 0.0;
  EXPECT_THROW(Adam{bad}, Error);
  Parameter p("p", Matrix::Zero(2, 2));
  Adam adam;
  std::vector<Parameter*> ps{&p};
  adam.step(ps);
  p.value = Matrix::Zero(3, 2);
  p.grad = Matrix::Zero(3, 2);
  EXPECT_THROW(adam.step(ps), ShapeError);
}

TEST(Determinism, RepeatedRunsAreBitwiseIdentical) {
  auto run = [] {
    Parameter w("w", random_matrix(4, 4, 5));
    Adam adam;
    std::vector<Parameter*> ps{&w};
    for (int it = 0; it < 20; ++it) {
      w.zero_grad();
      Tape tape;
      Tensor x = tape.parameter(w);
      tape.backward(reduce_sum(sigmoid(matmul(x, transpose(x)))));
      adam.step(ps);
    }
    return w.value;
  };
  const Matrix a = run(), b = run();
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())));
}
