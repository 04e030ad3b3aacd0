#pragma once

// Quadrature oracles for tiny models (n <= 3 nodes, k = 1).
//
// With k = 1 and row normalization, A_hat depends on sign(Z_i), so the
// integrand jumps at Z_i = 0. Each axis is split at its breakpoint and
// integrated with Gauss rules for the standard normal weight restricted to
// a half-line. Those rules come from a discretized Stieltjes procedure
// followed by Golub-Welsch.

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <vector>

#include <Eigen/Eigenvalues>

#include "graphite/model.hpp"

namespace graphite {

struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;  // sum to the weight mass of the interval
};

/// Gauss-Legendre rule on [a, b] (Newton iteration on P_order).
inline QuadratureRule gauss_legendre(int order, double a, double b) {
  if (order < 1) throw ConfigError("gauss_legendre: order must be positive");
  QuadratureRule r;
  r.nodes.resize(static_cast<std::size_t>(order));
  r.weights.resize(static_cast<std::size_t>(order));
  const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
  const int m = (order + 1) / 2;
  for (int i = 0; i < m; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (order + 0.5));
    double dp = 0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1, p1 = x;
      for (int k = 2; k <= order; ++k) {
        const double p2 = ((2.0 * k - 1) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      if (order == 1) p0 = 1;
      dp = order * (x * p1 - p0) / (x * x - 1);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    {
      double p0 = 1, p1 = x;
      for (int k = 2; k <= order; ++k) {
        const double p2 = ((2.0 * k - 1) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      if (order == 1) p0 = 1;
      dp = order * (x * p1 - p0) / (x * x - 1);
    }
    const double w = 2.0 / ((1 - x * x) * dp * dp);
    const auto lo = static_cast<std::size_t>(i), hi = static_cast<std::size_t>(order - 1 - i);
    r.nodes[lo] = mid - half * x;
    r.nodes[hi] = mid + half * x;
    r.weights[lo] = r.weights[hi] = w * half;
  }
  return r;
}

inline double standard_normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

/// Gauss rule with `order` nodes for the weight phi(x) on [a, b], where phi
/// is the standard normal density. Infinite ends are cut at |x| = 14
/// (tail mass below 1e-44).
inline QuadratureRule gauss_normal_interval(int order, double a, double b) {
  constexpr double kCut = 14.0;
  a = std::max(a, -kCut);
  b = std::min(b, kCut);
  QuadratureRule empty;
  if (!(b > a)) return empty;
  // Discretize the weight finely, then run Stieltjes on the discrete measure.
  const int fine = std::max(400, 8 * order);
  QuadratureRule disc = gauss_legendre(fine, a, b);
  std::vector<double> w(disc.weights.size());
  double mass = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = disc.weights[i] * standard_normal_pdf(disc.nodes[i]);
    mass += w[i];
  }
  if (!(mass > 1e-300)) return empty;
  order = std::min<int>(order, fine / 2);
  std::vector<double> alpha(static_cast<std::size_t>(order)), beta(static_cast<std::size_t>(order));
  std::vector<double> p_prev(w.size(), 0.0), p_cur(w.size(), 1.0);
  double norm_prev = 1.0, norm_cur = mass;
  for (int k = 0; k < order; ++k) {
    double num = 0;
    for (std::size_t i = 0; i < w.size(); ++i) num += w[i] * disc.nodes[i] * p_cur[i] * p_cur[i];
    alpha[static_cast<std::size_t>(k)] = num / norm_cur;
    beta[static_cast<std::size_t>(k)] = k == 0 ? mass : norm_cur / norm_prev;
    if (k + 1 == order) break;
    std::vector<double> p_next(w.size());
    double norm_next = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      p_next[i] = (disc.nodes[i] - alpha[static_cast<std::size_t>(k)]) * p_cur[i] -
                  (k == 0 ? 0.0 : beta[static_cast<std::size_t>(k)]) * p_prev[i];
      norm_next += w[i] * p_next[i] * p_next[i];
    }
    p_prev = std::move(p_cur);
    p_cur = std::move(p_next);
    norm_prev = norm_cur;
    norm_cur = norm_next;
  }
  Matrix j = Matrix::Zero(order, order);
  for (int k = 0; k < order; ++k) {
    j(k, k) = alpha[static_cast<std::size_t>(k)];
    if (k > 0) j(k, k - 1) = j(k - 1, k) = std::sqrt(beta[static_cast<std::size_t>(k)]);
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(j);
  QuadratureRule r;
  for (int k = 0; k < order; ++k) {
    const double v0 = es.eigenvectors()(0, k);
    r.nodes.push_back(es.eigenvalues()(k));
    r.weights.push_back(mass * v0 * v0);
  }
  return r;
}

/// Rule for E[f(eps)], eps ~ N(0, 1), with the axis split at `breakpoint`.
inline QuadratureRule gauss_normal_split(int order, double breakpoint) {
  QuadratureRule lo = gauss_normal_interval(order, -std::numeric_limits<double>::infinity(), breakpoint);
  QuadratureRule hi = gauss_normal_interval(order, breakpoint, std::numeric_limits<double>::infinity());
  lo.nodes.insert(lo.nodes.end(), hi.nodes.begin(), hi.nodes.end());
  lo.weights.insert(lo.weights.end(), hi.weights.begin(), hi.weights.end());
  return lo;
}

/// log p(A | Z, X) under the model's decoder.
inline double log_likelihood(GraphiteModel& model, const Matrix& z, const std::optional<Matrix>& x,
                             const Matrix& target, const ReconOptions& recon = {}) {
  Tape tape;
  tape.set_check_finite(false);
  std::optional<Tensor> xt;
  if (x) xt = tape.constant(*x, "features");
  Tensor z_final = model.decode(tape, tape.constant(z, "z"), xt);
  ReconOptions sum = recon;
  sum.mean = false;
  return -reconstruction_loss(GraphiteModel::logits(z_final), std::make_shared<const Matrix>(target), sum).item();
}

/// log p(A | logits), same reduction as reconstruction_loss with sums.
inline double log_likelihood_of_logits(const Matrix& logits, const Matrix& target, const ReconOptions& recon) {
  double total = 0;
  for (Index i = 0; i < logits.size(); ++i) {
    const double v = logits.data()[i], t = target.data()[i];
    total += recon.observation == ObservationKind::bernoulli
                 ? recon.pos_weight * t * detail::softplus(-v) + (1.0 - t) * detail::softplus(v)
                 : (v - t) * (v - t);
  }
  return -total;
}

/// Evaluates log p(A | Z, X) for k = 1. Within a sign orthant of Z the
/// similarity graph is fixed, so for decoders without hidden nonlinearities
/// Z_final is affine in Z. The affine map is fitted once per orthant from
/// n + 1 decodes and kept only if it reproduces two further decodes;
/// otherwise every point goes through the full decoder.
class OrthantLikelihood {
 public:
  OrthantLikelihood(GraphiteModel& model, std::optional<Matrix> x, Matrix target, ReconOptions recon)
      : model_(model), x_(std::move(x)), target_(std::move(target)), recon_(recon) {
    recon_.mean = false;
  }

  double operator()(const Matrix& z) {
    unsigned mask = 0;
    for (Index i = 0; i < z.rows(); ++i) mask |= (z(i, 0) > 0 ? 1u : 0u) << i;
    auto it = cache_.find(mask);
    if (it == cache_.end()) it = cache_.emplace(mask, fit(z)).first;
    if (!it->second) return log_likelihood(model_, z, x_, target_, recon_);
    const Matrix zf = it->second->first * z + it->second->second;
    return log_likelihood_of_logits(zf * zf.transpose(), target_, recon_);
  }

  std::size_t affine_orthants() const {
    std::size_t k = 0;
    for (const auto& [m, fitm] : cache_) k += fitm ? 1 : 0;
    return k;
  }

 private:
  using Affine = std::pair<Matrix, Matrix>;

  Matrix decode(const Matrix& z) {
    Tape tape;
    tape.set_check_finite(false);
    std::optional<Tensor> xt;
    if (x_) xt = tape.constant(*x_, "features");
    return model_.decode(tape, tape.constant(z, "z"), xt).value();
  }

  std::optional<Affine> fit(const Matrix& z) {
    const Index n = z.rows();
    Matrix s(n, 1);
    for (Index i = 0; i < n; ++i) s(i, 0) = z(i, 0) > 0 ? 1.0 : -1.0;
    const Matrix base = decode(s);
    if (base.cols() != 1) return std::nullopt;
    Matrix m(n, n);
    for (Index i = 0; i < n; ++i) {
      Matrix p = s;
      p(i, 0) += s(i, 0);
      m.col(i) = (decode(p) - base) / s(i, 0);
    }
    Matrix c = base - m * s;
    for (double f : {0.37, 2.9}) {
      Matrix p = s * f;
      p(0, 0) *= 1.7;
      const Matrix exact = decode(p);
      if ((exact - (m * p + c)).cwiseAbs().maxCoeff() > 1e-10 * (1.0 + exact.cwiseAbs().maxCoeff())) {
        return std::nullopt;
      }
    }
    return Affine{std::move(m), std::move(c)};
  }

  GraphiteModel& model_;
  std::optional<Matrix> x_;
  Matrix target_;
  ReconOptions recon_;
  std::map<unsigned, std::optional<Affine>> cache_;
};

namespace detail {

inline void check_tiny(const GraphiteModel& model, Index n) {
  if (n > 3 || model.config().latent_dim != 1 || !model.config().latent_mlp.empty()) {
    throw ConfigError("quadrature oracle needs n <= 3 and a 1-dimensional latent without latent MLP");
  }
}

/// Visits the tensor-product grid of per-axis rules.
inline void for_each_grid_point(const std::vector<QuadratureRule>& axes,
                                const std::function<void(const Matrix&, double)>& visit) {
  const auto n = static_cast<Index>(axes.size());
  std::vector<std::size_t> idx(axes.size(), 0);
  Matrix point(n, 1);
  for (const auto& a : axes) {
    if (a.nodes.empty()) return;
  }
  while (true) {
    double w = 1.0;
    for (Index i = 0; i < n; ++i) {
      const auto& a = axes[static_cast<std::size_t>(i)];
      point(i, 0) = a.nodes[idx[static_cast<std::size_t>(i)]];
      w *= a.weights[idx[static_cast<std::size_t>(i)]];
    }
    visit(point, w);
    std::size_t d = 0;
    while (d < idx.size() && ++idx[d] == axes[d].nodes.size()) idx[d++] = 0;
    if (d == idx.size()) break;
  }
}

}  // namespace detail

/// log of the integral of p(A | Z, X) N(Z; 0, I) dZ, by tensor-product Gauss
/// rules split at Z_i = 0. `order` nodes per half-axis.
inline double oracle_log_marginal(GraphiteModel& model, const Matrix& target,
                                  const std::optional<Matrix>& x, int order,
                                  const ReconOptions& recon = {}) {
  const Index n = target.rows();
  detail::check_tiny(model, n);
  std::vector<QuadratureRule> axes(static_cast<std::size_t>(n), gauss_normal_split(order, 0.0));
  OrthantLikelihood loglik(model, x, target, recon);
  // streaming log-sum-exp of log w + log p(A | z)
  double top = -std::numeric_limits<double>::infinity();
  double acc = 0;
  detail::for_each_grid_point(axes, [&](const Matrix& z, double w) {
    if (w <= 0) return;
    const double l = loglik(z) + std::log(w);
    if (l > top) {
      acc = acc * std::exp(top - l) + 1.0;
      top = l;
    } else {
      acc += std::exp(l - top);
    }
  });
  return top + std::log(acc);
}

struct ConvergedValue {
  double value = 0;
  int order = 0;     // nodes per half-axis of the accepted value
  double delta = 0;  // |value(order) - value(order / 2)|
  bool converged = false;
};

/// Doubles the order from `start` until successive values agree to `tol`.
inline ConvergedValue converge_order(const std::function<double(int)>& evaluate, double tol = 1e-8,
                                     int start = 16, int max_order = 256) {
  ConvergedValue out;
  double prev = evaluate(start);
  for (int q = 2 * start; q <= max_order; q *= 2) {
    const double cur = evaluate(q);
    out = {cur, q, std::abs(cur - prev), std::abs(cur - prev) < tol};
    if (out.converged) break;
    prev = cur;
  }
  return out;
}

/// Exact (quadrature) ELBO for posterior N(mu, sigma^2): E_q[log p(A|Z,X)] - KL.
/// The split for axis i sits at eps = -mu_i / sigma_i, i.e. Z_i = 0.
inline double expected_elbo(GraphiteModel& model, const Matrix& mu, const Matrix& log_sigma,
                            const Matrix& target, const std::optional<Matrix>& x, int order,
                            const ReconOptions& recon = {}) {
  const Index n = target.rows();
  detail::check_tiny(model, n);
  const Matrix sigma = log_sigma.array().exp().matrix();
  std::vector<QuadratureRule> axes;
  for (Index i = 0; i < n; ++i) axes.push_back(gauss_normal_split(order, -mu(i, 0) / sigma(i, 0)));
  OrthantLikelihood loglik(model, x, target, recon);
  double expected = 0;
  detail::for_each_grid_point(axes, [&](const Matrix& eps, double w) {
    if (w <= 0) return;  // underflowed tail weights
    const Matrix z = mu + sigma.cwiseProduct(eps);
    expected += w * loglik(z);
  });
  const double kl = 0.5 * (mu.squaredNorm() + sigma.squaredNorm() - 2.0 * log_sigma.sum() -
                           static_cast<double>(mu.size()));
  return expected - kl;
}

/// Posterior parameters produced by the encoder for (A, X).
inline std::pair<Matrix, Matrix> posterior_parameters(GraphiteModel& model, const GraphOperator& a_norm,
                                                      const std::optional<Matrix>& x) {
  Tape tape;
  std::optional<Tensor> xt;
  if (x) xt = tape.constant(*x);
  Posterior q = model.encode(tape, a_norm, xt);
  if (!q.log_sigma) throw ConfigError("posterior_parameters: model is not variational");
  return {q.mu.value(), q.log_sigma->value()};
}

}  // namespace graphite
