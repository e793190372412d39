#pragma once

// Structural network game: best responses, the unique Nash equilibrium in
// effort, GPA production, and bivariate shock draws.

#include "peerfx/common.hpp"
#include "peerfx/netgraph.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <vector>

namespace peerfx {

struct StructuralParams {
  double lambda = 0.0;
  VectorXd beta;
  VectorXd gamma;
  double delta = 1.0;
  VectorXd theta;
  VectorXd alpha;  // per school GPA shifter
  VectorXd c;      // per school preference shifter
  double sigma_eta2 = 1.0;
  double sigma_eps2 = 1.0;  // variance of delta^2 * eps
  double rho = 0.0;

  Index K() const { return beta.size(); }

  /// Composite coefficients identified from GPA data.
  VectorXd beta_tilde() const { return delta * delta * beta + theta; }
  VectorXd gamma_tilde() const { return delta * delta * gamma - lambda * theta; }

  void validate() const {
    if (!(std::abs(lambda) < 1.0))
      throw ConfigError("structsim", "|lambda| < 1 is required for a unique equilibrium");
    if (!(delta > 0.0)) throw ConfigError("structsim", "delta must be positive");
    if (!(sigma_eta2 > 0.0) || !(sigma_eps2 > 0.0))
      throw ConfigError("structsim", "shock variances must be positive");
    if (!(std::abs(rho) <= 1.0)) throw ConfigError("structsim", "|rho| must not exceed 1");
    if (gamma.size() != K() || theta.size() != K())
      throw ConfigError("structsim", "beta, gamma and theta must have equal length");
    if (alpha.size() != c.size())
      throw ConfigError("structsim", "alpha and c must have one entry per school");
  }
};

/// Covariates, outcome and (in simulation only) latent effort and shocks.
struct SchoolData {
  MatrixXd X;
  VectorXd y;
  std::optional<VectorXd> effort;
  std::optional<VectorXd> eta;
  std::optional<VectorXd> eps;  // delta^2 * eps
};

/// Unique Nash equilibrium e = (I - lambda G)^{-1} delta (c 1 + X beta + G X gamma + eps).
/// `eps_scaled` holds delta^2 * eps, the stored draw.
inline VectorXd solve_equilibrium(const SchoolNetwork& net, const MatrixXd& X,
                                  const StructuralParams& p, double c_school,
                                  const VectorXd& eps_scaled) {
  if (!(std::abs(p.lambda) < 1.0))
    throw ConfigError("structsim", "|lambda| >= 1: equilibrium is not unique");
  if (X.rows() != net.n() || eps_scaled.size() != net.n())
    throw InputError("structsim", "covariate/shock rows do not match network size");
  const MatrixXd G = net.G_dense();
  const VectorXd rhs = p.delta * (VectorXd::Constant(net.n(), c_school) + X * p.beta +
                                  G * (X * p.gamma) + eps_scaled / (p.delta * p.delta));
  const MatrixXd A = MatrixXd::Identity(net.n(), net.n()) - p.lambda * G;
  return A.partialPivLu().solve(rhs);
}

/// y = alpha 1 + delta e + X theta + eta.
inline VectorXd produce_gpa(const MatrixXd& X, const VectorXd& effort, const StructuralParams& p,
                            double alpha_school, const VectorXd& eta) {
  return VectorXd::Constant(effort.size(), alpha_school) + p.delta * effort + X * p.theta + eta;
}

/// School intercepts of the reduced form for isolated and non-isolated students.
struct ReducedIntercepts {
  double kappa_iso;
  double kappa_noniso;
};

inline std::vector<ReducedIntercepts> reduced_form_intercepts(const StructuralParams& p) {
  std::vector<ReducedIntercepts> out;
  out.reserve(static_cast<std::size_t>(p.alpha.size()));
  const double d2 = p.delta * p.delta;
  for (Index s = 0; s < p.alpha.size(); ++s)
    out.push_back({d2 * p.c(s) + p.alpha(s), d2 * p.c(s) + (1.0 - p.lambda) * p.alpha(s)});
  return out;
}

struct ShockDraws {
  VectorXd eta;
  VectorXd eps;  // delta^2 * eps
};

/// i.i.d. bivariate normal (eta, delta^2 eps) pairs with the given moments.
template <class URBG>
ShockDraws draw_shocks(Index n, double sigma_eta2, double sigma_eps2, double rho, URBG& rng) {
  if (!(sigma_eta2 >= 0.0) || !(sigma_eps2 >= 0.0) || !(std::abs(rho) <= 1.0))
    throw ConfigError("structsim", "invalid shock covariance");
  std::normal_distribution<double> z;
  const double se = std::sqrt(sigma_eta2);
  const double sp = std::sqrt(sigma_eps2);
  const double tail = std::sqrt(1.0 - rho * rho);
  ShockDraws d{VectorXd(n), VectorXd(n)};
  for (Index i = 0; i < n; ++i) {
    const double z1 = z(rng);
    const double z2 = z(rng);
    d.eta(i) = se * z1;
    d.eps(i) = sp * (rho * z1 + tail * z2);
  }
  return d;
}

inline ShockDraws draw_shocks(Index n, double sigma_eta2, double sigma_eps2, double rho,
                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return draw_shocks(n, sigma_eta2, sigma_eps2, rho, rng);
}

/// Simulates one school's effort and GPA at the structural parameters.
inline SchoolData simulate_school(const SchoolNetwork& net, const MatrixXd& X,
                                  const StructuralParams& p, Index school,
                                  const ShockDraws& shocks) {
  SchoolData d;
  d.X = X;
  d.effort = solve_equilibrium(net, X, p, p.c(school), shocks.eps);
  d.y = produce_gpa(X, *d.effort, p, p.alpha(school), shocks.eta);
  d.eta = shocks.eta;
  d.eps = shocks.eps;
  return d;
}

}  // namespace peerfx
