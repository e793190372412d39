#pragma once

// Weak-instrument F, Sargan-Hansen overidentification and Hausman
// specification tests for fitted GMM models.

#include "peerfx/common.hpp"
#include "peerfx/gmm.hpp"
#include "peerfx/linalg.hpp"
#include "peerfx/varcomp.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/fisher_f.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

namespace peerfx {

inline double chi2_upper(double stat, double df) {
  if (!(df > 0.0)) throw EstimationError("diagnostics", "chi-square df must be positive");
  if (!(stat > 0.0)) return 1.0;
  if (!std::isfinite(stat)) return 0.0;
  return std::clamp(boost::math::cdf(boost::math::complement(boost::math::chi_squared(df), stat)), 0.0, 1.0);
}

/// First-stage F for the excluded instruments: JGy on every instrument, with a
/// school-clustered Wald statistic divided by the number of excluded
/// instruments and the small-sample factor S/(S-1).
inline double weak_iv_f(const Design& d) {
  const Index q = d.n_excluded;
  if (q < 1) throw EstimationError("diagnostics", "weak-IV F needs at least one excluded instrument");
  const Index m = d.n_instruments();
  MatrixXd ZZ = MatrixXd::Zero(m, m);
  VectorXd Zx = VectorXd::Zero(m);
  for (const auto& b : d.blocks) {
    ZZ.noalias() += b.Z.transpose() * b.Z;
    Zx.noalias() += b.Z.transpose() * b.R.col(0);
  }
  const auto rank = linalg::column_rank(ZZ, 1e-12);
  if (!rank.full_rank())
    throw EstimationError("diagnostics", "instrument matrix is rank deficient (duplicate instrument?)");
  const MatrixXd ZZi = linalg::spd_inverse(ZZ, "diagnostics", "Z'Z");
  const VectorXd pi = ZZi * Zx;
  MatrixXd meat = MatrixXd::Zero(m, m);
  for (const auto& b : d.blocks) {
    const VectorXd g = b.Z.transpose() * (b.R.col(0) - b.Z * pi);
    meat.noalias() += g * g.transpose();
  }
  const double S = static_cast<double>(d.n_schools());
  const double corr = S > 1.0 ? S / (S - 1.0) : 1.0;
  const MatrixXd V = corr * ZZi * meat * ZZi;
  const VectorXd pe = pi.tail(q);
  const MatrixXd Ve = linalg::symmetrize(V.bottomRightCorner(q, q));
  const MatrixXd Vi = linalg::sym_pinv(Ve, 1e-12);
  return pe.dot(Vi * pe) / static_cast<double>(q);
}

inline double weak_iv_f(const ModelSpec& spec, const std::vector<SchoolNetwork>& nets,
                        const std::vector<SchoolData>& data) {
  return weak_iv_f(build_design(spec, nets, data));
}

/// Metric for the overidentification test. Clustered uses the school-level
/// outer products of first-step moments; Structured uses the moment
/// covariance implied by the estimated variance components.
enum class SarganMetric { Clustered, Structured };

struct SarganResult {
  std::optional<double> stat;
  std::optional<int> df;
  std::optional<double> p;
};

/// Hansen J statistic: two-step efficient GMM under the chosen metric, then
/// g' S^{-1} g with g the summed moments at the efficient estimate.
inline SarganResult sargan_with_meat(const Design& d, const MatrixXd& S) {
  SarganResult r;
  const Index df = d.n_instruments() - d.n_params();
  if (df <= 0) return r;
  const auto m = detail::accumulate(d);
  const MatrixXd W = linalg::spd_inverse(linalg::symmetrize(S), "diagnostics", "moment covariance");
  const VectorXd th = gmm_solve(m, W);
  VectorXd g = VectorXd::Zero(d.n_instruments());
  for (const auto& b : d.blocks) g.noalias() += b.Z.transpose() * (b.Jy - b.R * th);
  const double J = std::max(0.0, g.dot(W * g));
  r.stat = J;
  r.df = static_cast<int>(df);
  r.p = chi2_upper(J, static_cast<double>(df));
  return r;
}

inline SarganResult sargan(const GmmFit& fit) {
  return sargan_with_meat(fit.design, detail::cluster_meat(fit.design, fit.residuals));
}

inline SarganResult sargan(const GmmFit& fit, const std::vector<SchoolNetwork>& nets,
                           const VarComp* vc, SarganMetric metric = SarganMetric::Structured) {
  if (metric == SarganMetric::Clustered || vc == nullptr) return sargan(fit);
  return sargan_with_meat(fit.design, structured_meat(fit.design, nets, fit.lambda(), vc->sigma_eps2,
                                                      vc->sigma_eta2, vc->rho));
}

enum class CovarianceSource { White, Qml };

/// Joint estimates Var(d) from the stacked moments of both fits. Difference
/// uses V_flex - V_restr, which is valid only when the restricted estimator is
/// efficient.
enum class HausmanForm { Joint, Difference };

struct HausmanOptions {
  bool lambda_only = false;
  CovarianceSource source = CovarianceSource::Qml;  // falls back to White when absent
  HausmanForm form = HausmanForm::Joint;
  double clip = 1e-10;
};

struct HausmanResult {
  double stat = 0.0;
  int df = 0;
  double p = 1.0;
  bool indefinite = false;
  double min_eigenvalue = 0.0;
};

namespace detail {

/// theta-hat - theta = A * sum_s Z_s' v_s for the 2SLS weight.
inline MatrixXd influence_matrix(const Design& d) {
  const auto m = accumulate(d);
  const MatrixXd H = m.RZ * linalg::spd_inverse(m.ZZ, "diagnostics", "Z'Z");
  return linalg::spd_inverse(linalg::symmetrize(H * m.RZ.transpose()), "diagnostics", "R'Z(Z'Z)^-1Z'R") * H;
}

/// sum_s Z1_s' Omega_s Z2_s under the structured error covariance.
inline MatrixXd structured_cross_meat(const Design& d1, const Design& d2, const std::vector<SchoolNetwork>& nets,
                                      double lambda, const VarComp& vc) {
  MatrixXd C = MatrixXd::Zero(d1.n_instruments(), d2.n_instruments());
  const double cov = vc.rho * std::sqrt(vc.sigma_eps2 * vc.sigma_eta2);
  for (std::size_t s = 0; s < nets.size(); ++s) {
    const MatrixXd& Z1 = d1.blocks[s].Z;
    const MatrixXd& Z2 = d2.blocks[s].Z;
    const MatrixXd W1 = Z1 - lambda * (nets[s].G().transpose() * Z1);  // W'Z1
    const MatrixXd W2 = Z2 - lambda * (nets[s].G().transpose() * Z2);
    C.noalias() += vc.sigma_eps2 * (Z1.transpose() * Z2) + vc.sigma_eta2 * (W1.transpose() * W2) +
                   cov * (Z1.transpose() * W2 + W1.transpose() * Z2);
  }
  return C;
}

inline MatrixXd cluster_cross_meat(const GmmFit& f1, const GmmFit& f2) {
  MatrixXd C = MatrixXd::Zero(f1.design.n_instruments(), f2.design.n_instruments());
  for (std::size_t s = 0; s < f1.design.blocks.size(); ++s)
    C.noalias() += (f1.design.blocks[s].Z.transpose() * f1.residuals[s]) *
                   (f2.design.blocks[s].Z.transpose() * f2.residuals[s]).transpose();
  return C;
}

inline HausmanResult hausman_quadratic(const VectorXd& d, const MatrixXd& Vd, double clip) {
  HausmanResult h;
  Index rank = 0;
  double mine = 0.0;
  const MatrixXd V = linalg::symmetrize(Vd);
  const double scale = std::max(1e-300, V.cwiseAbs().maxCoeff());
  const MatrixXd Vi = linalg::sym_pinv(V, clip * scale, &rank, &mine);
  h.min_eigenvalue = mine;
  h.indefinite = mine < -clip * scale;
  h.df = static_cast<int>(rank);
  if (rank == 0) return h;
  h.stat = std::max(0.0, d.dot(Vi * d));
  h.p = chi2_upper(h.stat, static_cast<double>(rank));
  return h;
}

inline void check_hausman_pair(const GmmFit& r, const GmmFit& f) {
  if (r.design.n_psi != f.design.n_psi || r.design.covariates != f.design.covariates)
    throw InputError("diagnostics", "Hausman test needs fits with the same covariates");
  if (r.design.n_schools() != f.design.n_schools() || r.design.n_obs != f.design.n_obs)
    throw InputError("diagnostics", "Hausman test needs fits on identical data");
}

}  // namespace detail

/// Difference form d'(V_flex - V_restr)^+ d on the psi block (lambda, beta~,
/// gamma~) with d = psi_restr - psi_flex, using the stored covariances.
inline HausmanResult hausman(const GmmFit& restricted, const GmmFit& flexible, const HausmanOptions& opt = {}) {
  detail::check_hausman_pair(restricted, flexible);
  auto vcov = [&](const GmmFit& f) -> const MatrixXd& {
    return opt.source == CovarianceSource::Qml && f.vcov_qml ? *f.vcov_qml : f.vcov_white;
  };
  const Index k = opt.lambda_only ? 1 : flexible.design.n_psi;
  const VectorXd d = restricted.theta.head(k) - flexible.theta.head(k);
  return detail::hausman_quadratic(
      d, vcov(flexible).topLeftCorner(k, k) - vcov(restricted).topLeftCorner(k, k), opt.clip);
}

/// Hausman test with Var(d) from the stacked moment conditions of both fits.
/// With source Qml the error covariance comes from vc (estimated under the
/// flexible model, consistent under both hypotheses); otherwise the
/// school-clustered residual outer products are used.
inline HausmanResult hausman(const GmmFit& restricted, const GmmFit& flexible,
                             const std::vector<SchoolNetwork>& nets, const VarComp* vc,
                             const HausmanOptions& opt = {}) {
  if (opt.form == HausmanForm::Difference) return hausman(restricted, flexible, opt);
  detail::check_hausman_pair(restricted, flexible);
  const Design& dr = restricted.design;
  const Design& df = flexible.design;
  const Index k = opt.lambda_only ? 1 : df.n_psi;
  const MatrixXd Ar = detail::influence_matrix(dr).topRows(k), Af = detail::influence_matrix(df).topRows(k);
  MatrixXd Srr, Sff, Srf;
  if (opt.source == CovarianceSource::Qml && vc) {
    const double lam = flexible.lambda();
    Srr = detail::structured_cross_meat(dr, dr, nets, lam, *vc);
    Sff = detail::structured_cross_meat(df, df, nets, lam, *vc);
    Srf = detail::structured_cross_meat(dr, df, nets, lam, *vc);
  } else {
    Srr = detail::cluster_cross_meat(restricted, restricted);
    Sff = detail::cluster_cross_meat(flexible, flexible);
    Srf = detail::cluster_cross_meat(restricted, flexible);
  }
  const MatrixXd C = Ar * Srf * Af.transpose();
  const MatrixXd Vd = Ar * Srr * Ar.transpose() + Af * Sff * Af.transpose() - C - C.transpose();
  const VectorXd d = restricted.theta.head(k) - flexible.theta.head(k);
  return detail::hausman_quadratic(d, Vd, opt.clip);
}

/// Fills a TestReport for a fitted model.
inline TestReport test_report(const GmmFit& fit, const std::vector<SchoolNetwork>& nets,
                              const VarComp* vc = nullptr) {
  TestReport t;
  t.weak_iv_F = weak_iv_f(fit.design);
  const auto s = sargan(fit, nets, vc);
  t.sargan_stat = s.stat;
  t.sargan_df = s.df;
  t.sargan_p = s.p;
  return t;
}

}  // namespace peerfx
