#pragma once

// Concentrated quasi-maximum likelihood for (sigma_eta^2, sigma_eps^2, rho)
// on the projected GMM residuals, and the covariance of psi-hat implied by
// the estimated error structure.

#include "peerfx/common.hpp"
#include "peerfx/gmm.hpp"
#include "peerfx/linalg.hpp"
#include "peerfx/netgraph.hpp"

#include <boost/math/tools/toms748_solve.hpp>
#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

namespace peerfx {

struct VarComp {
  double sigma_eta2 = 0.0;
  double sigma_eps2 = 0.0;
  double rho = 0.0;
  double tau = 0.0;
  double llh = -std::numeric_limits<double>::infinity();
  bool converged = false;
  bool rho_at_boundary = false;
  bool tau_at_boundary = false;
  bool lambda_near_zero = false;
  int evaluations = 0;
};

struct VarCompOptions {
  double tau_min = 1e-3;
  double tau_max = 50.0;
  int grid = 21;
  int max_iter = 400;
  double simplex_tol = 1e-7;
};

/// Concentrated objective with the per-school matrices F'WW'F, F'(W+W')F and
/// projected residuals F'v cached once for a given lambda-hat.
class QmlObjective {
 public:
  QmlObjective(double lambda_hat, const std::vector<VectorXd>& residuals,
               const std::vector<SchoolNetwork>& nets, const std::vector<Annihilator>& projectors) {
    if (residuals.size() != nets.size() || projectors.size() != nets.size())
      throw InputError("varcomp", "residuals, networks and projectors must align");
    schools_.reserve(nets.size());
    for (std::size_t s = 0; s < nets.size(); ++s) {
      const MatrixXd& F = projectors[s].F;
      if (F.cols() == 0) continue;
      const Index n = nets[s].n();
      const MatrixXd W = MatrixXd::Identity(n, n) - lambda_hat * nets[s].G_dense();
      const MatrixXd WtF = W.transpose() * F;
      const MatrixXd WF = W * F;
      School sc;
      sc.A = WtF.transpose() * WtF;
      sc.B = F.transpose() * WF;
      sc.B = sc.B + sc.B.transpose().eval();
      sc.u = F.transpose() * residuals[s];
      dof_ += F.cols();
      schools_.push_back(std::move(sc));
    }
    if (dof_ == 0) throw EstimationError("varcomp", "no residual degrees of freedom");
  }

  /// Number of retained degrees of freedom, n minus the removed group means.
  Index dof() const { return dof_; }

  struct Terms {
    bool ok = false;
    double quad = 0.0;    // sum u' Omega^{-1} u
    double logdet = 0.0;  // sum log |Omega|
  };

  Terms terms(double tau, double rho) const {
    Terms t;
    for (const auto& sc : schools_) {
      const Index m = sc.u.size();
      MatrixXd Om = tau * tau * sc.A + rho * tau * sc.B;
      Om.diagonal().array() += 1.0;
      Eigen::LLT<MatrixXd> llt(Om);
      if (llt.info() != Eigen::Success) return t;
      const auto L = llt.matrixL();
      const VectorXd w = L.solve(sc.u);
      t.quad += w.squaredNorm();
      double ld = 0.0;
      for (Index i = 0; i < m; ++i) {
        const double d = llt.matrixLLT()(i, i);
        if (!(d > 0.0)) return t;
        ld += std::log(d);
      }
      t.logdet += 2.0 * ld;
    }
    t.ok = std::isfinite(t.quad) && std::isfinite(t.logdet);
    return t;
  }

  /// sigma_eps^2 profiled out at (tau, rho).
  double sigma_eps2_tilde(double tau, double rho) const {
    const Terms t = terms(tau, rho);
    return t.ok ? t.quad / static_cast<double>(dof_) : std::numeric_limits<double>::quiet_NaN();
  }

  /// -(N/2) log sigma~^2 - 1/2 sum log|Omega_s|; -inf when Omega is not PD.
  double operator()(double tau, double rho) const {
    const Terms t = terms(tau, rho);
    if (!t.ok || !(t.quad > 0.0)) return -std::numeric_limits<double>::infinity();
    const double N = static_cast<double>(dof_);
    return -0.5 * N * std::log(t.quad / N) - 0.5 * t.logdet;
  }

  /// Partial derivatives of the concentrated objective in (tau, rho);
  /// {nan, nan} when Omega is not positive definite.
  std::pair<double, double> gradient(double tau, double rho) const {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    double quad = 0.0, dq_t = 0.0, dq_r = 0.0, dl_t = 0.0, dl_r = 0.0;
    for (const auto& sc : schools_) {
      MatrixXd Om = tau * tau * sc.A + rho * tau * sc.B;
      Om.diagonal().array() += 1.0;
      Eigen::LLT<MatrixXd> llt(Om);
      if (llt.info() != Eigen::Success) return {nan, nan};
      const VectorXd w = llt.solve(sc.u);
      const MatrixXd inv = llt.solve(MatrixXd::Identity(Om.rows(), Om.cols()));
      const MatrixXd Dt = 2.0 * tau * sc.A + rho * sc.B;  // dOmega/dtau
      quad += sc.u.dot(w);
      dq_t -= w.dot(Dt * w);
      dq_r -= tau * w.dot(sc.B * w);
      dl_t += inv.cwiseProduct(Dt).sum();
      dl_r += tau * inv.cwiseProduct(sc.B).sum();
    }
    const double N = static_cast<double>(dof_);
    return {-0.5 * N * dq_t / quad - 0.5 * dl_t, -0.5 * N * dq_r / quad - 0.5 * dl_r};
  }

  /// Full Gaussian quasi-log-likelihood (without the 2 pi constant).
  double full(double sigma_eps2, double tau, double rho) const {
    const Terms t = terms(tau, rho);
    if (!t.ok) return -std::numeric_limits<double>::infinity();
    const double N = static_cast<double>(dof_);
    return -0.5 * N * std::log(sigma_eps2) - 0.5 * t.logdet - 0.5 * t.quad / sigma_eps2;
  }

 private:
  struct School {
    MatrixXd A;
    MatrixXd B;
    VectorXd u;
  };
  std::vector<School> schools_;
  Index dof_ = 0;
};

/// Concentrated objective using the isolated/non-isolated annihilator of each school.
inline double concentrated_objective(double tau, double rho, double lambda_hat,
                                     const std::vector<VectorXd>& residuals,
                                     const std::vector<SchoolNetwork>& nets) {
  std::vector<Annihilator> proj;
  proj.reserve(nets.size());
  for (const auto& net : nets) proj.push_back(build_annihilator(net));
  return QmlObjective(lambda_hat, residuals, nets, proj)(tau, rho);
}

namespace detail {

struct SimplexCtx {
  const QmlObjective* obj;
  double log_tau_min, log_tau_max;
  int evals = 0;
};

inline double clamp_eval(const gsl_vector* x, void* p, double* tau_out = nullptr,
                         double* rho_out = nullptr) {
  auto* ctx = static_cast<SimplexCtx*>(p);
  const double lt = gsl_vector_get(x, 0);
  const double r = gsl_vector_get(x, 1);
  const double ltc = std::clamp(lt, ctx->log_tau_min, ctx->log_tau_max);
  const double rc = std::clamp(r, -1.0, 1.0);
  if (tau_out) *tau_out = std::exp(ltc);
  if (rho_out) *rho_out = rc;
  ++ctx->evals;
  const double v = (*ctx->obj)(std::exp(ltc), rc);
  if (!std::isfinite(v)) return 1e300;
  // Quadratic penalty keeps the simplex near the box; the objective itself is
  // evaluated at the projected point.
  const double pen = (lt - ltc) * (lt - ltc) + (r - rc) * (r - rc);
  return -v + 1e3 * pen;
}

inline double simplex_fn(const gsl_vector* x, void* p) { return clamp_eval(x, p); }

}  // namespace detail

/// Maximizes the concentrated objective over (tau, rho) in
/// [tau_min, tau_max] x [-1, 1]: coarse grid (log-spaced tau) then a
/// Nelder-Mead polish from the best grid point.
inline VarComp maximize_qml(const QmlObjective& obj, const VarCompOptions& opt = {}) {
  VarComp vc;
  const double lt0 = std::log(opt.tau_min), lt1 = std::log(opt.tau_max);
  const int g = std::max(2, opt.grid);
  double best = -std::numeric_limits<double>::infinity();
  double best_lt = 0.5 * (lt0 + lt1), best_r = 0.0;
  for (int i = 0; i < g; ++i) {
    const double lt = lt0 + (lt1 - lt0) * i / (g - 1);
    for (int j = 0; j < g; ++j) {
      const double r = -1.0 + 2.0 * j / (g - 1);
      const double v = obj(std::exp(lt), r);
      ++vc.evaluations;
      if (v > best) {
        best = v;
        best_lt = lt;
        best_r = r;
      }
    }
  }
  if (!std::isfinite(best)) throw EstimationError("varcomp", "objective is -inf on the whole grid");

  detail::SimplexCtx ctx{&obj, lt0, lt1};
  gsl_multimin_function fn{&detail::simplex_fn, 2, &ctx};
  std::unique_ptr<gsl_vector, decltype(&gsl_vector_free)> x(gsl_vector_alloc(2), &gsl_vector_free);
  std::unique_ptr<gsl_vector, decltype(&gsl_vector_free)> step(gsl_vector_alloc(2), &gsl_vector_free);
  gsl_vector_set(x.get(), 0, best_lt);
  gsl_vector_set(x.get(), 1, best_r);
  gsl_vector_set(step.get(), 0, (lt1 - lt0) / (g - 1));
  gsl_vector_set(step.get(), 1, 2.0 / (g - 1));
  std::unique_ptr<gsl_multimin_fminimizer, decltype(&gsl_multimin_fminimizer_free)> mm(
      gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, 2),
      &gsl_multimin_fminimizer_free);
  gsl_multimin_fminimizer_set(mm.get(), &fn, x.get(), step.get());
  int status = GSL_CONTINUE;
  double fbest = gsl_multimin_fminimizer_minimum(mm.get());
  int stall = 0;
  for (int it = 0; it < opt.max_iter && status == GSL_CONTINUE; ++it) {
    const int rc = gsl_multimin_fminimizer_iterate(mm.get());
    const double size = gsl_multimin_fminimizer_size(mm.get());
    const double f = gsl_multimin_fminimizer_minimum(mm.get());
    // Rounding noise can keep the simplex from shrinking further; a small
    // simplex whose best value no longer moves counts as converged.
    stall = f < fbest - 1e-12 * std::abs(fbest) ? 0 : stall + 1;
    fbest = std::min(fbest, f);
    if (rc || (stall >= 60 && size < 1e-5)) {
      status = size < 1e-5 ? GSL_SUCCESS : GSL_ENOPROG;
      break;
    }
    status = gsl_multimin_test_size(size, opt.simplex_tol);
  }
  vc.converged = status == GSL_SUCCESS;
  double tau = 0.0, rho = 0.0;
  const double fmin = detail::clamp_eval(gsl_multimin_fminimizer_x(mm.get()), &ctx, &tau, &rho);
  vc.evaluations += ctx.evals;
  if (-fmin < best) {  // polish never worsens the grid optimum
    tau = std::exp(best_lt);
    rho = best_r;
  }
  // The simplex stops once it stalls; near a flat ridge or the rho boundary
  // that leaves the optimum loose in the sixth digit. Coordinate-wise root
  // finding on the analytic partial derivatives sharpens it.
  {
    auto root = [&](auto&& d, double x, double lo, double hi) {
      lo = std::max(lo, x - 0.05);
      hi = std::min(hi, x + 0.05);
      const double flo = d(lo), fhi = d(hi);
      if (!std::isfinite(flo) || !std::isfinite(fhi)) return x;
      if (flo <= 0.0 && fhi <= 0.0) return lo;  // decreasing: maximum at the lower end
      if (flo >= 0.0 && fhi >= 0.0) return hi;
      if (flo < 0.0) return x;  // a minimum in the window, leave it
      boost::uintmax_t it = 100;
      const auto r = boost::math::tools::toms748_solve(d, lo, hi, flo, fhi,
                                                       boost::math::tools::eps_tolerance<double>(50), it);
      vc.evaluations += static_cast<int>(it);
      return 0.5 * (r.first + r.second);
    };
    double lt = std::log(tau), cur = obj(tau, rho);
    for (int sweep = 0; sweep < 20; ++sweep) {
      const double lt_new = root([&](double x) { return obj.gradient(std::exp(x), rho).first * std::exp(x); },
                                 lt, lt0, lt1);
      const double r_new = root([&](double r) { return obj.gradient(std::exp(lt_new), r).second; }, rho, -1.0, 1.0);
      const double v = obj(std::exp(lt_new), r_new);
      if (!(v >= cur)) break;
      const bool moved = std::abs(lt_new - lt) > 1e-14 || std::abs(r_new - rho) > 1e-14;
      lt = lt_new;
      rho = r_new;
      cur = v;
      if (!moved) break;
    }
    // Interior optimum: a few Newton steps on the gradient in (log tau, rho)
    // with a finite-difference Jacobian.
    for (int it = 0; it < 8 && std::abs(rho) < 1.0 - 1e-6 && lt > lt0 && lt < lt1; ++it) {
      auto grad = [&](double x, double r) {
        const auto g = obj.gradient(std::exp(x), r);
        return Eigen::Vector2d(g.first * std::exp(x), g.second);
      };
      const Eigen::Vector2d g0 = grad(lt, rho);
      if (!g0.allFinite()) break;
      const double h = 1e-6;
      Eigen::Matrix2d H;
      H.col(0) = (grad(lt + h, rho) - grad(lt - h, rho)) / (2 * h);
      H.col(1) = (grad(lt, rho + h) - grad(lt, rho - h)) / (2 * h);
      vc.evaluations += 5;
      if (!H.allFinite() || H.determinant() <= 0.0 || H.trace() >= 0.0) break;  // not a local maximum
      const Eigen::Vector2d step = H.partialPivLu().solve(g0);
      const double lt_new = std::clamp(lt - step(0), lt0, lt1), r_new = std::clamp(rho - step(1), -1.0, 1.0);
      const double v = obj(std::exp(lt_new), r_new);
      if (!(v >= cur - 1e-12 * std::abs(cur))) break;
      lt = lt_new;
      rho = r_new;
      cur = std::max(cur, v);
      if (step.norm() < 1e-13) break;
    }
    tau = std::exp(lt);
  }
  vc.tau = tau;
  vc.rho = rho;
  vc.llh = obj(tau, rho);
  vc.sigma_eps2 = obj.sigma_eps2_tilde(tau, rho);
  vc.sigma_eta2 = tau * tau * vc.sigma_eps2;
  vc.rho_at_boundary = std::abs(std::abs(rho) - 1.0) < 1e-6;
  vc.tau_at_boundary = std::abs(std::log(tau) - lt0) < 1e-6 || std::abs(std::log(tau) - lt1) < 1e-6;
  return vc;
}

/// QML variance components from a fitted model's residuals and projectors.
inline VarComp fit_varcomp(const GmmFit& fit, const std::vector<SchoolNetwork>& nets,
                           const VarCompOptions& opt = {}) {
  const QmlObjective obj(fit.lambda(), fit.residuals, nets, fit.design.projectors);
  VarComp vc = maximize_qml(obj, opt);
  vc.lambda_near_zero = std::abs(fit.lambda()) < 0.01;
  return vc;
}

/// Instrument-space covariance sum_s Z_s'(s_e J + s_n J W W' J + rho s_e s_n J (W+W') J) Z_s.
inline MatrixXd structured_meat(const Design& d, const std::vector<SchoolNetwork>& nets,
                                double lambda_hat, double sigma_eps2, double sigma_eta2, double rho) {
  const Index m = d.n_instruments();
  MatrixXd S = MatrixXd::Zero(m, m);
  const double se = std::sqrt(sigma_eps2), sn = std::sqrt(sigma_eta2);
  for (std::size_t s = 0; s < d.blocks.size(); ++s) {
    const MatrixXd& Z = d.blocks[s].Z;  // already projected: J Z = Z
    const MatrixXd GtZ = nets[s].G().transpose() * Z;
    const MatrixXd WtZ = Z - lambda_hat * GtZ;
    const MatrixXd ZWZ = Z.transpose() * (Z - lambda_hat * (nets[s].G() * Z));
    S.noalias() += sigma_eps2 * (Z.transpose() * Z) + sigma_eta2 * (WtZ.transpose() * WtZ) +
                   rho * se * sn * (ZWZ + ZWZ.transpose());
  }
  return linalg::symmetrize(S);
}

/// Covariance of the GMM estimates built from the estimated error structure.
inline MatrixXd qml_vcov(const GmmFit& fit, const VarComp& vc, const std::vector<SchoolNetwork>& nets) {
  return sandwich_vcov(fit.design,
                       structured_meat(fit.design, nets, fit.lambda(), vc.sigma_eps2, vc.sigma_eta2, vc.rho));
}

}  // namespace peerfx
