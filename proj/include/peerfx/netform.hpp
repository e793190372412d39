#pragma once

// Endogenous network formation: dyadic logit with sender and receiver
// heterogeneity, cubic B-spline control bases in the estimated
// heterogeneity, the corrected second stage and a school-block bootstrap.

#include "peerfx/common.hpp"
#include "peerfx/diagnostics.hpp"
#include "peerfx/gmm.hpp"
#include "peerfx/linalg.hpp"
#include "peerfx/netgraph.hpp"
#include "peerfx/parallel.hpp"
#include "peerfx/structsim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace peerfx {

// ---------------------------------------------------------------------------
// Dyad covariates

enum class DyadKind { AbsDifference, SameCategory };

struct DyadTerm {
  Index column = 0;  // covariate column in SchoolData::X
  DyadKind kind = DyadKind::AbsDifference;
  std::string name;
};

using DyadSpec = std::vector<DyadTerm>;

/// Default constructor: absolute differences for every covariate.
inline DyadSpec default_dyad_spec(Index K) {
  DyadSpec s;
  for (Index k = 0; k < K; ++k) s.push_back({k, DyadKind::AbsDifference, "absdiff_x" + std::to_string(k + 1)});
  return s;
}

/// Ordered dyads (i, j), i != j, row-major in i then j.
inline Index dyad_row(Index n, Index i, Index j) { return i * (n - 1) + (j < i ? j : j - 1); }

inline MatrixXd build_dyad_covariates(const MatrixXd& X, const DyadSpec& spec) {
  const Index n = X.rows();
  MatrixXd D(n * (n - 1), static_cast<Index>(spec.size()));
  for (std::size_t t = 0; t < spec.size(); ++t) {
    const auto& term = spec[t];
    if (term.column < 0 || term.column >= X.cols()) throw ConfigError("netform", "dyad term column out of range");
    const auto x = X.col(term.column);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) {
        if (i == j) continue;
        D(dyad_row(n, i, j), static_cast<Index>(t)) =
            term.kind == DyadKind::AbsDifference ? std::abs(x(i) - x(j)) : (x(i) == x(j) ? 1.0 : 0.0);
      }
  }
  return D;
}

inline std::vector<MatrixXd> build_dyad_covariates(const std::vector<SchoolData>& data, const DyadSpec& spec) {
  std::vector<MatrixXd> out;
  out.reserve(data.size());
  for (const auto& d : data) out.push_back(build_dyad_covariates(d.X, spec));
  return out;
}

// ---------------------------------------------------------------------------
// Dyadic logit

struct LogitOptions {
  int max_iter = 2000;
  double grad_tol = 1e-6;
  double max_step = 2.0;
};

struct SchoolHeterogeneity {
  VectorXd mu_out;
  VectorXd mu_in;
  std::vector<bool> out_retained;
  std::vector<bool> in_retained;
};

struct FirstStageFit {
  VectorXd beta_dyad;
  std::vector<std::string> names;
  std::vector<SchoolHeterogeneity> schools;
  std::vector<std::pair<Index, Index>> excluded_out;  // (school, node)
  std::vector<std::pair<Index, Index>> excluded_in;
  double loglik = 0.0;
  double max_gradient = 0.0;
  int iterations = 0;
  bool converged = false;
  Warnings warnings;
};

namespace detail {

inline double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

inline double log1pexp(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

/// Retained sender and receiver sets: a node whose (retained) out- or
/// in-degree is 0 or maximal has an infinite MLE and is excluded; removal is
/// repeated until stable.
inline void retained_sets(const MatrixXd& A, std::vector<bool>& out_ok, std::vector<bool>& in_ok) {
  const Index n = A.rows();
  out_ok.assign(static_cast<std::size_t>(n), true);
  in_ok.assign(static_cast<std::size_t>(n), true);
  for (bool changed = true; changed;) {
    changed = false;
    for (Index i = 0; i < n; ++i) {
      if (!out_ok[static_cast<std::size_t>(i)]) continue;
      Index deg = 0, cand = 0;
      for (Index j = 0; j < n; ++j)
        if (j != i && in_ok[static_cast<std::size_t>(j)]) {
          ++cand;
          deg += A(i, j) != 0.0;
        }
      if (deg == 0 || deg == cand) {
        out_ok[static_cast<std::size_t>(i)] = false;
        changed = true;
      }
    }
    for (Index j = 0; j < n; ++j) {
      if (!in_ok[static_cast<std::size_t>(j)]) continue;
      Index deg = 0, cand = 0;
      for (Index i = 0; i < n; ++i)
        if (i != j && out_ok[static_cast<std::size_t>(i)]) {
          ++cand;
          deg += A(i, j) != 0.0;
        }
      if (deg == 0 || deg == cand) {
        in_ok[static_cast<std::size_t>(j)] = false;
        changed = true;
      }
    }
  }
}

}  // namespace detail

/// Per-school data of the logit problem, restricted to retained dyads.
struct LogitProblem {
  std::vector<MatrixXd> adjacency;
  std::vector<MatrixXd> dyads;
  std::vector<std::vector<bool>> out_ok, in_ok;
};

inline LogitProblem make_logit_problem(const std::vector<SchoolNetwork>& nets, const std::vector<MatrixXd>& dyads) {
  if (nets.size() != dyads.size()) throw InputError("netform", "dyad covariates must align with schools");
  LogitProblem pb;
  for (std::size_t s = 0; s < nets.size(); ++s) {
    const Index n = nets[s].n();
    if (dyads[s].rows() != n * (n - 1)) throw InputError("netform", "dyad covariate rows must be n(n-1)");
    pb.adjacency.push_back(nets[s].adjacency_dense());
    std::vector<bool> o, i;
    detail::retained_sets(pb.adjacency.back(), o, i);
    pb.out_ok.push_back(std::move(o));
    pb.in_ok.push_back(std::move(i));
    pb.dyads.push_back(dyads[s]);
  }
  return pb;
}

/// Log-likelihood over retained dyads.
inline double dyadic_loglik(const LogitProblem& pb, const VectorXd& beta, const std::vector<VectorXd>& mu_out,
                            const std::vector<VectorXd>& mu_in) {
  double ll = 0.0;
  for (std::size_t s = 0; s < pb.adjacency.size(); ++s) {
    const MatrixXd& A = pb.adjacency[s];
    const Index n = A.rows();
    const VectorXd xb = pb.dyads[s] * beta;
    for (Index i = 0; i < n; ++i) {
      if (!pb.out_ok[s][static_cast<std::size_t>(i)]) continue;
      for (Index j = 0; j < n; ++j) {
        if (j == i || !pb.in_ok[s][static_cast<std::size_t>(j)]) continue;
        const double z = xb(dyad_row(n, i, j)) + mu_out[s](i) + mu_in[s](j);
        ll += A(i, j) * z - detail::log1pexp(z);
      }
    }
  }
  return ll;
}

/// Alternating maximization: simultaneous one-dimensional Newton updates of
/// every sender effect, then every receiver effect, then a Newton step on
/// the dyad coefficients. After convergence the sender effects are centred
/// per school and the shift moved to the receiver effects.
inline FirstStageFit fit_dyadic_logit(const std::vector<SchoolNetwork>& nets, const std::vector<MatrixXd>& dyads,
                                      const LogitOptions& opt = {}, std::vector<std::string> names = {}) {
  const LogitProblem pb = make_logit_problem(nets, dyads);
  const Index Q = dyads.empty() ? 0 : dyads.front().cols();
  FirstStageFit fit;
  fit.names = std::move(names);
  while (static_cast<Index>(fit.names.size()) < Q) fit.names.push_back("dyad_" + std::to_string(fit.names.size() + 1));
  fit.beta_dyad = VectorXd::Zero(Q);
  std::vector<VectorXd> mo, mi;
  for (std::size_t s = 0; s < nets.size(); ++s) {
    const Index n = nets[s].n();
    Index links = 0, cand = 0;
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j)
        if (i != j && pb.out_ok[s][static_cast<std::size_t>(i)] && pb.in_ok[s][static_cast<std::size_t>(j)]) {
          ++cand;
          links += pb.adjacency[s](i, j) != 0.0;
        }
    if (links == 0 || links == cand)
      throw EstimationError("netform", "school " + nets[s].school_id() + " has no retained link/non-link variation");
    // Start every effect at the logit of the school density.
    const double p0 = static_cast<double>(links) / static_cast<double>(cand);
    mo.push_back(VectorXd::Zero(n));
    mi.push_back(VectorXd::Constant(n, std::log(p0 / (1.0 - p0))));
    for (Index i = 0; i < n; ++i) {
      if (!pb.out_ok[s][static_cast<std::size_t>(i)]) fit.excluded_out.emplace_back(static_cast<Index>(s), i);
      if (!pb.in_ok[s][static_cast<std::size_t>(i)]) fit.excluded_in.emplace_back(static_cast<Index>(s), i);
    }
  }

  auto clampstep = [&](double x) { return std::clamp(x, -opt.max_step, opt.max_step); };
  double gmax = INFINITY;
  int it = 0;
  for (; it < opt.max_iter; ++it) {
    gmax = 0.0;
    // Sender effects.
    for (std::size_t s = 0; s < nets.size(); ++s) {
      const MatrixXd& A = pb.adjacency[s];
      const Index n = A.rows();
      const VectorXd xb = pb.dyads[s] * fit.beta_dyad;
      for (Index i = 0; i < n; ++i) {
        if (!pb.out_ok[s][static_cast<std::size_t>(i)]) continue;
        double g = 0.0, h = 0.0;
        for (Index j = 0; j < n; ++j) {
          if (j == i || !pb.in_ok[s][static_cast<std::size_t>(j)]) continue;
          const double p = detail::sigmoid(xb(dyad_row(n, i, j)) + mo[s](i) + mi[s](j));
          g += A(i, j) - p;
          h += p * (1.0 - p);
        }
        gmax = std::max(gmax, std::abs(g));
        mo[s](i) += clampstep(g / std::max(h, 1e-12));
      }
      // Receiver effects.
      for (Index j = 0; j < n; ++j) {
        if (!pb.in_ok[s][static_cast<std::size_t>(j)]) continue;
        double g = 0.0, h = 0.0;
        for (Index i = 0; i < n; ++i) {
          if (i == j || !pb.out_ok[s][static_cast<std::size_t>(i)]) continue;
          const double p = detail::sigmoid(xb(dyad_row(n, i, j)) + mo[s](i) + mi[s](j));
          g += A(i, j) - p;
          h += p * (1.0 - p);
        }
        gmax = std::max(gmax, std::abs(g));
        mi[s](j) += clampstep(g / std::max(h, 1e-12));
      }
    }
    // Dyad coefficients.
    if (Q > 0) {
      VectorXd g = VectorXd::Zero(Q);
      MatrixXd H = MatrixXd::Zero(Q, Q);
      for (std::size_t s = 0; s < nets.size(); ++s) {
        const MatrixXd& A = pb.adjacency[s];
        const Index n = A.rows();
        const VectorXd xb = pb.dyads[s] * fit.beta_dyad;
        for (Index i = 0; i < n; ++i) {
          if (!pb.out_ok[s][static_cast<std::size_t>(i)]) continue;
          for (Index j = 0; j < n; ++j) {
            if (j == i || !pb.in_ok[s][static_cast<std::size_t>(j)]) continue;
            const Index r = dyad_row(n, i, j);
            const double p = detail::sigmoid(xb(r) + mo[s](i) + mi[s](j));
            const auto x = pb.dyads[s].row(r).transpose();
            g += (A(i, j) - p) * x;
            H.noalias() += p * (1.0 - p) * x * x.transpose();
          }
        }
      }
      gmax = std::max(gmax, g.cwiseAbs().maxCoeff());
      Eigen::LDLT<MatrixXd> ldlt(H);
      if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
        throw EstimationError("netform", "dyad covariate information matrix is singular");
      VectorXd step = ldlt.solve(g);
      const double big = step.cwiseAbs().maxCoeff();
      if (big > opt.max_step) step *= opt.max_step / big;
      fit.beta_dyad += step;
    }
    if (gmax <= opt.grad_tol) break;
  }
  fit.iterations = it;
  fit.max_gradient = gmax;
  fit.converged = gmax <= opt.grad_tol;
  if (!fit.converged) fit.warnings.push_back({"netform", "dyadic logit did not reach the gradient tolerance"});
  fit.loglik = dyadic_loglik(pb, fit.beta_dyad, mo, mi);

  // Location normalization: mean retained sender effect is zero per school.
  for (std::size_t s = 0; s < nets.size(); ++s) {
    double sum = 0.0;
    Index cnt = 0;
    for (Index i = 0; i < mo[s].size(); ++i)
      if (pb.out_ok[s][static_cast<std::size_t>(i)]) {
        sum += mo[s](i);
        ++cnt;
      }
    const double c = cnt ? sum / static_cast<double>(cnt) : 0.0;
    for (Index i = 0; i < mo[s].size(); ++i) {
      if (pb.out_ok[s][static_cast<std::size_t>(i)]) mo[s](i) -= c;
      if (pb.in_ok[s][static_cast<std::size_t>(i)]) mi[s](i) += c;
    }
  }

  // Excluded nodes take the smallest or largest retained value, pooled over
  // schools, depending on the direction of their separation.
  auto pooled = [&](const std::vector<VectorXd>& mu, const std::vector<std::vector<bool>>& ok) {
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t s = 0; s < mu.size(); ++s)
      for (Index i = 0; i < mu[s].size(); ++i)
        if (ok[s][static_cast<std::size_t>(i)]) {
          lo = std::min(lo, mu[s](i));
          hi = std::max(hi, mu[s](i));
        }
    return std::pair{lo, hi};
  };
  const auto [olo, ohi] = pooled(mo, pb.out_ok);
  const auto [ilo, ihi] = pooled(mi, pb.in_ok);
  for (std::size_t s = 0; s < nets.size(); ++s) {
    const MatrixXd& A = pb.adjacency[s];
    const Index n = A.rows();
    for (Index i = 0; i < n; ++i) {
      if (!pb.out_ok[s][static_cast<std::size_t>(i)]) {
        Index deg = 0, cand = 0;
        for (Index j = 0; j < n; ++j)
          if (j != i && pb.in_ok[s][static_cast<std::size_t>(j)]) {
            ++cand;
            deg += A(i, j) != 0.0;
          }
        mo[s](i) = deg == 0 || cand == 0 ? olo : ohi;
      }
      if (!pb.in_ok[s][static_cast<std::size_t>(i)]) {
        Index deg = 0, cand = 0;
        for (Index j = 0; j < n; ++j)
          if (j != i && pb.out_ok[s][static_cast<std::size_t>(j)]) {
            ++cand;
            deg += A(j, i) != 0.0;
          }
        mi[s](i) = deg == 0 || cand == 0 ? ilo : ihi;
      }
    }
    fit.schools.push_back({mo[s], mi[s], pb.out_ok[s], pb.in_ok[s]});
  }
  if (!fit.excluded_out.empty() || !fit.excluded_in.empty())
    fit.warnings.push_back({"netform", std::to_string(fit.excluded_out.size()) + " sender and " +
                                           std::to_string(fit.excluded_in.size()) +
                                           " receiver effects excluded for separation"});
  return fit;
}

/// Score of the logit log-likelihood at a fit (before exclusion handling):
/// per retained node the sums of (a - p) over its retained dyads, and the
/// dyad-coefficient gradient. Used to verify the optimum.
struct LogitScore {
  double max_node = 0.0;
  double max_beta = 0.0;
};

inline LogitScore dyadic_logit_score(const std::vector<SchoolNetwork>& nets, const std::vector<MatrixXd>& dyads,
                                     const FirstStageFit& fit) {
  const LogitProblem pb = make_logit_problem(nets, dyads);
  LogitScore sc;
  VectorXd gb = VectorXd::Zero(fit.beta_dyad.size());
  for (std::size_t s = 0; s < nets.size(); ++s) {
    const MatrixXd& A = pb.adjacency[s];
    const Index n = A.rows();
    const auto& h = fit.schools[s];
    VectorXd go = VectorXd::Zero(n), gi = VectorXd::Zero(n);
    const VectorXd xb = pb.dyads[s] * fit.beta_dyad;
    for (Index i = 0; i < n; ++i) {
      if (!pb.out_ok[s][static_cast<std::size_t>(i)]) continue;
      for (Index j = 0; j < n; ++j) {
        if (j == i || !pb.in_ok[s][static_cast<std::size_t>(j)]) continue;
        const Index r = dyad_row(n, i, j);
        const double e = A(i, j) - detail::sigmoid(xb(r) + h.mu_out(i) + h.mu_in(j));
        go(i) += e;
        gi(j) += e;
        gb += e * pb.dyads[s].row(r).transpose();
      }
    }
    sc.max_node = std::max({sc.max_node, go.cwiseAbs().maxCoeff(), gi.cwiseAbs().maxCoeff()});
  }
  sc.max_beta = gb.size() ? gb.cwiseAbs().maxCoeff() : 0.0;
  return sc;
}

// ---------------------------------------------------------------------------
// Cubic B-splines

/// Clamped knot vector for a spline of the given degree: the boundary knots
/// repeated degree + 1 times around the interior knots.
inline std::vector<double> clamped_knots(double lo, double hi, const std::vector<double>& interior, int degree = 3) {
  std::vector<double> t(static_cast<std::size_t>(degree + 1), lo);
  t.insert(t.end(), interior.begin(), interior.end());
  t.insert(t.end(), static_cast<std::size_t>(degree + 1), hi);
  return t;
}

/// All B-spline basis values at x (de Boor's triangular scheme). The last
/// interval is closed on the right; x outside [t_0, t_last] is clamped.
inline VectorXd bspline_basis(double x, const std::vector<double>& t, int degree = 3) {
  const Index nb = static_cast<Index>(t.size()) - degree - 1;
  if (nb < 1) throw ConfigError("netform", "too few knots for the spline degree");
  const double lo = t[static_cast<std::size_t>(degree)];
  const double hi = t[static_cast<std::size_t>(nb)];
  x = std::clamp(x, lo, hi);
  // Knot span mu with t[mu] <= x < t[mu+1], using the last non-empty span at x = hi.
  Index mu = degree;
  while (mu + 1 < nb && t[static_cast<std::size_t>(mu + 1)] <= x) ++mu;
  VectorXd N = VectorXd::Zero(degree + 1);
  N(0) = 1.0;
  VectorXd left(degree + 1), right(degree + 1);
  for (int j = 1; j <= degree; ++j) {
    left(j) = x - t[static_cast<std::size_t>(mu + 1 - j)];
    right(j) = t[static_cast<std::size_t>(mu + j)] - x;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double den = right(r + 1) + left(j - r);
      const double tmp = den != 0.0 ? N(r) / den : 0.0;
      N(r) = saved + right(r + 1) * tmp;
      saved = left(j - r) * tmp;
    }
    N(j) = saved;
  }
  VectorXd out = VectorXd::Zero(nb);
  for (int r = 0; r <= degree; ++r) out(mu - degree + r) = N(r);
  return out;
}

struct ControlBases {
  std::vector<MatrixXd> bases;  // per school, n x (b_out + b_in)
  std::vector<std::string> names;
  std::vector<double> knots_out, knots_in;  // interior knots
  double out_lo = 0, out_hi = 0, in_lo = 0, in_hi = 0;
  Index n_out = 0, n_in = 0;
  std::vector<std::vector<bool>> imputed;  // per school, node lacked a retained sender or receiver effect
  Warnings warnings;

  Index columns() const { return n_out + n_in; }
};

/// Quantile by linear interpolation between order statistics (type 7).
inline double quantile_type7(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Interior knots at the deciles of `values`, duplicates removed.
inline std::vector<double> decile_knots(const std::vector<double>& values, int interior, Warnings* w,
                                        const std::string& what) {
  std::vector<double> u = values;
  std::sort(u.begin(), u.end());
  u.erase(std::unique(u.begin(), u.end()), u.end());
  if (static_cast<int>(u.size()) < interior + 2)
    throw EstimationError("netform", "too few distinct " + what + " values (" + std::to_string(u.size()) +
                                         ") to place " + std::to_string(interior) + " interior knots");
  const double lo = u.front(), hi = u.back();
  std::vector<double> k;
  for (int q = 1; q <= interior; ++q) {
    const double v = quantile_type7(values, static_cast<double>(q) / (interior + 1));
    if (v > lo && v < hi && (k.empty() || v > k.back())) k.push_back(v);
  }
  if (static_cast<int>(k.size()) < interior && w)
    w->push_back({"netform", what + ": " + std::to_string(interior - static_cast<int>(k.size())) +
                                 " duplicate knots removed"});
  return k;
}

struct BasisOptions {
  int interior_knots = 9;
  int degree = 3;
};

inline ControlBases build_control_bases(const FirstStageFit& fs, const BasisOptions& opt = {}) {
  std::vector<double> vo, vi;
  for (const auto& h : fs.schools)
    for (Index i = 0; i < h.mu_out.size(); ++i) {
      if (h.out_retained[static_cast<std::size_t>(i)]) vo.push_back(h.mu_out(i));
      if (h.in_retained[static_cast<std::size_t>(i)]) vi.push_back(h.mu_in(i));
    }
  ControlBases cb;
  cb.knots_out = decile_knots(vo, opt.interior_knots, &cb.warnings, "sender effect");
  cb.knots_in = decile_knots(vi, opt.interior_knots, &cb.warnings, "receiver effect");
  cb.out_lo = *std::min_element(vo.begin(), vo.end());
  cb.out_hi = *std::max_element(vo.begin(), vo.end());
  cb.in_lo = *std::min_element(vi.begin(), vi.end());
  cb.in_hi = *std::max_element(vi.begin(), vi.end());
  const auto to = clamped_knots(cb.out_lo, cb.out_hi, cb.knots_out, opt.degree);
  const auto ti = clamped_knots(cb.in_lo, cb.in_hi, cb.knots_in, opt.degree);
  cb.n_out = static_cast<Index>(to.size()) - opt.degree - 1;
  cb.n_in = static_cast<Index>(ti.size()) - opt.degree - 1;
  for (Index b = 0; b < cb.n_out; ++b) cb.names.push_back("h_out_" + std::to_string(b + 1));
  for (Index b = 0; b < cb.n_in; ++b) cb.names.push_back("h_in_" + std::to_string(b + 1));
  for (const auto& h : fs.schools) {
    const Index n = h.mu_out.size();
    MatrixXd B(n, cb.columns());
    std::vector<bool> imp(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      B.row(i).head(cb.n_out) = bspline_basis(h.mu_out(i), to, opt.degree).transpose();
      B.row(i).tail(cb.n_in) = bspline_basis(h.mu_in(i), ti, opt.degree).transpose();
      imp[static_cast<std::size_t>(i)] = !h.out_retained[static_cast<std::size_t>(i)] ||
                                         !h.in_retained[static_cast<std::size_t>(i)];
    }
    cb.bases.push_back(std::move(B));
    cb.imputed.push_back(std::move(imp));
  }
  return cb;
}

// ---------------------------------------------------------------------------
// Second stage

struct WaldTest {
  double stat = 0.0;
  int df = 0;
  double p = 1.0;
};

struct SecondStageFit {
  GmmFit fit;
  WaldTest bases_test;  // joint nullity of the surviving basis coefficients
};

inline SecondStageFit fit_second_stage(const ModelSpec& spec, const std::vector<SchoolNetwork>& nets,
                                       const std::vector<SchoolData>& data, const ControlBases& cb,
                                       const std::vector<std::string>& covariate_names = {}) {
  ExtraControls extra{cb.bases, cb.names};
  SecondStageFit out{fit(spec, nets, data, &extra, covariate_names), {}};
  std::vector<Index> idx;
  for (const auto& nm : cb.names) {
    const Index c = out.fit.index_of(nm);
    if (c >= 0) idx.push_back(c);
  }
  if (!idx.empty()) {
    const Index q = static_cast<Index>(idx.size());
    VectorXd b(q);
    MatrixXd V(q, q);
    for (Index a = 0; a < q; ++a) {
      b(a) = out.fit.theta(idx[static_cast<std::size_t>(a)]);
      for (Index c = 0; c < q; ++c)
        V(a, c) = out.fit.vcov_white(idx[static_cast<std::size_t>(a)], idx[static_cast<std::size_t>(c)]);
    }
    Index rank = 0;
    const MatrixXd Vi = linalg::sym_pinv(V, 1e-12 * std::max(1e-300, V.cwiseAbs().maxCoeff()), &rank);
    out.bases_test.stat = std::max(0.0, b.dot(Vi * b));
    out.bases_test.df = static_cast<int>(rank);
    if (rank > 0) out.bases_test.p = chi2_upper(out.bases_test.stat, static_cast<double>(rank));
  }
  return out;
}

/// First stage, bases and second stage in one call.
struct EndogenousFit {
  FirstStageFit first_stage;
  ControlBases bases;
  SecondStageFit second_stage;
};

struct EndogenousOptions {
  ModelSpec spec;
  DyadSpec dyads;
  LogitOptions logit;
  BasisOptions basis;
};

inline EndogenousFit fit_endogenous(const EndogenousOptions& opt, const std::vector<SchoolNetwork>& nets,
                                    const std::vector<SchoolData>& data,
                                    const std::vector<std::string>& covariate_names = {}) {
  if (data.empty()) throw InputError("netform", "no schools");
  const DyadSpec dspec = opt.dyads.empty() ? default_dyad_spec(data.front().X.cols()) : opt.dyads;
  std::vector<std::string> dnames;
  for (const auto& t : dspec) dnames.push_back(t.name);
  EndogenousFit ef;
  ef.first_stage = fit_dyadic_logit(nets, build_dyad_covariates(data, dspec), opt.logit, dnames);
  ef.bases = build_control_bases(ef.first_stage, opt.basis);
  ef.second_stage = fit_second_stage(opt.spec, nets, data, ef.bases, covariate_names);
  return ef;
}

// ---------------------------------------------------------------------------
// School-block bootstrap

struct BootstrapResult {
  MatrixXd vcov;  // of psi
  MatrixXd draws;  // successful replicates x n_psi
  VectorXd lower, upper;  // percentile interval bounds
  int requested = 0;
  int succeeded = 0;
  Warnings warnings;
};

inline BootstrapResult bootstrap_vcov(const EndogenousOptions& opt, const std::vector<SchoolNetwork>& nets,
                                      const std::vector<SchoolData>& data, int B, std::uint64_t seed,
                                      unsigned threads = 1, double level = 0.95) {
  if (B < 50) throw ConfigError("netform", "bootstrap needs at least 50 replicates");
  const Index S = static_cast<Index>(nets.size());
  std::vector<std::optional<VectorXd>> psi(static_cast<std::size_t>(B));
  std::vector<std::string> errors(static_cast<std::size_t>(B));
  parallel_for(static_cast<std::size_t>(B), threads, [&](std::size_t b) {
    std::mt19937_64 rng(seed + b);
    std::uniform_int_distribution<Index> pick(0, S - 1);
    std::vector<SchoolNetwork> bn;
    std::vector<SchoolData> bd;
    for (Index s = 0; s < S; ++s) {
      const Index k = pick(rng);
      bn.push_back(nets[static_cast<std::size_t>(k)]);
      bd.push_back(data[static_cast<std::size_t>(k)]);
    }
    try {
      psi[b] = fit_endogenous(opt, bn, bd).second_stage.fit.psi();
    } catch (const Error& e) {
      errors[b] = e.what();
    }
  });
  BootstrapResult r;
  r.requested = B;
  std::vector<VectorXd> ok;
  for (std::size_t b = 0; b < psi.size(); ++b) {
    if (psi[b])
      ok.push_back(*psi[b]);
    else
      r.warnings.push_back({"netform", "bootstrap replicate " + std::to_string(b) + " failed: " + errors[b]});
  }
  r.succeeded = static_cast<int>(ok.size());
  if (r.succeeded < static_cast<int>(std::ceil(0.8 * B)))
    throw EstimationError("netform", "only " + std::to_string(r.succeeded) + " of " + std::to_string(B) +
                                         " bootstrap replicates succeeded");
  const Index k = ok.front().size();
  r.draws.resize(r.succeeded, k);
  for (int b = 0; b < r.succeeded; ++b) r.draws.row(b) = ok[static_cast<std::size_t>(b)].transpose();
  const MatrixXd c = r.draws.rowwise() - r.draws.colwise().mean();
  r.vcov = c.transpose() * c / static_cast<double>(std::max(1, r.succeeded - 1));
  r.lower.resize(k);
  r.upper.resize(k);
  for (Index j = 0; j < k; ++j) {
    std::vector<double> col(r.draws.col(j).data(), r.draws.col(j).data() + r.succeeded);
    r.lower(j) = quantile_type7(col, (1.0 - level) / 2.0);
    r.upper(j) = quantile_type7(col, 1.0 - (1.0 - level) / 2.0);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Simulation of the formation model

struct FormationDraw {
  SchoolNetwork net;
  VectorXd mu_out, mu_in;
};

/// Links drawn independently with logit probability
/// dyads * beta + mu_out_i + mu_in_j.
template <class URBG>
SchoolNetwork draw_logit_network(const MatrixXd& dyads, const VectorXd& beta, const VectorXd& mu_out,
                                 const VectorXd& mu_in, URBG& rng, std::string id = "1") {
  const Index n = mu_out.size();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<int>> links(static_cast<std::size_t>(n));
  const VectorXd xb = dyads * beta;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) {
      if (i == j) continue;
      if (u(rng) < detail::sigmoid(xb(dyad_row(n, i, j)) + mu_out(i) + mu_in(j)))
        links[static_cast<std::size_t>(i)].push_back(static_cast<int>(j));
    }
  return SchoolNetwork(std::move(id), n, std::move(links));
}

}  // namespace peerfx
