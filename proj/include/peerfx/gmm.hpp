#pragma once

// Instrumented GMM for the four nested linear-in-means specifications after
// fixed-effect annihilation.
//
// Column layout (per school, after projection by the model's J):
//   R = [J G y | J X | J G X | controls]
//   Z = [J X | J G X | controls | J G^2 X | ... | J G^p X]
// where controls are the Model 1 constant, the Model 3 "has friends" dummy
// and any caller-supplied extra regressors (e.g. control-function bases).
// The excluded instruments are always the trailing block of Z.

#include "peerfx/common.hpp"
#include "peerfx/linalg.hpp"
#include "peerfx/netgraph.hpp"
#include "peerfx/structsim.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace peerfx {

enum class Model { M1 = 1, M2 = 2, M3 = 3, M4 = 4 };

inline int model_number(Model m) { return static_cast<int>(m); }

inline Model model_from_number(int k) {
  if (k < 1 || k > 4) throw ConfigError("gmm", "model must be 1, 2, 3 or 4");
  return static_cast<Model>(k);
}

enum class Weighting { TwoSLS, TwoStep };

struct ModelSpec {
  Model model = Model::M4;
  int instrument_power = 2;
  Weighting weighting = Weighting::TwoSLS;

  void validate() const {
    if (instrument_power < 2) throw ConfigError("gmm", "instrument power must be at least 2");
  }
};

/// Caller-supplied extra regressors, one un-projected matrix per school. They
/// enter both R and Z (treated as exogenous).
struct ExtraControls {
  std::vector<MatrixXd> columns;
  std::vector<std::string> names;
};

struct SchoolBlock {
  VectorXd Jy;
  MatrixXd R;
  MatrixXd Z;
};

struct Design {
  ModelSpec spec;
  std::vector<SchoolBlock> blocks;
  std::vector<Annihilator> projectors;
  std::vector<std::string> r_names;
  std::vector<std::string> z_names;
  std::vector<Index> covariates;  // indices into the caller's X that survived
  Index n_psi = 0;                // 1 + 2K for the surviving covariates
  Index n_excluded = 0;
  Index n_obs = 0;
  Warnings warnings;

  Index n_schools() const { return static_cast<Index>(blocks.size()); }
  Index n_params() const { return static_cast<Index>(r_names.size()); }
  Index n_instruments() const { return static_cast<Index>(z_names.size()); }
};

struct TestReport {
  double weak_iv_F = std::nan("");
  std::optional<double> sargan_stat;
  std::optional<int> sargan_df;
  std::optional<double> sargan_p;
  std::optional<double> hausman_stat;
  std::optional<int> hausman_df;
  std::optional<double> hausman_p;
};

/// Recovered intercepts. Model 2 sets both entries of a school equal; Model 3
/// stores the school intercept of isolated students and adds the pooled
/// "has friends" coefficient for non-isolated students; Model 1 has a single
/// global intercept.
struct SchoolIntercepts {
  std::optional<double> iso;
  std::optional<double> noniso;
};

struct FixedEffects {
  std::vector<SchoolIntercepts> schools;
  std::optional<double> has_friends_coef;
  std::optional<double> global;
};

struct GmmFit {
  ModelSpec spec;
  Design design;
  VectorXd theta;
  std::vector<VectorXd> residuals;
  MatrixXd vcov_white;
  std::optional<MatrixXd> vcov_qml;
  std::optional<TestReport> diagnostics;
  bool lambda_outside_unit = false;
  Warnings warnings;

  double lambda() const { return theta(0); }
  VectorXd psi() const { return theta.head(design.n_psi); }
  const std::vector<std::string>& names() const { return design.r_names; }

  Index index_of(const std::string& name) const {
    for (std::size_t i = 0; i < design.r_names.size(); ++i)
      if (design.r_names[i] == name) return static_cast<Index>(i);
    return -1;
  }
};

namespace detail {

inline Annihilator model_projector(Model m, const SchoolNetwork& net) {
  switch (m) {
    case Model::M1: {
      Annihilator a;
      a.J = MatrixXd::Identity(net.n(), net.n());
      a.F = a.J;
      a.groups = 0;
      return a;
    }
    case Model::M2:
    case Model::M3:
      return centering_annihilator(net.n());
    case Model::M4:
      return build_annihilator(net);
  }
  return {};
}

/// Greedy left-to-right independence selection on a stacked matrix: a column
/// is kept when its component orthogonal to the kept columns has norm above
/// rel_tol times the largest column norm.
inline std::vector<Index> independent_columns(const MatrixXd& m, double rel_tol) {
  const double scale = m.cols() ? m.colwise().norm().maxCoeff() : 0.0;
  std::vector<Index> keep;
  MatrixXd Q(m.rows(), 0);
  for (Index c = 0; c < m.cols(); ++c) {
    VectorXd v = m.col(c);
    for (int pass = 0; pass < 2; ++pass)
      if (Q.cols()) v -= Q * (Q.transpose() * v);
    const double r = v.norm();
    if (scale > 0.0 && r > rel_tol * scale) {
      keep.push_back(c);
      Q.conservativeResize(Eigen::NoChange, Q.cols() + 1);
      Q.col(Q.cols() - 1) = v / r;
    }
  }
  return keep;
}

inline MatrixXd select_cols(const MatrixXd& m, const std::vector<Index>& idx) {
  MatrixXd out(m.rows(), static_cast<Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Index>(k)) = m.col(idx[k]);
  return out;
}

struct Moments {
  MatrixXd ZZ;
  MatrixXd RZ;
  VectorXd Zy;
};

inline Moments accumulate(const Design& d) {
  Moments m{MatrixXd::Zero(d.n_instruments(), d.n_instruments()),
            MatrixXd::Zero(d.n_params(), d.n_instruments()), VectorXd::Zero(d.n_instruments())};
  for (const auto& b : d.blocks) {
    m.ZZ.noalias() += b.Z.transpose() * b.Z;
    m.RZ.noalias() += b.R.transpose() * b.Z;
    m.Zy.noalias() += b.Z.transpose() * b.Jy;
  }
  return m;
}

inline MatrixXd cluster_meat(const Design& d, const std::vector<VectorXd>& resid) {
  MatrixXd S = MatrixXd::Zero(d.n_instruments(), d.n_instruments());
  for (std::size_t s = 0; s < d.blocks.size(); ++s) {
    const VectorXd g = d.blocks[s].Z.transpose() * resid[s];
    S.noalias() += g * g.transpose();
  }
  return S;
}

}  // namespace detail

/// Builds the projected regressor and instrument blocks for every school.
inline Design build_design(const ModelSpec& spec, const std::vector<SchoolNetwork>& nets,
                           const std::vector<SchoolData>& data,
                           const ExtraControls* extra = nullptr,
                           const std::vector<std::string>& covariate_names = {}) {
  spec.validate();
  if (nets.size() != data.size() || nets.empty())
    throw InputError("gmm", "networks and data must be non-empty and aligned");
  const Index K = data.front().X.cols();
  for (std::size_t s = 0; s < nets.size(); ++s) {
    if (data[s].X.rows() != nets[s].n() || data[s].y.size() != nets[s].n() || data[s].X.cols() != K)
      throw InputError("gmm", "school " + nets[s].school_id() + ": data do not match network");
    if (extra && (extra->columns.size() != nets.size() ||
                  extra->columns[s].rows() != nets[s].n() ||
                  extra->columns[s].cols() != static_cast<Index>(extra->names.size())))
      throw InputError("gmm", "extra controls do not match the schools");
  }
  auto xname = [&](Index k) {
    return k < static_cast<Index>(covariate_names.size()) ? covariate_names[static_cast<std::size_t>(k)]
                                                          : "x" + std::to_string(k + 1);
  };

  Design d;
  d.spec = spec;
  d.projectors.reserve(nets.size());
  for (const auto& net : nets) d.projectors.push_back(detail::model_projector(spec.model, net));

  // Covariates annihilated by the projection in every school carry no
  // information; drop them with all derived columns.
  for (Index k = 0; k < K; ++k) {
    double raw = 0.0, proj = 0.0;
    for (std::size_t s = 0; s < nets.size(); ++s) {
      raw = std::max(raw, data[s].X.col(k).cwiseAbs().maxCoeff());
      proj = std::max(proj, (d.projectors[s].J * data[s].X.col(k)).cwiseAbs().maxCoeff());
    }
    const bool dead = spec.model == Model::M1 ? raw == 0.0 : proj <= 1e-10 * std::max(1.0, raw);
    if (dead)
      d.warnings.push_back({"gmm", "covariate " + xname(k) + " is annihilated by the projection; dropped"});
    else
      d.covariates.push_back(k);
  }
  const Index Kk = static_cast<Index>(d.covariates.size());
  if (Kk == 0) throw EstimationError("gmm", "no covariate survives the projection");

  // Candidate exogenous block names.
  std::vector<std::string> exo_names;
  for (Index k : d.covariates) exo_names.push_back(xname(k));
  for (Index k : d.covariates) exo_names.push_back("G_" + xname(k));
  if (spec.model == Model::M1) exo_names.push_back("intercept");
  if (spec.model == Model::M3) exo_names.push_back("has_friends");
  if (extra)
    for (const auto& nm : extra->names) exo_names.push_back(nm);
  std::vector<std::string> ex_names;
  for (int q = 2; q <= spec.instrument_power; ++q)
    for (Index k : d.covariates) ex_names.push_back("G" + std::to_string(q) + "_" + xname(k));

  const Index n_exo = static_cast<Index>(exo_names.size());
  const Index n_ex = static_cast<Index>(ex_names.size());
  std::vector<MatrixXd> exo(nets.size()), excl(nets.size());
  std::vector<VectorXd> jgy(nets.size()), jy(nets.size());
  Index total = 0;
  for (std::size_t s = 0; s < nets.size(); ++s) {
    const auto& J = d.projectors[s].J;
    const SparseRowMatrix& G = nets[s].G();
    const Index n = nets[s].n();
    const MatrixXd X = detail::select_cols(data[s].X, d.covariates);
    const MatrixXd GX = G * X;
    MatrixXd E(n, n_exo);
    E.leftCols(Kk) = X;
    E.middleCols(Kk, Kk) = GX;
    Index c = 2 * Kk;
    if (spec.model == Model::M1) E.col(c++) = VectorXd::Ones(n);
    if (spec.model == Model::M3) E.col(c++) = nets[s].noniso_mask();
    if (extra) E.rightCols(n_exo - c) = extra->columns[s];
    exo[s] = J * E;
    MatrixXd P(n, n_ex);
    MatrixXd GqX = GX;
    for (int q = 2; q <= spec.instrument_power; ++q) {
      GqX = G * GqX;
      P.middleCols((q - 2) * Kk, Kk) = GqX;
    }
    excl[s] = J * P;
    jy[s] = J * data[s].y;
    jgy[s] = J * (G * data[s].y);
    total += n;
  }
  d.n_obs = total;

  auto stack = [&](const std::vector<MatrixXd>& parts, Index cols) {
    MatrixXd out(total, cols);
    Index off = 0;
    for (const auto& p : parts) {
      out.middleRows(off, p.rows()) = p;
      off += p.rows();
    }
    return out;
  };

  // Exogenous regressors collinear with earlier ones are dropped with a warning.
  const MatrixXd exo_all = stack(exo, n_exo);
  const std::vector<Index> exo_keep = detail::independent_columns(exo_all, 1e-10);
  {
    std::size_t p = 0;
    for (Index c = 0; c < n_exo; ++c) {
      if (p < exo_keep.size() && exo_keep[p] == c) {
        ++p;
        continue;
      }
      const bool core = c < 2 * Kk;
      if (core)
        throw EstimationError("gmm", "rank-deficient design after projection: column " +
                                         exo_names[static_cast<std::size_t>(c)] +
                                         " is collinear with earlier regressors");
      d.warnings.push_back({"gmm", "column " + exo_names[static_cast<std::size_t>(c)] +
                                       " is collinear after projection; dropped"});
    }
  }
  // Excluded instruments must be independent of each other and the exogenous block.
  {
    MatrixXd zall(total, static_cast<Index>(exo_keep.size()) + n_ex);
    zall << detail::select_cols(exo_all, exo_keep), stack(excl, n_ex);
    const auto zk = detail::independent_columns(zall, 1e-10);
    if (static_cast<Index>(zk.size()) != zall.cols()) {
      std::string bad;
      std::size_t p = 0;
      for (Index c = 0; c < zall.cols(); ++c) {
        if (p < zk.size() && zk[p] == c) {
          ++p;
          continue;
        }
        const Index e = c - static_cast<Index>(exo_keep.size());
        bad += (bad.empty() ? "" : ", ") + ex_names[static_cast<std::size_t>(e)];
      }
      throw EstimationError("gmm", "rank-deficient instrument matrix after projection: " + bad);
    }
  }

  d.r_names.push_back("lambda");
  for (Index c : exo_keep) d.r_names.push_back(exo_names[static_cast<std::size_t>(c)]);
  for (Index c : exo_keep) d.z_names.push_back(exo_names[static_cast<std::size_t>(c)]);
  for (const auto& nm : ex_names) d.z_names.push_back(nm);
  d.n_psi = 1 + 2 * Kk;
  d.n_excluded = n_ex;

  d.blocks.resize(nets.size());
  for (std::size_t s = 0; s < nets.size(); ++s) {
    const MatrixXd ek = detail::select_cols(exo[s], exo_keep);
    auto& b = d.blocks[s];
    b.Jy = jy[s];
    b.R.resize(ek.rows(), 1 + ek.cols());
    b.R << jgy[s], ek;
    b.Z.resize(ek.rows(), ek.cols() + n_ex);
    b.Z << ek, excl[s];
  }
  return d;
}

/// Residuals J y - R theta per school.
inline std::vector<VectorXd> gmm_residuals(const Design& d, const VectorXd& theta) {
  std::vector<VectorXd> v;
  v.reserve(d.blocks.size());
  for (const auto& b : d.blocks) v.push_back(b.Jy - b.R * theta);
  return v;
}

/// GMM estimate for a given instrument weight matrix.
inline VectorXd gmm_solve(const detail::Moments& m, const MatrixXd& W) {
  const MatrixXd A = m.RZ * W * m.RZ.transpose();
  const MatrixXd Ainv = linalg::spd_inverse(A, "gmm", "R'Z W Z'R (regressors not identified)");
  return Ainv * (m.RZ * W * m.Zy);
}

/// School-clustered sandwich B^{-1} D B^{-1} / n for the 2SLS estimator, with
/// D built from the supplied instrument-space "meat" matrix.
inline MatrixXd sandwich_vcov(const Design& d, const MatrixXd& meat) {
  const auto m = detail::accumulate(d);
  const double n = static_cast<double>(d.n_obs);
  const MatrixXd ZZi = linalg::spd_inverse(m.ZZ, "gmm", "Z'Z");
  const MatrixXd H = m.RZ * ZZi;
  const MatrixXd B = H * m.RZ.transpose() / n;
  const MatrixXd D = H * meat * H.transpose() / n;
  const MatrixXd Bi = linalg::spd_inverse(B, "gmm", "B");
  return linalg::symmetrize(Bi * D * Bi / n);
}

/// Heteroskedasticity- and within-school-correlation-robust covariance.
inline MatrixXd white_vcov(const GmmFit& fit) {
  return sandwich_vcov(fit.design, detail::cluster_meat(fit.design, fit.residuals));
}

/// Fits the model on an already built design.
inline GmmFit fit_design(Design design) {
  GmmFit f;
  f.spec = design.spec;
  const auto m = detail::accumulate(design);
  const MatrixXd W = linalg::spd_inverse(m.ZZ, "gmm", "Z'Z");
  f.theta = gmm_solve(m, W);
  f.residuals = gmm_residuals(design, f.theta);
  if (design.spec.weighting == Weighting::TwoStep) {
    const MatrixXd S = detail::cluster_meat(design, f.residuals);
    const MatrixXd W2 = linalg::spd_inverse(S, "gmm", "clustered moment covariance");
    f.theta = gmm_solve(m, W2);
    f.residuals = gmm_residuals(design, f.theta);
  }
  f.warnings = design.warnings;
  f.design = std::move(design);
  if (!(std::abs(f.lambda()) < 1.0)) {
    f.lambda_outside_unit = true;
    f.warnings.push_back({"gmm", "estimated lambda lies outside (-1, 1)"});
  }
  // The clustered sandwich is for the 2SLS weight; under two-step weighting
  // it is reported as the usual robust approximation.
  f.vcov_white = white_vcov(f);
  return f;
}

inline GmmFit fit(const ModelSpec& spec, const std::vector<SchoolNetwork>& nets,
                  const std::vector<SchoolData>& data, const ExtraControls* extra = nullptr,
                  const std::vector<std::string>& covariate_names = {}) {
  return fit_design(build_design(spec, nets, data, extra, covariate_names));
}

/// Group means of y - [Gy, X, GX] psi, following the intercept structure of
/// the fitted model.
inline FixedEffects recover_fixed_effects(const GmmFit& f, const std::vector<SchoolNetwork>& nets,
                                          const std::vector<SchoolData>& data,
                                          const ExtraControls* extra = nullptr) {
  const auto& d = f.design;
  const Index Kk = static_cast<Index>(d.covariates.size());
  const VectorXd beta = f.theta.segment(1, Kk);
  const VectorXd gamma = f.theta.segment(1 + Kk, Kk);
  FixedEffects fe;
  fe.schools.resize(nets.size());
  const Index iconst = f.index_of("intercept");
  const Index idummy = f.index_of("has_friends");
  if (idummy >= 0) fe.has_friends_coef = f.theta(idummy);

  std::vector<VectorXd> u(nets.size());
  for (std::size_t s = 0; s < nets.size(); ++s) {
    const MatrixXd X = detail::select_cols(data[s].X, d.covariates);
    const SparseRowMatrix& G = nets[s].G();
    u[s] = data[s].y - f.lambda() * (G * data[s].y) - X * beta - G * (X * gamma);
    if (!extra) continue;
    for (std::size_t e = 0; e < extra->names.size(); ++e) {
      const Index c = f.index_of(extra->names[e]);
      if (c >= 0) u[s] -= f.theta(c) * extra->columns[s].col(static_cast<Index>(e));
    }
  }

  if (f.spec.model == Model::M1) {
    double tot = 0.0;
    Index n = 0;
    for (const auto& v : u) {
      tot += v.sum();
      n += v.size();
    }
    fe.global = iconst >= 0 ? f.theta(iconst) : tot / static_cast<double>(n);
    for (auto& sc : fe.schools) sc.iso = sc.noniso = fe.global;
    return fe;
  }
  for (std::size_t s = 0; s < nets.size(); ++s) {
    const VectorXd& iso = nets[s].iso_mask();
    const VectorXd& non = nets[s].noniso_mask();
    VectorXd us = u[s];
    if (f.spec.model == Model::M3 && fe.has_friends_coef) us -= *fe.has_friends_coef * non;
    auto& sc = fe.schools[s];
    if (f.spec.model == Model::M4) {
      if (iso.sum() > 0) sc.iso = us.dot(iso) / iso.sum();
      if (non.sum() > 0) sc.noniso = us.dot(non) / non.sum();
    } else {
      const double k = us.mean();
      sc.iso = k;
      sc.noniso = k + (f.spec.model == Model::M3 && fe.has_friends_coef ? *fe.has_friends_coef : 0.0);
    }
  }
  return fe;
}

}  // namespace peerfx
