#pragma once

#include "peerfx/common.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>

namespace peerfx::linalg {

/// Singular values with a rank decision at `rel_tol` times the largest one.
struct RankReport {
  Index rank = 0;
  Index columns = 0;
  VectorXd singular_values;
  double rel_tol = 1e-8;

  bool full_rank() const { return rank == columns; }
};

inline RankReport column_rank(const MatrixXd& m, double rel_tol = 1e-8) {
  RankReport rep;
  rep.columns = m.cols();
  rep.rel_tol = rel_tol;
  if (m.size() == 0) return rep;
  Eigen::JacobiSVD<MatrixXd> svd(m);
  rep.singular_values = svd.singularValues();
  const double top = rep.singular_values.size() ? rep.singular_values(0) : 0.0;
  if (top <= 0.0) return rep;
  for (Index i = 0; i < rep.singular_values.size(); ++i)
    if (rep.singular_values(i) > rel_tol * top) ++rep.rank;
  return rep;
}

/// Column-major flattening of a square matrix.
inline VectorXd vec(const MatrixXd& m) {
  return Eigen::Map<const VectorXd>(m.data(), m.size());
}

inline MatrixXd symmetrize(const MatrixXd& m) { return 0.5 * (m + m.transpose()); }

/// Moore-Penrose inverse of a symmetric matrix, discarding eigenvalues below
/// `clip` (absolute). Returns the retained rank through `rank` if given, and
/// the most negative discarded eigenvalue through `min_eig`.
inline MatrixXd sym_pinv(const MatrixXd& m, double clip, Index* rank = nullptr,
                         double* min_eig = nullptr) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(m));
  const VectorXd& ev = es.eigenvalues();
  MatrixXd out = MatrixXd::Zero(m.rows(), m.cols());
  Index r = 0;
  for (Index i = 0; i < ev.size(); ++i) {
    if (ev(i) > clip) {
      out.noalias() += es.eigenvectors().col(i) * es.eigenvectors().col(i).transpose() / ev(i);
      ++r;
    }
  }
  if (rank) *rank = r;
  if (min_eig) *min_eig = ev.size() ? ev.minCoeff() : 0.0;
  return out;
}

/// Inverse of a symmetric positive definite matrix; throws if not PD.
inline MatrixXd spd_inverse(const MatrixXd& m, const char* module, const char* what) {
  Eigen::LDLT<MatrixXd> ldlt(symmetrize(m));
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      ldlt.vectorD().minCoeff() <= 1e-14 * std::max(1.0, ldlt.vectorD().cwiseAbs().maxCoeff()))
    throw EstimationError(module, std::string("singular ") + what);
  return ldlt.solve(MatrixXd::Identity(m.rows(), m.cols()));
}

inline double min_eigenvalue(const MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(m), Eigen::EigenvaluesOnly);
  return es.eigenvalues().size() ? es.eigenvalues().minCoeff() : 0.0;
}

}  // namespace peerfx::linalg
