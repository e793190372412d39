#pragma once

// Per-school directed friendship networks, the row-normalized interaction
// matrix, group-wise annihilators and graph-based identification checks.

#include "peerfx/common.hpp"
#include "peerfx/linalg.hpp"

#include <algorithm>
#include <deque>
#include <optional>
#include <string>
#include <vector>

namespace peerfx {

/// Row-normalized interaction matrix: g_ij = 1/n_i if i nominates j.
struct InteractionMatrix {
  SparseRowMatrix G;
};

/// Validates a dense 0/1 adjacency matrix with zero diagonal and returns its
/// row-normalized version. Zero-degree rows stay zero.
inline InteractionMatrix row_normalize(const MatrixXd& adjacency) {
  if (adjacency.rows() != adjacency.cols())
    throw InputError("netgraph", "adjacency matrix must be square");
  const Index n = adjacency.rows();
  std::vector<Eigen::Triplet<double>> trip;
  for (Index i = 0; i < n; ++i) {
    if (adjacency(i, i) != 0.0)
      throw InputError("netgraph", "nonzero diagonal at node " + std::to_string(i));
    Index deg = 0;
    for (Index j = 0; j < n; ++j) {
      const double a = adjacency(i, j);
      if (a != 0.0 && a != 1.0)
        throw InputError("netgraph", "non-binary adjacency entry at (" + std::to_string(i) +
                                         ", " + std::to_string(j) + ")");
      if (a == 1.0) ++deg;
    }
    for (Index j = 0; j < n; ++j)
      if (adjacency(i, j) == 1.0) trip.emplace_back(i, j, 1.0 / static_cast<double>(deg));
  }
  InteractionMatrix out;
  out.G.resize(n, n);
  out.G.setFromTriplets(trip.begin(), trip.end());
  out.G.makeCompressed();
  return out;
}

/// One school's directed network. Links are stored as sorted out-neighbour
/// lists; G is sparse. Immutable after construction.
class SchoolNetwork {
 public:
  SchoolNetwork() = default;

  /// `links[i]` lists the nodes i nominates. Self-links and out-of-range
  /// targets are rejected; duplicates are collapsed and counted.
  SchoolNetwork(std::string school_id, Index n, std::vector<std::vector<int>> links)
      : school_id_(std::move(school_id)), n_(n), links_(std::move(links)) {
    if (n_ < 1) throw InputError("netgraph", "school " + school_id_ + " has no nodes");
    links_.resize(static_cast<std::size_t>(n_));
    std::vector<Eigen::Triplet<double>> trip;
    out_degree_ = Eigen::VectorXi::Zero(n_);
    iso_ = VectorXd::Zero(n_);
    noniso_ = VectorXd::Zero(n_);
    for (Index i = 0; i < n_; ++i) {
      auto& row = links_[static_cast<std::size_t>(i)];
      std::sort(row.begin(), row.end());
      const auto before = row.size();
      row.erase(std::unique(row.begin(), row.end()), row.end());
      duplicates_ += before - row.size();
      for (int j : row) {
        if (j < 0 || j >= n_)
          throw InputError("netgraph", "school " + school_id_ + ": link target " +
                                           std::to_string(j) + " out of range");
        if (j == i)
          throw InputError("netgraph", "school " + school_id_ + ": self-link at node " +
                                           std::to_string(i));
      }
      out_degree_(i) = static_cast<int>(row.size());
      for (int j : row) trip.emplace_back(i, j, 1.0 / static_cast<double>(row.size()));
      (row.empty() ? iso_ : noniso_)(i) = 1.0;
    }
    G_.resize(n_, n_);
    G_.setFromTriplets(trip.begin(), trip.end());
    G_.makeCompressed();
  }

  static SchoolNetwork from_adjacency(std::string school_id, const MatrixXd& adjacency) {
    row_normalize(adjacency);  // validation only
    std::vector<std::vector<int>> links(static_cast<std::size_t>(adjacency.rows()));
    for (Index i = 0; i < adjacency.rows(); ++i)
      for (Index j = 0; j < adjacency.cols(); ++j)
        if (adjacency(i, j) == 1.0) links[static_cast<std::size_t>(i)].push_back(static_cast<int>(j));
    return SchoolNetwork(std::move(school_id), adjacency.rows(), std::move(links));
  }

  const std::string& school_id() const { return school_id_; }
  Index n() const { return n_; }
  const std::vector<std::vector<int>>& links() const { return links_; }
  const SparseRowMatrix& G() const { return G_; }
  MatrixXd G_dense() const { return MatrixXd(G_); }
  const Eigen::VectorXi& out_degree() const { return out_degree_; }
  const VectorXd& iso_mask() const { return iso_; }
  const VectorXd& noniso_mask() const { return noniso_; }
  Index n_isolated() const { return static_cast<Index>(iso_.sum()); }
  Index n_nonisolated() const { return n_ - n_isolated(); }
  std::size_t duplicate_links() const { return duplicates_; }
  Index n_links() const { return static_cast<Index>(G_.nonZeros()); }

  Eigen::VectorXi in_degree() const {
    Eigen::VectorXi d = Eigen::VectorXi::Zero(n_);
    for (const auto& row : links_)
      for (int j : row) ++d(j);
    return d;
  }

  MatrixXd adjacency_dense() const {
    MatrixXd a = MatrixXd::Zero(n_, n_);
    for (Index i = 0; i < n_; ++i)
      for (int j : links_[static_cast<std::size_t>(i)]) a(i, j) = 1.0;
    return a;
  }

 private:
  std::string school_id_;
  Index n_ = 0;
  std::vector<std::vector<int>> links_;
  SparseRowMatrix G_;
  Eigen::VectorXi out_degree_;
  VectorXd iso_;
  VectorXd noniso_;
  std::size_t duplicates_ = 0;
};

/// Projection J removing group-wise means, and an orthonormal basis F of its
/// range (F'F = I, FF' = J).
struct Annihilator {
  MatrixXd J;
  MatrixXd F;
  Index groups = 0;  // number of non-empty groups removed
};

/// Annihilator for an arbitrary partition: `group[i]` in [0, k) labels node i.
/// Empty groups contribute nothing.
inline Annihilator group_annihilator(const std::vector<int>& group) {
  const Index n = static_cast<Index>(group.size());
  const int k = group.empty() ? 0 : *std::max_element(group.begin(), group.end()) + 1;
  MatrixXd ind = MatrixXd::Zero(n, k);
  for (Index i = 0; i < n; ++i) ind(i, group[static_cast<std::size_t>(i)]) = 1.0;
  std::vector<Index> keep;
  for (int g = 0; g < k; ++g)
    if (ind.col(g).sum() > 0) keep.push_back(g);
  MatrixXd basis(n, static_cast<Index>(keep.size()));
  for (std::size_t c = 0; c < keep.size(); ++c)
    basis.col(static_cast<Index>(c)) = ind.col(keep[c]) / std::sqrt(ind.col(keep[c]).sum());

  Annihilator a;
  a.groups = basis.cols();
  a.J = MatrixXd::Identity(n, n) - basis * basis.transpose();
  // Full orthogonal factorization of the indicator block: the trailing columns
  // of Q span its orthogonal complement.
  Eigen::HouseholderQR<MatrixXd> qr(basis);
  MatrixXd Q = qr.householderQ() * MatrixXd::Identity(n, n);
  a.F = Q.rightCols(n - a.groups);
  return a;
}

/// Isolated / non-isolated dual-group annihilator of a school.
inline Annihilator build_annihilator(const SchoolNetwork& net) {
  std::vector<int> g(static_cast<std::size_t>(net.n()));
  for (Index i = 0; i < net.n(); ++i) g[static_cast<std::size_t>(i)] = net.iso_mask()(i) > 0 ? 0 : 1;
  return group_annihilator(g);
}

/// Single-group (whole school) centering.
inline Annihilator centering_annihilator(Index n) {
  return group_annihilator(std::vector<int>(static_cast<std::size_t>(n), 0));
}

/// Result of the distance-three search.
struct Distance3Result {
  bool found = false;
  int from = -1;
  int to = -1;
};

/// Shortest directed path lengths from `source` (-1 = unreachable).
inline std::vector<int> bfs_distances(const SchoolNetwork& net, int source) {
  std::vector<int> dist(static_cast<std::size_t>(net.n()), -1);
  std::deque<int> queue{source};
  dist[static_cast<std::size_t>(source)] = 0;
  while (!queue.empty()) {
    const int u = queue.front();
    queue.pop_front();
    for (int v : net.links()[static_cast<std::size_t>(u)]) {
      if (dist[static_cast<std::size_t>(v)] < 0) {
        dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
        queue.push_back(v);
      }
    }
  }
  return dist;
}

/// True iff some node l is at shortest directed distance exactly three from
/// some node i (l is neither a friend nor a friend of a friend of i).
inline Distance3Result check_distance3(const SchoolNetwork& net) {
  for (int i = 0; i < net.n(); ++i) {
    const auto dist = bfs_distances(net, i);
    for (int l = 0; l < net.n(); ++l)
      if (dist[static_cast<std::size_t>(l)] == 3) return {true, i, l};
  }
  return {};
}

/// Linear independence of J, J(G+G')J and JGG'J, stacked over schools.
struct VarianceIdentReport {
  bool identified = false;
  linalg::RankReport rank;
};

inline VarianceIdentReport check_variance_identification(const std::vector<SchoolNetwork>& nets,
                                                         double rel_tol = 1e-8) {
  Index rows = 0;
  for (const auto& net : nets) rows += net.n() * net.n();
  MatrixXd stacked(rows, 3);
  Index off = 0;
  for (const auto& net : nets) {
    const Annihilator a = build_annihilator(net);
    const MatrixXd G = net.G_dense();
    const Index nn = net.n() * net.n();
    stacked.block(off, 0, nn, 1) = linalg::vec(a.J);
    stacked.block(off, 1, nn, 1) = linalg::vec(a.J * (G + G.transpose()) * a.J);
    stacked.block(off, 2, nn, 1) = linalg::vec(a.J * G * G.transpose() * a.J);
    off += nn;
  }
  VarianceIdentReport rep;
  rep.rank = linalg::column_rank(stacked, rel_tol);
  rep.identified = rep.rank.rank == 3;
  return rep;
}

/// Linear independence of I, G, G^2, G^3 for one school.
inline bool check_linmaps_independence(const SchoolNetwork& net, double rel_tol = 1e-8,
                                       linalg::RankReport* report = nullptr) {
  const Index n = net.n();
  const MatrixXd G = net.G_dense();
  const MatrixXd G2 = G * G;
  MatrixXd stacked(n * n, 4);
  stacked.col(0) = linalg::vec(MatrixXd::Identity(n, n));
  stacked.col(1) = linalg::vec(G);
  stacked.col(2) = linalg::vec(G2);
  stacked.col(3) = linalg::vec(G2 * G);
  auto rep = linalg::column_rank(stacked, rel_tol);
  if (report) *report = rep;
  return rep.rank == 4;
}

}  // namespace peerfx
