#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace peerfx;
using testutil::max_abs;

TEST(Netgraph, ChainHasOneUnitEntryPerNonIsolatedRow) {
  const auto net = testutil::chain4();
  MatrixXd expect = MatrixXd::Zero(4, 4);
  expect(0, 2) = 1;
  expect(2, 3) = 1;
  expect(3, 1) = 1;
  EXPECT_EQ(max_abs(net.G_dense() - expect), 0.0);
  EXPECT_EQ(net.n_isolated(), 1);
  EXPECT_EQ(net.iso_mask()(1), 1.0);
}

TEST(Netgraph, EmptyAdjacencyGivesZeroG) {
  const auto net = SchoolNetwork::from_adjacency("e", MatrixXd::Zero(5, 5));
  EXPECT_EQ(max_abs(net.G_dense()), 0.0);
  EXPECT_EQ(net.n_isolated(), 5);
}

TEST(Netgraph, DegreeThreeRowHasThirds) {
  const SchoolNetwork net("d", 5, {{1, 2, 4}, {}, {}, {}, {}});
  const MatrixXd G = net.G_dense();
  for (int j : {1, 2, 4}) EXPECT_DOUBLE_EQ(G(0, j), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(G.row(0).sum(), 1.0);
}

TEST(Netgraph, RejectsBadAdjacency) {
  MatrixXd a = MatrixXd::Zero(3, 3);
  a(1, 1) = 1;
  EXPECT_THROW(SchoolNetwork::from_adjacency("x", a), InputError);
  a(1, 1) = 0;
  a(0, 2) = 0.5;
  EXPECT_THROW(SchoolNetwork::from_adjacency("x", a), InputError);
  EXPECT_THROW(SchoolNetwork("x", 3, {{0}}), InputError);
  EXPECT_THROW(SchoolNetwork("x", 3, {{5}}), InputError);
}

TEST(Netgraph, DuplicateLinksCollapse) {
  const SchoolNetwork net("d", 3, {{1, 1, 2}, {}, {}});
  EXPECT_EQ(net.duplicate_links(), 1u);
  EXPECT_DOUBLE_EQ(net.G_dense()(0, 1), 0.5);
}

TEST(Annihilator, TwoByTwoBlocks) {
  const SchoolNetwork net("a", 4, {{}, {2}, {}, {0}});  // isolated: 0, 2
  const auto a = build_annihilator(net);
  MatrixXd expect = MatrixXd::Zero(4, 4);
  for (int i : {0, 2})
    for (int j : {0, 2}) expect(i, j) = (i == j) - 0.5;
  for (int i : {1, 3})
    for (int j : {1, 3}) expect(i, j) = (i == j) - 0.5;
  EXPECT_LT(max_abs(a.J - expect), 1e-14);
  EXPECT_EQ(a.F.cols(), 2);
}

TEST(Annihilator, SingleGroupCentering) {
  const SchoolNetwork net("a", 3, {{1}, {2}, {0}});
  const auto a = build_annihilator(net);
  const MatrixXd expect = MatrixXd::Identity(3, 3) - MatrixXd::Constant(3, 3, 1.0 / 3.0);
  EXPECT_LT(max_abs(a.J - expect), 1e-14);
  EXPECT_EQ(a.F.cols(), 2);
}

TEST(Annihilator, RandomNetworkProperties) {
  std::mt19937_64 rng(11);
  DgpConfig cfg;
  cfg.n_s = 30;
  for (int rep = 0; rep < 20; ++rep) {
    const auto net = generate_network(cfg, rng);
    const auto a = build_annihilator(net);
    EXPECT_LT(max_abs(a.J * net.iso_mask()), 1e-12);
    EXPECT_LT(max_abs(a.J * net.noniso_mask()), 1e-12);
    EXPECT_LT(max_abs(a.J * VectorXd::Ones(30)), 1e-12);
    EXPECT_LT(max_abs(a.F * a.F.transpose() - a.J), 1e-12);
    EXPECT_LT(max_abs(a.F.transpose() * a.F - MatrixXd::Identity(a.F.cols(), a.F.cols())), 1e-12);
    EXPECT_LT(max_abs(a.J * a.J - a.J), 1e-12);
    // FQ spans the same space.
    const MatrixXd Q = Eigen::HouseholderQR<MatrixXd>(MatrixXd::Random(a.F.cols(), a.F.cols())).householderQ();
    const MatrixXd FQ = a.F * Q;
    EXPECT_LT(max_abs(FQ * FQ.transpose() - a.J), 1e-10);
  }
}

TEST(Annihilator, EmptyGroupContributesNothing) {
  const auto a = group_annihilator({0, 0, 0, 0});
  EXPECT_EQ(a.groups, 1);
  const auto b = group_annihilator({1, 1, 1});  // group 0 empty
  EXPECT_EQ(b.groups, 1);
  EXPECT_EQ(b.F.cols(), 2);
}

TEST(Distance3, ChainWitness) {
  const auto r = check_distance3(testutil::chain4());
  ASSERT_TRUE(r.found);
  EXPECT_EQ(r.from, 0);  // i1
  EXPECT_EQ(r.to, 1);    // i2
}

TEST(Distance3, StarFails) {
  std::vector<std::vector<int>> links(8);
  for (int i = 1; i < 8; ++i) links[static_cast<std::size_t>(i)] = {0};
  EXPECT_FALSE(check_distance3(SchoolNetwork("star", 8, links)).found);
}

TEST(Distance3, FiveCycle) {
  const SchoolNetwork c("c", 5, {{1}, {2}, {3}, {4}, {0}});
  EXPECT_TRUE(check_distance3(c).found);
}

// All-pairs shortest paths by Floyd-Warshall on the adjacency matrix.
static bool distance3_oracle(const SchoolNetwork& net) {
  const Index n = net.n();
  const int inf = 1 << 20;
  std::vector<std::vector<int>> d(static_cast<std::size_t>(n), std::vector<int>(static_cast<std::size_t>(n), inf));
  const MatrixXd A = net.adjacency_dense();
  for (Index i = 0; i < n; ++i) {
    d[i][i] = 0;
    for (Index j = 0; j < n; ++j)
      if (A(i, j) == 1.0) d[i][j] = 1;
  }
  for (Index k = 0; k < n; ++k)
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) d[i][j] = std::min(d[i][j], d[i][k] + d[k][j]);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j)
      if (d[i][j] == 3) return true;
  return false;
}

TEST(Distance3, AgreesWithAllPairsOracle) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    std::mt19937_64 rng(seed);
    const Index n = 2 + static_cast<Index>(seed % 11);
    const auto net = testutil::random_network(n, 0, 3, rng);
    const auto r = check_distance3(net);
    ASSERT_EQ(r.found, distance3_oracle(net)) << "seed " << seed;
    if (r.found) {
      EXPECT_EQ(bfs_distances(net, r.from)[static_cast<std::size_t>(r.to)], 3);
    }
  }
}

TEST(VarianceIdent, ChainPlusPairIdentified) {
  EXPECT_TRUE(check_variance_identification({testutil::chain4_plus_pair()}).identified);
}

TEST(VarianceIdent, AllIsolatedFails) {
  const auto r = check_variance_identification({SchoolNetwork("e", 6, {})});
  EXPECT_FALSE(r.identified);
  EXPECT_LT(r.rank.rank, 3);
}

TEST(VarianceIdent, DisjointDyadsRankDeficient) {
  const SchoolNetwork net("d", 4, {{1}, {0}, {3}, {2}});
  // With every node paired, G is an involution: J(G+G')J = 2JGJ and JGG'J = J.
  const auto r = check_variance_identification({net});
  EXPECT_FALSE(r.identified);
  const MatrixXd J = build_annihilator(net).J;
  const MatrixXd G = net.G_dense();
  EXPECT_LT(max_abs(J * G * G.transpose() * J - J), 1e-12);
}

TEST(Linmaps, ChainIndependent) { EXPECT_TRUE(check_linmaps_independence(testutil::chain4())); }

TEST(Linmaps, EmptyGraphDependent) { EXPECT_FALSE(check_linmaps_independence(SchoolNetwork("e", 4, {}))); }

TEST(Linmaps, CompleteGraphDependent) {
  const Index n = 5;
  std::vector<std::vector<int>> links(n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j)
      if (i != j) links[i].push_back(static_cast<int>(j));
  const SchoolNetwork net("k", n, links);
  linalg::RankReport rep;
  EXPECT_FALSE(check_linmaps_independence(net, 1e-8, &rep));
  EXPECT_EQ(rep.rank, 2);
  // G^2 = a I + b G for the uniform complete graph.
  const MatrixXd G = net.G_dense();
  const double b = (n - 2.0) / (n - 1.0), a = 1.0 / (n - 1.0);
  EXPECT_LT(max_abs(G * G - a * MatrixXd::Identity(n, n) - b * G), 1e-12);
}
