#include "peerfx/dgp.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace peerfx;

TEST(DegreeLaw, Probabilities) {
  const auto p = degree_probabilities(10, 0.6);
  ASSERT_EQ(p.size(), 11u);
  double sum = 0.0, mean = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    sum += p[k];
    mean += static_cast<double>(k) * p[k];
  }
  EXPECT_NEAR(sum, 1.0, 1e-14);
  EXPECT_NEAR(p[0], 0.21328232644037926, 1e-12);
  EXPECT_NEAR(mean, 3.6002212234292625, 1e-12);
  for (std::size_t k = 1; k < p.size(); ++k) EXPECT_LT(p[k], p[k - 1]);
}

TEST(DegreeLaw, GeneratedHistogramMatches) {
  DgpConfig cfg;
  cfg.n_s = 50;
  std::mt19937_64 rng(31);
  const auto p = degree_probabilities(cfg.max_degree, cfg.degree_exponent);
  std::vector<double> count(p.size(), 0.0);
  double total = 0.0;
  for (int s = 0; s < 400; ++s) {
    const auto net = generate_network(cfg, rng);
    for (const auto& l : net.links()) {
      ASSERT_LE(static_cast<int>(l.size()), cfg.max_degree);
      std::vector<int> u = l;
      std::sort(u.begin(), u.end());
      ASSERT_EQ(std::unique(u.begin(), u.end()), u.end());
      count[l.size()] += 1.0;
      total += 1.0;
    }
    EXPECT_EQ(net.duplicate_links(), 0u);
  }
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double se = std::sqrt(p[k] * (1 - p[k]) / total);
    EXPECT_NEAR(count[k] / total, p[k], 3.5 * se) << k;
  }
}

TEST(DegreeLaw, RejectsSmallSchools) {
  DgpConfig cfg;
  cfg.n_s = 10;
  EXPECT_THROW(generate_network(cfg, std::uint64_t{1}), ConfigError);
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Quantile, NearestRank) {
  VectorXd v(10);
  v << 10, 9, 8, 7, 6, 5, 4, 3, 2, 1;
  EXPECT_EQ(nearest_rank_quantile(v, 0.9), 9.0);
  EXPECT_EQ(nearest_rank_quantile(v, 0.91), 10.0);
  EXPECT_EQ(nearest_rank_quantile(v, 0.0), 1.0);
  VectorXd w(50);
  for (int i = 0; i < 50; ++i) w(i) = 49 - i;
  EXPECT_EQ(nearest_rank_quantile(w, 0.9), 44.0);  // 45th smallest
}

TEST(Variants, AlphaRegimes) {
  DgpConfig cfg;
  cfg.S = 6;
  auto rng = replication_engine(cfg, 0);
  const auto smp = draw_sample(cfg, rng);
  EXPECT_EQ(variant_alpha(smp, DgpVariant::A).cwiseAbs().maxCoeff(), 0.0);
  const VectorXd b = variant_alpha(smp, DgpVariant::B);
  EXPECT_NEAR(b(0), smp.alpha_c.mean(), 1e-12);
  EXPECT_NEAR(b.maxCoeff() - b.minCoeff(), 0.0, 1e-12);
  for (Index s = 0; s < cfg.S; ++s) {
    EXPECT_DOUBLE_EQ(smp.alpha_c(s), 10.0 * nearest_rank_quantile(smp.X[s].col(0), 0.9));
    EXPECT_DOUBLE_EQ(smp.c(s), -1.5 * nearest_rank_quantile(smp.X[s].col(1), 0.9));
  }
  // All variants share the same network, covariate and shock draws.
  const auto da = simulate_variant(cfg, smp, DgpVariant::A);
  const auto dc = simulate_variant(cfg, smp, DgpVariant::C);
  for (Index s = 0; s < cfg.S; ++s) {
    EXPECT_EQ(testutil::max_abs(*da[s].effort - *dc[s].effort), 0.0);
    const VectorXd diff = dc[s].y - da[s].y;
    EXPECT_NEAR(diff.maxCoeff() - diff.minCoeff(), 0.0, 1e-9);
    EXPECT_NEAR(diff(0), smp.alpha_c(s), 1e-9);
  }
  EXPECT_THROW(variant_from_letter('D'), ConfigError);
}

TEST(Covariates, SchoolDistributions) {
  DgpConfig cfg;
  cfg.n_s = 4000;
  std::mt19937_64 rng(32);
  const MatrixXd X = draw_school_covariates(cfg, rng);
  const double m1 = X.col(0).mean(), m2 = X.col(1).mean();
  EXPECT_GT(m1, -0.5);
  EXPECT_LT(m1, 10.5);
  const double v1 = (X.col(0).array() - m1).square().sum() / (cfg.n_s - 1);
  EXPECT_NEAR(v1, 16.0, 1.2);
  const double v2 = (X.col(1).array() - m2).square().sum() / (cfg.n_s - 1);
  EXPECT_NEAR(v2 / std::max(m2, 0.1), 1.0, 0.15);  // Poisson dispersion
  for (Index i = 0; i < cfg.n_s; ++i) ASSERT_EQ(X(i, 1), std::round(X(i, 1)));
}

TEST(Summary, MeanAndSampleSd) {
  std::vector<ReplicationRecord> recs(2);
  for (int r = 0; r < 2; ++r) {
    EstimateRow row;
    row.ok = true;
    row.psi = VectorXd::Constant(5, r == 0 ? 1.0 : 3.0);
    recs[r].rows.push_back(row);
    EstimateRow flat;
    flat.ok = true;
    flat.model = Model::M2;
    flat.psi = VectorXd::Constant(5, 0.25);
    recs[r].rows.push_back(flat);
  }
  const auto rows = summarize(recs);
  const auto* l = find_summary(rows, DgpVariant::A, Model::M4, "lambda");
  ASSERT_NE(l, nullptr);
  EXPECT_DOUBLE_EQ(l->mean, 2.0);
  EXPECT_NEAR(l->sd, std::sqrt(2.0), 1e-14);
  EXPECT_EQ(l->count, 2);
  const auto* f = find_summary(rows, DgpVariant::A, Model::M2, "gamma_tilde_2");
  ASSERT_NE(f, nullptr);
  EXPECT_EQ(f->sd, 0.0);
  EXPECT_EQ(find_summary(rows, DgpVariant::A, Model::M4, "sigma_eta2"), nullptr);
  std::vector<ReplicationRecord> failed(1);
  failed[0].rows.push_back(EstimateRow{});
  EXPECT_THROW(summarize(failed), EstimationError);
}

TEST(MonteCarlo, ReproducibleAcrossThreadCounts) {
  DgpConfig cfg;
  cfg.S = 5;
  cfg.replications = 3;
  cfg.models = {Model::M2, Model::M4};
  cfg.variance_components = false;
  cfg.threads = 1;
  const auto a = summarize(run_monte_carlo(cfg));
  cfg.threads = 3;
  const auto b = summarize(run_monte_carlo(cfg));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].parameter, b[i].parameter);
    EXPECT_EQ(a[i].mean, b[i].mean);
    EXPECT_EQ(a[i].sd, b[i].sd);
  }
  std::ostringstream os;
  write_summary_csv(os, a);
  EXPECT_EQ(os.str().rfind("dgp,model,parameter,mean,sd,count\n", 0), 0u);
}

TEST(MonteCarlo, TableRowsHaveVarianceComponents) {
  DgpConfig cfg;
  cfg.S = 8;
  cfg.variants = {DgpVariant::C};
  cfg.models = {Model::M4};
  cfg.tests = true;
  const auto rec = run_replication(cfg, 0);
  ASSERT_EQ(rec.rows.size(), 1u);
  ASSERT_TRUE(rec.rows[0].ok) << rec.rows[0].error;
  EXPECT_TRUE(rec.rows[0].varcomp.has_value());
  EXPECT_TRUE(rec.rows[0].sargan_p.has_value());
  EXPECT_FALSE(rec.rows[0].hausman_p.has_value());  // Model 3 not requested
}
