#include "peerfx/diagnostics.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace peerfx;
using testutil::max_abs;

namespace {

testutil::Sample sample(std::uint64_t seed, Index S = 20) {
  std::mt19937_64 rng(seed);
  return testutil::simulate(testutil::table_params(S), S, 50, rng);
}

}  // namespace

TEST(ChiSquare, UpperTail) {
  EXPECT_NEAR(chi2_upper(3.841458820694124, 1), 0.05, 1e-12);
  EXPECT_EQ(chi2_upper(0.0, 2), 1.0);
  EXPECT_THROW(chi2_upper(1.0, 0), EstimationError);
}

TEST(WeakIv, StrongDesignIsLarge) {
  const auto smp = sample(51);
  EXPECT_GT(weak_iv_f(ModelSpec{}, smp.nets, smp.data), 10.0);
}

TEST(WeakIv, PureNoiseInstrumentsNearNull) {
  std::mt19937_64 rng(52);
  std::normal_distribution<double> z;
  double total = 0.0;
  const int reps = 40;
  for (int r = 0; r < reps; ++r) {
    const auto smp = sample(1000 + r, 20);
    auto d = build_design(ModelSpec{}, smp.nets, smp.data);
    for (std::size_t s = 0; s < d.blocks.size(); ++s) {
      auto& Z = d.blocks[s].Z;
      for (Index c = Z.cols() - d.n_excluded; c < Z.cols(); ++c) {
        VectorXd noise(Z.rows());
        for (Index i = 0; i < noise.size(); ++i) noise(i) = z(rng);
        Z.col(c) = d.projectors[s].J * noise;
      }
    }
    total += weak_iv_f(d);
  }
  EXPECT_GT(total / reps, 0.5);
  EXPECT_LT(total / reps, 2.0);
}

TEST(WeakIv, DuplicateInstrumentErrors) {
  const auto smp = sample(53, 5);
  auto d = build_design(ModelSpec{}, smp.nets, smp.data);
  for (auto& b : d.blocks) {
    MatrixXd Z(b.Z.rows(), b.Z.cols() + 1);
    Z << b.Z, b.Z.col(b.Z.cols() - 1);
    b.Z = Z;
  }
  d.z_names.push_back("dup");
  d.n_excluded += 1;
  EXPECT_THROW(weak_iv_f(d), EstimationError);
}

TEST(Sargan, DegreesOfFreedomAndRange) {
  const auto smp = sample(54);
  const auto f = fit(ModelSpec{}, smp.nets, smp.data);
  const auto s = sargan(f);
  ASSERT_TRUE(s.stat && s.df && s.p);
  EXPECT_EQ(*s.df, 1);  // K - 1 with K = 2
  EXPECT_GE(*s.stat, 0.0);
  EXPECT_GE(*s.p, 0.0);
  EXPECT_LE(*s.p, 1.0);
}

TEST(Sargan, ExactlyIdentifiedIsNull) {
  std::mt19937_64 rng(55);
  auto p = testutil::table_params(10);
  p.beta = p.beta.head(1);
  p.gamma = p.gamma.head(1);
  p.theta = p.theta.head(1);
  const auto smp = testutil::simulate(p, 10, 50, rng);
  const auto f = fit(ModelSpec{}, smp.nets, smp.data);
  EXPECT_FALSE(sargan(f).stat.has_value());
}

TEST(Sargan, InvariantToInstrumentRecombination) {
  const auto smp = sample(56);
  const auto f = fit(ModelSpec{}, smp.nets, smp.data);
  const auto vc = fit_varcomp(f, smp.nets);
  auto d = f.design;
  const Index m = d.n_instruments();
  MatrixXd T = MatrixXd::Identity(m, m);
  const Index q = d.n_excluded;
  T.bottomRightCorner(q, q) << 2.0, -1.0, 0.5, 3.0;
  T(m - 1, 0) = 0.7;  // mix an excluded instrument into an included one
  for (auto& b : d.blocks) b.Z = b.Z * T;
  const auto a = sargan_with_meat(f.design, detail::cluster_meat(f.design, f.residuals));
  const auto b = sargan_with_meat(d, detail::cluster_meat(d, f.residuals));
  EXPECT_NEAR(*a.stat, *b.stat, 1e-8);
  const auto sa = sargan(f, smp.nets, &vc);
  GmmFit g = f;
  g.design = d;
  const auto sb = sargan(g, smp.nets, &vc);
  EXPECT_NEAR(*sa.stat, *sb.stat, 1e-8);
}

TEST(Hausman, IdenticalFitsGiveZero) {
  const auto smp = sample(57);
  const auto f = fit(ModelSpec{}, smp.nets, smp.data);
  const auto vc = fit_varcomp(f, smp.nets);
  for (auto form : {HausmanForm::Joint, HausmanForm::Difference}) {
    HausmanOptions o;
    o.form = form;
    const auto h = hausman(f, f, smp.nets, &vc, o);
    EXPECT_EQ(h.stat, 0.0);
    EXPECT_EQ(h.p, 1.0);
  }
}

TEST(Hausman, JointFormIsPsdAndBounded) {
  const auto smp = sample(58);
  const auto f3 = fit(ModelSpec{Model::M3, 2, Weighting::TwoSLS}, smp.nets, smp.data);
  const auto f4 = fit(ModelSpec{}, smp.nets, smp.data);
  const auto vc = fit_varcomp(f4, smp.nets);
  for (auto src : {CovarianceSource::Qml, CovarianceSource::White})
    for (bool lam : {false, true}) {
      HausmanOptions o;
      o.source = src;
      o.lambda_only = lam;
      const auto h = hausman(f3, f4, smp.nets, &vc, o);
      EXPECT_FALSE(h.indefinite);
      EXPECT_GE(h.stat, 0.0);
      EXPECT_GE(h.p, 0.0);
      EXPECT_LE(h.p, 1.0);
      EXPECT_EQ(h.df, lam ? 1 : 5);
    }
}

TEST(Hausman, RejectsMismatchedData) {
  const auto a = sample(59, 5), b = sample(60, 6);
  const auto fa = fit(ModelSpec{}, a.nets, a.data), fb = fit(ModelSpec{}, b.nets, b.data);
  EXPECT_THROW(hausman(fa, fb), InputError);
}

TEST(Report, FillsRows) {
  const auto smp = sample(61);
  const auto f = fit(ModelSpec{}, smp.nets, smp.data);
  const auto t = test_report(f, smp.nets);
  EXPECT_TRUE(std::isfinite(t.weak_iv_F));
  EXPECT_TRUE(t.sargan_p.has_value());
}
