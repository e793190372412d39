#pragma once

// School-level shocks propagated through the equilibrium: GPA shocks (alpha)
// shift outcomes one for one, preference shocks (c, in delta^2 units) pass
// through the social multiplier (I - lambda G)^{-1} 1.

#include "peerfx/common.hpp"
#include "peerfx/netgraph.hpp"

#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace peerfx {

enum class ShockKind { Alpha, Preference, FixedEffect };

inline std::string shock_label(ShockKind k) {
  switch (k) {
    case ShockKind::Alpha: return "alpha";
    case ShockKind::Preference: return "preference";
    case ShockKind::FixedEffect: return "fixed_effect (confounded)";
  }
  return "";
}

inline ShockKind shock_kind_from_string(const std::string& s) {
  if (s == "alpha") return ShockKind::Alpha;
  if (s == "pref" || s == "preference") return ShockKind::Preference;
  if (s == "fe" || s == "fixed_effect") return ShockKind::FixedEffect;
  throw ConfigError("counterfactual", "unknown shock kind '" + s + "' (alpha, pref or fe)");
}

struct ShockScenario {
  ShockKind kind = ShockKind::Preference;
  double magnitude = 1.0;            // delta^2 * dc for preference shocks
  std::vector<Index> target_schools;  // empty: every school
};

struct ShockSummary {
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
};

struct ShockResult {
  ShockKind kind = ShockKind::Preference;
  double magnitude = 0.0;
  std::vector<VectorXd> delta_y;     // per school; zero outside the targets
  std::vector<VectorXd> multiplier;  // delta_y / magnitude
  std::vector<bool> targeted;
  ShockSummary summary;              // over targeted students
};

/// Solves (I - lambda G) x = b with a sparse LU factorization.
inline VectorXd resolvent_solve(const SchoolNetwork& net, double lambda, const VectorXd& b) {
  const Index n = net.n();
  Eigen::SparseMatrix<double> A(n, n);
  A.setIdentity();
  A -= lambda * Eigen::SparseMatrix<double>(net.G());
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.compute(A);
  if (lu.info() != Eigen::Success) throw EstimationError("counterfactual", "I - lambda G is singular");
  return lu.solve(b);
}

inline ShockResult apply_shock(const ShockScenario& sc, double lambda, const std::vector<SchoolNetwork>& nets) {
  if (!(std::abs(lambda) < 1.0))
    throw ConfigError("counterfactual", "|lambda| < 1 is required to propagate shocks");
  if (!std::isfinite(sc.magnitude)) throw ConfigError("counterfactual", "shock magnitude must be finite");
  ShockResult r;
  r.kind = sc.kind;
  r.magnitude = sc.magnitude;
  r.targeted.assign(nets.size(), sc.target_schools.empty());
  for (Index s : sc.target_schools) {
    if (s < 0 || s >= static_cast<Index>(nets.size()))
      throw InputError("counterfactual", "target school index out of range");
    r.targeted[static_cast<std::size_t>(s)] = true;
  }
  double lo = INFINITY, hi = -INFINITY, tot = 0.0;
  Index cnt = 0;
  for (std::size_t s = 0; s < nets.size(); ++s) {
    const Index n = nets[s].n();
    VectorXd dy = VectorXd::Zero(n);
    if (r.targeted[s]) {
      const VectorXd ones = VectorXd::Ones(n);
      // Alpha: the reduced form carries (I - lambda G) alpha 1, which the
      // resolvent maps back to alpha 1.
      const VectorXd rhs = sc.kind == ShockKind::Alpha
                               ? VectorXd(sc.magnitude * (ones - lambda * (nets[s].G() * ones)))
                               : VectorXd(sc.magnitude * ones);
      dy = resolvent_solve(nets[s], lambda, rhs);
      lo = std::min(lo, dy.minCoeff());
      hi = std::max(hi, dy.maxCoeff());
      tot += dy.sum();
      cnt += n;
    }
    r.multiplier.push_back(sc.magnitude != 0.0 ? VectorXd(dy / sc.magnitude) : VectorXd::Zero(n));
    r.delta_y.push_back(std::move(dy));
  }
  if (cnt > 0) r.summary = {lo, hi, tot / static_cast<double>(cnt)};
  return r;
}

struct HistogramBin {
  double lower;
  double upper;
  Index count;
};

/// Bins the per-student delta_y of the targeted schools; bin k covers
/// [k w, (k + 1) w).
inline std::vector<HistogramBin> multiplier_distribution(const ShockResult& r, double width = 0.1) {
  if (!(width > 0.0)) throw ConfigError("counterfactual", "bin width must be positive");
  std::vector<double> vals;
  for (std::size_t s = 0; s < r.delta_y.size(); ++s)
    if (r.targeted[s]) vals.insert(vals.end(), r.delta_y[s].data(), r.delta_y[s].data() + r.delta_y[s].size());
  std::vector<HistogramBin> bins;
  if (vals.empty()) return bins;
  // The small offset keeps values that sit on a bin edge up to rounding
  // (e.g. exactly 1.0 or 2.0) in the bin that starts there.
  auto bin_of = [&](double v) { return static_cast<long long>(std::floor(v / width + 1e-9)); };
  const auto [mn, mx] = std::minmax_element(vals.begin(), vals.end());
  const long long b0 = bin_of(*mn), b1 = bin_of(*mx);
  for (long long b = b0; b <= b1; ++b)
    bins.push_back({static_cast<double>(b) * width, static_cast<double>(b + 1) * width, 0});
  for (double v : vals) ++bins[static_cast<std::size_t>(bin_of(v) - b0)].count;
  return bins;
}

}  // namespace peerfx
