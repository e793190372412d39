#pragma once

// Monte Carlo data-generating processes A, B and C and the replication
// harness: random friendship networks with a truncated power degree law,
// school-specific covariate distributions, and the three GPA-shock regimes.

#include "peerfx/common.hpp"
#include "peerfx/diagnostics.hpp"
#include "peerfx/gmm.hpp"
#include "peerfx/netgraph.hpp"
#include "peerfx/parallel.hpp"
#include "peerfx/structsim.hpp"
#include "peerfx/varcomp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace peerfx {

enum class DgpVariant { A, B, C };

inline char variant_letter(DgpVariant v) { return "ABC"[static_cast<int>(v)]; }

inline DgpVariant variant_from_letter(char c) {
  switch (c) {
    case 'A': case 'a': return DgpVariant::A;
    case 'B': case 'b': return DgpVariant::B;
    case 'C': case 'c': return DgpVariant::C;
  }
  throw ConfigError("dgp", std::string("unknown DGP variant '") + c + "'");
}

struct DgpConfig {
  Index S = 20;
  Index n_s = 50;
  int max_degree = 10;
  double degree_exponent = 0.6;
  double x1_variance = 16.0;
  double school_mean_low = 0.0;
  double school_mean_high = 10.0;
  double quantile = 0.9;
  double alpha_scale = 10.0;  // variant C: alpha_s = alpha_scale * q(x1_s)
  double c_scale = -1.5;      // c_s = c_scale * q(x2_s)

  double lambda = 0.7;
  VectorXd beta = (VectorXd(2) << 1.0, 1.5).finished();
  VectorXd gamma = (VectorXd(2) << 5.0, -3.0).finished();
  double delta = 1.0;
  VectorXd theta = VectorXd::Zero(2);
  double sigma_eta2 = 15.0;
  double sigma_eps2 = 8.0;
  double rho = 0.4;

  std::vector<DgpVariant> variants{DgpVariant::A, DgpVariant::B, DgpVariant::C};
  std::vector<Model> models{Model::M1, Model::M2, Model::M3, Model::M4};
  int instrument_power = 2;
  bool variance_components = true;  // QML for Models 3 and 4
  bool tests = false;               // Sargan per fit, Hausman M3 vs M4
  int replications = 200;
  std::uint64_t master_seed = 20240607;
  unsigned threads = 0;

  void validate() const {
    if (n_s <= max_degree)
      throw ConfigError("dgp", "school size must exceed the maximum degree");
    if (S < 1) throw ConfigError("dgp", "need at least one school");
    if (beta.size() != 2 || gamma.size() != 2 || theta.size() != 2)
      throw ConfigError("dgp", "the simulation design has exactly two covariates");
    if (replications < 1) throw ConfigError("dgp", "replications must be positive");
  }
};

/// P(k) proportional to (1 + k)^(-exponent) on {0, ..., max_degree}.
inline std::vector<double> degree_probabilities(int max_degree, double exponent) {
  std::vector<double> p(static_cast<std::size_t>(max_degree + 1));
  for (int k = 0; k <= max_degree; ++k) p[static_cast<std::size_t>(k)] = std::pow(1.0 + k, -exponent);
  const double z = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& v : p) v /= z;
  return p;
}

/// Nearest-rank percentile: the ceil(q n)-th smallest value.
inline double nearest_rank_quantile(const VectorXd& v, double q) {
  std::vector<double> s(v.data(), v.data() + v.size());
  std::sort(s.begin(), s.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(s.size())));
  return s[std::clamp<std::size_t>(rank, 1, s.size()) - 1];
}

/// Each node draws its out-degree from the degree law and nominates that many
/// distinct schoolmates uniformly at random.
template <class URBG>
SchoolNetwork generate_network(const DgpConfig& cfg, URBG& rng, std::string school_id = "1") {
  if (cfg.n_s <= cfg.max_degree) throw ConfigError("dgp", "school size must exceed the maximum degree");
  const auto probs = degree_probabilities(cfg.max_degree, cfg.degree_exponent);
  std::discrete_distribution<int> degree(probs.begin(), probs.end());
  std::vector<std::vector<int>> links(static_cast<std::size_t>(cfg.n_s));
  std::vector<int> others;
  others.reserve(static_cast<std::size_t>(cfg.n_s - 1));
  for (int i = 0; i < cfg.n_s; ++i) {
    const int k = degree(rng);
    others.clear();
    for (int j = 0; j < cfg.n_s; ++j)
      if (j != i) others.push_back(j);
    std::sample(others.begin(), others.end(), std::back_inserter(links[static_cast<std::size_t>(i)]), k, rng);
  }
  return SchoolNetwork(std::move(school_id), cfg.n_s, std::move(links));
}

inline SchoolNetwork generate_network(const DgpConfig& cfg, std::uint64_t school_seed) {
  std::mt19937_64 rng(school_seed);
  return generate_network(cfg, rng);
}

/// x1 ~ N(E1, x1_variance), x2 ~ Poisson(E2) with E1, E2 ~ U[low, high] per school.
template <class URBG>
MatrixXd draw_school_covariates(const DgpConfig& cfg, URBG& rng) {
  std::uniform_real_distribution<double> u(cfg.school_mean_low, cfg.school_mean_high);
  const double e1 = u(rng);
  const double e2 = u(rng);
  std::normal_distribution<double> x1(e1, std::sqrt(cfg.x1_variance));
  std::poisson_distribution<int> x2(e2);
  MatrixXd X(cfg.n_s, 2);
  for (Index i = 0; i < cfg.n_s; ++i) X(i, 0) = x1(rng);
  for (Index i = 0; i < cfg.n_s; ++i) X(i, 1) = static_cast<double>(x2(rng));
  return X;
}

/// Draws shared by all variants of one replication: networks, covariates,
/// shocks and the school shifters.
struct SimulatedSample {
  std::vector<SchoolNetwork> nets;
  std::vector<MatrixXd> X;
  std::vector<ShockDraws> shocks;
  VectorXd c;
  VectorXd alpha_c;  // variant C alphas; B uses their mean, A zero
};

template <class URBG>
SimulatedSample draw_sample(const DgpConfig& cfg, URBG& rng) {
  SimulatedSample smp;
  smp.c.resize(cfg.S);
  smp.alpha_c.resize(cfg.S);
  for (Index s = 0; s < cfg.S; ++s) {
    smp.nets.push_back(generate_network(cfg, rng, std::to_string(s + 1)));
    smp.X.push_back(draw_school_covariates(cfg, rng));
    smp.shocks.push_back(draw_shocks(cfg.n_s, cfg.sigma_eta2, cfg.sigma_eps2, cfg.rho, rng));
    smp.c(s) = cfg.c_scale * nearest_rank_quantile(smp.X.back().col(1), cfg.quantile);
    smp.alpha_c(s) = cfg.alpha_scale * nearest_rank_quantile(smp.X.back().col(0), cfg.quantile);
  }
  return smp;
}

inline VectorXd variant_alpha(const SimulatedSample& smp, DgpVariant v) {
  switch (v) {
    case DgpVariant::A: return VectorXd::Zero(smp.alpha_c.size());
    case DgpVariant::B: return VectorXd::Constant(smp.alpha_c.size(), smp.alpha_c.mean());
    case DgpVariant::C: return smp.alpha_c;
  }
  return {};
}

inline StructuralParams variant_params(const DgpConfig& cfg, const SimulatedSample& smp, DgpVariant v) {
  StructuralParams p;
  p.lambda = cfg.lambda;
  p.beta = cfg.beta;
  p.gamma = cfg.gamma;
  p.delta = cfg.delta;
  p.theta = cfg.theta;
  p.alpha = variant_alpha(smp, v);
  p.c = smp.c;
  p.sigma_eta2 = cfg.sigma_eta2;
  p.sigma_eps2 = cfg.sigma_eps2;
  p.rho = cfg.rho;
  return p;
}

inline std::vector<SchoolData> simulate_variant(const DgpConfig& cfg, const SimulatedSample& smp,
                                                DgpVariant v) {
  const StructuralParams p = variant_params(cfg, smp, v);
  p.validate();
  std::vector<SchoolData> data;
  data.reserve(smp.nets.size());
  for (std::size_t s = 0; s < smp.nets.size(); ++s)
    data.push_back(simulate_school(smp.nets[s], smp.X[s], p, static_cast<Index>(s), smp.shocks[s]));
  return data;
}

/// Engine for replication `rep`: seeded with master_seed + rep.
inline std::mt19937_64 replication_engine(const DgpConfig& cfg, int rep) {
  return std::mt19937_64(cfg.master_seed + static_cast<std::uint64_t>(rep));
}

/// One fitted model within one replication.
struct EstimateRow {
  DgpVariant variant = DgpVariant::A;
  Model model = Model::M4;
  bool ok = false;
  std::string error;
  VectorXd psi;  // lambda, beta~, gamma~
  std::optional<VarComp> varcomp;
  std::optional<double> sargan_p;
  std::optional<double> hausman_stat;  // Model 3 vs Model 4, on the Model 4 row
  std::optional<double> hausman_p;
  std::optional<double> has_friends_coef;
  std::optional<double> alpha_bar;  // true mean alpha of the variant
};

struct ReplicationRecord {
  int rep = 0;
  std::vector<EstimateRow> rows;
};

inline std::vector<std::string> psi_labels(Index K = 2) {
  std::vector<std::string> out{"lambda"};
  for (Index k = 0; k < K; ++k) out.push_back("beta_tilde_" + std::to_string(k + 1));
  for (Index k = 0; k < K; ++k) out.push_back("gamma_tilde_" + std::to_string(k + 1));
  return out;
}

inline ReplicationRecord run_replication(const DgpConfig& cfg, int rep) {
  cfg.validate();
  auto rng = replication_engine(cfg, rep);
  const SimulatedSample smp = draw_sample(cfg, rng);
  ReplicationRecord rec;
  rec.rep = rep;
  for (DgpVariant v : cfg.variants) {
    const auto data = simulate_variant(cfg, smp, v);
    std::map<Model, GmmFit> fits;
    for (Model m : cfg.models) {
      EstimateRow row;
      row.variant = v;
      row.model = m;
      row.alpha_bar = variant_alpha(smp, v).mean();
      try {
        ModelSpec spec{m, cfg.instrument_power, Weighting::TwoSLS};
        GmmFit f = fit(spec, smp.nets, data);
        if (f.design.n_psi != 5) throw EstimationError("gmm", "covariate dropped");
        row.psi = f.psi();
        if (m == Model::M3) {
          const Index k = f.index_of("has_friends");
          if (k >= 0) row.has_friends_coef = f.theta(k);
        }
        if (cfg.variance_components && (m == Model::M3 || m == Model::M4)) {
          row.varcomp = fit_varcomp(f, smp.nets);
          f.vcov_qml = qml_vcov(f, *row.varcomp, smp.nets);
        }
        if (cfg.tests) {
          const auto sg = sargan(f, smp.nets, row.varcomp ? &*row.varcomp : nullptr);
          if (sg.p) row.sargan_p = *sg.p;
        }
        row.ok = true;
        fits.emplace(m, std::move(f));
      } catch (const Error& e) {
        row.error = e.module() + ": " + e.what();
      }
      rec.rows.push_back(std::move(row));
    }
    if (cfg.tests && fits.count(Model::M3) && fits.count(Model::M4)) {
      const VarComp* vc4 = nullptr;
      for (const auto& row : rec.rows)
        if (row.variant == v && row.model == Model::M4 && row.varcomp) vc4 = &*row.varcomp;
      const auto h = hausman(fits.at(Model::M3), fits.at(Model::M4), smp.nets, vc4);
      for (auto& row : rec.rows)
        if (row.variant == v && row.model == Model::M4) {
          row.hausman_stat = h.stat;
          row.hausman_p = h.p;
        }
    }
  }
  return rec;
}

inline std::vector<ReplicationRecord> run_monte_carlo(const DgpConfig& cfg) {
  cfg.validate();
  std::vector<ReplicationRecord> out(static_cast<std::size_t>(cfg.replications));
  parallel_for(out.size(), cfg.threads, [&](std::size_t r) {
    out[r] = run_replication(cfg, static_cast<int>(r));
  });
  return out;
}

struct SummaryRow {
  DgpVariant variant;
  Model model;
  std::string parameter;
  double mean;
  double sd;
  int count;
};

/// Mean and sample standard deviation (n - 1) of every estimate, by variant,
/// model and parameter, over the successful replications.
inline std::vector<SummaryRow> summarize(const std::vector<ReplicationRecord>& recs) {
  struct Acc {
    std::vector<double> v;
  };
  std::map<std::tuple<int, int, int>, Acc> acc;  // (variant, model, param index)
  const auto labels = psi_labels();
  std::vector<std::string> names = labels;
  names.insert(names.end(), {"sigma_eps2", "sigma_eta2", "rho"});
  int ok = 0;
  for (const auto& rec : recs)
    for (const auto& row : rec.rows) {
      if (!row.ok) continue;
      ++ok;
      const int vi = static_cast<int>(row.variant), mi = model_number(row.model);
      for (Index k = 0; k < row.psi.size() && k < static_cast<Index>(labels.size()); ++k)
        acc[{vi, mi, static_cast<int>(k)}].v.push_back(row.psi(k));
      if (row.varcomp) {
        const int b = static_cast<int>(labels.size());
        acc[{vi, mi, b}].v.push_back(row.varcomp->sigma_eps2);
        acc[{vi, mi, b + 1}].v.push_back(row.varcomp->sigma_eta2);
        acc[{vi, mi, b + 2}].v.push_back(row.varcomp->rho);
      }
    }
  if (ok == 0) throw EstimationError("dgp", "all replications failed");
  std::vector<SummaryRow> out;
  for (const auto& [key, a] : acc) {
    const auto& v = a.v;
    const double n = static_cast<double>(v.size());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : std::nan("");
    out.push_back({static_cast<DgpVariant>(std::get<0>(key)), static_cast<Model>(std::get<1>(key)),
                   names[static_cast<std::size_t>(std::get<2>(key))], mean, sd, static_cast<int>(v.size())});
  }
  return out;
}

inline const SummaryRow* find_summary(const std::vector<SummaryRow>& rows, DgpVariant v, Model m,
                                      const std::string& param) {
  for (const auto& r : rows)
    if (r.variant == v && r.model == m && r.parameter == param) return &r;
  return nullptr;
}

inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << "dgp,model,parameter,mean,sd,count\n";
  os.precision(10);
  for (const auto& r : rows)
    os << variant_letter(r.variant) << ',' << model_number(r.model) << ',' << r.parameter << ','
       << r.mean << ',' << r.sd << ',' << r.count << '\n';
}

inline void write_raw_csv(std::ostream& os, const std::vector<ReplicationRecord>& recs) {
  os << "rep,dgp,model,ok,lambda,beta_tilde_1,beta_tilde_2,gamma_tilde_1,gamma_tilde_2,"
        "sigma_eps2,sigma_eta2,rho,sargan_p,hausman_p,error\n";
  os.precision(12);
  auto opt = [&](const std::optional<double>& x) {
    if (x) os << *x;
  };
  for (const auto& rec : recs)
    for (const auto& row : rec.rows) {
      os << rec.rep << ',' << variant_letter(row.variant) << ',' << model_number(row.model) << ','
         << (row.ok ? 1 : 0);
      for (Index k = 0; k < 5; ++k) {
        os << ',';
        if (row.ok && k < row.psi.size()) os << row.psi(k);
      }
      os << ',';
      if (row.varcomp) os << row.varcomp->sigma_eps2;
      os << ',';
      if (row.varcomp) os << row.varcomp->sigma_eta2;
      os << ',';
      if (row.varcomp) os << row.varcomp->rho;
      os << ',';
      opt(row.sargan_p);
      os << ',';
      opt(row.hausman_p);
      os << ',' << '"' << row.error << '"' << '\n';
    }
}

}  // namespace peerfx
