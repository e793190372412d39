// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include "../contamination.hpp"
#include "../test_util.hpp"
#include "peerfx/counterfactual.hpp"
#include "peerfx/diagnostics.hpp"
#include "peerfx/io.hpp"
#include "peerfx/varcomp.hpp"

#include <boost/math/tools/minima.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

using namespace peerfx;
using testutil::max_abs;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;
std::set<int> selected;  // empty: all criteria

void report(int id, const std::string& title, Outcome& o, double secs) {
  if (!o.pass) ++failures;
  std::printf("%s criterion %2d %-34s%s (%.0fs)\n", o.pass ? "PASS" : "FAIL", id, title.c_str(),
              o.detail.str().c_str(), secs);
  std::fflush(stdout);
}

template <class F>
void run(int id, const std::string& title, F&& body) {
  if (!selected.empty() && !selected.count(id)) return;
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << " [exception: " << e.what() << "]";
  }
  report(id, title, o, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
}

bool within(double v, double target, double tol) { return std::abs(v - target) <= tol; }

std::string num(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

// Edge-list fixture with labels like i1, i2, ... ordered by their number.
SchoolNetwork load_fixture(const std::string& name) {
  const auto t = io::read_csv_file(std::string(PEERFX_DATA_DIR) + "/" + name, "edges");
  const Index a = t.column("src"), b = t.column("dst");
  std::vector<std::string> labels;
  for (const auto& r : t.rows) {
    labels.push_back(r[static_cast<std::size_t>(a)]);
    labels.push_back(r[static_cast<std::size_t>(b)]);
  }
  auto key = [](const std::string& s) { return std::stoi(s.substr(1)); };
  std::sort(labels.begin(), labels.end(), [&](const auto& x, const auto& y) { return key(x) < key(y); });
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  // Fill gaps so that unlisted isolated labels still count as nodes.
  const int n = key(labels.back());
  std::vector<std::vector<int>> links(static_cast<std::size_t>(n));
  for (const auto& r : t.rows)
    links[static_cast<std::size_t>(key(r[static_cast<std::size_t>(a)]) - 1)].push_back(key(r[static_cast<std::size_t>(b)]) - 1);
  return SchoolNetwork(name, n, std::move(links));
}

bool distance3_bruteforce(const SchoolNetwork& net) {
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

double cox_de_boor(Index i, int p, double x, const std::vector<double>& t) {
  if (p == 0) {
    const double a = t[i], b = t[i + 1];
    if (a < b && a <= x && x < b) return 1.0;
    if (a < b && x == b && b == t.back()) {
      for (std::size_t k = i + 1; k + 1 < t.size(); ++k)
        if (t[k] < t[k + 1]) return 0.0;
      return 1.0;
    }
    return 0.0;
  }
  double v = 0.0;
  const double d1 = t[i + p] - t[i], d2 = t[i + p + 1] - t[i + 1];
  if (d1 > 0) v += (x - t[i]) / d1 * cox_de_boor(i, p - 1, x, t);
  if (d2 > 0) v += (t[i + p + 1] - x) / d2 * cox_de_boor(i + 1, p - 1, x, t);
  return v;
}

double ks_uniform(std::vector<double> p) {
  std::sort(p.begin(), p.end());
  const double n = static_cast<double>(p.size());
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    d = std::max({d, (i + 1) / n - p[i], p[i] - i / n});
  return d;
}

VectorXd true_psi(const StructuralParams& p) {
  VectorXd v(5);
  v << p.lambda, p.beta_tilde(), p.gamma_tilde();
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  // Optional arguments restrict the run to the listed criterion numbers.
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  std::cout << "peerfx acceptance run\n";
  auto wanted = [](int id) { return selected.empty() || selected.count(id) > 0; };

  // 1-3 share one desk-scale Monte Carlo run.
  std::vector<SummaryRow> table;
  if (wanted(1) || wanted(2) || wanted(3)) {
    const auto t0 = std::chrono::steady_clock::now();
    DgpConfig cfg;
    cfg.threads = 0;
    table = summarize(run_monte_carlo(cfg));
    std::printf("     Monte Carlo: %d replications in %.0fs\n", cfg.replications,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  auto mean = [&](DgpVariant v, Model m, const std::string& par) {
    const auto* r = find_summary(table, v, m, par);
    if (!r) throw EstimationError("acceptance", "missing summary row");
    return r->mean;
  };

  run(1, "Monte Carlo lambda and gamma", [&](Outcome& o) {
    const struct {
      DgpVariant v;
      Model m;
      double target;
    } cells[] = {{DgpVariant::A, Model::M1, 0.727}, {DgpVariant::A, Model::M2, 0.700},
                 {DgpVariant::A, Model::M4, 0.701}, {DgpVariant::B, Model::M2, 0.483},
                 {DgpVariant::B, Model::M3, 0.700}, {DgpVariant::C, Model::M2, 0.422},
                 {DgpVariant::C, Model::M3, 0.536}, {DgpVariant::C, Model::M4, 0.701}};
    for (const auto& c : cells) {
      const double v = mean(c.v, c.m, "lambda");
      o.detail << ' ' << variant_letter(c.v) << model_number(c.m) << '=' << num(v);
      o.require(within(v, c.target, 0.015), std::string(1, variant_letter(c.v)) + std::to_string(model_number(c.m)));
    }
    const double g = mean(DgpVariant::C, Model::M2, "gamma_tilde_2");
    o.detail << " gC2=" << num(g);
    o.require(within(g, -6.719, 0.15), "gamma_tilde_2 C2");
  });

  run(2, "variance components DGP C Model 4", [&](Outcome& o) {
    const double se = mean(DgpVariant::C, Model::M4, "sigma_eps2");
    const double sh = mean(DgpVariant::C, Model::M4, "sigma_eta2");
    const double r = mean(DgpVariant::C, Model::M4, "rho");
    o.detail << " sigma_eps2=" << num(se) << " sigma_eta2=" << num(sh) << " rho=" << num(r, 3);
    o.require(se >= 8.1 && se <= 10.1, "sigma_eps2");
    o.require(sh >= 14.3 && sh <= 16.3, "sigma_eta2");
    o.require(r >= 0.35 && r <= 0.56, "rho");
  });

  run(3, "bias ordering on DGP C", [&](Outcome& o) {
    const double l2 = mean(DgpVariant::C, Model::M2, "lambda"), l3 = mean(DgpVariant::C, Model::M3, "lambda"),
                 l4 = mean(DgpVariant::C, Model::M4, "lambda");
    o.detail << ' ' << num(l2) << " < " << num(l3) << " < " << num(l4);
    o.require(l2 < l3 && l3 < l4, "strict ordering");
  });

  run(4, "alpha-shock neutrality", [&](Outcome& o) {
    std::mt19937_64 rng(401);
    DgpConfig cfg;
    double dy = 0.0, de = 0.0;
    for (int s = 0; s < 20; ++s) {
      const auto net = generate_network(cfg, rng, std::to_string(s));
      const MatrixXd X = testutil::random_covariates(cfg.n_s, 2, rng);
      const ShockDraws sh = draw_shocks(cfg.n_s, 15.0, 8.0, 0.4, rng);
      auto p = testutil::table_params(1);
      const auto base = simulate_school(net, X, p, 0, sh);
      p.alpha(0) += 1.0;
      const auto bumped = simulate_school(net, X, p, 0, sh);
      dy = std::max(dy, max_abs(bumped.y - base.y - VectorXd::Ones(cfg.n_s)));
      de = std::max(de, max_abs(*bumped.effort - *base.effort));
      const auto r = apply_shock({ShockKind::Alpha, 1.0, {}}, 0.7, {net});
      dy = std::max(dy, max_abs(r.delta_y[0] - VectorXd::Ones(cfg.n_s)));
    }
    o.detail << " max|dy-1|=" << num(dy, 2) << " max|de|=" << num(de, 2);
    o.require(dy <= 1e-10 && de <= 1e-10, "deviation");
  });

  run(5, "multiplier endpoints", [&](Outcome& o) {
    std::mt19937_64 rng(501);
    DgpConfig cfg;
    std::vector<SchoolNetwork> nets;
    for (int s = 0; s < 20; ++s) nets.push_back(generate_network(cfg, rng, std::to_string(s)));
    const auto r = apply_shock({ShockKind::Preference, 1.0, {}}, 0.7, nets);
    double iso = 0.0;
    for (std::size_t s = 0; s < nets.size(); ++s)
      for (Index i = 0; i < nets[s].n(); ++i)
        if (nets[s].iso_mask()(i) > 0) iso = std::max(iso, std::abs(r.multiplier[s](i) - 1.0));
    double reg = 0.0;
    for (int k : {1, 2, 5}) {
      const auto c = apply_shock({ShockKind::Preference, 1.0, {}}, 0.7, {testutil::circulant(30, k)});
      reg = std::max(reg, max_abs(c.multiplier[0] - VectorXd::Constant(30, 1.0 / 0.3)));
    }
    o.detail << " isolated dev=" << num(iso, 2) << " regular dev=" << num(reg, 2);
    o.require(iso <= 1e-8 && reg <= 1e-8, "endpoint");
  });

  run(6, "noiseless recovery", [&](Outcome& o) {
    std::mt19937_64 rng(601);
    const auto p = testutil::table_params(10);
    const auto smp = testutil::simulate(p, 10, 50, rng, 0.0);
    const auto f = fit(ModelSpec{Model::M4, 2, Weighting::TwoSLS}, smp.nets, smp.data);
    const double dp = max_abs(f.psi() - true_psi(p));
    const auto fe = recover_fixed_effects(f, smp.nets, smp.data);
    const auto kap = reduced_form_intercepts(p);
    double dk = 0.0;
    for (std::size_t s = 0; s < smp.nets.size(); ++s) {
      // delta^2 c + alpha and delta^2 c + (1 - lambda) alpha
      const double ki = p.delta * p.delta * p.c(s) + p.alpha(s);
      const double kn = p.delta * p.delta * p.c(s) + (1.0 - p.lambda) * p.alpha(s);
      o.require(std::abs(kap[s].kappa_iso - ki) < 1e-12 && std::abs(kap[s].kappa_noniso - kn) < 1e-12, "intercept map");
      if (!fe.schools[s].iso || !fe.schools[s].noniso) continue;
      dk = std::max({dk, std::abs(*fe.schools[s].iso - ki), std::abs(*fe.schools[s].noniso - kn)});
    }
    o.detail << " max|psi|=" << num(dp, 2) << " max|kappa|=" << num(dk, 2);
    o.require(dp <= 1e-8 && dk <= 1e-8, "recovery");
  });

  run(7, "Model 2 equals Model 4", [&](Outcome& o) {
    std::mt19937_64 rng(701);
    const auto p = testutil::table_params(5);
    double worst = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
      const auto smp = testutil::simulate(p, 5, 40, rng, 1.0, false);
      const auto f2 = fit(ModelSpec{Model::M2, 2, Weighting::TwoSLS}, smp.nets, smp.data);
      const auto f4 = fit(ModelSpec{Model::M4, 2, Weighting::TwoSLS}, smp.nets, smp.data);
      worst = std::max(worst, max_abs(f2.psi() - f4.psi()));
    }
    o.detail << " max diff over 50=" << num(worst, 2);
    o.require(worst <= 1e-10, "equivalence");
  });

  run(8, "identification checkers", [&](Outcome& o) {
    const auto chain = load_fixture("chain4_edges.csv");
    const auto chain_pair = load_fixture("chain4_pair_edges.csv");
    o.require(check_distance3(chain).found, "four-node chain distance-3");
    o.require(check_variance_identification({chain_pair}).identified, "chain plus pair variance identification");
    std::vector<std::vector<int>> star(8);
    for (int i = 1; i < 8; ++i) star[static_cast<std::size_t>(i)] = {0};
    o.require(!check_distance3(SchoolNetwork("star", 8, star)).found, "star");
    int agree = 0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      std::mt19937_64 rng(seed);
      const Index n = 2 + static_cast<Index>(seed % 11);
      const auto net = testutil::random_network(n, 0, 3, rng);
      agree += check_distance3(net).found == distance3_bruteforce(net);
    }
    o.detail << " oracle agreement " << agree << "/200";
    o.require(agree == 200, "oracle");
  });

  run(9, "QML internals", [&](Outcome& o) {
    std::mt19937_64 rng(901);
    const auto smp = testutil::simulate(testutil::table_params(10), 10, 50, rng);
    const auto f = fit(ModelSpec{Model::M4, 2, Weighting::TwoSLS}, smp.nets, smp.data);
    const QmlObjective q(f.lambda(), f.residuals, smp.nets, f.design.projectors);
    auto proj = f.design.projectors;
    std::normal_distribution<double> z;
    for (auto& pr : proj) {
      MatrixXd M(pr.F.cols(), pr.F.cols());
      for (Index i = 0; i < M.size(); ++i) M.data()[i] = z(rng);
      pr.F = pr.F * MatrixXd(Eigen::HouseholderQR<MatrixXd>(M).householderQ());
    }
    const QmlObjective qr(f.lambda(), f.residuals, smp.nets, proj);
    double rot = 0.0, conc = 0.0;
    for (double tau : {0.05, 0.5, 1.3, 6.0})
      for (double rho : {-0.8, 0.0, 0.4, 1.0}) {
        rot = std::max(rot, std::abs(q(tau, rho) - qr(tau, rho)));
        const double s0 = q.sigma_eps2_tilde(tau, rho);
        const auto best = boost::math::tools::brent_find_minima(
            [&](double ls) { return -q.full(std::exp(ls), tau, rho); }, std::log(s0) - 3, std::log(s0) + 3, 60);
        conc = std::max(conc, std::abs(-best.second - (q(tau, rho) - 0.5 * static_cast<double>(q.dof()))));
      }
    auto res = f.residuals;
    for (auto& r : res) r *= 2.9;
    const auto va = maximize_qml(q), vb = maximize_qml(QmlObjective(f.lambda(), res, smp.nets, f.design.projectors));
    const double k2 = 2.9 * 2.9;
    const double scale = std::max({std::abs(vb.sigma_eps2 / k2 - va.sigma_eps2) / va.sigma_eps2,
                                   std::abs(vb.sigma_eta2 / k2 - va.sigma_eta2) / va.sigma_eta2,
                                   std::abs(vb.tau - va.tau), std::abs(vb.rho - va.rho)});
    o.detail << " rotation=" << num(rot, 2) << " concentration=" << num(conc, 2) << " scale=" << num(scale, 2);
    o.require(rot <= 1e-8, "rotation");
    o.require(conc <= 1e-8, "concentration");
    o.require(scale <= 1e-6, "scale");
  });

  run(10, "Sargan and Hausman calibration", [&](Outcome& o) {
    DgpConfig cfg;
    const ModelSpec m3{Model::M3, 2, Weighting::TwoSLS}, m4{Model::M4, 2, Weighting::TwoSLS};
    std::vector<double> sp;
    int size_rej = 0, size_n = 0, pow_rej = 0, pow_n = 0;
    for (int rep = 0; rep < 500; ++rep) {
      auto rng = replication_engine(cfg, rep);
      const auto smp = draw_sample(cfg, rng);
      for (DgpVariant v : {DgpVariant::A, DgpVariant::C}) {
        if (v == DgpVariant::C && rep >= 200) continue;
        const auto data = simulate_variant(cfg, smp, v);
        const auto f4 = fit(m4, smp.nets, data);
        const auto vc = fit_varcomp(f4, smp.nets);
        if (v == DgpVariant::A) {
          const auto sg = sargan(f4, smp.nets, &vc);
          if (sg.p) sp.push_back(*sg.p);
        }
        if (rep >= 200) continue;
        const auto f3 = fit(m3, smp.nets, data);
        const bool rej = hausman(f3, f4, smp.nets, &vc).p < 0.05;
        (v == DgpVariant::A ? size_rej : pow_rej) += rej;
        ++(v == DgpVariant::A ? size_n : pow_n);
      }
    }
    const double ks = ks_uniform(sp);
    const double size = static_cast<double>(size_rej) / size_n, power = static_cast<double>(pow_rej) / pow_n;
    o.detail << " Sargan KS=" << num(ks, 3) << " (" << sp.size() << ") Hausman size=" << num(size, 3)
             << " power=" << num(power, 3);
    o.require(sp.size() == 500 && ks < 0.1, "Sargan KS");
    o.require(size >= 0.02 && size <= 0.09, "Hausman size");
    o.require(power > 0.8, "Hausman power");
  });

  run(11, "endogenous network stage", [&](Outcome& o) {
    const auto dspec = testutil::contamination_dyads();
    const auto smp = testutil::contaminated_sample({}, 1101);
    const auto dy = build_dyad_covariates(smp.data, dspec);
    const auto fs = fit_dyadic_logit(smp.nets, dy);
    const auto sc = dyadic_logit_score(smp.nets, dy, fs);
    o.detail << " score=" << num(std::max(sc.max_node, sc.max_beta), 2);
    o.require(fs.converged && sc.max_node <= 1e-6 && sc.max_beta <= 1e-6, "score");

    const auto cb = build_control_bases(fs);
    double spline = 0.0;
    const auto t = clamped_knots(cb.out_lo, cb.out_hi, cb.knots_out);
    for (const auto& h : fs.schools)
      for (Index i = 0; i < h.mu_out.size(); ++i) {
        const double x = std::clamp(h.mu_out(i), cb.out_lo, cb.out_hi);
        const VectorXd b = bspline_basis(x, t);
        for (Index k = 0; k < b.size(); ++k) spline = std::max(spline, std::abs(b(k) - cox_de_boor(k, 3, x, t)));
      }
    o.detail << " spline=" << num(spline, 2) << " columns=" << cb.columns();
    o.require(spline <= 1e-12, "Cox-de Boor");
    o.require(cb.columns() == 26, "26 columns");

    double bu = 0.0, bc = 0.0;
    int ok = 0;
    EndogenousOptions eo;
    eo.dyads = dspec;
    for (int r = 0; r < 100; ++r) {
      const auto cs = testutil::contaminated_sample({}, 1000 + static_cast<std::uint64_t>(r));
      const double lu = fit(ModelSpec{}, cs.nets, cs.data).lambda();
      const double lc = fit_endogenous(eo, cs.nets, cs.data).second_stage.fit.lambda();
      bu += std::abs(lu - 0.5);
      bc += std::abs(lc - 0.5);
      ++ok;
    }
    o.detail << " MAB uncorrected=" << num(bu / ok, 3) << " corrected=" << num(bc / ok, 3);
    o.require(bc < bu, "contamination bias");
  });

  std::cout << (failures ? "acceptance: " + std::to_string(failures) + " criterion(s) failed\n"
                         : std::string("acceptance: all criteria passed\n"));
  return failures ? 1 : 0;
}
