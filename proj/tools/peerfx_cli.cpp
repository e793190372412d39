// peerfx: simulate, estimate, Monte Carlo, counterfactual shocks and
// identification checks from the command line.

#include "peerfx/counterfactual.hpp"
#include "peerfx/dgp.hpp"
#include "peerfx/diagnostics.hpp"
#include "peerfx/gmm.hpp"
#include "peerfx/io.hpp"
#include "peerfx/netform.hpp"
#include "peerfx/netgraph.hpp"
#include "peerfx/varcomp.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace peerfx;

namespace {

constexpr const char* kVersion = "1.0.0";

struct Globals {
  std::uint64_t seed = 20240607;
  unsigned threads = 1;
  std::string out;
  std::string config;
};

std::string out_dir(const Globals& g) {
  if (!g.out.empty()) return g.out;
  if (const char* env = std::getenv("PEERFX_OUT")) return env;
  return "peerfx_out";
}

std::ofstream open_out(const fs::path& p) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw InputError("cli", "cannot write '" + p.string() + "'");
  return os;
}

void write_json(const fs::path& p, const json& j) { open_out(p) << j.dump(2) << '\n'; }

json warnings_json(const Warnings& w) {
  json a = json::array();
  for (const auto& x : w) a.push_back({{"module", x.module}, {"message", x.message}});
  return a;
}

json vec_json(const VectorXd& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

void write_metadata(const Globals& g, const std::string& command, const std::vector<std::string>& argv,
                    const json& extra, const Warnings& warnings) {
  json m;
  m["command"] = command;
  m["argv"] = argv;
  m["seed"] = g.seed;
  m["threads"] = g.threads;
  m["config"] = g.config;
  m["config_values"] = g.config.empty() ? json::object() : json(io::Config::parse_file(g.config).values());
  m["version"] = kVersion;
  m["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
               std::to_string(EIGEN_MINOR_VERSION);
  m["thresholds"] = {{"rank_rel_tol", 1e-10},
                     {"hausman_clip", 1e-10},
                     {"logit_grad_tol", 1e-6},
                     {"qml_tau_range", {1e-3, 50.0}}};
  m["settings"] = extra;
  m["warnings"] = warnings_json(warnings);
  write_json(fs::path(out_dir(g)) / "run_metadata.json", m);
}

io::IngestOptions ingest_options(const std::string& outcome, const std::vector<std::string>& cats,
                                 const std::vector<std::string>& drop) {
  io::IngestOptions o;
  o.outcome = outcome;
  o.drop_columns = drop;
  for (const auto& c : cats) {
    const auto colon = c.find(':');
    if (colon == std::string::npos) throw ConfigError("cli", "--categorical expects column:omitted, got '" + c + "'");
    o.categorical.push_back({c.substr(0, colon), c.substr(colon + 1)});
  }
  return o;
}

/// Nodes taken from the edges file when no nodes file is given.
io::Dataset load_graph_only(const std::string& edges) {
  const auto et = io::read_csv_file(edges, "edges");
  io::CsvTable nodes;
  nodes.header = {"school_id", "node_id"};
  std::set<std::pair<std::string, std::string>> seen;
  const Index es = et.column("school_id"), e0 = et.column("src"), e1 = et.column("dst");
  if (es < 0 || e0 < 0 || e1 < 0) throw InputError("io", "edges file needs school_id, src and dst columns");
  for (std::size_t r = 0; r < et.rows.size(); ++r)
    for (Index c : {e0, e1}) {
      const auto key = std::pair{et.rows[r][static_cast<std::size_t>(es)], et.rows[r][static_cast<std::size_t>(c)]};
      if (seen.insert(key).second) {
        nodes.rows.push_back({key.first, key.second});
        nodes.line_numbers.push_back(et.line_numbers[r]);
      }
    }
  // Natural order of node labels keeps fixtures readable (i1, i2, ...).
  std::stable_sort(nodes.rows.begin(), nodes.rows.end(), [](const auto& a, const auto& b) {
    if (a[0] != b[0]) return a[0] < b[0];
    if (a[1].size() != b[1].size()) return a[1].size() < b[1].size();
    return a[1] < b[1];
  });
  return io::ingest(nodes, et, {});
}

DgpConfig dgp_from_config(const io::Config& c, const Globals& g) {
  DgpConfig d;
  d.S = c.get_int("dgp.schools", d.S);
  d.n_s = c.get_int("dgp.school_size", d.n_s);
  d.max_degree = static_cast<int>(c.get_int("dgp.max_degree", d.max_degree));
  d.degree_exponent = c.get_double("dgp.degree_exponent", d.degree_exponent);
  d.lambda = c.get_double("dgp.lambda", d.lambda);
  auto vec2 = [&](const std::string& k, const VectorXd& def) {
    const auto v = c.get_list(k, {def(0), def(1)});
    if (v.size() != 2) throw ConfigError("cli", k + " needs two values");
    return VectorXd((VectorXd(2) << v[0], v[1]).finished());
  };
  d.beta = vec2("dgp.beta", d.beta);
  d.gamma = vec2("dgp.gamma", d.gamma);
  d.theta = vec2("dgp.theta", d.theta);
  d.delta = c.get_double("dgp.delta", d.delta);
  d.sigma_eta2 = c.get_double("dgp.sigma_eta2", d.sigma_eta2);
  d.sigma_eps2 = c.get_double("dgp.sigma_eps2", d.sigma_eps2);
  d.rho = c.get_double("dgp.rho", d.rho);
  d.replications = static_cast<int>(c.get_int("mc.replications", d.replications));
  d.instrument_power = static_cast<int>(c.get_int("model.instrument_power", d.instrument_power));
  d.master_seed = g.seed;
  d.threads = g.threads;
  return d;
}

const std::set<std::string> kConfigKeys = {
    "dgp.schools",  "dgp.school_size", "dgp.max_degree", "dgp.degree_exponent", "dgp.lambda",
    "dgp.beta",     "dgp.gamma",       "dgp.theta",      "dgp.delta",           "dgp.sigma_eta2",
    "dgp.sigma_eps2", "dgp.rho",       "dgp.variant",    "mc.replications",     "mc.variants",
    "mc.models",    "mc.tests",        "model.model",    "model.instrument_power", "model.weighting",
    "shock.bin_width"};

io::Config load_config(const Globals& g) {
  if (g.config.empty()) return {};
  auto c = io::Config::parse_file(g.config);
  const auto unknown = c.unknown_keys(kConfigKeys);
  if (!unknown.empty()) {
    std::string msg = "unknown config keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError("cli", msg);
  }
  return c;
}

// ---------------------------------------------------------------------------

json coef_table(const GmmFit& f) {
  json rows = json::array();
  for (Index k = 0; k < f.theta.size(); ++k) {
    json r;
    r["name"] = f.names()[static_cast<std::size_t>(k)];
    r["estimate"] = f.theta(k);
    r["se_white"] = std::sqrt(std::max(0.0, f.vcov_white(k, k)));
    if (f.vcov_qml) r["se_qml"] = std::sqrt(std::max(0.0, (*f.vcov_qml)(k, k)));
    rows.push_back(r);
  }
  return rows;
}

json fixed_effects_json(const FixedEffects& fe, const std::vector<SchoolNetwork>& nets) {
  json j;
  if (fe.global) j["global"] = *fe.global;
  if (fe.has_friends_coef) j["has_friends"] = *fe.has_friends_coef;
  json s = json::array();
  for (std::size_t i = 0; i < fe.schools.size(); ++i) {
    json r{{"school_id", nets[i].school_id()}};
    r["kappa_isolated"] = fe.schools[i].iso ? json(*fe.schools[i].iso) : json(nullptr);
    r["kappa_nonisolated"] = fe.schools[i].noniso ? json(*fe.schools[i].noniso) : json(nullptr);
    s.push_back(r);
  }
  j["schools"] = s;
  return j;
}

int cmd_simulate(const Globals& g, const std::string& variant, const std::vector<std::string>& argv) {
  const auto cfgf = load_config(g);
  DgpConfig cfg = dgp_from_config(cfgf, g);
  cfg.validate();
  const DgpVariant v = variant_from_letter(cfgf.get("dgp.variant", variant).at(0));
  auto rng = std::mt19937_64(g.seed);
  const SimulatedSample smp = draw_sample(cfg, rng);
  auto data = simulate_variant(cfg, smp, v);
  const auto ds = io::make_dataset(smp.nets, data, {"x1", "x2"});
  const fs::path out = out_dir(g);
  {
    auto os = open_out(out / "nodes.csv");
    io::write_nodes_csv(os, ds);
  }
  {
    auto os = open_out(out / "edges.csv");
    io::write_edges_csv(os, ds);
  }
  const auto p = variant_params(cfg, smp, v);
  json truth;
  truth["dgp"] = std::string(1, variant_letter(v));
  truth["lambda"] = p.lambda;
  truth["beta_tilde"] = vec_json(p.beta_tilde());
  truth["gamma_tilde"] = vec_json(p.gamma_tilde());
  truth["sigma_eps2"] = p.sigma_eps2;
  truth["sigma_eta2"] = p.sigma_eta2;
  truth["rho"] = p.rho;
  json ints = json::array();
  const auto ri = reduced_form_intercepts(p);
  for (std::size_t s = 0; s < ri.size(); ++s)
    ints.push_back({{"school_id", smp.nets[s].school_id()}, {"alpha", p.alpha(static_cast<Index>(s))},
                    {"c", p.c(static_cast<Index>(s))}, {"kappa_isolated", ri[s].kappa_iso},
                    {"kappa_nonisolated", ri[s].kappa_noniso}});
  truth["schools"] = ints;
  write_json(out / "truth.json", truth);
  write_metadata(g, "simulate", argv, {{"dgp", truth["dgp"]}, {"schools", cfg.S}, {"school_size", cfg.n_s}}, {});
  return 0;
}

struct EstimateArgs {
  std::string nodes, edges, outcome = "gpa";
  std::vector<std::string> categorical, drop;
  int model = 4;
  int power = 2;
  bool two_step = false;
  bool varcomp = true;
  bool endogenous = false;
  int bootstrap = 0;
  bool hausman = false;
  bool lambda_only = false;
};

int cmd_estimate(const Globals& g, const EstimateArgs& a, const std::vector<std::string>& argv) {
  const auto cfgf = load_config(g);
  const auto ds = io::ingest_files(a.nodes, a.edges, ingest_options(a.outcome, a.categorical, a.drop));
  if (!ds.has_outcome) throw InputError("io", "nodes file has no '" + a.outcome + "' column");
  ModelSpec spec;
  spec.model = model_from_number(static_cast<int>(cfgf.get_int("model.model", a.model)));
  spec.instrument_power = static_cast<int>(cfgf.get_int("model.instrument_power", a.power));
  const std::string wt = cfgf.get("model.weighting", a.two_step ? "two_step" : "2sls");
  if (wt != "2sls" && wt != "two_step") throw ConfigError("cli", "model.weighting must be 2sls or two_step");
  spec.weighting = wt == "two_step" ? Weighting::TwoStep : Weighting::TwoSLS;

  Warnings warnings = ds.warnings;
  json out;
  out["model"] = model_number(spec.model);
  out["instrument_power"] = spec.instrument_power;
  out["schools"] = ds.nets.size();
  Index n = 0, iso = 0;
  for (const auto& net : ds.nets) {
    n += net.n();
    iso += net.n_isolated();
  }
  out["students"] = n;
  out["isolated_share"] = n ? static_cast<double>(iso) / static_cast<double>(n) : 0.0;

  GmmFit f;
  std::optional<EndogenousFit> ef;
  const ExtraControls* extra = nullptr;
  ExtraControls extra_store;
  if (a.endogenous) {
    EndogenousOptions eo;
    eo.spec = spec;
    ef = fit_endogenous(eo, ds.nets, ds.data, ds.covariate_names);
    f = ef->second_stage.fit;
    extra_store = {ef->bases.bases, ef->bases.names};
    extra = &extra_store;
    warnings.insert(warnings.end(), ef->first_stage.warnings.begin(), ef->first_stage.warnings.end());
    warnings.insert(warnings.end(), ef->bases.warnings.begin(), ef->bases.warnings.end());
  } else {
    f = fit(spec, ds.nets, ds.data, nullptr, ds.covariate_names);
  }
  warnings.insert(warnings.end(), f.warnings.begin(), f.warnings.end());

  std::optional<VarComp> vc;
  if (a.varcomp) {
    try {
      vc = fit_varcomp(f, ds.nets);
      f.vcov_qml = qml_vcov(f, *vc, ds.nets);
      out["variance_components"] = {{"sigma_eps2", vc->sigma_eps2}, {"sigma_eta2", vc->sigma_eta2},
                                    {"rho", vc->rho},               {"tau", vc->tau},
                                    {"loglik", vc->llh},            {"converged", vc->converged},
                                    {"rho_at_boundary", vc->rho_at_boundary},
                                    {"lambda_near_zero", vc->lambda_near_zero}};
      if (vc->lambda_near_zero)
        warnings.push_back({"varcomp", "lambda-hat is near zero: sigma_eta2 and sigma_eps2 are weakly separated"});
    } catch (const Error& e) {
      warnings.push_back({e.module(), std::string("variance components unavailable: ") + e.what()});
    }
  }
  out["coefficients"] = coef_table(f);
  out["lambda_outside_unit_interval"] = f.lambda_outside_unit;
  out["fixed_effects"] = fixed_effects_json(recover_fixed_effects(f, ds.nets, ds.data, extra), ds.nets);

  json diag;
  try {
    diag["Weak instrument F"] = weak_iv_f(f.design);
  } catch (const Error& e) {
    warnings.push_back({e.module(), e.what()});
  }
  const auto sg = sargan(f, ds.nets, vc ? &*vc : nullptr);

  diag["Sargan test stat."] = sg.stat ? json(*sg.stat) : json(nullptr);
  diag["Sargan test df"] = sg.df ? json(*sg.df) : json(nullptr);
  diag["Sargan test prob."] = sg.p ? json(*sg.p) : json(nullptr);
  if (a.hausman && spec.model == Model::M4 && !a.endogenous) {
    ModelSpec rs = spec;
    rs.model = Model::M3;
    GmmFit r = fit(rs, ds.nets, ds.data, nullptr, ds.covariate_names);
    HausmanOptions ho;
    ho.lambda_only = a.lambda_only;
    const auto h = hausman(r, f, ds.nets, vc ? &*vc : nullptr, ho);
    diag["Hausman stat."] = h.stat;
    diag["Hausman df"] = h.df;
    diag["Hausman prob."] = h.p;
    diag["Hausman indefinite"] = h.indefinite;
  }
  out["diagnostics"] = diag;

  const fs::path od = out_dir(g);
  if (ef) {
    out["control_function"] = {{"bases", ef->bases.columns()},
                               {"bases_test_stat", ef->second_stage.bases_test.stat},
                               {"bases_test_df", ef->second_stage.bases_test.df},
                               {"bases_test_prob", ef->second_stage.bases_test.p},
                               {"first_stage_converged", ef->first_stage.converged},
                               {"first_stage_loglik", ef->first_stage.loglik},
                               {"dyad_coefficients", vec_json(ef->first_stage.beta_dyad)},
                               {"dyad_names", ef->first_stage.names}};
    auto os = open_out(od / "first_stage.csv");
    os << "school_id,node_id,mu_out,mu_in,out_retained,in_retained\n";
    for (std::size_t s = 0; s < ds.nets.size(); ++s) {
      const auto& h = ef->first_stage.schools[s];
      for (Index i = 0; i < h.mu_out.size(); ++i)
        os << ds.nets[s].school_id() << ',' << ds.node_ids[s][static_cast<std::size_t>(i)] << ','
           << io::format_double(h.mu_out(i)) << ',' << io::format_double(h.mu_in(i)) << ','
           << (h.out_retained[static_cast<std::size_t>(i)] ? 1 : 0) << ','
           << (h.in_retained[static_cast<std::size_t>(i)] ? 1 : 0) << '\n';
    }
    if (a.bootstrap > 0) {
      EndogenousOptions eo;
      eo.spec = spec;
      const auto br = bootstrap_vcov(eo, ds.nets, ds.data, a.bootstrap, g.seed, g.threads);
      json bj = json::array();
      const auto names = f.names();
      for (Index k = 0; k < br.vcov.rows(); ++k)
        bj.push_back({{"name", names[static_cast<std::size_t>(k)]},
                      {"se_bootstrap", std::sqrt(br.vcov(k, k))},
                      {"ci_lower", br.lower(k)},
                      {"ci_upper", br.upper(k)}});
      out["bootstrap"] = {{"replicates", br.requested}, {"succeeded", br.succeeded}, {"psi", bj}};
      warnings.insert(warnings.end(), br.warnings.begin(), br.warnings.end());
    }
  } else if (a.bootstrap > 0) {
    throw ConfigError("cli", "--bootstrap requires --endogenous");
  }
  out["warnings"] = warnings_json(warnings);
  write_json(od / "estimate.json", out);
  write_metadata(g, "estimate", argv,
                 {{"nodes", a.nodes}, {"edges", a.edges}, {"model", model_number(spec.model)},
                  {"instrument_power", spec.instrument_power}, {"endogenous", a.endogenous},
                  {"bootstrap", a.bootstrap}},
                 warnings);
  return 0;
}

// Comparison of the summary with the Monte Carlo table bands, for whichever cells
// the run produced.
json table_checks(const std::vector<SummaryRow>& summary) {
  struct Cell {
    DgpVariant v;
    Model m;
    const char* par;
    double lo, hi;
  };
  const Cell cells[] = {
      {DgpVariant::A, Model::M1, "lambda", 0.712, 0.742},       {DgpVariant::A, Model::M2, "lambda", 0.685, 0.715},
      {DgpVariant::A, Model::M4, "lambda", 0.686, 0.716},       {DgpVariant::B, Model::M2, "lambda", 0.468, 0.498},
      {DgpVariant::B, Model::M3, "lambda", 0.685, 0.715},       {DgpVariant::C, Model::M2, "lambda", 0.407, 0.437},
      {DgpVariant::C, Model::M3, "lambda", 0.521, 0.551},       {DgpVariant::C, Model::M4, "lambda", 0.686, 0.716},
      {DgpVariant::C, Model::M2, "gamma_tilde_2", -6.869, -6.569}, {DgpVariant::C, Model::M4, "sigma_eps2", 8.1, 10.1},
      {DgpVariant::C, Model::M4, "sigma_eta2", 14.3, 16.3},     {DgpVariant::C, Model::M4, "rho", 0.35, 0.56}};
  json rows = json::array();
  for (const auto& c : cells) {
    const auto* r = find_summary(summary, c.v, c.m, c.par);
    if (!r) continue;
    rows.push_back({{"dgp", std::string(1, variant_letter(c.v))}, {"model", model_number(c.m)},
                    {"parameter", c.par}, {"mean", r->mean}, {"count", r->count}, {"lower", c.lo},
                    {"upper", c.hi}, {"pass", r->mean >= c.lo && r->mean <= c.hi}});
  }
  json out{{"cells", rows}};
  const auto* l2 = find_summary(summary, DgpVariant::C, Model::M2, "lambda");
  const auto* l3 = find_summary(summary, DgpVariant::C, Model::M3, "lambda");
  const auto* l4 = find_summary(summary, DgpVariant::C, Model::M4, "lambda");
  if (l2 && l3 && l4) out["dgp_c_lambda_ordering"] = l2->mean < l3->mean && l3->mean < l4->mean;
  return out;
}

int cmd_mc(const Globals& g, int reps, const std::string& variants, const std::string& models, bool tests,
           const std::vector<std::string>& argv) {
  const auto cfgf = load_config(g);
  DgpConfig cfg = dgp_from_config(cfgf, g);
  if (reps > 0) cfg.replications = reps;
  cfg.variants.clear();
  for (char c : cfgf.get("mc.variants", variants)) cfg.variants.push_back(variant_from_letter(c));
  cfg.models.clear();
  for (char c : cfgf.get("mc.models", models)) cfg.models.push_back(model_from_number(c - '0'));
  cfg.tests = cfgf.get("mc.tests", tests ? "true" : "false") == "true";
  const auto t0 = std::chrono::steady_clock::now();
  const auto recs = run_monte_carlo(cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const fs::path od = out_dir(g);
  const auto summary = summarize(recs);
  {
    auto os = open_out(od / "mc_summary.csv");
    write_summary_csv(os, summary);
  }
  {
    auto os = open_out(od / "mc_raw.csv");
    write_raw_csv(os, recs);
  }
  {
    auto os = open_out(od / "mc_checks.json");
    os << table_checks(summary).dump(2) << '\n';
  }
  Warnings w;
  int failed = 0;
  for (const auto& r : recs)
    for (const auto& row : r.rows)
      if (!row.ok) {
        ++failed;
        w.push_back({"dgp", "rep " + std::to_string(r.rep) + " DGP " + variant_letter(row.variant) + " model " +
                                std::to_string(model_number(row.model)) + ": " + row.error});
      }
  write_metadata(g, "mc", argv,
                 {{"replications", cfg.replications}, {"variants", cfgf.get("mc.variants", variants)},
                  {"models", cfgf.get("mc.models", models)}, {"tests", cfg.tests}, {"failed_fits", failed},
                  {"seconds", secs}, {"seed_rule", "mt19937_64(seed + replication)"}},
                 w);
  return 0;
}

int cmd_shock(const Globals& g, const std::string& kind, double magnitude, std::optional<double> lambda,
              const std::string& nodes, const std::string& edges, int model, double width,
              const std::vector<std::string>& argv) {
  const auto cfgf = load_config(g);
  width = cfgf.get_double("shock.bin_width", width);
  io::Dataset ds;
  double lam = 0.0;
  if (lambda) {
    ds = nodes.empty() ? load_graph_only(edges) : io::ingest_files(nodes, edges);
    lam = *lambda;
  } else {
    if (nodes.empty()) throw ConfigError("cli", "shock needs --lambda or a nodes file with outcomes to estimate it");
    ds = io::ingest_files(nodes, edges);
    ModelSpec spec;
    spec.model = model_from_number(model);
    lam = fit(spec, ds.nets, ds.data, nullptr, ds.covariate_names).lambda();
  }
  ShockScenario sc;
  sc.kind = shock_kind_from_string(kind);
  sc.magnitude = magnitude;
  const auto r = apply_shock(sc, lam, ds.nets);
  const fs::path od = out_dir(g);
  {
    auto os = open_out(od / "shock_students.csv");
    os << "school_id,node_id,isolated,delta_y,multiplier\n";
    for (std::size_t s = 0; s < ds.nets.size(); ++s)
      for (Index i = 0; i < ds.nets[s].n(); ++i)
        os << ds.nets[s].school_id() << ',' << ds.node_ids[s][static_cast<std::size_t>(i)] << ','
           << static_cast<int>(ds.nets[s].iso_mask()(i)) << ',' << io::format_double(r.delta_y[s](i)) << ','
           << io::format_double(r.multiplier[s](i)) << '\n';
  }
  {
    auto os = open_out(od / "shock_histogram.csv");
    os << "lower,upper,count\n";
    for (const auto& b : multiplier_distribution(r, width))
      os << io::format_double(b.lower) << ',' << io::format_double(b.upper) << ',' << b.count << '\n';
  }
  write_metadata(g, "shock", argv,
                 {{"kind", shock_label(sc.kind)}, {"magnitude", magnitude}, {"lambda", lam},
                  {"summary", {{"min", r.summary.min}, {"max", r.summary.max}, {"mean", r.summary.mean}}},
                  {"bin_width", width}},
                 {});
  return 0;
}

int cmd_check_ident(const Globals& g, const std::string& nodes, const std::string& edges,
                    const std::string& expect, const std::vector<std::string>& argv) {
  const auto ds = nodes.empty() ? load_graph_only(edges) : io::ingest_files(nodes, edges);
  json schools = json::array();
  bool any_d3 = false;
  for (std::size_t s = 0; s < ds.nets.size(); ++s) {
    const auto d3 = check_distance3(ds.nets[s]);
    linalg::RankReport rr;
    const bool lin = check_linmaps_independence(ds.nets[s], 1e-8, &rr);
    json j{{"school_id", ds.nets[s].school_id()}, {"distance3", d3.found}, {"linmaps_independent", lin},
           {"linmaps_rank", rr.rank}, {"isolated", ds.nets[s].n_isolated()}};
    if (d3.found)
      j["witness"] = {ds.node_ids[s][static_cast<std::size_t>(d3.from)], ds.node_ids[s][static_cast<std::size_t>(d3.to)]};
    any_d3 = any_d3 || d3.found;
    schools.push_back(j);
  }
  const auto vr = check_variance_identification(ds.nets);
  json out{{"schools", schools},
           {"any_distance3", any_d3},
           {"variance_identified", vr.identified},
           {"variance_rank", vr.rank.rank}};
  write_json(fs::path(out_dir(g)) / "identification.json", out);
  write_metadata(g, "check-ident", argv, {{"edges", edges}, {"nodes", nodes}}, {});
  std::cout << out.dump(2) << '\n';
  if (!expect.empty()) {
    const bool want = expect == "true";
    if (want != any_d3) {
      std::cerr << json{{"error", {{"module", "netgraph"}, {"message", "distance-3 expectation not met"}}}}.dump()
                << '\n';
      return 3;
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Peer effects with latent effort and isolated students"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Master seed (64-bit unsigned)");
  app.add_option("--threads", g.threads, "Worker threads (0 = all cores)");
  app.add_option("--out", g.out, "Output directory (default $PEERFX_OUT or ./peerfx_out)");
  app.add_option("--config", g.config, "Flat key = value configuration file")->check(CLI::ExistingFile);
  app.set_version_flag("--version", kVersion);

  std::string variant = "C";
  auto* sim = app.add_subcommand("simulate", "Simulate one DGP sample and write nodes/edges CSVs");
  sim->add_option("--dgp", variant, "DGP variant A, B or C")->check(CLI::IsMember({"A", "B", "C"}));

  EstimateArgs ea;
  auto* est = app.add_subcommand("estimate", "Estimate a model from nodes/edges CSVs");
  est->add_option("--nodes", ea.nodes, "Nodes CSV")->required()->check(CLI::ExistingFile);
  est->add_option("--edges", ea.edges, "Edges CSV")->required()->check(CLI::ExistingFile);
  est->add_option("--outcome", ea.outcome, "Outcome column");
  est->add_option("--categorical", ea.categorical, "column:omitted_category (repeatable)");
  est->add_option("--drop", ea.drop, "Covariate columns to ignore");
  est->add_option("--model", ea.model, "Model 1-4")->check(CLI::Range(1, 4));
  est->add_option("--instrument-power", ea.power, "Highest power p of G^p X used as instrument")
      ->check(CLI::Range(2, 10));
  est->add_flag("--two-step", ea.two_step, "Two-step efficient GMM weighting");
  est->add_flag("--no-varcomp", [&](std::int64_t) { ea.varcomp = false; }, "Skip the QML variance components");
  est->add_flag("--endogenous", ea.endogenous, "Control for endogenous link formation");
  est->add_option("--bootstrap", ea.bootstrap, "School-block bootstrap replicates (with --endogenous)");
  est->add_flag("--hausman", ea.hausman, "Hausman test of Model 3 against Model 4 (with --model 4)");
  est->add_flag("--lambda-only", ea.lambda_only, "Restrict the Hausman contrast to lambda");

  int reps = 0;
  std::string variants = "ABC", models = "1234";
  bool tests = false;
  auto* mc = app.add_subcommand("mc", "Monte Carlo study over DGPs A, B, C");
  mc->add_option("--replications", reps, "Replications (default 200)");
  mc->add_option("--dgps", variants, "Variants to run, e.g. ABC");
  mc->add_option("--models", models, "Models to fit, e.g. 1234");
  mc->add_flag("--tests", tests, "Also compute Sargan and Hausman tests");

  std::string kind = "pref", snodes, sedges;
  double magnitude = 1.0, width = 0.1;
  std::optional<double> slambda;
  int smodel = 4;
  auto* sh = app.add_subcommand("shock", "Propagate a school-level shock");
  sh->add_option("--kind", kind, "alpha | pref | fe")->check(CLI::IsMember({"alpha", "pref", "fe"}));
  sh->add_option("--magnitude", magnitude, "Shock size (delta^2 dc for pref)");
  sh->add_option("--lambda", slambda, "Peer effect; estimated from the data when omitted");
  sh->add_option("--model", smodel, "Model used to estimate lambda")->check(CLI::Range(1, 4));
  sh->add_option("--nodes", snodes, "Nodes CSV")->check(CLI::ExistingFile);
  sh->add_option("--edges", sedges, "Edges CSV")->required()->check(CLI::ExistingFile);
  sh->add_option("--bin-width", width, "Histogram bin width");

  std::string inodes, iedges, expect;
  auto* ci = app.add_subcommand("check-ident", "Graph identification checks");
  ci->add_option("--nodes", inodes, "Nodes CSV (optional)")->check(CLI::ExistingFile);
  ci->add_option("--edges", iedges, "Edges CSV")->required()->check(CLI::ExistingFile);
  ci->add_option("--expect-distance3", expect, "Exit nonzero unless the result matches")
      ->check(CLI::IsMember({"true", "false"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*sim) return cmd_simulate(g, variant, args);
    if (*est) return cmd_estimate(g, ea, args);
    if (*mc) return cmd_mc(g, reps, variants, models, tests, args);
    if (*sh) return cmd_shock(g, kind, magnitude, slambda, snodes, sedges, smodel, width, args);
    if (*ci) return cmd_check_ident(g, inodes, iedges, expect, args);
  } catch (const peerfx::Error& e) {
    std::cerr << json{{"error", {{"module", e.module()}, {"message", e.what()}}}}.dump() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", {{"module", "cli"}, {"message", e.what()}}}}.dump() << '\n';
    return 2;
  }
  return 1;
}
