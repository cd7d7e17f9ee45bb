#include "localid/inference.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <set>
#include <thread>

#include "localid/text_util.hpp"

namespace localid {

namespace {

constexpr double kZ975 = 1.959963984540054;

[[noreturn]] void config_error(const std::string& msg) { fail(ErrorCode::ConfigInvalid, msg); }

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) config_error(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) config_error("unknown key '" + k + "' in " + where);
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    config_error(std::string("key '") + key + "': " + e.what());
  }
}

void read_size(const nlohmann::json& j, const char* key, std::size_t& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) config_error(std::string("key '") + key + "' must be a nonnegative integer");
  out = v.get<std::size_t>();
}

std::vector<std::string> sanitized_labels(const std::vector<Method>& ms) {
  std::vector<std::string> out;
  for (auto m : ms) out.push_back(method_name(m));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Hausman

double chi2_1_upper_tail(double x) {
  if (!(x > 0.0)) return 1.0;
  return std::erfc(std::sqrt(x / 2.0));
}

HausmanResult hausman(const EstimateResult& is, const EstimateResult& es) {
  if (is.estimand != es.estimand) fail(ErrorCode::EstimandMismatch, "Hausman inputs target different estimands");
  HausmanResult h;
  double v_is = is.se * is.se, v_es = es.se * es.se;
  h.variance_gap = v_is - v_es;
  if (!(h.variance_gap > kGapTolerance * v_is)) {
    h.degenerate = true;
    h.statistic = 0.0;
    h.p_value = 1.0;
    return h;
  }
  double d = is.estimate - es.estimate;
  h.statistic = d * d / h.variance_gap;
  h.p_value = chi2_1_upper_tail(h.statistic);
  return h;
}

// ---------------------------------------------------------------------------
// Configuration

RunConfig parse_run_config(const nlohmann::json& j) {
  check_keys(j, {"schema_version", "command", "model", "dgp_seed", "rank_tol", "sizes", "n", "replications", "seed",
                 "threads", "violations", "out"},
             "config");
  RunConfig c;
  if (!j.contains("schema_version")) config_error("missing schema_version");
  read(j, "schema_version", c.schema_version);
  if (c.schema_version != kSchemaVersion)
    config_error("unsupported schema_version " + std::to_string(c.schema_version));
  read(j, "command", c.command);
  read(j, "model", c.spec.model);
  if (c.spec.model != "uc" && c.spec.model != "nc" && c.spec.model != "lt" && c.spec.model != "npiv")
    config_error("unknown model '" + c.spec.model + "' (expected uc, nc, lt or npiv)");
  read(j, "dgp_seed", c.spec.dgp_seed);
  read(j, "rank_tol", c.spec.rank_tol);
  if (!(c.spec.rank_tol > 0.0 && c.spec.rank_tol < 1.0)) config_error("rank_tol must lie in (0, 1)");
  read_size(j, "n", c.n);
  read_size(j, "replications", c.replications);
  read(j, "seed", c.seed);
  read_size(j, "threads", c.threads);
  read(j, "violations", c.violations);
  read(j, "out", c.out);
  if (c.n < 2) config_error("n must be at least 2");
  if (c.replications < 1) config_error("replications must be at least 1");

  if (j.contains("sizes")) {
    const auto& s = j.at("sizes");
    auto& sp = c.spec;
    if (sp.model == "uc") {
      check_keys(s, {"nx", "ny", "confounded"}, "sizes");
      read_size(s, "nx", sp.uc.nx);
      read_size(s, "ny", sp.uc.ny);
      read(s, "confounded", sp.uc.confounded);
    } else if (sp.model == "nc") {
      check_keys(s, {"nv", "nz", "nx", "ny", "heteroskedastic"}, "sizes");
      read_size(s, "nv", sp.nc.nv);
      read_size(s, "nz", sp.nc.nz);
      read_size(s, "nx", sp.nc.nx);
      read_size(s, "ny", sp.nc.ny);
      read(s, "heteroskedastic", sp.nc.heteroskedastic);
    } else if (sp.model == "lt") {
      check_keys(s, {"s1", "s2", "s3", "ny", "bijective", "short_term_effect", "violation"}, "sizes");
      read_size(s, "s1", sp.lt.s1);
      read_size(s, "s2", sp.lt.s2);
      read_size(s, "s3", sp.lt.s3);
      read_size(s, "ny", sp.lt.ny);
      read(s, "bijective", sp.lt.bijective);
      read(s, "short_term_effect", sp.lt.short_term_effect);
      read(s, "violation", sp.lt.violation);
    } else {
      check_keys(s, {"nt", "nz", "nx", "ny", "beta", "linear", "violation"}, "sizes");
      read_size(s, "nt", sp.npiv.nt);
      read_size(s, "nz", sp.npiv.nz);
      read_size(s, "nx", sp.npiv.nx);
      read_size(s, "ny", sp.npiv.ny);
      read(s, "beta", sp.npiv.beta);
      read(s, "linear", sp.npiv.linear);
      read(s, "violation", sp.npiv.violation);
    }
  }
  return c;
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json sizes;
  const auto& sp = c.spec;
  if (sp.model == "uc") {
    sizes = {{"nx", sp.uc.nx}, {"ny", sp.uc.ny}, {"confounded", sp.uc.confounded}};
  } else if (sp.model == "nc") {
    sizes = {{"nv", sp.nc.nv}, {"nz", sp.nc.nz}, {"nx", sp.nc.nx}, {"ny", sp.nc.ny},
             {"heteroskedastic", sp.nc.heteroskedastic}};
  } else if (sp.model == "lt") {
    sizes = {{"s1", sp.lt.s1},
             {"s2", sp.lt.s2},
             {"s3", sp.lt.s3},
             {"ny", sp.lt.ny},
             {"bijective", sp.lt.bijective},
             {"short_term_effect", sp.lt.short_term_effect},
             {"violation", sp.lt.violation}};
  } else {
    sizes = {{"nt", sp.npiv.nt},   {"nz", sp.npiv.nz},         {"nx", sp.npiv.nx},
             {"ny", sp.npiv.ny},   {"beta", sp.npiv.beta},     {"linear", sp.npiv.linear},
             {"violation", sp.npiv.violation}};
  }
  return {{"schema_version", c.schema_version},
          {"command", c.command},
          {"model", sp.model},
          {"dgp_seed", sp.dgp_seed},
          {"rank_tol", sp.rank_tol},
          {"sizes", sizes},
          {"n", c.n},
          {"replications", c.replications},
          {"seed", c.seed},
          {"threads", c.threads},
          {"violations", c.violations},
          {"out", c.out}};
}

// ---------------------------------------------------------------------------
// Registry

TrueModel build_model(const ModelSpec& spec) {
  if (spec.model == "uc") {
    auto us = random_unconfounded_spec(spec.uc.nx, 2, spec.uc.ny, spec.dgp_seed, spec.uc.confounded);
    auto draw = gen_unconfounded(us, spec.dgp_seed);
    TrueModel m{draw.observable, std::nullopt, "ate", 0.0, 0.0, 0.0};
    m.truth = uc_ate(m.law);
    return m;
  }
  if (spec.model == "nc") {
    auto g = gen_negative_control(spec.nc, spec.dgp_seed);
    return {g.law, g.h, "mu", g.mu, g.mu1, g.mu0};
  }
  if (spec.model == "lt") {
    auto g = gen_long_term(spec.lt, spec.dgp_seed);
    return {g.law, g.h, "mu", g.mu, g.mu1, g.mu0};
  }
  if (spec.model == "npiv") {
    auto g = gen_npiv(spec.npiv, spec.dgp_seed);
    return {g.law, g.h, "asd", g.mu, 0.0, 0.0};
  }
  config_error("unknown model '" + spec.model + "'");
}

double efficient_bound(const ModelSpec& spec, const TrueModel& m) {
  try {
    if (spec.model == "uc") return uc_ate_eif(m.law).bound;
    if (spec.model == "nc") return nc_eif(m.law, *m.h, spec.rank_tol).mu.bound;
    if (spec.model == "lt") return lt_eif(m.law, *m.h, spec.rank_tol).mu.bound;
    if (spec.model == "npiv") return npiv_eif(m.law, *m.h, Weighting::Efficient, spec.rank_tol).bound;
  } catch (const LabError& e) {
    if (e.code() != ErrorCode::BridgeViolated) throw;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

OperatorDiagnostics model_diagnostics(const ModelSpec& spec, const JointLaw& law) {
  if (spec.model == "nc") return diagnose_identification(nc_operator(law, 1), spec.rank_tol);
  if (spec.model == "lt") return diagnose_identification(lt_operator(law), spec.rank_tol);
  if (spec.model == "npiv") return diagnose_identification(npiv_operator(law), spec.rank_tol);
  // The unconfounded model has no bridge: K is the identity on (T, X).
  return diagnose_identification(build_operator(law, {ax::X, ax::T}, {ax::X, ax::T}), spec.rank_tol);
}

std::vector<Method> model_methods(const std::string& model) {
  if (model == "uc") return {Method::PlugIn, Method::Smoothed};
  if (model == "nc") return {Method::PlugIn, Method::OneStep};
  if (model == "lt") return {Method::PlugIn, Method::OneStep, Method::MinDist};
  if (model == "npiv") return {Method::IS, Method::ES};
  config_error("unknown model '" + model + "'");
}

std::pair<std::size_t, std::size_t> hausman_pair(const std::string& model) {
  (void)model_methods(model);
  return {0, 1};
}

std::vector<EstimateResult> run_methods(const ModelSpec& spec, const Dataset& data) {
  if (spec.model == "uc") return {estimate_ate_uc(data), estimate_ate_uc_smoothed(data)};
  if (spec.model == "nc") {
    auto e = nc_estimators(data, spec.rank_tol);
    return {e.plug_in.mu, e.one_step.mu};
  }
  if (spec.model == "lt")
    return {plug_in_lt(data, spec.rank_tol).mu, one_step_lt(data, spec.rank_tol).mu, mind_lt(data, spec.rank_tol).mu};
  if (spec.model == "npiv")
    return {npiv_asd(data, AsdMode::IS, spec.rank_tol), npiv_asd(data, AsdMode::ES, spec.rank_tol)};
  config_error("unknown model '" + spec.model + "'");
}

// ---------------------------------------------------------------------------
// Monte Carlo

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t replication_seed(std::uint64_t master, std::size_t r) { return splitmix64(splitmix64(master) + r); }

MonteCarloSummary summarize(const ModelSpec& spec, const TrueModel& truth, double bound, std::size_t n,
                            std::uint64_t master_seed, const std::vector<ReplicationRecord>& records) {
  auto methods = model_methods(spec.model);
  MonteCarloSummary s;
  s.model = spec.model;
  s.estimand = truth.estimand;
  s.n = n;
  s.replications = records.size();
  s.master_seed = master_seed;
  s.truth = truth.truth;
  s.bound = bound;
  std::vector<const ReplicationRecord*> ok;
  for (const auto& r : records)
    if (r.ok) ok.push_back(&r);
  s.completed = ok.size();
  s.failed = records.size() - ok.size();
  const double cnt = static_cast<double>(ok.size());
  for (std::size_t m = 0; m < methods.size(); ++m) {
    MethodSummary ms;
    ms.method = methods[m];
    if (!ok.empty()) {
      for (auto* r : ok) {
        ms.mean += r->estimate[m];
        ms.mean_se += r->se[m];
        if (std::abs(r->estimate[m] - s.truth) <= kZ975 * r->se[m]) ms.coverage += 1.0;
      }
      ms.mean /= cnt;
      ms.mean_se /= cnt;
      ms.coverage /= cnt;
      for (auto* r : ok) ms.variance += (r->estimate[m] - ms.mean) * (r->estimate[m] - ms.mean);
      ms.variance = ok.size() > 1 ? ms.variance / (cnt - 1.0) : 0.0;
      ms.bias = ms.mean - s.truth;
      ms.n_variance = static_cast<double>(n) * ms.variance;
      ms.bound_ratio = ms.n_variance / bound;
    }
    s.methods.push_back(ms);
  }
  if (!ok.empty()) {
    for (auto* r : ok) {
      if (r->hausman.p_value < 0.05) s.hausman_rejection += 1.0;
      if (r->hausman.degenerate) s.hausman_degenerate += 1.0;
    }
    s.hausman_rejection /= cnt;
    s.hausman_degenerate /= cnt;
  }
  return s;
}

MonteCarloRun monte_carlo(const ModelSpec& spec, std::size_t n, std::size_t replications, std::uint64_t master_seed,
                          std::size_t threads, const std::vector<ReplicationRecord>& resume) {
  if (replications < 1) config_error("replications must be at least 1");
  if (n < 2) config_error("n must be at least 2");
  auto truth = build_model(spec);
  double bound = efficient_bound(spec, truth);
  auto methods = model_methods(spec.model);
  auto [ia, ib] = hausman_pair(spec.model);

  MonteCarloRun run;
  run.records.resize(replications);
  std::vector<bool> done(replications, false);
  for (const auto& r : resume) {
    if (r.index < replications && r.seed == replication_seed(master_seed, r.index) &&
        (!r.ok || r.estimate.size() == methods.size())) {
      run.records[r.index] = r;
      done[r.index] = true;
    }
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      std::size_t r = next.fetch_add(1);
      if (r >= replications) return;
      if (done[r]) continue;
      ReplicationRecord rec;
      rec.index = r;
      rec.seed = replication_seed(master_seed, r);
      try {
        auto data = sample(truth.law, n, rec.seed);
        auto res = run_methods(spec, data);
        for (const auto& e : res) {
          rec.estimate.push_back(e.estimate);
          rec.se.push_back(e.se);
        }
        rec.hausman = hausman(res[ia], res[ib]);
        rec.ok = true;
      } catch (const LabError& e) {
        rec.ok = false;
        rec.error = std::string(error_name(e.code())) + ": " + e.what();
      }
      run.records[r] = std::move(rec);
    }
  };
  std::size_t nt = threads ? threads : std::max(1u, std::thread::hardware_concurrency());
  nt = std::min(nt, replications);
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < nt; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  run.summary = summarize(spec, truth, bound, n, master_seed, run.records);
  return run;
}

VarianceGap variance_gap(const MonteCarloRun& run, std::size_t a, std::size_t b) {
  std::vector<std::pair<double, double>> v;
  for (const auto& r : run.records)
    if (r.ok) v.emplace_back(r.estimate[a], r.estimate[b]);
  VarianceGap g;
  if (v.size() < 2) return g;
  const double cnt = static_cast<double>(v.size());
  double ma = 0, mb = 0;
  for (auto [x, y] : v) {
    ma += x;
    mb += y;
  }
  ma /= cnt;
  mb /= cnt;
  std::vector<double> d;
  double md = 0.0;
  for (auto [x, y] : v) {
    d.push_back((x - ma) * (x - ma) - (y - mb) * (y - mb));
    md += d.back();
  }
  md /= cnt;
  double sd = 0.0;
  for (double x : d) sd += (x - md) * (x - md);
  sd = std::sqrt(sd / (cnt - 1.0));
  g.gap = md * cnt / (cnt - 1.0);
  g.se = sd / std::sqrt(cnt) * cnt / (cnt - 1.0);
  return g;
}

double scaled_difference_variance(const MonteCarloRun& run, std::size_t a, std::size_t b) {
  std::vector<double> d;
  for (const auto& r : run.records)
    if (r.ok) d.push_back(r.estimate[a] - r.estimate[b]);
  if (d.size() < 2) return 0.0;
  double m = 0.0;
  for (double x : d) m += x;
  m /= static_cast<double>(d.size());
  double v = 0.0;
  for (double x : d) v += (x - m) * (x - m);
  return static_cast<double>(run.summary.n) * v / static_cast<double>(d.size() - 1);
}

std::vector<PowerPoint> power_curve(const ModelSpec& spec, const std::vector<double>& violations, std::size_t n,
                                    std::size_t replications, std::uint64_t seed, std::size_t threads) {
  std::vector<PowerPoint> out;
  for (double v : violations) {
    ModelSpec s = spec;
    if (s.model == "lt") {
      s.lt.violation = v;
    } else if (s.model == "npiv") {
      s.npiv.violation = v;
    } else if (v != 0.0) {
      config_error("model '" + s.model + "' has no bridge violation parameter");
    }
    auto run = monte_carlo(s, n, replications, seed, threads);
    out.push_back({v, run.summary.hausman_rejection, run.summary.hausman_degenerate, run.summary.completed});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json to_json(const HausmanResult& h) {
  return {{"statistic", h.statistic},
          {"dof", h.dof},
          {"p_value", h.p_value},
          {"variance_gap", h.variance_gap},
          {"degenerate", h.degenerate}};
}

namespace {
nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
}  // namespace

nlohmann::json to_json(const MonteCarloSummary& s) {
  nlohmann::json methods = nlohmann::json::array();
  for (const auto& m : s.methods)
    methods.push_back({{"method", method_name(m.method)},
                       {"mean", m.mean},
                       {"bias", m.bias},
                       {"variance", m.variance},
                       {"n_variance", m.n_variance},
                       {"bound_ratio", number_or_null(m.bound_ratio)},
                       {"coverage", m.coverage},
                       {"mean_se", m.mean_se}});
  return {{"model", s.model},
          {"estimand", s.estimand},
          {"n", s.n},
          {"replications", s.replications},
          {"completed", s.completed},
          {"failed", s.failed},
          {"master_seed", s.master_seed},
          {"truth", s.truth},
          {"bound", number_or_null(s.bound)},
          {"methods", methods},
          {"hausman_rejection_5pct", s.hausman_rejection},
          {"hausman_degenerate_rate", s.hausman_degenerate}};
}

nlohmann::json to_json(const std::vector<PowerPoint>& p) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& x : p)
    a.push_back({{"violation", x.violation},
                 {"rejection", x.rejection},
                 {"degenerate", x.degenerate},
                 {"completed", x.completed}});
  return a;
}

std::string records_to_csv(const std::vector<Method>& methods, const std::vector<ReplicationRecord>& records) {
  std::string out = "replication,seed,ok";
  for (const auto& m : sanitized_labels(methods)) out += "," + m + "_estimate," + m + "_se";
  out += ",hausman_stat,hausman_p,hausman_gap,hausman_degenerate,error\n";
  for (const auto& r : records) {
    out += std::to_string(r.index) + "," + std::to_string(r.seed) + "," + (r.ok ? "1" : "0");
    for (std::size_t m = 0; m < methods.size(); ++m) {
      if (r.ok)
        out += "," + format_number(r.estimate[m]) + "," + format_number(r.se[m]);
      else
        out += ",,";
    }
    if (r.ok)
      out += "," + format_number(r.hausman.statistic) + "," + format_number(r.hausman.p_value) + "," +
             format_number(r.hausman.variance_gap) + "," + (r.hausman.degenerate ? "1" : "0");
    else
      out += ",,,,";
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out += "," + err + "\n";
  }
  return out;
}

std::vector<ReplicationRecord> records_from_csv(std::string_view text, std::size_t n_methods) {
  auto lines = split_lines(text);
  std::vector<ReplicationRecord> out;
  if (lines.empty()) return out;
  const std::size_t width = 3 + 2 * n_methods + 5;
  auto num = [](const std::string& s) {
    auto v = parse_double(s);
    if (!v) fail(ErrorCode::ParseError, "bad number '" + s + "' in replication records");
    return *v;
  };
  for (std::size_t i = 1; i < lines.size(); ++i) {
    auto f = split_csv(lines[i]);
    if (f.size() != width) fail(ErrorCode::ParseError, "replication record has the wrong number of fields");
    ReplicationRecord r;
    try {
      r.index = std::stoull(f[0]);
      r.seed = std::stoull(f[1]);
    } catch (const std::exception&) {
      fail(ErrorCode::ParseError, "bad replication index or seed");
    }
    r.ok = f[2] == "1";
    if (r.ok) {
      for (std::size_t m = 0; m < n_methods; ++m) {
        r.estimate.push_back(num(f[3 + 2 * m]));
        r.se.push_back(num(f[4 + 2 * m]));
      }
      std::size_t o = 3 + 2 * n_methods;
      r.hausman.statistic = num(f[o]);
      r.hausman.p_value = num(f[o + 1]);
      r.hausman.variance_gap = num(f[o + 2]);
      r.hausman.degenerate = f[o + 3] == "1";
    }
    r.error = f.back();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace localid
