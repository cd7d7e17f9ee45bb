// localid: simulate, diagnose, estimate and Monte Carlo from one JSON config.
//
// Exit codes: 0 success, 2 config error, 3 degenerate model, 4 data error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "localid/inference.hpp"
#include "localid/text_util.hpp"

using namespace localid;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDegenerate = 3;
constexpr int kExitData = 4;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<double> rank_tol;
  std::optional<std::size_t> replications;
  std::string data;
  bool demo_triangle = false;
};

int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::ConfigInvalid:
    case ErrorCode::InvalidSizes:
    case ErrorCode::GridTooCoarse:
    case ErrorCode::PerturbationLeavesSimplex:
      return kExitConfig;
    case ErrorCode::ParseError:
    case ErrorCode::LabelMismatch:
    case ErrorCode::UnknownAxis:
      return kExitData;
    default:
      return kExitDegenerate;
  }
}

RunConfig load_config(const Options& o, const std::string& command) {
  if (o.config.empty()) fail(ErrorCode::ConfigInvalid, "--config is required for '" + command + "'");
  if (!fs::exists(o.config)) fail(ErrorCode::ConfigInvalid, "config file '" + o.config + "' does not exist");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(o.config));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ConfigInvalid, std::string("config is not valid JSON: ") + e.what());
  }
  auto c = parse_run_config(j);
  c.command = command;
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.out = *o.out;
  if (o.rank_tol) {
    if (!(*o.rank_tol > 0.0 && *o.rank_tol < 1.0)) fail(ErrorCode::ConfigInvalid, "--rank-tol must lie in (0, 1)");
    c.spec.rank_tol = *o.rank_tol;
  }
  if (o.replications) {
    if (*o.replications < 1) fail(ErrorCode::ConfigInvalid, "--replications must be at least 1");
    c.replications = *o.replications;
  }
  if (!o.data.empty() && !fs::exists(o.data)) fail(ErrorCode::ConfigInvalid, "data file '" + o.data + "' does not exist");
  return c;
}

void write_out(const fs::path& dir, const std::string& name, const std::string& text) {
  fs::create_directories(dir);
  write_file_atomic(dir / name, text);
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : std::string(w - s.size(), ' ') + s; }

Dataset load_or_simulate(const RunConfig& c, const TrueModel& m, const std::string& data_path) {
  if (data_path.empty()) return sample(m.law, c.n, c.seed);
  return dataset_from_csv(read_file(data_path), m.law.space());
}

// ---------------------------------------------------------------------------

int cmd_simulate(const Options& o) {
  auto c = load_config(o, "simulate");
  auto m = build_model(c.spec);
  auto data = sample(m.law, c.n, c.seed);
  nlohmann::json truth{{"config", to_json(c)},
                       {"seed", c.seed},
                       {"estimand", m.estimand},
                       {"truth", m.truth},
                       {"law", law_to_json(m.law)}};
  if (c.spec.model == "nc" || c.spec.model == "lt") {
    truth["mu1"] = m.mu1;
    truth["mu0"] = m.mu0;
  }
  if (m.h) truth["h"] = to_json(*m.h);
  auto diag = model_diagnostics(c.spec, m.law);
  truth["identification"] = to_json(diag);
  double bound = efficient_bound(c.spec, m);
  truth["efficiency_bound"] = std::isfinite(bound) ? nlohmann::json(bound) : nlohmann::json(nullptr);
  fs::path dir(c.out);
  write_out(dir, "dataset.csv", dataset_to_csv(data));
  write_out(dir, "truth.json", truth.dump(2) + "\n");
  std::cout << "wrote " << (dir / "dataset.csv").string() << " (" << data.size() << " records) and "
            << (dir / "truth.json").string() << "\n";
  return 0;
}

nlohmann::json triangle_report() {
  ProductSpace s({Axis("W", {"a", "b", "c"})});
  JointLaw p(s, {0.4, 0.4, 0.2});
  struct Row {
    std::string name, restriction;
    std::vector<MassConstraint> cons;
  };
  std::vector<Row> rows{
      {"P1", "none", {}},
      {"P2", "p_b >= p_a / 2", {{{-0.5, 1.0, 0.0}, 0.0, MassConstraint::Kind::AtLeast}}},
      {"P3", "p_b = p_a", {{{1.0, -1.0, 0.0}, 0.0, MassConstraint::Kind::Equal}}},
  };
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    auto d = tangent_dim_demo(r.cons, p);
    out.push_back({{"model", r.name},
                   {"restriction", r.restriction},
                   {"law", {{"p_a", 0.4}, {"p_b", 0.4}, {"p_c", 0.2}}},
                   {"tangent_dim", d.tangent_dim},
                   {"full_dim", d.full_dim},
                   {"verdict", verdict_name(d.verdict)},
                   {"bound_p_a", tangent_efficiency_bound(d, p, {1.0, 0.0, 0.0})}});
  }
  return out;
}

int cmd_diagnose(const Options& o) {
  if (o.demo_triangle && o.config.empty()) {
    nlohmann::json rep{{"triangle", triangle_report()}};
    auto text = rep.dump(2) + "\n";
    if (o.out) write_out(*o.out, "diagnose.json", text);
    std::cout << text;
    return 0;
  }
  auto c = load_config(o, "diagnose");
  auto m = build_model(c.spec);
  JointLaw law = o.data.empty() ? m.law : empirical_law(dataset_from_csv(read_file(o.data), m.law.space()));
  nlohmann::json rep{{"config", to_json(c)}, {"seed", c.seed}, {"source", o.data.empty() ? "model" : o.data}};
  if (c.spec.model == "nc") {
    for (int d : {1, 0}) {
      auto k = nc_operator(law, d);
      if (k.active_source_count() == 0 || k.active_target_count() == 0)
        fail(ErrorCode::ZeroMassEvent, "the operator has empty support");
      rep["arms"][d ? "d1" : "d0"] = to_json(diagnose_identification(k, c.spec.rank_tol));
    }
    rep["verdict"] = rep["arms"]["d1"]["verdict"];
  } else {
    auto diag = model_diagnostics(c.spec, law);
    if (diag.active_sources == 0 || diag.active_targets == 0)
      fail(ErrorCode::ZeroMassEvent, "the operator has empty support");
    rep["operator"] = to_json(diag);
    rep["verdict"] = verdict_name(diag.verdict);
  }
  if (o.demo_triangle) rep["triangle"] = triangle_report();
  auto text = rep.dump(2) + "\n";
  write_out(c.out, "diagnose.json", text);
  std::cout << text;
  return 0;
}

std::string table_one(const std::vector<EstimateResult>& cols, const std::optional<HausmanResult>& h,
                      const std::string& label) {
  const std::size_t w = 12;
  std::ostringstream s;
  s << std::string(w, ' ');
  for (const auto& c : cols) s << pad(method_name(c.method), w);
  if (h) s << pad("Hausman", w);
  s << "\n" << pad(label, w);
  for (const auto& c : cols) s << pad(fixed(c.estimate), w);
  if (h) s << pad(h->degenerate ? "n/a" : fixed(h->statistic), w);
  s << "\n" << std::string(w, ' ');
  for (const auto& c : cols) s << pad("(" + fixed(c.se) + ")", w);
  if (h) s << pad("[" + fixed(h->p_value) + "]", w);
  s << "\n";
  return s.str();
}

int cmd_estimate(const Options& o) {
  auto c = load_config(o, "estimate");
  auto m = build_model(c.spec);
  Dataset data = load_or_simulate(c, m, o.data);
  nlohmann::json rep{{"config", to_json(c)}, {"seed", c.seed}, {"n", data.size()},
                     {"data", o.data.empty() ? "simulated" : o.data}};
  std::string text;
  std::vector<EstimateResult> all;
  if (c.spec.model == "lt" || c.spec.model == "nc") {
    std::vector<std::pair<std::string, ArmEstimates>> methods;
    if (c.spec.model == "lt") {
      methods = {{"PlugIn", plug_in_lt(data, c.spec.rank_tol)},
                 {"OneStep", one_step_lt(data, c.spec.rank_tol)},
                 {"MinDist", mind_lt(data, c.spec.rank_tol)}};
    } else {
      auto e = nc_estimators(data, c.spec.rank_tol);
      methods = {{"PlugIn", e.plug_in}, {"OneStep", e.one_step}};
    }
    auto h = hausman(methods[0].second.mu, methods[1].second.mu);
    for (const auto* tag : {"mu1", "mu0", "mu"}) {
      std::vector<EstimateResult> row;
      for (auto& [name, a] : methods) row.push_back(tag == std::string("mu1") ? a.mu1 : tag == std::string("mu0") ? a.mu0 : a.mu);
      text += table_one(row, tag == std::string("mu") ? std::optional<HausmanResult>(h) : std::nullopt, tag);
      for (auto& r : row) all.push_back(r);
    }
    rep["hausman"] = to_json(h);
  } else {
    auto cols = run_methods(c.spec, data);
    auto [a, b] = hausman_pair(c.spec.model);
    auto h = hausman(cols[a], cols[b]);
    text = table_one(cols, h, c.spec.model == "npiv" ? "ASD" : "ATE");
    all = cols;
    rep["hausman"] = to_json(h);
  }
  text += "Standard errors in parentheses; Hausman p-value in brackets.\n";
  nlohmann::json est = nlohmann::json::array();
  for (const auto& r : all) est.push_back(to_json(r));
  rep["estimates"] = est;
  rep["table"] = text;
  write_out(c.out, "estimate.json", rep.dump(2) + "\n");
  write_out(c.out, "estimate.txt", text);
  std::cout << text;
  return 0;
}

int cmd_mc(const Options& o) {
  auto c = load_config(o, "mc");
  fs::path dir(c.out);
  auto methods = model_methods(c.spec.model);
  std::vector<ReplicationRecord> resume;
  auto csv_path = dir / "mc_replications.csv";
  if (fs::exists(csv_path)) {
    resume = records_from_csv(read_file(csv_path), methods.size());
    std::cerr << "resuming: " << resume.size() << " stored replications found\n";
  }
  auto run = monte_carlo(c.spec, c.n, c.replications, c.seed, c.threads, resume);
  nlohmann::json rep{{"config", to_json(c)}, {"seed", c.seed}, {"summary", to_json(run.summary)}};
  if (!c.violations.empty()) {
    auto pc = power_curve(c.spec, c.violations, c.n, c.replications, c.seed, c.threads);
    rep["power_curve"] = to_json(pc);
  }
  write_out(dir, "mc_replications.csv", records_to_csv(methods, run.records));
  write_out(dir, "mc_summary.json", rep.dump(2) + "\n");
  std::cout << rep["summary"].dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Local identification and efficiency laboratory"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run configuration");
    sub->add_option("--seed", o.seed, "Sampling seed (overrides the config)");
    sub->add_option("--out", o.out, "Output directory (overrides the config)");
    sub->add_option("--rank-tol", o.rank_tol, "Relative singular-value tolerance");
  };
  auto* sim = app.add_subcommand("simulate", "Sample a dataset and write the ground-truth sidecar");
  add_common(sim);
  auto* dia = app.add_subcommand("diagnose", "Identification report for the model or a dataset");
  add_common(dia);
  dia->add_option("--data", o.data, "Dataset CSV; diagnoses its empirical law");
  dia->add_flag("--demo-triangle", o.demo_triangle, "Three-point simplex tangent-space demo");
  auto* est = app.add_subcommand("estimate", "Run the estimators and the Hausman test");
  add_common(est);
  est->add_option("--data", o.data, "Dataset CSV (default: simulate n records from the config)");
  auto* mc = app.add_subcommand("mc", "Monte Carlo summary; resumes from stored replications");
  add_common(mc);
  mc->add_option("--replications", o.replications, "Number of replications (overrides the config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*sim) return cmd_simulate(o);
    if (*dia) return cmd_diagnose(o);
    if (*est) return cmd_estimate(o);
    if (*mc) return cmd_mc(o);
  } catch (const LabError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}
