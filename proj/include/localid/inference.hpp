#pragma once

// Hausman testing, the model registry and the Monte Carlo engine.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "localid/causal_models.hpp"
#include "localid/estimators.hpp"

namespace localid {

struct HausmanResult {
  double statistic = 0.0;
  int dof = 1;
  double p_value = 1.0;
  double variance_gap = 0.0;  // V_IS - V_ES
  bool degenerate = false;
};

inline constexpr double kGapTolerance = 1e-12;

// (mu_IS - mu_ES)^2 / (V_IS - V_ES) with V = SE^2. A gap at or below
// kGapTolerance * V_IS (or negative) is flagged degenerate and reported with p = 1.
HausmanResult hausman(const EstimateResult& is, const EstimateResult& es);
double chi2_1_upper_tail(double x);

// ---------------------------------------------------------------------------
// Model registry

inline constexpr int kSchemaVersion = 1;

struct UcSizes {
  std::size_t nx = 3;
  std::size_t ny = 5;
  bool confounded = true;
};

struct ModelSpec {
  std::string model = "lt";  // uc | nc | lt | npiv
  std::uint64_t dgp_seed = 1;
  double rank_tol = kRankTolerance;
  UcSizes uc;
  NegControlConfig nc;
  LongTermConfig lt;
  NpivConfig npiv;
};

struct RunConfig {
  int schema_version = kSchemaVersion;
  std::string command;
  ModelSpec spec;
  std::size_t n = 1000;
  std::size_t replications = 100;
  std::uint64_t seed = 1;
  std::size_t threads = 0;  // 0: hardware concurrency
  std::vector<double> violations;  // power curve grid
  std::string out = "out";
};

// Throws ConfigInvalid on unknown keys, wrong types or invalid values.
RunConfig parse_run_config(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);

struct TrueModel {
  JointLaw law;
  std::optional<CellFunction> h;
  std::string estimand;  // mu, ate or asd
  double truth = 0.0;
  double mu1 = 0.0, mu0 = 0.0;
};

TrueModel build_model(const ModelSpec& spec);
// E[EIF^2] of the primary estimand at the true law; NaN when the law is off the model.
double efficient_bound(const ModelSpec& spec, const TrueModel& m);
OperatorDiagnostics model_diagnostics(const ModelSpec& spec, const JointLaw& law);

std::vector<Method> model_methods(const std::string& model);
// Indices into model_methods of the (inefficient, efficient) pair compared by the Hausman test.
std::pair<std::size_t, std::size_t> hausman_pair(const std::string& model);
// Primary-estimand results for every method, in model_methods order.
std::vector<EstimateResult> run_methods(const ModelSpec& spec, const Dataset& data);

// ---------------------------------------------------------------------------
// Monte Carlo

std::uint64_t splitmix64(std::uint64_t x);
// Seed of replication r: splitmix64(splitmix64(master) + r), so nearby master seeds do not share streams.
std::uint64_t replication_seed(std::uint64_t master, std::size_t r);

struct ReplicationRecord {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::vector<double> estimate, se;  // per method
  HausmanResult hausman;
};

struct MethodSummary {
  Method method = Method::PlugIn;
  double mean = 0.0;
  double bias = 0.0;
  double variance = 0.0;
  double n_variance = 0.0;
  double bound_ratio = 0.0;
  double coverage = 0.0;
  double mean_se = 0.0;
};

struct MonteCarloSummary {
  std::string model;
  std::string estimand;
  std::size_t n = 0;
  std::size_t replications = 0;
  std::size_t completed = 0;
  std::size_t failed = 0;
  std::uint64_t master_seed = 0;
  double truth = 0.0;
  double bound = 0.0;
  std::vector<MethodSummary> methods;
  double hausman_rejection = 0.0;   // at 5%
  double hausman_degenerate = 0.0;
};

struct MonteCarloRun {
  MonteCarloSummary summary;
  std::vector<ReplicationRecord> records;
};

// Records in `resume` whose index and seed match are reused instead of recomputed.
MonteCarloRun monte_carlo(const ModelSpec& spec, std::size_t n, std::size_t replications, std::uint64_t master_seed,
                          std::size_t threads = 0, const std::vector<ReplicationRecord>& resume = {});
MonteCarloSummary summarize(const ModelSpec& spec, const TrueModel& truth, double bound, std::size_t n,
                            std::uint64_t master_seed, const std::vector<ReplicationRecord>& records);

struct VarianceGap {
  double gap = 0.0;  // Var(method a) - Var(method b)
  double se = 0.0;   // delta-method SE from paired replications
};
VarianceGap variance_gap(const MonteCarloRun& run, std::size_t a, std::size_t b);
// n Var(est_a - est_b) across successful replications.
double scaled_difference_variance(const MonteCarloRun& run, std::size_t a, std::size_t b);

struct PowerPoint {
  double violation = 0.0;
  double rejection = 0.0;
  double degenerate = 0.0;
  std::size_t completed = 0;
};
std::vector<PowerPoint> power_curve(const ModelSpec& spec, const std::vector<double>& violations, std::size_t n,
                                    std::size_t replications, std::uint64_t seed, std::size_t threads = 0);

nlohmann::json to_json(const HausmanResult& h);
nlohmann::json to_json(const MonteCarloSummary& s);
nlohmann::json to_json(const std::vector<PowerPoint>& p);
std::string records_to_csv(const std::vector<Method>& methods, const std::vector<ReplicationRecord>& records);
std::vector<ReplicationRecord> records_from_csv(std::string_view text, std::size_t n_methods);

}  // namespace localid
