#include <cmath>

#include "doctest.h"
#include "localid/inference.hpp"

using namespace localid;

namespace {

EstimateResult fake(std::string estimand, double est, double se) {
  EstimateResult r;
  r.estimand = std::move(estimand);
  r.estimate = est;
  r.se = se;
  return r;
}

nlohmann::json base_config() {
  return nlohmann::json::parse(R"({"schema_version": 1, "model": "nc", "n": 800, "replications": 12, "seed": 3,
                                   "sizes": {"nz": 3}})");
}

}  // namespace

TEST_CASE("Hausman statistic") {
  auto a = fake("asd", 0.3, 0.02);
  auto h = hausman(a, a);
  CHECK(h.statistic == 0.0);
  CHECK(h.p_value == 1.0);
  CHECK(h.degenerate);

  auto is = fake("asd", 0.30, 0.05), es = fake("asd", 0.25, 0.03);
  h = hausman(is, es);
  CHECK_FALSE(h.degenerate);
  CHECK(h.dof == 1);
  CHECK(h.variance_gap == doctest::Approx(0.0025 - 0.0009));
  CHECK(h.statistic == doctest::Approx(0.0025 / 0.0016).epsilon(1e-14));
  CHECK(h.p_value == doctest::Approx(std::erfc(std::sqrt(h.statistic / 2))).epsilon(1e-14));
  // chi-square(1) 95% quantile
  CHECK(std::abs(chi2_1_upper_tail(3.841458820694124) - 0.05) < 1e-12);
  // the reporting layout reference: 2.0830 -> 0.1489
  CHECK(std::round(chi2_1_upper_tail(2.0830) * 1e4) / 1e4 == doctest::Approx(0.1489));

  // negative gap
  h = hausman(es, is);
  CHECK(h.degenerate);
  CHECK(h.p_value == 1.0);
  CHECK_THROWS_AS(hausman(fake("mu", 0, 1), fake("asd", 0, 1)), LabError);
}

TEST_CASE("run configuration") {
  auto c = parse_run_config(base_config());
  CHECK(c.spec.model == "nc");
  CHECK(c.spec.nc.nz == 3);
  CHECK(c.n == 800);
  auto round = parse_run_config(to_json(c));
  CHECK(to_json(round) == to_json(c));

  auto bad = base_config();
  bad["model"] = "iv";
  CHECK_THROWS_AS(parse_run_config(bad), LabError);
  bad = base_config();
  bad["colour"] = 1;
  CHECK_THROWS_AS(parse_run_config(bad), LabError);
  bad = base_config();
  bad["schema_version"] = 2;
  CHECK_THROWS_AS(parse_run_config(bad), LabError);
  bad = base_config();
  bad.erase("schema_version");
  CHECK_THROWS_AS(parse_run_config(bad), LabError);
  bad = base_config();
  bad["sizes"]["s1"] = 3;  // a long-term key on a negative-control model
  CHECK_THROWS_AS(parse_run_config(bad), LabError);
  bad = base_config();
  bad["n"] = -5;
  CHECK_THROWS_AS(parse_run_config(bad), LabError);
  bad = base_config();
  bad["replications"] = 0;
  CHECK_THROWS_AS(parse_run_config(bad), LabError);
}

TEST_CASE("seeds") {
  CHECK(splitmix64(0) == 0xe220a8397b1dcdafULL);
  CHECK(replication_seed(1, 1) != replication_seed(2, 0));
  CHECK(replication_seed(5, 3) == splitmix64(splitmix64(5) + 3));
}

TEST_CASE("Monte Carlo determinism, resume and single replication") {
  auto c = parse_run_config(base_config());
  auto one = monte_carlo(c.spec, c.n, 1, c.seed, 1);
  auto truth = build_model(c.spec);
  auto data = sample(truth.law, c.n, replication_seed(c.seed, 0));
  auto direct = run_methods(c.spec, data);
  REQUIRE(one.records[0].ok);
  for (std::size_t m = 0; m < direct.size(); ++m) {
    CHECK(one.summary.methods[m].mean == direct[m].estimate);
    CHECK(one.summary.methods[m].variance == 0.0);
    CHECK(one.summary.methods[m].mean_se == direct[m].se);
  }

  auto serial = monte_carlo(c.spec, c.n, c.replications, c.seed, 1);
  auto parallel = monte_carlo(c.spec, c.n, c.replications, c.seed, 4);
  CHECK(to_json(serial.summary) == to_json(parallel.summary));

  auto methods = model_methods(c.spec.model);
  auto csv = records_to_csv(methods, serial.records);
  auto back = records_from_csv(csv, methods.size());
  REQUIRE(back.size() == serial.records.size());
  for (std::size_t r = 0; r < back.size(); ++r) {
    CHECK(back[r].estimate == serial.records[r].estimate);
    CHECK(back[r].se == serial.records[r].se);
    CHECK(back[r].hausman.statistic == serial.records[r].hausman.statistic);
  }
  back.resize(5);
  auto resumed = monte_carlo(c.spec, c.n, c.replications, c.seed, 2, back);
  CHECK(to_json(resumed.summary) == to_json(serial.summary));
  CHECK(records_to_csv(methods, resumed.records) == csv);

  // records from another master seed are not reused
  auto other = monte_carlo(c.spec, c.n, 3, c.seed + 1, 1);
  auto mixed = monte_carlo(c.spec, c.n, 3, c.seed, 1, other.records);
  CHECK(records_to_csv(methods, mixed.records) == records_to_csv(methods, monte_carlo(c.spec, c.n, 3, c.seed, 1).records));
}

TEST_CASE("just-identified Hausman comparisons are degenerate") {
  ModelSpec s;
  s.model = "nc";
  s.nc.nz = 2;
  auto run = monte_carlo(s, 1000, 20, 9);
  CHECK(run.summary.completed == 20);
  CHECK(run.summary.hausman_degenerate == 1.0);
  CHECK(run.summary.hausman_rejection == 0.0);
  CHECK(scaled_difference_variance(run, 0, 1) < 1e-16);
}

TEST_CASE("summary bookkeeping") {
  ModelSpec s;
  s.model = "npiv";
  auto run = monte_carlo(s, 1500, 30, 4);
  const auto& sum = run.summary;
  CHECK(sum.bound > 0.0);
  for (const auto& m : sum.methods) {
    CHECK(m.coverage >= 0.0);
    CHECK(m.coverage <= 1.0);
    CHECK(m.bound_ratio > 0.0);
    CHECK(m.n_variance == doctest::Approx(1500 * m.variance));
    CHECK(m.bias == doctest::Approx(m.mean - sum.truth));
  }
  auto j = to_json(sum);
  CHECK(j["methods"][1]["method"] == "ES");
  CHECK(j.contains("hausman_rejection_5pct"));
  auto g = variance_gap(run, 0, 1);
  CHECK(std::isfinite(g.se));

  ModelSpec nc;
  nc.model = "nc";
  CHECK_THROWS_AS(power_curve(nc, {0.1}, 500, 2, 1), LabError);
  CHECK_THROWS_AS(monte_carlo(nc, 500, 0, 1), LabError);
}
