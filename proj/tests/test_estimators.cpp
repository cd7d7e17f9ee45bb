#include <cmath>

#include "doctest.h"
#include "localid/estimators.hpp"
#include "test_support.hpp"

using namespace localid;
using namespace testing_support;

namespace {

// The same records with every outcome label multiplied by c.
Dataset scale_outcome(const Dataset& d, double c) {
  std::vector<Axis> axes;
  for (const auto& a : d.space.axes()) {
    if (a.name() != ax::Y) {
      axes.push_back(a);
      continue;
    }
    std::vector<std::string> labels;
    for (const auto& l : a.labels()) labels.push_back(l == kMissingLabel ? l : format_number(c * std::stod(l)));
    axes.emplace_back(a.name(), labels);
  }
  return {ProductSpace(axes), d.cells};
}

void check_scaled(const EstimateResult& a, const EstimateResult& b, double c) {
  CHECK(b.estimate == doctest::Approx(c * a.estimate).epsilon(1e-9));
  CHECK(b.se == doctest::Approx(c * a.se).epsilon(1e-9));
}

}  // namespace

TEST_CASE("estimate results") {
  auto m = gen_negative_control({}, 4);
  auto data = sample(m.law, 2000, 5);
  auto e = nc_estimators(data);
  for (const auto* r : {&e.plug_in.mu, &e.one_step.mu, &e.one_step.mu1, &e.plug_in.mu0}) {
    CHECK(r->influence.size() == 2000);
    double mean = 0.0, ss = 0.0;
    for (double v : r->influence) mean += v;
    mean /= 2000.0;
    for (double v : r->influence) ss += (v - mean) * (v - mean);
    CHECK(std::abs(mean) < 3 * r->se);
    CHECK(r->se == doctest::Approx(std::sqrt(ss / 1999.0) / std::sqrt(2000.0)).epsilon(1e-12));
  }
  auto j = to_json(e.one_step.mu);
  CHECK(j["method"] == "OneStep");
  CHECK(j["estimand"] == "mu");
  CHECK(method_from_name("MinDist") == Method::MinDist);
  CHECK_THROWS_AS(method_from_name("Bogus"), LabError);
}

TEST_CASE("unconfounded ATE") {
  // Randomised, single X cell: the plug-in is the difference of arm means.
  UnconfoundedSpec s{outcome_axis(4), indexed_axis(ax::T, 2), indexed_axis(ax::X, 1), {1.0}, {{0.5, 0.5}},
                     {{{0.1, 0.2, 0.3, 0.4}}, {{0.4, 0.3, 0.2, 0.1}}}};
  auto law = gen_unconfounded(s, 1).observable;
  auto data = sample(law, 3000, 2);
  double s1 = 0, n1 = 0, s0 = 0, n0 = 0;
  auto kt = data.space.axis_position(ax::T), ky = data.space.axis_position(ax::Y);
  auto y = data.space.axis(ky).numeric_values();
  for (auto c : data.cells) {
    double v = y[data.space.coordinate(c, ky)];
    if (data.space.axis(kt).label(data.space.coordinate(c, kt)) == "1") {
      s1 += v;
      n1 += 1;
    } else {
      s0 += v;
      n0 += 1;
    }
  }
  auto r = estimate_ate_uc(data);
  CHECK(std::abs(r.estimate - (s1 / n1 - s0 / n0)) < 1e-12);
  auto sm = estimate_ate_uc_smoothed(data);
  CHECK(std::abs(sm.estimate - r.estimate) < 5e-3);
  CHECK(sm.method == Method::Smoothed);

  // A treatment arm missing from an X cell is an overlap violation.
  Dataset bad{data.space, {}};
  for (auto c : data.cells)
    if (data.space.axis(kt).label(data.space.coordinate(c, kt)) == "1") bad.cells.push_back(c);
  CHECK_THROWS_AS(estimate_ate_uc(bad), LabError);
}

TEST_CASE("long-term estimators") {
  LongTermConfig cfg;  // |S1| = 3 > |S3| = 2
  auto m = gen_long_term(cfg, 8);
  auto data = sample(m.law, 5000, 1);
  auto p = plug_in_lt(data);
  auto o = one_step_lt(data);
  auto d = mind_lt(data);
  for (const auto* r : {&p.mu, &o.mu, &d.mu}) CHECK(std::abs(r->estimate - m.mu) < 4.5 * r->se);
  CHECK(std::abs(o.mu.estimate - (o.mu1.estimate - o.mu0.estimate)) < 1e-14);
  CHECK_FALSE(p.mu.flags.empty());  // sample moments are never exactly solvable when over identified

  // Determinism.
  auto o2 = one_step_lt(data);
  CHECK(o2.mu.estimate == o.mu.estimate);
  CHECK(o2.mu.influence == o.mu.influence);

  // Scale equivariance.
  auto scaled = scale_outcome(data, 3.0);
  check_scaled(p.mu, plug_in_lt(scaled).mu, 3.0);
  check_scaled(o.mu, one_step_lt(scaled).mu, 3.0);
  check_scaled(d.mu1, mind_lt(scaled).mu1, 3.0);

  // Exact law: the plug-in recovers the truth and the one-step correction vanishes.
  auto fit = lt_fit(m.law);
  CHECK(fit.mu == doctest::Approx(m.mu).epsilon(1e-10));
  auto r1 = riesz_vstar(m.law, fit.h, 1);
  double corr = 0.0;
  for (std::size_t c = 0; c < m.law.size(); ++c) corr += m.law.mass(c) * r1.eif[c];
  CHECK(std::abs(corr) < 1e-12);

  // Constant weights reproduce the identity-weighted solution.
  auto k = lt_operator(m.law);
  auto wfit = lt_fit(m.law, Eigen::VectorXd::Constant(static_cast<Eigen::Index>(k.target().size()), 2.5));
  CHECK(std::abs(wfit.mu1 - fit.mu1) < 1e-10);

  // An arm missing from the experiment.
  Dataset bad{data.space, {}};
  auto kg = data.space.axis_position(ax::G), kd = data.space.axis_position(ax::D);
  for (auto c : data.cells) {
    bool exp = data.space.axis(kg).label(data.space.coordinate(c, kg)) == "E";
    bool treated = data.space.axis(kd).label(data.space.coordinate(c, kd)) == "1";
    if (!(exp && treated)) bad.cells.push_back(c);
  }
  CHECK_THROWS_AS(plug_in_lt(bad), LabError);
}

TEST_CASE("long-term kernel directions shift the plug-in by their experimental mean") {
  LongTermConfig cfg;
  cfg.s1 = 2;
  cfg.s3 = 3;  // K has a nontrivial kernel
  auto m = gen_long_term(cfg, 2);
  auto k = lt_operator(m.law);
  auto diag = diagnose_identification(k);
  REQUIRE(diag.operator_kernel_dim > 0);
  auto fit = lt_fit(m.law);
  const auto& v = diag.operator_kernel_basis[0];
  CellFunction shifted = fit.h;
  for (std::size_t a = 0; a < v.size(); ++a) shifted.values[a] += v.values[a];
  CHECK(lt_bridge_residual(m.law, shifted) < 1e-10);
  // experimental treated mean of v
  const auto& s = m.law.space();
  auto proj = projection_map(s, k.source());
  auto kg = s.axis_position(ax::G), kd = s.axis_position(ax::D);
  double num = 0, den = 0, base = 0, moved = 0;
  for (std::size_t c = 0; c < m.law.size(); ++c) {
    if (s.axis(kg).label(s.coordinate(c, kg)) != "E" || s.axis(kd).label(s.coordinate(c, kd)) != "1") continue;
    num += m.law.mass(c) * v.values[proj[c]];
    base += m.law.mass(c) * fit.h.values[proj[c]];
    moved += m.law.mass(c) * shifted.values[proj[c]];
    den += m.law.mass(c);
  }
  CHECK((moved - base) / den == doctest::Approx(num / den).epsilon(1e-12));
}

TEST_CASE("negative-control estimators") {
  NegControlConfig cfg;
  cfg.nz = 2;  // square
  auto m = gen_negative_control(cfg, 3);
  auto fit = nc_fit(m.law);
  CHECK(fit.mu == doctest::Approx(m.mu).epsilon(1e-10));
  auto data = sample(m.law, 5000, 3);
  auto e = nc_estimators(data);
  // Just identified on the empirical law as well: the correction is zero.
  CHECK(std::abs(e.one_step.mu.estimate - e.plug_in.mu.estimate) < 1e-9);
  CHECK(std::abs(e.one_step.mu.estimate - m.mu) < 4.5 * e.one_step.mu.se);
  check_scaled(e.one_step.mu, nc_estimators(scale_outcome(data, 2.0)).one_step.mu, 2.0);
}

TEST_CASE("npiv average structural derivative") {
  NpivConfig cfg;
  auto m = gen_npiv(cfg, 4);
  auto data = sample(m.law, 4000, 9);
  auto is = npiv_asd(data, AsdMode::IS);
  auto es = npiv_asd(data, AsdMode::ES);
  CHECK(is.method == Method::IS);
  CHECK(es.method == Method::ES);
  CHECK(std::abs(is.estimate - cfg.beta) < 4.5 * is.se);
  CHECK(std::abs(es.estimate - cfg.beta) < 4.5 * es.se);
  CHECK(es.se < is.se);

  NpivConfig coarse;
  coarse.nt = 3;
  auto mc = gen_npiv(coarse, 1);
  auto dc = sample(mc.law, 500, 1);
  Dataset two{ProductSpace({dc.space.axis(ax::X), dc.space.axis(ax::Z), indexed_axis(ax::T, 2), dc.space.axis(ax::Y)}),
              {0, 1}};
  CHECK_THROWS_AS(npiv_asd(two, AsdMode::IS), LabError);
}
