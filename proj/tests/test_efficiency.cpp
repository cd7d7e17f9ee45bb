#include <cmath>
#include <random>

#include "doctest.h"
#include "localid/efficiency.hpp"
#include "test_support.hpp"

using namespace localid;
using namespace testing_support;

namespace {

double var_of(const JointLaw& law, const std::vector<double>& v) {
  double m = 0.0, s = 0.0;
  for (std::size_t c = 0; c < law.size(); ++c) m += law.mass(c) * v[c];
  for (std::size_t c = 0; c < law.size(); ++c) s += law.mass(c) * (v[c] - m) * (v[c] - m);
  return s;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

NegControlModel nc_model(std::uint64_t seed, std::size_t nz = 3) {
  NegControlConfig cfg;
  cfg.nz = nz;
  return gen_negative_control(cfg, seed);
}

// Closed-form unconfounded bound by direct enumeration.
double uc_bound_enumerated(const JointLaw& law) {
  const auto& s = law.space();
  auto kx = s.axis_position(ax::X), kt = s.axis_position(ax::T), ky = s.axis_position(ax::Y);
  auto y = s.axis(ky).numeric_values();
  std::size_t nx = s.axis(kx).size();
  std::vector<double> px(nx), p1(nx), p0(nx), s1(nx), s0(nx), q1(nx), q0(nx);
  for (std::size_t c = 0; c < law.size(); ++c) {
    auto x = s.coordinate(c, kx);
    double v = y[s.coordinate(c, ky)], m = law.mass(c);
    px[x] += m;
    if (s.axis(kt).label(s.coordinate(c, kt)) == "1") {
      p1[x] += m;
      s1[x] += m * v;
      q1[x] += m * v * v;
    } else {
      p0[x] += m;
      s0[x] += m * v;
      q0[x] += m * v * v;
    }
  }
  double tau = 0.0;
  std::vector<double> tx(nx);
  for (std::size_t x = 0; x < nx; ++x) {
    tx[x] = s1[x] / p1[x] - s0[x] / p0[x];
    tau += px[x] * tx[x];
  }
  double b = 0.0;
  for (std::size_t x = 0; x < nx; ++x) {
    double v1 = q1[x] / p1[x] - std::pow(s1[x] / p1[x], 2), v0 = q0[x] / p0[x] - std::pow(s0[x] / p0[x], 2);
    b += px[x] * (v1 / (p1[x] / px[x]) + v0 / (p0[x] / px[x]) + std::pow(tx[x] - tau, 2));
  }
  return b;
}

}  // namespace

TEST_CASE("unconfounded EIF") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto law = gen_unconfounded(random_unconfounded_spec(3, 2, 4, seed), seed).observable;
    auto eif = uc_ate_eif(law);
    CHECK(std::abs(eif.mean) < 1e-12);
    CHECK(eif.bound == doctest::Approx(uc_bound_enumerated(law)).epsilon(1e-12));
    auto rep = pathwise_derivative_check(law, uc_functional(), eif, 5, seed);
    CHECK(rep.max_error < 1e-6);
  }
  // One X cell with binary T: the ATE is a difference of means.
  UnconfoundedSpec s{outcome_axis(3), indexed_axis(ax::T, 2), indexed_axis(ax::X, 1), {1.0}, {{0.4, 0.6}},
                     {{{0.2, 0.5, 0.3}}, {{0.1, 0.3, 0.6}}}};
  auto law = gen_unconfounded(s, 1).observable;
  CHECK(uc_ate(law) == doctest::Approx((0.3 + 1.2) / 2 - (0.5 + 0.6) / 2).epsilon(1e-12));
}

TEST_CASE("negative-control EIF: mean zero, bound, pathwise") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto m = nc_model(seed, seed % 2 ? 2 : 3);
    auto e = nc_eif(m.law, m.h);
    CHECK(e.mu.mean == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
    CHECK(std::abs(e.mu1.mean) < 1e-10);
    CHECK(std::abs(e.mu0.mean) < 1e-10);
    CHECK(e.mu1.mean == doctest::Approx(0.0).scale(1.0));
    auto sys = nc_system(m.law, m.h, m.mu1, m.mu0, 1.0, -1.0);
    auto sol = influence_function(m.law, sys, Weighting::Efficient);
    CHECK(sol.values.size() == m.law.size());
    CHECK(max_abs_diff(sol.values, e.mu.values) < 1e-12);
    CHECK(fisher_bound(sol, sys) == doctest::Approx(e.mu.bound).epsilon(1e-8));
    CHECK(sol.sigma1 + sol.riesz_term == doctest::Approx(e.mu.bound).epsilon(1e-8));
    // Sigma is block diagonal: the cross moment of rho1 and rho0 is zero cellwise.
    for (std::size_t c = 0; c < m.law.size(); ++c) CHECK(e.parts.rho1[c] * e.parts.rho0[c] == 0.0);
  }
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    auto m = nc_model(seed, 3);
    auto e = nc_eif(m.law, m.h);
    auto sys = nc_system(m.law, m.h, m.mu1, m.mu0, 1.0, -1.0);
    auto dirs = nontangent_directions(m.law, sys);
    CHECK(dirs.size() == 2 * 2);  // nx * (nz - nv) per arm
    for (int which : {1, 0, -1}) {
      const auto& t = which == 1 ? e.mu1 : which == 0 ? e.mu0 : e.mu;
      auto rep = pathwise_derivative_check(m.law, nc_functional(which), t, 4, seed * 7 + 3, dirs);
      CHECK(rep.max_error < 1e-6);
    }
  }
}

TEST_CASE("identity and efficient influence functions") {
  // Just identified: the two coincide.
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto m = nc_model(seed, 2);
    auto sys = nc_system(m.law, m.h, m.mu1, m.mu0, 1.0, -1.0);
    auto es = influence_function(m.law, sys, Weighting::Efficient);
    auto is = influence_function(m.law, sys, Weighting::Identity);
    CHECK(max_abs_diff(es.values, is.values) < 1e-8);
  }
  // Over identified: the efficient one has strictly smaller variance.
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto m = nc_model(seed, 4);
    auto sys = nc_system(m.law, m.h, m.mu1, m.mu0, 1.0, -1.0);
    auto es = influence_function(m.law, sys, Weighting::Efficient);
    auto is = influence_function(m.law, sys, Weighting::Identity);
    CHECK(var_of(m.law, is.values) > var_of(m.law, es.values) * (1.0 + 1e-6));
    // Both are valid influence functions: the difference lies in the nontangent span.
    std::vector<double> diff(m.law.size());
    for (std::size_t c = 0; c < diff.size(); ++c) diff[c] = is.values[c] - es.values[c];
    auto resid = project_out(m.law, diff, nontangent_directions(m.law, sys));
    double top = 0.0;
    for (double v : resid) top = std::max(top, std::abs(v));
    CHECK(top < 1e-9);
  }
}

TEST_CASE("long-term EIF and bound decomposition") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    LongTermConfig cfg;
    cfg.s3 = seed % 2 ? 3 : 2;
    cfg.s1 = 3;
    auto m = gen_long_term(cfg, seed);
    auto e = lt_eif(m.law, m.h);
    CHECK(std::abs(e.mu1.mean) < 1e-10);
    CHECK(std::abs(e.mu.mean) < 1e-10);
    CHECK(e.parts.mu1 == doctest::Approx(m.mu1).epsilon(1e-10));
    CHECK(e.parts.mu0 == doctest::Approx(m.mu0).epsilon(1e-10));
    auto sys = lt_system(m.law, m.h, m.mu1, m.mu0, 1.0, 0.0);
    auto sol = influence_function(m.law, sys, Weighting::Efficient);
    CHECK(fisher_bound(sol, sys) == doctest::Approx(e.mu1.bound).epsilon(1e-8));
    auto terms = lt_bound_decomposition(e.parts, m.law, m.h);
    // The decomposition is stated for mu1 - mu0 and each arm separately; check the arm.
    double t1 = e.parts.sigma1_mu1 / (e.parts.p_e1 * e.parts.p_e1);
    CHECK(t1 + sol.riesz_term == doctest::Approx(e.mu1.bound).epsilon(1e-8));
    CHECK(terms.term1 + terms.term2 == doctest::Approx(e.mu.bound).epsilon(1e-8));
  }
}

TEST_CASE("long-term pathwise derivatives") {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    LongTermConfig cfg;
    cfg.s3 = seed % 2 ? 3 : 2;
    auto m = gen_long_term(cfg, seed);
    auto e = lt_eif(m.law, m.h);
    auto dirs = nontangent_directions(m.law, lt_system(m.law, m.h, m.mu1, m.mu0, 1.0, 0.0));
    for (int which : {1, 0, -1}) {
      const auto& t = which == 1 ? e.mu1 : which == 0 ? e.mu0 : e.mu;
      auto rep = pathwise_derivative_check(m.law, lt_functional(which), t, 4, seed + 11, dirs);
      CHECK(rep.max_error < 1e-6);
    }
  }
}

TEST_CASE("long-term reduction under a bijective short-term design") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    LongTermConfig cfg;
    cfg.bijective = true;
    cfg.s1 = 3;
    cfg.s3 = 3;
    auto m = gen_long_term(cfg, seed);
    auto r = reduction_check_lt(m.law, m.h);
    CHECK(r.q_equation_residual < 1e-10);
    CHECK(r.discrepancy < 1e-8 * std::max(1.0, r.term2));
  }
  LongTermConfig over;
  over.s1 = 4;
  over.s3 = 2;
  auto m = gen_long_term(over, 3);
  CHECK_THROWS_AS(reduction_check_lt(m.law, m.h), LabError);
}

TEST_CASE("Riesz representer of the long-term target") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    LongTermConfig cfg;
    cfg.s3 = 3;
    auto m = gen_long_term(cfg, seed);
    auto e = lt_eif(m.law, m.h);
    for (int arm : {1, 0}) {
      auto r = riesz_vstar(m.law, m.h, arm);
      CHECK(r.foc_residual < 1e-8);
      const auto& t = arm ? e.mu1 : e.mu0;
      CHECK(max_abs_diff(r.eif, t.values) < 1e-8);
      // 1 / min objective is the bound.
      CHECK(1.0 / r.objective == doctest::Approx(t.bound).epsilon(1e-8));
      Eigen::VectorXd rs = Eigen::Map<const Eigen::VectorXd>(r.r_star.values.data(),
                                                             static_cast<Eigen::Index>(r.r_star.size()));
      CHECK(riesz_objective(m.law, m.h, rs, arm) == doctest::Approx(r.objective).epsilon(1e-12));
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> z;
      for (int i = 0; i < 100; ++i) {
        Eigen::VectorXd d(rs.size());
        for (auto& x : d) x = 1e-3 * z(rng);
        CHECK(riesz_objective(m.law, m.h, Eigen::VectorXd(rs + d), arm) >= r.objective - 1e-14);
      }
    }
  }
  // A bridge that is constant within the experimental arm has zero Sigma1.
  LongTermConfig cfg;
  auto m = gen_long_term(cfg, 2);
  auto flat = m.law;
  CellFunction h = CellFunction::constant(m.h.space, 0.5);
  CHECK_THROWS_AS(riesz_vstar(flat, h, 1), LabError);
}

TEST_CASE("npiv average derivative") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    NpivConfig cfg;
    cfg.linear = seed % 2 == 0;
    auto m = gen_npiv(cfg, seed);
    auto es = npiv_eif(m.law, m.h, Weighting::Efficient);
    auto is = npiv_eif(m.law, m.h, Weighting::Identity);
    CHECK(std::abs(es.mean) < 1e-10);
    CHECK(std::abs(is.mean) < 1e-10);
    CHECK(is.bound > es.bound * (1.0 + 1e-8));
    auto sys = npiv_system(m.law, m.h, m.mu);
    auto sol = influence_function(m.law, sys, Weighting::Efficient);
    CHECK(fisher_bound(sol, sys) == doctest::Approx(es.bound).epsilon(1e-8));
  }
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    auto m = gen_npiv({}, seed);
    auto es = npiv_eif(m.law, m.h, Weighting::Efficient);
    auto dirs = nontangent_directions(m.law, npiv_system(m.law, m.h, m.mu));
    auto rep = pathwise_derivative_check(m.law, npiv_functional(), es, 4, seed, dirs);
    CHECK(rep.max_error < 1e-6);
  }
  NpivConfig just;
  just.nz = 3;
  auto m = gen_npiv(just, 5);
  auto es = npiv_eif(m.law, m.h, Weighting::Efficient);
  auto is = npiv_eif(m.law, m.h, Weighting::Identity);
  CHECK(max_abs_diff(es.values, is.values) < 1e-8);
}

TEST_CASE("finite-difference error shrinks quadratically") {
  auto m = nc_model(3, 3);
  auto e = nc_eif(m.law, m.h);
  auto dirs = nontangent_directions(m.law, nc_system(m.law, m.h, m.mu1, m.mu0, 1.0, -1.0));
  auto big = pathwise_derivative_check(m.law, nc_functional(-1), e.mu, 3, 9, dirs, 4e-2);
  auto small = pathwise_derivative_check(m.law, nc_functional(-1), e.mu, 3, 9, dirs, 2e-2);
  for (std::size_t i = 0; i < 3; ++i) {
    double ratio = big.errors[i] / small.errors[i];
    CHECK(ratio > 3.5);
    CHECK(ratio < 4.5);
  }
}

TEST_CASE("the score along the EIF recovers the bound") {
  auto m = nc_model(6, 3);
  auto e = nc_eif(m.law, m.h);
  double top = 0.0;
  for (std::size_t c = 0; c < m.law.size(); ++c) top = std::max(top, std::abs(e.mu.values[c]));
  std::vector<double> g(e.mu.values);
  for (auto& x : g) x /= top;
  ScoreFunction score(m.law, g);
  auto fn = nc_functional(-1);
  double theta = 1e-4;
  double d = (fn.eval(perturb(m.law, score, theta)) - fn.eval(perturb(m.law, score, -theta))) / (2 * theta);
  CHECK(d * top == doctest::Approx(e.mu.bound).epsilon(1e-6));
}
