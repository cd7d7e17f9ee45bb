// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   acceptance <path-to-localid> [--only k] [--threads t]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include <unistd.h>

#include "json.hpp"
#include "localid/efficiency.hpp"
#include "localid/inference.hpp"
#include "localid/text_util.hpp"

using namespace localid;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

JointLaw random_law(const ProductSpace& space, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> e(1.0);
  std::vector<double> w(space.size());
  for (auto& x : w) x = 0.05 + e(rng);
  return JointLaw::normalized(space, std::move(w));
}

// Rank by Gaussian elimination with full pivoting, independent of the SVD path.
std::size_t gauss_rank(Eigen::MatrixXd m, double tol = 1e-9) {
  std::size_t rank = 0;
  Eigen::Index rows = m.rows(), cols = m.cols();
  for (Eigen::Index step = 0; step < std::min(rows, cols); ++step) {
    Eigen::Index pr = -1, pc = -1;
    double best = tol;
    for (Eigen::Index r = step; r < rows; ++r)
      for (Eigen::Index c = step; c < cols; ++c)
        if (std::abs(m(r, c)) > best) {
          best = std::abs(m(r, c));
          pr = r;
          pc = c;
        }
    if (pr < 0) break;
    m.row(step).swap(m.row(pr));
    m.col(step).swap(m.col(pc));
    for (Eigen::Index r = step + 1; r < rows; ++r) m.row(r) -= (m(r, step) / m(step, step)) * m.row(step);
    ++rank;
  }
  return rank;
}

double max_mass_diff(const JointLaw& a, const JointLaw& b) {
  double m = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) m = std::max(m, std::abs(a.mass(c) - b.mass(c)));
  return m;
}

// ---------------------------------------------------------------------------

Outcome c1_mean_zero() {
  double worst_nc = 0.0, worst_lt = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    NegControlConfig nc;
    nc.nz = 2 + seed % 3;
    auto m = gen_negative_control(nc, seed);
    auto e = nc_eif(m.law, m.h);
    for (const auto* t : {&e.mu1, &e.mu0, &e.mu}) worst_nc = std::max(worst_nc, std::abs(t->mean));
    LongTermConfig lt;
    lt.s3 = seed % 2 ? 3 : 2;
    auto l = gen_long_term(lt, seed);
    auto f = lt_eif(l.law, l.h);
    for (const auto* t : {&f.mu1, &f.mu0, &f.mu}) worst_lt = std::max(worst_lt, std::abs(t->mean));
  }
  return {worst_nc < 1e-10 && worst_lt < 1e-10,
          "20 laws per model, max |E[EIF]| nc " + num(worst_nc) + ", lt " + num(worst_lt) + " (tol 1e-10)"};
}

Outcome c2_pathwise() {
  const std::size_t laws = 5, per = 4;
  std::map<std::string, double> worst;
  std::map<std::string, std::size_t> count;
  auto add = [&](const std::string& k, const PathwiseReport& r) {
    worst[k] = std::max(worst[k], r.max_error);
    count[k] += r.errors.size();
  };
  for (std::uint64_t seed = 1; seed <= laws; ++seed) {
    auto m = gen_negative_control({}, seed);
    auto e = nc_eif(m.law, m.h);
    auto nd = nontangent_directions(m.law, nc_system(m.law, m.h, m.mu1, m.mu0, 1.0, -1.0));
    add("nc mu1", pathwise_derivative_check(m.law, nc_functional(1), e.mu1, per, seed, nd));
    add("nc mu0", pathwise_derivative_check(m.law, nc_functional(0), e.mu0, per, seed + 50, nd));
    add("nc mu", pathwise_derivative_check(m.law, nc_functional(-1), e.mu, per, seed + 100, nd));

    LongTermConfig lc;
    lc.s3 = seed % 2 ? 3 : 2;
    auto l = gen_long_term(lc, seed);
    auto f = lt_eif(l.law, l.h);
    auto ld = nontangent_directions(l.law, lt_system(l.law, l.h, l.mu1, l.mu0, 1.0, 0.0));
    add("lt mu1", pathwise_derivative_check(l.law, lt_functional(1), f.mu1, per, seed, ld));
    add("lt mu0", pathwise_derivative_check(l.law, lt_functional(0), f.mu0, per, seed + 50, ld));
    add("lt mu", pathwise_derivative_check(l.law, lt_functional(-1), f.mu, per, seed + 100, ld));

    auto p = gen_npiv({}, seed);
    auto pe = npiv_eif(p.law, p.h, Weighting::Efficient);
    auto pd = nontangent_directions(p.law, npiv_system(p.law, p.h, p.mu));
    add("npiv asd", pathwise_derivative_check(p.law, npiv_functional(), pe, per, seed, pd));

    auto u = gen_unconfounded(random_unconfounded_spec(3, 2, 4, seed), seed).observable;
    add("uc ate", pathwise_derivative_check(u, uc_functional(), uc_ate_eif(u), per, seed));
  }
  bool ok = true;
  std::string d;
  for (const auto& [k, v] : worst) {
    ok = ok && v < 1e-6 && count[k] >= 20;
    d += k + " " + num(v) + " (" + std::to_string(count[k]) + " scores), ";
  }
  return {ok, d + "tol 1e-6 at theta 1e-4"};
}

Outcome c3_decomposition() {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    LongTermConfig cfg;
    cfg.s1 = 3 + seed % 2;
    cfg.s3 = 2 + seed % 3 / 2;
    auto m = gen_long_term(cfg, seed);
    auto e = lt_eif(m.law, m.h);
    auto t = lt_bound_decomposition(e.parts, m.law, m.h);
    worst = std::max(worst, std::abs(t.term1 + t.term2 - e.mu.bound));
  }
  return {worst < 1e-10, "20 long-term laws, max |term1 + term2 - E[EIF^2]| " + num(worst) + " (tol 1e-10)"};
}

Outcome c4_reduction() {
  double disc = 0.0, qres = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    LongTermConfig cfg;
    cfg.bijective = true;
    cfg.s1 = 2 + seed % 3;
    cfg.s3 = cfg.s1;
    auto m = gen_long_term(cfg, seed);
    auto r = reduction_check_lt(m.law, m.h);
    disc = std::max(disc, r.discrepancy);
    qres = std::max(qres, r.q_equation_residual);
  }
  return {disc < 1e-10 && qres < 1e-10,
          "10 bijective laws, max discrepancy " + num(disc) + ", max q residual " + num(qres) + " (tol 1e-10)"};
}

Outcome c5_verdicts() {
  struct Case {
    std::string name;
    CondExpOperator k;
    Verdict expect;
    std::size_t expect_kernel;
  };
  std::vector<Case> cases;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto sq = gen_negative_control({2, 2, 2, 5}, seed);
    cases.push_back({"nc |Z|=|V|", nc_operator(sq.law, 1), Verdict::JustIdentified, 0});
    auto ov = gen_negative_control({2, 4, 2, 5}, seed);
    cases.push_back({"nc |Z|>|V|", nc_operator(ov.law, 0), Verdict::OverIdentified, 2 * (4 - 2)});
    auto lj = gen_long_term({3, 2, 3, 5, true}, seed);
    cases.push_back({"lt |S1|=|S3|", lt_operator(lj.law), Verdict::JustIdentified, 0});
    auto lo = gen_long_term({4, 2, 2, 5}, seed);
    cases.push_back({"lt |S1|>|S3|", lt_operator(lo.law), Verdict::OverIdentified, 2 * 2 * (4 - 2)});
    auto ps = gen_npiv({3, 3, 2, 5}, seed);
    cases.push_back({"npiv |Z|=|T|", npiv_operator(ps.law), Verdict::JustIdentified, 0});
  }
  bool ok = true;
  std::string bad;
  for (const auto& c : cases) {
    auto d = diagnose_identification(c.k);
    auto rank = gauss_rank(c.k.orthonormal_matrix());
    std::size_t brute_kernel = c.k.active_target_count() - rank;
    bool good = d.verdict == c.expect && d.rank == rank && d.adjoint_kernel_dim == brute_kernel &&
                brute_kernel == c.expect_kernel;
    if (!good) bad += " " + c.name;
    ok = ok && good;
  }
  return {ok, std::to_string(cases.size()) + " constructed operators, verdict and ker K* dimension vs elimination rank" +
                  (ok ? "" : ", mismatches:" + bad)};
}

Outcome c6_uc_construction() {
  double ci = 0.0, push = 0.0;
  std::size_t flagged = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ProductSpace obs({indexed_axis(ax::X, 2 + seed % 2), indexed_axis(ax::T, 2), outcome_axis(3 + seed % 3)});
    auto law = random_law(obs, seed);
    auto st = structural_from_observable_uc(law);
    flagged += st.flags.size();
    ci = std::max(ci, ci_discrepancy(st.law, {"Y(0)", "Y(1)"}, {ax::T}, {ax::X}));
    push = std::max(push, max_mass_diff(observe_unconfounded(st.law, obs), law));
  }
  return {ci < 1e-12 && push < 1e-12 && flagged == 0,
          "20 observable laws, unconfoundedness " + num(ci) + ", pushforward " + num(push) + " (tol 1e-12)"};
}

Outcome c7_nc_lt_construction() {
  double nc = 0.0, lt = 0.0;
  std::size_t deficiency = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto m = gen_negative_control({2, 2 + seed % 2, 2, 4}, seed);
    auto c = structural_from_observable_nc(m.law, m.h);
    for (double v : {c.pushforward_error, c.latent_ignorability, c.conditional_match, c.bridge_residual})
      nc = std::max(nc, v);
    deficiency += c.completeness_deficiency;
    auto l = gen_long_term({3, 2, 2 + seed % 2, 4}, seed);
    auto d = structural_from_observable_lt(l.law, l.h);
    for (double v : {d.pushforward_error, d.observational_unconfounded, d.experiment_randomized, d.external_validity,
                     d.sequential_outcomes, d.latent_bridge})
      lt = std::max(lt, v);
    deficiency += d.completeness_deficiency;
  }
  return {nc < 1e-12 && lt < 1e-12 && deficiency == 0,
          "20 laws per model, worst assumption check nc " + num(nc) + ", lt " + num(lt) +
              ", completeness deficiency " + std::to_string(deficiency) + " (tol 1e-12)"};
}

ModelSpec lt_over_spec() {
  ModelSpec s;
  s.model = "lt";
  s.dgp_seed = 5;
  s.lt.s1 = 3;
  s.lt.s2 = 1;
  s.lt.s3 = 2;
  return s;
}

ModelSpec nc_spec() {
  ModelSpec s;
  s.model = "nc";
  return s;
}

Outcome c8_efficiency(std::size_t threads) {
  bool ok = true;
  std::string d;
  for (const auto& [name, spec] : {std::pair{"lt", lt_over_spec()}, std::pair{"nc", nc_spec()}}) {
    auto run = monte_carlo(spec, 2000, 1000, 2024, threads);
    double ratio = run.summary.methods[1].bound_ratio;
    ok = ok && ratio >= 0.9 && ratio <= 1.1 && run.summary.completed == 1000;
    d += std::string(name) + " n Var(OneStep)/bound " + num(ratio) + ", ";
  }
  return {ok, d + "n 2000, R 1000, band [0.9, 1.1]"};
}

Outcome c9_strict_gain(std::size_t threads) {
  ModelSpec s = nc_spec();
  s.dgp_seed = 10;
  s.nc.ny = 9;
  s.nc.nz = 3;
  s.nc.heteroskedastic = true;
  auto run = monte_carlo(s, 2000, 1000, 77, threads);
  auto g = variance_gap(run, 0, 1);
  return {g.gap > 3.0 * g.se, "heteroskedastic negative control, Var(PlugIn) - Var(OneStep) " + num(g.gap) +
                                  " vs 3 MC SE " + num(3.0 * g.se) + " (R 1000)"};
}

Outcome c10_equivalence(std::size_t threads) {
  ModelSpec uc;
  uc.model = "uc";
  ModelSpec nc = nc_spec();
  nc.nc.nz = 2;
  ModelSpec lt;
  lt.model = "lt";
  lt.lt.bijective = true;
  lt.lt.s1 = 3;
  lt.lt.s3 = 3;
  bool ok = true;
  std::string d;
  for (const auto& [name, spec] : {std::pair{"uc", uc}, std::pair{"nc", nc}, std::pair{"lt", lt}}) {
    std::vector<double> v;
    for (std::size_t n : {500, 2000, 8000}) v.push_back(scaled_difference_variance(monte_carlo(spec, n, 1000, 31, threads), 0, 1));
    // Estimators that agree to rounding are trivially equivalent.
    bool exact = v[0] < 1e-12 && v[1] < 1e-12 && v[2] < 1e-12;
    bool mono = v[0] > v[1] && v[1] > v[2];
    ok = ok && (exact || mono);
    d += std::string(name) + " " + num(v[0]) + ", " + num(v[1]) + ", " + num(v[2]) +
         (exact ? " (equal to rounding)" : mono ? " (decreasing)" : " (not decreasing)") + "; ";
  }
  return {ok, "n Var(difference) at n 500, 2000, 8000: " + d + "R 1000"};
}

Outcome c11_hausman(std::size_t threads) {
  bool ok = true;
  std::string d = "size:";
  ModelSpec npiv;
  npiv.model = "npiv";
  for (const auto& [name, spec] : {std::pair{"lt", lt_over_spec()}, std::pair{"npiv", npiv}, std::pair{"nc", nc_spec()}}) {
    auto run = monte_carlo(spec, 2000, 1000, 99, threads);
    double r = run.summary.hausman_rejection;
    ok = ok && r >= 0.03 && r <= 0.07;
    d += " " + std::string(name) + " " + num(r);
  }
  d += " (band [0.03, 0.07]); degenerate rate:";
  ModelSpec nc2 = nc_spec();
  nc2.nc.nz = 2;
  ModelSpec ltb;
  ltb.model = "lt";
  ltb.lt.bijective = true;
  ltb.lt.s1 = 3;
  ltb.lt.s3 = 3;
  for (const auto& [name, spec] : {std::pair{"nc", nc2}, std::pair{"lt", ltb}}) {
    double r = monte_carlo(spec, 2000, 1000, 99, threads).summary.hausman_degenerate;
    ok = ok && r >= 0.95;
    d += " " + std::string(name) + " " + num(r);
  }
  d += " (>= 0.95); npiv power:";
  auto pc = power_curve(npiv, {0.0, 0.05, 0.1, 0.2}, 2000, 1000, 99, threads);
  for (const auto& p : pc) d += " " + num(p.violation) + "->" + num(p.rejection);
  ok = ok && pc.back().rejection > 0.5;
  return {ok, d + " (> 0.5 at the largest)"};
}

Outcome c12_table(const std::string& cli) {
  auto dir = fs::temp_directory_path() / ("localid_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  auto cfg = dir / "npiv.json";
  write_file_atomic(cfg, nlohmann::json{{"schema_version", 1}, {"model", "npiv"}, {"n", 2000}, {"seed", 11},
                                        {"out", (dir / "out").string()}}
                             .dump());
  std::string cmd = "\"" + cli + "\" estimate --config \"" + cfg.string() + "\" > \"" + (dir / "stdout.txt").string() + "\"";
  int rc = std::system(cmd.c_str());
  Outcome o{false, ""};
  if (rc != 0) {
    o.detail = "localid estimate exited with status " + std::to_string(rc);
  } else {
    auto lines = split_lines(read_file(dir / "out" / "estimate.txt"));
    auto j = nlohmann::json::parse(read_file(dir / "out" / "estimate.json"));
    // Header with methods and Hausman; estimate row; SE row in parentheses with the p-value in brackets.
    bool layout = lines.size() >= 3 && lines[0].find("IS") != std::string::npos &&
                  lines[0].find("ES") != std::string::npos && lines[0].find("Hausman") != std::string::npos &&
                  lines[2].find('(') != std::string::npos && lines[2].find('[') != std::string::npos;
    std::istringstream row(lines.size() > 1 ? lines[1] : ""), se(lines.size() > 2 ? lines[2] : "");
    std::string label, est_is, est_es, stat, se_is, se_es, pval;
    row >> label >> est_is >> est_es >> stat;
    se >> se_is >> se_es >> pval;
    auto close = [](const std::string& text, double v) {
      try {
        return std::abs(std::stod(text) - v) < 5e-5;
      } catch (...) {
        return false;
      }
    };
    const auto& h = j["hausman"];
    bool values = close(est_is, j["estimates"][0]["estimate"].get<double>()) &&
                  close(est_es, j["estimates"][1]["estimate"].get<double>()) &&
                  close(se_is.substr(1), j["estimates"][0]["se"].get<double>()) &&
                  close(stat, h["statistic"].get<double>()) && close(pval.substr(1), h["p_value"].get<double>());
    bool seeded = j["seed"] == 11 && j["config"]["model"] == "npiv";
    o.pass = layout && values && seeded;
    o.detail = "estimate " + est_is + "/" + est_es + ", SE " + se_is + "/" + se_es + ", Hausman " + stat + " " + pval +
               (layout ? "" : " [layout mismatch]") + (values ? "" : " [values differ from estimate.json]");
  }
  fs::remove_all(dir);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <path-to-localid> [--only k] [--threads t]\n";
    return 2;
  }
  std::string cli = argv[1];
  int only = 0;
  std::size_t threads = 0;
  for (int i = 2; i + 1 < argc; i += 2) {
    std::string a = argv[i];
    if (a == "--only") only = std::atoi(argv[i + 1]);
    else if (a == "--threads") threads = static_cast<std::size_t>(std::atoi(argv[i + 1]));
  }

  std::vector<std::function<Outcome()>> criteria{
      c1_mean_zero,
      c2_pathwise,
      c3_decomposition,
      c4_reduction,
      c5_verdicts,
      c6_uc_construction,
      c7_nc_lt_construction,
      [&] { return c8_efficiency(threads); },
      [&] { return c9_strict_gain(threads); },
      [&] { return c10_equivalence(threads); },
      [&] { return c11_hausman(threads); },
      [&] { return c12_table(cli); },
  };
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    if (only && static_cast<std::size_t>(only) != k + 1) continue;
    auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k]();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failed;
    std::cout << "criterion " << k + 1 << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << "  ["
              << num(secs) << " s]" << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << "\n";
  return failed ? 1 : 0;
}
