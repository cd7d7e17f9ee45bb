#include "localid/estimators.hpp"

#include <cmath>

namespace localid {

namespace {

double mean_under(const JointLaw& law, const std::vector<double>& v) {
  double m = 0.0;
  for (std::size_t c = 0; c < law.size(); ++c) m += law.mass(c) * v[c];
  return m;
}

std::vector<std::string> fit_flags(bool solvable, double residual) {
  if (solvable) return {};
  return {"bridge least-squares residual " + format_number(residual) + " (BridgeUnsolvable, estimate kept)"};
}

void require_arm(const JointLaw& law, const std::string& axis, const std::string& what) {
  const auto& s = law.space();
  auto k = s.axis_position(axis);
  for (const auto* lab : {"0", "1"}) {
    auto idx = s.axis(k).index_of(lab);
    double m = 0.0;
    for (std::size_t c = 0; c < law.size(); ++c)
      if (s.coordinate(c, k) == idx) m += law.mass(c);
    if (!(m > 0.0)) fail(ErrorCode::EmptyArm, what + " has no records with " + axis + "=" + lab);
  }
}

ArmEstimates arm_results(const Dataset& data, Method m, double mu1, double mu0, const std::vector<double>& if1,
                         const std::vector<double>& if0, const std::vector<std::string>& flags) {
  std::vector<double> dif(if1.size());
  for (std::size_t c = 0; c < dif.size(); ++c) dif[c] = if1[c] - if0[c];
  return {make_estimate(data, "mu1", m, mu1, if1, flags), make_estimate(data, "mu0", m, mu0, if0, flags),
          make_estimate(data, "mu", m, mu1 - mu0, dif, flags)};
}

}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::PlugIn: return "PlugIn";
    case Method::OneStep: return "OneStep";
    case Method::MinDist: return "MinDist";
    case Method::IS: return "IS";
    case Method::ES: return "ES";
    case Method::Smoothed: return "Smoothed";
  }
  return "?";
}

Method method_from_name(const std::string& s) {
  for (auto m : {Method::PlugIn, Method::OneStep, Method::MinDist, Method::IS, Method::ES, Method::Smoothed})
    if (method_name(m) == s) return m;
  fail(ErrorCode::ConfigInvalid, "unknown method '" + s + "'");
}

EstimateResult make_estimate(const Dataset& data, std::string estimand, Method m, double estimate,
                             const std::vector<double>& per_cell, std::vector<std::string> flags) {
  if (per_cell.size() != data.space.size()) fail(ErrorCode::InvalidSizes, "influence table does not match the data");
  if (data.cells.empty()) fail(ErrorCode::EmptyDataset, "dataset has no records");
  EstimateResult r;
  r.estimand = std::move(estimand);
  r.method = m;
  r.estimate = estimate;
  r.n = data.size();
  r.flags = std::move(flags);
  r.influence.resize(r.n);
  double mean = 0.0;
  for (std::size_t i = 0; i < r.n; ++i) {
    r.influence[i] = per_cell[data.cells[i]];
    mean += r.influence[i];
  }
  mean /= static_cast<double>(r.n);
  double ss = 0.0;
  for (auto& v : r.influence) {
    v -= mean;
    ss += v * v;
  }
  double sd = r.n > 1 ? std::sqrt(ss / static_cast<double>(r.n - 1)) : 0.0;
  r.se = sd / std::sqrt(static_cast<double>(r.n));
  return r;
}

// ---------------------------------------------------------------------------

EstimateResult estimate_ate_uc(const Dataset& data) {
  auto law = empirical_law(data);
  auto eif = uc_ate_eif(law);
  return make_estimate(data, "ate", Method::PlugIn, uc_ate(law), eif.values);
}

EstimateResult estimate_ate_uc_smoothed(const Dataset& data, double pseudo) {
  auto law = empirical_law(data);
  const double n = static_cast<double>(data.size());
  std::vector<double> w(law.size());
  for (std::size_t c = 0; c < law.size(); ++c) w[c] = n * law.mass(c) + pseudo;
  auto smooth = JointLaw::normalized(law.space(), std::move(w));
  auto eif = uc_ate_eif(smooth);
  double est = uc_ate(smooth) + mean_under(law, eif.values);
  return make_estimate(data, "ate", Method::Smoothed, est, eif.values);
}

// ---------------------------------------------------------------------------
// Long term

ArmEstimates plug_in_lt(const Dataset& data, double rel_tol) {
  auto law = empirical_law(data);
  auto fit = lt_fit(law, {}, rel_tol);
  auto i1 = influence_function(law, lt_system(law, fit.h, fit.mu1, fit.mu0, 1.0, 0.0), Weighting::Identity, rel_tol);
  auto i0 = influence_function(law, lt_system(law, fit.h, fit.mu1, fit.mu0, 0.0, 1.0), Weighting::Identity, rel_tol);
  return arm_results(data, Method::PlugIn, fit.mu1, fit.mu0, i1.values, i0.values,
                     fit_flags(fit.solvable, fit.residual));
}

ArmEstimates one_step_lt(const Dataset& data, double rel_tol) {
  auto law = empirical_law(data);
  auto fit = lt_fit(law, {}, rel_tol);
  auto r1 = riesz_vstar(law, fit.h, 1, rel_tol);
  auto r0 = riesz_vstar(law, fit.h, 0, rel_tol);
  double mu1 = fit.mu1 + mean_under(law, r1.eif);
  double mu0 = fit.mu0 + mean_under(law, r0.eif);
  return arm_results(data, Method::OneStep, mu1, mu0, r1.eif, r0.eif, fit_flags(fit.solvable, fit.residual));
}

ArmEstimates mind_lt(const Dataset& data, double rel_tol) {
  auto law = empirical_law(data);
  auto first = lt_fit(law, {}, rel_tol);
  auto k = lt_operator(law);
  // Sigma2 from first-stage residuals, by cell means on (D,S1,S2).
  const auto& s = law.space();
  auto kg = s.axis_position(ax::G), ky = s.axis_position(ax::Y);
  auto obs = s.axis(kg).index_of("O");
  auto y = s.axis(ky).numeric_values(0.0);
  auto proj = projection_map(s, k.source());
  std::vector<double> r2(law.size());
  for (std::size_t c = 0; c < law.size(); ++c) {
    double o = s.coordinate(c, kg) == obs ? 1.0 : 0.0;
    double r = o * (y[s.coordinate(c, ky)] - first.h.values[proj[c]]);
    r2[c] = r * r;
  }
  auto sigma = cond_expectation(law, r2, k.target().names());
  std::vector<std::string> flags;
  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(sigma.size()));
  for (std::size_t c = 0; c < sigma.size(); ++c) {
    if (!k.target_active(c)) continue;
    double v = sigma.values[c];
    if (!(v > 1e-12)) {
      v += 1e-8;
      flags.push_back("SingularWeight: ridge 1e-8 added to Sigma2 at target cell " + std::to_string(c));
    }
    w[static_cast<Eigen::Index>(c)] = 1.0 / v;
  }
  auto fit = lt_fit(law, w, rel_tol);
  for (auto& f : fit_flags(fit.solvable, fit.residual)) flags.push_back(f);
  auto e1 = influence_function(law, lt_system(law, fit.h, fit.mu1, fit.mu0, 1.0, 0.0), Weighting::Efficient, rel_tol);
  auto e0 = influence_function(law, lt_system(law, fit.h, fit.mu1, fit.mu0, 0.0, 1.0), Weighting::Efficient, rel_tol);
  return arm_results(data, Method::MinDist, fit.mu1, fit.mu0, e1.values, e0.values, flags);
}

// ---------------------------------------------------------------------------
// Negative control

NcEstimates nc_estimators(const Dataset& data, double rel_tol) {
  auto law = empirical_law(data);
  require_arm(law, ax::D, "dataset");
  auto fit = nc_fit(law, {}, {}, rel_tol);
  auto flags = fit_flags(fit.solvable, fit.residual);
  auto run = [&](Weighting w, double c1, double c0) {
    return influence_function(law, nc_system(law, fit.h, fit.mu1, fit.mu0, c1, c0), w, rel_tol).values;
  };
  NcEstimates out;
  out.plug_in = arm_results(data, Method::PlugIn, fit.mu1, fit.mu0, run(Weighting::Identity, 1.0, 0.0),
                            run(Weighting::Identity, 0.0, 1.0), flags);
  auto e1 = run(Weighting::Efficient, 1.0, 0.0);
  auto e0 = run(Weighting::Efficient, 0.0, 1.0);
  out.one_step = arm_results(data, Method::OneStep, fit.mu1 + mean_under(law, e1), fit.mu0 + mean_under(law, e0), e1,
                             e0, flags);
  return out;
}

// ---------------------------------------------------------------------------
// NPIV

EstimateResult npiv_asd(const Dataset& data, AsdMode mode, double rel_tol) {
  if (data.space.axis(ax::T).size() < 3) fail(ErrorCode::GridTooCoarse, "treatment grid needs at least three points");
  auto law = empirical_law(data);
  auto fit = npiv_fit(law, {}, rel_tol);
  auto w = mode == AsdMode::IS ? Weighting::Identity : Weighting::Efficient;
  auto sol = influence_function(law, npiv_system(law, fit.h, fit.mu), w, rel_tol);
  double est = fit.mu + mean_under(law, sol.values);
  auto flags = fit_flags(fit.solvable, fit.residual);
  for (auto& f : sol.flags) flags.push_back(f);
  return make_estimate(data, "asd", mode == AsdMode::IS ? Method::IS : Method::ES, est, sol.values, flags);
}

nlohmann::json to_json(const EstimateResult& r, bool with_influence) {
  nlohmann::json j{{"estimand", r.estimand}, {"method", method_name(r.method)}, {"estimate", r.estimate},
                   {"se", r.se},             {"n", r.n},                       {"flags", r.flags}};
  if (with_influence) j["influence"] = r.influence;
  return j;
}

}  // namespace localid
