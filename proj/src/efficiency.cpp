#include "localid/efficiency.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace localid {

namespace {

using Names = std::vector<std::string>;

constexpr double kSingularSigma = 1e-12;

Eigen::VectorXd as_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<double> as_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

CellFunction as_cell_function(const ProductSpace& s, const Eigen::VectorXd& v) { return CellFunction(s, as_std(v)); }

// Per-cell values of a function on `sub`.
std::vector<double> lift_to(const JointLaw& law, const ProductSpace& sub, const Eigen::VectorXd& v) {
  auto proj = projection_map(law.space(), sub);
  std::vector<double> out(law.size());
  for (std::size_t c = 0; c < law.size(); ++c) out[c] = v[static_cast<Eigen::Index>(proj[c])];
  return out;
}

// E[per_cell | target of k] as a vector on the target cells; inactive cells are zero.
Eigen::VectorXd cond_on_target(const JointLaw& law, const CondExpOperator& k, const std::vector<double>& per_cell) {
  auto ce = cond_expectation(law, per_cell, k.target().names());
  if (!(ce.space == k.target())) fail(ErrorCode::LabelMismatch, "conditional expectation landed on the wrong space");
  return as_vector(ce.values);
}

double mean_of(const JointLaw& law, const std::vector<double>& v) {
  double m = 0.0;
  for (std::size_t c = 0; c < law.size(); ++c) m += law.mass(c) * v[c];
  return m;
}

std::vector<double> indicator(const JointLaw& law, const std::string& axis, const std::string& label) {
  const auto& s = law.space();
  auto k = s.axis_position(axis);
  auto lab = s.axis(k).index_of(label);
  std::vector<double> out(law.size());
  for (std::size_t c = 0; c < law.size(); ++c) out[c] = s.coordinate(c, k) == lab ? 1.0 : 0.0;
  return out;
}

std::vector<double> outcome(const JointLaw& law) {
  const auto& s = law.space();
  auto k = s.axis_position(ax::Y);
  auto y = s.axis(k).numeric_values(0.0);
  std::vector<double> out(law.size());
  for (std::size_t c = 0; c < law.size(); ++c) out[c] = y[s.coordinate(c, k)];
  return out;
}

// Generalised inverse of a diagonal weight; near-zero entries (relative to the largest) map to zero.
Eigen::VectorXd sigma_pinv(const CondExpOperator& k, const Eigen::VectorXd& sigma, std::vector<std::string>& flags,
                           const std::string& what) {
  double top = 0.0;
  for (Eigen::Index c = 0; c < sigma.size(); ++c)
    if (k.target_active(static_cast<std::size_t>(c))) top = std::max(top, sigma[c]);
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(sigma.size());
  for (Eigen::Index c = 0; c < sigma.size(); ++c) {
    if (!k.target_active(static_cast<std::size_t>(c))) continue;
    if (sigma[c] > kSingularSigma * top && sigma[c] > 0.0) {
      inv[c] = 1.0 / sigma[c];
    } else {
      flags.push_back(what + ": conditional variance vanishes on target cell " + std::to_string(c) +
                      "; generalised inverse used");
    }
  }
  return inv;
}

std::vector<double> eigenvalues_desc(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  auto v = as_std(es.eigenvalues());
  std::sort(v.rbegin(), v.rend());
  return v;
}

double expect_given(const JointLaw& law, const std::vector<double>& f, const std::vector<double>& event) {
  double num = 0.0, den = 0.0;
  for (std::size_t c = 0; c < law.size(); ++c) {
    num += law.mass(c) * event[c] * f[c];
    den += law.mass(c) * event[c];
  }
  if (!(den > 0.0)) fail(ErrorCode::EmptyArm, "conditioning event has zero mass");
  return num / den;
}

}  // namespace

EifTable make_eif_table(const JointLaw& law, std::string estimand, std::vector<double> values) {
  EifTable t{std::move(estimand), law.space(), std::move(values), 0.0, 0.0};
  for (std::size_t c = 0; c < law.size(); ++c) {
    t.mean += law.mass(c) * t.values[c];
    t.bound += law.mass(c) * t.values[c] * t.values[c];
  }
  return t;
}

// ---------------------------------------------------------------------------
// Generic engine

InfluenceSolution influence_function(const JointLaw& law, const MomentSystem& sys, Weighting w, double rel_tol) {
  if (sys.direct.size() != law.size()) fail(ErrorCode::InvalidSizes, "direct term does not match the law");
  InfluenceSolution out;
  out.values = sys.direct;
  std::vector<double> orth = sys.direct;  // f - sum_d Gamma_d Sigma_d^+ rho_d
  for (std::size_t d = 0; d < sys.components.size(); ++d) {
    const auto& comp = sys.components[d];
    const auto& k = comp.k;
    if (comp.rho.size() != law.size()) fail(ErrorCode::InvalidSizes, "moment residual does not match the law");
    Eigen::VectorXd alpha = comp.alpha;
    for (std::size_t a = 0; a < k.source().size(); ++a)
      if (!k.source_active(a)) alpha[static_cast<Eigen::Index>(a)] = 0.0;

    std::vector<double> rho2(law.size()), frho(law.size());
    for (std::size_t c = 0; c < law.size(); ++c) {
      rho2[c] = comp.rho[c] * comp.rho[c];
      frho[c] = sys.direct[c] * comp.rho[c];
    }
    Eigen::VectorXd sigma = cond_on_target(law, k, rho2);
    Eigen::VectorXd gamma = cond_on_target(law, k, frho);
    Eigen::VectorXd sinv = sigma_pinv(k, sigma, out.flags, "component " + std::to_string(d));
    auto kstar = adjoint(k);

    Eigen::VectorXd psi = alpha + kstar.apply(Eigen::VectorXd(sinv.cwiseProduct(gamma)));
    auto h = gram(k, sinv, "K* Sigma^+ K");
    Eigen::VectorXd lambda = pinv_apply(h, psi, rel_tol);
    Eigen::VectorXd resid = h.apply(lambda) - psi;
    double scale = std::max(1.0, psi.cwiseAbs().maxCoeff());
    if (resid.cwiseAbs().maxCoeff() > 1e-8 * scale)
      out.flags.push_back("component " + std::to_string(d) +
                          ": representer is not in the range of H; the target is not pathwise differentiable");

    Eigen::VectorXd xi;
    if (w == Weighting::Efficient) {
      xi = sinv.cwiseProduct(Eigen::VectorXd(k.apply(lambda) - gamma));
    } else {
      Eigen::VectorXd u = pinv_apply(gram(k), alpha, rel_tol);
      xi = k.apply(u);
    }
    auto xi_cells = lift_to(law, k.target(), xi);
    auto corr_cells = lift_to(law, k.target(), Eigen::VectorXd(sinv.cwiseProduct(gamma)));
    for (std::size_t c = 0; c < law.size(); ++c) {
      out.values[c] += xi_cells[c] * comp.rho[c];
      orth[c] -= corr_cells[c] * comp.rho[c];
    }
    out.riesz_term += k.inner_source(psi, lambda);
    out.spectrum.push_back(eigenvalues_desc(h.matrix));
    out.xi.push_back(std::move(xi));
    out.sigma.push_back(std::move(sigma));
    out.gamma.push_back(std::move(gamma));
    out.psi.push_back(std::move(psi));
    out.lambda.push_back(std::move(lambda));
  }
  for (std::size_t c = 0; c < law.size(); ++c) out.sigma1 += law.mass(c) * orth[c] * orth[c];
  return out;
}

double fisher_bound(const InfluenceSolution& s, const MomentSystem& sys) {
  // Stack the components in orthonormal coordinates u = sqrt(Pa) r.
  Eigen::Index n = 0;
  for (const auto& c : sys.components) n += static_cast<Eigen::Index>(c.k.source().size());
  Eigen::VectorXd p = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n, n);
  Eigen::Index off = 0;
  for (std::size_t d = 0; d < sys.components.size(); ++d) {
    const auto& k = sys.components[d].k;
    auto m = static_cast<Eigen::Index>(k.source().size());
    Eigen::VectorXd root = k.source_mass().cwiseMax(0.0).cwiseSqrt();
    p.segment(off, m) = root.cwiseProduct(s.psi[d]);
    Eigen::VectorXd sinv = Eigen::VectorXd::Zero(s.sigma[d].size());
    double top = s.sigma[d].maxCoeff();
    for (Eigen::Index c = 0; c < sinv.size(); ++c)
      if (k.target_active(static_cast<std::size_t>(c)) && s.sigma[d][c] > kSingularSigma * top && s.sigma[d][c] > 0.0)
        sinv[c] = 1.0 / s.sigma[d][c];
    g.block(off, off, m, m) = gram(k, sinv).matrix;
    off += m;
  }
  if (!(s.sigma1 > 1e-12 * (1.0 + p.squaredNorm()))) {
    // No unconditional noise: the bound is the pure Riesz term.
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(g);
    return p.dot(cod.solve(p));
  }
  Eigen::MatrixXd a = p * p.transpose() / s.sigma1 + g;
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(a);
  Eigen::VectorXd u = cod.solve(Eigen::VectorXd(-p / s.sigma1));
  double lead = 1.0 + p.dot(u);
  double objective = lead * lead / s.sigma1 + u.dot(g * u);
  return 1.0 / objective;
}

std::vector<std::vector<double>> nontangent_directions(const JointLaw& law, const MomentSystem& sys, double rel_tol) {
  std::vector<std::vector<double>> out;
  for (const auto& comp : sys.components) {
    auto diag = diagnose_identification(comp.k, rel_tol);
    for (const auto& phi : diag.adjoint_kernel_basis) {
      auto cells = lift_to(law, comp.k.target(), as_vector(phi.values));
      for (std::size_t c = 0; c < law.size(); ++c) cells[c] *= comp.rho[c];
      out.push_back(std::move(cells));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Least-squares bridge fits

NcFit nc_fit(const JointLaw& law, const std::optional<Eigen::VectorXd>& w1, const std::optional<Eigen::VectorXd>& w0,
             double rel_tol) {
  NcFit fit;
  CellFunction arms[2];
  for (int d = 0; d < 2; ++d) {
    auto k = nc_operator(law, d);
    auto sol = solve_bridge(k, bridge_target(law, k), d ? w1 : w0, rel_tol);
    fit.solvable = fit.solvable && sol.solvable;
    fit.residual = std::max(fit.residual, sol.residual_norm);
    fit.kernel_dim += sol.kernel_dim;
    double mu = k.inner_source(as_vector(sol.h.values), Eigen::VectorXd::Ones(k.source_mass().size()));
    (d ? fit.mu1 : fit.mu0) = mu;
    arms[d] = std::move(sol.h);
  }
  fit.h = nc_join(law.space().subspace(Names{ax::X, ax::D, ax::V}), arms[1], arms[0]);
  fit.mu = fit.mu1 - fit.mu0;
  return fit;
}

LtFit lt_fit(const JointLaw& law, const std::optional<Eigen::VectorXd>& weight, double rel_tol) {
  auto k = lt_operator(law);
  auto sol = solve_bridge(k, bridge_target(law, k), weight, rel_tol);
  LtFit fit;
  fit.h = sol.h;
  fit.solvable = sol.solvable;
  fit.residual = sol.residual_norm;
  fit.kernel_dim = sol.kernel_dim;
  auto hc = lift_to(law, k.source(), as_vector(sol.h.values));
  auto e = indicator(law, ax::G, "E");
  auto d1 = indicator(law, ax::D, "1");
  std::vector<double> e1(law.size()), e0(law.size());
  for (std::size_t c = 0; c < law.size(); ++c) {
    e1[c] = e[c] * d1[c];
    e0[c] = e[c] * (1.0 - d1[c]);
  }
  fit.mu1 = expect_given(law, hc, e1);
  fit.mu0 = expect_given(law, hc, e0);
  fit.mu = fit.mu1 - fit.mu0;
  return fit;
}

NpivFit npiv_fit(const JointLaw& law, const std::optional<Eigen::VectorXd>& weight, double rel_tol) {
  auto k = npiv_operator(law);
  auto sol = solve_bridge(k, bridge_target(law, k), weight, rel_tol);
  NpivFit fit;
  fit.h = sol.h;
  fit.solvable = sol.solvable;
  fit.residual = sol.residual_norm;
  fit.kernel_dim = sol.kernel_dim;
  auto dh = npiv_derivative(sol.h);
  fit.mu = k.inner_source(as_vector(dh.values), Eigen::VectorXd::Ones(k.source_mass().size()));
  return fit;
}

// ---------------------------------------------------------------------------
// Negative control

MomentSystem nc_system(const JointLaw& law, const CellFunction& h, double mu1, double mu0, double c1, double c0) {
  MomentSystem sys;
  auto y = outcome(law);
  auto dind = indicator(law, ax::D, "1");
  std::vector<double> hd[2];
  sys.direct.assign(law.size(), 0.0);
  for (int d = 0; d < 2; ++d) {
    auto arm = nc_arm(h, d);
    hd[d] = lift_to(law, arm.space, as_vector(arm.values));
  }
  for (std::size_t c = 0; c < law.size(); ++c) sys.direct[c] = c1 * (hd[1][c] - mu1) + c0 * (hd[0][c] - mu0);
  for (int d : {1, 0}) {
    auto k = nc_operator(law, d);
    std::vector<double> rho(law.size());
    for (std::size_t c = 0; c < law.size(); ++c) {
      double in = d ? dind[c] : 1.0 - dind[c];
      rho[c] = in * (y[c] - hd[d][c]);
    }
    Eigen::VectorXd alpha = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(k.source().size()), d ? c1 : c0);
    sys.components.push_back({std::move(k), std::move(rho), std::move(alpha)});
  }
  return sys;
}

NegControlEif nc_eif(const JointLaw& law, const CellFunction& h, double rel_tol) {
  double resid = nc_bridge_residual(law, h);
  if (resid > 1e-10) fail(ErrorCode::BridgeViolated, "bridge moment residual " + format_number(resid));
  double mu[2];
  for (int d = 0; d < 2; ++d) {
    auto k = nc_operator(law, d);
    auto arm = nc_arm(h, d);
    mu[d] = k.inner_source(as_vector(arm.values), Eigen::VectorXd::Ones(k.source_mass().size()));
  }
  auto s1 = nc_system(law, h, mu[1], mu[0], 1.0, 0.0);
  auto s0 = nc_system(law, h, mu[1], mu[0], 0.0, 1.0);
  auto sm = nc_system(law, h, mu[1], mu[0], 1.0, -1.0);
  auto e1 = influence_function(law, s1, Weighting::Efficient, rel_tol);
  auto e0 = influence_function(law, s0, Weighting::Efficient, rel_tol);
  auto em = influence_function(law, sm, Weighting::Efficient, rel_tol);

  NegControlEif out{make_eif_table(law, "mu1", e1.values), make_eif_table(law, "mu0", e0.values),
                    make_eif_table(law, "mu", em.values), {}};
  auto& p = out.parts;
  p.rho1 = s1.components[0].rho;
  p.rho0 = s1.components[1].rho;
  const auto& tgt = s1.components[0].k.target();
  p.sigma11 = as_cell_function(tgt, e1.sigma[0]);
  p.sigma00 = as_cell_function(tgt, e1.sigma[1]);
  p.gamma1_1 = as_cell_function(tgt, e1.gamma[0]);
  p.gamma1_0 = as_cell_function(tgt, e1.gamma[1]);
  p.gamma0_1 = as_cell_function(tgt, e0.gamma[0]);
  p.gamma0_0 = as_cell_function(tgt, e0.gamma[1]);
  auto prop = cond_expectation(law, indicator(law, ax::D, "1"), tgt.names());
  p.propensity = prop;
  p.l1 = prop;
  p.l0 = prop;
  for (std::size_t c = 0; c < prop.size(); ++c) {
    p.l1.values[c] = -prop.values[c];
    p.l0.values[c] = -(1.0 - prop.values[c]);
  }
  p.h_spectrum = e1.spectrum;
  const auto& src = s1.components[0].k.source();
  for (std::size_t d = 0; d < 2; ++d) {
    p.psi1.push_back(as_cell_function(src, e1.psi[d]));
    p.psi0.push_back(as_cell_function(src, e0.psi[d]));
  }
  p.sigma1_mu1 = e1.sigma1;
  p.sigma1_mu0 = e0.sigma1;
  p.flags = em.flags;
  return out;
}

// ---------------------------------------------------------------------------
// Long term

MomentSystem lt_system(const JointLaw& law, const CellFunction& h, double mu1, double mu0, double c1, double c0) {
  auto k = lt_operator(law);
  auto hc = lift_to(law, k.source(), as_vector(h.values));
  auto e = indicator(law, ax::G, "E");
  auto o = indicator(law, ax::G, "O");
  auto d1 = indicator(law, ax::D, "1");
  auto y = outcome(law);
  double pe1 = 0.0, pe0 = 0.0;
  for (std::size_t c = 0; c < law.size(); ++c) {
    pe1 += law.mass(c) * e[c] * d1[c];
    pe0 += law.mass(c) * e[c] * (1.0 - d1[c]);
  }
  if (!(pe1 > 0.0) || !(pe0 > 0.0)) fail(ErrorCode::EmptyArm, "experimental arm has zero mass");
  MomentSystem sys;
  sys.direct.resize(law.size());
  std::vector<double> rho(law.size());
  for (std::size_t c = 0; c < law.size(); ++c) {
    sys.direct[c] = e[c] * (c1 * d1[c] * (hc[c] - mu1) / pe1 + c0 * (1.0 - d1[c]) * (hc[c] - mu0) / pe0);
    rho[c] = o[c] * (y[c] - hc[c]);
  }
  auto pi = cond_expectation(law, e, k.source().names());
  const auto& src = k.source();
  auto kd = src.axis_position(ax::D);
  auto one = src.axis(kd).index_of("1");
  Eigen::VectorXd alpha(static_cast<Eigen::Index>(src.size()));
  for (std::size_t a = 0; a < src.size(); ++a) {
    bool treated = src.coordinate(a, kd) == one;
    alpha[static_cast<Eigen::Index>(a)] = pi.values[a] * (treated ? c1 / pe1 : c0 / pe0);
  }
  sys.components.push_back({std::move(k), std::move(rho), std::move(alpha)});
  return sys;
}

LongTermEifParts lt_parts(const JointLaw& law, const CellFunction& h, double rel_tol) {
  LongTermEifParts p;
  auto k = lt_operator(law);
  auto hc = lift_to(law, k.source(), as_vector(h.values));
  auto e = indicator(law, ax::G, "E");
  auto d1 = indicator(law, ax::D, "1");
  for (std::size_t c = 0; c < law.size(); ++c) {
    p.p_ge += law.mass(c) * e[c];
    p.p_e1 += law.mass(c) * e[c] * d1[c];
    p.p_e0 += law.mass(c) * e[c] * (1.0 - d1[c]);
  }
  p.p_go = 1.0 - p.p_ge;
  if (!(p.p_e1 > 0.0) || !(p.p_e0 > 0.0)) fail(ErrorCode::EmptyArm, "experimental arm has zero mass");
  if (!(p.p_go > 0.0)) fail(ErrorCode::MissingOverlap, "observational sample has zero mass");
  double po1 = 0.0;
  for (std::size_t c = 0; c < law.size(); ++c) po1 += law.mass(c) * (1.0 - e[c]) * d1[c];
  p.p_e = p.p_e1 / p.p_ge;
  p.p_o = po1 / p.p_go;
  p.lambda = p.p_ge / p.p_go;
  std::vector<double> ev1(law.size()), ev0(law.size());
  for (std::size_t c = 0; c < law.size(); ++c) {
    ev1[c] = e[c] * d1[c];
    ev0[c] = e[c] * (1.0 - d1[c]);
  }
  p.mu1 = expect_given(law, hc, ev1);
  p.mu0 = expect_given(law, hc, ev0);
  for (std::size_t c = 0; c < law.size(); ++c) {
    p.sigma1_mu1 += law.mass(c) * ev1[c] * (hc[c] - p.mu1) * (hc[c] - p.mu1);
    p.sigma1_mu0 += law.mass(c) * ev0[c] * (hc[c] - p.mu0) * (hc[c] - p.mu0);
  }
  // P(G=O | D=d) / P(G=E | D=d)
  double pd1 = p.p_e1 + po1, pd0 = 1.0 - pd1;
  double ratio1 = (po1 / pd1) / (p.p_e1 / pd1), ratio0 = ((p.p_go - po1) / pd0) / (p.p_e0 / pd0);
  p.dbar1 = (1.0 - p.p_o) / (p.p_o * (1.0 - p.p_o)) * ratio1;
  p.dbar0 = (0.0 - p.p_o) / (p.p_o * (1.0 - p.p_o)) * ratio0;

  auto sys = lt_system(law, h, p.mu1, p.mu0, 1.0, 0.0);
  auto sol = influence_function(law, sys, Weighting::Efficient, rel_tol);
  p.sigma2 = as_cell_function(k.target(), sol.sigma[0]);
  p.m_spectrum = sol.spectrum[0];
  p.flags = sol.flags;
  p.pi = cond_expectation(law, e, k.source().names());
  p.dtilde1 = p.pi;
  p.dtilde0 = p.pi;
  const auto& src = k.source();
  auto kd = src.axis_position(ax::D);
  auto one = src.axis(kd).index_of("1");
  for (std::size_t a = 0; a < src.size(); ++a) {
    bool treated = src.coordinate(a, kd) == one;
    p.dtilde1.values[a] = treated ? p.pi.values[a] : 0.0;
    p.dtilde0.values[a] = treated ? 0.0 : p.pi.values[a];
  }
  return p;
}

LongTermEif lt_eif(const JointLaw& law, const CellFunction& h, double rel_tol) {
  auto k = lt_operator(law);
  for (std::size_t c = 0; c < k.target().size(); ++c)
    if (k.target_active(c) && !((k.matrix().row(static_cast<Eigen::Index>(c)).sum()) > 0.0))
      fail(ErrorCode::MissingOverlap, "P(G=O | S2,S1,D) = 0 on a support cell");
  double resid = lt_bridge_residual(law, h);
  if (resid > 1e-10) fail(ErrorCode::BridgeViolated, "bridge moment residual " + format_number(resid));
  auto parts = lt_parts(law, h, rel_tol);
  auto v1 = influence_function(law, lt_system(law, h, parts.mu1, parts.mu0, 1.0, 0.0), Weighting::Efficient, rel_tol);
  auto v0 = influence_function(law, lt_system(law, h, parts.mu1, parts.mu0, 0.0, 1.0), Weighting::Efficient, rel_tol);
  auto vm = influence_function(law, lt_system(law, h, parts.mu1, parts.mu0, 1.0, -1.0), Weighting::Efficient, rel_tol);
  return {make_eif_table(law, "mu1", v1.values), make_eif_table(law, "mu0", v0.values),
          make_eif_table(law, "mu", vm.values), std::move(parts)};
}

BoundTerms lt_bound_decomposition(const LongTermEifParts& p, const JointLaw& law, const CellFunction& h,
                                  double rel_tol) {
  auto k = lt_operator(law);
  auto hc = lift_to(law, k.source(), as_vector(h.values));
  auto e = indicator(law, ax::G, "E");
  auto d1 = indicator(law, ax::D, "1");
  BoundTerms t;
  for (std::size_t c = 0; c < law.size(); ++c) {
    double d = d1[c];
    double mud = d * p.mu1 + (1.0 - d) * p.mu0;
    double v = (d - p.p_e) / (p.p_e * (1.0 - p.p_e)) * (hc[c] - mud);
    t.term1 += law.mass(c) * e[c] * v * v;
  }
  t.term1 /= p.p_ge * p.p_ge;

  std::vector<std::string> flags;
  Eigen::VectorXd sinv = sigma_pinv(k, as_vector(p.sigma2.values), flags, "Sigma2");
  auto m = gram(k, sinv, "M");
  const auto& src = k.source();
  auto kd = src.axis_position(ax::D);
  auto one = src.axis(kd).index_of("1");
  Eigen::VectorXd v(static_cast<Eigen::Index>(src.size()));
  for (std::size_t a = 0; a < src.size(); ++a)
    v[static_cast<Eigen::Index>(a)] = (src.coordinate(a, kd) == one ? p.dbar1 : p.dbar0) * p.pi.values[a];
  t.term2 = k.inner_source(v, pinv_apply(m, v, rel_tol)) / (p.p_go * p.p_go);
  return t;
}

ReductionCheck reduction_check_lt(const JointLaw& law, const CellFunction& h, double rel_tol) {
  auto k = lt_operator(law);
  auto diag = diagnose_identification(k, rel_tol);
  if (diag.active_sources != diag.active_targets || diag.verdict != Verdict::JustIdentified ||
      diag.operator_kernel_dim != 0)
    fail(ErrorCode::NotBijective, "the bridge operator is not square and invertible");
  auto p = lt_parts(law, h, rel_tol);
  auto terms = lt_bound_decomposition(p, law, h, rel_tol);

  ReductionCheck out;
  out.term2 = terms.term2;
  const auto& tgt = k.target();
  auto e = indicator(law, ax::G, "E");
  auto o = indicator(law, ax::G, "O");
  auto d1 = indicator(law, ax::D, "1");
  auto pe_c = cond_expectation(law, e, tgt.names());
  auto po_c = cond_expectation(law, o, tgt.names());
  // P(G=O | D) / P(G=E | D) per arm.
  double ratio[2];
  for (int d = 0; d < 2; ++d) {
    double num = 0.0, den = 0.0;
    for (std::size_t c = 0; c < law.size(); ++c) {
      double in = d ? d1[c] : 1.0 - d1[c];
      num += law.mass(c) * o[c] * in;
      den += law.mass(c) * e[c] * in;
    }
    ratio[d] = num / den;
  }
  auto kd = tgt.axis_position(ax::D);
  auto one = tgt.axis(kd).index_of("1");
  out.q = CellFunction(tgt, std::vector<double>(tgt.size(), 0.0));
  for (std::size_t c = 0; c < tgt.size(); ++c) {
    if (!k.target_active(c)) continue;
    int d = tgt.coordinate(c, kd) == one ? 1 : 0;
    out.q.values[c] = ratio[d] * pe_c.values[c] / po_c.values[c];
  }
  // E[1{O}(P(E|D)/P(O|D) q + 1) | S2,S1,D] - 1
  auto qc = lift_to(law, tgt, as_vector(out.q.values));
  std::vector<double> lhs(law.size());
  for (std::size_t c = 0; c < law.size(); ++c) {
    int d = d1[c] > 0.5 ? 1 : 0;
    lhs[c] = o[c] * (qc[c] / ratio[d] + 1.0);
  }
  auto eq = cond_expectation(law, lhs, tgt.names());
  for (std::size_t c = 0; c < tgt.size(); ++c)
    if (k.target_active(c)) out.q_equation_residual = std::max(out.q_equation_residual, std::abs(eq.values[c] - 1.0));

  auto hc = lift_to(law, k.source(), as_vector(h.values));
  auto y = outcome(law);
  double acc = 0.0;
  for (std::size_t c = 0; c < law.size(); ++c) {
    double dtil = (d1[c] - p.p_o) / (p.p_o * (1.0 - p.p_o));
    double v = dtil * qc[c] * (y[c] - hc[c]);
    acc += law.mass(c) * o[c] * v * v;
  }
  out.closed_form = (1.0 + p.lambda) * acc / p.p_go;
  out.discrepancy = std::abs(out.closed_form - out.term2);
  return out;
}

namespace {

struct RieszSetup {
  CondExpOperator k;
  Eigen::VectorXd dtilde;
  Eigen::VectorXd sinv;
  double sigma1;
  double p_ed;
  double mu;
};

RieszSetup riesz_setup(const JointLaw& law, const CellFunction& h, int arm) {
  auto p = lt_parts(law, h);
  auto k = lt_operator(law);
  std::vector<std::string> flags;
  Eigen::VectorXd sinv = sigma_pinv(k, as_vector(p.sigma2.values), flags, "Sigma2");
  const auto& dt = arm ? p.dtilde1 : p.dtilde0;
  return {std::move(k), as_vector(dt.values), std::move(sinv), arm ? p.sigma1_mu1 : p.sigma1_mu0,
          arm ? p.p_e1 : p.p_e0, arm ? p.mu1 : p.mu0};
}

double objective_at(const RieszSetup& s, const Eigen::VectorXd& r) {
  double lead = s.p_ed + s.k.inner_source(s.dtilde, r);
  Eigen::VectorXd kr = s.k.apply(r);
  return lead * lead / s.sigma1 + s.k.inner_target(kr.cwiseProduct(s.sinv), kr);
}

}  // namespace

double riesz_objective(const JointLaw& law, const CellFunction& h, const Eigen::VectorXd& r, int arm) {
  auto s = riesz_setup(law, h, arm);
  if (!(s.sigma1 > 0.0)) fail(ErrorCode::DegenerateVariance, "Var(h | G=E, D) is zero");
  return objective_at(s, r);
}

RieszSolution riesz_vstar(const JointLaw& law, const CellFunction& h, int arm, double rel_tol) {
  auto s = riesz_setup(law, h, arm);
  if (!(s.sigma1 > 1e-14 * s.p_ed)) fail(ErrorCode::DegenerateVariance, "Var(h | G=E, D) is zero");
  auto m = gram(s.k, s.sinv, "M");
  Eigen::VectorXd mdt = pinv_apply(m, s.dtilde, rel_tol);
  double quad = s.k.inner_source(s.dtilde, mdt);
  RieszSolution out;
  out.sigma1 = s.sigma1;
  out.p_ed = s.p_ed;
  out.a = s.p_ed * s.sigma1 / (s.sigma1 + quad);
  Eigen::VectorXd r = -out.a / s.sigma1 * mdt;
  Eigen::VectorXd v = s.sigma1 / out.a * r;
  out.r_star = as_cell_function(s.k.source(), r);
  out.v_star = as_cell_function(s.k.source(), v);
  out.objective = objective_at(s, r);
  Eigen::VectorXd foc = out.a / s.sigma1 * s.dtilde + m.apply(r);
  for (std::size_t a = 0; a < s.k.source().size(); ++a)
    if (s.k.source_active(a)) out.foc_residual = std::max(out.foc_residual, std::abs(foc[static_cast<Eigen::Index>(a)]));

  auto hc = lift_to(law, s.k.source(), as_vector(h.values));
  auto kv = lift_to(law, s.k.target(), Eigen::VectorXd(s.k.apply(v)));
  auto sc = lift_to(law, s.k.target(), s.sinv);
  auto e = indicator(law, ax::G, "E");
  auto o = indicator(law, ax::G, "O");
  auto d1 = indicator(law, ax::D, "1");
  auto y = outcome(law);
  out.eif.resize(law.size());
  for (std::size_t c = 0; c < law.size(); ++c) {
    double in = arm ? d1[c] : 1.0 - d1[c];
    out.eif[c] = (e[c] * in * (hc[c] - s.mu) - o[c] * kv[c] * sc[c] * (y[c] - hc[c])) / s.p_ed;
  }
  return out;
}

// ---------------------------------------------------------------------------
// NPIV and unconfounded

Eigen::VectorXd npiv_alpha(const JointLaw& law, const CondExpOperator& k) {
  (void)law;
  const auto& src = k.source();
  const auto& pa = k.source_mass();
  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(src.size()));
  for (std::size_t b = 0; b < src.size(); ++b) {
    if (!k.source_active(b)) continue;
    CellFunction unit(src, std::vector<double>(src.size(), 0.0));
    unit.values[b] = 1.0;
    auto du = npiv_derivative(unit);
    double acc = 0.0;
    for (std::size_t a = 0; a < src.size(); ++a) acc += pa[static_cast<Eigen::Index>(a)] * du.values[a];
    alpha[static_cast<Eigen::Index>(b)] = acc / pa[static_cast<Eigen::Index>(b)];
  }
  return alpha;
}

MomentSystem npiv_system(const JointLaw& law, const CellFunction& h, double mu) {
  auto k = npiv_operator(law);
  auto dh = npiv_derivative(h);
  auto dc = lift_to(law, k.source(), as_vector(dh.values));
  auto hc = lift_to(law, k.source(), as_vector(h.values));
  auto y = outcome(law);
  MomentSystem sys;
  sys.direct.resize(law.size());
  std::vector<double> rho(law.size());
  for (std::size_t c = 0; c < law.size(); ++c) {
    sys.direct[c] = dc[c] - mu;
    rho[c] = y[c] - hc[c];
  }
  Eigen::VectorXd alpha = npiv_alpha(law, k);
  sys.components.push_back({std::move(k), std::move(rho), std::move(alpha)});
  return sys;
}

EifTable npiv_eif(const JointLaw& law, const CellFunction& h, Weighting w, double rel_tol) {
  double resid = npiv_bridge_residual(law, h);
  if (resid > 1e-10) fail(ErrorCode::BridgeViolated, "bridge moment residual " + format_number(resid));
  auto k = npiv_operator(law);
  auto dh = npiv_derivative(h);
  double mu = k.inner_source(as_vector(dh.values), Eigen::VectorXd::Ones(k.source_mass().size()));
  auto sol = influence_function(law, npiv_system(law, h, mu), w, rel_tol);
  return make_eif_table(law, w == Weighting::Efficient ? "asd" : "asd_identity", std::move(sol.values));
}

namespace {

struct UcTables {
  std::vector<double> m1, m0, e1, e0, px;  // per X label
  double mu = 0.0;
};

UcTables uc_tables(const JointLaw& law) {
  const auto& s = law.space();
  auto kx = s.axis_position(ax::X), kt = s.axis_position(ax::T);
  const auto nx = s.axis(kx).size();
  auto t1 = s.axis(kt).index_of("1"), t0 = s.axis(kt).index_of("0");
  auto y = outcome(law);
  UcTables u;
  u.m1.assign(nx, 0.0);
  u.m0.assign(nx, 0.0);
  u.e1.assign(nx, 0.0);
  u.e0.assign(nx, 0.0);
  u.px.assign(nx, 0.0);
  for (std::size_t c = 0; c < law.size(); ++c) {
    auto x = s.coordinate(c, kx), t = s.coordinate(c, kt);
    u.px[x] += law.mass(c);
    if (t == t1) {
      u.e1[x] += law.mass(c);
      u.m1[x] += law.mass(c) * y[c];
    } else if (t == t0) {
      u.e0[x] += law.mass(c);
      u.m0[x] += law.mass(c) * y[c];
    }
  }
  for (std::size_t x = 0; x < nx; ++x) {
    if (!(u.px[x] > 0.0)) continue;
    if (!(u.e1[x] > 0.0) || !(u.e0[x] > 0.0))
      fail(ErrorCode::OverlapViolation, "a treatment arm is empty at X=" + s.axis(kx).label(x));
    u.m1[x] /= u.e1[x];
    u.m0[x] /= u.e0[x];
    u.e1[x] /= u.px[x];
    u.e0[x] /= u.px[x];
    u.mu += u.px[x] * (u.m1[x] - u.m0[x]);
  }
  return u;
}

}  // namespace

EifTable uc_ate_eif(const JointLaw& law) {
  auto u = uc_tables(law);
  const auto& s = law.space();
  auto kx = s.axis_position(ax::X), kt = s.axis_position(ax::T);
  auto t1 = s.axis(kt).index_of("1"), t0 = s.axis(kt).index_of("0");
  auto y = outcome(law);
  std::vector<double> v(law.size());
  for (std::size_t c = 0; c < law.size(); ++c) {
    auto x = s.coordinate(c, kx), t = s.coordinate(c, kt);
    double val = u.m1[x] - u.m0[x] - u.mu;
    if (t == t1) val += (y[c] - u.m1[x]) / u.e1[x];
    if (t == t0) val -= (y[c] - u.m0[x]) / u.e0[x];
    v[c] = val;
  }
  return make_eif_table(law, "ate", std::move(v));
}

double uc_ate(const JointLaw& law) { return uc_tables(law).mu; }

// ---------------------------------------------------------------------------
// Functionals and the pathwise check

Functional nc_functional(int which) {
  std::string tag = which == 1 ? "mu1" : which == 0 ? "mu0" : "mu";
  return {tag, [which](const JointLaw& law) {
            auto f = nc_fit(law);
            return which == 1 ? f.mu1 : which == 0 ? f.mu0 : f.mu;
          }};
}

Functional lt_functional(int which) {
  std::string tag = which == 1 ? "mu1" : which == 0 ? "mu0" : "mu";
  return {tag, [which](const JointLaw& law) {
            auto f = lt_fit(law);
            return which == 1 ? f.mu1 : which == 0 ? f.mu0 : f.mu;
          }};
}

Functional npiv_functional() {
  return {"asd", [](const JointLaw& law) { return npiv_fit(law).mu; }};
}

Functional uc_functional() {
  return {"ate", [](const JointLaw& law) { return uc_ate(law); }};
}

std::vector<double> project_out(const JointLaw& law, std::vector<double> g,
                                const std::vector<std::vector<double>>& directions) {
  double m = mean_of(law, g);
  for (auto& x : g) x -= m;
  if (!directions.empty()) {
    const auto k = static_cast<Eigen::Index>(directions.size());
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(k, k);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k);
    for (Eigen::Index i = 0; i < k; ++i) {
      const auto& di = directions[static_cast<std::size_t>(i)];
      for (std::size_t c = 0; c < law.size(); ++c) rhs[i] += law.mass(c) * di[c] * g[c];
      for (Eigen::Index j = 0; j <= i; ++j) {
        const auto& dj = directions[static_cast<std::size_t>(j)];
        double s = 0.0;
        for (std::size_t c = 0; c < law.size(); ++c) s += law.mass(c) * di[c] * dj[c];
        gram(i, j) = gram(j, i) = s;
      }
    }
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(gram);
    Eigen::VectorXd coef = cod.solve(rhs);
    for (Eigen::Index i = 0; i < k; ++i)
      for (std::size_t c = 0; c < law.size(); ++c) g[c] -= coef[i] * directions[static_cast<std::size_t>(i)][c];
  }
  m = mean_of(law, g);
  for (auto& x : g) x -= m;
  return g;
}

PathwiseReport pathwise_derivative_check(const JointLaw& law, const Functional& fn, const EifTable& eif,
                                         std::size_t n_scores, std::uint64_t seed,
                                         const std::vector<std::vector<double>>& nontangent, double theta) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  PathwiseReport rep;
  for (std::size_t i = 0; i < n_scores; ++i) {
    std::vector<double> g(law.size());
    for (auto& x : g) x = z(rng);
    g = project_out(law, std::move(g), nontangent);
    double top = 0.0;
    for (std::size_t c = 0; c < law.size(); ++c)
      if (law.mass(c) > 0.0) top = std::max(top, std::abs(g[c]));
    if (top > 0.0)
      for (auto& x : g) x /= top;
    double predicted = 0.0;
    for (std::size_t c = 0; c < law.size(); ++c) predicted += law.mass(c) * eif.values[c] * g[c];

    double scale = 1.0;
    double deriv = 0.0;
    for (int attempt = 0;; ++attempt) {
      try {
        std::vector<double> gs(g);
        for (auto& x : gs) x *= scale;
        ScoreFunction score(law, gs);
        double up = fn.eval(perturb(law, score, theta));
        double down = fn.eval(perturb(law, score, -theta));
        deriv = (up - down) / (2.0 * theta) / scale;
        break;
      } catch (const LabError& e) {
        if (e.code() != ErrorCode::PathLeavesSimplex || attempt > 20) throw;
        scale *= 0.5;
      }
    }
    rep.derivatives.push_back(deriv);
    rep.predicted.push_back(predicted);
    rep.errors.push_back(std::abs(deriv - predicted));
    rep.max_error = std::max(rep.max_error, rep.errors.back());
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json to_json(const EifTable& t) {
  nlohmann::json cells = nlohmann::json::array();
  for (std::size_t i = 0; i < t.values.size(); ++i) {
    nlohmann::json labels = nlohmann::json::array();
    auto coords = t.space.decode(i);
    for (std::size_t k = 0; k < coords.size(); ++k) labels.push_back(t.space.axis(k).label(coords[k]));
    cells.push_back({{"cell", labels}, {"value", t.values[i]}});
  }
  return {{"estimand", t.estimand}, {"mean", t.mean}, {"bound", t.bound}, {"axes", t.space.names()},
          {"cells", std::move(cells)}};
}

nlohmann::json to_json(const LongTermEifParts& p) {
  return {{"sigma1_mu1", p.sigma1_mu1}, {"sigma1_mu0", p.sigma1_mu0}, {"sigma2", to_json(p.sigma2)},
          {"pi", to_json(p.pi)},        {"m_spectrum", p.m_spectrum}, {"p_e", p.p_e},
          {"p_o", p.p_o},               {"p_g_e", p.p_ge},            {"p_g_o", p.p_go},
          {"mu1", p.mu1},               {"mu0", p.mu0},               {"dbar", {p.dbar0, p.dbar1}},
          {"lambda", p.lambda},         {"flags", p.flags}};
}

nlohmann::json to_json(const NegControlEifParts& p) {
  return {{"sigma11", to_json(p.sigma11)},
          {"sigma00", to_json(p.sigma00)},
          {"propensity", to_json(p.propensity)},
          {"h_spectrum", p.h_spectrum},
          {"sigma1_mu1", p.sigma1_mu1},
          {"sigma1_mu0", p.sigma1_mu0},
          {"flags", p.flags}};
}

nlohmann::json to_json(const RieszSolution& r) {
  return {{"r_star", to_json(r.r_star)}, {"v_star", to_json(r.v_star)}, {"objective", r.objective},
          {"A", r.a},                    {"sigma1", r.sigma1},            {"foc_residual", r.foc_residual}};
}

}  // namespace localid
