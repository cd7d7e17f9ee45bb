#pragma once

// Efficient influence functions and variance bounds on exact laws.
//
// Every model here is a sequential moment model: a target whose derivative in
// the nuisance h is <alpha, dh>, plus conditional moments E[rho_d | C_d] = 0
// with rho_d = 1{event}(Y - h_d). The efficient influence function is
//
//   f + sum_d xi_d(C_d) rho_d,   xi_d = Sigma_d^+ (K_d lambda_d - Gamma_d),
//   lambda_d = H_d^+ psi_d,      H_d = K_d* Sigma_d^+ K_d,
//   psi_d = alpha_d + K_d* Sigma_d^+ Gamma_d,
//
// with Sigma_d = E[rho_d^2 | C_d] and Gamma_d = E[f rho_d | C_d]. It is the
// minimum-variance member of {f + sum_d xi_d rho_d : K_d* xi_d = alpha_d}.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "localid/causal_models.hpp"
#include "localid/finite_law.hpp"
#include "localid/operator_algebra.hpp"

namespace localid {

struct EifTable {
  std::string estimand;
  ProductSpace space;
  std::vector<double> values;  // one per cell of the law
  double mean = 0.0;
  double bound = 0.0;  // E[value^2]
};

EifTable make_eif_table(const JointLaw& law, std::string estimand, std::vector<double> values);

struct MomentComponent {
  CondExpOperator k;
  std::vector<double> rho;  // per cell of the law
  Eigen::VectorXd alpha;    // on the source cells of k
};

struct MomentSystem {
  std::vector<double> direct;  // f per cell of the law
  std::vector<MomentComponent> components;
};

enum class Weighting { Efficient, Identity };

struct InfluenceSolution {
  std::vector<double> values;
  std::vector<Eigen::VectorXd> xi;        // per component, on target cells
  std::vector<Eigen::VectorXd> sigma;     // Sigma_d on target cells
  std::vector<Eigen::VectorXd> gamma;     // Gamma_d on target cells
  std::vector<Eigen::VectorXd> psi;       // psi_d on source cells
  std::vector<Eigen::VectorXd> lambda;    // H_d^+ psi_d
  std::vector<std::vector<double>> spectrum;  // eigenvalues of H_d, descending
  double sigma1 = 0.0;      // E[(f - sum_d Gamma_d Sigma_d^+ rho_d)^2]
  double riesz_term = 0.0;  // sum_d <psi_d, H_d^+ psi_d>
  std::vector<std::string> flags;
};

InfluenceSolution influence_function(const JointLaw& law, const MomentSystem& sys, Weighting w,
                                     double rel_tol = kRankTolerance);

// 1 / min_r { (1 + <psi, r>)^2 / sigma1 + <r, H r> }, found by solving the
// first-order condition as a linear system. Equals the efficient bound.
double fisher_bound(const InfluenceSolution& s, const MomentSystem& sys);

// Directions phi(C_d) rho_d with K_d* phi = 0: the orthocomplement of the tangent space.
std::vector<std::vector<double>> nontangent_directions(const JointLaw& law, const MomentSystem& sys,
                                                       double rel_tol = kRankTolerance);

// ---------------------------------------------------------------------------
// Negative control

struct NegControlEifParts {
  std::vector<double> rho1, rho0;  // per cell
  CellFunction sigma11, sigma00;   // on (X,Z); the off-diagonal is identically zero
  CellFunction gamma1_1, gamma1_0;  // Gamma_1 = (Gamma_1[rho1], Gamma_1[rho0])
  CellFunction gamma0_1, gamma0_0;
  CellFunction propensity;       // p(Z,X)
  CellFunction l1, l0;           // diagonal of L: -p, -(1-p)
  std::vector<std::vector<double>> h_spectrum;  // per arm
  std::vector<CellFunction> psi1, psi0;         // psi for mu1 and mu0, per arm, on (X,V)
  double sigma1_mu1 = 0.0, sigma1_mu0 = 0.0;
  std::vector<std::string> flags;
};

struct NegControlEif {
  EifTable mu1, mu0, mu;
  NegControlEifParts parts;
};

MomentSystem nc_system(const JointLaw& law, const CellFunction& h, double mu1, double mu0, double c1, double c0);
NegControlEif nc_eif(const JointLaw& law, const CellFunction& h, double rel_tol = kRankTolerance);

// ---------------------------------------------------------------------------
// Long term

struct LongTermEifParts {
  double sigma1_mu1 = 0.0;  // E[(1{E} D (h - mu1))^2]
  double sigma1_mu0 = 0.0;
  CellFunction sigma2;      // on (D,S1,S2)
  CellFunction pi;          // P(G=E | S3,S2,D), on (D,S2,S3)
  CellFunction dtilde1;     // pi * D
  CellFunction dtilde0;     // pi * (1 - D)
  std::vector<double> m_spectrum;
  double p_e = 0.0, p_o = 0.0;   // P(D=1 | G)
  double p_ge = 0.0, p_go = 0.0; // P(G)
  double p_e1 = 0.0, p_e0 = 0.0; // P(G=E, D=d)
  double mu1 = 0.0, mu0 = 0.0;
  double dbar1 = 0.0, dbar0 = 0.0;  // Dbar at D = 1, 0
  double lambda = 0.0;              // P(G=E) / P(G=O)
  std::vector<std::string> flags;
};

struct LongTermEif {
  EifTable mu1, mu0, mu;
  LongTermEifParts parts;
};

// `c1`, `c0` weight the two arms in the target: c1 mu1 + c0 mu0.
MomentSystem lt_system(const JointLaw& law, const CellFunction& h, double mu1, double mu0, double c1, double c0);
LongTermEifParts lt_parts(const JointLaw& law, const CellFunction& h, double rel_tol = kRankTolerance);
LongTermEif lt_eif(const JointLaw& law, const CellFunction& h, double rel_tol = kRankTolerance);

struct BoundTerms {
  double term1 = 0.0;
  double term2 = 0.0;
};
BoundTerms lt_bound_decomposition(const LongTermEifParts& parts, const JointLaw& law, const CellFunction& h,
                                  double rel_tol = kRankTolerance);

struct ReductionCheck {
  double term2 = 0.0;            // via M^+
  double closed_form = 0.0;      // (1 + lambda) E[((D - pO)/(pO(1-pO)) q (Y - h))^2 | G=O]
  double discrepancy = 0.0;
  double q_equation_residual = 0.0;
  CellFunction q;                // on (D,S1,S2)
};
ReductionCheck reduction_check_lt(const JointLaw& law, const CellFunction& h, double rel_tol = kRankTolerance);

struct RieszSolution {
  CellFunction r_star;  // on (D,S2,S3)
  CellFunction v_star;
  double objective = 0.0;
  double a = 0.0;       // P(G=E,D=d) + E[Dtilde r*]
  double sigma1 = 0.0;
  double p_ed = 0.0;    // P(G=E, D=d)
  double foc_residual = 0.0;
  std::vector<double> eif;  // rebuilt from v*, per cell
};

// The r* objective of the long-term model for arm d, evaluated at r (source cells).
double riesz_objective(const JointLaw& law, const CellFunction& h, const Eigen::VectorXd& r, int arm = 1);
RieszSolution riesz_vstar(const JointLaw& law, const CellFunction& h, int arm = 1, double rel_tol = kRankTolerance);

// ---------------------------------------------------------------------------
// NPIV average structural derivative and the unconfounded ATE

// alpha(x,t') = sum_t P(x,t) D[t,t'] / P(x,t'), the representer of h -> E[dh/dt].
Eigen::VectorXd npiv_alpha(const JointLaw& law, const CondExpOperator& k);
MomentSystem npiv_system(const JointLaw& law, const CellFunction& h, double mu);
EifTable npiv_eif(const JointLaw& law, const CellFunction& h, Weighting w, double rel_tol = kRankTolerance);

EifTable uc_ate_eif(const JointLaw& law);

double uc_ate(const JointLaw& law);

// ---------------------------------------------------------------------------
// Least-squares bridge fits. `weight` is a function of the target cells; the
// default is the identity.

struct NcFit {
  CellFunction h;  // on (X, D, V)
  double mu1 = 0.0, mu0 = 0.0, mu = 0.0;
  bool solvable = true;
  double residual = 0.0;
  std::size_t kernel_dim = 0;
};
NcFit nc_fit(const JointLaw& law, const std::optional<Eigen::VectorXd>& w1 = {},
             const std::optional<Eigen::VectorXd>& w0 = {}, double rel_tol = kRankTolerance);

struct LtFit {
  CellFunction h;  // on (D, S2, S3)
  double mu1 = 0.0, mu0 = 0.0, mu = 0.0;
  bool solvable = true;
  double residual = 0.0;
  std::size_t kernel_dim = 0;
};
LtFit lt_fit(const JointLaw& law, const std::optional<Eigen::VectorXd>& weight = {},
             double rel_tol = kRankTolerance);

struct NpivFit {
  CellFunction h;  // on (X, T)
  double mu = 0.0;
  bool solvable = true;
  double residual = 0.0;
  std::size_t kernel_dim = 0;
};
NpivFit npiv_fit(const JointLaw& law, const std::optional<Eigen::VectorXd>& weight = {},
                 double rel_tol = kRankTolerance);

// ---------------------------------------------------------------------------
// Estimand functionals on an arbitrary law (least-squares bridge, identity weight)

struct Functional {
  std::string estimand;
  std::function<double(const JointLaw&)> eval;
};

Functional nc_functional(int which);   // 1: mu1, 0: mu0, -1: mu
Functional lt_functional(int which);
Functional npiv_functional();
Functional uc_functional();

struct PathwiseReport {
  double max_error = 0.0;
  std::vector<double> errors;
  std::vector<double> derivatives;
  std::vector<double> predicted;
};

// Central differences of the functional along perturb(law, g, +-theta) for
// random scores g, compared with E[eif g]. When `nontangent` is given the
// scores are projected onto its orthocomplement in L2_0(P).
PathwiseReport pathwise_derivative_check(const JointLaw& law, const Functional& fn, const EifTable& eif,
                                         std::size_t n_scores, std::uint64_t seed,
                                         const std::vector<std::vector<double>>& nontangent = {},
                                         double theta = 1e-4);

// Projects centred values onto the orthocomplement of span(directions) in L2(P).
std::vector<double> project_out(const JointLaw& law, std::vector<double> g,
                                 const std::vector<std::vector<double>>& directions);

nlohmann::json to_json(const EifTable& t);
nlohmann::json to_json(const LongTermEifParts& p);
nlohmann::json to_json(const NegControlEifParts& p);
nlohmann::json to_json(const RieszSolution& r);

}  // namespace localid
