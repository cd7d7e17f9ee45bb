#pragma once

// Data-generating processes for the four designs, structural reconstructions of
// observable laws, and the bridge solver for NPIV-type moments.
//
// Axis layouts (slowest to fastest):
//   unconfounded      X, T, Y
//   negative control  X, Z, D, V, Y
//   long term         G, D, S1, S2, S3, Y      (Y is "NA" whenever G = E)
//   npiv              X, Z, T, Y

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "localid/finite_law.hpp"
#include "localid/operator_algebra.hpp"

namespace localid {

namespace ax {
inline const std::string Y = "Y";
inline const std::string T = "T";
inline const std::string X = "X";
inline const std::string D = "D";
inline const std::string V = "V";
inline const std::string Z = "Z";
inline const std::string U = "U";
inline const std::string G = "G";
inline const std::string S1 = "S1";
inline const std::string S2 = "S2";
inline const std::string S3 = "S3";
}  // namespace ax

// Equally spaced outcome grid on [0, 1].
Axis outcome_axis(std::size_t points, bool with_missing = false);

// Distribution on an equally spaced grid of `points` values in [0,1] with mean m:
// a mix of a binomial on the grid (weight `lambda`) and a two-point law at {0,1}.
std::vector<double> outcome_distribution(double m, double lambda, std::size_t points);

// ---------------------------------------------------------------------------
// Unconfounded treatment

struct UnconfoundedSpec {
  Axis y;
  Axis t;
  Axis x;
  std::vector<double> px;                            // P(X=x)
  std::vector<std::vector<double>> pt_given_x;       // [x][t]
  std::vector<std::vector<std::vector<double>>> py;  // [t][x][y] = P(Y=y | T=t, X=x)
};

UnconfoundedSpec random_unconfounded_spec(std::size_t nx, std::size_t nt, std::size_t ny, std::uint64_t seed,
                                          bool confounded = true);

struct StructuralLaw {
  JointLaw law;
  std::vector<std::string> flags;
};

struct UnconfoundedDraw {
  StructuralLaw structural;
  JointLaw observable;
};

// Axes of the structural law: X, T, then one potential outcome Y(t) per treatment label.
UnconfoundedDraw gen_unconfounded(const UnconfoundedSpec& spec, std::uint64_t seed);
StructuralLaw structural_from_observable_uc(const JointLaw& obs);
// Maps (X, T, {Y(t)}) to (X, T, Y(T)).
JointLaw observe_unconfounded(const JointLaw& structural, const ProductSpace& observable_space);

// Max over positive-mass C cells of |P(A,B|C) - P(A|C)P(B|C)|. An empty C means
// unconditional independence.
double ci_discrepancy(const JointLaw& law, const std::vector<std::string>& a, const std::vector<std::string>& b,
                      const std::vector<std::string>& c);

// ---------------------------------------------------------------------------
// Bridge functions

struct BridgeSolution {
  CellFunction h;
  double residual_norm = 0.0;
  bool solvable = false;
  std::size_t kernel_dim = 0;
};

// Minimum-norm minimiser of ||K h - b||^2 in L2 of the target marginal, weighted
// by `weight` when given.
BridgeSolution solve_bridge(const CondExpOperator& k, const CellFunction& b,
                            const std::optional<Eigen::VectorXd>& weight = {}, double rel_tol = kRankTolerance);

// E[1{indicator} Y | target] as a function on the target cells of `k`.
CellFunction bridge_target(const JointLaw& law, const CondExpOperator& k);

// ---------------------------------------------------------------------------
// Negative control

struct NegControlConfig {
  std::size_t nv = 2;
  std::size_t nz = 3;
  std::size_t nx = 2;
  std::size_t ny = 5;
  // Outcome noise alternates between the binomial and the two-point extreme across Z,
  // so Var(Y | Z,X) varies strongly and identity weighting is inefficient.
  bool heteroskedastic = false;
};

struct NegControlModel {
  JointLaw law;
  CellFunction h;  // on (X, D, V)
  double mu1 = 0.0;
  double mu0 = 0.0;
  double mu = 0.0;
};

NegControlModel gen_negative_control(const NegControlConfig& cfg, std::uint64_t seed);
// T_d h = E[1{D=d} h(V,X) | Z,X], acting on functions of (X, V).
CondExpOperator nc_operator(const JointLaw& law, int d);
// Max |E[1{D=d}(Y - h(V,d,X)) | Z,X]| over d and cells.
double nc_bridge_residual(const JointLaw& law, const CellFunction& h);
// h(., d, .) as a function of (X, V), and the inverse assembly.
CellFunction nc_arm(const CellFunction& h, int d);
CellFunction nc_join(const ProductSpace& h_space, const CellFunction& h1, const CellFunction& h0);

struct NegControlConstruction {
  StructuralLaw structural;
  double pushforward_error = 0.0;
  double latent_ignorability = 0.0;   // (Y(d),V) indep. of (D,Z) given (U,X)
  double conditional_match = 0.0;     // (Y(d),V)|(U,X) vs observed (Y,V)|(D=d,Z=U,X)
  double bridge_residual = 0.0;
  std::size_t completeness_deficiency = 0;
};

// Axes: X, U, Z, D, V, Y(1), Y(0). U copies Z.
NegControlConstruction structural_from_observable_nc(const JointLaw& obs, const CellFunction& h);

// ---------------------------------------------------------------------------
// Long term

struct LongTermConfig {
  std::size_t s1 = 3;
  std::size_t s2 = 2;
  std::size_t s3 = 2;
  std::size_t ny = 5;
  // S3 is a deterministic bijection of S1 given S2.
  bool bijective = false;
  // Experimental short-term outcomes respond to treatment.
  bool short_term_effect = false;
  // Size of a bridge-moment violation placed in ker(K*).
  double violation = 0.0;
};

struct LongTermModel {
  JointLaw law;
  CellFunction h;  // on (D, S2, S3)
  double mu1 = 0.0;
  double mu0 = 0.0;
  double mu = 0.0;
};

LongTermModel gen_long_term(const LongTermConfig& cfg, std::uint64_t seed);
// K h = E[1{G=O} h(S3,S2,D) | S2,S1,D].
CondExpOperator lt_operator(const JointLaw& law);
double lt_bridge_residual(const JointLaw& law, const CellFunction& h);

struct LongTermConstruction {
  StructuralLaw structural;
  double pushforward_error = 0.0;
  // The six identifying assumptions, each as a max discrepancy (rank deficiency for completeness).
  double observational_unconfounded = 0.0;
  double experiment_randomized = 0.0;
  double external_validity = 0.0;
  double sequential_outcomes = 0.0;
  std::size_t completeness_deficiency = 0;
  double latent_bridge = 0.0;
};

// Axes: G, D, U1, U2, S1, S2, S3, Y(1), Y(0). U = (U1, U2) copies (S1, S2), S(d) = S.
LongTermConstruction structural_from_observable_lt(const JointLaw& obs, const CellFunction& h);

// ---------------------------------------------------------------------------
// NPIV

struct NpivConfig {
  std::size_t nt = 3;
  std::size_t nz = 4;
  std::size_t nx = 2;
  std::size_t ny = 5;
  double beta = 0.2;
  bool linear = true;
  double violation = 0.0;
};

struct NpivModel {
  JointLaw law;
  CellFunction h;  // on (X, T)
  double mu = 0.0;
};

NpivModel gen_npiv(const NpivConfig& cfg, std::uint64_t seed);
// K h = E[h(T,X) | Z,X].
CondExpOperator npiv_operator(const JointLaw& law);
double npiv_bridge_residual(const JointLaw& law, const CellFunction& h);
// Central difference in T on the numeric grid, one-sided at the ends.
CellFunction npiv_derivative(const CellFunction& h);

// ---------------------------------------------------------------------------

Dataset sample(const JointLaw& law, std::size_t n, std::uint64_t seed);

nlohmann::json law_to_json(const JointLaw& law);

}  // namespace localid
