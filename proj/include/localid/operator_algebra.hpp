#pragma once

// Conditional-expectation operators between L2 spaces of a finite law.
//
// An operator maps functions of the source axes to functions of the target
// axes, (K h)(c) = E[1{event} h(a) | c]. Inner products on either side are
// taken under the corresponding marginal of the base law, so the adjoint is the
// Hilbert-space adjoint, (K* g)(a) = E[1{event} g(c) | a]. Cells with zero
// marginal mass are inactive: their rows and columns are zero and they are
// excluded from every inner product.

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "localid/finite_law.hpp"

namespace localid {

inline constexpr double kRankTolerance = 1e-10;

struct Event {
  std::string axis;
  std::string label;
};

class CondExpOperator {
 public:
  CondExpOperator(ProductSpace source, ProductSpace target, Eigen::VectorXd source_mass,
                  Eigen::VectorXd target_mass, Eigen::MatrixXd matrix, std::optional<Event> indicator);

  const ProductSpace& source() const { return source_; }
  const ProductSpace& target() const { return target_; }
  const Eigen::VectorXd& source_mass() const { return source_mass_; }
  const Eigen::VectorXd& target_mass() const { return target_mass_; }
  // Rows are target cells, columns source cells.
  const Eigen::MatrixXd& matrix() const { return matrix_; }
  const std::optional<Event>& indicator() const { return indicator_; }

  bool target_active(std::size_t c) const { return target_mass_[static_cast<Eigen::Index>(c)] > 0.0; }
  bool source_active(std::size_t a) const { return source_mass_[static_cast<Eigen::Index>(a)] > 0.0; }
  std::size_t active_target_count() const;
  std::size_t active_source_count() const;

  Eigen::VectorXd apply(const Eigen::VectorXd& h) const { return matrix_ * h; }
  CellFunction apply(const CellFunction& h) const;

  double inner_source(const Eigen::VectorXd& f, const Eigen::VectorXd& g) const;
  double inner_target(const Eigen::VectorXd& f, const Eigen::VectorXd& g) const;

  // The matrix in orthonormal coordinates: diag(sqrt Pc) K diag(1/sqrt Pa).
  Eigen::MatrixXd orthonormal_matrix() const;

 private:
  ProductSpace source_;
  ProductSpace target_;
  Eigen::VectorXd source_mass_;
  Eigen::VectorXd target_mass_;
  Eigen::MatrixXd matrix_;
  std::optional<Event> indicator_;
};

CondExpOperator build_operator(const JointLaw& law, const std::vector<std::string>& source,
                               const std::vector<std::string>& target, std::optional<Event> indicator = {});
CondExpOperator adjoint(const CondExpOperator& op);

// A self-adjoint operator on the source space of some CondExpOperator,
// stored in orthonormal coordinates u = sqrt(Pa) h so the matrix is symmetric.
struct GramOperator {
  ProductSpace space;
  Eigen::VectorXd mass;
  Eigen::MatrixXd matrix;
  std::string description;

  // Applies the operator to a function given in ordinary coordinates.
  Eigen::VectorXd apply(const Eigen::VectorXd& h) const;
  // <f, G f> in L2 of the source marginal.
  double quadratic_form(const Eigen::VectorXd& f) const;
};

// K* W K, where `weight` (default 1) is a function of the target cells.
GramOperator gram(const CondExpOperator& op, const std::optional<Eigen::VectorXd>& weight = {},
                  std::string description = "K* K");
GramOperator pseudoinverse(const GramOperator& g, double rel_tol = kRankTolerance);

// Min-norm solution of the symmetric PSD system; equivalent to pseudoinverse(g).apply(f).
Eigen::VectorXd pinv_apply(const GramOperator& g, const Eigen::VectorXd& f, double rel_tol = kRankTolerance);

enum class Verdict { JustIdentified, OverIdentified };
std::string verdict_name(Verdict v);

struct OperatorDiagnostics {
  std::size_t rank = 0;
  std::vector<double> singular_values;
  std::size_t adjoint_kernel_dim = 0;
  std::size_t operator_kernel_dim = 0;
  std::size_t active_targets = 0;
  std::size_t active_sources = 0;
  double rel_tol = kRankTolerance;
  // Basis of ker(K*) as functions of the target cells, orthonormal in L2(Pc).
  std::vector<CellFunction> adjoint_kernel_basis;
  // Basis of ker(K) as functions of the source cells, orthonormal in L2(Pa).
  std::vector<CellFunction> operator_kernel_basis;
  Verdict verdict = Verdict::JustIdentified;
};

OperatorDiagnostics diagnose_identification(const CondExpOperator& op, double rel_tol = kRankTolerance);

// Linear restriction on the masses of a law: sum_w coeffs[w] p(w) (= or >=) rhs.
struct MassConstraint {
  enum class Kind { Equal, AtLeast };
  std::vector<double> coeffs;
  double rhs = 0.0;
  Kind kind = Kind::Equal;
};

struct TangentDemo {
  std::size_t tangent_dim = 0;
  std::size_t full_dim = 0;
  Verdict verdict = Verdict::JustIdentified;
  // Orthonormal (in L2(P)) basis of the tangent space, one vector per direction.
  std::vector<std::vector<double>> tangent_basis;
};

TangentDemo tangent_dim_demo(const std::vector<MassConstraint>& constraints, const JointLaw& law);
// Variance of the projection of f - E f onto the tangent space: the efficiency
// bound for E f in the constrained model.
double tangent_efficiency_bound(const TangentDemo& demo, const JointLaw& law, const std::vector<double>& f);

nlohmann::json to_json(const OperatorDiagnostics& d);
nlohmann::json to_json(const CellFunction& f);

}  // namespace localid
