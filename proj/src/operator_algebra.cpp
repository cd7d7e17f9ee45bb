#include "localid/operator_algebra.hpp"

#include <algorithm>
#include <cmath>

namespace localid {

namespace {

Eigen::VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd sqrt_or_zero(const Eigen::VectorXd& m) {
  return m.unaryExpr([](double x) { return x > 0.0 ? std::sqrt(x) : 0.0; });
}

Eigen::VectorXd inv_sqrt_or_zero(const Eigen::VectorXd& m) {
  return m.unaryExpr([](double x) { return x > 0.0 ? 1.0 / std::sqrt(x) : 0.0; });
}

std::vector<Eigen::Index> active_indices(const Eigen::VectorXd& mass) {
  std::vector<Eigen::Index> out;
  for (Eigen::Index i = 0; i < mass.size(); ++i)
    if (mass[i] > 0.0) out.push_back(i);
  return out;
}

}  // namespace

CondExpOperator::CondExpOperator(ProductSpace source, ProductSpace target, Eigen::VectorXd source_mass,
                                 Eigen::VectorXd target_mass, Eigen::MatrixXd matrix,
                                 std::optional<Event> indicator)
    : source_(std::move(source)),
      target_(std::move(target)),
      source_mass_(std::move(source_mass)),
      target_mass_(std::move(target_mass)),
      matrix_(std::move(matrix)),
      indicator_(std::move(indicator)) {
  if (static_cast<std::size_t>(source_mass_.size()) != source_.size() ||
      static_cast<std::size_t>(target_mass_.size()) != target_.size() ||
      static_cast<std::size_t>(matrix_.rows()) != target_.size() ||
      static_cast<std::size_t>(matrix_.cols()) != source_.size())
    fail(ErrorCode::InvalidLaw, "operator dimensions do not match its spaces");
}

std::size_t CondExpOperator::active_target_count() const {
  return static_cast<std::size_t>((target_mass_.array() > 0.0).count());
}

std::size_t CondExpOperator::active_source_count() const {
  return static_cast<std::size_t>((source_mass_.array() > 0.0).count());
}

CellFunction CondExpOperator::apply(const CellFunction& h) const {
  if (!(h.space == source_)) fail(ErrorCode::LabelMismatch, "function is not defined on the operator's source");
  Eigen::VectorXd out = matrix_ * to_vector(h.values);
  CellFunction f(target_, to_std(out));
  f.flagged.assign(target_.size(), 0);
  for (std::size_t c = 0; c < target_.size(); ++c)
    if (!target_active(c)) f.flagged[c] = 1;
  return f;
}

double CondExpOperator::inner_source(const Eigen::VectorXd& f, const Eigen::VectorXd& g) const {
  return (source_mass_.array() * f.array() * g.array()).sum();
}

double CondExpOperator::inner_target(const Eigen::VectorXd& f, const Eigen::VectorXd& g) const {
  return (target_mass_.array() * f.array() * g.array()).sum();
}

Eigen::MatrixXd CondExpOperator::orthonormal_matrix() const {
  return sqrt_or_zero(target_mass_).asDiagonal() * matrix_ * inv_sqrt_or_zero(source_mass_).asDiagonal();
}

CondExpOperator build_operator(const JointLaw& law, const std::vector<std::string>& source,
                               const std::vector<std::string>& target, std::optional<Event> indicator) {
  const auto& space = law.space();
  ProductSpace src = space.subspace(source);
  ProductSpace tgt = space.subspace(target);
  if (src.rank() != source.size() || tgt.rank() != target.size())
    fail(ErrorCode::UnknownAxis, "duplicate axis in operator definition");
  auto to_src = projection_map(space, src);
  auto to_tgt = projection_map(space, tgt);

  std::vector<double> ind(law.size(), 1.0);
  if (indicator) {
    auto k = space.axis_position(indicator->axis);
    auto lab = space.axis(k).index_of(indicator->label);
    for (std::size_t c = 0; c < law.size(); ++c) ind[c] = space.coordinate(c, k) == lab ? 1.0 : 0.0;
  }

  Eigen::VectorXd ms = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(src.size()));
  Eigen::VectorXd mt = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(tgt.size()));
  Eigen::MatrixXd k = Eigen::MatrixXd::Zero(mt.size(), ms.size());
  for (std::size_t c = 0; c < law.size(); ++c) {
    auto a = static_cast<Eigen::Index>(to_src[c]);
    auto t = static_cast<Eigen::Index>(to_tgt[c]);
    ms[a] += law.mass(c);
    mt[t] += law.mass(c);
    k(t, a) += ind[c] * law.mass(c);
  }
  if (!(mt.array() > 0.0).any()) fail(ErrorCode::EmptyTarget, "no target cell has positive mass");
  for (Eigen::Index t = 0; t < mt.size(); ++t) {
    if (mt[t] > 0.0)
      k.row(t) /= mt[t];
    else
      k.row(t).setZero();
  }
  return CondExpOperator(std::move(src), std::move(tgt), std::move(ms), std::move(mt), std::move(k),
                         std::move(indicator));
}

CondExpOperator adjoint(const CondExpOperator& op) {
  const auto& k = op.matrix();
  const auto& ms = op.source_mass();
  const auto& mt = op.target_mass();
  Eigen::MatrixXd kt = Eigen::MatrixXd::Zero(k.cols(), k.rows());
  for (Eigen::Index a = 0; a < k.cols(); ++a) {
    if (!(ms[a] > 0.0)) {
      if (k.col(a).cwiseAbs().maxCoeff() > 0.0)
        fail(ErrorCode::DegenerateWeight, "source cell carries operator weight but has zero marginal mass");
      continue;
    }
    for (Eigen::Index c = 0; c < k.rows(); ++c) kt(a, c) = k(c, a) * mt[c] / ms[a];
  }
  return CondExpOperator(op.target(), op.source(), mt, ms, std::move(kt), op.indicator());
}

// ---------------------------------------------------------------------------
// Gram operators

Eigen::VectorXd GramOperator::apply(const Eigen::VectorXd& h) const {
  Eigen::VectorXd u = sqrt_or_zero(mass).asDiagonal() * h;
  return inv_sqrt_or_zero(mass).asDiagonal() * (matrix * u);
}

double GramOperator::quadratic_form(const Eigen::VectorXd& f) const {
  Eigen::VectorXd u = sqrt_or_zero(mass).asDiagonal() * f;
  return u.dot(matrix * u);
}

GramOperator gram(const CondExpOperator& op, const std::optional<Eigen::VectorXd>& weight, std::string description) {
  Eigen::MatrixXd b = op.orthonormal_matrix();
  Eigen::MatrixXd g;
  if (weight) {
    if (weight->size() != b.rows()) fail(ErrorCode::InvalidLaw, "weight must be a function of the target cells");
    g = b.transpose() * weight->asDiagonal() * b;
  } else {
    g = b.transpose() * b;
  }
  g = 0.5 * (g + g.transpose());
  return GramOperator{op.source(), op.source_mass(), std::move(g), std::move(description)};
}

namespace {

Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> checked_eigen(const Eigen::MatrixXd& m) {
  double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    fail(ErrorCode::NotSymmetric, "Gram operator is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.eigenvalues().size() > 0 && es.eigenvalues().minCoeff() < -1e-10 * scale)
    fail(ErrorCode::NegativeEigenvalue, "Gram operator has eigenvalue " + format_number(es.eigenvalues().minCoeff()));
  return es;
}

Eigen::VectorXd truncated_inverse(const Eigen::VectorXd& ev, double rel_tol) {
  double top = ev.size() ? ev.maxCoeff() : 0.0;
  double cut = rel_tol * top;
  return ev.unaryExpr([&](double l) { return (top > 0.0 && l > cut) ? 1.0 / l : 0.0; });
}

}  // namespace

GramOperator pseudoinverse(const GramOperator& g, double rel_tol) {
  auto es = checked_eigen(g.matrix);
  Eigen::VectorXd inv = truncated_inverse(es.eigenvalues(), rel_tol);
  Eigen::MatrixXd p = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
  p = 0.5 * (p + p.transpose());
  return GramOperator{g.space, g.mass, std::move(p), "pinv(" + g.description + ")"};
}

Eigen::VectorXd pinv_apply(const GramOperator& g, const Eigen::VectorXd& f, double rel_tol) {
  return pseudoinverse(g, rel_tol).apply(f);
}

// ---------------------------------------------------------------------------
// Diagnostics

std::string verdict_name(Verdict v) { return v == Verdict::JustIdentified ? "JustIdentified" : "OverIdentified"; }

OperatorDiagnostics diagnose_identification(const CondExpOperator& op, double rel_tol) {
  auto rows = active_indices(op.target_mass());
  auto cols = active_indices(op.source_mass());
  Eigen::MatrixXd full = op.orthonormal_matrix();
  Eigen::MatrixXd b(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j)
      b(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = full(rows[i], cols[j]);

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(b, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();

  OperatorDiagnostics d;
  d.rel_tol = rel_tol;
  d.active_targets = rows.size();
  d.active_sources = cols.size();
  d.singular_values = to_std(sv);
  double top = sv.size() ? sv[0] : 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (top > 0.0 && sv[i] > rel_tol * top) ++d.rank;
  d.adjoint_kernel_dim = rows.size() - d.rank;
  d.operator_kernel_dim = cols.size() - d.rank;

  const Eigen::MatrixXd& u = svd.matrixU();
  for (std::size_t k = d.rank; k < rows.size(); ++k) {
    CellFunction g = CellFunction::constant(op.target(), 0.0);
    g.flagged.assign(op.target().size(), 0);
    for (std::size_t c = 0; c < op.target().size(); ++c)
      if (!op.target_active(c)) g.flagged[c] = 1;
    for (std::size_t i = 0; i < rows.size(); ++i)
      g.values[static_cast<std::size_t>(rows[i])] =
          u(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) / std::sqrt(op.target_mass()[rows[i]]);
    d.adjoint_kernel_basis.push_back(std::move(g));
  }
  const Eigen::MatrixXd& v = svd.matrixV();
  for (std::size_t k = d.rank; k < cols.size(); ++k) {
    CellFunction h = CellFunction::constant(op.source(), 0.0);
    for (std::size_t j = 0; j < cols.size(); ++j)
      h.values[static_cast<std::size_t>(cols[j])] =
          v(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) / std::sqrt(op.source_mass()[cols[j]]);
    d.operator_kernel_basis.push_back(std::move(h));
  }
  d.verdict = d.adjoint_kernel_dim == 0 ? Verdict::JustIdentified : Verdict::OverIdentified;
  return d;
}

// ---------------------------------------------------------------------------
// Finite-support tangent spaces

TangentDemo tangent_dim_demo(const std::vector<MassConstraint>& constraints, const JointLaw& law) {
  const auto n = law.size();
  std::vector<std::size_t> support;
  for (std::size_t w = 0; w < n; ++w)
    if (law.mass(w) > 0.0) support.push_back(w);

  std::vector<Eigen::VectorXd> rows;
  Eigen::VectorXd root(static_cast<Eigen::Index>(support.size()));
  for (std::size_t i = 0; i < support.size(); ++i) root[static_cast<Eigen::Index>(i)] = std::sqrt(law.mass(support[i]));
  rows.push_back(root);

  for (const auto& con : constraints) {
    if (con.coeffs.size() != n) fail(ErrorCode::InvalidSizes, "constraint length does not match the law");
    double lhs = 0.0;
    for (std::size_t w = 0; w < n; ++w) lhs += con.coeffs[w] * law.mass(w);
    if (con.kind == MassConstraint::Kind::Equal) {
      if (std::abs(lhs - con.rhs) > 1e-10) fail(ErrorCode::InfeasiblePoint, "equality constraint violated");
      Eigen::VectorXd r(root.size());
      for (std::size_t i = 0; i < support.size(); ++i)
        r[static_cast<Eigen::Index>(i)] = con.coeffs[support[i]] * root[static_cast<Eigen::Index>(i)];
      rows.push_back(r);
    } else if (lhs < con.rhs - 1e-10) {
      fail(ErrorCode::InfeasiblePoint, "inequality constraint violated");
    }
    // Inequalities, binding or not, leave a cone of scores whose linear span is
    // the whole space, so only equalities restrict the tangent space.
  }

  Eigen::MatrixXd c(static_cast<Eigen::Index>(rows.size()), root.size());
  for (std::size_t i = 0; i < rows.size(); ++i) c.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(c, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv[i] > kRankTolerance * sv[0]) ++rank;

  TangentDemo out;
  out.full_dim = support.size() - 1;
  out.tangent_dim = support.size() - rank;
  out.verdict = out.tangent_dim < out.full_dim ? Verdict::OverIdentified : Verdict::JustIdentified;
  const Eigen::MatrixXd& v = svd.matrixV();
  for (std::size_t k = rank; k < support.size(); ++k) {
    std::vector<double> g(n, 0.0);
    for (std::size_t i = 0; i < support.size(); ++i)
      g[support[i]] = v(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) / root[static_cast<Eigen::Index>(i)];
    out.tangent_basis.push_back(std::move(g));
  }
  return out;
}

double tangent_efficiency_bound(const TangentDemo& demo, const JointLaw& law, const std::vector<double>& f) {
  if (f.size() != law.size()) fail(ErrorCode::InvalidSizes, "function length does not match the law");
  double bound = 0.0;
  for (const auto& g : demo.tangent_basis) {
    double ip = 0.0;
    for (std::size_t w = 0; w < law.size(); ++w) ip += law.mass(w) * f[w] * g[w];
    bound += ip * ip;
  }
  return bound;
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json to_json(const CellFunction& f) {
  nlohmann::json cells = nlohmann::json::array();
  for (std::size_t i = 0; i < f.size(); ++i) {
    nlohmann::json labels = nlohmann::json::array();
    auto coords = f.space.decode(i);
    for (std::size_t k = 0; k < coords.size(); ++k) labels.push_back(f.space.axis(k).label(coords[k]));
    nlohmann::json cell = {{"cell", labels}, {"value", f.values[i]}};
    if (f.is_flagged(i)) cell["flagged"] = true;
    cells.push_back(std::move(cell));
  }
  return {{"axes", f.space.names()}, {"cells", std::move(cells)}};
}

nlohmann::json to_json(const OperatorDiagnostics& d) {
  nlohmann::json basis = nlohmann::json::array();
  for (const auto& g : d.adjoint_kernel_basis) basis.push_back(to_json(g));
  return {{"verdict", verdict_name(d.verdict)},
          {"rank", d.rank},
          {"singular_values", d.singular_values},
          {"adjoint_kernel_dim", d.adjoint_kernel_dim},
          {"operator_kernel_dim", d.operator_kernel_dim},
          {"active_target_cells", d.active_targets},
          {"active_source_cells", d.active_sources},
          {"rank_tolerance", d.rel_tol},
          {"adjoint_kernel_basis", std::move(basis)}};
}

}  // namespace localid
