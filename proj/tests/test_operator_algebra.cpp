#include <cmath>
#include <random>

#include "doctest.h"
#include "localid/operator_algebra.hpp"
#include "test_support.hpp"

using namespace localid;
using namespace testing_support;

namespace {

using Names = std::vector<std::string>;

ProductSpace lt_space(std::size_t s1, std::size_t s2, std::size_t s3) {
  return ProductSpace({Axis("G", {"E", "O"}), indexed_axis("D", 2), indexed_axis("S1", s1), indexed_axis("S2", s2),
                       indexed_axis("S3", s3)});
}

// Rank by Gaussian elimination with full pivoting on the unweighted matrix.
std::size_t brute_rank(Eigen::MatrixXd m, double tol) {
  std::size_t rank = 0;
  const auto rows = m.rows(), cols = m.cols();
  double scale = m.cwiseAbs().maxCoeff();
  for (Eigen::Index k = 0; k < std::min(rows, cols); ++k) {
    Eigen::Index pr = 0, pc = 0;
    double best = m.bottomRightCorner(rows - k, cols - k).cwiseAbs().maxCoeff(&pr, &pc);
    if (best <= tol * scale) break;
    m.row(k).swap(m.row(k + pr));
    m.col(k).swap(m.col(k + pc));
    for (Eigen::Index i = k + 1; i < rows; ++i) m.row(i) -= (m(i, k) / m(k, k)) * m.row(k);
    ++rank;
  }
  return rank;
}

Eigen::MatrixXd active_rows(const CondExpOperator& op) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(op.active_target_count()), op.matrix().cols());
  Eigen::Index r = 0;
  for (std::size_t c = 0; c < op.target().size(); ++c)
    if (op.target_active(c)) out.row(r++) = op.matrix().row(static_cast<Eigen::Index>(c));
  return out;
}

}  // namespace

TEST_CASE("operator applied to constants and indicators") {
  auto s = grid_space({{"V", 3}, {"Z", 4}, {"X", 2}});
  auto law = random_law(s, 1);
  auto op = build_operator(law, Names{"V", "X"}, Names{"Z", "X"});
  auto one = op.apply(CellFunction::constant(op.source(), 1.0));
  for (double v : one.values) CHECK(v == doctest::Approx(1.0).epsilon(1e-14));

  // P(G=O | cell) = 0.5 everywhere.
  auto g = ProductSpace({Axis("G", {"E", "O"}), indexed_axis("A", 3), indexed_axis("C", 2)});
  auto base = random_law(grid_space({{"A", 3}, {"C", 2}}), 2);
  std::vector<double> m(g.size());
  for (std::size_t w = 0; w < g.size(); ++w) m[w] = 0.5 * base.mass(w % 6);
  auto k = build_operator(JointLaw(g, m), Names{"A"}, Names{"C"}, Event{"G", "O"});
  auto half = k.apply(CellFunction::constant(k.source(), 1.0));
  for (double v : half.values) CHECK(v == doctest::Approx(0.5).epsilon(1e-14));

  CHECK_THROWS_AS(build_operator(law, Names{"Q"}, Names{"Z"}), LabError);
}

TEST_CASE("operator matches brute-force conditional expectation") {
  auto s = lt_space(3, 2, 2);
  REQUIRE(s.size() <= 96);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto law = random_law(s, seed);
    auto k = build_operator(law, Names{"S3", "S2", "D"}, Names{"S2", "S1", "D"}, Event{"G", "O"});
    auto hv = random_values(k.source().size(), seed + 100);
    auto kh = k.apply(CellFunction(k.source(), hv));
    auto src_proj = projection_map(s, k.source());
    std::vector<double> per_cell(law.size());
    for (std::size_t w = 0; w < law.size(); ++w) per_cell[w] = (s.coordinate(w, 0) == 1 ? 1.0 : 0.0) * hv[src_proj[w]];
    for (std::size_t c = 0; c < k.target().size(); ++c) {
      auto coords = k.target().decode(c);
      Names given = k.target().names();
      double oracle = brute_cond_mean(law, per_cell, given, coords);
      CHECK(std::abs(kh.values[c] - oracle) < 1e-14);
    }
  }
}

TEST_CASE("adjoint identity, involution and formula") {
  auto s = lt_space(3, 2, 2);
  auto law = random_law(s, 7);
  auto k = build_operator(law, Names{"S3", "S2", "D"}, Names{"S2", "S1", "D"}, Event{"G", "O"});
  auto ks = adjoint(k);
  auto kss = adjoint(ks);
  CHECK((kss.matrix() - k.matrix()).cwiseAbs().maxCoeff() < 1e-12);

  const auto na = static_cast<Eigen::Index>(k.source().size());
  const auto nc = static_cast<Eigen::Index>(k.target().size());
  for (Eigen::Index i = 0; i < na; ++i)
    for (Eigen::Index j = 0; j < nc; ++j) {
      Eigen::VectorXd h = Eigen::VectorXd::Unit(na, i);
      Eigen::VectorXd g = Eigen::VectorXd::Unit(nc, j);
      CHECK(std::abs(k.inner_target(k.apply(h), g) - k.inner_source(h, ks.apply(g))) < 1e-12);
    }

  // (K* g)(S3,S2,D) = E[1{G=O} g(S2,S1,D) | S3,S2,D] by enumeration.
  auto gv = random_values(k.target().size(), 8);
  auto tproj = projection_map(s, k.target());
  std::vector<double> per_cell(law.size());
  for (std::size_t w = 0; w < law.size(); ++w) per_cell[w] = (s.coordinate(w, 0) == 1 ? 1.0 : 0.0) * gv[tproj[w]];
  auto ksg = ks.apply(CellFunction(k.target(), gv));
  for (std::size_t a = 0; a < k.source().size(); ++a)
    CHECK(std::abs(ksg.values[a] - brute_cond_mean(law, per_cell, k.source().names(), k.source().decode(a))) < 1e-14);

  // Product law: adjoint returns the constant E[1{event} g].
  auto ps = ProductSpace({indexed_axis("A", 3), indexed_axis("C", 4)});
  auto pa = random_law(grid_space({{"A", 3}}), 9), pc = random_law(grid_space({{"C", 4}}), 10);
  std::vector<double> m;
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t c = 0; c < 4; ++c) m.push_back(pa.mass(a) * pc.mass(c));
  auto prod = build_operator(JointLaw(ps, m), Names{"A"}, Names{"C"});
  auto g4 = random_values(4, 11);
  double mean = 0.0;
  for (std::size_t c = 0; c < 4; ++c) mean += pc.mass(c) * g4[c];
  auto out = adjoint(prod).apply(CellFunction(prod.target(), g4));
  for (double v : out.values) CHECK(std::abs(v - mean) < 1e-14);
}

TEST_CASE("pseudoinverse") {
  auto space = grid_space({{"A", 2}});
  Eigen::VectorXd mass = Eigen::VectorXd::Constant(2, 0.5);
  GramOperator id{space, mass, Eigen::MatrixXd::Identity(2, 2), "I"};
  CHECK((pseudoinverse(id).matrix - Eigen::MatrixXd::Identity(2, 2)).norm() < 1e-15);

  Eigen::MatrixXd d(2, 2);
  d << 2, 0, 0, 0;
  auto pd = pseudoinverse(GramOperator{space, mass, d, "diag"});
  CHECK(pd.matrix(0, 0) == doctest::Approx(0.5));
  CHECK(pd.matrix(1, 1) == 0.0);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> z;
  Eigen::MatrixXd b(8, 5);
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = z(rng);
  Eigen::MatrixXd a = b * b.transpose();
  auto s8 = grid_space({{"A", 8}});
  auto ap = pseudoinverse(GramOperator{s8, Eigen::VectorXd::Constant(8, 0.125), a, "rand"}).matrix;
  CHECK((a * ap * a - a).norm() < 1e-8);
  CHECK((ap * a * ap - ap).norm() < 1e-8);
  CHECK(((a * ap) - (a * ap).transpose()).norm() < 1e-8);
  CHECK(((ap * a) - (ap * a).transpose()).norm() < 1e-8);

  Eigen::MatrixXd asym = a;
  asym(0, 1) += 1e-3;
  CHECK_THROWS_AS(pseudoinverse(GramOperator{s8, Eigen::VectorXd::Constant(8, 0.125), asym, "x"}), LabError);
  Eigen::MatrixXd neg = -Eigen::MatrixXd::Identity(2, 2);
  CHECK_THROWS_AS(pseudoinverse(GramOperator{space, mass, neg, "x"}), LabError);
}

TEST_CASE("Gram operator is symmetric PSD and matches K* W K") {
  auto s = lt_space(4, 2, 2);
  auto law = random_law(s, 12);
  auto k = build_operator(law, Names{"S3", "S2", "D"}, Names{"S2", "S1", "D"}, Event{"G", "O"});
  Eigen::VectorXd w = Eigen::Map<Eigen::VectorXd>(random_values(k.target().size(), 13).data(),
                                                  static_cast<Eigen::Index>(k.target().size()))
                          .array()
                          .abs() + 0.1;
  auto g = gram(k, w);
  CHECK((g.matrix - g.matrix.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g.matrix);
  CHECK(es.eigenvalues().minCoeff() > -1e-10);
  auto hv = random_values(k.source().size(), 14);
  Eigen::VectorXd h = Eigen::Map<Eigen::VectorXd>(hv.data(), static_cast<Eigen::Index>(hv.size()));
  Eigen::VectorXd direct = adjoint(k).apply(Eigen::VectorXd(w.cwiseProduct(k.apply(h))));
  CHECK((g.apply(h) - direct).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("identification diagnostics") {
  // Square nonsingular.
  auto sq = random_law(grid_space({{"V", 3}, {"Z", 3}, {"X", 2}}), 21);
  auto d = diagnose_identification(build_operator(sq, Names{"V", "X"}, Names{"Z", "X"}));
  CHECK(d.verdict == Verdict::JustIdentified);
  CHECK(d.adjoint_kernel_dim == 0);

  // |Z| = 3 > |V| = 2.
  auto over = random_law(grid_space({{"V", 2}, {"Z", 3}, {"X", 2}}), 22);
  auto op = build_operator(over, Names{"V", "X"}, Names{"Z", "X"});
  auto od = diagnose_identification(op);
  CHECK(od.verdict == Verdict::OverIdentified);
  CHECK(od.adjoint_kernel_dim == op.active_target_count() - brute_rank(active_rows(op), 1e-12));
  CHECK(od.adjoint_kernel_dim == 2);
  CHECK(od.rank + od.adjoint_kernel_dim == op.active_target_count());
  // Kernel vectors are annihilated by the adjoint.
  auto ks = adjoint(op);
  for (const auto& g : od.adjoint_kernel_basis) {
    auto out = ks.apply(g);
    for (double v : out.values) CHECK(std::abs(v) < 1e-12);
  }

  // Long-term law with S1 richer than S3.
  auto lt = random_law(lt_space(4, 2, 2), 23);
  auto k = build_operator(lt, Names{"S3", "S2", "D"}, Names{"S2", "S1", "D"}, Event{"G", "O"});
  auto kd = diagnose_identification(k);
  CHECK(kd.verdict == Verdict::OverIdentified);
  CHECK(kd.adjoint_kernel_dim == k.active_target_count() - brute_rank(active_rows(k), 1e-12));

  // Tolerance monotonicity.
  auto loose = diagnose_identification(k, 1e-2);
  CHECK(loose.rank <= kd.rank);

  // Relabeling axes does not change the verdict.
  auto rel = build_operator(lt, Names{"D", "S2", "S3"}, Names{"D", "S1", "S2"}, Event{"G", "O"});
  CHECK(diagnose_identification(rel).adjoint_kernel_dim == kd.adjoint_kernel_dim);
}

TEST_CASE("triangle tangent spaces") {
  auto s = ProductSpace({Axis("W", {"a", "b", "c"})});
  JointLaw p(s, {0.4, 0.4, 0.2});
  std::vector<double> ind_a{1.0, 0.0, 0.0};

  auto p1 = tangent_dim_demo({}, p);
  CHECK(p1.tangent_dim == 2);
  CHECK(p1.full_dim == 2);
  CHECK(p1.verdict == Verdict::JustIdentified);
  CHECK(tangent_efficiency_bound(p1, p, ind_a) == doctest::Approx(0.24));

  MassConstraint half_b{{-0.5, 1.0, 0.0}, 0.0, MassConstraint::Kind::AtLeast};
  auto p2 = tangent_dim_demo({half_b}, p);
  CHECK(p2.tangent_dim == 2);
  CHECK(p2.verdict == Verdict::JustIdentified);

  MassConstraint equal_ab{{1.0, -1.0, 0.0}, 0.0, MassConstraint::Kind::Equal};
  auto p3 = tangent_dim_demo({equal_ab}, p);
  CHECK(p3.tangent_dim == 1);
  CHECK(p3.full_dim == 2);
  CHECK(p3.verdict == Verdict::OverIdentified);
  CHECK(tangent_efficiency_bound(p3, p, ind_a) == doctest::Approx(0.04));

  JointLaw off(s, {0.5, 0.3, 0.2});
  CHECK_THROWS_AS(tangent_dim_demo({equal_ab}, off), LabError);
}
