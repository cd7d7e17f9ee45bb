#include <cmath>
#include <random>

#include "doctest.h"
#include "localid/finite_law.hpp"
#include "test_support.hpp"

using namespace localid;
using namespace testing_support;

namespace {

ProductSpace triangle_space() { return ProductSpace({Axis("W", {"a", "b", "c"})}); }

JointLaw triangle_law() { return JointLaw(triangle_space(), {0.4, 0.4, 0.2}); }

}  // namespace

TEST_CASE("law construction validates the simplex") {
  CHECK_THROWS_AS(JointLaw(triangle_space(), {0.5, 0.5, 0.1}), LabError);
  CHECK_THROWS_AS(JointLaw(triangle_space(), {1.2, -0.2, 0.0}), LabError);
  CHECK_THROWS_AS(Axis("A", {"x", "x"}), LabError);
  CHECK_THROWS_AS(ProductSpace({indexed_axis("A", 2), indexed_axis("A", 3)}), LabError);
}

TEST_CASE("marginal") {
  auto s = ProductSpace({Axis("first", {"a", "b"}), Axis("second", {"0", "1"})});
  auto m = marginal(JointLaw::uniform(s), std::vector<std::string>{"first"});
  CHECK(m.mass(0) == doctest::Approx(0.5));
  CHECK(m.mass(1) == doctest::Approx(0.5));

  auto p = triangle_law();
  auto same = marginal(p, std::vector<std::string>{"W"});
  for (std::size_t i = 0; i < 3; ++i) CHECK(same.mass(i) == p.mass(i));

  auto law = random_law(grid_space({{"R", 3}, {"C", 4}}), 11);
  auto col = marginal(law, std::vector<std::string>{"C"});
  for (std::size_t c = 0; c < 4; ++c) {
    double sum = 0.0;
    for (std::size_t r = 0; r < 3; ++r) sum += law.mass(r * 4 + c);
    CHECK(col.mass(c) == doctest::Approx(sum).epsilon(1e-14));
  }
  CHECK_THROWS_AS(marginal(law, std::vector<std::string>{"Q"}), LabError);
}

TEST_CASE("condition") {
  auto s = ProductSpace({Axis("first", {"a", "b"}), Axis("second", {"0", "1"})});
  auto c = condition(JointLaw::uniform(s), {{"first", "a"}});
  CHECK(c.space().rank() == 1);
  CHECK(c.mass(0) == doctest::Approx(0.5));

  auto xs = ProductSpace({Axis("X", {"x", "y"}), Axis("T", {"1", "0"})});
  JointLaw law(xs, {0.35, 0.15, 0.2, 0.3});
  auto t = condition(law, {{"X", "x"}});
  CHECK(t.mass(0) == doctest::Approx(0.7).epsilon(1e-14));
  CHECK(t.mass(1) == doctest::Approx(0.3).epsilon(1e-14));

  JointLaw holey(xs, {0.5, 0.5, 0.0, 0.0});
  CHECK_THROWS_AS(condition(holey, {{"X", "y"}}), LabError);
}

TEST_CASE("marginal of a conditional matches enumeration") {
  auto s = grid_space({{"A", 3}, {"B", 2}, {"C", 4}});
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto law = random_law(s, seed);
    auto m = marginal(condition(law, {{"B", "1"}}), std::vector<std::string>{"C"});
    double den = 0.0;
    std::vector<double> num(4, 0.0);
    for (std::size_t w = 0; w < law.size(); ++w) {
      if (s.coordinate(w, 1) != 1) continue;
      num[s.coordinate(w, 2)] += law.mass(w);
      den += law.mass(w);
    }
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(m.mass(c) - num[c] / den) < 1e-12);
  }
}

TEST_CASE("expectation") {
  auto p = triangle_law();
  CHECK(expectation(p, CellFunction::constant(triangle_space(), 1.0)) == doctest::Approx(1.0));
  CHECK(expectation(p, CellFunction(triangle_space(), {1.0, 0.0, 0.0})) == doctest::Approx(0.4));

  auto s = grid_space({{"A", 3}, {"B", 5}});
  auto law = random_law(s, 3);
  auto v = random_values(5, 4);
  auto sub = s.subspace(std::vector<std::string>{"B"});
  double brute = 0.0;
  for (std::size_t w = 0; w < law.size(); ++w) brute += law.mass(w) * v[s.coordinate(w, 1)];
  CHECK(std::abs(expectation(law, CellFunction(sub, v)) - brute) < 1e-14);
}

TEST_CASE("conditional expectation") {
  auto s = grid_space({{"A", 3}, {"B", 2}});
  auto law = random_law(s, 9);
  auto ce = cond_expectation(law, CellFunction::constant(s.subspace(std::vector<std::string>{"A"}), 2.5),
                             std::vector<std::string>{"B"});
  for (double v : ce.values) CHECK(v == doctest::Approx(2.5));

  // Triangle with the partition {a,b},{c}.
  auto tri = ProductSpace({Axis("W", {"a", "b", "c"}), Axis("part", {"ab", "c"})});
  JointLaw p(tri, {0.4, 0.0, 0.4, 0.0, 0.0, 0.2});
  auto ind = cond_expectation(p, CellFunction(triangle_space(), {1.0, 0.0, 0.0}), std::vector<std::string>{"part"});
  CHECK(ind.values[0] == doctest::Approx(0.5));
  CHECK(ind.values[1] == doctest::Approx(0.0));

  // Independence.
  auto indep = ProductSpace({indexed_axis("A", 3), indexed_axis("B", 2)});
  std::vector<double> pa{0.2, 0.3, 0.5}, pb{0.6, 0.4};
  std::vector<double> m;
  for (double x : pa)
    for (double y : pb) m.push_back(x * y);
  JointLaw prod(indep, m);
  CellFunction f(indep.subspace(std::vector<std::string>{"A"}), {1.0, -2.0, 4.0});
  auto e = cond_expectation(prod, f, std::vector<std::string>{"B"});
  double mean = 0.2 - 0.6 + 2.0;
  for (double v : e.values) CHECK(v == doctest::Approx(mean).epsilon(1e-14));

  // Zero-mass conditioning cells are flagged and zero.
  JointLaw holey(indep, {0.5, 0.0, 0.5, 0.0, 0.0, 0.0});
  auto h = cond_expectation(holey, f, std::vector<std::string>{"B"});
  CHECK(h.is_flagged(1));
  CHECK(h.values[1] == 0.0);
  CHECK_FALSE(h.is_flagged(0));
}

TEST_CASE("perturb is the linear path") {
  auto s = ProductSpace({Axis("W", {"a", "b"})});
  auto u = JointLaw::uniform(s);
  ScoreFunction g(u, {1.0, -1.0});
  auto p = perturb(u, g, 0.1);
  CHECK(p.mass(0) == doctest::Approx(0.55));
  CHECK(p.mass(1) == doctest::Approx(0.45));
  auto same = perturb(u, g, 0.0);
  CHECK(same.mass(0) == u.mass(0));
  CHECK_THROWS_AS(perturb(u, g, 1.5), LabError);

  auto law = random_law(grid_space({{"A", 4}, {"B", 3}}), 21);
  auto score = ScoreFunction::centered(law, random_values(law.size(), 22));
  const double theta = 1e-3;
  auto q = perturb(law, score, theta);
  for (std::size_t w = 0; w < law.size(); ++w) {
    double rec = (q.mass(w) - law.mass(w)) / (theta * law.mass(w));
    CHECK(std::abs(rec - score.values()[w]) < 1e-9);
  }
}

TEST_CASE("pushforward") {
  auto s = grid_space({{"A", 2}, {"B", 3}});
  auto law = random_law(s, 5);
  auto id = pushforward(law, s, [](std::span<const std::size_t> c) { return std::vector<std::size_t>(c.begin(), c.end()); });
  CHECK(total_variation(id, law) < 1e-15);

  auto t = grid_space({{"A", 2}});
  auto first = [](std::span<const std::size_t> c) { return std::vector<std::size_t>{c[0]}; };
  auto m = pushforward(law, t, first);
  CHECK(m.mass(0) == doctest::Approx(law.mass(0) + law.mass(1) + law.mass(2)));

  auto law2 = random_law(s, 6);
  const double alpha = 0.3;
  std::vector<double> mix(law.size());
  for (std::size_t w = 0; w < law.size(); ++w) mix[w] = alpha * law.mass(w) + (1 - alpha) * law2.mass(w);
  auto lhs = pushforward(JointLaw(s, mix), t, first);
  auto r1 = pushforward(law, t, first);
  auto r2 = pushforward(law2, t, first);
  for (std::size_t c = 0; c < t.size(); ++c)
    CHECK(std::abs(lhs.mass(c) - (alpha * r1.mass(c) + (1 - alpha) * r2.mass(c))) < 1e-14);
}

TEST_CASE("empirical law and datasets") {
  auto s = ProductSpace({Axis("A", {"x", "y"}), Axis("B", {"0", "1", "2"})});
  auto d = make_dataset(s, {{"x", "1"}, {"x", "1"}, {"x", "1"}});
  auto e = empirical_law(d);
  CHECK(e.mass(1) == 1.0);
  CHECK_THROWS_AS(make_dataset(s, {{"z", "1"}}), LabError);
  CHECK_THROWS_AS(empirical_law(Dataset{s, {}}), LabError);

  auto law = random_law(s, 77);
  std::mt19937_64 rng(78);
  std::discrete_distribution<std::uint32_t> pick(law.mass().begin(), law.mass().end());
  Dataset big{s, {}};
  for (int i = 0; i < 100000; ++i) big.cells.push_back(pick(rng));
  CHECK(total_variation(empirical_law(big), law) < 0.02);

  auto csv = dataset_to_csv(d);
  auto back = dataset_from_csv(csv, s);
  CHECK(back.cells == d.cells);
  CHECK_THROWS_AS(dataset_from_csv("A,B\nx,7\n", s), LabError);
}

TEST_CASE("law table round trip is bit exact") {
  auto s = ProductSpace({Axis("G", {"E", "O"}), Axis("Y", {"0", "0.25", "NA"})});
  auto law = random_law(s, 31);
  auto text = law_to_table(law);
  auto back = law_from_table(text);
  CHECK(back.space() == law.space());
  for (std::size_t w = 0; w < law.size(); ++w) CHECK(back.mass(w) == law.mass(w));
  CHECK(law_to_table(back) == text);
}
