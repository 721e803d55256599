#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "latentjudge/theory.hpp"

using namespace lj;
using namespace lj::theory;

namespace {
DiscreteWorld tiny_world(std::vector<double> p_x, std::vector<double> rows, std::vector<double> g) {
  DiscreteWorld w;
  w.n_x = static_cast<std::int64_t>(p_x.size());
  w.n_r = static_cast<std::int64_t>(g.size());
  w.p_x = std::move(p_x);
  w.p_r_given_x = std::move(rows);
  w.g = std::move(g);
  w.validate();
  return w;
}
}  // namespace

TEST_SUITE_BEGIN("theory");

TEST_CASE("bayes_posterior: symmetry, point mass, enumerated sum") {
  auto w = tiny_world({1.0}, {0.5, 0.5}, {0.0, 1.0});
  CHECK(w.bayes_posterior(0) == doctest::Approx(0.5).epsilon(1e-15));

  auto point = tiny_world({1.0}, {0.0, 1.0, 0.0}, {0.3, 0.8, 0.1});
  CHECK(point.bayes_posterior(0) == doctest::Approx(0.8).epsilon(1e-15));

  auto three = tiny_world({1.0}, {0.2, 0.3, 0.5}, {0.1, 0.5, 0.9});
  CHECK(three.bayes_posterior(0) == doctest::Approx(0.62).epsilon(1e-12));

  CHECK_THROWS_AS(three.bayes_posterior(5), InputError);
}

TEST_CASE("check_sufficiency: identity draft has zero gaps") {
  Rng rng(3);
  auto w = DiscreteWorld::random(rng, 5, 4);
  auto rep = check_sufficiency(w, DraftMap::identity(5));
  CHECK(rep.premise_gap == 0.0);
  CHECK(rep.conclusion_gap == 0.0);
  CHECK(rep.premise_holds);
  CHECK(rep.implication_holds);
}

TEST_CASE("check_sufficiency: exact constructed instance of the implication") {
  Rng rng(7);
  auto [w, d] = make_block_world(rng, 3, 3, 4);
  auto rep = check_sufficiency(w, d);
  CHECK(rep.premise_gap <= 1e-12);
  CHECK(rep.conclusion_gap <= 1e-12);
  CHECK(rep.implication_holds);
}

TEST_CASE("check_sufficiency: constant draft on distinct posteriors flags the premise") {
  auto w = tiny_world({0.5, 0.5}, {0.9, 0.1, 0.2, 0.8}, {1.0, 0.0});
  auto rep = check_sufficiency(w, DraftMap::constant(2));
  CHECK(rep.premise_gap > 0.0);
  CHECK(!rep.premise_holds);
  CHECK(rep.implication_holds);  // vacuous: no conclusion claim is made
}

TEST_CASE("prop 1 property: 100+ posterior-respecting drafts, zero counterexamples") {
  Rng rng(11);
  int violations = 0;
  for (int i = 0; i < 110; ++i) {
    auto [w, d] = make_block_world(rng, rng.randint(2, 4), rng.randint(1, 3), rng.randint(2, 5));
    auto rep = check_sufficiency(w, d);
    if (!(rep.premise_gap <= 1e-12 && rep.conclusion_gap <= 1e-12)) ++violations;
  }
  CHECK(violations == 0);
}

TEST_CASE("tv_bound_check: identity draft, frozen two-state case, constant payoff") {
  Rng rng(5);
  auto w = DiscreteWorld::random(rng, 4, 3);
  auto rep = tv_bound_check(w, DraftMap::identity(4));
  for (std::size_t x = 0; x < 4; ++x) {
    CHECK(rep.lhs[x] == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(rep.rhs[x] == doctest::Approx(0.0).epsilon(1e-15));
  }

  // mixture cell [0.9,0.1] + [0.7,0.3] with equal mass gives p(R|S) = [0.8,0.2]
  auto pair = tiny_world({0.5, 0.5}, {0.9, 0.1, 0.7, 0.3}, {1.0, 0.0});
  auto rep2 = tv_bound_check(pair, DraftMap::constant(2));
  CHECK(rep2.ok);
  CHECK(rep2.lhs[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(rep2.rhs[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(std::abs(rep2.lhs[0] - rep2.rhs[0]) <= 1e-12);  // bound is tight here

  auto flat = tiny_world({0.5, 0.5}, {0.9, 0.1, 0.1, 0.9}, {0.4, 0.4});
  auto rep3 = tv_bound_check(flat, DraftMap::constant(2));
  CHECK(rep3.ok);
  CHECK(rep3.lhs[0] == doctest::Approx(0.0).epsilon(1e-13));
  CHECK(rep3.rhs[0] > 0.0);
}

TEST_CASE("prop 2 property: random triples never violate the bound") {
  Rng rng(13);
  std::int64_t triples = 0;
  while (triples < 2000) {
    auto w = DiscreteWorld::random(rng, rng.randint(2, 8), rng.randint(2, 6));
    auto d = DraftMap::random(rng, w.n_x, rng.randint(1, w.n_x));
    auto rep = tv_bound_check(w, d);
    CHECK(rep.ok);
    triples += w.n_x;
  }
}

TEST_CASE("risk_decomposition: singleton classes give all zeros") {
  Rng rng(17);
  auto w = DiscreteWorld::random(rng, 3, 2);
  HypothesisClasses classes;
  classes.drafts.push_back(DraftMap::identity(3));
  ReadoutMap h;
  h.n_s = 3;
  h.table = {0.2, 0.5, 0.9};
  classes.readouts.push_back(h);
  auto rep = risk_decomposition(w, classes, LossKind::bce);
  REQUIRE(rep.rows.size() == 1);
  CHECK(rep.rows[0].excess_risk == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(rep.rows[0].extraction_error == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(rep.rows[0].readout_error == doctest::Approx(0.0).epsilon(1e-15));

  HypothesisClasses empty;
  CHECK_THROWS_AS(risk_decomposition(w, empty, LossKind::bce), UsageError);
}

TEST_CASE("risk_decomposition: 4 states, |Phi|=3, |H|=4, matches brute-force recomputation") {
  Rng rng(19);
  auto w = DiscreteWorld::random(rng, 4, 3);
  HypothesisClasses classes;
  classes.drafts.push_back(DraftMap::identity(4));
  classes.drafts.push_back(DraftMap::constant(4));
  classes.drafts.push_back(DraftMap::random(rng, 4, 2));
  for (int hi = 0; hi < 4; ++hi) {
    ReadoutMap h;
    h.n_s = 4;
    h.table.resize(4);
    for (auto& v : h.table) v = rng.uniform();
    classes.readouts.push_back(h);
  }
  auto rep = risk_decomposition(w, classes, LossKind::bce);

  // independent double-loop oracle over the same classes
  auto risk_of = [&](const DraftMap& phi, const ReadoutMap& h) {
    double risk = 0.0;
    for (std::int64_t x = 0; x < w.n_x; ++x) {
      double p1 = w.bayes_posterior(x);
      double f = h.value(phi.s_of[static_cast<std::size_t>(x)], x);
      risk += w.p_x[static_cast<std::size_t>(x)] *
              (p1 * pointwise_loss(LossKind::bce, f, 1) + (1.0 - p1) * pointwise_loss(LossKind::bce, f, 0));
    }
    return risk;
  };
  double global_best = 1e300;
  std::vector<double> star(classes.drafts.size(), 1e300);
  for (std::size_t pi = 0; pi < classes.drafts.size(); ++pi) {
    for (std::size_t hi = 0; hi < classes.readouts.size(); ++hi) {
      double r = risk_of(classes.drafts[pi], classes.readouts[hi]);
      star[pi] = std::min(star[pi], r);
      global_best = std::min(global_best, r);
    }
  }
  for (const auto& row : rep.rows) {
    double r = risk_of(classes.drafts[row.phi_index], classes.readouts[row.h_index]);
    CHECK(row.risk == doctest::Approx(r).epsilon(1e-13));
    CHECK(row.excess_risk == doctest::Approx(r - global_best).epsilon(1e-12));
    CHECK(row.extraction_error == doctest::Approx(star[row.phi_index] - global_best).epsilon(1e-12));
    CHECK(row.readout_error == doctest::Approx(r - star[row.phi_index]).epsilon(1e-12));
    CHECK(row.identity_gap <= 1e-12);
  }
  CHECK(rep.max_identity_gap <= 1e-12);
}

TEST_CASE("ib_sweep: constant draft, full capacity, entropy bound, monotone") {
  Rng rng(23);
  auto w = DiscreteWorld::random(rng, 6, 3);
  auto curve = ib_sweep(w, {1, 2, 3, 6});
  CHECK(curve[0].i_sx == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(curve[0].i_sy == doctest::Approx(0.0).epsilon(1e-12));
  double p1 = 0.0;
  for (std::int64_t x = 0; x < w.n_x; ++x) p1 += w.p_x[static_cast<std::size_t>(x)] * w.bayes_posterior(x);
  CHECK(curve[0].accuracy == doctest::Approx(std::max(p1, 1.0 - p1)).epsilon(1e-12));

  double ixy = mutual_information_sy(w, DraftMap::identity(6));
  CHECK(curve.back().i_sy == doctest::Approx(ixy).epsilon(1e-12));

  double hy = entropy_y(w);
  CHECK(hy <= 1.0 + 1e-12);
  for (std::size_t i = 0; i < curve.size(); ++i) {
    CHECK(curve[i].i_sy <= hy + 1e-12);
    if (i > 0) CHECK(curve[i].i_sy >= curve[i - 1].i_sy - 1e-12);
  }

  CHECK_THROWS_AS(ib_sweep(w, {0, 1}), ConfigError);
  CHECK_THROWS_AS(ib_sweep(w, {3, 2}), ConfigError);
}

TEST_CASE("approximation chain: identity drafts, tv cross-check") {
  Rng rng(29);
  auto w = DiscreteWorld::random(rng, 5, 4);
  auto identity = approximation_chain_report(w, DraftMap::identity(5));
  CHECK(identity.max_gap == doctest::Approx(0.0).epsilon(1e-15));

  auto d = DraftMap::random(rng, 5, 2);
  auto chain = approximation_chain_report(w, d);
  auto tv = tv_bound_check(w, d);
  for (std::size_t x = 0; x < 5; ++x) {
    CHECK(chain.rows[x].gap == doctest::Approx(tv.lhs[x]).epsilon(1e-14));
  }
}

TEST_CASE("world file round trip and parse errors") {
  Rng rng(31);
  auto w = DiscreteWorld::random(rng, 4, 3);
  auto path = std::filesystem::temp_directory_path() / "lj_world.txt";
  w.save(path.string());
  auto loaded = DiscreteWorld::load(path.string());
  CHECK(loaded.n_x == w.n_x);
  CHECK(loaded.n_r == w.n_r);
  for (std::size_t i = 0; i < w.p_r_given_x.size(); ++i) {
    CHECK(loaded.p_r_given_x[i] == doctest::Approx(w.p_r_given_x[i]).epsilon(1e-15));
  }
  std::filesystem::remove(path);

  auto bad = std::filesystem::temp_directory_path() / "lj_world_bad.txt";
  {
    std::ofstream f(bad);
    f << "x_states 2\nr_states 2\nbogus 1\n";
  }
  CHECK_THROWS_WITH_AS(DiscreteWorld::load(bad.string()), doctest::Contains("bogus"), ParseError);
  std::filesystem::remove(bad);
}

TEST_CASE("verify_all: zero violations on a reduced run") {
  auto sum = verify_all(99, 30, 1500);
  CHECK(sum.prop1_violations == 0);
  CHECK(sum.prop2_violations == 0);
  CHECK(sum.decomposition_violations == 0);
  CHECK(sum.ib_monotonicity_violations == 0);
  CHECK(sum.chain_violations == 0);
  CHECK(sum.all_pass);
  CHECK(sum.prop1_worlds >= 30);
  CHECK(sum.prop2_triples >= 1500);
}

TEST_SUITE_END();
