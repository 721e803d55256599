#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "latentjudge/common.hpp"

namespace lj::theory {

// ---------------------------------------------------------------------------
// Enumerable joint distributions over (X, R, y). The label depends on X only
// through the latent risk state R: y ~ Bernoulli(g(R)), R ~ p(R|X), so the
// conditional independence y | R holds by construction and every integral
// becomes a finite sum evaluated to machine precision.
// ---------------------------------------------------------------------------

struct DiscreteWorld {
  std::int64_t n_x = 0;
  std::int64_t n_r = 0;
  std::vector<double> p_x;          // |X|
  std::vector<double> p_r_given_x;  // |X| x |R|, row-stochastic
  std::vector<double> g;            // |R|, g[r] = P(y=1 | R=r)

  void validate() const;
  double posterior_r(std::int64_t x, std::int64_t r) const {
    return p_r_given_x[static_cast<std::size_t>(x * n_r + r)];
  }
  // p(y=1 | X=x) = sum_r g(r) p(r|x)
  double bayes_posterior(std::int64_t x) const;

  static DiscreteWorld random(Rng& rng, std::int64_t n_x, std::int64_t n_r);

  void save(const std::string& path) const;
  static DiscreteWorld load(const std::string& path);
};

// Deterministic draft S = s(X) over finite states.
struct DraftMap {
  std::vector<std::int64_t> s_of;

  std::int64_t n_x() const { return static_cast<std::int64_t>(s_of.size()); }
  std::int64_t n_s() const;
  void validate(const DiscreteWorld& w) const;

  static DraftMap identity(std::int64_t n_x);
  static DraftMap constant(std::int64_t n_x);
  static DraftMap random(Rng& rng, std::int64_t n_x, std::int64_t n_s);
};

// p(R | S=s) with p_X marginalized over the draft cell.
std::vector<double> posterior_r_given_s(const DiscreteWorld& w, const DraftMap& d, std::int64_t s);
// p(y=1 | S=s)
double posterior_y_given_s(const DiscreteWorld& w, const DraftMap& d, std::int64_t s);

// ---------------------------------------------------------------------------
// Posterior sufficiency (premise: p(R|X) = p(R|S); conclusion: p(y|X) = p(y|S)).
// ---------------------------------------------------------------------------

struct SufficiencyReport {
  double premise_gap = 0.0;     // max over x, r of |p(r|x) - p(r|s(x))|
  double conclusion_gap = 0.0;  // max over x of |p(y|x) - p(y|s(x))|
  double tolerance = 1e-12;
  bool premise_holds = false;
  bool conclusion_holds = false;
  bool implication_holds = false;  // premise_holds => conclusion_holds
  nlohmann::json to_json() const;
};

SufficiencyReport check_sufficiency(const DiscreteWorld& w, const DraftMap& d, double tolerance = 1e-12);

// ---------------------------------------------------------------------------
// Total-variation bound: |p(y=1|x) - p(y=1|s(x))| <= TV(p(R|x), p(R|s(x))).
// ---------------------------------------------------------------------------

struct TvBoundReport {
  bool ok = true;
  double max_violation = 0.0;  // max over x of lhs - rhs (negative when bound holds)
  std::int64_t tightest_x = -1;  // smallest slack rhs - lhs
  std::int64_t loosest_x = -1;   // largest slack
  std::vector<double> lhs;
  std::vector<double> rhs;
  nlohmann::json to_json() const;
};

TvBoundReport tv_bound_check(const DiscreteWorld& w, const DraftMap& d);

// ---------------------------------------------------------------------------
// Exact excess-risk decomposition over finite hypothesis classes.
// ---------------------------------------------------------------------------

// Readout h maps (s) or (s, x) to a predicted probability of y=1.
struct ReadoutMap {
  bool depends_on_x = false;
  std::int64_t n_s = 0;
  std::int64_t n_x = 0;          // required when depends_on_x
  std::vector<double> table;     // n_s or n_s * n_x entries in [0,1]
  double value(std::int64_t s, std::int64_t x) const {
    return depends_on_x ? table[static_cast<std::size_t>(s * n_x + x)] : table[static_cast<std::size_t>(s)];
  }
};

struct HypothesisClasses {
  std::vector<DraftMap> drafts;
  std::vector<ReadoutMap> readouts;
};

enum class LossKind { bce, brier };

double pointwise_loss(LossKind kind, double predicted, int label);
// population risk of f(x) = h(phi(x), x) under the world's joint
double population_risk(const DiscreteWorld& w, const DraftMap& phi, const ReadoutMap& h, LossKind loss);

struct RiskDecompositionRow {
  std::size_t phi_index = 0;
  std::size_t h_index = 0;
  double risk = 0.0;
  double extraction_error = 0.0;
  double readout_error = 0.0;
  double excess_risk = 0.0;
  double identity_gap = 0.0;  // |excess - (extraction + readout)|
};

struct RiskDecompositionReport {
  std::vector<RiskDecompositionRow> rows;
  std::vector<double> best_risk_per_phi;  // R*(phi)
  double best_risk = 0.0;                 // inf over both classes
  std::size_t argmin_phi = 0;
  std::size_t argmin_h = 0;
  double max_identity_gap = 0.0;
  nlohmann::json to_json() const;
};

RiskDecompositionReport risk_decomposition(const DiscreteWorld& w, const HypothesisClasses& classes,
                                           LossKind loss);

// ---------------------------------------------------------------------------
// Information-bottleneck capacity sweep: per capacity k, search partitions of
// X into at most k cells for the highest I(S;y); exact mutual informations in
// bits. Exhaustive below kExhaustiveLimit states, greedy merges above.
// ---------------------------------------------------------------------------

constexpr std::int64_t kExhaustiveLimit = 12;

struct IbPoint {
  std::int64_t capacity = 0;
  double i_sx = 0.0;      // = H(S) for a deterministic draft
  double i_sy = 0.0;
  double accuracy = 0.0;  // Bayes accuracy reading y from the best S
  bool exhaustive = true; // greedy results are lower bounds
  DraftMap best;
};

std::vector<IbPoint> ib_sweep(const DiscreteWorld& w, std::vector<std::int64_t> capacities);

double mutual_information_sy(const DiscreteWorld& w, const DraftMap& d);  // bits
double mutual_information_sx(const DiscreteWorld& w, const DraftMap& d);  // bits
double entropy_y(const DiscreteWorld& w);                                 // bits
double bayes_accuracy_from_s(const DiscreteWorld& w, const DraftMap& d);

// ---------------------------------------------------------------------------
// Approximation chain p(y|X) ~ p(y|S,X) ~ p(y|S). For a deterministic draft
// p(y|S,X) equals p(y|X) identically, so only the outer gap is nontrivial.
// ---------------------------------------------------------------------------

struct ChainRow {
  std::int64_t x = 0;
  double p_y_given_x = 0.0;
  double p_y_given_s = 0.0;
  double gap = 0.0;
};

struct ChainReport {
  std::vector<ChainRow> rows;
  double max_gap = 0.0;
  nlohmann::json to_json() const;
};

ChainReport approximation_chain_report(const DiscreteWorld& w, const DraftMap& d);

// ---------------------------------------------------------------------------
// Randomized verification suites.
// ---------------------------------------------------------------------------

// A world built from duplicated posterior rows plus the draft that merges
// exactly the duplicates; the sufficiency premise holds by construction.
std::pair<DiscreteWorld, DraftMap> make_block_world(Rng& rng, std::int64_t n_groups,
                                                    std::int64_t max_dup, std::int64_t n_r);

struct VerifySummary {
  std::int64_t prop1_worlds = 0;
  std::int64_t prop1_violations = 0;
  std::int64_t prop2_triples = 0;
  std::int64_t prop2_violations = 0;
  std::int64_t decomposition_pairs = 0;
  std::int64_t decomposition_violations = 0;
  double decomposition_max_gap = 0.0;
  std::int64_t ib_points = 0;
  std::int64_t ib_monotonicity_violations = 0;
  std::int64_t chain_checks = 0;
  std::int64_t chain_violations = 0;
  bool all_pass = false;
  nlohmann::json to_json() const;
};

VerifySummary verify_all(std::uint64_t seed, std::int64_t prop1_worlds = 120,
                         std::int64_t prop2_triples = 10000);

}  // namespace lj::theory
