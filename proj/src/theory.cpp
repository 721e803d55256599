#include "latentjudge/theory.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

using nlohmann::json;

namespace lj::theory {

namespace {

constexpr double kTinyTol = 1e-12;
constexpr double kProbClamp = 1e-12;

double log2_safe(double x) { return std::log2(x); }

// xlog2(p/q) with the 0*log(0) = 0 convention
double plogpq(double p, double q) {
  if (p <= 0.0) return 0.0;
  return p * log2_safe(p / q);
}

}  // namespace

// ---------------------------------------------------------------------------
// DiscreteWorld
// ---------------------------------------------------------------------------

void DiscreteWorld::validate() const {
  if (n_x < 1 || n_r < 1) throw ConfigError("world: needs at least one X and one R state");
  if (static_cast<std::int64_t>(p_x.size()) != n_x) throw ConfigError("world: p_x length mismatch");
  if (static_cast<std::int64_t>(p_r_given_x.size()) != n_x * n_r) {
    throw ConfigError("world: p_r_given_x size mismatch");
  }
  if (static_cast<std::int64_t>(g.size()) != n_r) throw ConfigError("world: p_y_given_r length mismatch");
  double sx = 0.0;
  for (double v : p_x) {
    if (v <= 0.0) throw ConfigError("world: p_x entries must be positive");
    sx += v;
  }
  if (std::abs(sx - 1.0) > 1e-9) throw ConfigError("world: p_x sums to " + std::to_string(sx));
  for (std::int64_t x = 0; x < n_x; ++x) {
    double s = 0.0;
    for (std::int64_t r = 0; r < n_r; ++r) {
      double v = posterior_r(x, r);
      if (v < 0.0) throw ConfigError("world: negative p(R|X) entry");
      s += v;
    }
    if (std::abs(s - 1.0) > kTinyTol) {
      throw ConfigError("world: p(R|X=" + std::to_string(x) + ") sums to " + std::to_string(s));
    }
  }
  for (double v : g) {
    if (v < 0.0 || v > 1.0) throw ConfigError("world: p(y|R) entry outside [0,1]");
  }
}

double DiscreteWorld::bayes_posterior(std::int64_t x) const {
  if (x < 0 || x >= n_x) {
    throw InputError("bayes_posterior: unknown X state " + std::to_string(x) + " of " + std::to_string(n_x));
  }
  double p = 0.0;
  for (std::int64_t r = 0; r < n_r; ++r) p += g[static_cast<std::size_t>(r)] * posterior_r(x, r);
  return p;
}

DiscreteWorld DiscreteWorld::random(Rng& rng, std::int64_t n_x, std::int64_t n_r) {
  DiscreteWorld w;
  w.n_x = n_x;
  w.n_r = n_r;
  auto dirichlet = [&rng](std::int64_t n, std::vector<double>& out, std::int64_t offset) {
    double sum = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      double v = -std::log(1.0 - rng.uniform());
      out[static_cast<std::size_t>(offset + i)] = v;
      sum += v;
    }
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(offset + i)] /= sum;
  };
  w.p_x.resize(static_cast<std::size_t>(n_x));
  dirichlet(n_x, w.p_x, 0);
  w.p_r_given_x.resize(static_cast<std::size_t>(n_x * n_r));
  for (std::int64_t x = 0; x < n_x; ++x) dirichlet(n_r, w.p_r_given_x, x * n_r);
  w.g.resize(static_cast<std::size_t>(n_r));
  for (auto& v : w.g) v = rng.uniform();
  return w;
}

void DiscreteWorld::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.precision(17);
  f << "x_states " << n_x << "\n";
  f << "r_states " << n_r << "\n";
  f << "p_x";
  for (double v : p_x) f << " " << v;
  f << "\np_r_given_x\n";
  for (std::int64_t x = 0; x < n_x; ++x) {
    for (std::int64_t r = 0; r < n_r; ++r) f << (r ? " " : "") << posterior_r(x, r);
    f << "\n";
  }
  f << "p_y_given_r";
  for (double v : g) f << " " << v;
  f << "\n";
}

DiscreteWorld DiscreteWorld::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  DiscreteWorld w;
  std::string line;
  std::int64_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw ParseError(path + ": line " + std::to_string(line_no) + ": " + msg);
  };
  auto next_line = [&](std::string& out) {
    while (std::getline(f, out)) {
      ++line_no;
      auto hash = out.find('#');
      if (hash != std::string::npos) out = out.substr(0, hash);
      if (out.find_first_not_of(" \t\r") != std::string::npos) return true;
    }
    return false;
  };
  bool have_rows = false;
  while (next_line(line)) {
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "x_states") {
      if (!(is >> w.n_x)) fail("expected integer after x_states");
    } else if (key == "r_states") {
      if (!(is >> w.n_r)) fail("expected integer after r_states");
    } else if (key == "p_x") {
      double v;
      while (is >> v) w.p_x.push_back(v);
    } else if (key == "p_r_given_x") {
      if (w.n_x < 1 || w.n_r < 1) fail("p_r_given_x must follow x_states and r_states");
      for (std::int64_t x = 0; x < w.n_x; ++x) {
        if (!next_line(line)) fail("missing row " + std::to_string(x) + " of p_r_given_x");
        std::istringstream row(line);
        double v;
        std::int64_t count = 0;
        while (row >> v) {
          w.p_r_given_x.push_back(v);
          ++count;
        }
        if (count != w.n_r) fail("row has " + std::to_string(count) + " entries, expected " + std::to_string(w.n_r));
      }
      have_rows = true;
    } else if (key == "p_y_given_r") {
      double v;
      while (is >> v) w.g.push_back(v);
    } else {
      fail("unknown directive '" + key + "'");
    }
  }
  if (!have_rows) throw ParseError(path + ": missing p_r_given_x table");
  w.validate();
  return w;
}

// ---------------------------------------------------------------------------
// DraftMap
// ---------------------------------------------------------------------------

std::int64_t DraftMap::n_s() const {
  std::int64_t m = 0;
  for (auto s : s_of) m = std::max(m, s + 1);
  return m;
}

void DraftMap::validate(const DiscreteWorld& w) const {
  if (n_x() != w.n_x) {
    throw ConfigError("draft: defined on " + std::to_string(n_x()) + " states, world has " +
                      std::to_string(w.n_x));
  }
  for (auto s : s_of) {
    if (s < 0) throw ConfigError("draft: negative draft state");
  }
}

DraftMap DraftMap::identity(std::int64_t n_x) {
  DraftMap d;
  d.s_of.resize(static_cast<std::size_t>(n_x));
  for (std::int64_t i = 0; i < n_x; ++i) d.s_of[static_cast<std::size_t>(i)] = i;
  return d;
}

DraftMap DraftMap::constant(std::int64_t n_x) {
  DraftMap d;
  d.s_of.assign(static_cast<std::size_t>(n_x), 0);
  return d;
}

DraftMap DraftMap::random(Rng& rng, std::int64_t n_x, std::int64_t n_s) {
  DraftMap d;
  d.s_of.resize(static_cast<std::size_t>(n_x));
  for (auto& s : d.s_of) s = rng.randint(0, n_s - 1);
  return d;
}

std::vector<double> posterior_r_given_s(const DiscreteWorld& w, const DraftMap& d, std::int64_t s) {
  std::vector<std::int64_t> members;
  for (std::int64_t x = 0; x < w.n_x; ++x) {
    if (d.s_of[static_cast<std::size_t>(x)] == s) members.push_back(x);
  }
  if (members.empty()) throw InputError("posterior_r_given_s: draft state " + std::to_string(s) + " has no mass");
  std::vector<double> post(static_cast<std::size_t>(w.n_r), 0.0);
  if (members.size() == 1) {  // singleton cell: the conditional is the row itself
    for (std::int64_t r = 0; r < w.n_r; ++r) post[static_cast<std::size_t>(r)] = w.posterior_r(members[0], r);
    return post;
  }
  double mass = 0.0;
  for (auto x : members) {
    double px = w.p_x[static_cast<std::size_t>(x)];
    mass += px;
    for (std::int64_t r = 0; r < w.n_r; ++r) post[static_cast<std::size_t>(r)] += px * w.posterior_r(x, r);
  }
  for (auto& v : post) v /= mass;
  return post;
}

double posterior_y_given_s(const DiscreteWorld& w, const DraftMap& d, std::int64_t s) {
  auto post = posterior_r_given_s(w, d, s);
  double p = 0.0;
  for (std::int64_t r = 0; r < w.n_r; ++r) p += w.g[static_cast<std::size_t>(r)] * post[static_cast<std::size_t>(r)];
  return p;
}

// ---------------------------------------------------------------------------
// Proposition 1: posterior sufficiency implies label sufficiency
// ---------------------------------------------------------------------------

SufficiencyReport check_sufficiency(const DiscreteWorld& w, const DraftMap& d, double tolerance) {
  w.validate();
  d.validate(w);
  SufficiencyReport rep;
  rep.tolerance = tolerance;
  std::vector<std::vector<double>> post_by_s(static_cast<std::size_t>(d.n_s()));
  std::vector<double> py_by_s(static_cast<std::size_t>(d.n_s()), -1.0);
  for (std::int64_t x = 0; x < w.n_x; ++x) {
    std::int64_t s = d.s_of[static_cast<std::size_t>(x)];
    auto& post = post_by_s[static_cast<std::size_t>(s)];
    if (post.empty()) post = posterior_r_given_s(w, d, s);
    for (std::int64_t r = 0; r < w.n_r; ++r) {
      rep.premise_gap = std::max(rep.premise_gap, std::abs(w.posterior_r(x, r) - post[static_cast<std::size_t>(r)]));
    }
    if (py_by_s[static_cast<std::size_t>(s)] < 0.0) {
      double p = 0.0;
      for (std::int64_t r = 0; r < w.n_r; ++r) p += w.g[static_cast<std::size_t>(r)] * post[static_cast<std::size_t>(r)];
      py_by_s[static_cast<std::size_t>(s)] = p;
    }
    rep.conclusion_gap =
        std::max(rep.conclusion_gap, std::abs(w.bayes_posterior(x) - py_by_s[static_cast<std::size_t>(s)]));
  }
  rep.premise_holds = rep.premise_gap <= tolerance;
  rep.conclusion_holds = rep.conclusion_gap <= tolerance;
  rep.implication_holds = !rep.premise_holds || rep.conclusion_holds;
  return rep;
}

json SufficiencyReport::to_json() const {
  return json{{"premise_gap", premise_gap},       {"conclusion_gap", conclusion_gap},
              {"tolerance", tolerance},           {"premise_holds", premise_holds},
              {"conclusion_holds", conclusion_holds}, {"implication_holds", implication_holds}};
}

// ---------------------------------------------------------------------------
// Proposition 2: TV bound
// ---------------------------------------------------------------------------

TvBoundReport tv_bound_check(const DiscreteWorld& w, const DraftMap& d) {
  w.validate();
  d.validate(w);
  TvBoundReport rep;
  rep.lhs.resize(static_cast<std::size_t>(w.n_x));
  rep.rhs.resize(static_cast<std::size_t>(w.n_x));
  double best_slack = 0.0, worst_slack = 0.0;
  rep.max_violation = -1e300;
  for (std::int64_t x = 0; x < w.n_x; ++x) {
    std::int64_t s = d.s_of[static_cast<std::size_t>(x)];
    auto post_s = posterior_r_given_s(w, d, s);
    double py_s = 0.0;
    for (std::int64_t r = 0; r < w.n_r; ++r) py_s += w.g[static_cast<std::size_t>(r)] * post_s[static_cast<std::size_t>(r)];
    double lhs = std::abs(w.bayes_posterior(x) - py_s);
    double tv = 0.0;
    for (std::int64_t r = 0; r < w.n_r; ++r) {
      tv += std::abs(w.posterior_r(x, r) - post_s[static_cast<std::size_t>(r)]);
    }
    tv *= 0.5;
    rep.lhs[static_cast<std::size_t>(x)] = lhs;
    rep.rhs[static_cast<std::size_t>(x)] = tv;
    double slack = tv - lhs;
    rep.max_violation = std::max(rep.max_violation, lhs - tv);
    if (rep.tightest_x < 0 || slack < best_slack) {
      best_slack = slack;
      rep.tightest_x = x;
    }
    if (rep.loosest_x < 0 || slack > worst_slack) {
      worst_slack = slack;
      rep.loosest_x = x;
    }
    if (lhs > tv + kTinyTol) rep.ok = false;
  }
  return rep;
}

json TvBoundReport::to_json() const {
  return json{{"ok", ok},
              {"max_violation", max_violation},
              {"tightest_x", tightest_x},
              {"loosest_x", loosest_x},
              {"lhs", lhs},
              {"rhs", rhs}};
}

// ---------------------------------------------------------------------------
// Risk decomposition
// ---------------------------------------------------------------------------

double pointwise_loss(LossKind kind, double predicted, int label) {
  double y = static_cast<double>(label);
  switch (kind) {
    case LossKind::bce: {
      double q = std::clamp(predicted, kProbClamp, 1.0 - kProbClamp);
      return -(y * std::log(q) + (1.0 - y) * std::log(1.0 - q));
    }
    case LossKind::brier: {
      return (predicted - y) * (predicted - y);
    }
  }
  return 0.0;
}

double population_risk(const DiscreteWorld& w, const DraftMap& phi, const ReadoutMap& h, LossKind loss) {
  double risk = 0.0;
  for (std::int64_t x = 0; x < w.n_x; ++x) {
    double p1 = w.bayes_posterior(x);
    double f = h.value(phi.s_of[static_cast<std::size_t>(x)], x);
    risk += w.p_x[static_cast<std::size_t>(x)] * (p1 * pointwise_loss(loss, f, 1) + (1.0 - p1) * pointwise_loss(loss, f, 0));
  }
  return risk;
}

RiskDecompositionReport risk_decomposition(const DiscreteWorld& w, const HypothesisClasses& classes,
                                           LossKind loss) {
  w.validate();
  if (classes.drafts.empty() || classes.readouts.empty()) {
    throw UsageError("risk_decomposition: hypothesis classes must be non-empty");
  }
  for (const auto& d : classes.drafts) d.validate(w);

  RiskDecompositionReport rep;
  std::size_t n_phi = classes.drafts.size();
  std::size_t n_h = classes.readouts.size();
  std::vector<double> risks(n_phi * n_h);
  rep.best_risk_per_phi.assign(n_phi, 1e300);
  rep.best_risk = 1e300;
  for (std::size_t pi = 0; pi < n_phi; ++pi) {
    for (std::size_t hi = 0; hi < n_h; ++hi) {
      double r = population_risk(w, classes.drafts[pi], classes.readouts[hi], loss);
      risks[pi * n_h + hi] = r;
      if (r < rep.best_risk_per_phi[pi]) rep.best_risk_per_phi[pi] = r;
      if (r < rep.best_risk) {
        rep.best_risk = r;
        rep.argmin_phi = pi;
        rep.argmin_h = hi;
      }
    }
  }
  double best_star = 1e300;
  for (double v : rep.best_risk_per_phi) best_star = std::min(best_star, v);
  // inf over pairs equals inf over phi of R*(phi); asserted numerically below
  for (std::size_t pi = 0; pi < n_phi; ++pi) {
    for (std::size_t hi = 0; hi < n_h; ++hi) {
      RiskDecompositionRow row;
      row.phi_index = pi;
      row.h_index = hi;
      row.risk = risks[pi * n_h + hi];
      row.excess_risk = row.risk - rep.best_risk;
      row.extraction_error = rep.best_risk_per_phi[pi] - best_star;
      row.readout_error = row.risk - rep.best_risk_per_phi[pi];
      row.identity_gap = std::abs(row.excess_risk - (row.extraction_error + row.readout_error));
      rep.max_identity_gap = std::max(rep.max_identity_gap, row.identity_gap);
      rep.rows.push_back(row);
    }
  }
  rep.max_identity_gap = std::max(rep.max_identity_gap, std::abs(best_star - rep.best_risk));
  return rep;
}

json RiskDecompositionReport::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows) {
    rows_j.push_back(json{{"phi", r.phi_index},
                          {"h", r.h_index},
                          {"risk", r.risk},
                          {"extraction_error", r.extraction_error},
                          {"readout_error", r.readout_error},
                          {"excess_risk", r.excess_risk},
                          {"identity_gap", r.identity_gap}});
  }
  return json{{"rows", rows_j},
              {"best_risk", best_risk},
              {"argmin_phi", argmin_phi},
              {"argmin_h", argmin_h},
              {"max_identity_gap", max_identity_gap}};
}

// ---------------------------------------------------------------------------
// Information-bottleneck sweep
// ---------------------------------------------------------------------------

double entropy_y(const DiscreteWorld& w) {
  double p1 = 0.0;
  for (std::int64_t x = 0; x < w.n_x; ++x) p1 += w.p_x[static_cast<std::size_t>(x)] * w.bayes_posterior(x);
  double h = 0.0;
  if (p1 > 0.0) h -= p1 * log2_safe(p1);
  if (p1 < 1.0) h -= (1.0 - p1) * log2_safe(1.0 - p1);
  return h;
}

double mutual_information_sx(const DiscreteWorld& w, const DraftMap& d) {
  // S is a deterministic function of X, so I(S;X) = H(S)
  std::vector<double> p_s(static_cast<std::size_t>(d.n_s()), 0.0);
  for (std::int64_t x = 0; x < w.n_x; ++x) {
    p_s[static_cast<std::size_t>(d.s_of[static_cast<std::size_t>(x)])] += w.p_x[static_cast<std::size_t>(x)];
  }
  double h = 0.0;
  for (double v : p_s) {
    if (v > 0.0) h -= v * log2_safe(v);
  }
  return h;
}

double mutual_information_sy(const DiscreteWorld& w, const DraftMap& d) {
  std::int64_t ns = d.n_s();
  std::vector<double> p_s1(static_cast<std::size_t>(ns), 0.0), p_s0(static_cast<std::size_t>(ns), 0.0);
  for (std::int64_t x = 0; x < w.n_x; ++x) {
    double px = w.p_x[static_cast<std::size_t>(x)];
    double p1 = w.bayes_posterior(x);
    auto s = static_cast<std::size_t>(d.s_of[static_cast<std::size_t>(x)]);
    p_s1[s] += px * p1;
    p_s0[s] += px * (1.0 - p1);
  }
  double py1 = 0.0;
  for (double v : p_s1) py1 += v;
  double py0 = 1.0 - py1;
  double mi = 0.0;
  for (std::int64_t s = 0; s < ns; ++s) {
    double ps = p_s1[static_cast<std::size_t>(s)] + p_s0[static_cast<std::size_t>(s)];
    if (ps <= 0.0) continue;
    if (py1 > 0.0) mi += plogpq(p_s1[static_cast<std::size_t>(s)], ps * py1);
    if (py0 > 0.0) mi += plogpq(p_s0[static_cast<std::size_t>(s)], ps * py0);
  }
  return mi;
}

double bayes_accuracy_from_s(const DiscreteWorld& w, const DraftMap& d) {
  std::int64_t ns = d.n_s();
  std::vector<double> p_s1(static_cast<std::size_t>(ns), 0.0), p_s0(static_cast<std::size_t>(ns), 0.0);
  for (std::int64_t x = 0; x < w.n_x; ++x) {
    double px = w.p_x[static_cast<std::size_t>(x)];
    double p1 = w.bayes_posterior(x);
    auto s = static_cast<std::size_t>(d.s_of[static_cast<std::size_t>(x)]);
    p_s1[s] += px * p1;
    p_s0[s] += px * (1.0 - p1);
  }
  double acc = 0.0;
  for (std::int64_t s = 0; s < ns; ++s) {
    acc += std::max(p_s1[static_cast<std::size_t>(s)], p_s0[static_cast<std::size_t>(s)]);
  }
  return acc;
}

namespace {

// enumerate set partitions of [0, n) with at most k cells (restricted growth)
void enumerate_partitions(std::int64_t n, std::int64_t k, std::vector<std::int64_t>& assign,
                          std::int64_t used, const std::function<void(const std::vector<std::int64_t>&)>& visit) {
  auto idx = static_cast<std::int64_t>(assign.size());
  if (idx == n) {
    visit(assign);
    return;
  }
  std::int64_t limit = std::min(used + 1, k);
  for (std::int64_t c = 0; c < limit; ++c) {
    assign.push_back(c);
    enumerate_partitions(n, k, assign, std::max(used, c + 1), visit);
    assign.pop_back();
  }
}

DraftMap greedy_partition(const DiscreteWorld& w, std::int64_t k) {
  DraftMap d = DraftMap::identity(w.n_x);
  std::int64_t cells = w.n_x;
  while (cells > k) {
    double best = -1e300;
    std::int64_t merge_a = 0, merge_b = 1;
    for (std::int64_t a = 0; a < cells; ++a) {
      for (std::int64_t b = a + 1; b < cells; ++b) {
        DraftMap trial = d;
        for (auto& s : trial.s_of) {
          if (s == b) s = a;
          else if (s > b) --s;
        }
        double mi = mutual_information_sy(w, trial);
        if (mi > best) {
          best = mi;
          merge_a = a;
          merge_b = b;
        }
      }
    }
    for (auto& s : d.s_of) {
      if (s == merge_b) s = merge_a;
      else if (s > merge_b) --s;
    }
    --cells;
  }
  return d;
}

}  // namespace

std::vector<IbPoint> ib_sweep(const DiscreteWorld& w, std::vector<std::int64_t> capacities) {
  w.validate();
  for (std::size_t i = 1; i < capacities.size(); ++i) {
    if (capacities[i] < capacities[i - 1]) throw ConfigError("ib_sweep: capacities must be sorted ascending");
  }
  std::vector<IbPoint> out;
  for (auto k : capacities) {
    if (k < 1) throw ConfigError("ib_sweep: capacity must be >= 1, got " + std::to_string(k));
    IbPoint pt;
    pt.capacity = k;
    if (w.n_x <= kExhaustiveLimit) {
      pt.exhaustive = true;
      double best = -1e300;
      std::vector<std::int64_t> assign;
      enumerate_partitions(w.n_x, k, assign, 0, [&](const std::vector<std::int64_t>& a) {
        DraftMap d;
        d.s_of = a;
        double mi = mutual_information_sy(w, d);
        if (mi > best) {
          best = mi;
          pt.best = d;
        }
      });
    } else {
      pt.exhaustive = false;
      pt.best = greedy_partition(w, std::min(k, w.n_x));
    }
    pt.i_sy = mutual_information_sy(w, pt.best);
    pt.i_sx = mutual_information_sx(w, pt.best);
    pt.accuracy = bayes_accuracy_from_s(w, pt.best);
    out.push_back(std::move(pt));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Approximation chain
// ---------------------------------------------------------------------------

ChainReport approximation_chain_report(const DiscreteWorld& w, const DraftMap& d) {
  w.validate();
  d.validate(w);
  ChainReport rep;
  for (std::int64_t x = 0; x < w.n_x; ++x) {
    ChainRow row;
    row.x = x;
    row.p_y_given_x = w.bayes_posterior(x);
    // p(y|S,X) = p(y|X) identically: S is a deterministic function of X, so
    // conditioning on (S, X) conditions on X alone.
    row.p_y_given_s = posterior_y_given_s(w, d, d.s_of[static_cast<std::size_t>(x)]);
    row.gap = std::abs(row.p_y_given_x - row.p_y_given_s);
    rep.max_gap = std::max(rep.max_gap, row.gap);
    rep.rows.push_back(row);
  }
  return rep;
}

json ChainReport::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows) {
    rows_j.push_back(json{{"x", r.x},
                          {"p_y_given_x", r.p_y_given_x},
                          {"p_y_given_sx", r.p_y_given_x},
                          {"p_y_given_s", r.p_y_given_s},
                          {"gap", r.gap}});
  }
  return json{{"rows", rows_j}, {"max_gap", max_gap}};
}

// ---------------------------------------------------------------------------
// Randomized verification suites
// ---------------------------------------------------------------------------

std::pair<DiscreteWorld, DraftMap> make_block_world(Rng& rng, std::int64_t n_groups, std::int64_t max_dup,
                                                    std::int64_t n_r) {
  DiscreteWorld w;
  DraftMap d;
  w.n_r = n_r;
  std::vector<std::vector<double>> group_rows;
  for (std::int64_t gi = 0; gi < n_groups; ++gi) {
    std::vector<double> row(static_cast<std::size_t>(n_r));
    double sum = 0.0;
    for (auto& v : row) {
      v = -std::log(1.0 - rng.uniform());
      sum += v;
    }
    for (auto& v : row) v /= sum;
    group_rows.push_back(std::move(row));
    std::int64_t dups = rng.randint(1, max_dup);
    for (std::int64_t j = 0; j < dups; ++j) {
      // duplicated X states share the exact posterior row bit-for-bit
      for (double v : group_rows.back()) w.p_r_given_x.push_back(v);
      d.s_of.push_back(gi);
      w.p_x.push_back(0.0);
    }
  }
  w.n_x = static_cast<std::int64_t>(w.p_x.size());
  double sum = 0.0;
  for (auto& v : w.p_x) {
    v = 0.05 + rng.uniform();
    sum += v;
  }
  for (auto& v : w.p_x) v /= sum;
  w.g.resize(static_cast<std::size_t>(n_r));
  for (auto& v : w.g) v = rng.uniform();
  return {std::move(w), std::move(d)};
}

VerifySummary verify_all(std::uint64_t seed, std::int64_t prop1_worlds, std::int64_t prop2_triples) {
  VerifySummary sum;

  {  // Prop 1 over constructed posterior-respecting drafts
    Rng rng(derive_seed(seed, "prop1"));
    for (std::int64_t i = 0; i < prop1_worlds; ++i) {
      auto [world, draft] = make_block_world(rng, rng.randint(2, 4), rng.randint(1, 3), rng.randint(2, 5));
      auto rep = check_sufficiency(world, draft);
      ++sum.prop1_worlds;
      if (!rep.premise_holds || !rep.implication_holds || !rep.conclusion_holds) ++sum.prop1_violations;
    }
  }

  {  // Prop 2 over random (world, draft, x) triples
    Rng rng(derive_seed(seed, "prop2"));
    while (sum.prop2_triples < prop2_triples) {
      auto world = DiscreteWorld::random(rng, rng.randint(2, 8), rng.randint(2, 6));
      auto draft = DraftMap::random(rng, world.n_x, rng.randint(1, world.n_x));
      auto rep = tv_bound_check(world, draft);
      for (std::int64_t x = 0; x < world.n_x; ++x) {
        ++sum.prop2_triples;
        if (rep.lhs[static_cast<std::size_t>(x)] > rep.rhs[static_cast<std::size_t>(x)] + kTinyTol) {
          ++sum.prop2_violations;
        }
      }
      // the approximation-chain gap must agree with the TV-bound lhs
      auto chain = approximation_chain_report(world, draft);
      for (std::int64_t x = 0; x < world.n_x; ++x) {
        ++sum.chain_checks;
        if (std::abs(chain.rows[static_cast<std::size_t>(x)].gap - rep.lhs[static_cast<std::size_t>(x)]) > kTinyTol) {
          ++sum.chain_violations;
        }
      }
    }
  }

  {  // Eq. 5 telescoping identity on enumerated hypothesis classes
    Rng rng(derive_seed(seed, "decomp"));
    for (int trial = 0; trial < 20; ++trial) {
      auto world = DiscreteWorld::random(rng, 4, 3);
      HypothesisClasses classes;
      classes.drafts.push_back(DraftMap::identity(4));
      classes.drafts.push_back(DraftMap::constant(4));
      classes.drafts.push_back(DraftMap::random(rng, 4, 2));
      for (int hi = 0; hi < 4; ++hi) {
        ReadoutMap h;
        h.depends_on_x = false;
        h.n_s = 4;
        h.table.resize(4);
        for (auto& v : h.table) v = rng.uniform();
        classes.readouts.push_back(std::move(h));
      }
      for (LossKind loss : {LossKind::bce, LossKind::brier}) {
        auto rep = risk_decomposition(world, classes, loss);
        for (const auto& row : rep.rows) {
          ++sum.decomposition_pairs;
          sum.decomposition_max_gap = std::max(sum.decomposition_max_gap, row.identity_gap);
          if (row.identity_gap > kTinyTol) ++sum.decomposition_violations;
        }
      }
    }
  }

  {  // IB monotonicity in capacity
    Rng rng(derive_seed(seed, "ib"));
    for (int trial = 0; trial < 5; ++trial) {
      auto world = DiscreteWorld::random(rng, 6, 3);
      auto curve = ib_sweep(world, {1, 2, 3, 4, 5, 6});
      double hy = entropy_y(world);
      for (std::size_t i = 0; i < curve.size(); ++i) {
        ++sum.ib_points;
        if (curve[i].i_sy > hy + kTinyTol) ++sum.ib_monotonicity_violations;
        if (i > 0 && curve[i].i_sy < curve[i - 1].i_sy - kTinyTol) ++sum.ib_monotonicity_violations;
      }
    }
  }

  sum.all_pass = sum.prop1_violations == 0 && sum.prop2_violations == 0 && sum.decomposition_violations == 0 &&
                 sum.ib_monotonicity_violations == 0 && sum.chain_violations == 0;
  return sum;
}

json VerifySummary::to_json() const {
  return json{{"prop1_worlds", prop1_worlds},
              {"prop1_violations", prop1_violations},
              {"prop2_triples", prop2_triples},
              {"prop2_violations", prop2_violations},
              {"decomposition_pairs", decomposition_pairs},
              {"decomposition_violations", decomposition_violations},
              {"decomposition_max_gap", decomposition_max_gap},
              {"ib_points", ib_points},
              {"ib_monotonicity_violations", ib_monotonicity_violations},
              {"chain_checks", chain_checks},
              {"chain_violations", chain_violations},
              {"all_pass", all_pass}};
}

}  // namespace lj::theory
