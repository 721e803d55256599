#include "latentjudge/evalharness.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

using nlohmann::json;

namespace lj {

MetricsReport metrics_from_confusion(std::int64_t tp, std::int64_t fp, std::int64_t tn, std::int64_t fn) {
  MetricsReport m;
  m.tp = tp;
  m.fp = fp;
  m.tn = tn;
  m.fn = fn;
  m.n = tp + fp + tn + fn;
  if (m.n == 0) throw UsageError("metrics: empty confusion counts");
  m.accuracy = static_cast<double>(tp + tn) / static_cast<double>(m.n);
  if (tp + fp == 0) {
    m.degenerate_precision = true;
    m.precision = 0.0;
  } else {
    m.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  }
  if (tp + fn == 0) {
    m.degenerate_recall = true;
    m.recall = 0.0;
  } else {
    m.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  }
  if (m.precision + m.recall == 0.0) {
    m.degenerate_f1 = true;
    m.f1 = 0.0;
  } else {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  }
  return m;
}

MetricsReport evaluate(const JudgeModel& model, const std::vector<TrajectoryExample>& examples, double tau) {
  if (examples.empty()) throw UsageError("evaluate: empty example set");
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (const auto& ex : examples) {
    int pred = classify(model.prob(ex.tokens), tau);
    if (pred == 1 && ex.label == 1) ++tp;
    else if (pred == 1 && ex.label == 0) ++fp;
    else if (pred == 0 && ex.label == 0) ++tn;
    else ++fn;
  }
  return metrics_from_confusion(tp, fp, tn, fn);
}

json MetricsReport::to_json() const {
  return json{{"accuracy", accuracy},
              {"f1", f1},
              {"precision", precision},
              {"recall", recall},
              {"tp", tp},
              {"fp", fp},
              {"tn", tn},
              {"fn", fn},
              {"n", n},
              {"degenerate_precision", degenerate_precision},
              {"degenerate_recall", degenerate_recall},
              {"degenerate_f1", degenerate_f1},
              {"seed", seed},
              {"config_id", config_id}};
}

MetricsReport MetricsReport::from_json(const json& j) {
  MetricsReport m;
  m.accuracy = j.at("accuracy").get<double>();
  m.f1 = j.at("f1").get<double>();
  m.precision = j.at("precision").get<double>();
  m.recall = j.at("recall").get<double>();
  m.tp = j.at("tp").get<std::int64_t>();
  m.fp = j.at("fp").get<std::int64_t>();
  m.tn = j.at("tn").get<std::int64_t>();
  m.fn = j.at("fn").get<std::int64_t>();
  m.n = j.at("n").get<std::int64_t>();
  m.degenerate_precision = j.at("degenerate_precision").get<bool>();
  m.degenerate_recall = j.at("degenerate_recall").get<bool>();
  m.degenerate_f1 = j.at("degenerate_f1").get<bool>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config_id = j.at("config_id").get<std::string>();
  return m;
}

// ---------------------------------------------------------------------------
// Feature export and linear probe
// ---------------------------------------------------------------------------

void export_features(const JudgeModel& model, const std::vector<TrajectoryExample>& examples,
                     const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  std::int64_t d = model.reasoner().config().d_model;
  f << "id,label";
  for (std::int64_t j = 0; j < d; ++j) f << ",f" << j;
  f << "\n";
  f.precision(17);
  NoTapeScope no_grad;
  for (const auto& ex : examples) {
    Tensor h = model.terminal_state(ex.tokens);
    f << ex.id << "," << ex.label;
    for (std::int64_t j = 0; j < d; ++j) f << "," << h.at(0, j);
    f << "\n";
  }
  if (!f) throw IoError("write failed: " + path);
}

std::pair<std::vector<std::vector<double>>, std::vector<int>> load_feature_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  std::string line;
  if (!std::getline(f, line)) throw ParseError(path + ": missing header");
  std::vector<std::vector<double>> features;
  std::vector<int> labels;
  std::int64_t line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string field;
    if (!std::getline(is, field, ',')) throw ParseError(path + ": line " + std::to_string(line_no));
    if (!std::getline(is, field, ',')) throw ParseError(path + ": line " + std::to_string(line_no));
    labels.push_back(std::stoi(field));
    std::vector<double> row;
    while (std::getline(is, field, ',')) row.push_back(std::stod(field));
    features.push_back(std::move(row));
  }
  return {std::move(features), std::move(labels)};
}

double linear_probe_accuracy(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                             std::uint64_t seed) {
  if (features.size() != labels.size() || features.size() < 4) {
    throw UsageError("linear probe: needs at least 4 labelled feature rows");
  }
  std::size_t n = features.size();
  std::size_t d = features[0].size();

  // standardize columns
  std::vector<double> mean(d, 0.0), var(d, 0.0);
  for (const auto& row : features) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  for (const auto& row : features) {
    for (std::size_t j = 0; j < d; ++j) var[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
  }
  for (auto& v : var) v = std::sqrt(v / static_cast<double>(n)) + 1e-9;

  // stratified 50/50 split
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < n; ++i) (labels[i] == 1 ? pos : neg).push_back(i);
  Rng rng(derive_seed(seed, "probe"));
  rng.shuffle(pos);
  rng.shuffle(neg);
  std::vector<std::size_t> train_idx, test_idx;
  for (auto* bucket : {&pos, &neg}) {
    std::size_t half = bucket->size() / 2;
    for (std::size_t i = 0; i < bucket->size(); ++i) {
      (i < half ? train_idx : test_idx).push_back((*bucket)[i]);
    }
  }
  if (train_idx.empty() || test_idx.empty()) throw UsageError("linear probe: degenerate split");

  std::vector<double> w(d + 1, 0.0);  // last entry is the bias
  auto margin = [&](std::size_t i) {
    double z = w[d];
    for (std::size_t j = 0; j < d; ++j) z += w[j] * (features[i][j] - mean[j]) / var[j];
    return z;
  };
  double lr = 0.5;
  for (int iter = 0; iter < 400; ++iter) {
    std::vector<double> grad(d + 1, 0.0);
    for (auto i : train_idx) {
      double p = 1.0 / (1.0 + std::exp(-margin(i)));
      double delta = p - static_cast<double>(labels[i]);
      for (std::size_t j = 0; j < d; ++j) grad[j] += delta * (features[i][j] - mean[j]) / var[j];
      grad[d] += delta;
    }
    for (std::size_t j = 0; j <= d; ++j) {
      w[j] -= lr * grad[j] / static_cast<double>(train_idx.size());
    }
  }
  std::size_t hits = 0;
  for (auto i : test_idx) {
    int pred = margin(i) >= 0.0 ? 1 : 0;
    if (pred == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(test_idx.size());
}

// ---------------------------------------------------------------------------
// Efficiency measurement
// ---------------------------------------------------------------------------

json EfficiencyReport::to_json() const {
  return json{{"method", method},
              {"latency_ms_median", latency_ms_median},
              {"throughput_per_s", throughput_per_s},
              {"peak_memory_bytes", peak_memory_bytes},
              {"n_examples", n_examples},
              {"reasoner_forwards", reasoner_forwards},
              {"extractor_forwards", extractor_forwards}};
}

EfficiencyReport measure_efficiency(JudgeModel& model, const std::vector<TrajectoryExample>& examples,
                                    std::int64_t max_examples, std::int64_t warmup) {
  if (examples.empty()) throw UsageError("measure_efficiency: empty example set");
  using Clock = std::chrono::steady_clock;
  auto run_one = [&](const TrajectoryExample& ex) {
    model.clear_summary_cache();  // the explicit baseline must decode cold
    auto t0 = Clock::now();
    volatile double p = model.prob(ex.tokens);
    (void)p;
    auto t1 = Clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count();
  };
  for (std::int64_t i = 0; i < warmup; ++i) {
    run_one(examples[static_cast<std::size_t>(i % static_cast<std::int64_t>(examples.size()))]);
  }

  MemStats::reset_peak();
  model.reasoner().reset_forward_count();
  model.extractor().reset_forward_count();
  std::vector<double> times;
  auto total0 = Clock::now();
  std::int64_t n = std::min<std::int64_t>(max_examples, static_cast<std::int64_t>(examples.size()));
  for (std::int64_t i = 0; i < n; ++i) {
    times.push_back(run_one(examples[static_cast<std::size_t>(i)]));
  }
  auto total1 = Clock::now();

  std::sort(times.begin(), times.end());
  EfficiencyReport rep;
  rep.method = train_mode_name(model.model_config().mode);
  rep.latency_ms_median = times[times.size() / 2];
  double total_s = std::chrono::duration<double>(total1 - total0).count();
  rep.throughput_per_s = static_cast<double>(n) / total_s;
  rep.peak_memory_bytes = MemStats::peak_bytes().load();
  rep.n_examples = n;
  rep.reasoner_forwards = model.reasoner().forward_count();
  rep.extractor_forwards = model.extractor().forward_count();
  return rep;
}

// ---------------------------------------------------------------------------
// Sweep aggregation
// ---------------------------------------------------------------------------

SweepResult make_sweep_result(const std::string& axis, const std::vector<std::string>& values,
                              const std::vector<std::vector<double>>& raw,
                              const std::vector<std::uint64_t>& seeds) {
  if (values.size() != raw.size()) throw UsageError("sweep: values/raw size mismatch");
  SweepResult s;
  s.axis = axis;
  s.values = values;
  s.raw = raw;
  s.seeds = seeds;
  for (const auto& cell : raw) {
    double m = 0.0;
    for (double v : cell) m += v;
    m = cell.empty() ? 0.0 : m / static_cast<double>(cell.size());
    s.mean.push_back(m);
    if (cell.size() >= 2) {
      double sq = 0.0;
      for (double v : cell) sq += (v - m) * (v - m);
      s.stddev.push_back(std::sqrt(sq / static_cast<double>(cell.size() - 1)));
      s.has_std.push_back(true);
    } else {
      s.stddev.push_back(0.0);
      s.has_std.push_back(false);
    }
  }
  return s;
}

json SweepResult::to_json() const {
  json cells = json::array();
  for (std::size_t i = 0; i < values.size(); ++i) {
    cells.push_back(json{{"value", values[i]},
                         {"mean", mean[i]},
                         {"stddev", has_std[i] ? json(stddev[i]) : json(nullptr)},
                         {"raw", raw[i]}});
  }
  return json{{"axis", axis}, {"seeds", seeds}, {"cells", cells}, {"partial", partial},
              {"failed_cells", failed_cells}};
}

}  // namespace lj
