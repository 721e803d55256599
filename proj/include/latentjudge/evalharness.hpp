#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "latentjudge/judge.hpp"
#include "latentjudge/trajgen.hpp"

namespace lj {

struct MetricsReport {
  double accuracy = 0.0;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0, n = 0;
  bool degenerate_precision = false;  // no positive predictions
  bool degenerate_recall = false;     // no positive labels
  bool degenerate_f1 = false;
  std::uint64_t seed = 0;
  std::string config_id;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

// Exact metric identities from confusion counts; degenerate denominators map
// to 0 with the corresponding flag set.
MetricsReport metrics_from_confusion(std::int64_t tp, std::int64_t fp, std::int64_t tn, std::int64_t fn);

MetricsReport evaluate(const JudgeModel& model, const std::vector<TrajectoryExample>& examples, double tau);

// Per example: id, label, and the d_r terminal hidden state; CSV with header.
void export_features(const JudgeModel& model, const std::vector<TrajectoryExample>& examples,
                     const std::string& path);
std::pair<std::vector<std::vector<double>>, std::vector<int>> load_feature_csv(const std::string& path);

// Logistic-regression probe: deterministic 50/50 split, full-batch gradient
// descent, held-out accuracy. A separability proxy for feature quality.
double linear_probe_accuracy(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                             std::uint64_t seed);

struct EfficiencyReport {
  std::string method;
  double latency_ms_median = 0.0;
  double throughput_per_s = 0.0;
  std::int64_t peak_memory_bytes = 0;
  std::int64_t n_examples = 0;
  std::uint64_t reasoner_forwards = 0;
  std::uint64_t extractor_forwards = 0;
  nlohmann::json to_json() const;
};

// Batch-1 wall-clock medians over >= n examples after warmup; peak memory via
// the tensor-buffer high-water mark.
EfficiencyReport measure_efficiency(JudgeModel& model, const std::vector<TrajectoryExample>& examples,
                                    std::int64_t max_examples = 50, std::int64_t warmup = 3);

struct SweepResult {
  std::string axis;
  std::vector<std::string> values;
  std::vector<double> mean;
  std::vector<double> stddev;     // meaningful only where has_std
  std::vector<bool> has_std;      // needs >= 2 seeds
  std::vector<std::vector<double>> raw;  // [value][seed]
  std::vector<std::uint64_t> seeds;
  bool partial = false;
  std::vector<std::string> failed_cells;

  nlohmann::json to_json() const;
};

SweepResult make_sweep_result(const std::string& axis, const std::vector<std::string>& values,
                              const std::vector<std::vector<double>>& raw,
                              const std::vector<std::uint64_t>& seeds);

}  // namespace lj
