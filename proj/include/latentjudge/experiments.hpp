#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "latentjudge/config.hpp"
#include "latentjudge/evalharness.hpp"
#include "latentjudge/judge.hpp"

namespace lj {

struct ManifestEntry {
  std::string path;  // relative to the run directory
  std::string kind;  // json | jsonl | binary | text
  std::vector<std::string> volatile_keys;
};

struct CellResult {
  std::string cell_id;
  std::uint64_t seed = 0;
  std::string mode;
  std::string insertion;
  std::int64_t latent_len = 0;
  std::string cell_hash;
  MetricsReport val_metrics;
  double final_loss = 0.0;
  bool freeze_contract_clean = false;
  std::map<std::string, std::uint64_t> frozen_checksums;
  std::string checkpoint_path;  // relative to the run directory
  std::string history_path;
  bool from_cache = false;

  nlohmann::json to_json() const;
  static CellResult from_json(const nlohmann::json& j);
};

// Shared state for one run directory: resolved config snapshot, generated
// corpus splits and the pretrained frozen backbones. Training cells and
// experiment drivers hang off this.
class ExperimentContext {
 public:
  static ExperimentContext prepare(const RunConfig& cfg);

  const RunConfig& config() const { return cfg_; }
  const std::string& out_dir() const { return cfg_.out_dir; }
  const std::vector<TrajectoryExample>& train_set() const { return train_; }
  const std::vector<TrajectoryExample>& val_set() const { return val_; }
  const std::vector<TrajectoryExample>& test_set() const { return test_; }
  std::shared_ptr<Backbone> reasoner_base() const { return reasoner_; }
  std::shared_ptr<Backbone> extractor_base() const { return extractor_; }

  // Train-or-load one experiment cell; resumable through cells/<id>/result.json.
  CellResult run_cell(const std::string& mode, std::int64_t latent_len, const std::string& insertion,
                      std::uint64_t seed);

  struct CellSpec {
    std::string mode;
    std::int64_t latent_len;
    std::string insertion;
    std::uint64_t seed;
  };
  struct CellOutcome {
    bool ok = false;
    CellResult cell;
    std::string error;
    bool numeric_abort = false;
  };
  // Cells are independent jobs: uncached ones run on parallel worker threads
  // (bounded by LATENTJUDGE_WORKERS, default hardware concurrency), each with
  // its own model and tapes over the shared frozen backbones.
  std::vector<CellOutcome> run_cells(const std::vector<CellSpec>& specs);
  JudgeModel load_cell_model(const CellResult& cell) const;
  JudgeModel fresh_model(const std::string& mode, std::int64_t latent_len, const std::string& insertion,
                         std::uint64_t seed) const;

  std::string cell_hash(const std::string& mode, std::int64_t latent_len, const std::string& insertion,
                        std::uint64_t seed) const;

  void add_manifest(const std::string& path, const std::string& kind,
                    std::vector<std::string> volatile_keys = {});
  void write_manifest(const std::string& command);
  void write_json(const std::string& rel_path, const nlohmann::json& j,
                  std::vector<std::string> volatile_keys = {});

 private:
  RunConfig cfg_;
  std::vector<TrajectoryExample> train_, val_, test_;
  std::shared_ptr<Backbone> reasoner_, extractor_;
  std::vector<ManifestEntry> manifest_;
  std::mutex manifest_mutex_;
};

// Experiment drivers. Each returns the JSON document it wrote.
nlohmann::json run_train(ExperimentContext& ctx);
nlohmann::json run_rq1(ExperimentContext& ctx);
nlohmann::json run_sweep_length(ExperimentContext& ctx);
nlohmann::json run_sweep_position(ExperimentContext& ctx);
nlohmann::json run_ablation(ExperimentContext& ctx);
nlohmann::json run_generalization(ExperimentContext& ctx);
nlohmann::json run_efficiency(ExperimentContext& ctx);
nlohmann::json run_gradcheck(ExperimentContext& ctx, std::int64_t prompt_len = 12);
nlohmann::json run_export_features(ExperimentContext& ctx, const std::string& checkpoint);
nlohmann::json run_eval(ExperimentContext& ctx, const std::string& checkpoint, const std::string& split);

// Theory verification bundle: probability suites plus the causal-mask lemma
// on both tail and prefix-dec constructions.
nlohmann::json run_verify_theory(std::uint64_t seed, std::int64_t prop1_worlds, std::int64_t prop2_triples,
                                 const std::string& world_file = {});

// Rerun a completed run directory and compare declared outputs value-exactly.
// Returns 0 on identity; fills diff_summary otherwise.
int reproduce_run(const std::string& snapshot_dir, std::string* diff_summary);

}  // namespace lj
