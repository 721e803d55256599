#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "latentjudge/backbone.hpp"
#include "latentjudge/optim.hpp"
#include "latentjudge/trajgen.hpp"
#include "latentjudge/workspace.hpp"

namespace lj {

enum class TrainMode { one_stage, decoupled, explicit_baseline, no_extractor, no_reasoner };

const char* train_mode_name(TrainMode mode);
TrainMode train_mode_from_name(const std::string& name);
bool mode_uses_draft(TrainMode mode);

struct ReadoutHead {
  Tensor w;  // d_r x 1
  Tensor b;  // 1 x 1

  static ReadoutHead create(std::int64_t d_r);  // zero-initialized
  std::vector<NamedTensor> parameters(const std::string& prefix) const;
};

struct TrainConfig {
  TrainMode mode = TrainMode::decoupled;
  double learning_rate = 3e-3;
  std::int64_t steps = 300;
  std::int64_t batch_size = 8;
  std::uint64_t seed = 1;
  std::int64_t latent_len = 16;
  Insertion insertion = Insertion::tail;
  double threshold = 0.5;
  std::int64_t eval_every = 100;   // 0: only the final evaluation
  std::int64_t eval_subset = 128;  // cap on in-training validation examples

  void validate() const;
};

struct JudgeModelConfig {
  std::int64_t adapter_rank = 4;
  double adapter_alpha = 8.0;
  std::int64_t latent_len = 16;
  Insertion insertion = Insertion::tail;
  TrainMode mode = TrainMode::decoupled;
};

// ---------------------------------------------------------------------------
// The full judge: two frozen backbones, two adapter sets, projectors, draft
// queries and the linear-sigmoid readout.
// ---------------------------------------------------------------------------

class JudgeModel {
 public:
  JudgeModel(std::shared_ptr<Backbone> reasoner, std::shared_ptr<Backbone> extractor, JudgeModelConfig cfg,
             std::uint64_t seed);

  Tensor logit(std::span<const int> tokens) const;  // records on the active tape
  double prob(std::span<const int> tokens) const;   // inference, no tape
  Tensor assembled(std::span<const int> tokens) const;       // Y for this mode
  Tensor terminal_state(std::span<const int> tokens) const;  // h_end before the head

  const JudgeModelConfig& model_config() const { return cfg_; }
  Backbone& reasoner() { return *reasoner_; }
  const Backbone& reasoner() const { return *reasoner_; }
  Backbone& extractor() { return *extractor_; }
  const Backbone& extractor() const { return *extractor_; }

  AdapterSet& delta_a() { return delta_a_; }
  AdapterSet& delta_b() { return delta_b_; }
  ProjectorPair& projectors() { return projectors_; }
  DraftQueries& queries() { return queries_; }
  ReadoutHead& head() { return head_; }
  const AdapterSet& delta_a() const { return delta_a_; }
  const AdapterSet& delta_b() const { return delta_b_; }
  const ProjectorPair& projectors() const { return projectors_; }
  const DraftQueries& queries() const { return queries_; }
  const ReadoutHead& head() const { return head_; }

  // parameter groups: delta_a, delta_b, queries, projectors, head,
  // base_reasoner, base_extractor
  static const std::vector<std::string>& group_names();
  std::vector<NamedTensor> group(const std::string& name) const;
  std::vector<std::string> trainable_group_names() const;
  std::vector<std::string> frozen_group_names() const;
  std::vector<Tensor> trainable_tensors() const;
  std::uint64_t group_checksum(const std::string& name) const;
  std::map<std::string, std::uint64_t> frozen_checksums() const;

  // flags requires_grad per the mode's parameter-isolation contract
  void apply_mode_freezing();

  std::vector<NamedTensor> all_parameters() const;  // judge-owned (no bases)

  Checkpoint to_checkpoint(const std::string& extra_meta_json = "{}") const;
  static JudgeModel from_checkpoint(const Checkpoint& ck);

  // cached greedy summaries for the explicit baseline (frozen summarizer)
  const std::vector<int>& summary_for(const std::string& id, std::span<const int> tokens) const;
  void clear_summary_cache() { summary_cache_.clear(); }

 private:
  JudgeModelConfig cfg_;
  std::shared_ptr<Backbone> reasoner_;
  std::shared_ptr<Backbone> extractor_;
  AdapterSet delta_a_;
  AdapterSet delta_b_;
  ProjectorPair projectors_;
  DraftQueries queries_;
  ReadoutHead head_;
  int dec_token_ = 0;
  mutable std::map<std::string, std::vector<int>> summary_cache_;
};

// Decision readout over an assembled representation (role-checked).
Tensor readout_logit(const Tensor& assembled, const Backbone& reasoner, const AdapterSet& reasoner_adapters,
                     const ReadoutHead& head);
Tensor readout_prob(const Tensor& assembled, const Backbone& reasoner, const AdapterSet& reasoner_adapters,
                    const ReadoutHead& head);

// Hard decision: unsafe (1) iff p >= tau; the tie resolves to unsafe.
int classify(double p, double tau);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct StepRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double val_accuracy = 0.0;
  bool has_val = false;
};

struct TrainResult {
  std::vector<StepRecord> history;
  double final_val_accuracy = 0.0;
  double final_loss = 0.0;
  std::map<std::string, std::uint64_t> frozen_checksums;
  bool freeze_contract_clean = false;
  std::int64_t steps_run = 0;
};

// One optimizer step over a mini-batch; returns the mean BCE loss. The mode
// decides which parameter groups receive gradients.
double train_step(JudgeModel& model, Adam& opt, const std::vector<const TrajectoryExample*>& batch,
                  std::int64_t step_index);

TrainResult train_judge(JudgeModel& model, const TrainConfig& cfg,
                        const std::vector<TrajectoryExample>& train_set,
                        const std::vector<TrajectoryExample>& val_set);

double plain_accuracy(const JudgeModel& model, const std::vector<TrajectoryExample>& examples, double tau);

// Finite-difference verification of the full chain for one sampled parameter
// per trainable group. Perturbs the model to a generic point first.
struct GradCheckReport {
  std::map<std::string, double> max_rel_err;
  double worst = 0.0;
  bool pass = false;
};

GradCheckReport gradcheck_full_chain(JudgeModel& model, std::span<const int> tokens, int label,
                                     double fd_step = 1e-5, std::int64_t coords_per_group = 2,
                                     std::uint64_t seed = 12345);

}  // namespace lj
