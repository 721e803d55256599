#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "latentjudge/backbone.hpp"
#include "latentjudge/judge.hpp"
#include "latentjudge/trajgen.hpp"

namespace lj {

// Merged run configuration: one flat key-value file with sections drives every
// subcommand. Unknown keys are rejected by name; a resolved snapshot written
// next to the outputs reloads to an identical configuration.
struct RunConfig {
  // [run]
  std::string out_dir;
  std::uint64_t seed = 1;

  // [data]
  GeneratorConfig data;
  std::int64_t n_train = 2048;
  std::int64_t n_val = 512;
  std::int64_t n_test = 512;

  // [reasoner] / [extractor]
  BackboneConfig reasoner;
  BackboneConfig extractor;

  // [adapters]
  std::int64_t adapter_rank = 4;
  double adapter_alpha = 8.0;

  // [pretrain]
  std::int64_t pretrain_steps = 300;
  std::int64_t pretrain_batch = 8;
  double pretrain_lr = 3e-3;
  std::uint64_t pretrain_seed = 1234;

  // [train]
  std::string mode = "decoupled";
  std::int64_t train_steps = 300;
  std::int64_t train_batch = 8;
  double learning_rate = 3e-3;
  std::int64_t latent_len = 16;
  std::string insertion = "tail";
  double threshold = 0.5;
  std::int64_t eval_every = 100;
  std::string backbones_ckpt;  // optional: reuse pretrained backbones

  // [eval]
  std::vector<std::uint64_t> eval_seeds{1, 2, 3};
  std::vector<std::int64_t> sweep_lengths{4, 16, 64};
  std::vector<std::string> sweep_positions{"tail", "middle", "head", "explicit"};

  static RunConfig from_file(const std::string& path, const std::vector<std::string>& overrides = {});
  static RunConfig defaults();

  // fills auto fields (max_seq_len) and cross-validates
  void resolve();
  void save(const std::string& path) const;
  std::string canonical() const;
  std::string config_hash() const;

  TrainConfig train_config(std::uint64_t run_seed) const;
  JudgeModelConfig judge_model_config() const;
};

}  // namespace lj
