#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latentjudge/optim.hpp"
#include "latentjudge/tensor.hpp"

namespace lj {

constexpr double kLayerNormEps = 1e-5;

struct BackboneConfig {
  std::int64_t vocab_size = 64;
  std::int64_t d_model = 32;
  std::int64_t n_layers = 2;
  std::int64_t n_heads = 4;
  std::int64_t max_seq_len = 344;
  std::int64_t ffn_hidden = 0;  // 0 -> 4 * d_model

  std::int64_t head_dim() const { return d_model / n_heads; }
  std::int64_t ffn_dim() const { return ffn_hidden > 0 ? ffn_hidden : 4 * d_model; }
  void validate() const;
  std::string to_json_string() const;
  static BackboneConfig from_json_string(const std::string& s);
};

// ---------------------------------------------------------------------------
// Low-rank adapters. The effective delta on a target matrix W (used as x.W)
// is (alpha / rank) * down.up; with a zero up-matrix the adapted model equals
// the frozen backbone exactly.
// ---------------------------------------------------------------------------

enum class AdapterRole { reasoner, extractor };  // delta_A / delta_B

const char* adapter_role_name(AdapterRole role);

struct AdapterPair {
  Tensor down;  // d_in x rank
  Tensor up;    // rank x d_out
};

struct AdapterSet {
  AdapterRole role = AdapterRole::reasoner;
  std::int64_t rank = 4;
  double alpha = 8.0;
  std::map<std::string, AdapterPair> targets;  // keyed by target matrix name

  double scaling() const { return alpha / static_cast<double>(rank); }
  const AdapterPair* find(const std::string& name) const;
  std::vector<NamedTensor> parameters(const std::string& prefix) const;
  // zero the up-matrices so the adapted forward equals the frozen backbone
  void zero_deltas();

  // attaches to W_Q and W_V of every layer
  static AdapterSet create(AdapterRole role, const BackboneConfig& cfg, std::int64_t rank, double alpha,
                           std::uint64_t seed);
};

// ---------------------------------------------------------------------------
// Attention mask
// ---------------------------------------------------------------------------

struct AttentionMask {
  std::int64_t n = 0;
  std::vector<std::uint8_t> allowed;  // n*n, row = query

  static AttentionMask causal(std::int64_t n);
  bool at(std::int64_t q, std::int64_t k) const { return allowed[static_cast<std::size_t>(q * n + k)] != 0; }
  void set(std::int64_t q, std::int64_t k, bool v) { allowed[static_cast<std::size_t>(q * n + k)] = v ? 1 : 0; }
  void validate() const;  // causal direction + self-attention floor
};

struct AccessReport {
  bool pass = true;
  std::int64_t readout_position = -1;
  std::int64_t violating_query = -1;
  std::int64_t violating_key = -1;
  std::string detail;
};

// Verifies the decision readout position (terminal row, or the appended [DEC]
// slot when dec is true) can attend to every position of P and S.
AccessReport causal_accessibility_check(const AttentionMask& mask, std::int64_t p_len, std::int64_t s_len,
                                        bool dec);

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

struct LayerWeights {
  Tensor wq, wk, wv, wo;
  Tensor w1, b1, w2, b2;
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

Tensor multi_head_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                            const Tensor& wo, std::int64_t n_heads, const AttentionMask& mask,
                            const AdapterSet* adapters = nullptr, const std::string& prefix = {});

class Backbone {
 public:
  Backbone(BackboneConfig cfg, std::uint64_t seed);

  const BackboneConfig& config() const { return cfg_; }

  // token + learned absolute positional embedding rows
  Tensor embed(std::span<const int> tokens) const;

  // full transformer stack over already-embedded rows
  Tensor forward(const Tensor& rows, const AdapterSet* adapters, const AttentionMask& mask) const;

  // separate LM head: logits = hidden . W_lm
  Tensor lm_logits(const Tensor& hidden) const;

  // one next-token cross-entropy step over a batch of sequences
  double lm_pretrain_step(const std::vector<std::vector<int>>& batch, Adam& opt);

  void freeze();
  bool frozen() const { return frozen_; }

  std::vector<NamedTensor> parameters() const;
  std::vector<Tensor> parameter_tensors() const;
  void load_parameters(const std::vector<NamedTensor>& named);

  const Tensor& token_embedding() const { return embedding_; }

  std::uint64_t forward_count() const { return forward_count_.load(); }
  void reset_forward_count() { forward_count_.store(0); }

 private:
  BackboneConfig cfg_;
  Tensor embedding_;   // vocab x d
  Tensor positional_;  // max_seq_len x d
  Tensor lm_head_;     // d x vocab
  std::vector<LayerWeights> layers_;
  bool frozen_ = false;
  mutable std::atomic<std::uint64_t> forward_count_{0};
};

Tensor terminal_hidden(const Tensor& hidden);

// Greedy LM pretraining driver: seeded batch sampling over the corpus
// sequences, returns the mean loss of the final 10 steps.
double pretrain_language_model(Backbone& model, const std::vector<std::vector<int>>& corpus,
                               std::int64_t steps, std::int64_t batch_size, double lr, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoint container: versioned binary file holding a JSON meta string and
// named flat float64 arrays; round trips are value-exact.
// ---------------------------------------------------------------------------

struct Checkpoint {
  std::string meta_json;
  std::vector<NamedTensor> tensors;

  const Tensor* find(const std::string& name) const;
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace lj
