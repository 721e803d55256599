#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "latentjudge/backbone.hpp"
#include "latentjudge/tensor.hpp"

namespace lj {

// ---------------------------------------------------------------------------
// Cross-space projectors between the Reasoner embedding space (d_r) and the
// Extractor working space (d_w). Identity-initialized when square.
// ---------------------------------------------------------------------------

struct ProjectorPair {
  Tensor r_to_w;  // d_r x d_w
  Tensor w_to_r;  // d_w x d_r
  bool trainable = true;

  static ProjectorPair create(std::int64_t d_r, std::int64_t d_w, std::uint64_t seed);
  std::vector<NamedTensor> parameters(const std::string& prefix) const;
};

// Learned query rows appended after the projected prompt; their last-layer
// hidden states are the latent draft.
struct DraftQueries {
  Tensor q;  // latent_len x d_w

  std::int64_t latent_len() const { return q.rows(); }
  static DraftQueries create(std::int64_t latent_len, std::int64_t d_w, std::uint64_t seed);
  std::vector<NamedTensor> parameters(const std::string& prefix) const;
};

enum class Insertion { tail, middle, head, prefix_dec };

const char* insertion_name(Insertion ins);
Insertion insertion_from_name(const std::string& name);

// sequence length produced by assemble() for a given insertion
std::int64_t assembled_length(std::int64_t prompt_len, std::int64_t latent_len, Insertion ins);

Tensor project_to_extractor(const Tensor& prompt, const ProjectorPair& proj);
Tensor project_to_reasoner(const Tensor& draft_w, const ProjectorPair& proj);

// One Extractor pass over [projected prompt; queries] under a causal mask;
// returns the last-layer hidden states at the query positions. No token is
// ever decoded.
Tensor extract_draft(const Tensor& projected_prompt, const DraftQueries& queries, const Backbone& extractor,
                     const AdapterSet& extractor_adapters);

// Insert the draft into the prompt rows. dec_row (1 x d_r) is required for
// prefix_dec and ignored otherwise.
Tensor assemble(const Tensor& prompt, const Tensor& draft, Insertion ins, const Tensor& dec_row = {});

// Greedy autoregressive decode of latent_len summary tokens from the
// Extractor's LM head conditioned on the raw token sequence. Exactly
// latent_len sequential forward passes; no gradients flow.
std::vector<int> explicit_summarize(std::span<const int> tokens, const Backbone& extractor,
                                    std::int64_t latent_len);

}  // namespace lj
