#include "latentjudge/workspace.hpp"

#include <algorithm>
#include <cmath>

namespace lj {

ProjectorPair ProjectorPair::create(std::int64_t d_r, std::int64_t d_w, std::uint64_t seed) {
  ProjectorPair p;
  if (d_r == d_w) {
    p.r_to_w = Tensor::identity(d_r, true);
    p.w_to_r = Tensor::identity(d_r, true);
  } else {
    Rng rng(seed);
    p.r_to_w = Tensor::randn({d_r, d_w}, rng, 1.0 / std::sqrt(static_cast<double>(d_r)), true);
    p.w_to_r = Tensor::randn({d_w, d_r}, rng, 1.0 / std::sqrt(static_cast<double>(d_w)), true);
  }
  return p;
}

std::vector<NamedTensor> ProjectorPair::parameters(const std::string& prefix) const {
  return {{prefix + "r_to_w", r_to_w}, {prefix + "w_to_r", w_to_r}};
}

DraftQueries DraftQueries::create(std::int64_t latent_len, std::int64_t d_w, std::uint64_t seed) {
  if (latent_len < 1) throw ConfigError("draft queries: latent_len must be >= 1");
  DraftQueries q;
  Rng rng(seed);
  q.q = Tensor::randn({latent_len, d_w}, rng, 0.05, true);
  return q;
}

std::vector<NamedTensor> DraftQueries::parameters(const std::string& prefix) const {
  return {{prefix + "queries", q}};
}

const char* insertion_name(Insertion ins) {
  switch (ins) {
    case Insertion::tail: return "tail";
    case Insertion::middle: return "middle";
    case Insertion::head: return "head";
    case Insertion::prefix_dec: return "prefix_dec";
  }
  return "?";
}

Insertion insertion_from_name(const std::string& name) {
  if (name == "tail") return Insertion::tail;
  if (name == "middle") return Insertion::middle;
  if (name == "head") return Insertion::head;
  if (name == "prefix_dec") return Insertion::prefix_dec;
  throw ConfigError("unknown insertion position '" + name + "'");
}

std::int64_t assembled_length(std::int64_t prompt_len, std::int64_t latent_len, Insertion ins) {
  return prompt_len + latent_len + (ins == Insertion::prefix_dec ? 1 : 0);
}

Tensor project_to_extractor(const Tensor& prompt, const ProjectorPair& proj) {
  if (prompt.cols() != proj.r_to_w.rows()) {
    throw ShapeError("project_to_extractor: prompt " + shape_str(prompt.shape()) + " vs projector " +
                     shape_str(proj.r_to_w.shape()));
  }
  return matmul(prompt, proj.r_to_w);
}

Tensor project_to_reasoner(const Tensor& draft_w, const ProjectorPair& proj) {
  if (draft_w.cols() != proj.w_to_r.rows()) {
    throw ShapeError("project_to_reasoner: draft " + shape_str(draft_w.shape()) + " vs projector " +
                     shape_str(proj.w_to_r.shape()));
  }
  return matmul(draft_w, proj.w_to_r);
}

Tensor extract_draft(const Tensor& projected_prompt, const DraftQueries& queries, const Backbone& extractor,
                     const AdapterSet& extractor_adapters) {
  if (extractor_adapters.role != AdapterRole::extractor) {
    throw UsageError(std::string("extract_draft: adapter set has role '") +
                     adapter_role_name(extractor_adapters.role) + "', expected 'extractor'");
  }
  std::int64_t prompt_len = projected_prompt.rows();
  std::int64_t latent_len = queries.latent_len();
  std::int64_t total = prompt_len + latent_len;
  if (total > extractor.config().max_seq_len) {
    throw InputError("extract_draft: " + std::to_string(total) + " rows exceed extractor max_seq_len " +
                     std::to_string(extractor.config().max_seq_len));
  }
  Tensor z = concat_rows({projected_prompt, queries.q});
  Tensor hidden = extractor.forward(z, &extractor_adapters, AttentionMask::causal(total));
  return slice_rows(hidden, prompt_len, latent_len);
}

Tensor assemble(const Tensor& prompt, const Tensor& draft, Insertion ins, const Tensor& dec_row) {
  if (prompt.cols() != draft.cols()) {
    throw ShapeError("assemble: prompt " + shape_str(prompt.shape()) + " and draft " + shape_str(draft.shape()) +
                     " column mismatch");
  }
  switch (ins) {
    case Insertion::tail:
      return concat_rows({prompt, draft});
    case Insertion::head:
      return concat_rows({draft, prompt});
    case Insertion::middle: {
      std::int64_t half = prompt.rows() / 2;
      return concat_rows({slice_rows(prompt, 0, half), draft, slice_rows(prompt, half, prompt.rows() - half)});
    }
    case Insertion::prefix_dec: {
      if (!dec_row.valid() || dec_row.rows() != 1 || dec_row.cols() != prompt.cols()) {
        throw UsageError("assemble: prefix_dec needs a 1-row decision embedding matching the prompt width");
      }
      return concat_rows({prompt, draft, dec_row});
    }
  }
  throw UsageError("assemble: unknown insertion");
}

std::vector<int> explicit_summarize(std::span<const int> tokens, const Backbone& extractor,
                                    std::int64_t latent_len) {
  if (latent_len < 1) throw UsageError("explicit_summarize: latent_len must be >= 1");
  NoTapeScope no_grad;
  std::vector<int> seq(tokens.begin(), tokens.end());
  std::vector<int> summary;
  summary.reserve(static_cast<std::size_t>(latent_len));
  for (std::int64_t step = 0; step < latent_len; ++step) {
    auto n = static_cast<std::int64_t>(seq.size());
    Tensor rows = extractor.embed(seq);
    Tensor hidden = extractor.forward(rows, nullptr, AttentionMask::causal(n));
    Tensor logits = extractor.lm_logits(terminal_hidden(hidden));
    std::int64_t best = 0;
    for (std::int64_t v = 1; v < logits.cols(); ++v) {
      if (logits.at(0, v) > logits.at(0, best)) best = v;  // ties keep the lowest id
    }
    summary.push_back(static_cast<int>(best));
    seq.push_back(static_cast<int>(best));
  }
  return summary;
}

}  // namespace lj
