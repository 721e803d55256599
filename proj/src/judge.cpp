#include "latentjudge/judge.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>

using nlohmann::json;

namespace lj {

const char* train_mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::one_stage: return "one_stage";
    case TrainMode::decoupled: return "decoupled";
    case TrainMode::explicit_baseline: return "explicit_baseline";
    case TrainMode::no_extractor: return "no_extractor";
    case TrainMode::no_reasoner: return "no_reasoner";
  }
  return "?";
}

TrainMode train_mode_from_name(const std::string& name) {
  if (name == "one_stage") return TrainMode::one_stage;
  if (name == "decoupled") return TrainMode::decoupled;
  if (name == "explicit_baseline") return TrainMode::explicit_baseline;
  if (name == "no_extractor") return TrainMode::no_extractor;
  if (name == "no_reasoner") return TrainMode::no_reasoner;
  throw ConfigError("unknown train mode '" + name + "'");
}

bool mode_uses_draft(TrainMode mode) {
  return mode == TrainMode::decoupled || mode == TrainMode::no_reasoner;
}

ReadoutHead ReadoutHead::create(std::int64_t d_r) {
  ReadoutHead h;
  h.w = Tensor::zeros({d_r, 1}, true);
  h.b = Tensor::zeros({1, 1}, true);
  return h;
}

std::vector<NamedTensor> ReadoutHead::parameters(const std::string& prefix) const {
  return {{prefix + "w", w}, {prefix + "b", b}};
}

void TrainConfig::validate() const {
  if (learning_rate < 0.0) throw ConfigError("train: learning_rate must be >= 0");
  if (steps < 0) throw ConfigError("train: steps must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (latent_len < 1) throw ConfigError("train: latent_len must be >= 1");
  if (threshold <= 0.0 || threshold >= 1.0) throw ConfigError("train: threshold must lie in (0,1)");
}

// ---------------------------------------------------------------------------
// JudgeModel
// ---------------------------------------------------------------------------

JudgeModel::JudgeModel(std::shared_ptr<Backbone> reasoner, std::shared_ptr<Backbone> extractor,
                       JudgeModelConfig cfg, std::uint64_t seed)
    : cfg_(cfg), reasoner_(std::move(reasoner)), extractor_(std::move(extractor)) {
  const auto& rc = reasoner_->config();
  const auto& wc = extractor_->config();
  delta_a_ = AdapterSet::create(AdapterRole::reasoner, rc, cfg.adapter_rank, cfg.adapter_alpha,
                                derive_seed(seed, "delta_a"));
  delta_b_ = AdapterSet::create(AdapterRole::extractor, wc, cfg.adapter_rank, cfg.adapter_alpha,
                                derive_seed(seed, "delta_b"));
  projectors_ = ProjectorPair::create(rc.d_model, wc.d_model, derive_seed(seed, "projectors"));
  queries_ = DraftQueries::create(cfg.latent_len, wc.d_model, derive_seed(seed, "queries"));
  head_ = ReadoutHead::create(rc.d_model);
  dec_token_ = dec_token(rc.vocab_size);
  apply_mode_freezing();
}

const std::vector<std::string>& JudgeModel::group_names() {
  static const std::vector<std::string> names{"delta_a", "delta_b", "queries", "projectors",
                                              "head",    "base_reasoner", "base_extractor"};
  return names;
}

std::vector<NamedTensor> JudgeModel::group(const std::string& name) const {
  if (name == "delta_a") return delta_a_.parameters("delta_a.");
  if (name == "delta_b") return delta_b_.parameters("delta_b.");
  if (name == "queries") return queries_.parameters("queries.");
  if (name == "projectors") return projectors_.parameters("projectors.");
  if (name == "head") return head_.parameters("head.");
  if (name == "base_reasoner") {
    std::vector<NamedTensor> out;
    for (auto& nt : reasoner_->parameters()) out.push_back({"reasoner." + nt.name, nt.t});
    return out;
  }
  if (name == "base_extractor") {
    std::vector<NamedTensor> out;
    for (auto& nt : extractor_->parameters()) out.push_back({"extractor." + nt.name, nt.t});
    return out;
  }
  throw UsageError("unknown parameter group '" + name + "'");
}

std::vector<std::string> JudgeModel::trainable_group_names() const {
  switch (cfg_.mode) {
    case TrainMode::one_stage:
    case TrainMode::no_extractor:
    case TrainMode::explicit_baseline:
      return {"delta_a", "head"};
    case TrainMode::decoupled:
      return {"delta_a", "delta_b", "queries", "projectors", "head"};
    case TrainMode::no_reasoner:
      return {"delta_b", "queries", "projectors", "head"};
  }
  return {};
}

std::vector<std::string> JudgeModel::frozen_group_names() const {
  auto trainable = trainable_group_names();
  std::vector<std::string> out;
  for (const auto& name : group_names()) {
    if (std::find(trainable.begin(), trainable.end(), name) == trainable.end()) out.push_back(name);
  }
  return out;
}

std::vector<Tensor> JudgeModel::trainable_tensors() const {
  std::vector<Tensor> out;
  for (const auto& gname : trainable_group_names()) {
    for (auto& nt : group(gname)) out.push_back(nt.t);
  }
  return out;
}

std::uint64_t JudgeModel::group_checksum(const std::string& name) const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& nt : group(name)) {
    h = fnv1a64(nt.name.data(), nt.name.size(), h);
    const auto& v = nt.t.values();
    h = fnv1a64(v.data(), v.size() * sizeof(double), h);
  }
  return h;
}

std::map<std::string, std::uint64_t> JudgeModel::frozen_checksums() const {
  std::map<std::string, std::uint64_t> out;
  for (const auto& name : frozen_group_names()) out[name] = group_checksum(name);
  return out;
}

void JudgeModel::apply_mode_freezing() {
  for (const auto& name : group_names()) {
    bool trainable = false;
    for (const auto& t : trainable_group_names()) {
      if (t == name) trainable = true;
    }
    if (name == "base_reasoner" || name == "base_extractor") trainable = false;
    for (auto& nt : group(name)) nt.t.set_requires_grad(trainable);
  }
}

std::vector<NamedTensor> JudgeModel::all_parameters() const {
  std::vector<NamedTensor> out;
  for (const char* gname : {"delta_a", "delta_b", "queries", "projectors", "head"}) {
    for (auto& nt : group(gname)) out.push_back(nt);
  }
  return out;
}

const std::vector<int>& JudgeModel::summary_for(const std::string& id, std::span<const int> tokens) const {
  auto it = summary_cache_.find(id);
  if (it != summary_cache_.end()) return it->second;
  auto summary = explicit_summarize(tokens, *extractor_, cfg_.latent_len);
  return summary_cache_.emplace(id, std::move(summary)).first->second;
}

Tensor JudgeModel::assembled(std::span<const int> tokens) const {
  Tensor prompt = reasoner_->embed(tokens);
  if (mode_uses_draft(cfg_.mode)) {
    Tensor projected = project_to_extractor(prompt, projectors_);
    Tensor draft_w = extract_draft(projected, queries_, *extractor_, delta_b_);
    Tensor draft = project_to_reasoner(draft_w, projectors_);
    Tensor dec_row;
    if (cfg_.insertion == Insertion::prefix_dec) {
      dec_row = gather_rows(reasoner_->token_embedding(), {dec_token_});
    }
    return assemble(prompt, draft, cfg_.insertion, dec_row);
  }
  if (cfg_.mode == TrainMode::explicit_baseline) {
    // discrete summary rows, re-embedded by the Reasoner; argmax decode means
    // no gradient flows into the summarizer
    std::string key = std::to_string(fnv1a64(tokens.data(), tokens.size() * sizeof(int)));
    const auto& summary = summary_for(key, tokens);
    Tensor rows = gather_rows(reasoner_->token_embedding(), summary);
    return concat_rows({prompt, rows});
  }
  return prompt;
}

Tensor JudgeModel::logit(std::span<const int> tokens) const {
  return readout_logit(assembled(tokens), *reasoner_, delta_a_, head_);
}

Tensor JudgeModel::terminal_state(std::span<const int> tokens) const {
  Tensor y = assembled(tokens);
  Tensor hidden = reasoner_->forward(y, &delta_a_, AttentionMask::causal(y.rows()));
  return terminal_hidden(hidden);
}

double JudgeModel::prob(std::span<const int> tokens) const {
  NoTapeScope no_grad;
  Tensor z = logit(tokens);
  return sigmoid(z).item();
}

Tensor readout_logit(const Tensor& assembled, const Backbone& reasoner, const AdapterSet& reasoner_adapters,
                     const ReadoutHead& head) {
  if (reasoner_adapters.role != AdapterRole::reasoner) {
    throw UsageError(std::string("readout: adapter set has role '") +
                     adapter_role_name(reasoner_adapters.role) + "', expected 'reasoner'");
  }
  Tensor hidden = reasoner.forward(assembled, &reasoner_adapters, AttentionMask::causal(assembled.rows()));
  Tensor h_end = terminal_hidden(hidden);
  return add(matmul(h_end, head.w), head.b);
}

Tensor readout_prob(const Tensor& assembled, const Backbone& reasoner, const AdapterSet& reasoner_adapters,
                    const ReadoutHead& head) {
  return sigmoid(readout_logit(assembled, reasoner, reasoner_adapters, head));
}

int classify(double p, double tau) {
  if (tau <= 0.0 || tau >= 1.0) throw UsageError("classify: threshold must lie in (0,1)");
  return p >= tau ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

Checkpoint JudgeModel::to_checkpoint(const std::string& extra_meta_json) const {
  json meta = json::parse(extra_meta_json);
  meta["reasoner_config"] = json::parse(reasoner_->config().to_json_string());
  meta["extractor_config"] = json::parse(extractor_->config().to_json_string());
  meta["mode"] = train_mode_name(cfg_.mode);
  meta["insertion"] = insertion_name(cfg_.insertion);
  meta["latent_len"] = cfg_.latent_len;
  meta["adapter_rank"] = cfg_.adapter_rank;
  meta["adapter_alpha"] = cfg_.adapter_alpha;
  Checkpoint ck;
  ck.meta_json = meta.dump();
  for (const char* gname : {"base_reasoner", "base_extractor"}) {
    for (auto& nt : group(gname)) ck.tensors.push_back(nt);
  }
  for (auto& nt : all_parameters()) ck.tensors.push_back(nt);
  return ck;
}

JudgeModel JudgeModel::from_checkpoint(const Checkpoint& ck) {
  json meta = json::parse(ck.meta_json);
  auto rc = BackboneConfig::from_json_string(meta.at("reasoner_config").dump());
  auto wc = BackboneConfig::from_json_string(meta.at("extractor_config").dump());
  JudgeModelConfig mc;
  mc.mode = train_mode_from_name(meta.at("mode").get<std::string>());
  mc.insertion = insertion_from_name(meta.at("insertion").get<std::string>());
  mc.latent_len = meta.at("latent_len").get<std::int64_t>();
  mc.adapter_rank = meta.at("adapter_rank").get<std::int64_t>();
  mc.adapter_alpha = meta.at("adapter_alpha").get<double>();

  auto reasoner = std::make_shared<Backbone>(rc, 0);
  auto extractor = std::make_shared<Backbone>(wc, 0);
  auto strip = [&](const std::string& prefix) {
    std::vector<NamedTensor> out;
    for (const auto& nt : ck.tensors) {
      if (nt.name.rfind(prefix, 0) == 0) out.push_back({nt.name.substr(prefix.size()), nt.t});
    }
    return out;
  };
  reasoner->load_parameters(strip("reasoner."));
  extractor->load_parameters(strip("extractor."));
  reasoner->freeze();
  extractor->freeze();

  JudgeModel model(reasoner, extractor, mc, 0);
  for (auto& own : model.all_parameters()) {
    const Tensor* src = ck.find(own.name);
    if (!src) throw InputError("checkpoint: missing tensor '" + own.name + "'");
    if (src->shape() != own.t.shape()) {
      throw ShapeError("checkpoint: '" + own.name + "' has shape " + shape_str(src->shape()) + ", expected " +
                       shape_str(own.t.shape()));
    }
    own.t.values() = src->values();
  }
  model.apply_mode_freezing();
  return model;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

double train_step(JudgeModel& model, Adam& opt, const std::vector<const TrajectoryExample*>& batch,
                  std::int64_t step_index) {
  if (batch.empty()) throw UsageError("train_step: empty batch");
  opt.zero_grad();
  double total = 0.0;
  double inv = 1.0 / static_cast<double>(batch.size());
  for (const TrajectoryExample* ex : batch) {
    Tape tape;
    TapeScope scope(tape);
    Tensor z = model.logit(ex->tokens);
    Tensor p = sigmoid(z);
    Tensor loss = bce_loss(p, ex->label);
    double v = loss.item();
    if (!std::isfinite(v)) {
      throw NumericError("train: non-finite loss at step " + std::to_string(step_index) + " (example id '" +
                         ex->id + "')");
    }
    total += v;
    tape.backward(loss, inv);
  }
  opt.step();
  return total * inv;
}

double plain_accuracy(const JudgeModel& model, const std::vector<TrajectoryExample>& examples, double tau) {
  if (examples.empty()) throw UsageError("accuracy: empty example set");
  std::int64_t hits = 0;
  for (const auto& ex : examples) {
    if (classify(model.prob(ex.tokens), tau) == ex.label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

TrainResult train_judge(JudgeModel& model, const TrainConfig& cfg,
                        const std::vector<TrajectoryExample>& train_set,
                        const std::vector<TrajectoryExample>& val_set) {
  cfg.validate();
  if (cfg.mode != model.model_config().mode) {
    throw UsageError(std::string("train: config mode '") + train_mode_name(cfg.mode) +
                     "' does not match model mode '" + train_mode_name(model.model_config().mode) + "'");
  }
  if (train_set.empty()) throw UsageError("train: empty training set");
  model.apply_mode_freezing();

  auto initial = model.frozen_checksums();
  Adam opt(model.trainable_tensors(), cfg.learning_rate);
  Rng batch_rng(derive_seed(cfg.seed, "batches"));

  std::vector<TrajectoryExample> eval_subset;
  if (!val_set.empty()) {
    std::int64_t n = std::min<std::int64_t>(cfg.eval_subset, static_cast<std::int64_t>(val_set.size()));
    eval_subset.assign(val_set.begin(), val_set.begin() + n);
  }

  TrainResult result;
  result.freeze_contract_clean = true;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    std::vector<const TrajectoryExample*> batch;
    for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
      auto idx = static_cast<std::size_t>(batch_rng.randint(0, static_cast<std::int64_t>(train_set.size()) - 1));
      batch.push_back(&train_set[idx]);
    }
    double loss = train_step(model, opt, batch, step);

    auto now = model.frozen_checksums();
    if (now != initial) {
      result.freeze_contract_clean = false;
      for (const auto& [name, sum] : now) {
        if (initial.at(name) != sum) {
          throw Error(ErrorKind::runtime, "train: frozen parameter group '" + name + "' changed at step " +
                                              std::to_string(step));
        }
      }
    }

    StepRecord rec;
    rec.step = step;
    rec.loss = loss;
    if (!eval_subset.empty() && cfg.eval_every > 0 &&
        ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps)) {
      rec.val_accuracy = plain_accuracy(model, eval_subset, cfg.threshold);
      rec.has_val = true;
    }
    result.history.push_back(rec);
    result.final_loss = loss;
    ++result.steps_run;
  }
  result.frozen_checksums = model.frozen_checksums();
  result.freeze_contract_clean = result.freeze_contract_clean && result.frozen_checksums == initial;
  if (!val_set.empty()) {
    result.final_val_accuracy = plain_accuracy(model, val_set, cfg.threshold);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Full-chain gradient check
// ---------------------------------------------------------------------------

GradCheckReport gradcheck_full_chain(JudgeModel& model, std::span<const int> tokens, int label,
                                     double fd_step, std::int64_t coords_per_group, std::uint64_t seed) {
  Rng rng(seed);
  // move to a generic point: zero-initialized ups/head would hide dead paths
  for (auto& nt : model.all_parameters()) {
    if (!nt.t.requires_grad()) continue;
    for (auto& v : nt.t.values()) v += 0.02 * rng.normal();
  }

  Tape tape;
  TapeScope scope(tape);
  Tensor z = model.logit(tokens);
  Tensor p = sigmoid(z);
  Tensor loss = bce_loss(p, label);
  tape.backward(loss);

  GradCheckReport rep;
  for (const auto& gname : model.trainable_group_names()) {
    auto params = model.group(gname);
    double worst = 0.0;
    // one sampled tensor is required; checking every tensor in the group is
    // cheap at this scale
    for (auto& nt : params) {
      worst = std::max(worst, gradcheck_max_rel_err(nt.t, tape, loss, fd_step, rng, coords_per_group));
    }
    rep.max_rel_err[gname] = worst;
    rep.worst = std::max(rep.worst, worst);
  }
  rep.pass = rep.worst < 1e-4;
  return rep;
}

}  // namespace lj
