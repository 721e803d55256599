#include "latentjudge/backbone.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

using nlohmann::json;

namespace lj {

// ---------------------------------------------------------------------------
// BackboneConfig
// ---------------------------------------------------------------------------

void BackboneConfig::validate() const {
  if (vocab_size < 1) throw ConfigError("backbone: vocab_size must be positive");
  if (d_model < 1) throw ConfigError("backbone: d_model must be positive");
  if (n_layers < 1) throw ConfigError("backbone: n_layers must be positive");
  if (n_heads < 1) throw ConfigError("backbone: n_heads must be positive");
  if (d_model % n_heads != 0) {
    throw ConfigError("backbone: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (max_seq_len < 1) throw ConfigError("backbone: max_seq_len must be positive");
}

std::string BackboneConfig::to_json_string() const {
  return json{{"vocab_size", vocab_size}, {"d_model", d_model},       {"n_layers", n_layers},
              {"n_heads", n_heads},       {"max_seq_len", max_seq_len}, {"ffn_hidden", ffn_hidden}}
      .dump();
}

BackboneConfig BackboneConfig::from_json_string(const std::string& s) {
  json j = json::parse(s);
  BackboneConfig cfg;
  cfg.vocab_size = j.at("vocab_size").get<std::int64_t>();
  cfg.d_model = j.at("d_model").get<std::int64_t>();
  cfg.n_layers = j.at("n_layers").get<std::int64_t>();
  cfg.n_heads = j.at("n_heads").get<std::int64_t>();
  cfg.max_seq_len = j.at("max_seq_len").get<std::int64_t>();
  cfg.ffn_hidden = j.at("ffn_hidden").get<std::int64_t>();
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// AdapterSet
// ---------------------------------------------------------------------------

const char* adapter_role_name(AdapterRole role) {
  return role == AdapterRole::reasoner ? "reasoner" : "extractor";
}

const AdapterPair* AdapterSet::find(const std::string& name) const {
  auto it = targets.find(name);
  return it == targets.end() ? nullptr : &it->second;
}

std::vector<NamedTensor> AdapterSet::parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (const auto& [name, pair] : targets) {
    out.push_back({prefix + name + ".down", pair.down});
    out.push_back({prefix + name + ".up", pair.up});
  }
  return out;
}

void AdapterSet::zero_deltas() {
  for (auto& [name, pair] : targets) {
    std::fill(pair.up.values().begin(), pair.up.values().end(), 0.0);
  }
}

AdapterSet AdapterSet::create(AdapterRole role, const BackboneConfig& cfg, std::int64_t rank, double alpha,
                              std::uint64_t seed) {
  if (rank < 1) throw ConfigError("adapter: rank must be positive");
  AdapterSet set;
  set.role = role;
  set.rank = rank;
  set.alpha = alpha;
  Rng rng(seed);
  double std_down = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
    for (const char* member : {"wq", "wv"}) {
      AdapterPair pair;
      pair.down = Tensor::randn({cfg.d_model, rank}, rng, std_down, true);
      pair.up = Tensor::zeros({rank, cfg.d_model}, true);  // zero-delta at init
      set.targets.emplace("layer" + std::to_string(l) + "." + member, std::move(pair));
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// AttentionMask
// ---------------------------------------------------------------------------

AttentionMask AttentionMask::causal(std::int64_t n) {
  AttentionMask m;
  m.n = n;
  m.allowed.assign(static_cast<std::size_t>(n * n), 0);
  for (std::int64_t q = 0; q < n; ++q) {
    for (std::int64_t k = 0; k <= q; ++k) m.set(q, k, true);
  }
  return m;
}

void AttentionMask::validate() const {
  for (std::int64_t q = 0; q < n; ++q) {
    if (!at(q, q)) throw ConfigError("mask: query " + std::to_string(q) + " cannot attend to itself");
    for (std::int64_t k = q + 1; k < n; ++k) {
      if (at(q, k)) {
        throw ConfigError("mask: non-causal entry at (" + std::to_string(q) + ", " + std::to_string(k) + ")");
      }
    }
  }
}

AccessReport causal_accessibility_check(const AttentionMask& mask, std::int64_t p_len, std::int64_t s_len,
                                        bool dec) {
  std::int64_t total = p_len + s_len + (dec ? 1 : 0);
  if (mask.n < total) {
    throw UsageError("causal_accessibility_check: mask of size " + std::to_string(mask.n) +
                     " does not cover " + std::to_string(total) + " positions");
  }
  AccessReport rep;
  rep.readout_position = total - 1;
  for (std::int64_t k = 0; k < p_len + s_len; ++k) {
    if (!mask.at(rep.readout_position, k)) {
      rep.pass = false;
      rep.violating_query = rep.readout_position;
      rep.violating_key = k;
      rep.detail = "readout position " + std::to_string(rep.readout_position) + " cannot attend to position " +
                   std::to_string(k);
      return rep;
    }
  }
  rep.detail = "readout position attends to all of P and S";
  return rep;
}

// ---------------------------------------------------------------------------
// Attention and transformer stack
// ---------------------------------------------------------------------------

namespace {

// x.W plus the low-rank delta when the adapter set carries this target
Tensor project(const Tensor& x, const Tensor& w, const AdapterSet* adapters, const std::string& name) {
  Tensor out = matmul(x, w);
  if (adapters) {
    if (const AdapterPair* pair = adapters->find(name)) {
      out = add(out, scale(matmul(matmul(x, pair->down), pair->up), adapters->scaling()));
    }
  }
  return out;
}

}  // namespace

Tensor multi_head_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                            const Tensor& wo, std::int64_t n_heads, const AttentionMask& mask,
                            const AdapterSet* adapters, const std::string& prefix) {
  Tensor q = project(x, wq, adapters, prefix + ".wq");
  Tensor k = project(x, wk, adapters, prefix + ".wk");
  Tensor v = project(x, wv, adapters, prefix + ".wv");
  auto allowed = std::make_shared<const std::vector<std::uint8_t>>(mask.allowed);
  return matmul(attention_heads(q, k, v, n_heads, allowed), wo);
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

Backbone::Backbone(BackboneConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  // embedding scales sized so first-layer attention logits start at O(1);
  // post-LN layers norm everything downstream
  embedding_ = Tensor::randn({cfg_.vocab_size, cfg_.d_model}, rng, 0.35, true);
  positional_ = Tensor::randn({cfg_.max_seq_len, cfg_.d_model}, rng, 0.15, true);
  // separate LM head, small init: initial next-token predictions stay near
  // uniform independent of the embedding scale
  lm_head_ = Tensor::randn({cfg_.d_model, cfg_.vocab_size}, rng, 0.02, true);
  double std_attn = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
  double std_ffn = 1.0 / std::sqrt(static_cast<double>(cfg_.ffn_dim()));
  layers_.resize(static_cast<std::size_t>(cfg_.n_layers));
  for (auto& lw : layers_) {
    lw.wq = Tensor::randn({cfg_.d_model, cfg_.d_model}, rng, std_attn, true);
    lw.wk = Tensor::randn({cfg_.d_model, cfg_.d_model}, rng, std_attn, true);
    lw.wv = Tensor::randn({cfg_.d_model, cfg_.d_model}, rng, std_attn, true);
    lw.wo = Tensor::randn({cfg_.d_model, cfg_.d_model}, rng, std_attn, true);
    lw.w1 = Tensor::randn({cfg_.d_model, cfg_.ffn_dim()}, rng, std_attn, true);
    lw.b1 = Tensor::zeros({1, cfg_.ffn_dim()}, true);
    lw.w2 = Tensor::randn({cfg_.ffn_dim(), cfg_.d_model}, rng, std_ffn, true);
    lw.b2 = Tensor::zeros({1, cfg_.d_model}, true);
    lw.ln1_gain = Tensor::full({1, cfg_.d_model}, 1.0, true);
    lw.ln1_bias = Tensor::zeros({1, cfg_.d_model}, true);
    lw.ln2_gain = Tensor::full({1, cfg_.d_model}, 1.0, true);
    lw.ln2_bias = Tensor::zeros({1, cfg_.d_model}, true);
  }
}

Tensor Backbone::embed(std::span<const int> tokens) const {
  auto n = static_cast<std::int64_t>(tokens.size());
  if (n > cfg_.max_seq_len) {
    throw InputError("embed: sequence of length " + std::to_string(n) + " exceeds max_seq_len " +
                     std::to_string(cfg_.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= cfg_.vocab_size) {
      throw InputError("embed: token id " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(cfg_.vocab_size));
    }
  }
  if (n == 0) return Tensor::zeros({0, cfg_.d_model});
  Tensor rows = gather_rows(embedding_, std::vector<int>(tokens.begin(), tokens.end()));
  return add(rows, slice_rows(positional_, 0, n));
}

Tensor Backbone::forward(const Tensor& rows, const AdapterSet* adapters, const AttentionMask& mask) const {
  ++forward_count_;
  std::int64_t n = rows.rows();
  if (rows.cols() != cfg_.d_model) {
    throw ShapeError("forward: input shape " + shape_str(rows.shape()) + " does not match d_model " +
                     std::to_string(cfg_.d_model));
  }
  if (n > cfg_.max_seq_len) {
    throw InputError("forward: sequence of length " + std::to_string(n) + " exceeds max_seq_len " +
                     std::to_string(cfg_.max_seq_len));
  }
  if (mask.n != n) {
    throw ShapeError("forward: mask shape " + shape_str({mask.n, mask.n}) + " does not match input rows " +
                     std::to_string(n));
  }
  if (adapters) {
    for (const auto& [name, pair] : adapters->targets) {
      auto dot = name.find('.');
      bool ok = dot != std::string::npos && name.rfind("layer", 0) == 0;
      if (ok) {
        std::int64_t layer = std::stoll(name.substr(5, dot - 5));
        std::string member = name.substr(dot + 1);
        ok = layer >= 0 && layer < cfg_.n_layers &&
             (member == "wq" || member == "wk" || member == "wv" || member == "wo");
      }
      if (!ok) throw UsageError("forward: adapter target '" + name + "' does not exist in the backbone");
    }
  }
  Tensor x = rows;
  for (std::int64_t l = 0; l < cfg_.n_layers; ++l) {
    const auto& lw = layers_[static_cast<std::size_t>(l)];
    std::string prefix = "layer" + std::to_string(l);
    Tensor attn = multi_head_attention(x, lw.wq, lw.wk, lw.wv, lw.wo, cfg_.n_heads, mask, adapters, prefix);
    x = layer_norm(add(x, attn), lw.ln1_gain, lw.ln1_bias, kLayerNormEps);
    Tensor h = gelu(add_row_vector(matmul(x, lw.w1), lw.b1));
    Tensor f = add_row_vector(matmul(h, lw.w2), lw.b2);
    x = layer_norm(add(x, f), lw.ln2_gain, lw.ln2_bias, kLayerNormEps);
  }
  return x;
}

Tensor Backbone::lm_logits(const Tensor& hidden) const { return matmul(hidden, lm_head_); }

double Backbone::lm_pretrain_step(const std::vector<std::vector<int>>& batch, Adam& opt) {
  if (frozen_) throw UsageError("lm_pretrain_step: backbone is frozen");
  if (batch.empty()) throw UsageError("lm_pretrain_step: empty batch");
  opt.zero_grad();
  double total = 0.0;
  double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& seq : batch) {
    if (seq.size() < 2) throw InputError("lm_pretrain_step: sequences need at least 2 tokens");
    std::vector<int> inputs(seq.begin(), seq.end() - 1);
    std::vector<int> targets(seq.begin() + 1, seq.end());
    Tape tape;
    TapeScope scope(tape);
    Tensor rows = embed(inputs);
    Tensor hidden = forward(rows, nullptr, AttentionMask::causal(static_cast<std::int64_t>(inputs.size())));
    Tensor loss = cross_entropy_rows(lm_logits(hidden), targets);
    total += loss.item();
    tape.backward(loss, inv);
  }
  opt.step();
  return total * inv;
}

void Backbone::freeze() {
  frozen_ = true;
  for (auto& nt : parameters()) nt.t.set_requires_grad(false);
}

std::vector<NamedTensor> Backbone::parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"embed.tokens", embedding_});
  out.push_back({"embed.pos", positional_});
  out.push_back({"lm_head", lm_head_});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& lw = layers_[l];
    std::string p = "layer" + std::to_string(l) + ".";
    out.push_back({p + "wq", lw.wq});
    out.push_back({p + "wk", lw.wk});
    out.push_back({p + "wv", lw.wv});
    out.push_back({p + "wo", lw.wo});
    out.push_back({p + "ffn.w1", lw.w1});
    out.push_back({p + "ffn.b1", lw.b1});
    out.push_back({p + "ffn.w2", lw.w2});
    out.push_back({p + "ffn.b2", lw.b2});
    out.push_back({p + "ln1.gain", lw.ln1_gain});
    out.push_back({p + "ln1.bias", lw.ln1_bias});
    out.push_back({p + "ln2.gain", lw.ln2_gain});
    out.push_back({p + "ln2.bias", lw.ln2_bias});
  }
  return out;
}

std::vector<Tensor> Backbone::parameter_tensors() const {
  std::vector<Tensor> out;
  for (auto& nt : parameters()) out.push_back(nt.t);
  return out;
}

void Backbone::load_parameters(const std::vector<NamedTensor>& named) {
  auto mine = parameters();
  for (auto& own : mine) {
    const NamedTensor* match = nullptr;
    for (const auto& nt : named) {
      if (nt.name == own.name) {
        match = &nt;
        break;
      }
    }
    if (!match) throw InputError("load_parameters: missing tensor '" + own.name + "'");
    if (match->t.shape() != own.t.shape()) {
      throw ShapeError("load_parameters: '" + own.name + "' has shape " + shape_str(match->t.shape()) +
                       ", expected " + shape_str(own.t.shape()));
    }
    own.t.values() = match->t.values();
  }
}

Tensor terminal_hidden(const Tensor& hidden) {
  std::int64_t n = hidden.rows();
  if (n < 1) throw InputError("terminal_hidden: empty hidden-state matrix");
  return slice_rows(hidden, n - 1, 1);
}

double pretrain_language_model(Backbone& model, const std::vector<std::vector<int>>& corpus,
                               std::int64_t steps, std::int64_t batch_size, double lr, std::uint64_t seed) {
  if (corpus.empty()) throw UsageError("pretrain: empty corpus");
  Adam opt(model.parameter_tensors(), lr);
  Rng rng(derive_seed(seed, "pretrain"));
  double tail_sum = 0.0;
  std::int64_t tail_n = 0;
  for (std::int64_t step = 0; step < steps; ++step) {
    std::vector<std::vector<int>> batch;
    for (std::int64_t b = 0; b < batch_size; ++b) {
      batch.push_back(corpus[static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(corpus.size()) - 1))]);
    }
    double loss = model.lm_pretrain_step(batch, opt);
    if (!std::isfinite(loss)) {
      throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));
    }
    if (step >= steps - 10) {
      tail_sum += loss;
      ++tail_n;
    }
  }
  return tail_n > 0 ? tail_sum / static_cast<double>(tail_n) : 0.0;
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'L', 'J', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void write_pod(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f, const std::string& path) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw ParseError("checkpoint: truncated file " + path);
  return v;
}
}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& nt : tensors) {
    if (nt.name == name) return &nt.t;
  }
  return nullptr;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(kMagic, sizeof(kMagic));
  write_pod<std::uint64_t>(f, meta_json.size());
  f.write(meta_json.data(), static_cast<std::streamsize>(meta_json.size()));
  write_pod<std::uint64_t>(f, tensors.size());
  for (const auto& nt : tensors) {
    write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(nt.name.size()));
    f.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    const auto& shape = nt.t.shape();
    write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) write_pod<std::int64_t>(f, d);
    const auto& vals = nt.t.values();
    f.write(reinterpret_cast<const char*>(vals.data()),
            static_cast<std::streamsize>(vals.size() * sizeof(double)));
  }
  if (!f) throw IoError("write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ParseError("checkpoint: bad magic in " + path);
  }
  Checkpoint ck;
  auto meta_len = read_pod<std::uint64_t>(f, path);
  ck.meta_json.resize(meta_len);
  f.read(ck.meta_json.data(), static_cast<std::streamsize>(meta_len));
  auto count = read_pod<std::uint64_t>(f, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    auto name_len = read_pod<std::uint32_t>(f, path);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    auto rank = read_pod<std::uint32_t>(f, path);
    Shape shape(rank);
    std::int64_t total = 1;
    for (auto& d : shape) {
      d = read_pod<std::int64_t>(f, path);
      total *= d;
    }
    Buffer data;
    data.resize(static_cast<std::size_t>(total));
    f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!f) throw ParseError("checkpoint: truncated tensor data in " + path);
    auto ptr = std::make_shared<TensorData>(std::move(shape), std::move(data));
    ck.tensors.push_back({std::move(name), Tensor(std::move(ptr))});
  }
  return ck;
}

}  // namespace lj
