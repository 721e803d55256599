#include "latentjudge/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace lj {

namespace {

std::string fmt_f64(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
}

std::int64_t parse_i64(const std::string& full_key, const std::string& v) {
  try {
    std::size_t pos = 0;
    std::int64_t out = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + full_key + "': expected an integer, got '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& full_key, const std::string& v) {
  try {
    std::size_t pos = 0;
    std::uint64_t out = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + full_key + "': expected an unsigned integer, got '" + v + "'");
  }
}

double parse_f64(const std::string& full_key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + full_key + "': expected a number, got '" + v + "'");
  }
}

template <typename T, typename F>
std::vector<T> parse_list(const std::string& full_key, const std::string& v, F parse_one) {
  std::vector<T> out;
  std::istringstream is(v);
  std::string item;
  while (is >> item) out.push_back(parse_one(full_key, item));
  if (out.empty()) throw ConfigError("config: key '" + full_key + "': expected a non-empty list");
  return out;
}

struct KeyDef {
  std::string full_key;
  bool required = false;
  std::function<void(RunConfig&, const std::string&)> apply;
  std::function<std::string(const RunConfig&)> read;
};

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = [] {
    std::vector<KeyDef> d;
    auto add = [&d](const std::string& fk, bool req, auto apply, auto read) {
      d.push_back(KeyDef{fk, req, apply, read});
    };

    add("run.out_dir", true,
        [](RunConfig& c, const std::string& v) { c.out_dir = v; },
        [](const RunConfig& c) { return c.out_dir; });
    add("run.seed", false,
        [](RunConfig& c, const std::string& v) { c.seed = parse_u64("run.seed", v); },
        [](const RunConfig& c) { return std::to_string(c.seed); });

    add("data.vocab_size", false,
        [](RunConfig& c, const std::string& v) { c.data.vocab_size = parse_i64("data.vocab_size", v); },
        [](const RunConfig& c) { return std::to_string(c.data.vocab_size); });
    add("data.seq_len", false,
        [](RunConfig& c, const std::string& v) { c.data.seq_len = parse_i64("data.seq_len", v); },
        [](const RunConfig& c) { return std::to_string(c.data.seq_len); });
    add("data.n_risk_patterns", false,
        [](RunConfig& c, const std::string& v) { c.data.n_risk_patterns = parse_i64("data.n_risk_patterns", v); },
        [](const RunConfig& c) { return std::to_string(c.data.n_risk_patterns); });
    add("data.risk_pattern_len", false,
        [](RunConfig& c, const std::string& v) { c.data.risk_pattern_len = parse_i64("data.risk_pattern_len", v); },
        [](const RunConfig& c) { return std::to_string(c.data.risk_pattern_len); });
    add("data.risk_density", false,
        [](RunConfig& c, const std::string& v) { c.data.risk_density = parse_f64("data.risk_density", v); },
        [](const RunConfig& c) { return fmt_f64(c.data.risk_density); });
    add("data.noise_model", false,
        [](RunConfig& c, const std::string& v) { c.data.noise_model = v; },
        [](const RunConfig& c) { return c.data.noise_model; });
    add("data.distractor_rate", false,
        [](RunConfig& c, const std::string& v) { c.data.distractor_rate = parse_f64("data.distractor_rate", v); },
        [](const RunConfig& c) { return fmt_f64(c.data.distractor_rate); });
    add("data.unsafe_ratio", false,
        [](RunConfig& c, const std::string& v) { c.data.unsafe_ratio = parse_f64("data.unsafe_ratio", v); },
        [](const RunConfig& c) { return fmt_f64(c.data.unsafe_ratio); });
    add("data.seed", false,
        [](RunConfig& c, const std::string& v) { c.data.seed = parse_u64("data.seed", v); },
        [](const RunConfig& c) { return std::to_string(c.data.seed); });
    add("data.exclude_pattern_seed", false,
        [](RunConfig& c, const std::string& v) {
          c.data.exclude_pattern_seed = parse_u64("data.exclude_pattern_seed", v);
        },
        [](const RunConfig& c) { return std::to_string(c.data.exclude_pattern_seed); });
    add("data.n_train", false,
        [](RunConfig& c, const std::string& v) { c.n_train = parse_i64("data.n_train", v); },
        [](const RunConfig& c) { return std::to_string(c.n_train); });
    add("data.n_val", false,
        [](RunConfig& c, const std::string& v) { c.n_val = parse_i64("data.n_val", v); },
        [](const RunConfig& c) { return std::to_string(c.n_val); });
    add("data.n_test", false,
        [](RunConfig& c, const std::string& v) { c.n_test = parse_i64("data.n_test", v); },
        [](const RunConfig& c) { return std::to_string(c.n_test); });

    auto add_backbone = [&add](const std::string& section, BackboneConfig RunConfig::* member) {
      add(section + ".d_model", false,
          [member, section](RunConfig& c, const std::string& v) {
            (c.*member).d_model = parse_i64(section + ".d_model", v);
          },
          [member](const RunConfig& c) { return std::to_string((c.*member).d_model); });
      add(section + ".n_layers", false,
          [member, section](RunConfig& c, const std::string& v) {
            (c.*member).n_layers = parse_i64(section + ".n_layers", v);
          },
          [member](const RunConfig& c) { return std::to_string((c.*member).n_layers); });
      add(section + ".n_heads", false,
          [member, section](RunConfig& c, const std::string& v) {
            (c.*member).n_heads = parse_i64(section + ".n_heads", v);
          },
          [member](const RunConfig& c) { return std::to_string((c.*member).n_heads); });
      add(section + ".max_seq_len", false,
          [member, section](RunConfig& c, const std::string& v) {
            (c.*member).max_seq_len = parse_i64(section + ".max_seq_len", v);
          },
          [member](const RunConfig& c) { return std::to_string((c.*member).max_seq_len); });
      add(section + ".ffn_hidden", false,
          [member, section](RunConfig& c, const std::string& v) {
            (c.*member).ffn_hidden = parse_i64(section + ".ffn_hidden", v);
          },
          [member](const RunConfig& c) { return std::to_string((c.*member).ffn_hidden); });
    };
    add_backbone("reasoner", &RunConfig::reasoner);
    add_backbone("extractor", &RunConfig::extractor);

    add("adapters.rank", false,
        [](RunConfig& c, const std::string& v) { c.adapter_rank = parse_i64("adapters.rank", v); },
        [](const RunConfig& c) { return std::to_string(c.adapter_rank); });
    add("adapters.alpha", false,
        [](RunConfig& c, const std::string& v) { c.adapter_alpha = parse_f64("adapters.alpha", v); },
        [](const RunConfig& c) { return fmt_f64(c.adapter_alpha); });

    add("pretrain.steps", false,
        [](RunConfig& c, const std::string& v) { c.pretrain_steps = parse_i64("pretrain.steps", v); },
        [](const RunConfig& c) { return std::to_string(c.pretrain_steps); });
    add("pretrain.batch_size", false,
        [](RunConfig& c, const std::string& v) { c.pretrain_batch = parse_i64("pretrain.batch_size", v); },
        [](const RunConfig& c) { return std::to_string(c.pretrain_batch); });
    add("pretrain.learning_rate", false,
        [](RunConfig& c, const std::string& v) { c.pretrain_lr = parse_f64("pretrain.learning_rate", v); },
        [](const RunConfig& c) { return fmt_f64(c.pretrain_lr); });
    add("pretrain.seed", false,
        [](RunConfig& c, const std::string& v) { c.pretrain_seed = parse_u64("pretrain.seed", v); },
        [](const RunConfig& c) { return std::to_string(c.pretrain_seed); });

    add("train.mode", false,
        [](RunConfig& c, const std::string& v) {
          train_mode_from_name(v);  // validates
          c.mode = v;
        },
        [](const RunConfig& c) { return c.mode; });
    add("train.steps", false,
        [](RunConfig& c, const std::string& v) { c.train_steps = parse_i64("train.steps", v); },
        [](const RunConfig& c) { return std::to_string(c.train_steps); });
    add("train.batch_size", false,
        [](RunConfig& c, const std::string& v) { c.train_batch = parse_i64("train.batch_size", v); },
        [](const RunConfig& c) { return std::to_string(c.train_batch); });
    add("train.learning_rate", false,
        [](RunConfig& c, const std::string& v) { c.learning_rate = parse_f64("train.learning_rate", v); },
        [](const RunConfig& c) { return fmt_f64(c.learning_rate); });
    add("train.latent_len", false,
        [](RunConfig& c, const std::string& v) { c.latent_len = parse_i64("train.latent_len", v); },
        [](const RunConfig& c) { return std::to_string(c.latent_len); });
    add("train.insertion", false,
        [](RunConfig& c, const std::string& v) {
          insertion_from_name(v);  // validates
          c.insertion = v;
        },
        [](const RunConfig& c) { return c.insertion; });
    add("train.threshold", false,
        [](RunConfig& c, const std::string& v) { c.threshold = parse_f64("train.threshold", v); },
        [](const RunConfig& c) { return fmt_f64(c.threshold); });
    add("train.eval_every", false,
        [](RunConfig& c, const std::string& v) { c.eval_every = parse_i64("train.eval_every", v); },
        [](const RunConfig& c) { return std::to_string(c.eval_every); });
    add("train.backbones_ckpt", false,
        [](RunConfig& c, const std::string& v) { c.backbones_ckpt = v; },
        [](const RunConfig& c) { return c.backbones_ckpt; });

    add("eval.seeds", false,
        [](RunConfig& c, const std::string& v) {
          c.eval_seeds = parse_list<std::uint64_t>("eval.seeds", v, parse_u64);
        },
        [](const RunConfig& c) {
          std::string s;
          for (auto v : c.eval_seeds) s += (s.empty() ? "" : " ") + std::to_string(v);
          return s;
        });
    add("eval.lengths", false,
        [](RunConfig& c, const std::string& v) {
          c.sweep_lengths = parse_list<std::int64_t>("eval.lengths", v, parse_i64);
        },
        [](const RunConfig& c) {
          std::string s;
          for (auto v : c.sweep_lengths) s += (s.empty() ? "" : " ") + std::to_string(v);
          return s;
        });
    add("eval.positions", false,
        [](RunConfig& c, const std::string& v) {
          std::vector<std::string> out;
          std::istringstream is(v);
          std::string item;
          while (is >> item) {
            if (item != "explicit") insertion_from_name(item);  // validates
            out.push_back(item);
          }
          if (out.empty()) throw ConfigError("config: key 'eval.positions': expected a non-empty list");
          c.sweep_positions = out;
        },
        [](const RunConfig& c) {
          std::string s;
          for (const auto& v : c.sweep_positions) s += (s.empty() ? "" : " ") + v;
          return s;
        });
    return d;
  }();
  return defs;
}

const KeyDef* find_def(const std::string& full_key) {
  for (const auto& d : key_defs()) {
    if (d.full_key == full_key) return &d;
  }
  return nullptr;
}

}  // namespace

RunConfig RunConfig::defaults() { return RunConfig{}; }

RunConfig RunConfig::from_file(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open config file: " + path);

  RunConfig cfg;
  std::map<std::string, bool> seen;
  std::string section;
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') {
        throw ConfigError(path + ": line " + std::to_string(line_no) + ": unterminated section header");
      }
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ": line " + std::to_string(line_no) + ": expected key = value");
    }
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    std::string full_key = section.empty() ? key : section + "." + key;
    const KeyDef* def = find_def(full_key);
    if (!def) throw ConfigError(path + ": unknown key '" + full_key + "'");
    def->apply(cfg, value);
    seen[full_key] = true;
  }

  for (const auto& ov : overrides) {
    auto eq = ov.find('=');
    if (eq == std::string::npos) {
      throw UsageError("--set expects section.key=value, got '" + ov + "'");
    }
    std::string full_key = trim(ov.substr(0, eq));
    std::string value = trim(ov.substr(eq + 1));
    const KeyDef* def = find_def(full_key);
    if (!def) throw ConfigError("config: unknown key '" + full_key + "'");
    def->apply(cfg, value);
    seen[full_key] = true;
  }

  for (const auto& d : key_defs()) {
    if (d.required && !seen.count(d.full_key)) {
      throw ConfigError("config: missing required key '" + d.full_key + "'");
    }
  }
  cfg.resolve();
  return cfg;
}

void RunConfig::resolve() {
  data.validate();
  if (data.vocab_size < kReservedTokens + 8) {
    throw ConfigError("config: data.vocab_size too small for the reserved token range");
  }
  reasoner.vocab_size = data.vocab_size;
  extractor.vocab_size = data.vocab_size;

  std::int64_t longest_latent = latent_len;
  for (auto l : sweep_lengths) longest_latent = std::max(longest_latent, l);
  std::int64_t needed = data.seq_len + longest_latent + 1;
  if (reasoner.max_seq_len == 0) reasoner.max_seq_len = needed + 2;
  if (extractor.max_seq_len == 0) extractor.max_seq_len = needed + 2;
  reasoner.validate();
  extractor.validate();
  if (reasoner.max_seq_len < needed) {
    throw ConfigError("config: reasoner.max_seq_len " + std::to_string(reasoner.max_seq_len) +
                      " below seq_len + latent_len + 1 = " + std::to_string(needed));
  }
  if (extractor.max_seq_len < needed) {
    throw ConfigError("config: extractor.max_seq_len " + std::to_string(extractor.max_seq_len) +
                      " below seq_len + latent_len + 1 = " + std::to_string(needed));
  }
  if (adapter_rank < 1) throw ConfigError("config: adapters.rank must be >= 1");
  if (n_train < 2 || n_val < 1 || n_test < 0) throw ConfigError("config: data split sizes too small");
  train_config(seed).validate();
}

std::string RunConfig::canonical() const {
  std::ostringstream os;
  std::string current_section;
  for (const auto& d : key_defs()) {
    auto dot = d.full_key.find('.');
    std::string section = d.full_key.substr(0, dot);
    std::string key = d.full_key.substr(dot + 1);
    if (section != current_section) {
      if (!current_section.empty()) os << "\n";
      os << "[" << section << "]\n";
      current_section = section;
    }
    os << key << " = " << d.read(*this) << "\n";
  }
  return os.str();
}

void RunConfig::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << canonical();
  if (!f) throw IoError("write failed: " + path);
}

std::string RunConfig::config_hash() const {
  std::ostringstream os;
  os << "c" << std::hex << fnv1a64(canonical());
  return os.str();
}

TrainConfig RunConfig::train_config(std::uint64_t run_seed) const {
  TrainConfig tc;
  tc.mode = train_mode_from_name(mode);
  tc.learning_rate = learning_rate;
  tc.steps = train_steps;
  tc.batch_size = train_batch;
  tc.seed = run_seed;
  tc.latent_len = latent_len;
  tc.insertion = insertion_from_name(insertion);
  tc.threshold = threshold;
  tc.eval_every = eval_every;
  return tc;
}

JudgeModelConfig RunConfig::judge_model_config() const {
  JudgeModelConfig mc;
  mc.adapter_rank = adapter_rank;
  mc.adapter_alpha = adapter_alpha;
  mc.latent_len = latent_len;
  mc.insertion = insertion_from_name(insertion);
  mc.mode = train_mode_from_name(mode);
  return mc;
}

}  // namespace lj
