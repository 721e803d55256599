#include "latentjudge/trajgen.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

using nlohmann::json;

namespace lj {

int role_separator(Role role, std::int64_t vocab_size) {
  return static_cast<int>(vocab_size - kReservedTokens + static_cast<int>(role));
}

int dec_token(std::int64_t vocab_size) { return static_cast<int>(vocab_size - 1); }

std::int64_t background_vocab(std::int64_t vocab_size) { return vocab_size - kReservedTokens; }

namespace {

const char* role_name(Role r) {
  switch (r) {
    case Role::user: return "user";
    case Role::thought: return "thought";
    case Role::action: return "action";
    case Role::feedback: return "feedback";
  }
  return "?";
}

std::optional<Role> role_from_name(const std::string& s) {
  if (s == "user") return Role::user;
  if (s == "thought") return Role::thought;
  if (s == "action") return Role::action;
  if (s == "feedback") return Role::feedback;
  return std::nullopt;
}

std::optional<Role> role_from_separator(int token, std::int64_t vocab_size) {
  int base = static_cast<int>(vocab_size - kReservedTokens);
  if (token >= base && token < base + 4) return static_cast<Role>(token - base);
  return std::nullopt;
}

// row-stochastic background transition table for the markov noise model
std::vector<double> markov_table(const GeneratorConfig& cfg) {
  std::int64_t v = background_vocab(cfg.vocab_size);
  Rng rng(derive_seed(cfg.seed, "noise"));
  std::vector<double> t(static_cast<std::size_t>(v * v));
  for (std::int64_t i = 0; i < v; ++i) {
    double sum = 0.0;
    for (std::int64_t j = 0; j < v; ++j) {
      double w = std::exp(1.5 * rng.normal());
      t[static_cast<std::size_t>(i * v + j)] = w;
      sum += w;
    }
    for (std::int64_t j = 0; j < v; ++j) t[static_cast<std::size_t>(i * v + j)] /= sum;
  }
  return t;
}

std::vector<int> sample_background(const GeneratorConfig& cfg, const std::vector<double>& markov, Rng& rng) {
  std::int64_t v = background_vocab(cfg.vocab_size);
  std::vector<int> out(static_cast<std::size_t>(cfg.seq_len));
  if (cfg.noise_model == "uniform" || markov.empty()) {
    for (auto& t : out) t = static_cast<int>(rng.randint(0, v - 1));
    return out;
  }
  int cur = static_cast<int>(rng.randint(0, v - 1));
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = cur;
    double u = rng.uniform();
    double acc = 0.0;
    int next = static_cast<int>(v - 1);
    for (std::int64_t j = 0; j < v; ++j) {
      acc += markov[static_cast<std::size_t>(cur * v + j)];
      if (u < acc) {
        next = static_cast<int>(j);
        break;
      }
    }
    cur = next;
  }
  return out;
}

std::vector<int> sample_tuple(Rng& rng, std::int64_t len, std::int64_t alphabet) {
  std::vector<int> t(static_cast<std::size_t>(len));
  for (auto& x : t) x = static_cast<int>(rng.randint(0, alphabet - 1));
  return t;
}

bool find_occurrences(std::span<const int> tokens, const std::vector<int>& pat, std::vector<std::int64_t>& out) {
  out.clear();
  std::int64_t n = static_cast<std::int64_t>(tokens.size());
  std::int64_t m = static_cast<std::int64_t>(pat.size());
  for (std::int64_t i = 0; i + m <= n; ++i) {
    bool hit = true;
    for (std::int64_t j = 0; j < m; ++j) {
      if (tokens[static_cast<std::size_t>(i + j)] != pat[static_cast<std::size_t>(j)]) {
        hit = false;
        break;
      }
    }
    if (hit) out.push_back(i);
  }
  return !out.empty();
}

}  // namespace

void GeneratorConfig::validate() const {
  if (vocab_size < kReservedTokens + 8) {
    throw ConfigError("generator: vocab_size must be at least " + std::to_string(kReservedTokens + 8));
  }
  if (seq_len < 2 * risk_pattern_len) {
    throw ConfigError("generator: seq_len " + std::to_string(seq_len) +
                      " cannot hold an ordered pattern pair of length " + std::to_string(risk_pattern_len));
  }
  if (n_risk_patterns < 1) throw ConfigError("generator: n_risk_patterns must be >= 1");
  if (risk_pattern_len < 1) throw ConfigError("generator: risk_pattern_len must be >= 1");
  if (risk_density * static_cast<double>(seq_len) < static_cast<double>(risk_pattern_len)) {
    throw ConfigError("generator: risk_density * seq_len < risk_pattern_len; unsafe examples unconstructible");
  }
  if (distractor_rate < 0.0 || distractor_rate > 1.0) throw ConfigError("generator: distractor_rate outside [0,1]");
  if (unsafe_ratio < 0.0 || unsafe_ratio > 1.0) throw ConfigError("generator: unsafe_ratio outside [0,1]");
  if (noise_model != "uniform" && noise_model != "markov") {
    throw ConfigError("generator: unknown noise_model '" + noise_model + "'");
  }
}

std::string GeneratorConfig::id() const {
  std::ostringstream os;
  os << vocab_size << "|" << seq_len << "|" << n_risk_patterns << "|" << risk_pattern_len << "|" << risk_density
     << "|" << noise_model << "|" << distractor_rate << "|" << unsafe_ratio << "|" << seed << "|"
     << exclude_pattern_seed;
  std::ostringstream id;
  id << "g" << std::hex << fnv1a64(os.str());
  return id.str();
}

PatternTable PatternTable::for_config(const GeneratorConfig& cfg) {
  PatternTable excluded;
  if (cfg.exclude_pattern_seed != 0) {
    GeneratorConfig base = cfg;
    base.seed = cfg.exclude_pattern_seed;
    base.exclude_pattern_seed = 0;
    excluded = PatternTable::for_config(base);
  }
  PatternTable table;
  table.pattern_len = cfg.risk_pattern_len;
  Rng rng(derive_seed(cfg.seed, "patterns"));
  std::int64_t alphabet = background_vocab(cfg.vocab_size);
  while (static_cast<std::int64_t>(table.pairs.size()) < cfg.n_risk_patterns) {
    auto a = sample_tuple(rng, cfg.risk_pattern_len, alphabet);
    auto b = sample_tuple(rng, cfg.risk_pattern_len, alphabet);
    if (a == b || table.contains_tuple(a) || table.contains_tuple(b) || excluded.contains_tuple(a) ||
        excluded.contains_tuple(b)) {
      continue;
    }
    table.pairs.emplace_back(std::move(a), std::move(b));
  }
  return table;
}

bool PatternTable::contains_tuple(const std::vector<int>& t) const {
  for (const auto& [a, b] : pairs) {
    if (a == t || b == t) return true;
  }
  return false;
}

int oracle_scan(const PatternTable& table, std::span<const int> tokens) {
  std::vector<std::int64_t> first_hits, second_hits;
  for (const auto& [a, b] : table.pairs) {
    if (!find_occurrences(tokens, a, first_hits)) continue;
    if (!find_occurrences(tokens, b, second_hits)) continue;
    std::int64_t earliest_a = first_hits.front();
    for (auto pos : second_hits) {
      if (pos >= earliest_a + table.pattern_len) return 1;
    }
  }
  return 0;
}

std::vector<TrajectoryExample> generate_corpus(const GeneratorConfig& cfg, std::int64_t n) {
  cfg.validate();
  if (n < 2) throw UsageError("generate_corpus: n must be >= 2, got " + std::to_string(n));

  PatternTable table = PatternTable::for_config(cfg);
  std::vector<double> markov = cfg.noise_model == "markov" ? markov_table(cfg) : std::vector<double>{};
  std::int64_t plen = cfg.risk_pattern_len;
  std::int64_t n_pairs =
      std::max<std::int64_t>(1, std::llround(cfg.risk_density * static_cast<double>(cfg.seq_len) /
                                             static_cast<double>(2 * plen)));

  std::int64_t n_unsafe = std::llround(cfg.unsafe_ratio * static_cast<double>(n));
  std::vector<int> labels(static_cast<std::size_t>(n), 0);
  for (std::int64_t i = 0; i < n_unsafe; ++i) labels[static_cast<std::size_t>(i)] = 1;
  Rng label_rng(derive_seed(cfg.seed, "labels"));
  label_rng.shuffle(labels);

  std::string config_id = cfg.id();
  std::vector<TrajectoryExample> out;
  out.reserve(static_cast<std::size_t>(n));

  for (std::int64_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(cfg.seed, "ex:" + std::to_string(i)));
    TrajectoryExample ex;
    ex.id = config_id + "-" + std::to_string(i);
    ex.label = labels[static_cast<std::size_t>(i)];
    ex.meta = TrajectoryExampleMeta{{}, config_id};

    bool done = false;
    for (int attempt = 0; attempt < 200 && !done; ++attempt) {
      ex.tokens = sample_background(cfg, markov, rng);
      ex.meta->risk_positions.clear();
      std::size_t k = static_cast<std::size_t>(rng.randint(0, cfg.n_risk_patterns - 1));
      const auto& [pat_a, pat_b] = table.pairs[k];

      auto plant = [&](const std::vector<int>& pat, std::int64_t pos, bool record_positions) {
        for (std::int64_t j = 0; j < plen; ++j) {
          ex.tokens[static_cast<std::size_t>(pos + j)] = pat[static_cast<std::size_t>(j)];
          if (record_positions) ex.meta->risk_positions.push_back(pos + j);
        }
      };
      auto disjoint = [&](std::int64_t pos, const std::vector<std::int64_t>& used) {
        for (auto u : used) {
          if (pos < u + plen && u < pos + plen) return false;
        }
        return true;
      };

      if (ex.label == 1) {
        std::vector<std::int64_t> used;
        bool placed_all = true;
        for (std::int64_t pair_i = 0; pair_i < n_pairs && placed_all; ++pair_i) {
          placed_all = false;
          for (int t = 0; t < 50; ++t) {
            std::int64_t p1 = rng.randint(0, cfg.seq_len - 2 * plen);
            std::int64_t p2 = rng.randint(p1 + plen, cfg.seq_len - plen);
            if (disjoint(p1, used) && disjoint(p2, used)) {
              plant(pat_a, p1, true);
              plant(pat_b, p2, true);
              used.push_back(p1);
              used.push_back(p2);
              placed_all = true;
              break;
            }
          }
        }
        if (placed_all && oracle_scan(table, ex.tokens) == 1) done = true;
      } else {
        if (rng.uniform() < cfg.distractor_rate) {
          int kind = static_cast<int>(rng.randint(0, 3));
          std::int64_t p1 = rng.randint(0, cfg.seq_len - 2 * plen);
          std::int64_t p2 = rng.randint(p1 + plen, cfg.seq_len - plen);
          switch (kind) {
            case 0: {  // full pair in the wrong order
              plant(pat_b, p1, false);
              plant(pat_a, p2, false);
              break;
            }
            case 1: plant(pat_a, p2, false); break;  // first part only
            case 2: plant(pat_b, p1, false); break;  // second part only (too early)
            case 3: {                                // in-order pair with one corrupted token
              std::vector<int> broken = pat_a;
              std::size_t at = static_cast<std::size_t>(rng.randint(0, plen - 1));
              std::int64_t alphabet = background_vocab(cfg.vocab_size);
              int repl = static_cast<int>(rng.randint(0, alphabet - 1));
              while (repl == broken[at]) repl = static_cast<int>(rng.randint(0, alphabet - 1));
              broken[at] = repl;
              plant(broken, p1, false);
              plant(pat_b, p2, false);
              break;
            }
          }
        }
        if (oracle_scan(table, ex.tokens) == 0) done = true;
      }
    }
    if (!done) {
      throw ConfigError("generate_corpus: could not construct a valid example for config " + config_id +
                        " (example " + std::to_string(i) + ")");
    }
    std::sort(ex.meta->risk_positions.begin(), ex.meta->risk_positions.end());
    out.push_back(std::move(ex));
  }
  return out;
}

GeneratorConfig make_shifted_config(const GeneratorConfig& cfg) {
  cfg.validate();
  GeneratorConfig shifted = cfg;
  shifted.seed = derive_seed(cfg.seed, "shifted");
  shifted.exclude_pattern_seed = cfg.seed;
  return shifted;
}

// ---------------------------------------------------------------------------
// Transcript records
// ---------------------------------------------------------------------------

TrajectoryExample parse_transcript(const json& record, std::int64_t vocab_size) {
  if (!record.is_object()) throw ParseError("transcript: record is not an object");
  if (!record.contains("label")) throw ParseError("transcript: missing label field");
  TrajectoryExample ex;
  const auto& lab = record.at("label");
  if (lab.is_number_integer()) {
    int v = lab.get<int>();
    if (v != 0 && v != 1) throw ParseError("transcript: label must be 0 or 1, got " + std::to_string(v));
    ex.label = v;
  } else if (lab.is_string()) {
    std::string s = lab.get<std::string>();
    if (s == "safe") {
      ex.label = 0;
    } else if (s == "unsafe") {
      ex.label = 1;
    } else {
      throw ParseError("transcript: label string must be 'safe' or 'unsafe', got '" + s + "'");
    }
  } else {
    throw ParseError("transcript: label must be an integer or string");
  }
  if (record.contains("id")) ex.id = record.at("id").get<std::string>();
  if (!record.contains("turns") || !record.at("turns").is_array()) {
    throw ParseError("transcript: missing turns array");
  }
  for (const auto& turn : record.at("turns")) {
    if (!turn.contains("role")) throw ParseError("transcript: turn missing role");
    std::string role_s = turn.at("role").get<std::string>();
    auto role = role_from_name(role_s);
    if (!role) throw ParseError("transcript: unknown role '" + role_s + "'");
    ex.tokens.push_back(role_separator(*role, vocab_size));
    if (turn.contains("tokens")) {
      for (const auto& t : turn.at("tokens")) {
        int tok = t.get<int>();
        if (tok < 0 || tok >= static_cast<int>(vocab_size - kReservedTokens)) {
          throw ParseError("transcript: content token " + std::to_string(tok) +
                           " collides with the reserved range of vocab " + std::to_string(vocab_size));
        }
        ex.tokens.push_back(tok);
      }
    }
  }
  return ex;
}

json serialize_transcript(const TrajectoryExample& ex, std::int64_t vocab_size) {
  json turns = json::array();
  json current;
  for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
    int tok = ex.tokens[i];
    auto role = role_from_separator(tok, vocab_size);
    if (role) {
      if (!current.is_null()) turns.push_back(current);
      current = json{{"role", role_name(*role)}, {"tokens", json::array()}};
    } else {
      if (current.is_null()) {
        throw ParseError("transcript: token stream does not start with a role separator");
      }
      current["tokens"].push_back(tok);
    }
  }
  if (!current.is_null()) turns.push_back(current);
  return json{{"id", ex.id}, {"label", ex.label}, {"turns", turns}};
}

// ---------------------------------------------------------------------------
// JSONL I/O
// ---------------------------------------------------------------------------

json example_to_json(const TrajectoryExample& ex) {
  json j;
  if (!ex.extra_json.empty()) j = json::parse(ex.extra_json);
  j["id"] = ex.id;
  j["tokens"] = ex.tokens;
  j["label"] = ex.label;
  if (ex.meta) {
    j["meta"] = json{{"risk_positions", ex.meta->risk_positions},
                     {"generator_config_id", ex.meta->generator_config_id}};
  }
  return j;
}

TrajectoryExample example_from_json(const json& j) {
  TrajectoryExample ex;
  if (!j.contains("id") || !j.contains("tokens") || !j.contains("label")) {
    throw ParseError("example record missing one of id/tokens/label");
  }
  ex.id = j.at("id").get<std::string>();
  ex.tokens = j.at("tokens").get<std::vector<int>>();
  ex.label = j.at("label").get<int>();
  if (ex.label != 0 && ex.label != 1) {
    throw ParseError("example '" + ex.id + "': label must be 0 or 1");
  }
  if (j.contains("meta")) {
    TrajectoryExampleMeta meta;
    const auto& m = j.at("meta");
    if (m.contains("risk_positions")) meta.risk_positions = m.at("risk_positions").get<std::vector<std::int64_t>>();
    if (m.contains("generator_config_id")) meta.generator_config_id = m.at("generator_config_id").get<std::string>();
    ex.meta = std::move(meta);
    for (auto p : ex.meta->risk_positions) {
      if (p < 0 || p >= static_cast<std::int64_t>(ex.tokens.size())) {
        throw ParseError("example '" + ex.id + "': risk position " + std::to_string(p) + " out of range");
      }
    }
  }
  json extra;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "id" && it.key() != "tokens" && it.key() != "label" && it.key() != "meta") {
      extra[it.key()] = it.value();
    }
  }
  if (!extra.is_null()) ex.extra_json = extra.dump();
  return ex;
}

void save_jsonl(const std::vector<TrajectoryExample>& examples, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  for (const auto& ex : examples) f << example_to_json(ex).dump() << "\n";
  if (!f) throw IoError("write failed: " + path);
}

std::vector<TrajectoryExample> load_jsonl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  std::vector<TrajectoryExample> out;
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      throw ParseError(path + ": malformed JSON at line " + std::to_string(line_no));
    }
    try {
      out.push_back(example_from_json(j));
    } catch (const ParseError& e) {
      throw ParseError(path + ": line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

std::tuple<std::vector<TrajectoryExample>, std::vector<TrajectoryExample>, std::vector<TrajectoryExample>>
split(const std::vector<TrajectoryExample>& examples, double f_train, double f_val, double f_test,
      std::uint64_t seed) {
  double sum = f_train + f_val + f_test;
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("split: fractions sum to " + std::to_string(sum) + ", expected 1");
  }
  std::vector<std::size_t> safe_idx, unsafe_idx;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    (examples[i].label == 1 ? unsafe_idx : safe_idx).push_back(i);
  }
  std::vector<TrajectoryExample> train, val, test;
  auto take = [&](std::vector<std::size_t>& bucket, std::string_view tag) {
    Rng rng(derive_seed(seed, tag));
    rng.shuffle(bucket);
    auto nb = static_cast<std::int64_t>(bucket.size());
    double raw_t = f_train * static_cast<double>(nb);
    double raw_v = f_val * static_cast<double>(nb);
    double raw_s = f_test * static_cast<double>(nb);
    std::int64_t ct = static_cast<std::int64_t>(std::floor(raw_t));
    std::int64_t cv = static_cast<std::int64_t>(std::floor(raw_v));
    std::int64_t cs = static_cast<std::int64_t>(std::floor(raw_s));
    // hand leftover slots to the largest fractional remainders
    std::vector<std::pair<double, int>> rem{{raw_t - static_cast<double>(ct), 0},
                                            {raw_v - static_cast<double>(cv), 1},
                                            {raw_s - static_cast<double>(cs), 2}};
    std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
    std::int64_t leftover = nb - ct - cv - cs;
    for (std::int64_t i = 0; i < leftover; ++i) {
      switch (rem[static_cast<std::size_t>(i)].second) {
        case 0: ++ct; break;
        case 1: ++cv; break;
        case 2: ++cs; break;
      }
    }
    std::int64_t pos = 0;
    for (std::int64_t i = 0; i < ct; ++i) train.push_back(examples[bucket[static_cast<std::size_t>(pos++)]]);
    for (std::int64_t i = 0; i < cv; ++i) val.push_back(examples[bucket[static_cast<std::size_t>(pos++)]]);
    for (std::int64_t i = 0; i < cs; ++i) test.push_back(examples[bucket[static_cast<std::size_t>(pos++)]]);
  };
  take(safe_idx, "split:safe");
  take(unsafe_idx, "split:unsafe");
  // parts come out label-blocked; mix them so prefixes stay label-balanced
  Rng mix(derive_seed(seed, "split:mix"));
  mix.shuffle(train);
  mix.shuffle(val);
  mix.shuffle(test);
  return {std::move(train), std::move(val), std::move(test)};
}

// ---------------------------------------------------------------------------
// Flat generator-config files
// ---------------------------------------------------------------------------

void save_generator_config(const GeneratorConfig& cfg, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << "vocab_size = " << cfg.vocab_size << "\n";
  f << "seq_len = " << cfg.seq_len << "\n";
  f << "n_risk_patterns = " << cfg.n_risk_patterns << "\n";
  f << "risk_pattern_len = " << cfg.risk_pattern_len << "\n";
  f << "risk_density = " << cfg.risk_density << "\n";
  f << "noise_model = " << cfg.noise_model << "\n";
  f << "distractor_rate = " << cfg.distractor_rate << "\n";
  f << "unsafe_ratio = " << cfg.unsafe_ratio << "\n";
  f << "seed = " << cfg.seed << "\n";
  f << "exclude_pattern_seed = " << cfg.exclude_pattern_seed << "\n";
}

GeneratorConfig load_generator_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  GeneratorConfig cfg;
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      bool blank = line.find_first_not_of(" \t\r") == std::string::npos;
      if (blank) continue;
      throw ConfigError(path + ": line " + std::to_string(line_no) + ": expected key = value");
    }
    auto trim = [](std::string s) {
      auto b = s.find_first_not_of(" \t\r");
      auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "vocab_size") cfg.vocab_size = std::stoll(value);
      else if (key == "seq_len") cfg.seq_len = std::stoll(value);
      else if (key == "n_risk_patterns") cfg.n_risk_patterns = std::stoll(value);
      else if (key == "risk_pattern_len") cfg.risk_pattern_len = std::stoll(value);
      else if (key == "risk_density") cfg.risk_density = std::stod(value);
      else if (key == "noise_model") cfg.noise_model = value;
      else if (key == "distractor_rate") cfg.distractor_rate = std::stod(value);
      else if (key == "unsafe_ratio") cfg.unsafe_ratio = std::stod(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else if (key == "exclude_pattern_seed") cfg.exclude_pattern_seed = std::stoull(value);
      else throw ConfigError(path + ": unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw ConfigError(path + ": key '" + key + "': cannot parse '" + value + "' as a number");
    }
  }
  cfg.validate();
  return cfg;
}

}  // namespace lj
