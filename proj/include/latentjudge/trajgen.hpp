#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "latentjudge/common.hpp"

namespace lj {

// The top 8 vocabulary ids are reserved: four role separators for transcript
// serialization, plus the decision token used by prefix_dec insertion.
constexpr std::int64_t kReservedTokens = 8;

enum class Role { user, thought, action, feedback };

int role_separator(Role role, std::int64_t vocab_size);
int dec_token(std::int64_t vocab_size);
std::int64_t background_vocab(std::int64_t vocab_size);  // ids [0, V - 8)

struct TrajectoryExampleMeta {
  std::vector<std::int64_t> risk_positions;
  std::string generator_config_id;
};

struct TrajectoryExample {
  std::string id;
  std::vector<int> tokens;
  int label = 0;  // 0 safe, 1 unsafe
  std::optional<TrajectoryExampleMeta> meta;
  std::string extra_json;  // unknown top-level keys, preserved for round trips
};

struct GeneratorConfig {
  std::int64_t vocab_size = 64;
  std::int64_t seq_len = 256;
  std::int64_t n_risk_patterns = 4;
  std::int64_t risk_pattern_len = 4;
  double risk_density = 0.03;
  std::string noise_model = "markov";  // or "uniform"
  double distractor_rate = 0.3;
  double unsafe_ratio = 0.5;
  std::uint64_t seed = 1;
  std::uint64_t exclude_pattern_seed = 0;  // nonzero: resample patterns colliding
                                           // with the table of that seed

  void validate() const;
  std::string id() const;  // stable hash of all fields
};

// The hidden evidence table: per pattern an ordered (first, second) tuple
// pair. An example is unsafe iff some pattern's first part occurs and its
// second part occurs later (non-overlapping, in order).
struct PatternTable {
  std::int64_t pattern_len = 0;
  std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;

  static PatternTable for_config(const GeneratorConfig& cfg);
  bool contains_tuple(const std::vector<int>& t) const;
};

// Brute-force label oracle: scans for any in-order pattern pair.
int oracle_scan(const PatternTable& table, std::span<const int> tokens);

std::vector<TrajectoryExample> generate_corpus(const GeneratorConfig& cfg, std::int64_t n);

GeneratorConfig make_shifted_config(const GeneratorConfig& cfg);

// Transcript records (R-Judge-shaped): {"id", "label", "turns": [{"role",
// "tokens"}...]}. Serialization emits one role-separator token before each
// turn's content.
TrajectoryExample parse_transcript(const nlohmann::json& record, std::int64_t vocab_size);
nlohmann::json serialize_transcript(const TrajectoryExample& ex, std::int64_t vocab_size);

void save_jsonl(const std::vector<TrajectoryExample>& examples, const std::string& path);
std::vector<TrajectoryExample> load_jsonl(const std::string& path);

nlohmann::json example_to_json(const TrajectoryExample& ex);
TrajectoryExample example_from_json(const nlohmann::json& j);

// Deterministic, label-stratified partition. Fractions must sum to 1 (1e-9).
std::tuple<std::vector<TrajectoryExample>, std::vector<TrajectoryExample>, std::vector<TrajectoryExample>>
split(const std::vector<TrajectoryExample>& examples, double f_train, double f_val, double f_test,
      std::uint64_t seed);

// Flat key-value serialization of a GeneratorConfig.
void save_generator_config(const GeneratorConfig& cfg, const std::string& path);
GeneratorConfig load_generator_config(const std::string& path);

}  // namespace lj
