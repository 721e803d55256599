#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "latentjudge/trajgen.hpp"

using namespace lj;
using nlohmann::json;

namespace {
GeneratorConfig small_config() {
  GeneratorConfig cfg;
  cfg.vocab_size = 32;
  cfg.seq_len = 64;
  cfg.n_risk_patterns = 3;
  cfg.risk_pattern_len = 3;
  cfg.risk_density = 0.1;
  cfg.noise_model = "markov";
  cfg.distractor_rate = 0.3;
  cfg.unsafe_ratio = 0.5;
  cfg.seed = 42;
  return cfg;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("lj_test_" + name);
}
}  // namespace

TEST_SUITE_BEGIN("trajgen");

TEST_CASE("generate_corpus: exact unsafe count and generator contract") {
  auto cfg = small_config();
  auto corpus = generate_corpus(cfg, 100);
  REQUIRE(corpus.size() == 100);
  int unsafe = 0;
  for (const auto& ex : corpus) unsafe += ex.label;
  CHECK(unsafe == 50);

  for (const auto& ex : corpus) {
    REQUIRE(ex.meta.has_value());
    if (ex.label == 1) {
      CHECK(!ex.meta->risk_positions.empty());
      for (auto p : ex.meta->risk_positions) {
        CHECK(p >= 0);
        CHECK(p < static_cast<std::int64_t>(ex.tokens.size()));
      }
    } else {
      CHECK(ex.meta->risk_positions.empty());
    }
  }
}

TEST_CASE("generate_corpus: hidden-pattern oracle achieves 100% accuracy") {
  auto cfg = small_config();
  auto corpus = generate_corpus(cfg, 200);
  PatternTable table = PatternTable::for_config(cfg);
  for (const auto& ex : corpus) {
    CHECK(oracle_scan(table, ex.tokens) == ex.label);
  }
}

TEST_CASE("generate_corpus: sparsity of planted evidence") {
  auto cfg = small_config();
  auto corpus = generate_corpus(cfg, 60);
  double L = static_cast<double>(cfg.seq_len);
  for (const auto& ex : corpus) {
    if (ex.label != 1) continue;
    double fraction = static_cast<double>(ex.meta->risk_positions.size()) / L;
    CHECK(std::abs(fraction - cfg.risk_density) <= static_cast<double>(cfg.risk_pattern_len) / L);
  }
}

TEST_CASE("generate_corpus: deterministic in (cfg, n)") {
  auto cfg = small_config();
  auto a = generate_corpus(cfg, 30);
  auto b = generate_corpus(cfg, 30);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].tokens == b[i].tokens);
    CHECK(a[i].label == b[i].label);
    CHECK(a[i].id == b[i].id);
  }
}

TEST_CASE("generate_corpus rejects unconstructible config and tiny n") {
  auto cfg = small_config();
  cfg.risk_density = 0.001;  // density * L < pattern_len
  CHECK_THROWS_AS(generate_corpus(cfg, 10), ConfigError);
  CHECK_THROWS_AS(generate_corpus(small_config(), 1), UsageError);
}

TEST_CASE("make_shifted_config: disjoint patterns, deterministic, oracle at chance") {
  auto cfg = small_config();
  auto shifted = make_shifted_config(cfg);
  auto orig_table = PatternTable::for_config(cfg);
  auto shift_table = PatternTable::for_config(shifted);
  for (const auto& [a, b] : shift_table.pairs) {
    CHECK(!orig_table.contains_tuple(a));
    CHECK(!orig_table.contains_tuple(b));
  }
  auto shifted2 = make_shifted_config(cfg);
  CHECK(shifted.seed == shifted2.seed);
  CHECK(shifted.exclude_pattern_seed == shifted2.exclude_pattern_seed);

  // the original detector sees no planted evidence on the shifted corpus
  auto corpus = generate_corpus(shifted, 200);
  int correct = 0;
  for (const auto& ex : corpus) {
    if (oracle_scan(orig_table, ex.tokens) == ex.label) ++correct;
  }
  double acc = static_cast<double>(correct) / 200.0;
  CHECK(acc > 0.35);
  CHECK(acc < 0.65);
}

TEST_CASE("parse_transcript: serialization rule, round trip, separator count") {
  json rec = {
      {"id", "t1"},
      {"label", 0},
      {"turns", json::array({json{{"role", "user"}, {"tokens", {1, 2, 3}}}})},
  };
  auto ex = parse_transcript(rec, 64);
  CHECK(ex.tokens.front() == role_separator(Role::user, 64));
  CHECK(ex.label == 0);

  json rec3 = {
      {"id", "t3"},
      {"label", 1},
      {"turns", json::array({
                    json{{"role", "user"}, {"tokens", {1, 2}}},
                    json{{"role", "action"}, {"tokens", {5}}},
                    json{{"role", "feedback"}, {"tokens", {7, 8}}},
                })},
  };
  auto ex3 = parse_transcript(rec3, 64);
  // independent role-separator count: one per turn
  int seps = 0;
  for (int t : ex3.tokens) {
    if (t >= 64 - kReservedTokens && t < 64 - kReservedTokens + 4) ++seps;
  }
  CHECK(seps == 3);

  json round = serialize_transcript(ex3, 64);
  CHECK(round == rec3);
}

TEST_CASE("parse_transcript errors: missing label, unknown role") {
  json no_label = {{"id", "x"}, {"turns", json::array()}};
  CHECK_THROWS_WITH_AS(parse_transcript(no_label, 64), doctest::Contains("label"), ParseError);

  json bad_role = {
      {"id", "x"}, {"label", 0},
      {"turns", json::array({json{{"role", "overseer"}, {"tokens", {1}}}})},
  };
  CHECK_THROWS_WITH_AS(parse_transcript(bad_role, 64), doctest::Contains("overseer"), ParseError);
}

TEST_CASE("jsonl: empty round trip, field-exact round trip, unknown keys preserved") {
  auto path = temp_file("empty.jsonl");
  save_jsonl({}, path.string());
  CHECK(load_jsonl(path.string()).empty());

  auto cfg = small_config();
  auto corpus = generate_corpus(cfg, 1000);
  corpus[7].extra_json = json{{"note", "kept"}, {"score", 3}}.dump();
  auto path2 = temp_file("corpus.jsonl");
  save_jsonl(corpus, path2.string());
  auto loaded = load_jsonl(path2.string());
  REQUIRE(loaded.size() == corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    CHECK(loaded[i].id == corpus[i].id);
    CHECK(loaded[i].tokens == corpus[i].tokens);
    CHECK(loaded[i].label == corpus[i].label);
    CHECK(loaded[i].meta->risk_positions == corpus[i].meta->risk_positions);
    CHECK(loaded[i].meta->generator_config_id == corpus[i].meta->generator_config_id);
  }
  CHECK(json::parse(loaded[7].extra_json) == json::parse(corpus[7].extra_json));
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("jsonl: truncated final line reports the line number") {
  auto path = temp_file("broken.jsonl");
  {
    std::ofstream f(path);
    f << R"({"id":"a","tokens":[1],"label":0})" << "\n";
    f << R"({"id":"b","tokens":[1,2)";  // truncated
  }
  CHECK_THROWS_WITH_AS(load_jsonl(path.string()), doctest::Contains("line 2"), ParseError);
  std::filesystem::remove(path);
}

TEST_CASE("split: exact sizes, partition law, stratification") {
  auto cfg = small_config();
  auto corpus = generate_corpus(cfg, 100);
  auto [train, val, test] = split(corpus, 0.8, 0.1, 0.1, 5);
  CHECK(train.size() == 80);
  CHECK(val.size() == 10);
  CHECK(test.size() == 10);

  std::multiset<std::string> in_ids, out_ids;
  for (const auto& e : corpus) in_ids.insert(e.id);
  for (const auto* part : {&train, &val, &test}) {
    for (const auto& e : *part) out_ids.insert(e.id);
  }
  CHECK(in_ids == out_ids);

  auto big = generate_corpus(cfg, 1000);
  auto [tr2, va2, te2] = split(big, 0.8, 0.1, 0.1, 5);
  auto ratio = [](const std::vector<TrajectoryExample>& v) {
    int u = 0;
    for (const auto& e : v) u += e.label;
    return static_cast<double>(u) / static_cast<double>(v.size());
  };
  for (const auto* part : {&tr2, &va2, &te2}) {
    CHECK(std::abs(ratio(*part) - ratio(big)) <= 0.02001);
  }

  CHECK_THROWS_AS(split(corpus, 0.5, 0.2, 0.2, 1), ConfigError);
}

TEST_CASE("generator config file round trip") {
  auto cfg = small_config();
  auto path = temp_file("gen.cfg");
  save_generator_config(cfg, path.string());
  auto loaded = load_generator_config(path.string());
  CHECK(loaded.id() == cfg.id());
  std::filesystem::remove(path);

  auto bad = temp_file("gen_bad.cfg");
  {
    std::ofstream f(bad);
    f << "vocab_size = 32\nnose_model = markov\n";
  }
  CHECK_THROWS_WITH_AS(load_generator_config(bad.string()), doctest::Contains("nose_model"), ConfigError);
  std::filesystem::remove(bad);
}

TEST_SUITE_END();
