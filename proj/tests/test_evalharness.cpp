#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>

#include "latentjudge/evalharness.hpp"

using namespace lj;

namespace {
std::shared_ptr<Backbone> small_backbone(std::uint64_t seed) {
  BackboneConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.max_seq_len = 96;
  auto b = std::make_shared<Backbone>(cfg, seed);
  b->freeze();
  return b;
}

JudgeModel small_model(TrainMode mode, std::int64_t latent_len = 4) {
  JudgeModelConfig mc;
  mc.adapter_rank = 2;
  mc.adapter_alpha = 4.0;
  mc.latent_len = latent_len;
  mc.insertion = Insertion::tail;
  mc.mode = mode;
  return JudgeModel(small_backbone(11), small_backbone(13), mc, 17);
}

std::vector<TrajectoryExample> token_examples(int n, std::int64_t len = 48) {
  std::vector<TrajectoryExample> out;
  Rng rng(3);
  for (int i = 0; i < n; ++i) {
    TrajectoryExample ex;
    ex.id = "e" + std::to_string(i);
    ex.label = i % 2;
    for (std::int64_t t = 0; t < len; ++t) ex.tokens.push_back(static_cast<int>(rng.randint(0, 7)));
    out.push_back(ex);
  }
  return out;
}
}  // namespace

TEST_SUITE_BEGIN("evalharness");

TEST_CASE("metrics: perfect, all-safe-on-balanced, and the frozen confusion example") {
  auto perfect = metrics_from_confusion(50, 0, 50, 0);
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.f1 == 1.0);
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);

  auto all_safe = metrics_from_confusion(0, 0, 50, 50);
  CHECK(all_safe.accuracy == 0.5);
  CHECK(all_safe.recall == 0.0);
  CHECK(all_safe.f1 == 0.0);
  CHECK(all_safe.degenerate_precision);
  CHECK(all_safe.degenerate_f1);

  auto frozen = metrics_from_confusion(88, 10, 90, 12);
  CHECK(std::abs(frozen.precision - 0.8980) < 1e-4);
  CHECK(std::abs(frozen.recall - 0.8800) < 1e-4);
  CHECK(std::abs(frozen.f1 - 0.8889) < 1e-4);
  CHECK(std::abs(frozen.accuracy - 0.8900) < 1e-4);
  CHECK(frozen.n == 200);
}

TEST_CASE("metric identities hold exactly on random confusion tables") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::int64_t tp = rng.randint(0, 40), fp = rng.randint(0, 40);
    std::int64_t tn = rng.randint(0, 40), fn = rng.randint(0, 40);
    if (tp + fp + tn + fn == 0) continue;
    auto m = metrics_from_confusion(tp, fp, tn, fn);
    CHECK(m.tp + m.fp + m.tn + m.fn == m.n);
    CHECK(m.accuracy == doctest::Approx(static_cast<double>(tp + tn) / static_cast<double>(m.n)).epsilon(1e-15));
    if (tp + fp > 0) {
      CHECK(m.precision == doctest::Approx(static_cast<double>(tp) / static_cast<double>(tp + fp)).epsilon(1e-15));
    } else {
      CHECK(m.degenerate_precision);
    }
    if (m.precision + m.recall > 0) {
      CHECK(m.f1 ==
            doctest::Approx(2 * m.precision * m.recall / (m.precision + m.recall)).epsilon(1e-12));
    } else {
      CHECK(m.f1 == 0.0);
    }
  }
}

TEST_CASE("evaluate rejects an empty example set") {
  auto model = small_model(TrainMode::one_stage);
  CHECK_THROWS_AS(evaluate(model, {}, 0.5), UsageError);
}

TEST_CASE("export_features: header + n rows of dimension d_r, loadable") {
  auto model = small_model(TrainMode::decoupled);
  auto examples = token_examples(9, 20);
  auto path = std::filesystem::temp_directory_path() / "lj_features.csv";
  export_features(model, examples, path.string());

  std::ifstream f(path);
  std::string line;
  std::int64_t lines = 0;
  while (std::getline(f, line)) ++lines;
  CHECK(lines == 10);  // header + 9

  auto [features, labels] = load_feature_csv(path.string());
  REQUIRE(features.size() == 9);
  CHECK(features[0].size() == 16);
  CHECK(labels.size() == 9);
  std::filesystem::remove(path);
}

TEST_CASE("linear probe separates linearly separable features") {
  Rng rng(7);
  std::vector<std::vector<double>> feats;
  std::vector<int> labels;
  for (int i = 0; i < 80; ++i) {
    int label = i % 2;
    std::vector<double> row;
    for (int j = 0; j < 6; ++j) row.push_back(rng.normal() + (label == 1 ? 2.5 : -2.5) * (j == 2 ? 1.0 : 0.1));
    feats.push_back(std::move(row));
    labels.push_back(label);
  }
  CHECK(linear_probe_accuracy(feats, labels, 1) > 0.9);

  // and chance-level features stay near chance
  std::vector<std::vector<double>> noise;
  for (int i = 0; i < 80; ++i) {
    std::vector<double> row;
    for (int j = 0; j < 6; ++j) row.push_back(rng.normal());
    noise.push_back(std::move(row));
  }
  double acc = linear_probe_accuracy(noise, labels, 1);
  CHECK(acc < 0.85);
}

TEST_CASE("efficiency: single-stream identity and the extra-extractor-pass ratio") {
  auto examples = token_examples(30, 48);
  auto one = small_model(TrainMode::one_stage);
  auto dec = small_model(TrainMode::decoupled);
  auto rep_one = measure_efficiency(one, examples, 30, 3);
  auto rep_dec = measure_efficiency(dec, examples, 30, 3);

  CHECK(rep_one.n_examples == 30);
  CHECK(rep_one.latency_ms_median > 0.0);
  // throughput ~ 1000 / median latency for a single stream
  CHECK(rep_one.throughput_per_s * rep_one.latency_ms_median / 1000.0 == doctest::Approx(1.0).epsilon(0.2));

  // the latent path costs one extra extractor pass
  CHECK(rep_one.extractor_forwards == 0);
  CHECK(rep_dec.extractor_forwards == 30);
  CHECK(rep_dec.reasoner_forwards == 30);
  // the < 2.5x bound is asserted at the full experiment scale, where the
  // quadratic attention cost dominates per-call overhead
  CHECK(rep_dec.latency_ms_median > rep_one.latency_ms_median);
  CHECK(rep_dec.latency_ms_median / rep_one.latency_ms_median < 6.0);

  // explicit decoding costs latent_len extractor passes per example
  auto exp4 = small_model(TrainMode::explicit_baseline, 4);
  auto rep4 = measure_efficiency(exp4, examples, 10, 1);
  CHECK(rep4.extractor_forwards == 40);
}

TEST_CASE("sweep aggregation: degenerate single seed, mean/std math") {
  auto one = make_sweep_result("latent_len", {"4"}, {{0.75}}, {1});
  CHECK(one.mean[0] == 0.75);
  CHECK(!one.has_std[0]);

  auto s = make_sweep_result("latent_len", {"4", "16"}, {{0.5, 0.7}, {0.9, 0.8}}, {1, 2});
  CHECK(s.mean[0] == doctest::Approx(0.6));
  CHECK(s.mean[1] == doctest::Approx(0.85));
  CHECK(s.has_std[0]);
  CHECK(s.stddev[0] == doctest::Approx(std::sqrt(0.02)).epsilon(1e-9));
}

TEST_SUITE_END();
