#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "latentjudge/backbone.hpp"

using namespace lj;

namespace {
BackboneConfig tiny_config() {
  BackboneConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.max_seq_len = 32;
  return cfg;
}
}  // namespace

TEST_SUITE_BEGIN("backbone");

TEST_CASE("embed: direct lookup oracle, empty sequence, out-of-vocab") {
  Backbone model(tiny_config(), 7);
  std::vector<int> tokens{5, 7};
  Tensor rows = model.embed(tokens);
  REQUIRE(rows.rows() == 2);
  auto params = model.parameters();
  const Tensor& emb = params[0].t;   // embed.tokens
  const Tensor& pos = params[1].t;   // embed.pos
  for (std::int64_t j = 0; j < 16; ++j) {
    CHECK(rows.at(0, j) == emb.at(5, j) + pos.at(0, j));
    CHECK(rows.at(1, j) == emb.at(7, j) + pos.at(1, j));
  }

  CHECK(model.embed(std::vector<int>{}).rows() == 0);
  CHECK(model.embed(std::vector<int>{}).cols() == 16);
  CHECK_THROWS_AS(model.embed(std::vector<int>{99}), InputError);
}

TEST_CASE("attention sublayer: zero Q/K with identity V/O averages allowed positions") {
  std::int64_t n = 5, d = 4;
  Rng rng(3);
  Tensor x = Tensor::randn({n, d}, rng, 1.0);
  Tensor zero = Tensor::zeros({d, d});
  Tensor eye = Tensor::identity(d);
  Tensor out = multi_head_attention(x, zero, zero, eye, eye, 1, AttentionMask::causal(n));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < d; ++j) {
      double avg = 0.0;
      for (std::int64_t k = 0; k <= i; ++k) avg += x.at(k, j);
      avg /= static_cast<double>(i + 1);
      CHECK(out.at(i, j) == doctest::Approx(avg).epsilon(1e-12));
    }
  }
}

TEST_CASE("attention with a single row reduces to the V projection") {
  Rng rng(5);
  std::int64_t d = 6;
  Tensor x = Tensor::randn({1, d}, rng, 1.0);
  Tensor wq = Tensor::randn({d, d}, rng, 0.5);
  Tensor wk = Tensor::randn({d, d}, rng, 0.5);
  Tensor wv = Tensor::randn({d, d}, rng, 0.5);
  Tensor eye = Tensor::identity(d);
  Tensor out = multi_head_attention(x, wq, wk, wv, eye, 1, AttentionMask::causal(1));
  Tensor direct = matmul(x, wv);
  for (std::int64_t j = 0; j < d; ++j) {
    CHECK(out.at(0, j) == doctest::Approx(direct.at(0, j)).epsilon(1e-12));
  }
}

TEST_CASE("zero-delta identity: adapters with up=0 leave the forward bitwise unchanged") {
  auto cfg = tiny_config();
  Backbone model(cfg, 11);
  AdapterSet adapters = AdapterSet::create(AdapterRole::reasoner, cfg, 4, 8.0, 21);
  Rng rng(13);
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<int> tokens;
    for (int i = 0; i < 9; ++i) tokens.push_back(static_cast<int>(rng.randint(0, 15)));
    Tensor rows = model.embed(tokens);
    auto mask = AttentionMask::causal(9);
    Tensor plain = model.forward(rows, nullptr, mask);
    Tensor adapted = model.forward(rows, &adapters, mask);
    CHECK(plain.values() == adapted.values());
  }
}

TEST_CASE("nonzero adapters change the output and unknown targets are rejected") {
  auto cfg = tiny_config();
  Backbone model(cfg, 11);
  AdapterSet adapters = AdapterSet::create(AdapterRole::reasoner, cfg, 4, 8.0, 21);
  Rng rng(17);
  for (auto& [name, pair] : adapters.targets) {
    for (auto& v : pair.up.values()) v = 0.05 * rng.normal();
  }
  std::vector<int> tokens{1, 2, 3, 4};
  Tensor rows = model.embed(tokens);
  auto mask = AttentionMask::causal(4);
  CHECK(model.forward(rows, nullptr, mask).values() != model.forward(rows, &adapters, mask).values());

  AdapterSet bogus = adapters;
  AdapterPair stray;
  stray.down = Tensor::zeros({16, 4});
  stray.up = Tensor::zeros({4, 16});
  bogus.targets.emplace("layer9.wq", std::move(stray));
  CHECK_THROWS_AS(model.forward(rows, &bogus, mask), UsageError);
}

TEST_CASE("causal invariance: perturbing a later row never changes earlier outputs") {
  auto cfg = tiny_config();
  Backbone model(cfg, 19);
  Rng rng(23);
  std::vector<int> tokens;
  for (int i = 0; i < 8; ++i) tokens.push_back(static_cast<int>(rng.randint(0, 15)));
  Tensor rows = model.embed(tokens).clone();
  auto mask = AttentionMask::causal(8);
  Tensor base = model.forward(rows, nullptr, mask);
  Tensor perturbed_rows = rows.clone();
  for (std::int64_t j = 0; j < 16; ++j) perturbed_rows.at(6, j) += 0.5;
  Tensor perturbed = model.forward(perturbed_rows, nullptr, mask);
  for (std::int64_t i = 0; i < 6; ++i) {
    for (std::int64_t j = 0; j < 16; ++j) {
      CHECK(base.at(i, j) == perturbed.at(i, j));
    }
  }
  // and the perturbed row itself does change
  bool changed = false;
  for (std::int64_t j = 0; j < 16; ++j) changed = changed || base.at(6, j) != perturbed.at(6, j);
  CHECK(changed);
}

TEST_CASE("mask shape mismatch raises a dimension error") {
  Backbone model(tiny_config(), 3);
  Tensor rows = model.embed(std::vector<int>{1, 2, 3});
  CHECK_THROWS_AS(model.forward(rows, nullptr, AttentionMask::causal(5)), ShapeError);
}

TEST_CASE("terminal_hidden: single row, row 143 of 144, appending changes the result") {
  Tensor one = Tensor::matrix(1, 3, {1, 2, 3});
  CHECK(terminal_hidden(one).values() == std::vector<double>{1, 2, 3});

  Rng rng(29);
  Tensor big = Tensor::randn({144, 4}, rng, 1.0);
  Tensor last = terminal_hidden(big);
  for (std::int64_t j = 0; j < 4; ++j) CHECK(last.at(0, j) == big.at(143, j));

  Tensor extra = Tensor::randn({1, 4}, rng, 1.0);
  Tensor appended = terminal_hidden(concat_rows({big, extra}));
  CHECK(appended.values() == extra.values());

  CHECK_THROWS_AS(terminal_hidden(Tensor::zeros({0, 4})), InputError);
}

TEST_CASE("lm pretraining: initial loss near ln(V), memorizes a repeating corpus") {
  BackboneConfig cfg;
  cfg.vocab_size = 8;
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.max_seq_len = 16;
  Backbone model(cfg, 31);
  Adam opt(model.parameter_tensors(), 0.01);

  std::vector<std::vector<int>> corpus;
  for (int i = 0; i < 8; ++i) corpus.push_back({3, 5, 3, 5, 3, 5, 3, 5});

  double first = model.lm_pretrain_step({corpus[0]}, opt);
  CHECK(std::abs(first - std::log(8.0)) < 0.1 * std::log(8.0));

  // batch of identical sequences scores the same loss as a single one
  Backbone model2(cfg, 31);
  Adam opt2(model2.parameter_tensors(), 0.0);
  double single = model2.lm_pretrain_step({corpus[0]}, opt2);
  double batch = model2.lm_pretrain_step({corpus[0], corpus[0], corpus[0]}, opt2);
  CHECK(batch == doctest::Approx(single).epsilon(1e-12));

  double last = first;
  for (int step = 0; step < 200; ++step) {
    last = model.lm_pretrain_step(corpus, opt);
  }
  CHECK(last < 0.1);

  model.freeze();
  CHECK_THROWS_AS(model.lm_pretrain_step(corpus, opt), UsageError);
}

TEST_CASE("zero learning rate leaves parameters bitwise unchanged") {
  auto cfg = tiny_config();
  Backbone model(cfg, 37);
  std::vector<Buffer> before;
  for (const auto& nt : model.parameters()) before.push_back(nt.t.values());
  Adam opt(model.parameter_tensors(), 0.0);
  model.lm_pretrain_step({{1, 2, 3, 4, 5}}, opt);
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(params[i].t.values() == before[i]);
  }
}

TEST_CASE("causal accessibility: tail passes, constructed violation fails, prefix-dec passes") {
  auto tail = AttentionMask::causal(12 + 4);
  auto rep = causal_accessibility_check(tail, 12, 4, false);
  CHECK(rep.pass);
  CHECK(rep.readout_position == 15);

  auto broken = AttentionMask::causal(16);
  broken.set(15, 0, false);
  auto rep2 = causal_accessibility_check(broken, 12, 4, false);
  CHECK(!rep2.pass);
  CHECK(rep2.violating_query == 15);
  CHECK(rep2.violating_key == 0);

  auto prefix = AttentionMask::causal(12 + 4 + 1);
  auto rep3 = causal_accessibility_check(prefix, 12, 4, true);
  CHECK(rep3.pass);
  CHECK(rep3.readout_position == 16);
}

TEST_CASE("masks validate causal direction and self-attention") {
  auto ok = AttentionMask::causal(4);
  ok.validate();
  auto bad = AttentionMask::causal(4);
  bad.set(1, 3, true);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  auto no_self = AttentionMask::causal(4);
  no_self.set(2, 2, false);
  CHECK_THROWS_AS(no_self.validate(), ConfigError);
}

TEST_CASE("checkpoint round trip is value-exact") {
  auto cfg = tiny_config();
  Backbone model(cfg, 41);
  Checkpoint ck;
  ck.meta_json = cfg.to_json_string();
  for (const auto& nt : model.parameters()) ck.tensors.push_back({"backbone." + nt.name, nt.t});
  auto path = std::filesystem::temp_directory_path() / "lj_backbone.ckpt";
  ck.save(path.string());
  auto loaded = Checkpoint::load(path.string());
  CHECK(loaded.meta_json == ck.meta_json);
  REQUIRE(loaded.tensors.size() == ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    CHECK(loaded.tensors[i].name == ck.tensors[i].name);
    CHECK(loaded.tensors[i].t.values() == ck.tensors[i].t.values());
    CHECK(loaded.tensors[i].t.shape() == ck.tensors[i].t.shape());
  }

  Backbone other(cfg, 99);
  std::vector<NamedTensor> renamed;
  for (auto& nt : loaded.tensors) renamed.push_back({nt.name.substr(9), nt.t});
  other.load_parameters(renamed);
  CHECK(other.parameters()[0].t.values() == model.parameters()[0].t.values());
  std::filesystem::remove(path);
}

TEST_CASE("backbone forward gradients pass finite differences through adapters") {
  BackboneConfig cfg;
  cfg.vocab_size = 12;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.max_seq_len = 16;
  Backbone model(cfg, 43);
  model.freeze();
  AdapterSet adapters = AdapterSet::create(AdapterRole::reasoner, cfg, 2, 4.0, 47);
  Rng rng(53);
  for (auto& [name, pair] : adapters.targets) {
    for (auto& v : pair.up.values()) v = 0.05 * rng.normal();
  }
  std::vector<int> tokens{1, 4, 2, 9, 3};
  Tape tape;
  TapeScope scope(tape);
  Tensor rows = model.embed(tokens);
  Tensor hidden = model.forward(rows, &adapters, AttentionMask::causal(5));
  Tensor p = sigmoid(sum_all(terminal_hidden(hidden)));
  Tensor loss = bce_loss(p, 1);
  tape.backward(loss);
  for (auto& [name, pair] : adapters.targets) {
    CHECK(gradcheck_max_rel_err(pair.down, tape, loss, 1e-5, rng, 4) < 1e-4);
    CHECK(gradcheck_max_rel_err(pair.up, tape, loss, 1e-5, rng, 4) < 1e-4);
  }
}

TEST_SUITE_END();
