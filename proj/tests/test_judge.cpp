#include <doctest.h>

#include <cmath>
#include <memory>

#include "latentjudge/judge.hpp"

using namespace lj;

namespace {

std::shared_ptr<Backbone> tiny_backbone(std::uint64_t seed, std::int64_t d = 16) {
  BackboneConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = d;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.max_seq_len = 64;
  auto b = std::make_shared<Backbone>(cfg, seed);
  b->freeze();
  return b;
}

JudgeModel tiny_model(TrainMode mode, std::uint64_t seed, Insertion ins = Insertion::tail,
                      std::int64_t latent_len = 3) {
  JudgeModelConfig mc;
  mc.adapter_rank = 2;
  mc.adapter_alpha = 4.0;
  mc.latent_len = latent_len;
  mc.insertion = ins;
  mc.mode = mode;
  return JudgeModel(tiny_backbone(derive_seed(seed, "r")), tiny_backbone(derive_seed(seed, "w")), mc, seed);
}

// safe examples repeat token 1, unsafe repeat token 2: trivially separable
std::vector<TrajectoryExample> separable_toy(int n) {
  std::vector<TrajectoryExample> out;
  for (int i = 0; i < n; ++i) {
    TrajectoryExample ex;
    ex.id = "toy-" + std::to_string(i);
    ex.label = i % 2;
    ex.tokens.assign(10, ex.label == 0 ? 1 : 2);
    ex.tokens[0] = i % 5;  // small variation
    out.push_back(ex);
  }
  return out;
}

std::vector<const TrajectoryExample*> as_batch(const std::vector<TrajectoryExample>& v) {
  std::vector<const TrajectoryExample*> out;
  for (const auto& e : v) out.push_back(&e);
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("judge");

TEST_CASE("readout: zero head gives 0.5, bias drives the exact sigmoid value, symmetry") {
  auto model = tiny_model(TrainMode::one_stage, 3);
  std::vector<int> tokens{1, 2, 3, 4, 5};
  CHECK(model.prob(tokens) == doctest::Approx(0.5).epsilon(1e-15));

  model.head().b.values()[0] = 1.0;  // logit is exactly w.h + b = 1
  CHECK(model.prob(tokens) == doctest::Approx(0.73105857863000487925).epsilon(1e-9));
  model.head().b.values()[0] = 0.0;

  Rng rng(5);
  for (auto& v : model.head().w.values()) v = rng.normal();
  double p_pos = model.prob(tokens);
  for (auto& v : model.head().w.values()) v = -v;
  double p_neg = model.prob(tokens);
  CHECK(p_pos + p_neg == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("readout rejects adapter sets with the wrong role") {
  auto model = tiny_model(TrainMode::one_stage, 7);
  auto wrong = AdapterSet::create(AdapterRole::extractor, model.reasoner().config(), 2, 4.0, 9);
  Rng rng(11);
  Tensor y = Tensor::randn({4, 16}, rng, 0.5);
  CHECK_THROWS_AS(readout_prob(y, model.reasoner(), wrong, model.head()), UsageError);
}

TEST_CASE("classify: tie goes unsafe, below stays safe, threshold validated") {
  CHECK(classify(0.5, 0.5) == 1);
  CHECK(classify(0.49, 0.5) == 0);
  CHECK(classify(0.91, 0.5) == 1);
  CHECK_THROWS_AS(classify(0.5, 0.0), UsageError);
  CHECK_THROWS_AS(classify(0.5, 1.0), UsageError);
}

TEST_CASE("threshold monotonicity: raising tau never increases unsafe count") {
  auto model = tiny_model(TrainMode::one_stage, 13);
  Rng rng(17);
  for (auto& v : model.head().w.values()) v = rng.normal();
  auto data = separable_toy(20);
  std::vector<double> taus{0.1, 0.3, 0.5, 0.7, 0.9};
  std::vector<int> counts;
  for (double tau : taus) {
    int unsafe = 0;
    for (const auto& ex : data) unsafe += classify(model.prob(ex.tokens), tau);
    counts.push_back(unsafe);
  }
  for (std::size_t i = 1; i < counts.size(); ++i) CHECK(counts[i] <= counts[i - 1]);
}

TEST_CASE("one_stage step: gamma group bitwise untouched, zero lr freezes everything") {
  auto model = tiny_model(TrainMode::one_stage, 19);
  auto data = separable_toy(8);
  auto before_b = model.group_checksum("delta_b");
  auto before_q = model.group_checksum("queries");
  auto before_p = model.group_checksum("projectors");

  Adam opt(model.trainable_tensors(), 1e-2);
  train_step(model, opt, as_batch(data), 0);
  CHECK(model.group_checksum("delta_b") == before_b);
  CHECK(model.group_checksum("queries") == before_q);
  CHECK(model.group_checksum("projectors") == before_p);

  auto model2 = tiny_model(TrainMode::one_stage, 19);
  std::vector<Buffer> snap;
  for (auto& nt : model2.all_parameters()) snap.push_back(nt.t.values());
  Adam opt0(model2.trainable_tensors(), 0.0);
  train_step(model2, opt0, as_batch(data), 0);
  std::size_t i = 0;
  for (auto& nt : model2.all_parameters()) {
    CHECK(nt.t.values() == snap[i]);
    ++i;
  }
}

TEST_CASE("one_stage: loss decreases on a separable toy set (smoothed)") {
  auto model = tiny_model(TrainMode::one_stage, 23);
  auto data = separable_toy(16);
  TrainConfig cfg;
  cfg.mode = TrainMode::one_stage;
  cfg.learning_rate = 5e-3;
  cfg.steps = 50;
  cfg.batch_size = 8;
  cfg.seed = 1;
  cfg.latent_len = 3;
  cfg.eval_every = 0;
  auto result = train_judge(model, cfg, data, {});
  REQUIRE(result.history.size() == 50);
  auto window = [&](std::size_t from, std::size_t to) {
    double s = 0.0;
    for (std::size_t i = from; i < to; ++i) s += result.history[i].loss;
    return s / static_cast<double>(to - from);
  };
  double prev = window(0, 10);
  for (std::size_t w = 1; w < 5; ++w) {
    double cur = window(w * 10, (w + 1) * 10);
    CHECK(cur <= prev + 1e-6);
    prev = cur;
  }
  CHECK(result.freeze_contract_clean);
}

TEST_CASE("decoupled gradients: finite differences pass for every trainable group") {
  auto model = tiny_model(TrainMode::decoupled, 29);
  std::vector<int> tokens{1, 4, 2, 9, 3, 7, 5, 6, 8, 2, 1, 4};  // 12 tokens
  auto rep = gradcheck_full_chain(model, tokens, 1, 1e-5, 2, 31);
  for (const auto& [group, err] : rep.max_rel_err) {
    INFO(group);
    CHECK(err < 1e-4);
  }
  CHECK(rep.max_rel_err.size() == 5);
  CHECK(rep.pass);
}

TEST_CASE("decoupled step: zero learning rate leaves all parameters unchanged") {
  auto model = tiny_model(TrainMode::decoupled, 31);
  auto data = separable_toy(6);
  std::vector<Buffer> snap;
  for (auto& nt : model.all_parameters()) snap.push_back(nt.t.values());
  Adam opt(model.trainable_tensors(), 0.0);
  train_step(model, opt, as_batch(data), 0);
  std::size_t i = 0;
  for (auto& nt : model.all_parameters()) {
    CHECK(nt.t.values() == snap[i]);
    ++i;
  }
}

TEST_CASE("controlled nesting: frozen gamma group reduces decoupled to one-stage over [P; S0]") {
  auto model = tiny_model(TrainMode::decoupled, 37);
  std::vector<int> tokens{3, 1, 4, 1, 5, 9, 2, 6};
  NoTapeScope no_grad;
  double full = model.logit(tokens).item();

  // manual chain with the same frozen draft
  Tensor prompt = model.reasoner().embed(tokens);
  Tensor projected = project_to_extractor(prompt, model.projectors());
  Tensor draft_w = extract_draft(projected, model.queries(), model.extractor(), model.delta_b());
  Tensor draft = project_to_reasoner(draft_w, model.projectors());
  Tensor y = assemble(prompt, draft, Insertion::tail);
  double manual = readout_logit(y, model.reasoner(), model.delta_a(), model.head()).item();
  CHECK(full == manual);
}

TEST_CASE("train: same seed twice gives bitwise-identical checkpoints") {
  auto data = separable_toy(12);
  TrainConfig cfg;
  cfg.mode = TrainMode::decoupled;
  cfg.learning_rate = 3e-3;
  cfg.steps = 10;
  cfg.batch_size = 4;
  cfg.seed = 5;
  cfg.latent_len = 3;
  cfg.eval_every = 5;

  auto run = [&]() {
    auto model = tiny_model(TrainMode::decoupled, 41);
    auto result = train_judge(model, cfg, data, data);
    return std::make_pair(model.to_checkpoint(), result);
  };
  auto [ck1, res1] = run();
  auto [ck2, res2] = run();
  REQUIRE(ck1.tensors.size() == ck2.tensors.size());
  for (std::size_t i = 0; i < ck1.tensors.size(); ++i) {
    CHECK(ck1.tensors[i].name == ck2.tensors[i].name);
    CHECK(ck1.tensors[i].t.values() == ck2.tensors[i].t.values());
  }
  REQUIRE(res1.history.size() == res2.history.size());
  for (std::size_t i = 0; i < res1.history.size(); ++i) {
    CHECK(res1.history[i].loss == res2.history[i].loss);
  }
}

TEST_CASE("mode alias: no_extractor reproduces one_stage exactly") {
  auto data = separable_toy(12);
  auto run = [&](TrainMode mode) {
    TrainConfig cfg;
    cfg.mode = mode;
    cfg.learning_rate = 3e-3;
    cfg.steps = 8;
    cfg.batch_size = 4;
    cfg.seed = 3;
    cfg.latent_len = 3;
    cfg.eval_every = 0;
    auto model = tiny_model(mode, 43);
    auto result = train_judge(model, cfg, data, data);
    return std::make_pair(model.to_checkpoint(), result);
  };
  auto [ck_one, res_one] = run(TrainMode::one_stage);
  auto [ck_alias, res_alias] = run(TrainMode::no_extractor);
  REQUIRE(ck_one.tensors.size() == ck_alias.tensors.size());
  for (std::size_t i = 0; i < ck_one.tensors.size(); ++i) {
    CHECK(ck_one.tensors[i].t.values() == ck_alias.tensors[i].t.values());
  }
  CHECK(res_one.final_val_accuracy == res_alias.final_val_accuracy);
}

TEST_CASE("no_reasoner trains the gamma group and freezes delta_a") {
  auto model = tiny_model(TrainMode::no_reasoner, 47);
  auto data = separable_toy(8);
  auto before_a = model.group_checksum("delta_a");
  auto before_q = model.group_checksum("queries");
  Adam opt(model.trainable_tensors(), 1e-2);
  for (int step = 0; step < 3; ++step) train_step(model, opt, as_batch(data), step);
  CHECK(model.group_checksum("delta_a") == before_a);
  CHECK(model.group_checksum("queries") != before_q);
}

TEST_CASE("explicit baseline: deterministic decode cache and reasoner-side training only") {
  auto model = tiny_model(TrainMode::explicit_baseline, 53, Insertion::tail, 4);
  auto data = separable_toy(6);
  NoTapeScope no_grad;
  double a = model.logit(data[0].tokens).item();
  double b = model.logit(data[0].tokens).item();
  CHECK(a == b);

  auto before_b = model.group_checksum("delta_b");
  auto before_q = model.group_checksum("queries");
  auto before_p = model.group_checksum("projectors");
  Adam opt(model.trainable_tensors(), 1e-2);
  train_step(model, opt, as_batch(data), 0);
  CHECK(model.group_checksum("delta_b") == before_b);
  CHECK(model.group_checksum("queries") == before_q);
  CHECK(model.group_checksum("projectors") == before_p);
}

TEST_CASE("train aborts with diagnostics on non-finite loss") {
  auto model = tiny_model(TrainMode::one_stage, 59);
  for (auto& v : model.head().w.values()) v = std::nan("");
  auto data = separable_toy(4);
  Adam opt(model.trainable_tensors(), 1e-3);
  CHECK_THROWS_WITH_AS(train_step(model, opt, as_batch(data), 7), doctest::Contains("step 7"), NumericError);
  try {
    train_step(model, opt, as_batch(data), 7);
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("toy-0") != std::string::npos);
  }
}

TEST_CASE("judge checkpoints round trip through the container") {
  auto model = tiny_model(TrainMode::decoupled, 61);
  Rng rng(67);
  for (auto& nt : model.all_parameters()) {
    for (auto& v : nt.t.values()) v += 0.01 * rng.normal();
  }
  auto ck = model.to_checkpoint();
  auto restored = JudgeModel::from_checkpoint(ck);
  std::vector<int> tokens{1, 2, 3, 4, 5, 6};
  NoTapeScope no_grad;
  CHECK(restored.logit(tokens).item() == model.logit(tokens).item());
}

TEST_CASE("prefix_dec insertion appends the decision embedding and stays differentiable") {
  auto model = tiny_model(TrainMode::decoupled, 71, Insertion::prefix_dec);
  Rng hrng(73);
  for (auto& v : model.head().w.values()) v = hrng.normal();  // a zero head blocks upstream grads
  std::vector<int> tokens{1, 2, 3, 4};
  Tape tape;
  TapeScope scope(tape);
  Tensor z = model.logit(tokens);
  Tensor loss = bce_loss(sigmoid(z), 1);
  tape.backward(loss);
  CHECK(std::isfinite(z.item()));
  bool any_grad = false;
  for (double g : model.queries().q.grad()) any_grad = any_grad || g != 0.0;
  CHECK(any_grad);
}

TEST_SUITE_END();
