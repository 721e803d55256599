#include <doctest.h>

#include <cmath>

#include "latentjudge/workspace.hpp"

using namespace lj;

namespace {
BackboneConfig extractor_config(std::int64_t d_w = 12) {
  BackboneConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = d_w;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.max_seq_len = 64;
  return cfg;
}
}  // namespace

TEST_SUITE_BEGIN("workspace");

TEST_CASE("projectors: identity case, zero case, matmul oracle") {
  auto proj = ProjectorPair::create(6, 6, 1);
  Rng rng(2);
  Tensor p = Tensor::randn({4, 6}, rng, 1.0);
  Tensor projected = project_to_extractor(p, proj);
  CHECK(projected.values() == p.values());
  Tensor back = project_to_reasoner(projected, proj);
  CHECK(back.values() == p.values());

  Tensor zero = Tensor::zeros({3, 6});
  CHECK(project_to_extractor(zero, proj).values() == std::vector<double>(18, 0.0));

  auto rect = ProjectorPair::create(8, 6, 3);
  Tensor p2 = Tensor::randn({5, 8}, rng, 1.0);
  Tensor got = project_to_extractor(p2, rect);
  Tensor expect = matmul(p2, rect.r_to_w);
  for (std::int64_t i = 0; i < 5; ++i) {
    for (std::int64_t j = 0; j < 6; ++j) {
      CHECK(got.at(i, j) == doctest::Approx(expect.at(i, j)).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(project_to_extractor(p2, proj), ShapeError);
  CHECK_THROWS_AS(project_to_reasoner(p2, rect), ShapeError);
}

TEST_CASE("round-trip law: identity projectors compose to the identity") {
  auto proj = ProjectorPair::create(10, 10, 7);
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor m = Tensor::randn({6, 10}, rng, 2.0);
    Tensor round = project_to_reasoner(project_to_extractor(m, proj), proj);
    for (std::int64_t i = 0; i < m.size(); ++i) {
      CHECK(std::abs(round.values()[static_cast<std::size_t>(i)] - m.values()[static_cast<std::size_t>(i)]) <=
            1e-12);
    }
  }
}

TEST_CASE("extract_draft: shape law, zero-delta identity, role check") {
  auto cfg = extractor_config();
  Backbone extractor(cfg, 5);
  extractor.freeze();
  auto queries = DraftQueries::create(4, cfg.d_model, 6);
  auto delta_b = AdapterSet::create(AdapterRole::extractor, cfg, 2, 4.0, 7);
  Rng rng(8);
  Tensor prompt = Tensor::randn({10, cfg.d_model}, rng, 0.3);

  Tensor draft = extract_draft(prompt, queries, extractor, delta_b);
  CHECK(draft.rows() == 4);
  CHECK(draft.cols() == cfg.d_model);

  // zero up-matrices: extraction equals the frozen-backbone extraction
  Tensor z = concat_rows({prompt, queries.q});
  Tensor frozen = slice_rows(extractor.forward(z, nullptr, AttentionMask::causal(14)), 10, 4);
  CHECK(draft.values() == frozen.values());

  auto wrong_role = AdapterSet::create(AdapterRole::reasoner, cfg, 2, 4.0, 7);
  CHECK_THROWS_AS(extract_draft(prompt, queries, extractor, wrong_role), UsageError);
}

TEST_CASE("extract_draft: query positions see the whole prompt (perturbation sensitivity)") {
  auto cfg = extractor_config();
  Backbone extractor(cfg, 15);
  extractor.freeze();
  auto queries = DraftQueries::create(3, cfg.d_model, 16);
  auto delta_b = AdapterSet::create(AdapterRole::extractor, cfg, 2, 4.0, 17);
  Rng rng(18);
  Tensor prompt = Tensor::randn({8, cfg.d_model}, rng, 0.3);
  Tensor base = extract_draft(prompt, queries, extractor, delta_b);

  Tensor poked = prompt.clone();
  for (std::int64_t j = 0; j < cfg.d_model; ++j) poked.at(0, j) += 0.25;
  Tensor after = extract_draft(poked, queries, extractor, delta_b);
  bool changed = false;
  for (std::size_t i = 0; i < base.values().size(); ++i) {
    changed = changed || base.values()[i] != after.values()[i];
  }
  CHECK(changed);
}

TEST_CASE("assemble: all insertion positions and the shape law") {
  Rng rng(21);
  Tensor p = Tensor::randn({3, 4}, rng, 1.0);
  Tensor s = Tensor::randn({1, 4}, rng, 1.0);

  Tensor tail = assemble(p, s, Insertion::tail);
  CHECK(tail.rows() == 4);
  for (std::int64_t j = 0; j < 4; ++j) CHECK(tail.at(3, j) == s.at(0, j));

  Tensor head = assemble(p, s, Insertion::head);
  CHECK(head.rows() == 4);
  for (std::int64_t j = 0; j < 4; ++j) CHECK(head.at(0, j) == s.at(0, j));

  Tensor mid = assemble(p, s, Insertion::middle);  // split at floor(3/2) = 1
  CHECK(mid.rows() == 4);
  for (std::int64_t j = 0; j < 4; ++j) {
    CHECK(mid.at(0, j) == p.at(0, j));
    CHECK(mid.at(1, j) == s.at(0, j));
    CHECK(mid.at(2, j) == p.at(1, j));
  }

  Tensor dec = Tensor::randn({1, 4}, rng, 1.0);
  Tensor prefix = assemble(p, s, Insertion::prefix_dec, dec);
  CHECK(prefix.rows() == 5);
  for (std::int64_t j = 0; j < 4; ++j) CHECK(prefix.at(4, j) == dec.at(0, j));
  CHECK_THROWS_AS(assemble(p, s, Insertion::prefix_dec), UsageError);

  // 128 + 16 tail rows, per the augmentation shape
  Tensor big = assemble(Tensor::zeros({128, 4}), Tensor::zeros({16, 4}), Insertion::tail);
  CHECK(big.rows() == 144);
  for (Insertion ins : {Insertion::tail, Insertion::middle, Insertion::head, Insertion::prefix_dec}) {
    Tensor y = assemble(p, s, ins, dec);
    CHECK(y.rows() == assembled_length(3, 1, ins));
  }
}

TEST_CASE("assemble: head and tail contain the same multiset of rows") {
  Rng rng(23);
  Tensor p = Tensor::randn({4, 3}, rng, 1.0);
  Tensor s = Tensor::randn({2, 3}, rng, 1.0);
  auto rows_of = [](const Tensor& t) {
    std::vector<std::vector<double>> rows;
    for (std::int64_t i = 0; i < t.rows(); ++i) {
      std::vector<double> r;
      for (std::int64_t j = 0; j < t.cols(); ++j) r.push_back(t.at(i, j));
      rows.push_back(std::move(r));
    }
    std::sort(rows.begin(), rows.end());
    return rows;
  };
  CHECK(rows_of(assemble(p, s, Insertion::tail)) == rows_of(assemble(p, s, Insertion::head)));
}

TEST_CASE("explicit_summarize: deterministic, rejects latent_len 0, costs latent_len forwards") {
  auto cfg = extractor_config();
  Backbone extractor(cfg, 25);
  extractor.freeze();
  std::vector<int> tokens{1, 5, 2, 7, 3, 1};

  auto first = explicit_summarize(tokens, extractor, 5);
  auto second = explicit_summarize(tokens, extractor, 5);
  CHECK(first == second);
  CHECK(first.size() == 5);
  for (int t : first) {
    CHECK(t >= 0);
    CHECK(t < cfg.vocab_size);
  }

  CHECK_THROWS_AS(explicit_summarize(tokens, extractor, 0), UsageError);

  // latency law: decode uses exactly latent_len sequential forwards, the
  // latent path exactly one
  extractor.reset_forward_count();
  explicit_summarize(tokens, extractor, 7);
  CHECK(extractor.forward_count() == 7);

  auto queries = DraftQueries::create(7, cfg.d_model, 26);
  auto delta_b = AdapterSet::create(AdapterRole::extractor, cfg, 2, 4.0, 27);
  Rng rng(28);
  Tensor prompt = Tensor::randn({6, cfg.d_model}, rng, 0.3);
  extractor.reset_forward_count();
  extract_draft(prompt, queries, extractor, delta_b);
  CHECK(extractor.forward_count() == 1);
}

TEST_CASE("differentiability: gradients flow through projectors and queries") {
  auto cfg = extractor_config(8);
  Backbone extractor(cfg, 31);
  extractor.freeze();
  auto proj = ProjectorPair::create(8, 8, 32);
  auto queries = DraftQueries::create(2, 8, 33);
  auto delta_b = AdapterSet::create(AdapterRole::extractor, cfg, 2, 4.0, 34);
  Rng rng(35);
  Tensor prompt = Tensor::randn({5, 8}, rng, 0.4);

  Tape tape;
  TapeScope scope(tape);
  Tensor p_tilde = project_to_extractor(prompt, proj);
  Tensor s_w = extract_draft(p_tilde, queries, extractor, delta_b);
  Tensor s = project_to_reasoner(s_w, proj);
  Tensor y = assemble(prompt, s, Insertion::tail);
  Tensor p = sigmoid(sum_all(terminal_hidden(y)));
  Tensor loss = bce_loss(p, 1);
  tape.backward(loss);

  CHECK(gradcheck_max_rel_err(proj.r_to_w, tape, loss, 1e-5, rng, 6) < 1e-4);
  CHECK(gradcheck_max_rel_err(proj.w_to_r, tape, loss, 1e-5, rng, 6) < 1e-4);
  CHECK(gradcheck_max_rel_err(queries.q, tape, loss, 1e-5, rng, 6) < 1e-4);
}

TEST_SUITE_END();
