#include "latentjudge/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include "latentjudge/theory.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lj {

namespace {

json load_json_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) throw ParseError("malformed JSON: " + path);
  return j;
}

void dump_json_file(const std::string& path, const json& j) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << j.dump(2) << "\n";
  if (!f) throw IoError("write failed: " + path);
}

std::vector<std::vector<int>> token_sequences(const std::vector<TrajectoryExample>& examples) {
  std::vector<std::vector<int>> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(ex.tokens);
  return out;
}

}  // namespace

json CellResult::to_json() const {
  json checks;
  for (const auto& [name, sum] : frozen_checksums) checks[name] = sum;
  return json{{"cell_id", cell_id},
              {"seed", seed},
              {"mode", mode},
              {"insertion", insertion},
              {"latent_len", latent_len},
              {"cell_hash", cell_hash},
              {"val_metrics", val_metrics.to_json()},
              {"final_loss", final_loss},
              {"freeze_contract_clean", freeze_contract_clean},
              {"frozen_checksums", checks},
              {"checkpoint_path", checkpoint_path},
              {"history_path", history_path}};
}

CellResult CellResult::from_json(const json& j) {
  CellResult c;
  c.cell_id = j.at("cell_id").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.mode = j.at("mode").get<std::string>();
  c.insertion = j.at("insertion").get<std::string>();
  c.latent_len = j.at("latent_len").get<std::int64_t>();
  c.cell_hash = j.at("cell_hash").get<std::string>();
  c.val_metrics = MetricsReport::from_json(j.at("val_metrics"));
  c.final_loss = j.at("final_loss").get<double>();
  c.freeze_contract_clean = j.at("freeze_contract_clean").get<bool>();
  for (auto it = j.at("frozen_checksums").begin(); it != j.at("frozen_checksums").end(); ++it) {
    c.frozen_checksums[it.key()] = it.value().get<std::uint64_t>();
  }
  c.checkpoint_path = j.at("checkpoint_path").get<std::string>();
  c.history_path = j.at("history_path").get<std::string>();
  return c;
}

// ---------------------------------------------------------------------------
// ExperimentContext
// ---------------------------------------------------------------------------

namespace {

// hash of everything pretraining depends on (data, splits, backbones, pretrain)
std::string pretrain_hash(const RunConfig& cfg) {
  std::ostringstream os;
  os << cfg.data.id() << "|" << cfg.n_train << "|" << cfg.n_val << "|" << cfg.n_test << "|"
     << cfg.reasoner.to_json_string() << "|" << cfg.extractor.to_json_string() << "|" << cfg.pretrain_steps
     << "|" << cfg.pretrain_batch << "|" << cfg.pretrain_lr << "|" << cfg.pretrain_seed;
  std::ostringstream id;
  id << "p" << std::hex << fnv1a64(os.str());
  return id.str();
}

}  // namespace

ExperimentContext ExperimentContext::prepare(const RunConfig& cfg_in) {
  ExperimentContext ctx;
  ctx.cfg_ = cfg_in;
  ctx.cfg_.resolve();
  const RunConfig& cfg = ctx.cfg_;

  fs::create_directories(cfg.out_dir);
  fs::create_directories(cfg.out_dir + "/data");
  fs::create_directories(cfg.out_dir + "/checkpoints");
  fs::create_directories(cfg.out_dir + "/metrics");
  fs::create_directories(cfg.out_dir + "/features");
  fs::create_directories(cfg.out_dir + "/logs");
  // the snapshot itself is reproduce's input, not a compared output
  cfg.save(cfg.out_dir + "/config.ini");

  std::int64_t total = cfg.n_train + cfg.n_val + cfg.n_test;
  auto corpus = generate_corpus(cfg.data, total);
  double ft = static_cast<double>(cfg.n_train) / static_cast<double>(total);
  double fv = static_cast<double>(cfg.n_val) / static_cast<double>(total);
  double fx = 1.0 - ft - fv;
  std::tie(ctx.train_, ctx.val_, ctx.test_) = split(corpus, ft, fv, fx, derive_seed(cfg.data.seed, "split"));
  save_jsonl(ctx.train_, cfg.out_dir + "/data/train.jsonl");
  save_jsonl(ctx.val_, cfg.out_dir + "/data/val.jsonl");
  save_jsonl(ctx.test_, cfg.out_dir + "/data/test.jsonl");
  save_generator_config(cfg.data, cfg.out_dir + "/data/generator.cfg");
  ctx.add_manifest("data/train.jsonl", "jsonl");
  ctx.add_manifest("data/val.jsonl", "jsonl");
  ctx.add_manifest("data/test.jsonl", "jsonl");
  ctx.add_manifest("data/generator.cfg", "text");

  // pretrained frozen backbones: load when a matching checkpoint exists
  std::string expected_hash = pretrain_hash(cfg);
  std::string ck_path = cfg.backbones_ckpt.empty() ? cfg.out_dir + "/checkpoints/backbones.ckpt"
                                                   : cfg.backbones_ckpt;
  bool loaded = false;
  if (fs::exists(ck_path)) {
    auto ck = Checkpoint::load(ck_path);
    json meta = json::parse(ck.meta_json);
    if (meta.value("pretrain_hash", "") == expected_hash || !cfg.backbones_ckpt.empty()) {
      auto rc = BackboneConfig::from_json_string(meta.at("reasoner_config").dump());
      auto wc = BackboneConfig::from_json_string(meta.at("extractor_config").dump());
      ctx.reasoner_ = std::make_shared<Backbone>(rc, 0);
      ctx.extractor_ = std::make_shared<Backbone>(wc, 0);
      auto strip = [&](const std::string& prefix) {
        std::vector<NamedTensor> out;
        for (const auto& nt : ck.tensors) {
          if (nt.name.rfind(prefix, 0) == 0) out.push_back({nt.name.substr(prefix.size()), nt.t});
        }
        return out;
      };
      ctx.reasoner_->load_parameters(strip("reasoner."));
      ctx.extractor_->load_parameters(strip("extractor."));
      loaded = true;
    }
  }
  if (!loaded) {
    ctx.reasoner_ = std::make_shared<Backbone>(cfg.reasoner, derive_seed(cfg.pretrain_seed, "reasoner-init"));
    ctx.extractor_ = std::make_shared<Backbone>(cfg.extractor, derive_seed(cfg.pretrain_seed, "extractor-init"));
    auto corpus_tokens = token_sequences(ctx.train_);
    pretrain_language_model(*ctx.reasoner_, corpus_tokens, cfg.pretrain_steps, cfg.pretrain_batch,
                            cfg.pretrain_lr, derive_seed(cfg.pretrain_seed, "reasoner"));
    pretrain_language_model(*ctx.extractor_, corpus_tokens, cfg.pretrain_steps, cfg.pretrain_batch,
                            cfg.pretrain_lr, derive_seed(cfg.pretrain_seed, "extractor"));
    Checkpoint ck;
    json meta;
    meta["kind"] = "backbones";
    meta["pretrain_hash"] = expected_hash;
    meta["reasoner_config"] = json::parse(ctx.reasoner_->config().to_json_string());
    meta["extractor_config"] = json::parse(ctx.extractor_->config().to_json_string());
    ck.meta_json = meta.dump();
    for (const auto& nt : ctx.reasoner_->parameters()) ck.tensors.push_back({"reasoner." + nt.name, nt.t});
    for (const auto& nt : ctx.extractor_->parameters()) ck.tensors.push_back({"extractor." + nt.name, nt.t});
    ck.save(cfg.out_dir + "/checkpoints/backbones.ckpt");
  }
  ctx.reasoner_->freeze();
  ctx.extractor_->freeze();
  ctx.add_manifest("checkpoints/backbones.ckpt", "binary");
  return ctx;
}

std::string ExperimentContext::cell_hash(const std::string& mode, std::int64_t latent_len,
                                         const std::string& insertion, std::uint64_t seed) const {
  std::ostringstream os;
  os << pretrain_hash(cfg_) << "|" << cfg_.adapter_rank << "|" << cfg_.adapter_alpha << "|"
     << cfg_.learning_rate << "|" << cfg_.train_steps << "|" << cfg_.train_batch << "|" << cfg_.threshold
     << "|" << cfg_.eval_every << "|" << mode << "|" << latent_len << "|" << insertion << "|" << seed;
  std::ostringstream id;
  id << "h" << std::hex << fnv1a64(os.str());
  return id.str();
}

JudgeModel ExperimentContext::fresh_model(const std::string& mode, std::int64_t latent_len,
                                          const std::string& insertion, std::uint64_t seed) const {
  JudgeModelConfig mc;
  mc.adapter_rank = cfg_.adapter_rank;
  mc.adapter_alpha = cfg_.adapter_alpha;
  mc.latent_len = latent_len;
  mc.insertion = insertion_from_name(insertion);
  mc.mode = train_mode_from_name(mode);
  return JudgeModel(reasoner_, extractor_, mc, derive_seed(seed, "judge-init"));
}

CellResult ExperimentContext::run_cell(const std::string& mode, std::int64_t latent_len,
                                       const std::string& insertion, std::uint64_t seed) {
  std::string cell_id = mode + "-" + insertion + "-L" + std::to_string(latent_len) + "-s" + std::to_string(seed);
  std::string rel_dir = "cells/" + cell_id;
  std::string dir = cfg_.out_dir + "/" + rel_dir;
  std::string hash = cell_hash(mode, latent_len, insertion, seed);

  if (fs::exists(dir + "/result.json")) {
    auto cached = CellResult::from_json(load_json_file(dir + "/result.json"));
    if (cached.cell_hash == hash) {
      cached.from_cache = true;
      return cached;
    }
  }
  fs::create_directories(dir);

  JudgeModel model = fresh_model(mode, latent_len, insertion, seed);
  TrainConfig tc = cfg_.train_config(seed);
  tc.mode = train_mode_from_name(mode);
  tc.latent_len = latent_len;
  tc.insertion = insertion_from_name(insertion);
  auto result = train_judge(model, tc, train_, val_);

  CellResult cell;
  cell.cell_id = cell_id;
  cell.seed = seed;
  cell.mode = mode;
  cell.insertion = insertion;
  cell.latent_len = latent_len;
  cell.cell_hash = hash;
  cell.val_metrics = evaluate(model, val_, cfg_.threshold);
  cell.val_metrics.seed = seed;
  cell.val_metrics.config_id = cfg_.data.id();
  cell.final_loss = result.final_loss;
  cell.freeze_contract_clean = result.freeze_contract_clean;
  cell.frozen_checksums = result.frozen_checksums;
  cell.checkpoint_path = rel_dir + "/model.ckpt";
  cell.history_path = rel_dir + "/history.jsonl";

  {
    std::ofstream hist(dir + "/history.jsonl", std::ios::binary);
    if (!hist) throw IoError("cannot open for writing: " + dir + "/history.jsonl");
    for (const auto& rec : result.history) {
      json j{{"step", rec.step}, {"loss", rec.loss}};
      if (rec.has_val) j["val_accuracy"] = rec.val_accuracy;
      hist << j.dump() << "\n";
    }
  }
  model.to_checkpoint(json{{"cell_id", cell_id}, {"cell_hash", hash}}.dump()).save(dir + "/model.ckpt");
  dump_json_file(dir + "/result.json", cell.to_json());
  add_manifest(rel_dir + "/result.json", "json");
  add_manifest(rel_dir + "/history.jsonl", "jsonl");
  add_manifest(rel_dir + "/model.ckpt", "binary");
  return cell;
}

JudgeModel ExperimentContext::load_cell_model(const CellResult& cell) const {
  return JudgeModel::from_checkpoint(Checkpoint::load(cfg_.out_dir + "/" + cell.checkpoint_path));
}

std::vector<ExperimentContext::CellOutcome> ExperimentContext::run_cells(const std::vector<CellSpec>& specs) {
  std::vector<CellOutcome> outcomes(specs.size());
  std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("LATENTJUDGE_WORKERS")) {
    workers = std::max<std::size_t>(1, static_cast<std::size_t>(std::atoll(env)));
  }
  workers = std::min(workers, specs.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      std::size_t i = next.fetch_add(1);
      if (i >= specs.size()) return;
      const auto& s = specs[i];
      try {
        outcomes[i].cell = run_cell(s.mode, s.latent_len, s.insertion, s.seed);
        outcomes[i].ok = true;
      } catch (const NumericError& e) {
        outcomes[i].error = e.what();
        outcomes[i].numeric_abort = true;
      } catch (const std::exception& e) {
        outcomes[i].error = e.what();
      }
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& o : outcomes) {
    if (!o.ok && !o.numeric_abort) {
      throw Error(ErrorKind::runtime, "cell failed: " + o.error);
    }
  }
  return outcomes;
}

void ExperimentContext::add_manifest(const std::string& path, const std::string& kind,
                                     std::vector<std::string> volatile_keys) {
  std::lock_guard<std::mutex> lock(manifest_mutex_);
  for (auto& e : manifest_) {
    if (e.path == path) return;
  }
  manifest_.push_back({path, kind, std::move(volatile_keys)});
}

void ExperimentContext::write_json(const std::string& rel_path, const json& j,
                                   std::vector<std::string> volatile_keys) {
  dump_json_file(cfg_.out_dir + "/" + rel_path, j);
  add_manifest(rel_path, "json", std::move(volatile_keys));
}

void ExperimentContext::write_manifest(const std::string& command) {
  std::lock_guard<std::mutex> lock(manifest_mutex_);
  std::sort(manifest_.begin(), manifest_.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.path < b.path; });
  json entries = json::array();
  for (const auto& e : manifest_) {
    entries.push_back(json{{"path", e.path}, {"kind", e.kind}, {"volatile_keys", e.volatile_keys}});
  }
  dump_json_file(cfg_.out_dir + "/manifest.json",
                 json{{"command", command}, {"config_hash", cfg_.config_hash()}, {"entries", entries}});
}

// ---------------------------------------------------------------------------
// Drivers
// ---------------------------------------------------------------------------

json run_train(ExperimentContext& ctx) {
  const auto& cfg = ctx.config();
  auto cell = ctx.run_cell(cfg.mode, cfg.latent_len, cfg.insertion, cfg.seed);
  json out{{"cell", cell.to_json()}};
  ctx.write_json("metrics/train_result.json", out);
  return out;
}

json run_rq1(ExperimentContext& ctx) {
  const auto& cfg = ctx.config();
  json per_seed = json::array();
  std::vector<double> dec_acc, one_acc, dec_probe, one_probe;
  {  // warm every cell in parallel; the loop below reads them from cache
    std::vector<ExperimentContext::CellSpec> specs;
    for (auto seed : cfg.eval_seeds) {
      specs.push_back({"decoupled", cfg.latent_len, "tail", seed});
      specs.push_back({"one_stage", cfg.latent_len, "tail", seed});
    }
    ctx.run_cells(specs);
  }
  for (auto seed : cfg.eval_seeds) {
    auto dec = ctx.run_cell("decoupled", cfg.latent_len, "tail", seed);
    auto one = ctx.run_cell("one_stage", cfg.latent_len, "tail", seed);
    dec_acc.push_back(dec.val_metrics.accuracy);
    one_acc.push_back(one.val_metrics.accuracy);

    // separability proxy: linear probe on exported terminal features
    auto dec_model = ctx.load_cell_model(dec);
    auto one_model = ctx.load_cell_model(one);
    std::string dec_csv = "features/rq1_decoupled_s" + std::to_string(seed) + ".csv";
    std::string one_csv = "features/rq1_one_stage_s" + std::to_string(seed) + ".csv";
    export_features(dec_model, ctx.val_set(), ctx.out_dir() + "/" + dec_csv);
    export_features(one_model, ctx.val_set(), ctx.out_dir() + "/" + one_csv);
    ctx.add_manifest(dec_csv, "text");
    ctx.add_manifest(one_csv, "text");
    auto [df, dl] = load_feature_csv(ctx.out_dir() + "/" + dec_csv);
    auto [of, ol] = load_feature_csv(ctx.out_dir() + "/" + one_csv);
    double dp = linear_probe_accuracy(df, dl, seed);
    double op = linear_probe_accuracy(of, ol, seed);
    dec_probe.push_back(dp);
    one_probe.push_back(op);
    per_seed.push_back(json{{"seed", seed},
                            {"decoupled_accuracy", dec.val_metrics.accuracy},
                            {"one_stage_accuracy", one.val_metrics.accuracy},
                            {"decoupled_probe", dp},
                            {"one_stage_probe", op}});
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  int dominated = 0;
  for (std::size_t i = 0; i < dec_acc.size(); ++i) {
    if (dec_acc[i] > one_acc[i]) ++dominated;
  }
  json out{{"per_seed", per_seed},
           {"decoupled_mean", mean(dec_acc)},
           {"one_stage_mean", mean(one_acc)},
           {"mean_gap_points", 100.0 * (mean(dec_acc) - mean(one_acc))},
           {"per_seed_dominance", dominated},
           {"n_seeds", dec_acc.size()},
           {"decoupled_probe_mean", mean(dec_probe)},
           {"one_stage_probe_mean", mean(one_probe)}};
  ctx.write_json("metrics/rq1.json", out);
  return out;
}

json run_sweep_length(ExperimentContext& ctx) {
  const auto& cfg = ctx.config();
  std::vector<std::string> values;
  std::vector<std::vector<double>> raw;
  SweepResult sweep;
  bool partial = false;
  std::vector<std::string> failed;
  for (auto len : cfg.sweep_lengths) {
    values.push_back(std::to_string(len));
    std::vector<double> cell_accs;
    for (auto seed : cfg.eval_seeds) {
      try {
        auto cell = ctx.run_cell("decoupled", len, "tail", seed);
        cell_accs.push_back(cell.val_metrics.accuracy);
      } catch (const NumericError& e) {
        partial = true;
        failed.push_back("decoupled-tail-L" + std::to_string(len) + "-s" + std::to_string(seed) + ": " +
                         e.what());
      }
    }
    raw.push_back(cell_accs);
  }
  sweep = make_sweep_result("latent_len", values, raw, cfg.eval_seeds);
  sweep.partial = partial;
  sweep.failed_cells = failed;
  json out = sweep.to_json();
  // interior-maximum shape over the swept lengths
  if (values.size() >= 3 && !partial) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < sweep.mean.size(); ++i) {
      if (sweep.mean[i] > sweep.mean[arg]) arg = i;
    }
    out["argmax_value"] = values[arg];
    out["interior_maximum"] = arg > 0 && arg + 1 < sweep.mean.size();
  }
  ctx.write_json("metrics/sweep_length.json", out);
  return out;
}

json run_sweep_position(ExperimentContext& ctx) {
  const auto& cfg = ctx.config();
  bool has_tail = false;
  for (const auto& p : cfg.sweep_positions) has_tail = has_tail || p == "tail";
  if (!has_tail) throw ConfigError("sweep-position: the position list must include 'tail'");
  std::vector<std::string> values;
  std::vector<std::vector<double>> raw;
  bool partial = false;
  std::vector<std::string> failed;
  for (const auto& pos : cfg.sweep_positions) {
    values.push_back(pos);
    std::vector<double> cell_accs;
    for (auto seed : cfg.eval_seeds) {
      try {
        CellResult cell = pos == "explicit"
                              ? ctx.run_cell("explicit_baseline", cfg.latent_len, "tail", seed)
                              : ctx.run_cell("decoupled", cfg.latent_len, pos, seed);
        cell_accs.push_back(cell.val_metrics.accuracy);
      } catch (const NumericError& e) {
        partial = true;
        failed.push_back(pos + "-s" + std::to_string(seed) + ": " + e.what());
      }
    }
    raw.push_back(cell_accs);
  }
  auto sweep = make_sweep_result("insertion", values, raw, cfg.eval_seeds);
  sweep.partial = partial;
  sweep.failed_cells = failed;
  json out = sweep.to_json();
  ctx.write_json("metrics/sweep_position.json", out);
  return out;
}

json run_ablation(ExperimentContext& ctx) {
  const auto& cfg = ctx.config();
  if (cfg.mode != "decoupled") {
    throw ConfigError("ablate: train.mode must be 'decoupled' for the module ablation");
  }
  json modes = json::object();
  for (const std::string mode : {"decoupled", "no_reasoner", "no_extractor"}) {
    std::vector<double> accs;
    json cells = json::array();
    bool checks_clean = true;
    for (auto seed : cfg.eval_seeds) {
      auto cell = ctx.run_cell(mode, cfg.latent_len, "tail", seed);
      accs.push_back(cell.val_metrics.accuracy);
      checks_clean = checks_clean && cell.freeze_contract_clean;
      json checksums;
      for (const auto& [name, sum] : cell.frozen_checksums) checksums[name] = sum;
      cells.push_back(json{{"seed", seed},
                           {"accuracy", cell.val_metrics.accuracy},
                           {"freeze_contract_clean", cell.freeze_contract_clean},
                           {"frozen_checksums", checksums}});
    }
    double mean = 0.0;
    for (double a : accs) mean += a;
    mean /= static_cast<double>(accs.size());
    modes[mode] = json{{"mean_accuracy", mean}, {"cells", cells}, {"freeze_contract_clean", checks_clean}};
  }
  json out{{"modes", modes}};
  ctx.write_json("metrics/ablation.json", out);
  return out;
}

json run_generalization(ExperimentContext& ctx) {
  const auto& cfg = ctx.config();
  auto shifted_cfg = make_shifted_config(cfg.data);
  auto shifted = generate_corpus(shifted_cfg, cfg.n_val);
  save_jsonl(shifted, ctx.out_dir() + "/data/shifted.jsonl");
  ctx.add_manifest("data/shifted.jsonl", "jsonl");

  json out;
  for (const std::string mode : {"decoupled", "one_stage"}) {
    json rows = json::array();
    std::vector<double> in_acc, out_acc;
    for (auto seed : cfg.eval_seeds) {
      auto cell = ctx.run_cell(mode, cfg.latent_len, "tail", seed);
      auto model = ctx.load_cell_model(cell);
      auto shifted_metrics = evaluate(model, shifted, cfg.threshold);
      in_acc.push_back(cell.val_metrics.accuracy);
      out_acc.push_back(shifted_metrics.accuracy);
      rows.push_back(json{{"seed", seed},
                          {"in_distribution", cell.val_metrics.to_json()},
                          {"shifted", shifted_metrics.to_json()}});
    }
    auto mean = [](const std::vector<double>& v) {
      double s = 0.0;
      for (double x : v) s += x;
      return s / static_cast<double>(v.size());
    };
    out[mode] = json{{"rows", rows},
                     {"in_distribution_mean", mean(in_acc)},
                     {"shifted_mean", mean(out_acc)}};
  }
  out["shifted_config_id"] = shifted_cfg.id();
  ctx.write_json("metrics/generalization.json", out);
  return out;
}

json run_efficiency(ExperimentContext& ctx) {
  const auto& cfg = ctx.config();
  std::vector<TrajectoryExample> probe_set(
      ctx.val_set().begin(),
      ctx.val_set().begin() + std::min<std::size_t>(ctx.val_set().size(), 50));

  auto one_model = ctx.fresh_model("one_stage", cfg.latent_len, "tail", 1);
  auto dec_model = ctx.fresh_model("decoupled", cfg.latent_len, "tail", 1);
  auto one = measure_efficiency(one_model, probe_set);
  auto dec = measure_efficiency(dec_model, probe_set);

  json explicit_points = json::array();
  std::vector<double> ls_values, latencies;
  for (auto len : cfg.sweep_lengths) {
    auto exp_model = ctx.fresh_model("explicit_baseline", len, "tail", 1);
    auto rep = measure_efficiency(exp_model, probe_set);
    explicit_points.push_back(json{{"latent_len", len}, {"report", rep.to_json()}});
    ls_values.push_back(static_cast<double>(len));
    latencies.push_back(rep.latency_ms_median);
  }
  // least-squares slope of latency against latent length
  double slope = 0.0;
  if (ls_values.size() >= 2) {
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < ls_values.size(); ++i) {
      mx += ls_values[i];
      my += latencies[i];
    }
    mx /= static_cast<double>(ls_values.size());
    my /= static_cast<double>(ls_values.size());
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < ls_values.size(); ++i) {
      num += (ls_values[i] - mx) * (latencies[i] - my);
      den += (ls_values[i] - mx) * (ls_values[i] - mx);
    }
    slope = num / den;
  }

  json out{{"one_stage", one.to_json()},
           {"decoupled", dec.to_json()},
           {"latency_ratio_decoupled_over_one_stage", dec.latency_ms_median / one.latency_ms_median},
           {"explicit_baseline", explicit_points},
           {"explicit_latency_slope_ms_per_token", slope}};
  std::vector<std::string> volatile_keys{"latency_ms_median", "throughput_per_s", "peak_memory_bytes",
                                         "latency_ratio_decoupled_over_one_stage",
                                         "explicit_latency_slope_ms_per_token"};
  ctx.write_json("metrics/efficiency.json", out, volatile_keys);
  return out;
}

json run_gradcheck(ExperimentContext& ctx, std::int64_t prompt_len) {
  const auto& cfg = ctx.config();
  auto model = ctx.fresh_model("decoupled", cfg.latent_len, "tail", 7);
  Rng rng(derive_seed(cfg.seed, "gradcheck-tokens"));
  std::vector<int> tokens;
  for (std::int64_t i = 0; i < prompt_len; ++i) {
    tokens.push_back(static_cast<int>(rng.randint(0, background_vocab(cfg.data.vocab_size) - 1)));
  }
  auto t0 = std::chrono::steady_clock::now();
  auto rep = gradcheck_full_chain(model, tokens, 1);
  auto t1 = std::chrono::steady_clock::now();
  json groups;
  for (const auto& [name, err] : rep.max_rel_err) groups[name] = err;
  json out{{"groups", groups},
           {"worst_rel_err", rep.worst},
           {"pass", rep.pass},
           {"prompt_len", prompt_len},
           {"runtime_seconds", std::chrono::duration<double>(t1 - t0).count()}};
  ctx.write_json("metrics/gradcheck.json", out, {"runtime_seconds"});
  return out;
}

json run_export_features(ExperimentContext& ctx, const std::string& checkpoint) {
  JudgeModel model = checkpoint.empty()
                         ? ctx.load_cell_model(ctx.run_cell(ctx.config().mode, ctx.config().latent_len,
                                                            ctx.config().insertion, ctx.config().seed))
                         : JudgeModel::from_checkpoint(Checkpoint::load(checkpoint));
  std::string rel = "features/features.csv";
  export_features(model, ctx.val_set(), ctx.out_dir() + "/" + rel);
  ctx.add_manifest(rel, "text");
  auto [f, l] = load_feature_csv(ctx.out_dir() + "/" + rel);
  json out{{"path", rel},
           {"rows", f.size()},
           {"dim", f.empty() ? 0 : f[0].size()},
           {"linear_probe_accuracy", linear_probe_accuracy(f, l, ctx.config().seed)}};
  ctx.write_json("metrics/export_features.json", out);
  return out;
}

json run_eval(ExperimentContext& ctx, const std::string& checkpoint, const std::string& split) {
  const std::vector<TrajectoryExample>* examples = nullptr;
  if (split == "train") examples = &ctx.train_set();
  else if (split == "val") examples = &ctx.val_set();
  else if (split == "test") examples = &ctx.test_set();
  else throw UsageError("eval: unknown split '" + split + "'");
  JudgeModel model = checkpoint.empty()
                         ? ctx.load_cell_model(ctx.run_cell(ctx.config().mode, ctx.config().latent_len,
                                                            ctx.config().insertion, ctx.config().seed))
                         : JudgeModel::from_checkpoint(Checkpoint::load(checkpoint));
  auto metrics = evaluate(model, *examples, ctx.config().threshold);
  metrics.seed = ctx.config().seed;
  metrics.config_id = ctx.config().data.id();
  json out{{"split", split}, {"metrics", metrics.to_json()}};
  ctx.write_json("metrics/eval_" + split + ".json", out);
  return out;
}

// ---------------------------------------------------------------------------
// Theory verification bundle
// ---------------------------------------------------------------------------

json run_verify_theory(std::uint64_t seed, std::int64_t prop1_worlds, std::int64_t prop2_triples,
                       const std::string& world_file) {
  auto summary = theory::verify_all(seed, prop1_worlds, prop2_triples);
  json out = summary.to_json();

  // Lemma 1: causal accessibility of the readout position in both the tail
  // and the prefix-dec constructions
  json lemma = json::array();
  bool lemma_pass = true;
  for (auto [p_len, s_len] : {std::pair<std::int64_t, std::int64_t>{128, 16}, {12, 4}, {7, 1}}) {
    for (bool dec : {false, true}) {
      auto mask = AttentionMask::causal(p_len + s_len + (dec ? 1 : 0));
      auto rep = causal_accessibility_check(mask, p_len, s_len, dec);
      lemma_pass = lemma_pass && rep.pass;
      lemma.push_back(json{{"p_len", p_len},
                           {"s_len", s_len},
                           {"construction", dec ? "prefix_dec" : "tail"},
                           {"pass", rep.pass},
                           {"detail", rep.detail}});
    }
  }
  out["lemma1"] = lemma;
  out["lemma1_pass"] = lemma_pass;

  if (!world_file.empty()) {
    auto world = theory::DiscreteWorld::load(world_file);
    auto draft = theory::DraftMap::identity(world.n_x);
    out["world_file"] = json{{"path", world_file},
                             {"sufficiency", theory::check_sufficiency(world, draft).to_json()},
                             {"tv_bound", theory::tv_bound_check(world, draft).to_json()},
                             {"chain", theory::approximation_chain_report(world, draft).to_json()}};
  }
  out["all_pass"] = summary.all_pass && lemma_pass;
  return out;
}

// ---------------------------------------------------------------------------
// Reproduce
// ---------------------------------------------------------------------------

namespace {

void scrub_keys(json& j, const std::vector<std::string>& keys) {
  if (j.is_object()) {
    for (const auto& k : keys) j.erase(k);
    for (auto& [key, value] : j.items()) scrub_keys(value, keys);
  } else if (j.is_array()) {
    for (auto& v : j) scrub_keys(v, keys);
  }
}

bool files_equal(const std::string& a, const std::string& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  std::string ca((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string cb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  return ca == cb;
}

}  // namespace

int reproduce_run(const std::string& snapshot_dir, std::string* diff_summary) {
  std::string config_path = snapshot_dir + "/config.ini";
  std::string manifest_path = snapshot_dir + "/manifest.json";
  if (!fs::exists(config_path) || !fs::exists(manifest_path)) {
    throw ConfigError("reproduce: '" + snapshot_dir + "' does not contain config.ini and manifest.json");
  }
  json manifest = load_json_file(manifest_path);
  std::string command = manifest.at("command").get<std::string>();

  std::string replay_dir = snapshot_dir + "/.reproduce";
  fs::remove_all(replay_dir);
  RunConfig cfg = RunConfig::from_file(config_path);
  cfg.out_dir = replay_dir;
  cfg.resolve();

  auto ctx = ExperimentContext::prepare(cfg);
  if (command == "train") run_train(ctx);
  else if (command == "gen-data") { /* data files are written by prepare() */ }
  else if (command == "pretrain") { /* backbones are written by prepare() */ }
  else if (command == "sweep-length") run_sweep_length(ctx);
  else if (command == "sweep-position") run_sweep_position(ctx);
  else if (command == "ablate") run_ablation(ctx);
  else if (command == "generalize") run_generalization(ctx);
  else if (command == "export-features") run_export_features(ctx, "");
  else if (command == "bench-efficiency") run_efficiency(ctx);
  else if (command == "eval") run_eval(ctx, "", "test");
  else throw ConfigError("reproduce: unknown command '" + command + "' in manifest");
  ctx.write_manifest(command);

  std::string diffs;
  std::int64_t compared = 0;
  for (const auto& entry : manifest.at("entries")) {
    std::string rel = entry.at("path").get<std::string>();
    std::string kind = entry.at("kind").get<std::string>();
    std::vector<std::string> volatile_keys = entry.at("volatile_keys").get<std::vector<std::string>>();
    std::string a = snapshot_dir + "/" + rel;
    std::string b = replay_dir + "/" + rel;
    ++compared;
    if (!fs::exists(b)) {
      diffs += "missing in replay: " + rel + "\n";
      continue;
    }
    if (kind == "json") {
      json ja = load_json_file(a), jb = load_json_file(b);
      scrub_keys(ja, volatile_keys);
      scrub_keys(jb, volatile_keys);
      if (ja != jb) diffs += "json differs: " + rel + "\n";
    } else if (kind == "jsonl") {
      std::ifstream fa(a), fb(b);
      std::string la, lb;
      std::int64_t line = 0;
      bool diff = false;
      while (true) {
        bool ga = static_cast<bool>(std::getline(fa, la));
        bool gb = static_cast<bool>(std::getline(fb, lb));
        ++line;
        if (!ga && !gb) break;
        if (ga != gb || json::parse(la, nullptr, false) != json::parse(lb, nullptr, false)) {
          diff = true;
          break;
        }
      }
      if (diff) diffs += "jsonl differs: " + rel + " (line " + std::to_string(line) + ")\n";
    } else {  // binary, text
      if (!files_equal(a, b)) diffs += kind + " differs: " + rel + "\n";
    }
  }
  fs::remove_all(replay_dir);
  if (diff_summary) *diff_summary = diffs;
  if (compared == 0) {
    if (diff_summary) *diff_summary = "manifest declared no outputs";
    return 3;
  }
  return diffs.empty() ? 0 : 3;
}

}  // namespace lj
