#include "latentjudge/cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <iostream>

#include "latentjudge/config.hpp"
#include "latentjudge/experiments.hpp"
#include "latentjudge/theory.hpp"

using nlohmann::json;

namespace lj::cli {

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
};

void attach_common(CLI::App* sub, CommonArgs& common) {
  sub->add_option("--config", common.config_path, "run configuration file")->required();
  sub->add_option("--set", common.overrides, "override a key, e.g. --set train.steps=100");
}

ExperimentContext make_context(const CommonArgs& common) {
  RunConfig cfg = RunConfig::from_file(common.config_path, common.overrides);
  return ExperimentContext::prepare(cfg);
}

}  // namespace

int run(std::vector<std::string> args) {
  CLI::App app{"latent-draft trajectory safety judge"};
  app.require_subcommand(0, 1);

  CommonArgs common;
  std::string checkpoint;
  std::string split = "test";
  std::string world_file;
  std::string snapshot_dir;
  std::uint64_t theory_seed = 2026;
  std::int64_t prop1_worlds = 120;
  std::int64_t prop2_triples = 10000;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus and splits");
  attach_common(gen, common);
  auto* pre = app.add_subcommand("pretrain", "pretrain and freeze both backbones");
  attach_common(pre, common);
  auto* train = app.add_subcommand("train", "train one judge per the [train] section");
  attach_common(train, common);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a data split");
  attach_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "judge checkpoint (defaults to the configured cell)");
  eval->add_option("--split", split, "train | val | test");
  auto* swl = app.add_subcommand("sweep-length", "latent-length sweep");
  attach_common(swl, common);
  auto* swp = app.add_subcommand("sweep-position", "insertion-position sweep incl. the explicit baseline");
  attach_common(swp, common);
  auto* abl = app.add_subcommand("ablate", "module ablation: full vs no_reasoner vs no_extractor");
  attach_common(abl, common);
  auto* gen2 = app.add_subcommand("generalize", "train on the origin corpus, evaluate on a shifted one");
  attach_common(gen2, common);
  auto* exf = app.add_subcommand("export-features", "export terminal hidden states as CSV");
  attach_common(exf, common);
  exf->add_option("--checkpoint", checkpoint, "judge checkpoint (defaults to the configured cell)");
  auto* bench = app.add_subcommand("bench-efficiency", "latency / throughput / peak-memory benchmark");
  attach_common(bench, common);
  auto* verify = app.add_subcommand("verify-theory", "run the exact discrete-world verification suites");
  verify->add_option("--seed", theory_seed, "suite seed");
  verify->add_option("--prop1-worlds", prop1_worlds, "number of constructed sufficiency worlds");
  verify->add_option("--prop2-triples", prop2_triples, "number of TV-bound triples");
  verify->add_option("--world", world_file, "optional world spec file to check as well");
  auto* repro = app.add_subcommand("reproduce", "rerun a completed run directory and compare outputs");
  repro->add_option("dir", snapshot_dir, "run directory with config.ini and manifest.json")->required();

  if (args.empty()) {
    std::cout << app.help() << std::endl;
    return 1;
  }
  try {
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      return app.exit(e);
    }
    std::cerr << "error: " << e.what() << "\n" << app.help() << std::endl;
    return 1;
  }

  try {
    if (gen->parsed()) {
      auto ctx = make_context(common);
      ctx.write_manifest("gen-data");
      std::cout << "wrote " << ctx.train_set().size() << "/" << ctx.val_set().size() << "/"
                << ctx.test_set().size() << " train/val/test examples under " << ctx.out_dir() << "/data"
                << std::endl;
      return 0;
    }
    if (pre->parsed()) {
      auto ctx = make_context(common);
      ctx.write_manifest("pretrain");
      std::cout << "pretrained backbones saved to " << ctx.out_dir() << "/checkpoints/backbones.ckpt"
                << std::endl;
      return 0;
    }
    if (train->parsed()) {
      auto ctx = make_context(common);
      auto out = run_train(ctx);
      ctx.write_manifest("train");
      std::cout << "cell " << out.at("cell").at("cell_id").get<std::string>() << ": val accuracy "
                << out.at("cell").at("val_metrics").at("accuracy").get<double>() << std::endl;
      return 0;
    }
    if (eval->parsed()) {
      auto ctx = make_context(common);
      auto out = run_eval(ctx, checkpoint, split);
      ctx.write_manifest("eval");
      std::cout << "accuracy on " << split << ": " << out.at("metrics").at("accuracy").get<double>()
                << std::endl;
      return 0;
    }
    if (swl->parsed()) {
      auto ctx = make_context(common);
      auto out = run_sweep_length(ctx);
      ctx.write_manifest("sweep-length");
      std::cout << "sweep-length: " << out.at("cells").size() << " cells -> " << ctx.out_dir()
                << "/metrics/sweep_length.json" << std::endl;
      return out.value("partial", false) ? 3 : 0;
    }
    if (swp->parsed()) {
      auto ctx = make_context(common);
      auto out = run_sweep_position(ctx);
      ctx.write_manifest("sweep-position");
      std::cout << "sweep-position: " << out.at("cells").size() << " cells -> " << ctx.out_dir()
                << "/metrics/sweep_position.json" << std::endl;
      return out.value("partial", false) ? 3 : 0;
    }
    if (abl->parsed()) {
      auto ctx = make_context(common);
      auto out = run_ablation(ctx);
      ctx.write_manifest("ablate");
      std::cout << "ablation means:";
      for (auto& [mode, rep] : out.at("modes").items()) {
        std::cout << " " << mode << "=" << rep.at("mean_accuracy").get<double>();
      }
      std::cout << std::endl;
      return 0;
    }
    if (gen2->parsed()) {
      auto ctx = make_context(common);
      auto out = run_generalization(ctx);
      ctx.write_manifest("generalize");
      std::cout << "generalization: decoupled shifted mean "
                << out.at("decoupled").at("shifted_mean").get<double>() << ", one_stage shifted mean "
                << out.at("one_stage").at("shifted_mean").get<double>() << std::endl;
      return 0;
    }
    if (exf->parsed()) {
      auto ctx = make_context(common);
      auto out = run_export_features(ctx, checkpoint);
      ctx.write_manifest("export-features");
      std::cout << "exported " << out.at("rows").get<std::size_t>() << " feature rows (dim "
                << out.at("dim").get<std::size_t>() << ") to " << ctx.out_dir() << "/features/features.csv"
                << std::endl;
      return 0;
    }
    if (bench->parsed()) {
      auto ctx = make_context(common);
      auto out = run_efficiency(ctx);
      ctx.write_manifest("bench-efficiency");
      std::cout << "latency ratio decoupled/one_stage: "
                << out.at("latency_ratio_decoupled_over_one_stage").get<double>()
                << ", explicit slope ms/token: " << out.at("explicit_latency_slope_ms_per_token").get<double>()
                << std::endl;
      return 0;
    }
    if (verify->parsed()) {
      auto out = run_verify_theory(theory_seed, prop1_worlds, prop2_triples, world_file);
      auto line = [&](const std::string& name, bool ok, const std::string& detail) {
        std::cout << (ok ? "[PASS] " : "[FAIL] ") << name << ": " << detail << std::endl;
      };
      line("prop1 sufficiency", out.at("prop1_violations").get<std::int64_t>() == 0,
           std::to_string(out.at("prop1_worlds").get<std::int64_t>()) + " worlds, " +
               std::to_string(out.at("prop1_violations").get<std::int64_t>()) + " violations");
      line("prop2 tv-bound", out.at("prop2_violations").get<std::int64_t>() == 0,
           std::to_string(out.at("prop2_triples").get<std::int64_t>()) + " triples, " +
               std::to_string(out.at("prop2_violations").get<std::int64_t>()) + " violations");
      line("risk decomposition", out.at("decomposition_violations").get<std::int64_t>() == 0,
           std::to_string(out.at("decomposition_pairs").get<std::int64_t>()) + " pairs, max gap " +
               std::to_string(out.at("decomposition_max_gap").get<double>()));
      line("ib curve", out.at("ib_monotonicity_violations").get<std::int64_t>() == 0,
           std::to_string(out.at("ib_points").get<std::int64_t>()) + " points");
      line("approximation chain", out.at("chain_violations").get<std::int64_t>() == 0,
           std::to_string(out.at("chain_checks").get<std::int64_t>()) + " checks");
      line("lemma1 causal accessibility", out.at("lemma1_pass").get<bool>(),
           "tail and prefix_dec constructions");
      bool all = out.at("all_pass").get<bool>();
      std::cout << (all ? "verify-theory: all suites passed" : "verify-theory: violations found") << std::endl;
      return all ? 0 : 3;
    }
    if (repro->parsed()) {
      std::string diffs;
      int code = reproduce_run(snapshot_dir, &diffs);
      if (code == 0) {
        std::cout << "reproduce: outputs identical" << std::endl;
      } else {
        std::cout << "reproduce: outputs differ\n" << diffs << std::endl;
      }
      return code;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
  }

  std::cout << app.help() << std::endl;
  return 1;
}

}  // namespace lj::cli
