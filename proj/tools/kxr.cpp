// kxr command-line entry point: generate, ingest, split, train, predict,
// evaluate and report, wired to the library's pipeline layer.
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kxr/pipeline.hpp"

namespace {

struct GlobalArgs {
  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;
  bool deterministic = false;
  int workers = 1;
};

kxr::PipelineConfig make_config(const GlobalArgs& g) {
  kxr::PipelineConfig cfg;
  if (!g.config_path.empty()) cfg = kxr::load_pipeline_config(g.config_path);
  if (g.seed_set) cfg.seed = g.seed;
  if (g.deterministic) cfg.deterministic = true;
  // The reference implementation executes serially either way; the flag is
  // accepted for interface stability and recorded in run manifests.
  cfg.workers = cfg.deterministic ? 1 : std::max(1, g.workers);
  return cfg;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kxr: knee radiograph analysis pipeline"};
  app.require_subcommand(1);

  GlobalArgs g;
  app.add_option("--config", g.config_path, "pipeline configuration file (JSON)");
  auto* seed_opt = app.add_option("--seed", g.seed, "global seed (overrides the config)");
  app.add_flag("--deterministic", g.deterministic, "serial, bit-reproducible execution");
  app.add_option("--workers", g.workers, "worker count (ignored in deterministic mode)");

  auto* gen = app.add_subcommand("gen-phantoms", "generate a synthetic labeled dataset");
  std::string gen_out;
  int gen_count = 0;
  std::string gen_dist;
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--count", gen_count, "number of scans to generate")->required();
  gen->add_option("--dist", gen_dist, "phantom distribution file (JSON)");

  auto* ingest = app.add_subcommand("ingest", "validate a dataset manifest");
  std::string ingest_manifest;
  bool ingest_check = false;
  ingest->add_option("--manifest", ingest_manifest, "dataset manifest (JSONL)")->required();
  ingest->add_flag("--check-images", ingest_check, "also load and validate images and labels");

  auto* split = app.add_subcommand("split", "stratified train/trial split");
  std::string split_manifest, split_out, split_strata;
  double split_fraction = -1;
  split->add_option("--manifest", split_manifest, "dataset manifest (JSONL)")->required();
  split->add_option("--out", split_out, "output directory for split manifests")->required();
  split->add_option("--fraction", split_fraction, "held-out trial fraction");
  split->add_option("--strata", split_strata, "comma-separated stratification keys");

  auto* train = app.add_subcommand("train", "train one pipeline component");
  std::string train_component, train_train, train_val, train_out;
  int train_epochs = -1;
  train->add_option("component", train_component,
                    "pathology name, \"grading\", or \"gate\"")->required();
  train->add_option("--train", train_train, "training manifest (JSONL)");
  train->add_option("--val", train_val, "validation manifest (JSONL)");
  train->add_option("--out", train_out, "directory checkpoints are written to")->required();
  train->add_option("--epochs", train_epochs, "training epochs");

  auto* predict = app.add_subcommand("predict", "run the full cascade over a manifest");
  std::string pred_manifest, pred_models, pred_out;
  predict->add_option("--manifest", pred_manifest, "dataset manifest (JSONL)")->required();
  predict->add_option("--models", pred_models, "directory holding the checkpoints")->required();
  predict->add_option("--out", pred_out, "findings output file (JSONL)")->required();

  auto* evaluate = app.add_subcommand("evaluate", "score findings against ground truth");
  std::string eval_findings, eval_manifest, eval_fixture, eval_out;
  evaluate->add_option("--findings", eval_findings, "findings file from `kxr predict`");
  evaluate->add_option("--manifest", eval_manifest, "labeled dataset manifest (JSONL)");
  evaluate->add_option("--fixture", eval_fixture, "pre-tallied fixture file (JSON)");
  evaluate->add_option("--out", eval_out, "output directory for tables")->required();

  auto* report = app.add_subcommand("report", "render summary and plots for an evaluation");
  std::string report_eval, report_out;
  report->add_option("--eval", report_eval, "directory holding eval.json")->required();
  report->add_option("--out", report_out, "output directory for summary and plots")->required();

  // Let global flags (--seed, --config, ...) appear after the verb as well.
  for (CLI::App* sub : {gen, ingest, split, train, predict, evaluate, report})
    sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    g.seed_set = seed_opt->count() > 0;
    kxr::PipelineConfig cfg = make_config(g);

    if (gen->parsed()) {
      if (!gen_dist.empty())
        cfg.phantoms = kxr::phantom_distribution_from_json(kxr::read_json_file(gen_dist));
      const auto res = kxr::cmd_gen_phantoms(cfg, gen_out, gen_count, cfg.seed);
      std::cout << kxr::json{{"manifest", res.manifest_path}, {"count", res.count}}.dump()
                << "\n";
    } else if (ingest->parsed()) {
      const auto summary = kxr::cmd_ingest(ingest_manifest, ingest_check);
      std::cout << kxr::to_json(summary).dump(1) << "\n";
      if (!summary.issues.empty()) return 3;
    } else if (split->parsed()) {
      if (split_fraction >= 0) cfg.split.trial_fraction = split_fraction;
      if (!split_strata.empty()) cfg.split.strata = split_csv(split_strata);
      const auto res = kxr::cmd_split(cfg, split_manifest, split_out);
      std::cout << kxr::json{{"train", res.train_path},
                             {"train_count", res.train_count},
                             {"trial", res.trial_path},
                             {"trial_count", res.trial_count}}
                       .dump()
                << "\n";
    } else if (train->parsed()) {
      const int epochs = train_epochs > 0 ? train_epochs : cfg.epochs;
      if (train_component != "gate" && train_train.empty())
        throw kxr::UsageError("train: --train is required for \"" + train_component + "\"");
      const auto res = kxr::cmd_train(cfg, train_component, train_train, train_val, train_out,
                                      epochs, cfg.seed);
      std::cout << kxr::json{{"component", res.component},
                             {"checkpoints", res.checkpoints},
                             {"history", res.history_path}}
                       .dump(1)
                << "\n";
    } else if (predict->parsed()) {
      const auto res = kxr::cmd_predict(cfg, pred_manifest, pred_models, pred_out);
      std::cout << kxr::json{{"findings", res.findings_path},
                             {"total", res.total},
                             {"accepted", res.accepted},
                             {"rejected", res.rejected}}
                       .dump()
                << "\n";
    } else if (evaluate->parsed()) {
      const bool fixture_mode = !eval_fixture.empty();
      const bool records_mode = !eval_findings.empty() || !eval_manifest.empty();
      if (fixture_mode == records_mode)
        throw kxr::UsageError(
            "evaluate: pass either --fixture or both --findings and --manifest");
      if (records_mode && (eval_findings.empty() || eval_manifest.empty()))
        throw kxr::UsageError("evaluate: --findings and --manifest go together");
      const auto art = fixture_mode
                           ? kxr::cmd_evaluate_fixture(cfg, eval_fixture, eval_out)
                           : kxr::cmd_evaluate(cfg, eval_findings, eval_manifest, eval_out);
      std::cout << kxr::render_tables(art.report);
    } else if (report->parsed()) {
      const auto res = kxr::cmd_report(cfg, report_eval, report_out);
      std::ifstream in(res.summary_path, std::ios::binary);
      std::cout << in.rdbuf();
    }
  } catch (const kxr::UsageError& e) {
    std::cerr << "kxr: " << e.what() << "\n";
    return 2;
  } catch (const kxr::IntegrityError& e) {
    std::cerr << "kxr: " << e.what() << "\n";
    return 3;
  } catch (const kxr::IoError& e) {
    std::cerr << "kxr: " << e.what() << "\n";
    return 4;
  } catch (const kxr::json::exception& e) {
    std::cerr << "kxr: malformed data: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "kxr: internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
