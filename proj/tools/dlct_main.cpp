#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "dlct/run.hpp"

using dlct::RunConfig;
using nlohmann::json;

namespace {

void print_result(const json& result, bool human) {
  if (human) {
    std::cout << result.dump(2) << '\n';
  } else {
    std::cout << result.dump() << '\n';
  }
}

// Global options shared by every subcommand; --config preloads a run
// manifest and explicit flags then override it.
struct Common {
  std::string config_file;
  uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  bool human = false;
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("--config", common.config_file, "run-config JSON file (a run manifest replays a run)");
  cmd->add_option("--seed", common.seed, "random seed")->each([&common](const std::string&) {
    common.seed_set = true;
  });
  cmd->add_option("--out", common.out, "output directory");
  cmd->add_flag("--human", common.human, "pretty-print output");
}

RunConfig base_config(const Common& common, const std::string& command) {
  RunConfig rc;
  if (!common.config_file.empty()) {
    std::ifstream is(common.config_file);
    if (!is) throw std::runtime_error("cannot open config file: " + common.config_file);
    rc = RunConfig::from_json(json::parse(is));
  }
  rc.command = command;
  if (common.seed_set) rc.seed = common.seed;
  if (!common.out.empty()) rc.out = common.out;
  rc.human = common.human || rc.human;
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-level collaborative transformer: synthetic captioning workbench"};
  app.require_subcommand(1);

  Common common;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate (or import) a dataset");
  add_common(gen, common);
  int gen_n = -1;
  std::string gen_grid, gen_import;
  gen->add_option("--n", gen_n, "number of examples");
  gen->add_option("--grid", gen_grid, "grid layout RxC");
  gen->add_option("--import-dir", gen_import, "directory of pre-extracted DLT1 features to convert");

  // train
  auto* train = app.add_subcommand("train", "train a model");
  add_common(train, common);
  std::string tr_dataset, tr_phase, tr_feature;
  std::vector<std::string> tr_ablate;
  std::string tr_preset;
  int tr_xe_epochs = -2, tr_scst_epochs = -2, tr_xe_batch = -2, tr_scst_batch = -2, tr_beam = -2,
      tr_eval_limit = -2, tr_overfit = -2, tr_overfit_steps = -2;
  double tr_overfit_lr = -1.0;
  bool tr_resume = false;
  train->add_option("--dataset", tr_dataset, "dataset directory");
  train->add_option("--phase", tr_phase, "xe | scst | both");
  train->add_option("--preset", tr_preset, "desk | reference");
  train->add_option("--ablate", tr_ablate,
                    "ablations: no-lcca, cbg, grid-only, region-only, concat-baseline, no-cra, pe-only")
      ->delimiter(',');
  train->add_option("--xe-epochs", tr_xe_epochs, "cross-entropy epochs");
  train->add_option("--scst-epochs", tr_scst_epochs, "self-critical epochs");
  train->add_option("--xe-batch", tr_xe_batch, "cross-entropy batch size");
  train->add_option("--scst-batch", tr_scst_batch, "self-critical batch size");
  train->add_option("--beam", tr_beam, "beam size for decoding and rewards");
  train->add_option("--eval-limit", tr_eval_limit, "cap per-epoch validation decodes");
  train->add_flag("--resume", tr_resume, "resume from the latest checkpoint in --out");
  train->add_option("--overfit", tr_overfit, "single-batch overfit on the first N train examples");
  train->add_option("--overfit-steps", tr_overfit_steps, "overfit step budget");
  train->add_option("--overfit-lr", tr_overfit_lr, "overfit learning rate");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_common(eval, common);
  std::string ev_dataset, ev_checkpoint, ev_split;
  int ev_beam = -2, ev_limit = -2;
  eval->add_option("--dataset", ev_dataset, "dataset directory");
  eval->add_option("--checkpoint", ev_checkpoint, "run directory or checkpoint directory");
  eval->add_option("--split", ev_split, "train | val | test");
  eval->add_option("--beam", ev_beam, "beam size");
  eval->add_option("--limit", ev_limit, "evaluate only the first N examples");

  // score
  auto* score = app.add_subcommand("score", "score candidate captions against references");
  add_common(score, common);
  std::string sc_cands, sc_refs;
  score->add_option("--candidates", sc_cands, "candidate file, one caption per line");
  score->add_option("--references", sc_refs, "reference file, tab-separated multi-references per line");

  // dump-attention
  auto* dump = app.add_subcommand("dump-attention", "dump attention weights for one example");
  add_common(dump, common);
  std::string du_dataset, du_checkpoint, du_split;
  int du_example = -1, du_beam = -2;
  dump->add_option("--dataset", du_dataset, "dataset directory");
  dump->add_option("--checkpoint", du_checkpoint, "run directory or checkpoint directory");
  dump->add_option("--split", du_split, "train | val | test");
  dump->add_option("--example", du_example, "example index within the split");
  dump->add_option("--beam", du_beam, "beam size for caption generation");

  try {
    app.parse(argc, argv);

    if (gen->parsed()) {
      RunConfig rc = base_config(common, "gen-data");
      if (gen_n >= 0) rc.n = gen_n;
      if (!gen_grid.empty()) rc.grid = gen_grid;
      if (!gen_import.empty()) rc.import_dir = gen_import;
      print_result(dlct::run_gen_data(rc), rc.human);
      return 0;
    }
    if (train->parsed()) {
      RunConfig rc = base_config(common, "train");
      if (!tr_dataset.empty()) rc.dataset = tr_dataset;
      if (!tr_phase.empty()) rc.phase = tr_phase;
      if (!tr_preset.empty()) rc.preset = tr_preset;
      for (const std::string& a : tr_ablate) {
        if (a == "no-lcca") rc.no_lcca = true;
        else if (a == "cbg") rc.cbg = true;
        else if (a == "grid-only") rc.feature = "grid-only";
        else if (a == "region-only") rc.feature = "region-only";
        else if (a == "concat-baseline") rc.feature = "concat";
        else if (a == "no-cra") rc.no_cra = true;
        else if (a == "pe-only") rc.pe_only = true;
        else throw std::invalid_argument("unknown ablation flag: " + a);
      }
      if (tr_xe_epochs >= -1 && tr_xe_epochs != -2) rc.xe_epochs = tr_xe_epochs;
      if (tr_scst_epochs != -2) rc.scst_epochs = tr_scst_epochs;
      if (tr_xe_batch != -2) rc.xe_batch = tr_xe_batch;
      if (tr_scst_batch != -2) rc.scst_batch = tr_scst_batch;
      if (tr_beam != -2) rc.beam = tr_beam;
      if (tr_eval_limit != -2) rc.eval_limit = tr_eval_limit;
      if (tr_resume) rc.resume = true;
      if (tr_overfit != -2) rc.overfit = tr_overfit;
      if (tr_overfit_steps != -2) rc.overfit_steps = tr_overfit_steps;
      if (tr_overfit_lr >= 0.0) rc.overfit_lr = tr_overfit_lr;
      print_result(dlct::run_train(rc), rc.human);
      return 0;
    }
    if (eval->parsed()) {
      RunConfig rc = base_config(common, "eval");
      if (!ev_dataset.empty()) rc.dataset = ev_dataset;
      if (!ev_checkpoint.empty()) rc.checkpoint = ev_checkpoint;
      if (!ev_split.empty()) rc.split = ev_split;
      if (ev_beam != -2) rc.beam = ev_beam;
      if (ev_limit != -2) rc.eval_limit = ev_limit;
      print_result(dlct::run_eval(rc), rc.human);
      return 0;
    }
    if (score->parsed()) {
      RunConfig rc = base_config(common, "score");
      if (!sc_cands.empty()) rc.candidates = sc_cands;
      if (!sc_refs.empty()) rc.references = sc_refs;
      json result = dlct::run_score(rc);
      if (rc.human) {
        print_result(result, true);
      } else {
        // line-delimited: one record per candidate, then the corpus summary
        for (const auto& line : result["per_line"]) std::cout << line.dump() << '\n';
        std::cout << json{{"corpus", result["corpus"]}, {"n", result["n"]}}.dump() << '\n';
      }
      return 0;
    }
    if (dump->parsed()) {
      RunConfig rc = base_config(common, "dump-attention");
      if (!du_dataset.empty()) rc.dataset = du_dataset;
      if (!du_checkpoint.empty()) rc.checkpoint = du_checkpoint;
      if (!du_split.empty()) rc.split = du_split;
      if (du_example >= 0) rc.example = du_example;
      if (du_beam != -2) rc.beam = du_beam;
      print_result(dlct::run_dump_attention(rc), rc.human);
      return 0;
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cout << json{{"error", e.what()}}.dump() << '\n';
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
