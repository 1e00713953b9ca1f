#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "dlct/data.hpp"
#include "dlct/model.hpp"
#include "dlct/training.hpp"

namespace dlct {

// Resolved run options shared by the CLI and the python bindings. A run
// directory's manifest serializes this whole struct, so replaying a manifest
// reproduces the run.
struct RunConfig {
  std::string command;
  std::string dataset;
  std::string out;
  std::string checkpoint;
  uint64_t seed = 0;
  std::string preset = "desk";  // desk | reference
  std::string phase = "both";   // xe | scst | both

  // ablation flags
  std::string feature = "dual";  // dual | grid-only | region-only | concat
  bool no_lcca = false;
  bool cbg = false;
  bool no_cra = false;
  bool pe_only = false;

  // gen-data
  int n = 2000;
  std::string grid;  // "RxC", empty keeps the preset default
  std::string import_dir;

  // train overrides (negative keeps the preset value)
  int xe_epochs = -1;
  int scst_epochs = -1;
  int xe_batch = -1;
  int scst_batch = -1;
  int beam = -1;       // beam size for eval / scst
  int eval_limit = -1; // cap on per-epoch validation decodes
  bool resume = false;
  int overfit = 0;  // >0: single-batch overfit on the first N train examples
  int overfit_steps = 500;
  double overfit_lr = 1e-3;

  // eval / dump
  std::string split = "test";
  int example = 0;

  // score
  std::string candidates;
  std::string references;

  bool human = false;

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

// Maps the ablation flags onto the model wiring for a dataset.
ModelConfig resolve_model_config(const RunConfig& rc, const Dataset& ds);
TrainConfig resolve_train_config(const RunConfig& rc);

uint64_t fnv1a64_file(const std::string& path);

nlohmann::json run_gen_data(const RunConfig& rc);
nlohmann::json run_train(const RunConfig& rc);
nlohmann::json run_eval(const RunConfig& rc);
nlohmann::json run_score(const RunConfig& rc);
nlohmann::json run_dump_attention(const RunConfig& rc);

// Loads a trained model from a checkpoint directory, checking the dataset
// hash recorded at training time against the dataset's manifest.
struct LoadedModel {
  ModelConfig config;
  std::unique_ptr<DlctModel> model;
  nlohmann::json state;
};
LoadedModel load_checkpoint(const std::string& checkpoint_dir, const std::string& dataset_dir);

// Fraction of decoded colour words whose head-averaged last-layer decoder
// cross-attention argmax (over the region block) lands on the region whose
// colour is named. Probes up to n examples of the split.
double color_word_alignment_probe(const DlctModel& model, const Dataset& ds,
                                  const std::vector<TrainExample>& split, int n, int beam);

}  // namespace dlct
