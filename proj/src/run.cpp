#include "dlct/run.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "dlct/ops.hpp"
#include "dlct/tensor_io.hpp"

namespace dlct {

namespace fs = std::filesystem;
using nlohmann::json;

void RunConfig::validate() const {
  if (feature != "dual" && feature != "grid-only" && feature != "region-only" && feature != "concat") {
    throw std::invalid_argument("unknown feature ablation: " + feature);
  }
  if (cbg && feature != "dual") throw std::invalid_argument("cbg requires the dual feature mode");
  if (cbg && no_lcca) throw std::invalid_argument("cbg and no-lcca are mutually exclusive");
  if (no_cra && pe_only) throw std::invalid_argument("no-cra and pe-only are mutually exclusive");
  if (phase != "xe" && phase != "scst" && phase != "both") {
    throw std::invalid_argument("phase must be xe, scst or both");
  }
  if (preset != "desk" && preset != "reference") throw std::invalid_argument("unknown preset: " + preset);
  if (split != "train" && split != "val" && split != "test") {
    throw std::invalid_argument("split must be train, val or test");
  }
}

json RunConfig::to_json() const {
  json j;
  j["command"] = command;
  j["dataset"] = dataset;
  j["out"] = out;
  j["checkpoint"] = checkpoint;
  j["seed"] = seed;
  j["preset"] = preset;
  j["phase"] = phase;
  j["feature"] = feature;
  j["no_lcca"] = no_lcca;
  j["cbg"] = cbg;
  j["no_cra"] = no_cra;
  j["pe_only"] = pe_only;
  j["n"] = n;
  j["grid"] = grid;
  j["import_dir"] = import_dir;
  j["xe_epochs"] = xe_epochs;
  j["scst_epochs"] = scst_epochs;
  j["xe_batch"] = xe_batch;
  j["scst_batch"] = scst_batch;
  j["beam"] = beam;
  j["eval_limit"] = eval_limit;
  j["resume"] = resume;
  j["overfit"] = overfit;
  j["overfit_steps"] = overfit_steps;
  j["overfit_lr"] = overfit_lr;
  j["split"] = split;
  j["example"] = example;
  j["candidates"] = candidates;
  j["references"] = references;
  j["human"] = human;
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig rc;
  rc.command = j.value("command", "");
  rc.dataset = j.value("dataset", "");
  rc.out = j.value("out", "");
  rc.checkpoint = j.value("checkpoint", "");
  rc.seed = j.value("seed", uint64_t{0});
  rc.preset = j.value("preset", "desk");
  rc.phase = j.value("phase", "both");
  rc.feature = j.value("feature", "dual");
  rc.no_lcca = j.value("no_lcca", false);
  rc.cbg = j.value("cbg", false);
  rc.no_cra = j.value("no_cra", false);
  rc.pe_only = j.value("pe_only", false);
  rc.n = j.value("n", 2000);
  rc.grid = j.value("grid", "");
  rc.import_dir = j.value("import_dir", "");
  rc.xe_epochs = j.value("xe_epochs", -1);
  rc.scst_epochs = j.value("scst_epochs", -1);
  rc.xe_batch = j.value("xe_batch", -1);
  rc.scst_batch = j.value("scst_batch", -1);
  rc.beam = j.value("beam", -1);
  rc.eval_limit = j.value("eval_limit", -1);
  rc.resume = j.value("resume", false);
  rc.overfit = j.value("overfit", 0);
  rc.overfit_steps = j.value("overfit_steps", 500);
  rc.overfit_lr = j.value("overfit_lr", 1e-3);
  rc.split = j.value("split", "test");
  rc.example = j.value("example", 0);
  rc.candidates = j.value("candidates", "");
  rc.references = j.value("references", "");
  rc.human = j.value("human", false);
  return rc;
}

ModelConfig resolve_model_config(const RunConfig& rc, const Dataset& ds) {
  rc.validate();
  ModelConfig cfg = rc.preset == "reference" ? ModelConfig::reference(ds.vocab.size())
                                             : ModelConfig::desk(ds.vocab.size());
  cfg.layout = ds.layout;
  cfg.d_region = ds.d_region;
  cfg.d_grid = ds.d_grid;
  cfg.max_len = std::max(ds.max_caption_len() + 2, 8);
  cfg.feature_mode = feature_mode_from(rc.feature);
  cfg.attention_mode =
      rc.no_cra ? AttentionMode::vanilla : (rc.pe_only ? AttentionMode::pe_only : AttentionMode::cra);
  if (cfg.feature_mode != FeatureMode::dual) {
    cfg.graph_mode = GraphMode::none;
  } else {
    cfg.graph_mode = rc.no_lcca ? GraphMode::none : (rc.cbg ? GraphMode::complete : GraphMode::aligned);
  }
  cfg.validate();
  return cfg;
}

TrainConfig resolve_train_config(const RunConfig& rc) {
  TrainConfig cfg = rc.preset == "reference" ? TrainConfig::reference() : TrainConfig::desk();
  if (rc.xe_epochs >= 0) cfg.xe_epochs = rc.xe_epochs;
  if (rc.scst_epochs >= 0) cfg.scst_epochs = rc.scst_epochs;
  if (rc.xe_batch > 0) cfg.xe_batch = rc.xe_batch;
  if (rc.scst_batch > 0) cfg.scst_batch = rc.scst_batch;
  if (rc.beam > 0) {
    cfg.beam_size = rc.beam;
    cfg.eval_beam = rc.beam;
  }
  return cfg;
}

uint64_t fnv1a64_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot hash missing file: " + path);
  uint64_t h = 1469598103934665603ull;
  char buf[4096];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!is) break;
  }
  return h;
}

namespace {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

GridLayout parse_grid(const std::string& text) {
  const size_t x = text.find('x');
  if (x == std::string::npos) throw std::invalid_argument("grid must look like RxC, got " + text);
  return GridLayout(std::stoi(text.substr(0, x)), std::stoi(text.substr(x + 1)));
}

const std::vector<TrainExample>& pick_split(const Dataset& ds, const std::string& name) {
  if (name == "train") return ds.train;
  if (name == "val") return ds.val;
  return ds.test;
}

int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

struct EvalResult {
  double bleu1 = 0.0;
  double bleu4 = 0.0;
  double cider = 0.0;
  double mean_top_logp = 0.0;
  int n = 0;
};

// Beam-decodes up to `limit` examples of a split (0 = all) and scores the
// candidates. Deterministic regardless of thread count: outputs land in
// index-addressed slots.
EvalResult evaluate_split(const DlctModel& model, const std::vector<TrainExample>& split, int beam,
                          int limit) {
  EvalResult res;
  const int n = limit > 0 ? std::min<int>(limit, static_cast<int>(split.size()))
                          : static_cast<int>(split.size());
  if (n == 0) return res;
  std::vector<TokenSeq> candidates(static_cast<size_t>(n));
  std::vector<double> top_logp(static_cast<size_t>(n));

  const int threads = std::min(worker_threads(), n);
  auto decode_range = [&](int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      const TrainExample& ex = split[static_cast<size_t>(i)];
      ExampleGeometry geom = model.build_geometry(ex.features);
      DecodedBeam db = beam_search(model, ex.features, geom, beam);
      candidates[static_cast<size_t>(i)] = strip_eos(db.sequences[0]);
      top_logp[static_cast<size_t>(i)] = db.log_probs[0];
    }
  };
  if (threads <= 1) {
    decode_range(0, n);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (n + threads - 1) / threads;
    for (int w = 0; w < threads; ++w) {
      pool.emplace_back(decode_range, w * chunk, std::min(n, (w + 1) * chunk));
    }
    for (auto& th : pool) th.join();
  }

  std::vector<std::vector<TokenSeq>> refs;
  refs.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) refs.push_back(split[static_cast<size_t>(i)].captions);
  const CorpusStats stats = CorpusStats::build(references_of(split));
  double cider_sum = 0.0;
  double logp_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    cider_sum += cider_d(candidates[static_cast<size_t>(i)], refs[static_cast<size_t>(i)], stats);
    logp_sum += top_logp[static_cast<size_t>(i)];
  }
  res.bleu1 = corpus_bleu(candidates, refs, 1);
  res.bleu4 = corpus_bleu(candidates, refs, 4);
  res.cider = cider_sum / n;
  res.mean_top_logp = logp_sum / n;
  res.n = n;
  return res;
}

struct Trainer {
  RunConfig rc;
  Dataset ds;
  ModelConfig mcfg;
  TrainConfig tcfg;
  std::unique_ptr<DlctModel> model;
  std::unique_ptr<AdamOptimizer> adam;
  std::unique_ptr<CorpusStats> train_stats;
  fs::path out;
  uint64_t dataset_hash = 0;
  int64_t global_step = 0;
  std::string phase = "xe";
  int next_epoch = 0;

  void write_metric(json line) {
    std::ofstream os(out / "metrics.jsonl", std::ios::app);
    os << line.dump() << '\n';
  }

  void quantize_state() {
    for (const auto& [_, entry] : model->params().entries()) {
      Tensor t = entry;
      quantize_f32_inplace(t);
    }
    adam->quantize_f32();
  }

  void save_checkpoint(const std::string& tag) {
    const fs::path dir = out / "checkpoints" / tag;
    fs::create_directories(dir);
    model->save_params((dir / "params").string());
    adam->save((dir / "adam").string());
    json state;
    state["phase"] = phase;
    state["next_epoch"] = next_epoch;
    state["global_step"] = global_step;
    state["rng"] = Rng(rc.seed).serialize();
    state["model_config"] = mcfg.canonical_string();
    state["dataset_hash"] = hex64(dataset_hash);
    state["run_seed"] = rc.seed;
    std::ofstream(dir / "state.json") << state.dump(2) << '\n';
    std::ofstream(out / "latest.json") << json{{"checkpoint", (fs::path("checkpoints") / tag).string()}}.dump()
                                       << '\n';
    // training continues from exactly what a resume would load
    quantize_state();
  }

  bool try_resume() {
    const fs::path latest = out / "latest.json";
    if (!fs::exists(latest)) return false;
    json pointer = json::parse(std::ifstream(latest));
    const fs::path dir = out / pointer["checkpoint"].get<std::string>();
    json state = json::parse(std::ifstream(dir / "state.json"));
    if (state["model_config"].get<std::string>() != mcfg.canonical_string()) {
      throw std::runtime_error("resume: checkpoint model config does not match this run");
    }
    if (state["dataset_hash"].get<std::string>() != hex64(dataset_hash)) {
      throw std::runtime_error("resume: checkpoint was trained on a different dataset (manifest hash mismatch)");
    }
    model->load_params((dir / "params").string());
    adam->load((dir / "adam").string());
    quantize_state();
    phase = state["phase"].get<std::string>();
    next_epoch = state["next_epoch"].get<int>();
    global_step = state["global_step"].get<int64_t>();
    return true;
  }

  std::vector<int> epoch_order(int epoch, size_t count) {
    std::vector<int> idx(count);
    for (size_t i = 0; i < count; ++i) idx[i] = static_cast<int>(i);
    Rng shuffle_rng = Rng(rc.seed).derive(0xE90C0000ull + static_cast<uint64_t>(epoch));
    for (size_t i = count; i > 1; --i) {
      const size_t j = static_cast<size_t>(shuffle_rng.uniform_int(static_cast<int64_t>(i)));
      std::swap(idx[i - 1], idx[j]);
    }
    return idx;
  }

  double validation_loss() {
    NoGrad ng;
    double total = 0.0;
    for (const TrainExample& ex : ds.val) {
      ExampleGeometry geom = model->build_geometry(ex.features);
      Tensor enc = model->encode(ex.features, geom);
      const TokenSeq& ref = ex.captions[0];
      TokenSeq input = {Vocab::kBos};
      input.insert(input.end(), ref.begin(), ref.end());
      TokenSeq target = ref;
      target.push_back(Vocab::kEos);
      total += xe_loss(model->decode(enc, input), target).item();
    }
    return ds.val.empty() ? 0.0 : total / static_cast<double>(ds.val.size());
  }

  json epoch_eval(int epoch, const char* phase_tag, double train_loss, double lr, int64_t wall_ms,
                  double reward = std::numeric_limits<double>::quiet_NaN()) {
    const double val_loss = validation_loss();
    const EvalResult ev =
        evaluate_split(*model, ds.val, tcfg.eval_beam, rc.eval_limit > 0 ? rc.eval_limit : 0);
    json line;
    line["epoch"] = epoch;
    line["phase"] = phase_tag;
    line["loss"] = val_loss;
    line["train_loss"] = train_loss;
    line["cider_d"] = ev.cider;
    line["bleu4"] = ev.bleu4;
    line["bleu1"] = ev.bleu1;
    line["lr"] = lr;
    line["wall_ms"] = wall_ms;
    if (!std::isnan(reward)) line["train_reward"] = reward;
    write_metric(line);
    return line;
  }

  double xe_epoch(int epoch) {
    const auto order = epoch_order(epoch, ds.train.size());
    tcfg.steps_per_epoch = std::max<int>(1, (static_cast<int>(order.size()) + tcfg.xe_batch - 1) / tcfg.xe_batch);
    double loss_sum = 0.0;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(tcfg.xe_batch)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(tcfg.xe_batch));
      const std::vector<int> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      auto per_example = [&](DlctModel& m, int idx) {
        const TrainExample& ex = ds.train[static_cast<size_t>(idx)];
        const TokenSeq& ref = ex.captions[(static_cast<size_t>(epoch) + static_cast<size_t>(idx)) %
                                          ex.captions.size()];
        Rng drop = Rng(rc.seed).derive(0xD509ull ^ (static_cast<uint64_t>(epoch) << 32) ^
                                       static_cast<uint64_t>(idx));
        ForwardOptions fo;
        fo.training = true;
        fo.dropout_rng = &drop;
        Tape tape;
        ExampleGeometry geom = m.build_geometry(ex.features);
        Tensor enc = m.encode(ex.features, geom, fo);
        TokenSeq input = {Vocab::kBos};
        input.insert(input.end(), ref.begin(), ref.end());
        TokenSeq target = ref;
        target.push_back(Vocab::kEos);
        Tensor loss = xe_loss(m.decode(enc, input, fo), target);
        tape.backward(scale(loss, inv_b));
        return loss.item();
      };
      const double mean_loss = accumulate_batch(*model, batch, per_example);
      adam->step(lr_schedule(epoch, batches, tcfg));
      loss_sum += mean_loss;
      ++batches;
      ++global_step;
    }
    return batches > 0 ? loss_sum / batches : 0.0;
  }

  std::pair<double, double> scst_epoch(int epoch) {
    const auto order = epoch_order(1000000 + epoch, ds.train.size());
    std::vector<double> rewards(ds.train.size(), 0.0);
    double loss_sum = 0.0;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(tcfg.scst_batch)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(tcfg.scst_batch));
      const std::vector<int> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      auto per_example = [&](DlctModel& m, int idx) {
        const TrainExample& ex = ds.train[static_cast<size_t>(idx)];
        ExampleGeometry geom = m.build_geometry(ex.features);
        auto reward_fn = [&](const TokenSeq& caption) { return cider_d(caption, ex.captions, *train_stats); };
        const ScstStepResult r = scst_step(m, ex.features, geom, reward_fn, tcfg.beam_size, inv_b);
        rewards[static_cast<size_t>(idx)] = r.mean_reward;
        return r.loss;
      };
      const double mean_loss = accumulate_batch(*model, batch, per_example);
      adam->step(tcfg.scst_rate, tcfg.scst_clip_norm);
      loss_sum += mean_loss;
      ++batches;
      ++global_step;
    }
    double reward_sum = 0.0;
    for (double r : rewards) reward_sum += r;
    return {batches > 0 ? loss_sum / batches : 0.0,
            ds.train.empty() ? 0.0 : reward_sum / static_cast<double>(ds.train.size())};
  }

  json overfit_run() {
    const int count = std::min<int>(rc.overfit, static_cast<int>(ds.train.size()));
    std::vector<int> batch(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) batch[static_cast<size_t>(i)] = i;
    tcfg.steps_per_epoch = 1;
    const double inv_b = 1.0 / static_cast<double>(count);
    double final_loss = 0.0;
    double min_loss = std::numeric_limits<double>::infinity();
    int first_below = -1;
    const int64_t t0 = now_ms();
    for (int step = 0; step < rc.overfit_steps; ++step) {
      auto per_example = [&](DlctModel& m, int idx) {
        const TrainExample& ex = ds.train[static_cast<size_t>(idx)];
        Tape tape;
        ExampleGeometry geom = m.build_geometry(ex.features);
        Tensor enc = m.encode(ex.features, geom);
        const TokenSeq& ref = ex.captions[0];
        TokenSeq input = {Vocab::kBos};
        input.insert(input.end(), ref.begin(), ref.end());
        TokenSeq target = ref;
        target.push_back(Vocab::kEos);
        Tensor loss = xe_loss(m.decode(enc, input), target);
        tape.backward(scale(loss, inv_b));
        return loss.item();
      };
      final_loss = accumulate_batch(*model, batch, per_example);
      adam->step(rc.overfit_lr);
      ++global_step;
      min_loss = std::min(min_loss, final_loss);
      if (first_below < 0 && final_loss < 0.05) first_below = step + 1;
      if ((step + 1) % 25 == 0 || step + 1 == rc.overfit_steps) {
        json line;
        line["epoch"] = step + 1;
        line["phase"] = "overfit";
        line["loss"] = final_loss;
        line["lr"] = rc.overfit_lr;
        line["wall_ms"] = now_ms() - t0;
        write_metric(line);
      }
      if (first_below > 0 && final_loss < 0.01) break;  // long since converged
    }
    phase = "overfit";
    next_epoch = 0;
    save_checkpoint("overfit_final");
    json summary;
    summary["examples"] = count;
    summary["final_loss"] = final_loss;
    summary["min_loss"] = min_loss;
    summary["first_step_below_0.05"] = first_below;
    return summary;
  }
};

}  // namespace

json run_gen_data(const RunConfig& rc) {
  rc.validate();
  if (rc.out.empty()) throw std::invalid_argument("gen-data: --out is required");
  Dataset ds;
  if (!rc.import_dir.empty()) {
    ds = import_features(rc.import_dir, rc.grid.empty() ? GridLayout(7, 7) : parse_grid(rc.grid));
  } else {
    GenConfig cfg;
    cfg.n = rc.n;
    cfg.seed = rc.seed;
    if (!rc.grid.empty()) cfg.layout = parse_grid(rc.grid);
    ds = generate_corpus(cfg);
  }
  write_dataset(ds, rc.out);
  json summary;
  summary["out"] = rc.out;
  summary["counts"] = {{"train", ds.train.size()}, {"val", ds.val.size()}, {"test", ds.test.size()}};
  summary["grid"] = {ds.layout.rows, ds.layout.cols};
  summary["vocab_size"] = ds.vocab.size();
  summary["max_caption_len"] = ds.max_caption_len();
  summary["manifest_hash"] = hex64(fnv1a64_file((fs::path(rc.out) / "manifest.json").string()));
  return summary;
}

json run_train(const RunConfig& rc) {
  rc.validate();
  if (rc.dataset.empty() || rc.out.empty()) throw std::invalid_argument("train: --dataset and --out are required");
  Trainer tr;
  tr.rc = rc;
  tr.ds = read_dataset(rc.dataset);
  tr.out = rc.out;
  fs::create_directories(tr.out);
  tr.dataset_hash = fnv1a64_file((fs::path(rc.dataset) / "manifest.json").string());
  tr.mcfg = resolve_model_config(rc, tr.ds);
  tr.tcfg = resolve_train_config(rc);
  tr.model = std::make_unique<DlctModel>(tr.mcfg, rc.seed);
  tr.adam = std::make_unique<AdamOptimizer>(tr.model->params(), tr.tcfg.beta1, tr.tcfg.beta2, tr.tcfg.adam_eps);
  tr.train_stats = std::make_unique<CorpusStats>(CorpusStats::build(references_of(tr.ds.train)));

  {
    json manifest = rc.to_json();
    manifest["model_config"] = tr.mcfg.canonical_string();
    manifest["dataset_hash"] = hex64(tr.dataset_hash);
    std::ofstream(tr.out / "run_manifest.json") << manifest.dump(2) << '\n';
  }

  bool resumed = false;
  if (rc.resume) {
    resumed = tr.try_resume();
  } else {
    std::ofstream(tr.out / "metrics.jsonl", std::ios::trunc);
  }

  json summary;
  summary["out"] = rc.out;
  summary["resumed"] = resumed;

  if (rc.overfit > 0) {
    summary["overfit"] = tr.overfit_run();
    return summary;
  }

  if (rc.phase == "scst" && !resumed) {
    throw std::runtime_error("train: --phase scst requires --resume from a cross-entropy checkpoint");
  }

  json last_line;
  if ((rc.phase == "xe" || rc.phase == "both") && tr.phase == "xe") {
    for (int epoch = tr.next_epoch; epoch < tr.tcfg.xe_epochs; ++epoch) {
      const int64_t t0 = now_ms();
      const double train_loss = tr.xe_epoch(epoch);
      const double lr = lr_schedule(epoch, std::max(0, tr.tcfg.steps_per_epoch - 1), tr.tcfg);
      last_line = tr.epoch_eval(epoch, "xe", train_loss, lr, now_ms() - t0);
      tr.next_epoch = epoch + 1;
      tr.save_checkpoint("xe_epoch_" + std::to_string(epoch));
    }
    if (rc.phase == "both") {
      tr.phase = "scst";
      tr.next_epoch = 0;
      // fresh optimizer state for the policy-gradient stage
      tr.adam = std::make_unique<AdamOptimizer>(tr.model->params(), tr.tcfg.beta1, tr.tcfg.beta2,
                                                tr.tcfg.adam_eps);
    }
  }

  if ((rc.phase == "scst" || rc.phase == "both") && tr.phase == "scst") {
    if (rc.phase == "scst" && resumed && tr.next_epoch == 0) {
      tr.adam = std::make_unique<AdamOptimizer>(tr.model->params(), tr.tcfg.beta1, tr.tcfg.beta2,
                                                tr.tcfg.adam_eps);
    }
    for (int epoch = tr.next_epoch; epoch < tr.tcfg.scst_epochs; ++epoch) {
      const int64_t t0 = now_ms();
      const auto [loss, reward] = tr.scst_epoch(epoch);
      last_line = tr.epoch_eval(epoch, "scst", loss, tr.tcfg.scst_rate, now_ms() - t0, reward);
      tr.next_epoch = epoch + 1;
      tr.save_checkpoint("scst_epoch_" + std::to_string(epoch));
    }
  }

  summary["final"] = last_line;
  return summary;
}

LoadedModel load_checkpoint(const std::string& checkpoint_dir, const std::string& dataset_dir) {
  fs::path dir = checkpoint_dir;
  if (fs::exists(dir / "latest.json")) {
    json pointer = json::parse(std::ifstream(dir / "latest.json"));
    dir = dir / pointer["checkpoint"].get<std::string>();
  }
  if (!fs::exists(dir / "state.json")) {
    throw std::runtime_error("checkpoint: no state.json under " + dir.string());
  }
  LoadedModel lm;
  lm.state = json::parse(std::ifstream(dir / "state.json"));
  lm.config = ModelConfig::from_canonical(lm.state["model_config"].get<std::string>());
  if (!dataset_dir.empty()) {
    const uint64_t h = fnv1a64_file((fs::path(dataset_dir) / "manifest.json").string());
    if (hex64(h) != lm.state["dataset_hash"].get<std::string>()) {
      throw std::runtime_error(
          "checkpoint/dataset mismatch: the checkpoint was trained on a dataset with a different manifest hash");
    }
  }
  lm.model = std::make_unique<DlctModel>(lm.config, 0);
  lm.model->load_params((dir / "params").string());
  return lm;
}

json run_eval(const RunConfig& rc) {
  rc.validate();
  if (rc.checkpoint.empty() || rc.dataset.empty()) {
    throw std::invalid_argument("eval: --checkpoint and --dataset are required");
  }
  LoadedModel lm = load_checkpoint(rc.checkpoint, rc.dataset);
  Dataset ds = read_dataset(rc.dataset);
  const auto& split = pick_split(ds, rc.split);
  if (split.empty()) throw std::runtime_error("eval: split '" + rc.split + "' is empty");
  const int beam = rc.beam > 0 ? rc.beam : 5;
  const EvalResult ev = evaluate_split(*lm.model, split, beam, rc.eval_limit > 0 ? rc.eval_limit : 0);
  json out;
  out["split"] = rc.split;
  out["n"] = ev.n;
  out["beam"] = beam;
  out["bleu1"] = ev.bleu1;
  out["bleu4"] = ev.bleu4;
  out["cider_d"] = ev.cider;
  out["mean_top_logp"] = ev.mean_top_logp;
  if (!rc.out.empty()) {
    fs::create_directories(rc.out);
    std::ofstream(fs::path(rc.out) / ("eval_" + rc.split + ".json")) << out.dump(2) << '\n';
  }
  return out;
}

json run_score(const RunConfig& rc) {
  if (rc.candidates.empty() || rc.references.empty()) {
    throw std::invalid_argument("score: --candidates and --references are required");
  }
  std::ifstream cf(rc.candidates);
  if (!cf) throw std::runtime_error("score: cannot open " + rc.candidates);
  std::ifstream rf(rc.references);
  if (!rf) throw std::runtime_error("score: cannot open " + rc.references);

  WordInterner interner;
  auto to_ids = [&interner](const std::string& line) {
    TokenSeq ids;
    for (const std::string& w : tokenize_words(line)) ids.push_back(interner.intern(w));
    return ids;
  };

  std::vector<TokenSeq> cands;
  std::vector<std::vector<TokenSeq>> refs;
  std::string cline, rline;
  while (std::getline(cf, cline)) {
    if (!std::getline(rf, rline)) {
      throw std::runtime_error("score: reference file has fewer lines than the candidate file");
    }
    cands.push_back(to_ids(cline));
    std::vector<TokenSeq> row;
    std::stringstream ss(rline);
    std::string field;
    while (std::getline(ss, field, '\t')) {
      if (!tokenize_words(field).empty()) row.push_back(to_ids(field));
    }
    if (row.empty()) throw std::runtime_error("score: line " + std::to_string(refs.size()) + " has no references");
    refs.push_back(std::move(row));
  }
  if (std::getline(rf, rline)) throw std::runtime_error("score: reference file has extra lines");
  if (cands.empty()) throw std::runtime_error("score: no candidates");

  const CorpusStats stats = CorpusStats::build(refs);
  json out;
  out["n"] = cands.size();
  json lines = json::array();
  double cider_sum = 0.0;
  for (size_t i = 0; i < cands.size(); ++i) {
    const double sc = cider_d(cands[i], refs[i], stats);
    cider_sum += sc;
    lines.push_back({{"line", i}, {"bleu4", sentence_bleu(cands[i], refs[i], 4)}, {"cider_d", sc}});
  }
  out["per_line"] = lines;
  out["corpus"] = {{"bleu1", corpus_bleu(cands, refs, 1)},
                   {"bleu4", corpus_bleu(cands, refs, 4)},
                   {"cider_d", cider_sum / static_cast<double>(cands.size())}};
  return out;
}

namespace {

struct RegionAttrs {
  int shape = 0, color = 0, size = 0;
};

RegionAttrs region_attrs_from_features(const Tensor& regions, int64_t row) {
  const double* p = regions.data().data() + row * regions.shape()[1];
  RegionAttrs a;
  for (int i = 1; i < 3; ++i) {
    if (p[i] > p[a.shape]) a.shape = i;
  }
  int best_c = 3;
  for (int i = 4; i < 7; ++i) {
    if (p[i] > p[best_c]) best_c = i;
  }
  a.color = best_c - 3;
  a.size = p[8] > p[7] ? 1 : 0;
  return a;
}

}  // namespace

double color_word_alignment_probe(const DlctModel& model, const Dataset& ds,
                                  const std::vector<TrainExample>& split, int n, int beam) {
  NoGrad ng;
  const std::vector<std::string> colors = {"red", "blue", "green", "yellow"};
  const std::vector<std::string> shapes = {"circle", "square", "triangle"};
  int hits = 0;
  int total = 0;
  const int count = std::min<int>(n, static_cast<int>(split.size()));
  for (int e = 0; e < count; ++e) {
    const TrainExample& ex = split[static_cast<size_t>(e)];
    ExampleGeometry geom = model.build_geometry(ex.features);
    DecodedBeam db = beam_search(model, ex.features, geom, beam);
    TokenSeq caption = strip_eos(db.sequences[0]);
    if (caption.empty()) continue;

    AttentionTrace trace;
    ForwardOptions fo;
    fo.trace = &trace;
    Tensor enc = model.encode(ex.features, geom);
    TokenSeq input = {Vocab::kBos};
    input.insert(input.end(), caption.begin(), caption.end());
    fo.trace = &trace;
    model.decode(enc, input, fo);

    const AttentionWeights* cross = nullptr;
    for (const auto& rec : trace.records) {
      if (rec.sublayer == "dec_cross" && rec.layer == model.config().layers - 1) cross = &rec.weights;
    }
    if (!cross) continue;
    const int64_t n_regions = static_cast<int64_t>(ex.features.boxes.size());

    for (size_t t = 0; t + 1 < caption.size(); ++t) {
      const std::string word = ds.vocab.word(caption[t]);
      const std::string next = ds.vocab.word(caption[t + 1]);
      int color_id = -1;
      for (size_t c = 0; c < colors.size(); ++c) {
        if (word == colors[c]) color_id = static_cast<int>(c);
      }
      if (color_id < 0) continue;
      bool next_is_shape = false;
      for (const auto& s : shapes) next_is_shape = next_is_shape || next == s;
      if (!next_is_shape) continue;  // background colour mention

      // expected region: the one whose feature block names this colour and shape
      int expected = -1;
      for (int64_t r = 0; r < n_regions; ++r) {
        const RegionAttrs attrs = region_attrs_from_features(ex.features.regions, r);
        if (attrs.color == color_id && shapes[static_cast<size_t>(attrs.shape)] == next) expected = static_cast<int>(r);
      }
      if (expected < 0) continue;

      // head-averaged attention row for the word position (query = position t
      // in the shifted decoder input predicts token t), restricted to regions
      const int64_t q = static_cast<int64_t>(t);
      double best = -1.0;
      int best_region = -1;
      for (int64_t r = 0; r < n_regions; ++r) {
        double mean = 0.0;
        for (int64_t h = 0; h < cross->heads; ++h) mean += cross->at(h, q, r);
        if (mean > best) {
          best = mean;
          best_region = static_cast<int>(r);
        }
      }
      ++total;
      if (best_region == expected) ++hits;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / total;
}

json run_dump_attention(const RunConfig& rc) {
  rc.validate();
  if (rc.checkpoint.empty() || rc.dataset.empty() || rc.out.empty()) {
    throw std::invalid_argument("dump-attention: --checkpoint, --dataset and --out are required");
  }
  LoadedModel lm = load_checkpoint(rc.checkpoint, rc.dataset);
  Dataset ds = read_dataset(rc.dataset);
  const auto& split = pick_split(ds, rc.split);
  if (rc.example < 0 || rc.example >= static_cast<int>(split.size())) {
    throw std::invalid_argument("dump-attention: example id " + std::to_string(rc.example) +
                                " outside split '" + rc.split + "' of " + std::to_string(split.size()));
  }
  const TrainExample& ex = split[static_cast<size_t>(rc.example)];
  const DlctModel& model = *lm.model;
  NoGrad ng;

  ExampleGeometry geom = model.build_geometry(ex.features);
  const int beam = rc.beam > 0 ? rc.beam : 5;
  DecodedBeam db = beam_search(model, ex.features, geom, beam);
  const TokenSeq caption = strip_eos(db.sequences[0]);

  AttentionTrace trace;
  ForwardOptions fo;
  fo.trace = &trace;
  Tensor enc = model.encode(ex.features, geom, fo);
  TokenSeq input = {Vocab::kBos};
  input.insert(input.end(), caption.begin(), caption.end());
  Tensor logits = model.decode(enc, input, fo);
  (void)logits;

  fs::create_directories(rc.out);
  const fs::path bin_path = fs::path(rc.out) / "attention.bin";
  const fs::path idx_path = fs::path(rc.out) / "attention.index.txt";
  const fs::path report_path = fs::path(rc.out) / "report.txt";

  std::ofstream bin(bin_path, std::ios::binary);
  std::ofstream idx(idx_path);
  const int64_t n_regions = static_cast<int64_t>(ex.features.boxes.size());
  idx << "# example " << rc.example << " split " << rc.split << '\n';
  idx << "# n_regions " << n_regions << " n_grids " << model.config().layout.cells() << '\n';
  idx << "# caption " << ds.vocab.text(caption) << '\n';
  idx << "# record layer sublayer head rows cols offset\n";
  int rec_i = 0;
  for (const auto& rec : trace.records) {
    for (int64_t h = 0; h < rec.weights.heads; ++h) {
      const int64_t offset = static_cast<int64_t>(bin.tellp());
      std::vector<double> mat(static_cast<size_t>(rec.weights.n_q * rec.weights.n_k));
      for (int64_t i = 0; i < rec.weights.n_q; ++i) {
        for (int64_t j = 0; j < rec.weights.n_k; ++j) {
          mat[static_cast<size_t>(i * rec.weights.n_k + j)] = rec.weights.at(h, i, j);
        }
      }
      write_dlt1(bin, Tensor::from_data({rec.weights.n_q, rec.weights.n_k}, std::move(mat)));
      idx << rec_i << ' ' << rec.layer << ' ' << rec.sublayer << ' ' << h << ' ' << rec.weights.n_q << ' '
          << rec.weights.n_k << ' ' << offset << '\n';
      ++rec_i;
    }
  }

  // per-word top-3 regions from the head-averaged last decoder cross layer
  const AttentionWeights* cross = nullptr;
  for (const auto& rec : trace.records) {
    if (rec.sublayer == "dec_cross" && rec.layer == model.config().layers - 1) cross = &rec.weights;
  }
  std::ofstream report(report_path);
  json words = json::array();
  if (cross) {
    for (size_t t = 0; t < caption.size(); ++t) {
      std::vector<std::pair<double, int>> region_w;
      for (int64_t r = 0; r < n_regions; ++r) {
        double mean = 0.0;
        for (int64_t h = 0; h < cross->heads; ++h) mean += cross->at(h, static_cast<int64_t>(t), r);
        region_w.push_back({mean / static_cast<double>(cross->heads), static_cast<int>(r)});
      }
      std::sort(region_w.begin(), region_w.end(),
                [](const auto& a, const auto& b) { return a.first > b.first; });
      int best_grid = -1;
      double best_gw = -1.0;
      for (int64_t g = n_regions; g < cross->n_k; ++g) {
        double mean = 0.0;
        for (int64_t h = 0; h < cross->heads; ++h) mean += cross->at(h, static_cast<int64_t>(t), g);
        if (mean > best_gw) {
          best_gw = mean;
          best_grid = static_cast<int>(g - n_regions);
        }
      }
      report << "word=" << ds.vocab.word(caption[t]) << " top_regions=";
      json top = json::array();
      for (size_t k = 0; k < std::min<size_t>(3, region_w.size()); ++k) {
        if (k) report << ',';
        report << region_w[k].second;
        top.push_back(region_w[k].second);
      }
      report << " top_grid=" << best_grid << '\n';
      words.push_back({{"word", ds.vocab.word(caption[t])}, {"top_regions", top}, {"top_grid", best_grid}});
    }
  }

  json out;
  out["caption"] = ds.vocab.text(caption);
  out["records"] = rec_i;
  out["files"] = {bin_path.string(), idx_path.string(), report_path.string()};
  out["words"] = words;
  return out;
}

}  // namespace dlct
