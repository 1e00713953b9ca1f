#include "dlct/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <thread>

#include "dlct/ops.hpp"
#include "dlct/tensor_io.hpp"

namespace dlct {

namespace fs = std::filesystem;

TrainConfig TrainConfig::reference() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
  TrainConfig cfg;
  cfg.warmup_epochs = 2;
  cfg.lr_stages = {{2, 1e-4}, {6, 2e-6}, {8, 4e-7}};
  cfg.xe_epochs = 10;
  cfg.scst_epochs = 5;
  cfg.xe_batch = 16;
  cfg.scst_batch = 16;
  return cfg;
}

double lr_schedule(int epoch, int64_t step_in_epoch, const TrainConfig& cfg) {
  if (epoch < 0 || step_in_epoch < 0) throw std::invalid_argument("lr_schedule: negative epoch or step");
  const int64_t spe = std::max<int64_t>(1, cfg.steps_per_epoch);
  if (epoch < cfg.warmup_epochs) {
    const int64_t total = static_cast<int64_t>(cfg.warmup_epochs) * spe;
    const int64_t done = std::min<int64_t>(epoch * spe + step_in_epoch, total);
    return cfg.warmup_target * static_cast<double>(done) / static_cast<double>(total);
  }
  double rate = cfg.warmup_target;
  for (const auto& [first_epoch, stage_rate] : cfg.lr_stages) {
    if (epoch >= first_epoch) rate = stage_rate;
  }
  return rate;
}

Tensor xe_loss(const Tensor& logits, const TokenSeq& targets, int32_t pad_id) {
  if (logits.rank() != 2) throw std::invalid_argument("xe_loss: logits must be [T, vocab]");
  const int64_t t_len = logits.shape()[0];
  const int64_t vocab = logits.shape()[1];
  if (static_cast<int64_t>(targets.size()) != t_len) {
    throw std::invalid_argument("xe_loss: one target per logit row required");
  }
  std::vector<int64_t> cols;
  std::vector<double> keep;
  cols.reserve(targets.size());
  keep.reserve(targets.size());
  for (int32_t t : targets) {
    if (t < 0 || t >= vocab) {
      throw std::out_of_range("xe_loss: target id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    cols.push_back(t == pad_id ? 0 : t);
    keep.push_back(t == pad_id ? 0.0 : 1.0);
  }
  Tensor picked = pick(log_softmax_last(logits), cols);
  Tensor masked = mul(picked, Tensor::from_data({t_len}, std::move(keep)));
  return scale(sum_all(masked), -1.0);
}

TokenSeq strip_eos(const TokenSeq& seq) {
  TokenSeq out;
  for (int32_t t : seq) {
    if (t == Vocab::kEos) break;
    out.push_back(t);
  }
  return out;
}

DecodedBeam beam_search_core(const BatchStepFn& step, const std::vector<int32_t>& allowed_tokens,
                             int32_t eos, int k, int max_len) {
  if (k < 1) throw std::invalid_argument("beam_search: k must be >= 1");
  if (max_len < 1) throw std::invalid_argument("beam_search: max_len must be >= 1");

  struct Hyp {
    TokenSeq seq;
    double logp = 0.0;
    bool done = false;
  };
  struct Candidate {
    Hyp hyp;
    double logp;
    int32_t token;  // -1 for carried finished hypotheses
    int parent;
  };

  std::vector<Hyp> beams = {Hyp{}};
  for (int pos = 0; pos < max_len; ++pos) {
    std::vector<TokenSeq> prefixes;
    std::vector<int> active;  // beam indices expanded this step
    for (int parent = 0; parent < static_cast<int>(beams.size()); ++parent) {
      const Hyp& h = beams[static_cast<size_t>(parent)];
      if (h.done) continue;
      TokenSeq prefix;
      prefix.reserve(h.seq.size() + 1);
      prefix.push_back(Vocab::kBos);
      prefix.insert(prefix.end(), h.seq.begin(), h.seq.end());
      prefixes.push_back(std::move(prefix));
      active.push_back(parent);
    }
    if (active.empty()) break;
    const std::vector<std::vector<double>> logprobs = step(prefixes);

    std::vector<Candidate> candidates;
    for (int parent = 0; parent < static_cast<int>(beams.size()); ++parent) {
      const Hyp& h = beams[static_cast<size_t>(parent)];
      if (h.done) candidates.push_back({h, h.logp, -1, parent});
    }
    for (size_t a = 0; a < active.size(); ++a) {
      const int parent = active[a];
      const Hyp& h = beams[static_cast<size_t>(parent)];
      const std::vector<double>& row = logprobs[a];
      for (int32_t tok : allowed_tokens) {
        const double lp = row[static_cast<size_t>(tok)];
        if (std::isinf(lp) && lp < 0) continue;  // impossible extension
        Hyp next;
        next.seq = h.seq;
        next.seq.push_back(tok);
        next.logp = h.logp + lp;
        next.done = tok == eos;
        candidates.push_back({std::move(next), h.logp + lp, tok, parent});
      }
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      if (a.token != b.token) return a.token < b.token;
      return a.parent < b.parent;
    });
    beams.clear();
    for (size_t i = 0; i < candidates.size() && static_cast<int>(beams.size()) < k; ++i) {
      beams.push_back(std::move(candidates[i].hyp));
    }
    if (beams.empty()) break;  // every extension was impossible
  }

  std::stable_sort(beams.begin(), beams.end(), [](const Hyp& a, const Hyp& b) { return a.logp > b.logp; });
  DecodedBeam out;
  if (beams.empty()) beams.push_back(Hyp{});
  for (int i = 0; i < k; ++i) {
    const Hyp& h = beams[static_cast<size_t>(i) % beams.size()];
    out.sequences.push_back(h.seq);
    out.log_probs.push_back(h.logp);
  }
  return out;
}

DecodedBeam beam_search_core(const StepFn& step, const std::vector<int32_t>& allowed_tokens, int32_t eos,
                             int k, int max_len) {
  auto batch = [&step](const std::vector<TokenSeq>& prefixes) {
    std::vector<std::vector<double>> rows;
    rows.reserve(prefixes.size());
    for (const TokenSeq& p : prefixes) rows.push_back(step(p));
    return rows;
  };
  return beam_search_core(BatchStepFn(batch), allowed_tokens, eos, k, max_len);
}

DecodedBeam beam_search(const DlctModel& model, const FeatureBundle& bundle, const ExampleGeometry& geom,
                        int k, int max_len) {
  NoGrad ng;
  const ModelConfig& cfg = model.config();
  if (max_len < 0) max_len = cfg.max_len - 1;
  max_len = std::min(max_len, cfg.max_len - 1);
  Tensor enc = model.encode(bundle, geom);

  std::vector<int32_t> allowed;
  for (int32_t tok = 0; tok < cfg.vocab_size; ++tok) {
    if (tok != Vocab::kPad && tok != Vocab::kBos) allowed.push_back(tok);
  }
  const int64_t v = cfg.vocab_size;
  auto step = [&](const std::vector<TokenSeq>& prefixes) {
    Tensor lp = log_softmax_last(model.decode_batch(enc, prefixes));
    const int64_t t_len = static_cast<int64_t>(prefixes[0].size());
    std::vector<std::vector<double>> rows;
    rows.reserve(prefixes.size());
    for (size_t b = 0; b < prefixes.size(); ++b) {
      const double* last = lp.data().data() + (static_cast<int64_t>(b) * t_len + (t_len - 1)) * v;
      rows.emplace_back(last, last + v);
    }
    return rows;
  };
  return beam_search_core(BatchStepFn(step), allowed, Vocab::kEos, k, max_len);
}

AdamOptimizer::AdamOptimizer(ParamStore& params, double beta1, double beta2, double eps)
    : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [_, t] : params_.entries()) {
    m_.emplace_back(static_cast<size_t>(t.numel()), 0.0);
    v_.emplace_back(static_cast<size_t>(t.numel()), 0.0);
  }
}

void AdamOptimizer::step(double lr, double clip_norm) {
  double scale_factor = 1.0;
  if (clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& [_, t] : params_.entries()) {
      for (double g : t.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > clip_norm) scale_factor = clip_norm / norm;
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  size_t idx = 0;
  for (const auto& [_, entry] : params_.entries()) {
    Tensor t = entry;
    auto data = t.mutable_data();
    auto g = t.grad();
    auto& m = m_[idx];
    auto& v = v_[idx];
    ++idx;
    if (g.empty()) continue;
    for (size_t i = 0; i < data.size(); ++i) {
      const double gi = g[i] * scale_factor;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      data[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
  params_.zero_grads();
}

void AdamOptimizer::save(const std::string& dir) const {
  fs::create_directories(fs::path(dir) / "m");
  fs::create_directories(fs::path(dir) / "v");
  size_t idx = 0;
  for (const auto& [name, t] : params_.entries()) {
    save_tensor((fs::path(dir) / "m" / (name + ".dlt1")).string(),
                Tensor::from_data(t.shape(), std::vector<double>(m_[idx].begin(), m_[idx].end())));
    save_tensor((fs::path(dir) / "v" / (name + ".dlt1")).string(),
                Tensor::from_data(t.shape(), std::vector<double>(v_[idx].begin(), v_[idx].end())));
    ++idx;
  }
  std::ofstream st(fs::path(dir) / "t.txt");
  st << t_ << '\n';
}

void AdamOptimizer::load(const std::string& dir) {
  size_t idx = 0;
  for (const auto& [name, t] : params_.entries()) {
    Tensor m = load_tensor((fs::path(dir) / "m" / (name + ".dlt1")).string());
    Tensor v = load_tensor((fs::path(dir) / "v" / (name + ".dlt1")).string());
    if (m.numel() != t.numel() || v.numel() != t.numel()) {
      throw std::runtime_error("optimizer state shape mismatch for " + name);
    }
    m_[idx].assign(m.data().begin(), m.data().end());
    v_[idx].assign(v.data().begin(), v.data().end());
    ++idx;
  }
  std::ifstream st(fs::path(dir) / "t.txt");
  if (!(st >> t_)) throw std::runtime_error("optimizer state missing step count in " + dir);
}

void AdamOptimizer::quantize_f32() {
  for (auto& m : m_) {
    for (double& x : m) x = static_cast<double>(static_cast<float>(x));
  }
  for (auto& v : v_) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  }
}

ScstStepResult scst_step(DlctModel& model, const FeatureBundle& bundle, const ExampleGeometry& geom,
                         const RewardFn& reward, int k, double loss_scale) {
  if (k < 2) {
    throw std::invalid_argument("scst_step: beam size must be >= 2 (the mean baseline needs variation)");
  }
  const DecodedBeam beam = beam_search(model, bundle, geom, k, -1);
  std::vector<double> rewards(beam.sequences.size());
  double mean = 0.0;
  for (size_t i = 0; i < beam.sequences.size(); ++i) {
    rewards[i] = reward(strip_eos(beam.sequences[i]));
    mean += rewards[i];
  }
  mean /= static_cast<double>(rewards.size());

  ScstStepResult result;
  result.mean_reward = mean;
  bool any_nonzero = false;
  for (double r : rewards) {
    if (r != mean) any_nonzero = true;
  }
  if (!any_nonzero) {
    // all advantages are exactly zero; no gradient contribution
    result.loss = 0.0;
    return result;
  }

  Tape tape;
  Tensor enc = model.encode(bundle, geom);
  std::vector<Tensor> terms;
  for (size_t i = 0; i < beam.sequences.size(); ++i) {
    const double advantage = rewards[i] - mean;
    if (advantage == 0.0) continue;
    TokenSeq target = beam.sequences[i];
    if (target.empty() || target.back() != Vocab::kEos) target.push_back(Vocab::kEos);
    TokenSeq input;
    input.push_back(Vocab::kBos);
    input.insert(input.end(), target.begin(), target.end() - 1);
    Tensor logits = model.decode(enc, input);
    std::vector<int64_t> cols(target.begin(), target.end());
    Tensor seq_logp = sum_all(pick(log_softmax_last(logits), cols));
    terms.push_back(scale(seq_logp, -advantage / static_cast<double>(k)));
  }
  Tensor loss = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) loss = add(loss, terms[i]);
  result.loss = loss.item();
  tape.backward(scale(loss, loss_scale));
  return result;
}

int worker_threads() {
  const char* env = std::getenv("DLCT_THREADS");
  int n = 1;
  if (env) {
    n = std::atoi(env);
    if (n < 1) n = 1;
  }
  const int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw > 0) n = std::min(n, hw);
  return n;
}

double accumulate_batch(DlctModel& model, const std::vector<int>& items,
                        const std::function<double(DlctModel&, int)>& per_example) {
  if (items.empty()) return 0.0;
  const int threads = std::min<int>(worker_threads(), static_cast<int>(items.size()));
  double total = 0.0;
  if (threads <= 1) {
    for (int idx : items) total += per_example(model, idx);
    return total / static_cast<double>(items.size());
  }

  // Parameters are cloned per worker; gradients reduce in chunk order so the
  // result is reproducible for a fixed DLCT_THREADS.
  struct WorkerSlot {
    std::unique_ptr<DlctModel> model;
    double loss_sum = 0.0;
  };
  std::vector<WorkerSlot> slots(static_cast<size_t>(threads));
  for (auto& slot : slots) {
    slot.model = std::make_unique<DlctModel>(model.config(), 0);
    auto& dst_entries = slot.model->params().entries();
    const auto& src_entries = model.params().entries();
    for (size_t p = 0; p < src_entries.size(); ++p) {
      Tensor dst = dst_entries[p].second;
      auto d = dst.mutable_data();
      for (int64_t i = 0; i < dst.numel(); ++i) d[static_cast<size_t>(i)] = src_entries[p].second.data()[static_cast<size_t>(i)];
      dst.drop_grad();
    }
  }

  const size_t per_chunk = (items.size() + static_cast<size_t>(threads) - 1) / static_cast<size_t>(threads);
  std::vector<std::thread> pool;
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&, w]() {
      const size_t lo = static_cast<size_t>(w) * per_chunk;
      const size_t hi = std::min(items.size(), lo + per_chunk);
      for (size_t i = lo; i < hi; ++i) {
        slots[static_cast<size_t>(w)].loss_sum += per_example(*slots[static_cast<size_t>(w)].model, items[i]);
      }
    });
  }
  for (auto& th : pool) th.join();

  for (int w = 0; w < threads; ++w) {
    total += slots[static_cast<size_t>(w)].loss_sum;
    const auto& src_entries = slots[static_cast<size_t>(w)].model->params().entries();
    const auto& dst_entries = model.params().entries();
    for (size_t p = 0; p < src_entries.size(); ++p) {
      const Tensor& src = src_entries[p].second;
      if (!src.has_grad()) continue;
      Tensor dst = dst_entries[p].second;
      dst.impl()->ensure_grad();
      auto g = src.grad();
      for (size_t i = 0; i < g.size(); ++i) dst.impl()->grad[i] += g[i];
    }
  }
  return total / static_cast<double>(items.size());
}

}  // namespace dlct
