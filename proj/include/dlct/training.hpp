#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dlct/data.hpp"
#include "dlct/metrics.hpp"
#include "dlct/model.hpp"
#include "dlct/tensor.hpp"

namespace dlct {

struct TrainConfig {
  int warmup_epochs = 4;
  double warmup_target = 1e-4;
  // (first 0-based epoch, rate) applied after warmup; latest stage wins.
  std::vector<std::pair<int, double>> lr_stages = {{4, 1e-4}, {10, 2e-6}, {12, 4e-7}};
  int xe_epochs = 18;
  int scst_epochs = 5;
  double scst_rate = 5e-6;
  int xe_batch = 50;
  int scst_batch = 100;
  int beam_size = 5;
  int eval_beam = 5;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  double scst_clip_norm = 1.0;
  int steps_per_epoch = 1;  // warmup granularity; the trainer fills this in

  static TrainConfig reference();
  // Compressed schedule with the same rate values.
  static TrainConfig desk();
};

// Pure, total for all non-negative (epoch, step).
double lr_schedule(int epoch, int64_t step_in_epoch, const TrainConfig& cfg);

// Teacher-forced cross-entropy: -sum_t log p(target_t), padding ids skipped.
// logits: [T, vocab]; targets: T ids.
Tensor xe_loss(const Tensor& logits, const TokenSeq& targets, int32_t pad_id = Vocab::kPad);

struct DecodedBeam {
  // Sorted by descending cumulative log-probability. Sequences contain the
  // emitted tokens including the trailing EOS when one was produced.
  std::vector<TokenSeq> sequences;
  std::vector<double> log_probs;
};

TokenSeq strip_eos(const TokenSeq& seq);

// Next-token log-probabilities for a BOS-prefixed sequence.
using StepFn = std::function<std::vector<double>(const TokenSeq& prefix)>;
// Batched form over equal-length prefixes (one row of log-probs each).
using BatchStepFn = std::function<std::vector<std::vector<double>>(const std::vector<TokenSeq>& prefixes)>;

// Length-wise beam expansion over cumulative log-probs with deterministic
// (log_prob, token id, parent beam index) tie-breaking. Finished hypotheses
// are frozen and carried. Candidates with -inf log-probability are pruned;
// if fewer than k hypotheses survive, the top ones are repeated.
DecodedBeam beam_search_core(const BatchStepFn& step, const std::vector<int32_t>& allowed_tokens,
                             int32_t eos, int k, int max_len);
DecodedBeam beam_search_core(const StepFn& step, const std::vector<int32_t>& allowed_tokens, int32_t eos,
                             int k, int max_len);

// Model-backed beam search over caption tokens (everything except PAD/BOS).
DecodedBeam beam_search(const DlctModel& model, const FeatureBundle& bundle, const ExampleGeometry& geom,
                        int k, int max_len = -1);

class AdamOptimizer {
 public:
  AdamOptimizer(ParamStore& params, double beta1, double beta2, double eps);

  // Applies accumulated gradients (optionally clipped to a global norm) and
  // zeroes them. No-op semantics: zero gradients with fresh moments leave
  // the parameters bit-identical.
  void step(double lr, double clip_norm = 0.0);

  int64_t step_count() const { return t_; }
  void save(const std::string& dir) const;
  void load(const std::string& dir);
  // Rounds moments through float32 so the in-memory state matches what a
  // checkpoint restore would produce.
  void quantize_f32();

 private:
  ParamStore& params_;
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Sequence-level reward for a caption (no BOS/EOS).
using RewardFn = std::function<double(const TokenSeq& caption)>;

struct ScstStepResult {
  double mean_reward = 0.0;
  double loss = 0.0;  // -(1/k) sum_i advantage_i * log p(y_i)
};

// Rewards the k beam candidates against the mean-of-rewards baseline and
// accumulates the policy gradient into the model parameters (scaled by
// loss_scale). Requires k >= 2 so the baseline is informative.
ScstStepResult scst_step(DlctModel& model, const FeatureBundle& bundle, const ExampleGeometry& geom,
                         const RewardFn& reward, int k, double loss_scale = 1.0);

// Worker threads for data-parallel batch evaluation; DLCT_THREADS caps it
// (default 1). Gradients reduce in a fixed chunk order so a given thread
// count is bitwise reproducible.
int worker_threads();

// Mean per-example loss; per_example must run forward+backward for one item
// (its gradients accumulate into the given model's parameters).
double accumulate_batch(DlctModel& model, const std::vector<int>& items,
                        const std::function<double(DlctModel&, int)>& per_example);

}  // namespace dlct
