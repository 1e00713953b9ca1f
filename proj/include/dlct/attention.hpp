#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dlct/rng.hpp"
#include "dlct/tensor.hpp"

namespace dlct {

// Row-major boolean mask over query x key pairs. Used both for the alignment
// graph slices and for the decoder's causal mask.
struct GraphMask {
  int64_t n_q = 0;
  int64_t n_k = 0;
  std::vector<uint8_t> allow;  // n_q * n_k

  bool at(int64_t i, int64_t j) const { return allow[static_cast<size_t>(i * n_k + j)] != 0; }
  bool row_empty(int64_t i) const;
  bool any_row_empty() const;

  static GraphMask full(int64_t n_q, int64_t n_k);
  static GraphMask causal(int64_t t);
};

// Detached per-head weight snapshot for attention dumping.
struct AttentionWeights {
  int64_t heads = 0;
  int64_t n_q = 0;
  int64_t n_k = 0;
  std::vector<double> values;  // [heads, n_q, n_k]

  double at(int64_t h, int64_t i, int64_t j) const {
    return values[static_cast<size_t>((h * n_q + i) * n_k + j)];
  }
};

struct AttentionOutput {
  Tensor values;  // [N_q, d] (or [B, N_q, d] for batched decoding)
  std::optional<AttentionWeights> weights;
};

struct MultiHeadParams {
  Tensor wq, wk, wv, wo;  // each [d_model, d_model]
};

// Post-softmax weight dropout; inactive when p == 0 or rng is null.
struct AttnDropout {
  double p = 0.0;
  Rng* rng = nullptr;
  bool training = false;
};

struct AttentionInputs {
  Tensor q, k, v;        // [N_q|N_k, d]
  Tensor pos_q, pos_k;   // absolute encodings; undefined means zero
  Tensor omega;          // [N_q, N_k] positive relative-geometry bias; undefined means one
  const GraphMask* graph_mask = nullptr;
};

// Single-head attention: softmax((Q+pos_q)(K+pos_k)^T / sqrt(d) + log(omega)) V,
// optionally restricted to graph_mask neighbours.
AttentionOutput cra(const AttentionInputs& in, bool record_weights = false);

// Multi-head form. Absolute encodings are added to the features before the
// shared head projections, so one d_model-wide encoding serves all heads.
// omega: [heads, N_q, N_k] or undefined. q/k/v may carry one leading batch
// axis (weights recording is only supported unbatched).
AttentionOutput mhcra(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& pos_q,
                      const Tensor& pos_k, const Tensor& omega, const MultiHeadParams& params, int heads,
                      const GraphMask* mask = nullptr, bool record_weights = false,
                      const AttnDropout& drop = {});

// Neighbourhood-restricted softmax: exact zeros off-graph, softmax over the
// neighbour set. Every mask row must have at least one neighbour.
// scores: [..., N_q, N_k].
Tensor graph_softmax(const Tensor& scores, const GraphMask& mask);

// Cross-level attention between feature sets: source rows query target
// rows/values under the bipartite mask slice. Queries whose mask row is empty
// fall back to their own input row exactly (weights row all zero); the event
// count is available via lcca_fallback_rows().
AttentionOutput mhlcca(const Tensor& source, const Tensor& target, const Tensor& pos_src,
                       const Tensor& pos_tgt, const Tensor& omega, const GraphMask& mask,
                       const MultiHeadParams& params, int heads, bool record_weights = false,
                       const AttnDropout& drop = {});

uint64_t lcca_fallback_rows();
void reset_lcca_fallback_rows();

// [N, d] -> [heads, N, d/heads]; one leading batch axis is preserved.
Tensor split_heads(const Tensor& x, int heads);
Tensor merge_heads(const Tensor& x);

}  // namespace dlct
