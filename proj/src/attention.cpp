#include "dlct/attention.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>

#include "dlct/ops.hpp"

namespace dlct {

namespace {

std::atomic<uint64_t> g_lcca_fallbacks{0};

constexpr double kMaskNeg = -1e9;

// (neg additive mask, multiplicative mask) as constant tensors [n_q, n_k].
std::pair<Tensor, Tensor> mask_tensors(const GraphMask& mask) {
  std::vector<double> neg(mask.allow.size());
  std::vector<double> mult(mask.allow.size());
  for (size_t i = 0; i < mask.allow.size(); ++i) {
    neg[i] = mask.allow[i] ? 0.0 : kMaskNeg;
    mult[i] = mask.allow[i] ? 1.0 : 0.0;
  }
  return {Tensor::from_data({mask.n_q, mask.n_k}, std::move(neg)),
          Tensor::from_data({mask.n_q, mask.n_k}, std::move(mult))};
}

AttentionWeights snapshot_weights(const Tensor& w) {
  if (w.rank() != 3) throw std::logic_error("attention weights recording requires unbatched input");
  AttentionWeights out;
  out.heads = w.shape()[0];
  out.n_q = w.shape()[1];
  out.n_k = w.shape()[2];
  out.values.assign(w.data().begin(), w.data().end());
  return out;
}

void check_omega_positive(const Tensor& omega) {
  for (double v : omega.data()) {
    if (!(v > 0.0)) throw std::domain_error("attention: omega must be strictly positive");
  }
}

// Shared score->weights path. q/k are per-head tensors [(B,) heads, N, dh];
// omega [heads, N_q, N_k] or undefined; mask optional. error_on_empty selects
// the graph_softmax contract; otherwise empty rows get all-zero weight rows.
Tensor attention_weights(const Tensor& qh, const Tensor& kh, const Tensor& omega, const GraphMask* mask,
                         bool error_on_empty) {
  const int64_t dh = qh.shape()[qh.rank() - 1];
  Tensor scores = scale(matmul(qh, transpose_last2(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (omega.defined()) scores = add(scores, log(omega));
  if (!mask) return softmax(scores, -1);
  if (error_on_empty && mask->any_row_empty()) {
    throw std::runtime_error("graph_softmax: mask row with no neighbours (self-loop guarantee violated)");
  }
  auto [neg, mult] = mask_tensors(*mask);
  return mul(softmax(add(scores, neg), -1), mult);
}

}  // namespace

bool GraphMask::row_empty(int64_t i) const {
  for (int64_t j = 0; j < n_k; ++j) {
    if (allow[static_cast<size_t>(i * n_k + j)]) return false;
  }
  return true;
}

bool GraphMask::any_row_empty() const {
  for (int64_t i = 0; i < n_q; ++i) {
    if (row_empty(i)) return true;
  }
  return false;
}

GraphMask GraphMask::full(int64_t n_q, int64_t n_k) {
  GraphMask m;
  m.n_q = n_q;
  m.n_k = n_k;
  m.allow.assign(static_cast<size_t>(n_q * n_k), 1);
  return m;
}

GraphMask GraphMask::causal(int64_t t) {
  GraphMask m;
  m.n_q = t;
  m.n_k = t;
  m.allow.assign(static_cast<size_t>(t * t), 0);
  for (int64_t i = 0; i < t; ++i) {
    for (int64_t j = 0; j <= i; ++j) m.allow[static_cast<size_t>(i * t + j)] = 1;
  }
  return m;
}

Tensor split_heads(const Tensor& x, int heads) {
  const int r = x.rank();
  if (r != 2 && r != 3) throw std::invalid_argument("split_heads: expected [N, d] or [B, N, d]");
  const int64_t d = x.shape()[r - 1];
  if (d % heads != 0) throw std::invalid_argument("split_heads: heads must divide d_model");
  const int64_t dh = d / heads;
  const int64_t n = x.shape()[r - 2];
  if (r == 2) return permute(reshape(x, {n, heads, dh}), {1, 0, 2});
  const int64_t b = x.shape()[0];
  return permute(reshape(x, {b, n, heads, dh}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  const int r = x.rank();
  if (r != 3 && r != 4) throw std::invalid_argument("merge_heads: expected [heads, N, dh] or [B, heads, N, dh]");
  if (r == 3) {
    const int64_t h = x.shape()[0], n = x.shape()[1], dh = x.shape()[2];
    return reshape(permute(x, {1, 0, 2}), {n, h * dh});
  }
  const int64_t b = x.shape()[0], h = x.shape()[1], n = x.shape()[2], dh = x.shape()[3];
  return reshape(permute(x, {0, 2, 1, 3}), {b, n, h * dh});
}

Tensor graph_softmax(const Tensor& scores, const GraphMask& mask) {
  const int r = scores.rank();
  if (r < 2 || scores.shape()[r - 2] != mask.n_q || scores.shape()[r - 1] != mask.n_k) {
    throw std::invalid_argument("graph_softmax: scores/mask shape mismatch");
  }
  if (mask.any_row_empty()) {
    throw std::runtime_error("graph_softmax: mask row with no neighbours (self-loop guarantee violated)");
  }
  auto [neg, mult] = mask_tensors(mask);
  return mul(softmax(add(scores, neg), -1), mult);
}

AttentionOutput cra(const AttentionInputs& in, bool record_weights) {
  if (in.q.rank() != 2 || in.k.rank() != 2 || in.v.rank() != 2) {
    throw std::invalid_argument("cra: q/k/v must be rank-2 [N, d]");
  }
  if (in.q.shape()[1] != in.k.shape()[1] || in.k.shape()[0] != in.v.shape()[0]) {
    throw std::invalid_argument("cra: shape mismatch between q/k/v");
  }
  Tensor q = in.pos_q.defined() ? add(in.q, in.pos_q) : in.q;
  Tensor k = in.pos_k.defined() ? add(in.k, in.pos_k) : in.k;
  Tensor omega;
  if (in.omega.defined()) {
    if (in.omega.rank() != 2) throw std::invalid_argument("cra: omega must be [N_q, N_k]");
    check_omega_positive(in.omega);
    omega = reshape(in.omega, {1, in.omega.shape()[0], in.omega.shape()[1]});
  }
  Tensor qh = reshape(q, {1, q.shape()[0], q.shape()[1]});
  Tensor kh = reshape(k, {1, k.shape()[0], k.shape()[1]});
  Tensor w = attention_weights(qh, kh, omega, in.graph_mask, /*error_on_empty=*/true);
  AttentionOutput out;
  out.values = reshape(matmul(w, reshape(in.v, {1, in.v.shape()[0], in.v.shape()[1]})),
                       {in.q.shape()[0], in.v.shape()[1]});
  if (record_weights) out.weights = snapshot_weights(w);
  return out;
}

AttentionOutput mhcra(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& pos_q,
                      const Tensor& pos_k, const Tensor& omega, const MultiHeadParams& params, int heads,
                      const GraphMask* mask, bool record_weights, const AttnDropout& drop) {
  const int64_t d = q.shape()[q.rank() - 1];
  if (d % heads != 0) throw std::invalid_argument("mhcra: heads must divide d_model");
  if (omega.defined()) {
    if (omega.rank() != 3 || omega.shape()[0] != heads) {
      throw std::invalid_argument("mhcra: omega must be [heads, N_q, N_k]");
    }
    check_omega_positive(omega);
  }
  Tensor q_in = pos_q.defined() ? add(q, pos_q) : q;
  Tensor k_in = pos_k.defined() ? add(k, pos_k) : k;
  Tensor qh = split_heads(matmul(q_in, params.wq), heads);
  Tensor kh = split_heads(matmul(k_in, params.wk), heads);
  Tensor vh = split_heads(matmul(v, params.wv), heads);
  Tensor w = attention_weights(qh, kh, omega, mask, /*error_on_empty=*/true);
  AttentionOutput out;
  if (record_weights) out.weights = snapshot_weights(w);
  if (drop.p > 0.0 && drop.training && drop.rng) w = dropout(w, drop.p, *drop.rng, true);
  out.values = matmul(merge_heads(matmul(w, vh)), params.wo);
  return out;
}

AttentionOutput mhlcca(const Tensor& source, const Tensor& target, const Tensor& pos_src,
                       const Tensor& pos_tgt, const Tensor& omega, const GraphMask& mask,
                       const MultiHeadParams& params, int heads, bool record_weights,
                       const AttnDropout& drop) {
  if (source.rank() != 2 || target.rank() != 2) {
    throw std::invalid_argument("mhlcca: source/target must be rank-2 [N, d]");
  }
  const int64_t n_src = source.shape()[0];
  const int64_t n_tgt = target.shape()[0];
  if (mask.n_q != n_src || mask.n_k != n_tgt) {
    throw std::invalid_argument("mhlcca: mask slice does not match (N_src, N_tgt)");
  }
  const int64_t d = source.shape()[1];
  if (d % heads != 0) throw std::invalid_argument("mhlcca: heads must divide d_model");
  if (omega.defined()) {
    if (omega.rank() != 3 || omega.shape()[0] != heads || omega.shape()[1] != n_src || omega.shape()[2] != n_tgt) {
      throw std::invalid_argument("mhlcca: omega must be [heads, N_src, N_tgt]");
    }
    check_omega_positive(omega);
  }

  int64_t empty_rows = 0;
  for (int64_t i = 0; i < n_src; ++i) {
    if (mask.row_empty(i)) ++empty_rows;
  }

  Tensor q_in = pos_src.defined() ? add(source, pos_src) : source;
  Tensor k_in = pos_tgt.defined() ? add(target, pos_tgt) : target;
  Tensor qh = split_heads(matmul(q_in, params.wq), heads);
  Tensor kh = split_heads(matmul(k_in, params.wk), heads);
  Tensor vh = split_heads(matmul(target, params.wv), heads);
  Tensor w = attention_weights(qh, kh, omega, &mask, /*error_on_empty=*/false);
  AttentionOutput out;
  if (record_weights) out.weights = snapshot_weights(w);
  if (drop.p > 0.0 && drop.training && drop.rng) w = dropout(w, drop.p, *drop.rng, true);
  Tensor attended = matmul(merge_heads(matmul(w, vh)), params.wo);

  if (empty_rows == 0) {
    out.values = attended;
    return out;
  }

  // Queries with no neighbours keep their own input row; their attention rows
  // are all-zero by construction, so gate row-wise between the two.
  g_lcca_fallbacks += static_cast<uint64_t>(empty_rows);
  if (std::getenv("DLCT_VERBOSE")) {
    std::fprintf(stderr, "[dlct] lcca: %lld query row(s) without neighbours fell back to residual\n",
                 static_cast<long long>(empty_rows));
  }
  std::vector<double> gate(static_cast<size_t>(n_src));
  std::vector<double> inv_gate(static_cast<size_t>(n_src));
  for (int64_t i = 0; i < n_src; ++i) {
    const bool empty = mask.row_empty(i);
    gate[static_cast<size_t>(i)] = empty ? 0.0 : 1.0;
    inv_gate[static_cast<size_t>(i)] = empty ? 1.0 : 0.0;
  }
  Tensor g = Tensor::from_data({n_src, 1}, std::move(gate));
  Tensor ig = Tensor::from_data({n_src, 1}, std::move(inv_gate));
  out.values = add(mul(attended, g), mul(source, ig));
  return out;
}

uint64_t lcca_fallback_rows() { return g_lcca_fallbacks.load(); }
void reset_lcca_fallback_rows() { g_lcca_fallbacks.store(0); }

}  // namespace dlct
