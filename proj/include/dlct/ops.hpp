#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dlct/rng.hpp"
#include "dlct/tensor.hpp"

namespace dlct {

// Elementwise ops use trailing-dimension broadcasting: shapes are aligned at
// the last axis, missing leading extents are treated as 1, and extent-1 axes
// stretch. Gradients are reduced back to each input's shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // domain error on non-positive input
Tensor clamp_min(const Tensor& a, double floor);  // grad passes only where a > floor

// Batched matrix product: [..., m, k] x [..., k, n] -> [..., m, n] with
// broadcasting over the leading batch extents.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor permute(const Tensor& a, std::vector<int> perm);
Tensor transpose_last2(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, int axis);

// Row gather from a [V, d...] table; output [ids.size(), d...].
Tensor rows(const Tensor& table, const std::vector<int64_t>& ids);
// Per-row column pick from [R, C]; output [R].
Tensor pick(const Tensor& x, const std::vector<int64_t>& cols);

// Max-subtraction stabilized; rows sum to 1 and are strictly positive for
// finite input.
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax_last(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// Inverted-scaling dropout; identity when p == 0 or training == false.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::string worst;  // "leaf#i[j]" of the worst element
};

// Central-difference check of d(f)/d(leaves) against the tape gradients.
// f must rebuild its forward pass from the current leaf data on every call
// and be deterministic (verified by a two-run bitwise comparison).
GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<const Tensor> leaves,
                           double h = 1e-5, double tol = 1e-4);
GradCheckReport grad_check(const std::function<Tensor()>& f, const Tensor& x,
                           double h = 1e-5, double tol = 1e-4);

}  // namespace dlct
