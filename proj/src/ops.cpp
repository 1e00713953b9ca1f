#include "dlct/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace dlct {

namespace {

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

std::shared_ptr<TensorImpl> alloc_out(Shape shape, bool rec) {
  auto impl = std::make_shared<TensorImpl>();
  const int64_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(n), 0.0);
  impl->requires_grad = rec;
  impl->leaf = !rec;
  return impl;
}

void finish(const std::shared_ptr<TensorImpl>& out, const char* op) {
  if (!finite_checks_enabled()) return;
  for (size_t i = 0; i < out->data.size(); ++i) {
    if (!std::isfinite(out->data[i])) {
      throw std::domain_error(std::string(op) + ": non-finite output at index " + std::to_string(i));
    }
  }
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const int r = static_cast<int>(std::max(a.size(), b.size()));
  Shape out(static_cast<size_t>(r));
  for (int j = r - 1, ia = static_cast<int>(a.size()) - 1, ib = static_cast<int>(b.size()) - 1; j >= 0;
       --j, --ia, --ib) {
    const int64_t ea = ia >= 0 ? a[static_cast<size_t>(ia)] : 1;
    const int64_t eb = ib >= 0 ? b[static_cast<size_t>(ib)] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                                  " are not broadcast-compatible");
    }
    out[static_cast<size_t>(j)] = std::max(ea, eb);
  }
  return out;
}

// Row-major strides of `in` aligned to the trailing axes of an `out_rank`
// shape, with 0 on broadcast (missing or extent-1) axes.
std::vector<int64_t> broadcast_strides(const Shape& in, int out_rank) {
  std::vector<int64_t> str(static_cast<size_t>(out_rank), 0);
  int64_t s = 1;
  for (int j = out_rank - 1, i = static_cast<int>(in.size()) - 1; j >= 0; --j, --i) {
    const int64_t ext = i >= 0 ? in[static_cast<size_t>(i)] : 1;
    str[static_cast<size_t>(j)] = ext == 1 ? 0 : s;
    s *= ext;
  }
  return str;
}

// Visits every output element of `os`, tracking the broadcast offsets into a
// and b incrementally.
template <class Fn>
void for_each_bcast2(const Shape& os, const Shape& as, const Shape& bs, Fn&& fn) {
  const int r = static_cast<int>(os.size());
  const auto astr = broadcast_strides(as, r);
  const auto bstr = broadcast_strides(bs, r);
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  const int64_t total = shape_numel(os);
  int64_t ai = 0, bi = 0;
  for (int64_t oi = 0; oi < total; ++oi) {
    fn(oi, ai, bi);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[static_cast<size_t>(d)];
      ai += astr[static_cast<size_t>(d)];
      bi += bstr[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
      ai -= astr[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
      bi -= bstr[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }
}

// Sums a gradient over the broadcast axes back down to `target` shape.
void reduce_into(const std::vector<double>& g, const Shape& gshape, std::vector<double>& acc,
                 const Shape& target) {
  if (gshape == target) {
    for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    return;
  }
  for_each_bcast2(gshape, target, target, [&](int64_t oi, int64_t ti, int64_t) { acc[static_cast<size_t>(ti)] += g[static_cast<size_t>(oi)]; });
}

template <class FwdFn, class BwdFn>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdFn fwd, BwdFn bwd) {
  const Shape os = broadcast_shape(a.shape(), b.shape(), name);
  const bool rec = recording({&a, &b});
  auto out = alloc_out(os, rec);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out->data.data();
  if (a.shape() == b.shape()) {
    const int64_t n = out->numel();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  } else {
    for_each_bcast2(os, a.shape(), b.shape(),
                    [&](int64_t oi, int64_t ai, int64_t bi) { po[oi] = fwd(pa[ai], pb[bi]); });
  }
  finish(out, name);
  if (rec) {
    auto ia = a.impl();
    auto ib = b.impl();
    Tape::record(out, [out, ia, ib, bwd]() {
      const auto& g = out->grad;
      std::vector<double> ga, gb;
      const bool wa = ia->requires_grad;
      const bool wb = ib->requires_grad;
      if (wa) ga.assign(g.size(), 0.0);
      if (wb) gb.assign(g.size(), 0.0);
      if (ia->shape == ib->shape) {
        for (size_t i = 0; i < g.size(); ++i) {
          double da, db;
          bwd(g[i], ia->data[i], ib->data[i], da, db);
          if (wa) ga[i] = da;
          if (wb) gb[i] = db;
        }
      } else {
        for_each_bcast2(out->shape, ia->shape, ib->shape, [&](int64_t oi, int64_t aii, int64_t bii) {
          double da, db;
          bwd(g[static_cast<size_t>(oi)], ia->data[static_cast<size_t>(aii)], ib->data[static_cast<size_t>(bii)], da, db);
          if (wa) ga[static_cast<size_t>(oi)] = da;
          if (wb) gb[static_cast<size_t>(oi)] = db;
        });
      }
      if (wa) {
        ia->ensure_grad();
        reduce_into(ga, out->shape, ia->grad, ia->shape);
      }
      if (wb) {
        ib->ensure_grad();
        reduce_into(gb, out->shape, ib->grad, ib->shape);
      }
    });
  }
  return Tensor::wrap(out);
}

template <class FwdFn, class GradFn>
Tensor unary_op(const char* name, const Tensor& a, FwdFn fwd, GradFn dfn) {
  const bool rec = recording({&a});
  auto out = alloc_out(a.shape(), rec);
  const double* pa = a.data().data();
  double* po = out->data.data();
  const int64_t n = out->numel();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  finish(out, name);
  if (rec) {
    auto ia = a.impl();
    Tape::record(out, [out, ia, dfn]() {
      if (!ia->requires_grad) return;
      ia->ensure_grad();
      for (size_t i = 0; i < out->grad.size(); ++i) {
        ia->grad[i] += dfn(out->grad[i], ia->data[i], out->data[i]);
      }
    });
  }
  return Tensor::wrap(out);
}

// C[m,n] += A[m,k] * B[k,n]
void mm_nn(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    double* c = C + i * n;
    for (int64_t l = 0; l < k; ++l) {
      const double av = a[l];
      const double* b = B + l * n;
      for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void mm_nt(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    double* c = C + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* b = B + j * k;
      double acc = 0.0;
      for (int64_t l = 0; l < k; ++l) acc += a[l] * b[l];
      c[j] += acc;
    }
  }
}

// C[m,n] += A[l,m]^T * B[l,n]
void mm_tn(const double* A, const double* B, double* C, int64_t l_ext, int64_t m, int64_t n) {
  for (int64_t l = 0; l < l_ext; ++l) {
    const double* a = A + l * m;
    const double* b = B + l * n;
    for (int64_t i = 0; i < m; ++i) {
      const double av = a[i];
      double* c = C + i * n;
      for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(
      "scale", a, [c](double x) { return c * x; }, [c](double g, double, double) { return c * g; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      "add_scalar", a, [c](double x) { return x + c; }, [](double g, double, double) { return g; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); }, [](double g, double, double y) { return g * y; });
}

Tensor log(const Tensor& a) {
  const double* p = a.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (!(p[i] > 0.0)) {
      throw std::domain_error("log: non-positive input at index " + std::to_string(i) + " (value " +
                              std::to_string(p[i]) + ")");
    }
  }
  return unary_op(
      "log", a, [](double x) { return std::log(x); }, [](double g, double x, double) { return g / x; });
}

Tensor clamp_min(const Tensor& a, double floor) {
  return unary_op(
      "clamp_min", a, [floor](double x) { return x > floor ? x : floor; },
      [floor](double g, double x, double) { return x > floor ? g : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw std::invalid_argument("matmul: inputs must have rank >= 2, got " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const int64_t m = a.shape()[a.rank() - 2];
  const int64_t k = a.shape()[a.rank() - 1];
  const int64_t kb = b.shape()[b.rank() - 2];
  const int64_t n = b.shape()[b.rank() - 1];
  if (k != kb) {
    throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  const Shape batch = broadcast_shape(batch_a, batch_b, "matmul");
  Shape os = batch;
  os.push_back(m);
  os.push_back(n);

  const bool rec = recording({&a, &b});
  auto out = alloc_out(os, rec);

  const int64_t batch_total = shape_numel(batch);
  const auto astr = broadcast_strides(batch_a, static_cast<int>(batch.size()));
  const auto bstr = broadcast_strides(batch_b, static_cast<int>(batch.size()));

  // Walks the batch odometer producing slice offsets into a, b and out.
  // Captures by value: the tape closure below outlives this frame.
  auto for_each_batch = [batch, batch_total, astr, bstr, m, k, n](auto&& fn) {
    std::vector<int64_t> idx(batch.size(), 0);
    int64_t ai = 0, bi = 0;
    for (int64_t p = 0; p < batch_total; ++p) {
      fn(p, ai * (/*slice*/ m * k), bi * (k * n));
      for (int d = static_cast<int>(batch.size()) - 1; d >= 0; --d) {
        ++idx[static_cast<size_t>(d)];
        ai += astr[static_cast<size_t>(d)];
        bi += bstr[static_cast<size_t>(d)];
        if (idx[static_cast<size_t>(d)] < batch[static_cast<size_t>(d)]) break;
        ai -= astr[static_cast<size_t>(d)] * batch[static_cast<size_t>(d)];
        bi -= bstr[static_cast<size_t>(d)] * batch[static_cast<size_t>(d)];
        idx[static_cast<size_t>(d)] = 0;
      }
    }
  };

  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out->data.data();
  for_each_batch([&](int64_t p, int64_t aoff, int64_t boff) {
    mm_nn(pa + aoff, pb + boff, po + p * m * n, m, k, n);
  });
  finish(out, "matmul");

  if (rec) {
    auto ia = a.impl();
    auto ib = b.impl();
    Tape::record(out, [out, ia, ib, m, k, n, for_each_batch]() {
      const double* g = out->grad.data();
      if (ia->requires_grad) ia->ensure_grad();
      if (ib->requires_grad) ib->ensure_grad();
      for_each_batch([&](int64_t p, int64_t aoff, int64_t boff) {
        const double* gp = g + p * m * n;
        if (ia->requires_grad) {
          mm_nt(gp, ib->data.data() + boff, ia->grad.data() + aoff, m, n, k);
        }
        if (ib->requires_grad) {
          mm_tn(ia->data.data() + aoff, gp, ib->grad.data() + boff, m, k, n);
        }
      });
    });
  }
  return Tensor::wrap(out);
}

Tensor permute(const Tensor& a, std::vector<int> perm) {
  const int r = a.rank();
  if (static_cast<int>(perm.size()) != r) throw std::invalid_argument("permute: perm rank mismatch");
  std::vector<bool> seen(static_cast<size_t>(r), false);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[static_cast<size_t>(p)]) throw std::invalid_argument("permute: invalid permutation");
    seen[static_cast<size_t>(p)] = true;
  }
  Shape os(static_cast<size_t>(r));
  for (int d = 0; d < r; ++d) os[static_cast<size_t>(d)] = a.shape()[static_cast<size_t>(perm[static_cast<size_t>(d)])];

  std::vector<int64_t> in_strides(static_cast<size_t>(r));
  {
    int64_t s = 1;
    for (int d = r - 1; d >= 0; --d) {
      in_strides[static_cast<size_t>(d)] = s;
      s *= a.shape()[static_cast<size_t>(d)];
    }
  }
  std::vector<int64_t> walk(static_cast<size_t>(r));
  for (int d = 0; d < r; ++d) walk[static_cast<size_t>(d)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(d)])];

  const bool rec = recording({&a});
  auto out = alloc_out(os, rec);
  const double* pa = a.data().data();
  double* po = out->data.data();
  const int64_t total = out->numel();
  {
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t src = 0;
    for (int64_t oi = 0; oi < total; ++oi) {
      po[oi] = pa[src];
      for (int d = r - 1; d >= 0; --d) {
        ++idx[static_cast<size_t>(d)];
        src += walk[static_cast<size_t>(d)];
        if (idx[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
        src -= walk[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
        idx[static_cast<size_t>(d)] = 0;
      }
    }
  }
  if (rec) {
    auto ia = a.impl();
    Tape::record(out, [out, ia, os, walk, r]() {
      if (!ia->requires_grad) return;
      ia->ensure_grad();
      std::vector<int64_t> idx(static_cast<size_t>(r), 0);
      int64_t src = 0;
      const int64_t total2 = out->numel();
      for (int64_t oi = 0; oi < total2; ++oi) {
        ia->grad[static_cast<size_t>(src)] += out->grad[static_cast<size_t>(oi)];
        for (int d = r - 1; d >= 0; --d) {
          ++idx[static_cast<size_t>(d)];
          src += walk[static_cast<size_t>(d)];
          if (idx[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
          src -= walk[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
          idx[static_cast<size_t>(d)] = 0;
        }
      }
    });
  }
  return Tensor::wrap(out);
}

Tensor transpose_last2(const Tensor& a) {
  std::vector<int> perm(static_cast<size_t>(a.rank()));
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, std::move(perm));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                                " changes element count");
  }
  const bool rec = recording({&a});
  auto out = alloc_out(std::move(shape), rec);
  out->data = std::vector<double>(a.data().begin(), a.data().end());
  if (rec) {
    auto ia = a.impl();
    Tape::record(out, [out, ia]() {
      if (!ia->requires_grad) return;
      ia->ensure_grad();
      for (size_t i = 0; i < out->grad.size(); ++i) ia->grad[i] += out->grad[i];
    });
  }
  return Tensor::wrap(out);
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const int r = parts[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::invalid_argument("concat: axis out of range");
  Shape os = parts[0].shape();
  int64_t ext = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != r) throw std::invalid_argument("concat: rank mismatch");
    for (int d = 0; d < r; ++d) {
      if (d != axis && t.shape()[static_cast<size_t>(d)] != os[static_cast<size_t>(d)]) {
        throw std::invalid_argument("concat: shape mismatch off the concat axis");
      }
    }
    ext += t.shape()[static_cast<size_t>(axis)];
  }
  os[static_cast<size_t>(axis)] = ext;

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= os[static_cast<size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= os[static_cast<size_t>(d)];

  bool rec = false;
  if (Tape::active()) {
    for (const Tensor& t : parts) rec = rec || t.requires_grad();
  }
  auto out = alloc_out(os, rec);
  double* po = out->data.data();
  const int64_t out_row = ext * inner;
  int64_t col0 = 0;
  for (const Tensor& t : parts) {
    const int64_t te = t.shape()[static_cast<size_t>(axis)];
    const double* pt = t.data().data();
    for (int64_t o = 0; o < outer; ++o) {
      std::memcpy(po + o * out_row + col0 * inner, pt + o * te * inner,
                  static_cast<size_t>(te * inner) * sizeof(double));
    }
    col0 += te;
  }
  if (rec) {
    std::vector<std::shared_ptr<TensorImpl>> ins;
    std::vector<int64_t> exts;
    for (const Tensor& t : parts) {
      ins.push_back(t.impl());
      exts.push_back(t.shape()[static_cast<size_t>(axis)]);
    }
    Tape::record(out, [out, ins, exts, outer, inner, out_row]() {
      int64_t c0 = 0;
      for (size_t pi = 0; pi < ins.size(); ++pi) {
        const int64_t te = exts[pi];
        auto& in = ins[pi];
        if (in->requires_grad) {
          in->ensure_grad();
          for (int64_t o = 0; o < outer; ++o) {
            const double* g = out->grad.data() + o * out_row + c0 * inner;
            double* gi = in->grad.data() + o * te * inner;
            for (int64_t i = 0; i < te * inner; ++i) gi[i] += g[i];
          }
        }
        c0 += te;
      }
    });
  }
  return Tensor::wrap(out);
}

Tensor rows(const Tensor& table, const std::vector<int64_t>& ids) {
  if (table.rank() < 1) throw std::invalid_argument("rows: table must have rank >= 1");
  const int64_t v = table.shape()[0];
  const int64_t row = table.numel() / v;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= v) {
      throw std::out_of_range("rows: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                              " outside table of " + std::to_string(v) + " rows");
    }
  }
  Shape os = table.shape();
  os[0] = static_cast<int64_t>(ids.size());
  const bool rec = recording({&table});
  auto out = alloc_out(os, rec);
  const double* pt = table.data().data();
  double* po = out->data.data();
  for (size_t i = 0; i < ids.size(); ++i) {
    std::memcpy(po + static_cast<int64_t>(i) * row, pt + ids[i] * row, static_cast<size_t>(row) * sizeof(double));
  }
  if (rec) {
    auto it = table.impl();
    Tape::record(out, [out, it, ids, row]() {
      if (!it->requires_grad) return;
      it->ensure_grad();
      for (size_t i = 0; i < ids.size(); ++i) {
        const double* g = out->grad.data() + static_cast<int64_t>(i) * row;
        double* gt = it->grad.data() + ids[i] * row;
        for (int64_t j = 0; j < row; ++j) gt[j] += g[j];
      }
    });
  }
  return Tensor::wrap(out);
}

Tensor pick(const Tensor& x, const std::vector<int64_t>& cols) {
  if (x.rank() != 2) throw std::invalid_argument("pick: input must be [rows, cols]");
  const int64_t r = x.shape()[0];
  const int64_t c = x.shape()[1];
  if (static_cast<int64_t>(cols.size()) != r) throw std::invalid_argument("pick: one column index per row required");
  for (int64_t i = 0; i < r; ++i) {
    if (cols[static_cast<size_t>(i)] < 0 || cols[static_cast<size_t>(i)] >= c) {
      throw std::out_of_range("pick: column " + std::to_string(cols[static_cast<size_t>(i)]) + " out of range at row " +
                              std::to_string(i));
    }
  }
  const bool rec = recording({&x});
  auto out = alloc_out({r}, rec);
  const double* px = x.data().data();
  for (int64_t i = 0; i < r; ++i) out->data[static_cast<size_t>(i)] = px[i * c + cols[static_cast<size_t>(i)]];
  if (rec) {
    auto ix = x.impl();
    Tape::record(out, [out, ix, cols, c]() {
      if (!ix->requires_grad) return;
      ix->ensure_grad();
      for (size_t i = 0; i < cols.size(); ++i) {
        ix->grad[i * static_cast<size_t>(c) + static_cast<size_t>(cols[i])] += out->grad[i];
      }
    });
  }
  return Tensor::wrap(out);
}

namespace {

Tensor softmax_last(const Tensor& x) {
  const int64_t d = x.shape()[x.rank() - 1];
  const int64_t rows_n = x.numel() / d;
  const bool rec = recording({&x});
  auto out = alloc_out(x.shape(), rec);
  const double* px = x.data().data();
  double* po = out->data.data();
  for (int64_t r = 0; r < rows_n; ++r) {
    const double* xr = px + r * d;
    double* yr = po + r * d;
    double mx = xr[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const double inv = 1.0 / sum;
    for (int64_t j = 0; j < d; ++j) yr[j] *= inv;
  }
  finish(out, "softmax");
  if (rec) {
    auto ix = x.impl();
    Tape::record(out, [out, ix, d, rows_n]() {
      if (!ix->requires_grad) return;
      ix->ensure_grad();
      for (int64_t r = 0; r < rows_n; ++r) {
        const double* y = out->data.data() + r * d;
        const double* g = out->grad.data() + r * d;
        double* gx = ix->grad.data() + r * d;
        double dot = 0.0;
        for (int64_t j = 0; j < d; ++j) dot += g[j] * y[j];
        for (int64_t j = 0; j < d; ++j) gx[j] += y[j] * (g[j] - dot);
      }
    });
  }
  return Tensor::wrap(out);
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::invalid_argument("softmax: axis out of range");
  if (axis == r - 1) return softmax_last(x);
  std::vector<int> perm;
  for (int d = 0; d < r; ++d) {
    if (d != axis) perm.push_back(d);
  }
  perm.push_back(axis);
  std::vector<int> inv(static_cast<size_t>(r));
  for (int d = 0; d < r; ++d) inv[static_cast<size_t>(perm[static_cast<size_t>(d)])] = d;
  return permute(softmax_last(permute(x, perm)), inv);
}

Tensor log_softmax_last(const Tensor& x) {
  const int64_t d = x.shape()[x.rank() - 1];
  const int64_t rows_n = x.numel() / d;
  const bool rec = recording({&x});
  auto out = alloc_out(x.shape(), rec);
  const double* px = x.data().data();
  double* po = out->data.data();
  for (int64_t r = 0; r < rows_n; ++r) {
    const double* xr = px + r * d;
    double* yr = po + r * d;
    double mx = xr[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < d; ++j) sum += std::exp(xr[j] - mx);
    const double lse = mx + std::log(sum);
    for (int64_t j = 0; j < d; ++j) yr[j] = xr[j] - lse;
  }
  finish(out, "log_softmax");
  if (rec) {
    auto ix = x.impl();
    Tape::record(out, [out, ix, d, rows_n]() {
      if (!ix->requires_grad) return;
      ix->ensure_grad();
      for (int64_t r = 0; r < rows_n; ++r) {
        const double* y = out->data.data() + r * d;
        const double* g = out->grad.data() + r * d;
        double* gx = ix->grad.data() + r * d;
        double gsum = 0.0;
        for (int64_t j = 0; j < d; ++j) gsum += g[j];
        for (int64_t j = 0; j < d; ++j) gx[j] += g[j] - std::exp(y[j]) * gsum;
      }
    });
  }
  return Tensor::wrap(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const int64_t d = x.shape()[x.rank() - 1];
  if (gain.numel() != d || bias.numel() != d) {
    throw std::invalid_argument("layer_norm: gain/bias must match the last axis extent " + std::to_string(d));
  }
  const int64_t rows_n = x.numel() / d;
  const bool rec = recording({&x, &gain, &bias});
  auto out = alloc_out(x.shape(), rec);
  const double* px = x.data().data();
  const double* pg = gain.data().data();
  const double* pb = bias.data().data();
  double* po = out->data.data();

  std::vector<double> xhat;
  std::vector<double> inv_std;
  if (rec) {
    xhat.resize(static_cast<size_t>(x.numel()));
    inv_std.resize(static_cast<size_t>(rows_n));
  }
  for (int64_t r = 0; r < rows_n; ++r) {
    const double* xr = px + r * d;
    double* yr = po + r * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * inv;
      yr[j] = pg[j] * h + pb[j];
      if (rec) xhat[static_cast<size_t>(r * d + j)] = h;
    }
    if (rec) inv_std[static_cast<size_t>(r)] = inv;
  }
  finish(out, "layer_norm");
  if (rec) {
    auto ix = x.impl();
    auto ig = gain.impl();
    auto ib = bias.impl();
    Tape::record(out, [out, ix, ig, ib, d, rows_n, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
      const double dd = static_cast<double>(d);
      if (ix->requires_grad) ix->ensure_grad();
      if (ig->requires_grad) ig->ensure_grad();
      if (ib->requires_grad) ib->ensure_grad();
      for (int64_t r = 0; r < rows_n; ++r) {
        const double* g = out->grad.data() + r * d;
        const double* h = xhat.data() + r * d;
        if (ig->requires_grad || ib->requires_grad) {
          for (int64_t j = 0; j < d; ++j) {
            if (ig->requires_grad) ig->grad[static_cast<size_t>(j)] += g[j] * h[j];
            if (ib->requires_grad) ib->grad[static_cast<size_t>(j)] += g[j];
          }
        }
        if (ix->requires_grad) {
          double sum_dh = 0.0, sum_dh_h = 0.0;
          for (int64_t j = 0; j < d; ++j) {
            const double dh = g[j] * ig->data[static_cast<size_t>(j)];
            sum_dh += dh;
            sum_dh_h += dh * h[j];
          }
          const double inv = inv_std[static_cast<size_t>(r)];
          double* gx = ix->grad.data() + r * d;
          for (int64_t j = 0; j < d; ++j) {
            const double dh = g[j] * ig->data[static_cast<size_t>(j)];
            gx[j] += inv * (dh - sum_dh / dd - h[j] * sum_dh_h / dd);
          }
        }
      }
    });
  }
  return Tensor::wrap(out);
}

Tensor sum_all(const Tensor& x) {
  const bool rec = recording({&x});
  auto out = alloc_out({1}, rec);
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out->data[0] = acc;
  if (rec) {
    auto ix = x.impl();
    Tape::record(out, [out, ix]() {
      if (!ix->requires_grad) return;
      ix->ensure_grad();
      const double g = out->grad[0];
      for (auto& v : ix->grad) v += g;
    });
  }
  return Tensor::wrap(out);
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  const bool rec = recording({&x});
  auto out = alloc_out(x.shape(), rec);
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(static_cast<size_t>(x.numel()));
  for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : 0.0;
  const double* px = x.data().data();
  for (int64_t i = 0; i < x.numel(); ++i) out->data[static_cast<size_t>(i)] = px[i] * mask[static_cast<size_t>(i)];
  if (rec) {
    auto ix = x.impl();
    Tape::record(out, [out, ix, mask = std::move(mask)]() {
      if (!ix->requires_grad) return;
      ix->ensure_grad();
      for (size_t i = 0; i < mask.size(); ++i) ix->grad[i] += out->grad[i] * mask[i];
    });
  }
  return Tensor::wrap(out);
}

GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<const Tensor> leaves, double h,
                           double tol) {
  for (const Tensor& l : leaves) {
    if (!l.requires_grad() || !l.is_leaf()) {
      throw std::invalid_argument("grad_check: every checked tensor must be a leaf with requires_grad");
    }
  }
  // Two-run determinism probe.
  double probe1, probe2;
  {
    NoGrad ng;
    probe1 = f().item();
    probe2 = f().item();
  }
  if (std::memcmp(&probe1, &probe2, sizeof(double)) != 0) {
    throw std::runtime_error("grad_check: function is non-deterministic (two-run mismatch)");
  }

  std::vector<std::vector<double>> analytic;
  {
    for (const Tensor& l : leaves) const_cast<Tensor&>(l).zero_grad();
    Tape tape;
    Tensor loss = f();
    tape.backward(loss);
    for (const Tensor& l : leaves) analytic.emplace_back(l.grad().begin(), l.grad().end());
  }

  GradCheckReport report;
  report.max_rel_err = 0.0;
  NoGrad ng;
  for (size_t li = 0; li < leaves.size(); ++li) {
    Tensor leaf = leaves[li];
    auto d = leaf.mutable_data();
    for (size_t j = 0; j < d.size(); ++j) {
      const double saved = d[j];
      d[j] = saved + h;
      const double f_plus = f().item();
      d[j] = saved - h;
      const double f_minus = f().item();
      d[j] = saved;
      const double fd = (f_plus - f_minus) / (2.0 * h);
      const double a = analytic[li][j];
      const double denom = std::max({std::fabs(a), std::fabs(fd), 1e-3});
      const double rel = std::fabs(a - fd) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = "leaf" + std::to_string(li) + "[" + std::to_string(j) + "] analytic=" + std::to_string(a) +
                       " fd=" + std::to_string(fd);
      }
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

GradCheckReport grad_check(const std::function<Tensor()>& f, const Tensor& x, double h, double tol) {
  const Tensor arr[1] = {x};
  return grad_check(f, std::span<const Tensor>(arr, 1), h, tol);
}

}  // namespace dlct
