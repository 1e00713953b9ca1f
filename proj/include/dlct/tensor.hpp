#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dlct {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool leaf = true;  // false for op outputs; only leaves keep grads across sweeps

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// Value-semantics handle over a shared buffer. A tensor's data is treated as
// immutable once it has been consumed by an op; the grad slot and leaf data
// (parameters, between optimizer steps) are the only mutable parts.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return impl_->numel(); }
  int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(impl_->shape.size()); }

  std::span<const double> data() const { return impl_->data; }
  // Mutable view; valid for leaves only (parameter updates, test perturbations).
  std::span<double> mutable_data();
  std::span<const double> grad() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }
  void drop_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v);
  bool is_leaf() const { return impl_->leaf; }

  double item() const;  // scalar tensors only
  double at(std::span<const int64_t> index) const;

  Tensor detached_copy() const;  // fresh leaf with copied data, no grad

  std::shared_ptr<TensorImpl> impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Define-by-run tape. Ops executed while a tape is active append one node
// each; backward() replays the nodes in exact reverse order. Tapes nest
// (RAII); at most one is active per thread.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Gradients of
  // leaf tensors accumulate additively: a second call without zero_grad
  // doubles them. Non-leaf gradients are scratch, reset per sweep.
  void backward(const Tensor& loss);

  size_t node_count() const { return nodes_.size(); }

  static Tape* active();
  // Records a node; no-op when no tape is active. grad_fn must add the local
  // gradient contribution into each input's grad slot.
  static void record(std::shared_ptr<TensorImpl> out, std::function<void()> grad_fn);

 private:
  struct Node {
    std::shared_ptr<TensorImpl> out;
    std::function<void()> grad_fn;
  };
  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;
};

// Temporarily disables recording (evaluation / decoding paths).
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape* saved_;
};

// Free-function form: backward on the currently active tape.
void backward(const Tensor& loss);

// Debug-mode policing: when enabled, every op output is scanned for NaN/Inf
// and a domain_error is thrown naming the op. Off by default in release use.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

}  // namespace dlct
