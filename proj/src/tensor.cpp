#include "dlct/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace dlct {

namespace {
thread_local Tape* g_active_tape = nullptr;
bool g_finite_checks = false;
}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor shape extents must be positive, got " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  const int64_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(n), value);
  impl->requires_grad = requires_grad;
  return wrap(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return wrap(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::out_of_range("tensor axis out of range");
  return impl_->shape[static_cast<size_t>(axis)];
}

std::span<double> Tensor::mutable_data() { return impl_->data; }

void Tensor::set_requires_grad(bool v) { impl_->requires_grad = v; }

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() requires a scalar tensor, shape is " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::span<const int64_t> index) const {
  if (static_cast<int>(index.size()) != rank()) throw std::invalid_argument("at(): index rank mismatch");
  int64_t flat = 0;
  for (int i = 0; i < rank(); ++i) {
    if (index[i] < 0 || index[i] >= impl_->shape[i]) throw std::out_of_range("at(): index out of bounds");
    flat = flat * impl_->shape[i] + index[i];
  }
  return impl_->data[static_cast<size_t>(flat)];
}

Tensor Tensor::detached_copy() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return wrap(std::move(impl));
}

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<TensorImpl> out, std::function<void()> grad_fn) {
  Tape* t = g_active_tape;
  if (!t) return;
  t->nodes_.push_back(Node{std::move(out), std::move(grad_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward requires a scalar loss");
  }
  // Non-leaf grads are per-sweep scratch: clear them so repeated sweeps give
  // exact, independent contributions that accumulate only at the leaves.
  for (auto& node : nodes_) node.out->grad.clear();
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->out->grad.empty()) continue;  // not on any path from the loss
    it->grad_fn();
  }
}

void backward(const Tensor& loss) {
  Tape* t = Tape::active();
  if (!t) throw std::logic_error("backward called with no active tape");
  t->backward(loss);
}

NoGrad::NoGrad() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoGrad::~NoGrad() { g_active_tape = saved_; }

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

}  // namespace dlct
