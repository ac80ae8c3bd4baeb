#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "tristream/common.hpp"

namespace tristream {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool shape_eq(const Shape& a, const Shape& b);

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the backward pass touches this tensor
  bool requires_grad = false;
};

// Dense row-major tensor handle with value semantics on the handle and
// shared storage underneath. Layout convention across the project is
// [batch, time, height, width, channels].
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) {
    int64_t n = shape_numel(shape);
    impl_ = std::make_shared<TensorImpl<T>>();
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<size_t>(n), fill);
  }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("from_data: " + shape_str(shape) + " does not hold " +
                       std::to_string(data.size()) + " values");
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    return t;
  }

  static Tensor scalar(T v) { return from_data({1}, {v}); }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1)) {
    Tensor t(std::move(shape));
    for (auto& v : t.vec()) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  std::vector<T>& vec() { return impl_->data; }
  const std::vector<T>& vec() const { return impl_->data; }

  T item() const {
    if (numel() != 1) throw ContractError("item(): tensor is not scalar");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  // Accumulation buffer, zero-initialized on first use.
  std::vector<T>& grad_buf() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }
  const std::vector<T>& grad() const {
    if (impl_->grad.empty())
      throw ContractError("grad(): no gradient recorded for this tensor");
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  // Same value, cut off from gradient tracking.
  Tensor detach() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

  Tensor clone() const {
    Tensor t = detach();
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }
  TensorImpl<T>* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

// Linear record of differentiable operations. Ops append in execution order,
// which is a topological order by construction; one backward() pass walks the
// list exactly once in reverse.
template <typename T>
class Tape {
 public:
  struct Record {
    const char* name;
    Tensor<T> output;
    std::function<void()> backward;
  };

  Tape() {
    prev_ = current_;
    current_ = this;
  }
  ~Tape() { current_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_; }

  void record(const char* name, Tensor<T> output, std::function<void()> bwd) {
    records_.push_back({name, std::move(output), std::move(bwd)});
  }

  size_t size() const { return records_.size(); }

  // Seeds d(loss)/d(loss) = 1 and propagates. Each leaf with requires_grad
  // reachable from loss ends up with an accumulated grad buffer.
  void backward_from(Tensor<T> loss) {
    if (loss.numel() != 1)
      throw ContractError("backward: loss must be scalar, got " +
                          shape_str(loss.shape()));
    if (records_.empty()) throw ContractError("backward: tape is empty");
    loss.grad_buf()[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (!it->output.has_grad()) continue;  // not an ancestor of the loss
      it->backward();
    }
  }

 private:
  std::vector<Record> records_;
  Tape* prev_ = nullptr;
  static thread_local Tape* current_;
};

template <typename T>
thread_local Tape<T>* Tape<T>::current_ = nullptr;

// True when an op with these inputs should be recorded.
template <typename T>
bool tracing(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::current() == nullptr) return false;
  for (const Tensor<T>* t : inputs)
    if ((*t).requires_grad()) return true;
  return false;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (Tape<T>::current() == nullptr)
    throw ContractError("backward: no active tape");
  Tape<T>::current()->backward_from(loss);
}

}  // namespace tristream
