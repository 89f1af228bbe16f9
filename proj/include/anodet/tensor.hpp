#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "anodet/common.hpp"

namespace anodet {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

template <class T>
class Tensor;

namespace detail {

template <class T>
struct TensorImpl;

// One recorded operation. `apply` accumulates (+=) the contribution of the
// output gradient into each parent buffer; a null buffer means that parent
// does not take part in differentiation.
template <class T>
struct GradNode {
  const char* op = "";
  std::vector<Tensor<T>> parents;
  std::weak_ptr<TensorImpl<T>> out;
  std::function<void(const T* out_grad, const std::vector<T*>& parent_grads)> apply;
};

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // empty until first accumulation
  std::shared_ptr<GradNode<T>> node;
};

}  // namespace detail

bool grad_enabled();
void set_grad_enabled(bool on);

// Disables tape recording for the current scope (inference paths).
struct NoGradGuard {
  NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense n-d array of T with an optional reverse-mode tape node. Copies are
// shallow (shared storage); ops never mutate tensors that already sit in a
// recorded graph.
template <class T>
class Tensor {
 public:
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor from_vector(const Shape& shape, std::vector<T> values,
                            bool requires_grad = false);
  static Tensor rand_uniform(const Shape& shape, Rng& rng, T lo, T hi,
                             bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  size_t rank() const { return impl_->shape.size(); }
  int64_t dim(size_t i) const { return impl_->shape.at(i); }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  std::vector<T>& vec() { return impl_->data; }
  const std::vector<T>& vec() const { return impl_->data; }

  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }
  bool needs_grad() const { return impl_ && (impl_->requires_grad || impl_->node != nullptr); }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const std::vector<T>& grad() const;
  std::vector<T>& mutable_grad();
  void zero_grad();

  // deep copy, detached from any recorded graph
  Tensor clone() const;

  Impl* impl() const { return impl_.get(); }
  const std::shared_ptr<Impl>& impl_ptr() const { return impl_; }
  const std::shared_ptr<detail::GradNode<T>>& node() const { return impl_->node; }

  // internal: used by op recording
  void attach_node(std::shared_ptr<detail::GradNode<T>> n) { impl_->node = std::move(n); }

 private:
  std::shared_ptr<Impl> impl_;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  template <class U>
  friend Tensor<U> make_tensor(Shape shape, std::vector<U> data);
};

template <class T>
Tensor<T> make_tensor(Shape shape, std::vector<T> data);

// Records `fn` as the backward of a fresh tensor when the tape is live and
// any parent participates in differentiation.
template <class T>
Tensor<T> record_op(const char* op, Shape shape, std::vector<T> data,
                    std::vector<Tensor<T>> parents,
                    std::function<void(const T*, const std::vector<T*>&)> fn);

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// reachable tensor with requires_grad set; repeated calls keep accumulating.
template <class T>
void backward(const Tensor<T>& loss);

// ----- elementwise / reduction ops (all differentiable) -----

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <class T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);
template <class T> Tensor<T> neg(const Tensor<T>& a);
template <class T> Tensor<T> abs_val(const Tensor<T>& a);
template <class T> Tensor<T> sum(const Tensor<T>& a);
template <class T> Tensor<T> mean(const Tensor<T>& a);

enum class Activation { kRelu, kLeakyRelu };

template <class T>
Tensor<T> activation(const Tensor<T>& x, Activation kind, T negative_slope = T(0));
template <class T> Tensor<T> relu(const Tensor<T>& x);
template <class T> Tensor<T> leaky_relu(const Tensor<T>& x, T negative_slope);

// concatenation along the channel axis of [B,C,T,H,W] tensors
template <class T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

// narrow along the temporal axis (dim 2) of a [B,C,T,H,W] tensor
template <class T> Tensor<T> slice_temporal(const Tensor<T>& x, int64_t t0, int64_t len);

}  // namespace anodet
