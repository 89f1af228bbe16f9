#include "anodet/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace anodet {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream ss;
  ss << "[";
  for (size_t i = 0; i < s.size(); ++i) ss << (i ? "," : "") << s[i];
  ss << "]";
  return ss.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

template <class T>
Tensor<T> make_tensor(Shape shape, std::vector<T> data) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor<T>(std::move(impl));
}

template <class T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
  auto t = make_tensor<T>(shape, std::vector<T>(shape_numel(shape), T(0)));
  t.set_requires_grad(requires_grad);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  auto t = make_tensor<T>(shape, std::vector<T>(shape_numel(shape), value));
  t.set_requires_grad(requires_grad);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return full({}, value, requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::from_vector(const Shape& shape, std::vector<T> values, bool requires_grad) {
  auto t = make_tensor<T>(shape, std::move(values));
  t.set_requires_grad(requires_grad);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::rand_uniform(const Shape& shape, Rng& rng, T lo, T hi, bool requires_grad) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
  return from_vector(shape, std::move(v), requires_grad);
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <class T>
const std::vector<T>& Tensor<T>::grad() const {
  if (!has_grad()) throw std::runtime_error("tensor has no gradient");
  return impl_->grad;
}

template <class T>
std::vector<T>& Tensor<T>::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <class T>
void Tensor<T>::zero_grad() {
  impl_->grad.clear();
}

template <class T>
Tensor<T> Tensor<T>::clone() const {
  auto t = make_tensor<T>(impl_->shape, impl_->data);
  t.set_requires_grad(impl_->requires_grad);
  return t;
}

template <class T>
Tensor<T> record_op(const char* op, Shape shape, std::vector<T> data,
                    std::vector<Tensor<T>> parents,
                    std::function<void(const T*, const std::vector<T*>&)> fn) {
  auto out = make_tensor<T>(std::move(shape), std::move(data));
  bool any = false;
  for (const auto& p : parents) any = any || p.needs_grad();
  if (grad_enabled() && any) {
    auto node = std::make_shared<detail::GradNode<T>>();
    node->op = op;
    node->parents = std::move(parents);
    node->out = out.impl_ptr();
    node->apply = std::move(fn);
    out.attach_node(std::move(node));
    out.set_requires_grad(true);
  }
  return out;
}

template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a defined scalar tensor");

  using Impl = detail::TensorImpl<T>;
  using Node = detail::GradNode<T>;

  // post-order DFS over the ancestor graph; reversed order processes every
  // node before the nodes of its parents
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  {
    struct Frame {
      Node* node;
      size_t next = 0;
    };
    std::vector<Frame> stack;
    if (loss.node()) {
      seen.insert(loss.node().get());
      stack.push_back({loss.node().get()});
    }
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.node->parents.size()) {
        const auto& p = f.node->parents[f.next++];
        Node* pn = p.node() ? p.node().get() : nullptr;
        if (pn && seen.insert(pn).second) stack.push_back({pn});
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<Impl*, std::vector<T>> acc;
  acc[loss.impl()] = {T(1)};

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    auto out = n->out.lock();
    if (!out) continue;
    auto gi = acc.find(out.get());
    if (gi == acc.end()) continue;
    std::vector<T*> parent_grads(n->parents.size(), nullptr);
    for (size_t i = 0; i < n->parents.size(); ++i) {
      const auto& p = n->parents[i];
      if (!p.needs_grad()) continue;
      auto& buf = acc[p.impl()];
      if (buf.empty()) buf.assign(p.vec().size(), T(0));
      parent_grads[i] = buf.data();
    }
    n->apply(gi->second.data(), parent_grads);
  }

  for (auto& [impl, buf] : acc) {
    if (!impl->requires_grad) continue;
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), T(0));
    for (size_t i = 0; i < buf.size(); ++i) impl->grad[i] += buf[i];
  }
}

namespace {

template <class T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

}  // namespace

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("add", a, b);
  std::vector<T> out(a.vec());
  const T* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  int64_t n = a.numel();
  return record_op<T>("add", a.shape(), std::move(out), {a, b},
                      [n](const T* go, const std::vector<T*>& pg) {
                        for (int k = 0; k < 2; ++k)
                          if (pg[k])
                            for (int64_t i = 0; i < n; ++i) pg[k][i] += go[i];
                      });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("sub", a, b);
  std::vector<T> out(a.vec());
  const T* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  int64_t n = a.numel();
  return record_op<T>("sub", a.shape(), std::move(out), {a, b},
                      [n](const T* go, const std::vector<T*>& pg) {
                        if (pg[0])
                          for (int64_t i = 0; i < n; ++i) pg[0][i] += go[i];
                        if (pg[1])
                          for (int64_t i = 0; i < n; ++i) pg[1][i] -= go[i];
                      });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("mul", a, b);
  std::vector<T> out(a.vec());
  const T* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  int64_t n = a.numel();
  return record_op<T>("mul", a.shape(), std::move(out), {a, b},
                      [n, a, b](const T* go, const std::vector<T*>& pg) {
                        if (pg[0]) {
                          const T* pb = b.data();
                          for (int64_t i = 0; i < n; ++i) pg[0][i] += go[i] * pb[i];
                        }
                        if (pg[1]) {
                          const T* pa = a.data();
                          for (int64_t i = 0; i < n; ++i) pg[1][i] += go[i] * pa[i];
                        }
                      });
}

template <class T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("divide", a, b);
  std::vector<T> out(a.vec());
  const T* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] /= pb[i];
  int64_t n = a.numel();
  return record_op<T>("divide", a.shape(), std::move(out), {a, b},
                      [n, a, b](const T* go, const std::vector<T*>& pg) {
                        const T* pa = a.data();
                        const T* pb = b.data();
                        if (pg[0])
                          for (int64_t i = 0; i < n; ++i) pg[0][i] += go[i] / pb[i];
                        if (pg[1])
                          for (int64_t i = 0; i < n; ++i)
                            pg[1][i] -= go[i] * pa[i] / (pb[i] * pb[i]);
                      });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.vec());
  for (auto& x : out) x += s;
  int64_t n = a.numel();
  return record_op<T>("add_scalar", a.shape(), std::move(out), {a},
                      [n](const T* go, const std::vector<T*>& pg) {
                        if (pg[0])
                          for (int64_t i = 0; i < n; ++i) pg[0][i] += go[i];
                      });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.vec());
  for (auto& x : out) x *= s;
  int64_t n = a.numel();
  return record_op<T>("mul_scalar", a.shape(), std::move(out), {a},
                      [n, s](const T* go, const std::vector<T*>& pg) {
                        if (pg[0])
                          for (int64_t i = 0; i < n; ++i) pg[0][i] += go[i] * s;
                      });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

template <class T>
Tensor<T> abs_val(const Tensor<T>& a) {
  std::vector<T> out(a.vec());
  for (auto& x : out) x = std::abs(x);
  int64_t n = a.numel();
  return record_op<T>("abs", a.shape(), std::move(out), {a},
                      [n, a](const T* go, const std::vector<T*>& pg) {
                        if (!pg[0]) return;
                        const T* pa = a.data();
                        // subgradient 0 at the kink
                        for (int64_t i = 0; i < n; ++i) {
                          if (pa[i] > T(0))
                            pg[0][i] += go[i];
                          else if (pa[i] < T(0))
                            pg[0][i] -= go[i];
                        }
                      });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T x : a.vec()) s += x;
  int64_t n = a.numel();
  return record_op<T>("sum", {}, {s}, {a},
                      [n](const T* go, const std::vector<T*>& pg) {
                        if (pg[0])
                          for (int64_t i = 0; i < n; ++i) pg[0][i] += go[0];
                      });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean of empty tensor");
  T s = T(0);
  for (T x : a.vec()) s += x;
  int64_t n = a.numel();
  s /= static_cast<T>(n);
  return record_op<T>("mean", {}, {s}, {a},
                      [n](const T* go, const std::vector<T*>& pg) {
                        if (pg[0]) {
                          T g = go[0] / static_cast<T>(n);
                          for (int64_t i = 0; i < n; ++i) pg[0][i] += g;
                        }
                      });
}

template <class T>
Tensor<T> activation(const Tensor<T>& x, Activation kind, T negative_slope) {
  T slope = kind == Activation::kRelu ? T(0) : negative_slope;
  std::vector<T> out(x.vec());
  for (auto& v : out)
    if (v <= T(0)) v *= slope;
  int64_t n = x.numel();
  return record_op<T>("activation", x.shape(), std::move(out), {x},
                      [n, slope, x](const T* go, const std::vector<T*>& pg) {
                        if (!pg[0]) return;
                        const T* px = x.data();
                        for (int64_t i = 0; i < n; ++i)
                          pg[0][i] += go[i] * (px[i] > T(0) ? T(1) : slope);
                      });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return activation(x, Activation::kRelu, T(0));
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T negative_slope) {
  return activation(x, Activation::kLeakyRelu, negative_slope);
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 5 || b.rank() != 5)
    throw std::invalid_argument("concat_channels expects rank-5 tensors, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  for (size_t d = 0; d < 5; ++d)
    if (d != 1 && a.dim(d) != b.dim(d))
      throw std::invalid_argument("concat_channels: non-channel dims differ: " +
                                  shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  int64_t batch = a.dim(0);
  int64_t ca = a.dim(1), cb = b.dim(1);
  int64_t inner = a.dim(2) * a.dim(3) * a.dim(4);
  Shape out_shape = {batch, ca + cb, a.dim(2), a.dim(3), a.dim(4)};
  std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
  const T* pa = a.data();
  const T* pb = b.data();
  for (int64_t n = 0; n < batch; ++n) {
    T* dst = out.data() + n * (ca + cb) * inner;
    std::copy(pa + n * ca * inner, pa + (n + 1) * ca * inner, dst);
    std::copy(pb + n * cb * inner, pb + (n + 1) * cb * inner, dst + ca * inner);
  }
  return record_op<T>("concat_channels", out_shape, std::move(out), {a, b},
                      [batch, ca, cb, inner](const T* go, const std::vector<T*>& pg) {
                        for (int64_t n = 0; n < batch; ++n) {
                          const T* src = go + n * (ca + cb) * inner;
                          if (pg[0]) {
                            T* da = pg[0] + n * ca * inner;
                            for (int64_t i = 0; i < ca * inner; ++i) da[i] += src[i];
                          }
                          if (pg[1]) {
                            T* db = pg[1] + n * cb * inner;
                            for (int64_t i = 0; i < cb * inner; ++i) db[i] += src[ca * inner + i];
                          }
                        }
                      });
}

template <class T>
Tensor<T> slice_temporal(const Tensor<T>& x, int64_t t0, int64_t len) {
  if (x.rank() != 5)
    throw std::invalid_argument("slice_temporal expects a rank-5 tensor, got " +
                                shape_str(x.shape()));
  int64_t batch = x.dim(0), ch = x.dim(1), tt = x.dim(2);
  if (t0 < 0 || len <= 0 || t0 + len > tt)
    throw std::invalid_argument("slice_temporal: range [" + std::to_string(t0) + "," +
                                std::to_string(t0 + len) + ") out of T=" + std::to_string(tt));
  int64_t hw = x.dim(3) * x.dim(4);
  Shape out_shape = {batch, ch, len, x.dim(3), x.dim(4)};
  std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
  const T* px = x.data();
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t c = 0; c < ch; ++c) {
      const T* src = px + ((n * ch + c) * tt + t0) * hw;
      T* dst = out.data() + ((n * ch + c) * len) * hw;
      std::copy(src, src + len * hw, dst);
    }
  return record_op<T>("slice_temporal", out_shape, std::move(out), {x},
                      [batch, ch, tt, t0, len, hw](const T* go, const std::vector<T*>& pg) {
                        if (!pg[0]) return;
                        for (int64_t n = 0; n < batch; ++n)
                          for (int64_t c = 0; c < ch; ++c) {
                            T* dst = pg[0] + ((n * ch + c) * tt + t0) * hw;
                            const T* src = go + ((n * ch + c) * len) * hw;
                            for (int64_t i = 0; i < len * hw; ++i) dst[i] += src[i];
                          }
                      });
}

#define ANODET_INSTANTIATE(T)                                                              \
  template class Tensor<T>;                                                                \
  template Tensor<T> make_tensor<T>(Shape, std::vector<T>);                                \
  template Tensor<T> record_op<T>(const char*, Shape, std::vector<T>,                      \
                                  std::vector<Tensor<T>>,                                  \
                                  std::function<void(const T*, const std::vector<T*>&)>);  \
  template void backward<T>(const Tensor<T>&);                                             \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> divide<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                   \
  template Tensor<T> mul_scalar<T>(const Tensor<T>&, T);                                   \
  template Tensor<T> neg<T>(const Tensor<T>&);                                             \
  template Tensor<T> abs_val<T>(const Tensor<T>&);                                         \
  template Tensor<T> sum<T>(const Tensor<T>&);                                             \
  template Tensor<T> mean<T>(const Tensor<T>&);                                            \
  template Tensor<T> activation<T>(const Tensor<T>&, Activation, T);                       \
  template Tensor<T> relu<T>(const Tensor<T>&);                                            \
  template Tensor<T> leaky_relu<T>(const Tensor<T>&, T);                                   \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> slice_temporal<T>(const Tensor<T>&, int64_t, int64_t);

ANODET_INSTANTIATE(float)
ANODET_INSTANTIATE(double)

#undef ANODET_INSTANTIATE

}  // namespace anodet
