#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "metadrn/common.hpp"
#include "metadrn/memstats.hpp"

namespace metadrn {

// When disabled, ops do not record graph nodes. Backward passes run under
// this flag unless gradients themselves must stay differentiable.
struct GradMode {
  static bool& enabled() {
    thread_local bool flag = true;
    return flag;
  }
};

class GradModeGuard {
 public:
  explicit GradModeGuard(bool on) : prev_(GradMode::enabled()) { GradMode::enabled() = on; }
  ~GradModeGuard() { GradMode::enabled() = prev_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool prev_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

template <typename T>
class Tensor;

// Producing operation of a non-leaf tensor. The backward callback returns one
// gradient per input (default-constructed Tensor for inputs that need none)
// and is expressed in terms of tensor ops, so gradients are themselves
// differentiable when recorded under an enabled GradMode.
template <typename T>
struct Node {
  const char* op;
  std::vector<Tensor<T>> inputs;
  std::function<std::vector<Tensor<T>>(const Tensor<T>&)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;
};

template <typename T>
std::shared_ptr<std::vector<T>> make_buffer(size_t n) {
  auto* vec = new std::vector<T>(n);
  MemStats::add(n * sizeof(T));
  return std::shared_ptr<std::vector<T>>(vec, [n](std::vector<T>* p) {
    MemStats::sub(n * sizeof(T));
    delete p;
  });
}

// Dense n-dimensional value, row-major, immutable once built. Copies share
// storage. A tensor is graph-attached when produced by a recorded op; leaves
// opt in to gradients via set_requires_grad.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor uninit(Shape shape) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = make_buffer<T>(static_cast<size_t>(numel_of(t.impl_->shape)));
    return t;
  }

  static Tensor zeros(Shape shape) { return uninit(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t = uninit(std::move(shape));
    std::fill(t.raw().begin(), t.raw().end(), value);
    return t;
  }

  static Tensor scalar(T value) { return full({}, value); }

  static Tensor from_data(Shape shape, std::vector<T> values) {
    check_arg(numel_of(shape) == static_cast<int64_t>(values.size()),
              "Tensor::from_data: shape " + shape_str(shape) + " does not match value count " +
                  std::to_string(values.size()));
    Tensor t = uninit(std::move(shape));
    std::copy(values.begin(), values.end(), t.raw().begin());
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return numel_of(impl_->shape); }
  int64_t dim(size_t i) const { return impl_->shape.at(i); }
  size_t rank() const { return impl_->shape.size(); }

  const std::vector<T>& data() const { return *impl_->data; }
  std::vector<T>& raw() { return *impl_->data; }

  T item() const {
    check_arg(numel() == 1, "Tensor::item: tensor is not scalar, shape " + shape_str(shape()));
    return (*impl_->data)[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  bool has_node() const { return impl_ && impl_->node != nullptr; }

  Tensor& set_requires_grad(bool on) {
    check_arg(impl_ != nullptr, "set_requires_grad on undefined tensor");
    check_arg(!impl_->node, "set_requires_grad is only valid on leaf tensors");
    impl_->requires_grad = on;
    return *this;
  }

  // Shares storage, drops graph attachment.
  Tensor detach() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

  Tensor clone_detached() const {
    Tensor t = uninit(impl_->shape);
    std::copy(impl_->data->begin(), impl_->data->end(), t.raw().begin());
    return t;
  }

  bool all_finite() const {
    for (T v : *impl_->data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  TensorImpl<T>* impl_ptr() const { return impl_.get(); }
  const std::shared_ptr<Node<T>>& node() const { return impl_->node; }

  void attach_node(const char* op, std::vector<Tensor<T>> inputs,
                   std::function<std::vector<Tensor<T>>(const Tensor<T>&)> backward) {
    if (!GradMode::enabled()) return;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return;
    impl_->requires_grad = true;
    impl_->node = std::make_shared<Node<T>>(Node<T>{op, std::move(inputs), std::move(backward)});
  }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

namespace detail {

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  check_arg(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
}

template <typename T>
void check_nchw(const char* op, const Tensor<T>& t) {
  check_arg(t.rank() == 4, std::string(op) + ": expected 4-d NCHW tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---- elementwise primitives ------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("add", a, b);
  Tensor<T> out = Tensor<T>::uninit(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.raw();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  out.attach_node("add", {a, b}, [a, b](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(2);
    if (a.requires_grad()) gs[0] = g;
    if (b.requires_grad()) gs[1] = g;
    return gs;
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, double c) {
  Tensor<T> out = Tensor<T>::uninit(a.shape());
  const auto& av = a.data();
  auto& ov = out.raw();
  const T cv = static_cast<T>(c);
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * cv;
  out.attach_node("scalar_mul", {a}, [a, c](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (a.requires_grad()) gs[0] = scalar_mul(g, c);
    return gs;
  });
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scalar_mul(a, -1.0);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("sub", a, b);
  Tensor<T> out = Tensor<T>::uninit(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.raw();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  out.attach_node("sub", {a, b}, [a, b](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(2);
    if (a.requires_grad()) gs[0] = g;
    if (b.requires_grad()) gs[1] = neg(g);
    return gs;
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("mul", a, b);
  Tensor<T> out = Tensor<T>::uninit(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.raw();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  out.attach_node("mul", {a, b}, [a, b](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(2);
    if (a.requires_grad()) gs[0] = mul(g, b);
    if (b.requires_grad()) gs[1] = mul(g, a);
    return gs;
  });
  return out;
}

template <typename T>
Tensor<T> scalar_add(const Tensor<T>& a, double c) {
  Tensor<T> out = Tensor<T>::uninit(a.shape());
  const auto& av = a.data();
  auto& ov = out.raw();
  const T cv = static_cast<T>(c);
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + cv;
  out.attach_node("scalar_add", {a}, [a](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (a.requires_grad()) gs[0] = g;
    return gs;
  });
  return out;
}

// y = x^p for constant p. Fractional p assumes positive inputs.
template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& a, double p) {
  Tensor<T> out = Tensor<T>::uninit(a.shape());
  const auto& av = a.data();
  auto& ov = out.raw();
  for (size_t i = 0; i < ov.size(); ++i)
    ov[i] = static_cast<T>(std::pow(static_cast<double>(av[i]), p));
  out.attach_node("pow_scalar", {a}, [a, p](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (a.requires_grad()) gs[0] = scalar_mul(mul(g, pow_scalar(a, p - 1.0)), p);
    return gs;
  });
  return out;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::uninit(a.shape());
  const auto& av = a.data();
  auto& ov = out.raw();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::exp(av[i]);
  out.attach_node("exp", {a}, [a](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (a.requires_grad()) gs[0] = mul(g, exp(a));
    return gs;
  });
  return out;
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::uninit(a.shape());
  const auto& av = a.data();
  auto& ov = out.raw();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(av[i]);
  out.attach_node("log", {a}, [a](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (a.requires_grad()) gs[0] = mul(g, pow_scalar(a, -1.0));
    return gs;
  });
  return out;
}

// ---- reductions and broadcasts ----------------------------------------------

template <typename T>
Tensor<T> broadcast_scalar(const Tensor<T>& s, const Shape& shape);

// Sum of all elements, scalar result.
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  Shape in_shape = a.shape();
  out.attach_node("sum", {a}, [a, in_shape](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (a.requires_grad()) gs[0] = broadcast_scalar(g, in_shape);
    return gs;
  });
  return out;
}

template <typename T>
Tensor<T> broadcast_scalar(const Tensor<T>& s, const Shape& shape) {
  check_arg(s.numel() == 1, "broadcast_scalar: source must be scalar");
  Tensor<T> out = Tensor<T>::full(shape, s.data()[0]);
  out.attach_node("broadcast_scalar", {s}, [s](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (s.requires_grad()) gs[0] = sum(g);
    return gs;
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  check_arg(a.numel() > 0, "mean: empty tensor");
  return scalar_mul(sum(a), 1.0 / static_cast<double>(a.numel()));
}

template <typename T>
Tensor<T> channel_broadcast(const Tensor<T>& v, const Shape& nchw);

// [N,C,H,W] -> [C], summing over batch and space.
template <typename T>
Tensor<T> channel_sum(const Tensor<T>& x) {
  detail::check_nchw("channel_sum", x);
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::zeros({c});
  const auto& xv = x.data();
  auto& ov = out.raw();
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < c; ++ic) {
      const T* p = xv.data() + (in * c + ic) * hw;
      T acc = 0;
      for (int64_t i = 0; i < hw; ++i) acc += p[i];
      ov[ic] += acc;
    }
  Shape in_shape = x.shape();
  out.attach_node("channel_sum", {x}, [x, in_shape](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (x.requires_grad()) gs[0] = channel_broadcast(g, in_shape);
    return gs;
  });
  return out;
}

// [C] -> [N,C,H,W].
template <typename T>
Tensor<T> channel_broadcast(const Tensor<T>& v, const Shape& nchw) {
  check_arg(nchw.size() == 4, "channel_broadcast: target must be 4-d");
  check_arg(v.rank() == 1 && v.dim(0) == nchw[1],
            "channel_broadcast: vector length " + shape_str(v.shape()) +
                " does not match channels of " + shape_str(nchw));
  const int64_t n = nchw[0], c = nchw[1], hw = nchw[2] * nchw[3];
  Tensor<T> out = Tensor<T>::uninit(nchw);
  const auto& vv = v.data();
  auto& ov = out.raw();
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < c; ++ic)
      std::fill_n(ov.data() + (in * c + ic) * hw, hw, vv[ic]);
  out.attach_node("channel_broadcast", {v}, [v](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (v.requires_grad()) gs[0] = channel_sum(g);
    return gs;
  });
  return out;
}

template <typename T>
Tensor<T> pixel_broadcast(const Tensor<T>& m, int64_t channels);

// [N,C,H,W] -> [N,H,W], summing over channels.
template <typename T>
Tensor<T> pixel_sum(const Tensor<T>& x) {
  detail::check_nchw("pixel_sum", x);
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::zeros({n, x.dim(2), x.dim(3)});
  const auto& xv = x.data();
  auto& ov = out.raw();
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < c; ++ic) {
      const T* p = xv.data() + (in * c + ic) * hw;
      T* o = ov.data() + in * hw;
      for (int64_t i = 0; i < hw; ++i) o[i] += p[i];
    }
  const int64_t cc = c;
  out.attach_node("pixel_sum", {x}, [x, cc](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (x.requires_grad()) gs[0] = pixel_broadcast(g, cc);
    return gs;
  });
  return out;
}

// [N,H,W] -> [N,C,H,W].
template <typename T>
Tensor<T> pixel_broadcast(const Tensor<T>& m, int64_t channels) {
  check_arg(m.rank() == 3, "pixel_broadcast: expected [N,H,W], got " + shape_str(m.shape()));
  const int64_t n = m.dim(0), hw = m.dim(1) * m.dim(2);
  Tensor<T> out = Tensor<T>::uninit({n, channels, m.dim(1), m.dim(2)});
  const auto& mv = m.data();
  auto& ov = out.raw();
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < channels; ++ic)
      std::copy_n(mv.data() + in * hw, hw, ov.data() + (in * channels + ic) * hw);
  out.attach_node("pixel_broadcast", {m}, [m](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (m.requires_grad()) gs[0] = pixel_sum(g);
    return gs;
  });
  return out;
}

template <typename T>
Tensor<T> scatter_class(const Tensor<T>& m, const Tensor<T>& ids, int64_t channels);

// Picks logits[n, ids[n,h,w], h, w]. ids holds whole numbers in [0, C).
template <typename T>
Tensor<T> select_class(const Tensor<T>& x, const Tensor<T>& ids) {
  detail::check_nchw("select_class", x);
  check_arg(ids.rank() == 3 && ids.dim(0) == x.dim(0) && ids.dim(1) == x.dim(2) &&
                ids.dim(2) == x.dim(3),
            "select_class: index shape " + shape_str(ids.shape()) + " does not match " +
                shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::uninit({n, x.dim(2), x.dim(3)});
  const auto& xv = x.data();
  const auto& iv = ids.data();
  auto& ov = out.raw();
  for (int64_t in = 0; in < n; ++in)
    for (int64_t i = 0; i < hw; ++i) {
      const double idf = static_cast<double>(iv[in * hw + i]);
      const int64_t id = static_cast<int64_t>(idf);
      check_arg(idf == static_cast<double>(id) && id >= 0 && id < c,
                "select_class: class id " + std::to_string(idf) + " out of range [0," +
                    std::to_string(c) + ")");
      ov[in * hw + i] = xv[(in * c + id) * hw + i];
    }
  const int64_t cc = c;
  Tensor<T> ids_c = ids.detach();
  out.attach_node("select_class", {x}, [x, ids_c, cc](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (x.requires_grad()) gs[0] = scatter_class(g, ids_c, cc);
    return gs;
  });
  return out;
}

// Inverse of select_class: places m at the indexed class, zero elsewhere.
template <typename T>
Tensor<T> scatter_class(const Tensor<T>& m, const Tensor<T>& ids, int64_t channels) {
  check_arg(m.rank() == 3, "scatter_class: expected [N,H,W]");
  detail::check_same_shape("scatter_class", m, ids);
  const int64_t n = m.dim(0), hw = m.dim(1) * m.dim(2);
  Tensor<T> out = Tensor<T>::zeros({n, channels, m.dim(1), m.dim(2)});
  const auto& mv = m.data();
  const auto& iv = ids.data();
  auto& ov = out.raw();
  for (int64_t in = 0; in < n; ++in)
    for (int64_t i = 0; i < hw; ++i) {
      const int64_t id = static_cast<int64_t>(iv[in * hw + i]);
      ov[(in * channels + id) * hw + i] = mv[in * hw + i];
    }
  Tensor<T> ids_c = ids.detach();
  out.attach_node("scatter_class", {m}, [m, ids_c](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (m.requires_grad()) gs[0] = select_class(g, ids_c);
    return gs;
  });
  return out;
}

// ---- shape ops ---------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  check_arg(numel_of(shape) == a.numel(), "reshape: cannot view " + shape_str(a.shape()) +
                                              " as " + shape_str(shape));
  Tensor<T> out = Tensor<T>::uninit(shape);
  std::copy(a.data().begin(), a.data().end(), out.raw().begin());
  Shape in_shape = a.shape();
  out.attach_node("reshape", {a}, [a, in_shape](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (a.requires_grad()) gs[0] = reshape(g, in_shape);
    return gs;
  });
  return out;
}

template <typename T>
Tensor<T> pad0(const Tensor<T>& part, int64_t start, int64_t total);

// Copy of rows [start, start+len) along dim 0.
template <typename T>
Tensor<T> slice0(const Tensor<T>& a, int64_t start, int64_t len) {
  check_arg(a.rank() >= 1, "slice0: scalar input");
  check_arg(start >= 0 && len >= 1 && start + len <= a.dim(0),
            "slice0: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                ") out of bounds for " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[0] = len;
  const int64_t row = a.numel() / a.dim(0);
  Tensor<T> out = Tensor<T>::uninit(out_shape);
  std::copy_n(a.data().data() + start * row, len * row, out.raw().data());
  const int64_t total = a.dim(0);
  out.attach_node("slice0", {a}, [a, start, total](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (a.requires_grad()) gs[0] = pad0(g, start, total);
    return gs;
  });
  return out;
}

// Embeds rows into a zero tensor of `total` rows starting at `start`.
template <typename T>
Tensor<T> pad0(const Tensor<T>& part, int64_t start, int64_t total) {
  check_arg(part.rank() >= 1, "pad0: scalar input");
  check_arg(start >= 0 && start + part.dim(0) <= total, "pad0: range out of bounds");
  Shape out_shape = part.shape();
  out_shape[0] = total;
  const int64_t row = part.numel() / part.dim(0);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  std::copy_n(part.data().data(), part.numel(), out.raw().data() + start * row);
  const int64_t len = part.dim(0);
  out.attach_node("pad0", {part}, [part, start, len](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (part.requires_grad()) gs[0] = slice0(g, start, len);
    return gs;
  });
  return out;
}

template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
  check_arg(!parts.empty(), "concat0: no inputs");
  Shape out_shape = parts[0].shape();
  check_arg(!out_shape.empty(), "concat0: scalar inputs");
  int64_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    check_arg(s.size() == out_shape.size(), "concat0: rank mismatch");
    for (size_t i = 1; i < s.size(); ++i)
      check_arg(s[i] == out_shape[i], "concat0: trailing dims mismatch " + shape_str(s) +
                                          " vs " + shape_str(out_shape));
    total += s[0];
  }
  out_shape[0] = total;
  Tensor<T> out = Tensor<T>::uninit(out_shape);
  int64_t offset = 0;
  for (const auto& p : parts) {
    std::copy_n(p.data().data(), p.numel(), out.raw().data() + offset);
    offset += p.numel();
  }
  std::vector<int64_t> starts;
  std::vector<int64_t> lens;
  int64_t s0 = 0;
  for (const auto& p : parts) {
    starts.push_back(s0);
    lens.push_back(p.dim(0));
    s0 += p.dim(0);
  }
  std::vector<Tensor<T>> inputs = parts;
  out.attach_node("concat0", inputs, [inputs, starts, lens](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(inputs.size());
    for (size_t i = 0; i < inputs.size(); ++i)
      if (inputs[i].requires_grad()) gs[i] = slice0(g, starts[i], lens[i]);
    return gs;
  });
  return out;
}

template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
  return a.detach();
}

// ---- backward engine ---------------------------------------------------------

// Reverse-mode gradient of a scalar loss with respect to `wrt` leaves.
// Unreached parameters get zero gradients. With create_graph, the returned
// gradients are graph-attached and differentiable in turn.
template <typename T>
std::vector<Tensor<T>> backward(const Tensor<T>& loss, const std::vector<Tensor<T>>& wrt,
                                bool create_graph = false) {
  check_arg(loss.defined() && loss.numel() == 1,
            "backward: loss must be a defined scalar tensor");

  // Post-order DFS over producing nodes; each node visited exactly once.
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> seen;
  {
    std::vector<std::pair<TensorImpl<T>*, size_t>> stack;
    if (loss.has_node()) stack.push_back({loss.impl_ptr(), 0});
    seen.insert(loss.impl_ptr());
    while (!stack.empty()) {
      auto& [impl, next] = stack.back();
      auto& node = impl->node;
      if (node && next < node->inputs.size()) {
        TensorImpl<T>* child = node->inputs[next++].impl_ptr();
        if (child->node && !seen.count(child)) {
          seen.insert(child);
          stack.push_back({child, 0});
        }
      } else {
        order.push_back(impl);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<TensorImpl<T>*, Tensor<T>> grads;
  grads[loss.impl_ptr()] = Tensor<T>::scalar(static_cast<T>(1));

  std::unordered_set<TensorImpl<T>*> keep;
  for (const auto& w : wrt) keep.insert(w.impl_ptr());

  GradModeGuard guard(create_graph);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* impl = *it;
    auto found = grads.find(impl);
    if (found == grads.end()) continue;
    Tensor<T> g = found->second;
    auto& node = impl->node;
    std::vector<Tensor<T>> input_grads = node->backward(g);
    check_arg(input_grads.size() == node->inputs.size(),
              std::string("backward rule of '") + node->op + "' returned wrong arity");
    for (size_t i = 0; i < input_grads.size(); ++i) {
      const Tensor<T>& gi = input_grads[i];
      if (!gi.defined()) continue;
      const Tensor<T>& in = node->inputs[i];
      check_arg(gi.shape() == in.shape(), std::string("backward rule of '") + node->op +
                                              "' produced gradient of shape " +
                                              shape_str(gi.shape()) + " for input " +
                                              shape_str(in.shape()));
      if (!gi.all_finite())
        fail_numeric(std::string("non-finite gradient produced by op '") + node->op + "'");
      auto slot = grads.find(in.impl_ptr());
      if (slot == grads.end()) {
        grads.emplace(in.impl_ptr(), gi);
      } else {
        slot->second = add(slot->second, gi);
      }
    }
    if (!keep.count(impl)) grads.erase(impl);  // consumed; leaves are never in `order`
  }

  std::vector<Tensor<T>> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto found = grads.find(w.impl_ptr());
    if (found != grads.end()) {
      result.push_back(create_graph ? found->second : found->second.detach());
    } else {
      result.push_back(Tensor<T>::zeros(w.shape()));
    }
  }
  return result;
}

// ---- conveniences -------------------------------------------------------------

template <typename T>
bool allclose(const Tensor<T>& a, const Tensor<T>& b, double atol = 1e-6, double rtol = 0.0) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double x = a.data()[i], y = b.data()[i];
    if (std::abs(x - y) > atol + rtol * std::max(std::abs(x), std::abs(y))) return false;
  }
  return true;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  check_arg(a.shape() == b.shape(), "max_abs_diff: shape mismatch");
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

}  // namespace metadrn
