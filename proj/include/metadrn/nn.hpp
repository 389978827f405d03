#pragma once

#include "metadrn/tensor.hpp"

namespace metadrn {

// Per-channel standardization over the current batch (no running statistics),
// followed by the (gamma, beta) affine. Composed from differentiable
// primitives, so second derivatives flow through the whole normalization.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       double eps = 1e-5) {
  detail::check_nchw("batch_norm2d", x);
  check_arg(gamma.rank() == 1 && gamma.dim(0) == x.dim(1) && beta.rank() == 1 &&
                beta.dim(0) == x.dim(1),
            "batch_norm2d: gamma/beta must be [C] with C = " + std::to_string(x.dim(1)));
  const double inv_count = 1.0 / static_cast<double>(x.dim(0) * x.dim(2) * x.dim(3));
  Tensor<T> mu = scalar_mul(channel_sum(x), inv_count);
  Tensor<T> centered = sub(x, channel_broadcast(mu, x.shape()));
  Tensor<T> var = scalar_mul(channel_sum(mul(centered, centered)), inv_count);
  Tensor<T> inv_std = pow_scalar(scalar_add(var, eps), -0.5);
  Tensor<T> normed = mul(centered, channel_broadcast(inv_std, x.shape()));
  return add(mul(normed, channel_broadcast(gamma, x.shape())),
             channel_broadcast(beta, x.shape()));
}

// out = x for x >= 0 else slope * x; subgradient at 0 is 1.
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope = 0.01) {
  check_arg(slope > 0.0 && slope < 1.0, "leaky_relu: slope must be in (0,1)");
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  const auto& xv = x.data();
  auto& ov = out.raw();
  const T s = static_cast<T>(slope);
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] >= T(0) ? xv[i] : s * xv[i];
  out.attach_node("leaky_relu", {x}, [x, s](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (!x.requires_grad()) return gs;
    Tensor<T> mask = Tensor<T>::uninit(x.shape());
    const auto& xd = x.data();
    auto& md = mask.raw();
    for (size_t i = 0; i < md.size(); ++i) md[i] = xd[i] >= T(0) ? T(1) : s;
    gs[0] = mul(g, mask);
    return gs;
  });
  return out;
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int64_t r);

// Channel-to-space rearrangement:
//   out[n, c, r*y+i, r*x+j] = in[n, c*r*r + i*r + j, y, x]
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int64_t r) {
  detail::check_nchw("pixel_shuffle", x);
  check_arg(r >= 1, "pixel_shuffle: factor must be >= 1");
  const int64_t n = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  check_arg(c_in % (r * r) == 0, "pixel_shuffle: channels " + std::to_string(c_in) +
                                     " not divisible by r^2 = " + std::to_string(r * r));
  const int64_t c = c_in / (r * r);
  Tensor<T> out = Tensor<T>::uninit({n, c, h * r, w * r});
  const T* xv = x.data().data();
  T* ov = out.raw().data();
  for (int64_t in = 0; in < n; ++in)
    for (int64_t oc = 0; oc < c; ++oc)
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < r; ++j) {
          const T* src = xv + ((in * c_in + oc * r * r + i * r + j) * h) * w;
          for (int64_t y = 0; y < h; ++y) {
            T* dst = ov + ((in * c + oc) * h * r + y * r + i) * w * r + j;
            const T* row = src + y * w;
            for (int64_t xx = 0; xx < w; ++xx) dst[xx * r] = row[xx];
          }
        }
  out.attach_node("pixel_shuffle", {x}, [x, r](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (x.requires_grad()) gs[0] = pixel_unshuffle(g, r);
    return gs;
  });
  return out;
}

// Inverse permutation of pixel_shuffle.
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int64_t r) {
  detail::check_nchw("pixel_unshuffle", x);
  const int64_t n = x.dim(0), c = x.dim(1), hr = x.dim(2), wr = x.dim(3);
  check_arg(hr % r == 0 && wr % r == 0, "pixel_unshuffle: spatial dims not divisible by r");
  const int64_t h = hr / r, w = wr / r, c_out = c * r * r;
  Tensor<T> out = Tensor<T>::uninit({n, c_out, h, w});
  const T* xv = x.data().data();
  T* ov = out.raw().data();
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < c; ++ic)
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < r; ++j) {
          T* dst = ov + ((in * c_out + ic * r * r + i * r + j) * h) * w;
          for (int64_t y = 0; y < h; ++y) {
            const T* src = xv + ((in * c + ic) * hr + y * r + i) * wr + j;
            T* row = dst + y * w;
            for (int64_t xx = 0; xx < w; ++xx) row[xx] = src[xx * r];
          }
        }
  out.attach_node("pixel_unshuffle", {x}, [x, r](const Tensor<T>& g) {
    std::vector<Tensor<T>> gs(1);
    if (x.requires_grad()) gs[0] = pixel_shuffle(g, r);
    return gs;
  });
  return out;
}

namespace detail {

// Per-pixel channel max as a detached constant (softmax is shift invariant,
// so no gradient is owed to the max).
template <typename T>
Tensor<T> pixel_max_const(const Tensor<T>& z) {
  const int64_t n = z.dim(0), c = z.dim(1), hw = z.dim(2) * z.dim(3);
  Tensor<T> m = Tensor<T>::uninit({n, z.dim(2), z.dim(3)});
  const auto& zv = z.data();
  auto& mv = m.raw();
  for (int64_t in = 0; in < n; ++in)
    for (int64_t i = 0; i < hw; ++i) {
      T best = zv[(in * c) * hw + i];
      for (int64_t ic = 1; ic < c; ++ic) best = std::max(best, zv[(in * c + ic) * hw + i]);
      mv[in * hw + i] = best;
    }
  return m;
}

}  // namespace detail

// Channel softmax of [N,C,H,W] logits, numerically stabilized.
template <typename T>
Tensor<T> softmax_channel(const Tensor<T>& z) {
  detail::check_nchw("softmax_channel", z);
  Tensor<T> shifted = sub(z, pixel_broadcast(detail::pixel_max_const(z), z.dim(1)));
  Tensor<T> e = exp(shifted);
  Tensor<T> inv_norm = pow_scalar(pixel_sum(e), -1.0);
  return mul(e, pixel_broadcast(inv_norm, z.dim(1)));
}

// Mean over all pixels of -log softmax(logits)[target]. target: [N,H,W] ids.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const Tensor<T>& target) {
  detail::check_nchw("softmax_cross_entropy", logits);
  check_arg(target.rank() == 3 && target.dim(0) == logits.dim(0) &&
                target.dim(1) == logits.dim(2) && target.dim(2) == logits.dim(3),
            "softmax_cross_entropy: target " + shape_str(target.shape()) +
                " does not match logits " + shape_str(logits.shape()));
  Tensor<T> shifted = sub(logits, pixel_broadcast(detail::pixel_max_const(logits), logits.dim(1)));
  Tensor<T> lse = log(pixel_sum(exp(shifted)));
  Tensor<T> picked = select_class(shifted, target);
  const double inv_count = 1.0 / static_cast<double>(target.numel());
  return scalar_mul(sum(sub(lse, picked)), inv_count);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return pow_scalar(scalar_add(exp(neg(x)), 1.0), -1.0);
}

}  // namespace metadrn
