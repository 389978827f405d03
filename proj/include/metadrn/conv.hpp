#pragma once

#include "metadrn/tensor.hpp"

namespace metadrn {

struct ConvSpec {
  int64_t in_channels = 0;
  int64_t out_channels = 0;
  int64_t kh = 3;
  int64_t kw = 3;
  int64_t stride = 1;
  int64_t dilation = 1;
  int64_t padding = 0;
  bool has_bias = false;
};

inline int64_t conv_out_size(int64_t in, int64_t k, int64_t stride, int64_t dilation,
                             int64_t padding) {
  return (in + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
}

namespace detail {

inline void check_conv_spec(const ConvSpec& spec, int64_t h, int64_t w) {
  check_arg(spec.stride >= 1 && spec.dilation >= 1 && spec.padding >= 0,
            "ConvSpec: stride/dilation must be >= 1 and padding >= 0");
  const int64_t eh = spec.dilation * (spec.kh - 1) + 1;
  const int64_t ew = spec.dilation * (spec.kw - 1) + 1;
  check_arg(eh <= h + 2 * spec.padding && ew <= w + 2 * spec.padding,
            "ConvSpec: effective kernel " + std::to_string(eh) + "x" + std::to_string(ew) +
                " exceeds padded input " + std::to_string(h + 2 * spec.padding) + "x" +
                std::to_string(w + 2 * spec.padding));
}

// Output index range [lo, hi] such that lo*stride + tap*dilation - padding
// stays within [0, extent). Empty when lo > hi.
struct TapRange {
  int64_t lo, hi;
};

inline TapRange tap_range(int64_t tap, int64_t extent, int64_t out_extent, int64_t stride,
                          int64_t dilation, int64_t padding) {
  const int64_t lo_num = padding - tap * dilation;
  const int64_t lo = lo_num <= 0 ? 0 : (lo_num + stride - 1) / stride;
  const int64_t hi_num = extent - 1 - tap * dilation + padding;
  const int64_t hi = hi_num < 0 ? -1 : std::min(out_extent - 1, hi_num / stride);
  return {lo, hi};
}

}  // namespace detail

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& g, const Tensor<T>& weight, const ConvSpec& spec,
                           int64_t out_h, int64_t out_w);

template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& input, const Tensor<T>& g, const ConvSpec& spec);

// Strided, dilated 2-d correlation without bias:
//   out[n,co,p] = sum over ci, taps b of in[n,ci, stride*p + dilation*b - padding] * w[co,ci,b]
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const ConvSpec& spec) {
  detail::check_nchw("conv2d", input);
  check_arg(weight.rank() == 4, "conv2d: weight must be [Cout,Cin,kh,kw], got " +
                                    shape_str(weight.shape()));
  const int64_t n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t co = weight.dim(0);
  check_arg(weight.dim(1) == ci && weight.dim(1) == spec.in_channels &&
                weight.dim(0) == spec.out_channels && weight.dim(2) == spec.kh &&
                weight.dim(3) == spec.kw,
            "conv2d: weight " + shape_str(weight.shape()) + " inconsistent with input " +
                shape_str(input.shape()) + " and spec");
  detail::check_conv_spec(spec, h, w);
  const int64_t ho = conv_out_size(h, spec.kh, spec.stride, spec.dilation, spec.padding);
  const int64_t wo = conv_out_size(w, spec.kw, spec.stride, spec.dilation, spec.padding);

  Tensor<T> out = Tensor<T>::zeros({n, co, ho, wo});
  const T* xv = input.data().data();
  const T* wv = weight.data().data();
  T* ov = out.raw().data();
  const int64_t s = spec.stride, d = spec.dilation, p = spec.padding;
  for (int64_t in = 0; in < n; ++in)
    for (int64_t oc = 0; oc < co; ++oc) {
      T* obase = ov + (in * co + oc) * ho * wo;
      for (int64_t icn = 0; icn < ci; ++icn) {
        const T* xbase = xv + (in * ci + icn) * h * w;
        const T* wbase = wv + (oc * ci + icn) * spec.kh * spec.kw;
        for (int64_t i = 0; i < spec.kh; ++i) {
          const auto hr = detail::tap_range(i, h, ho, s, d, p);
          for (int64_t j = 0; j < spec.kw; ++j) {
            const auto wr = detail::tap_range(j, w, wo, s, d, p);
            const T tap = wbase[i * spec.kw + j];
            for (int64_t oh = hr.lo; oh <= hr.hi; ++oh) {
              const T* xrow = xbase + (oh * s + i * d - p) * w + j * d - p;
              T* orow = obase + oh * wo;
              for (int64_t ow = wr.lo; ow <= wr.hi; ++ow) orow[ow] += tap * xrow[ow * s];
            }
          }
        }
      }
    }

  ConvSpec sp = spec;
  out.attach_node("conv2d", {input, weight}, [input, weight, sp, h, w](const Tensor<T>& gr) {
    std::vector<Tensor<T>> gs(2);
    if (input.requires_grad()) gs[0] = conv_transpose2d(gr, weight, sp, h, w);
    if (weight.requires_grad()) gs[1] = conv2d_weight_grad(input, gr, sp);
    return gs;
  });
  return out;
}

// conv2d with optional bias (pass a default-constructed Tensor for none).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvSpec& spec) {
  Tensor<T> out = conv2d(input, weight, spec);
  if (!bias.defined()) {
    check_arg(!spec.has_bias, "conv2d: spec requires bias but none given");
    return out;
  }
  check_arg(spec.has_bias, "conv2d: bias given but spec has none");
  check_arg(bias.rank() == 1 && bias.dim(0) == spec.out_channels,
            "conv2d: bias shape " + shape_str(bias.shape()) + " must be [Cout]");
  return add(out, channel_broadcast(bias, out.shape()));
}

// Adjoint of conv2d in its input: scatters g back through the taps.
//   out[n,ci,a] = sum over co, q, b with stride*q + dilation*b - padding = a
//                 of g[n,co,q] * w[co,ci,b]
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& g, const Tensor<T>& weight, const ConvSpec& spec,
                           int64_t out_h, int64_t out_w) {
  detail::check_nchw("conv_transpose2d", g);
  check_arg(weight.rank() == 4 && weight.dim(0) == spec.out_channels &&
                weight.dim(1) == spec.in_channels && weight.dim(2) == spec.kh &&
                weight.dim(3) == spec.kw,
            "conv_transpose2d: weight " + shape_str(weight.shape()) + " inconsistent with spec");
  const int64_t n = g.dim(0), co = g.dim(1), ho = g.dim(2), wo = g.dim(3);
  check_arg(co == spec.out_channels, "conv_transpose2d: channel mismatch");
  detail::check_conv_spec(spec, out_h, out_w);
  check_arg(ho == conv_out_size(out_h, spec.kh, spec.stride, spec.dilation, spec.padding) &&
                wo == conv_out_size(out_w, spec.kw, spec.stride, spec.dilation, spec.padding),
            "conv_transpose2d: grad spatial dims " + shape_str(g.shape()) +
                " inconsistent with requested output " + std::to_string(out_h) + "x" +
                std::to_string(out_w));
  const int64_t ci = spec.in_channels;

  Tensor<T> out = Tensor<T>::zeros({n, ci, out_h, out_w});
  const T* gv = g.data().data();
  const T* wv = weight.data().data();
  T* ov = out.raw().data();
  const int64_t s = spec.stride, d = spec.dilation, p = spec.padding;
  for (int64_t in = 0; in < n; ++in)
    for (int64_t oc = 0; oc < co; ++oc) {
      const T* gbase = gv + (in * co + oc) * ho * wo;
      for (int64_t icn = 0; icn < ci; ++icn) {
        T* obase = ov + (in * ci + icn) * out_h * out_w;
        const T* wbase = wv + (oc * ci + icn) * spec.kh * spec.kw;
        for (int64_t i = 0; i < spec.kh; ++i) {
          const auto hr = detail::tap_range(i, out_h, ho, s, d, p);
          for (int64_t j = 0; j < spec.kw; ++j) {
            const auto wr = detail::tap_range(j, out_w, wo, s, d, p);
            const T tap = wbase[i * spec.kw + j];
            for (int64_t oh = hr.lo; oh <= hr.hi; ++oh) {
              const T* grow = gbase + oh * wo;
              T* orow = obase + (oh * s + i * d - p) * out_w + j * d - p;
              for (int64_t ow = wr.lo; ow <= wr.hi; ++ow) orow[ow * s] += tap * grow[ow];
            }
          }
        }
      }
    }

  ConvSpec sp = spec;
  out.attach_node("conv_transpose2d", {g, weight}, [g, weight, sp](const Tensor<T>& gr) {
    std::vector<Tensor<T>> gs(2);
    if (g.requires_grad()) gs[0] = conv2d(gr, weight, sp);
    if (weight.requires_grad()) gs[1] = conv2d_weight_grad(gr, g, sp);
    return gs;
  });
  return out;
}

// Adjoint of conv2d in its weight: correlation of input with g.
//   out[co,ci,b] = sum over n, q of g[n,co,q] * in[n,ci, stride*q + dilation*b - padding]
template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& input, const Tensor<T>& g, const ConvSpec& spec) {
  detail::check_nchw("conv2d_weight_grad", input);
  detail::check_nchw("conv2d_weight_grad", g);
  const int64_t n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t co = g.dim(1), ho = g.dim(2), wo = g.dim(3);
  check_arg(g.dim(0) == n && ci == spec.in_channels && co == spec.out_channels,
            "conv2d_weight_grad: shapes " + shape_str(input.shape()) + " / " +
                shape_str(g.shape()) + " inconsistent with spec");
  detail::check_conv_spec(spec, h, w);
  check_arg(ho == conv_out_size(h, spec.kh, spec.stride, spec.dilation, spec.padding) &&
                wo == conv_out_size(w, spec.kw, spec.stride, spec.dilation, spec.padding),
            "conv2d_weight_grad: grad spatial dims inconsistent with input and spec");

  Tensor<T> out = Tensor<T>::zeros({co, ci, spec.kh, spec.kw});
  const T* xv = input.data().data();
  const T* gv = g.data().data();
  T* ov = out.raw().data();
  const int64_t s = spec.stride, d = spec.dilation, p = spec.padding;
  for (int64_t in = 0; in < n; ++in)
    for (int64_t oc = 0; oc < co; ++oc) {
      const T* gbase = gv + (in * co + oc) * ho * wo;
      for (int64_t icn = 0; icn < ci; ++icn) {
        const T* xbase = xv + (in * ci + icn) * h * w;
        T* obase = ov + (oc * ci + icn) * spec.kh * spec.kw;
        for (int64_t i = 0; i < spec.kh; ++i) {
          const auto hr = detail::tap_range(i, h, ho, s, d, p);
          for (int64_t j = 0; j < spec.kw; ++j) {
            const auto wr = detail::tap_range(j, w, wo, s, d, p);
            T acc = 0;
            for (int64_t oh = hr.lo; oh <= hr.hi; ++oh) {
              const T* grow = gbase + oh * wo;
              const T* xrow = xbase + (oh * s + i * d - p) * w + j * d - p;
              for (int64_t ow = wr.lo; ow <= wr.hi; ++ow) acc += grow[ow] * xrow[ow * s];
            }
            obase[i * spec.kw + j] += acc;
          }
        }
      }
    }

  ConvSpec sp = spec;
  const int64_t hh = h, ww = w;
  out.attach_node("conv2d_weight_grad", {input, g}, [input, g, sp, hh, ww](const Tensor<T>& gr) {
    std::vector<Tensor<T>> gs(2);
    if (input.requires_grad()) gs[0] = conv_transpose2d(g, gr, sp, hh, ww);
    if (g.requires_grad()) gs[1] = conv2d(input, gr, sp);
    return gs;
  });
  return out;
}

}  // namespace metadrn
