#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "metadrn/conv.hpp"
#include "metadrn/nn.hpp"
#include "metadrn/params.hpp"
#include "metadrn/rng.hpp"

namespace metadrn {

// Dilated residual segmentation network: a two-conv head (stride 2), three
// residual blocks where blocks 2-3 trade stride for dilation (1,1 / 1,2 /
// 2,4), two degridding convs (dilation 2 then 1), and a 1x1 conv +
// pixel-shuffle x4 head that restores full resolution.
struct ModelSpec {
  double width_multiplier = 1.0;  // in (0,1], scales {16,64,128,256,512}, floor 1
  int64_t num_classes = 2;
  int64_t upsample_factor = 4;
  double leaky_slope = 0.01;
  double bn_eps = 1e-5;
};

struct ConvLayerDef {
  std::string conv;  // parameter name prefix
  std::string bn;    // batch-norm prefix, empty when the conv has no norm
  int64_t in_ch, out_ch, k, stride, dilation, padding;
  bool bias;
  bool shortcut;  // projection conv on a residual shortcut
};

inline int64_t scaled_channels(int64_t base, double width) {
  return std::max<int64_t>(1, std::llround(static_cast<double>(base) * width));
}

inline std::vector<ConvLayerDef> layer_table(const ModelSpec& spec) {
  check_arg(spec.width_multiplier > 0.0 && spec.width_multiplier <= 1.0,
            "ModelSpec: width_multiplier must be in (0,1]");
  check_arg(spec.num_classes >= 2, "ModelSpec: num_classes must be >= 2");
  check_arg(spec.upsample_factor == 4, "ModelSpec: layer stack is built for x4 upsampling");
  const double w = spec.width_multiplier;
  const int64_t c16 = scaled_channels(16, w), c64 = scaled_channels(64, w),
                c128 = scaled_channels(128, w), c256 = scaled_channels(256, w),
                c512 = scaled_channels(512, w);
  const int64_t out = spec.num_classes * spec.upsample_factor * spec.upsample_factor;
  return {
      {"head.conv1", "head.bn1", 3, c16, 3, 2, 1, 1, false, false},
      {"head.conv2", "head.bn2", c16, c64, 3, 1, 1, 1, false, false},
      {"block1.conv1", "block1.bn1", c64, c128, 3, 2, 1, 1, false, false},
      {"block1.conv2", "block1.bn2", c128, c128, 3, 1, 1, 1, false, false},
      {"block1.proj", "block1.proj_bn", c64, c128, 1, 2, 1, 0, false, true},
      {"block2.conv1", "block2.bn1", c128, c256, 3, 1, 1, 1, false, false},
      {"block2.conv2", "block2.bn2", c256, c256, 3, 1, 2, 2, false, false},
      {"block2.proj", "block2.proj_bn", c128, c256, 1, 1, 1, 0, false, true},
      {"block3.conv1", "block3.bn1", c256, c512, 3, 1, 2, 2, false, false},
      {"block3.conv2", "block3.bn2", c512, c512, 3, 1, 4, 4, false, false},
      {"block3.proj", "block3.proj_bn", c256, c512, 1, 1, 1, 0, false, true},
      {"degrid.conv1", "degrid.bn1", c512, c512, 3, 1, 2, 2, false, false},
      {"degrid.conv2", "degrid.bn2", c512, c512, 3, 1, 1, 1, false, false},
      {"upsample.conv", "", c512, out, 1, 1, 1, 0, true, false},
  };
}

// Closed-form parameter count over the layer table: conv weights are
// in*out*k*k (+out when biased), every batch norm adds 2*C.
inline int64_t count_params(const ModelSpec& spec) {
  int64_t total = 0;
  for (const auto& l : layer_table(spec)) {
    total += l.in_ch * l.out_ch * l.k * l.k;
    if (l.bias) total += l.out_ch;
    if (!l.bn.empty()) total += 2 * l.out_ch;
  }
  return total;
}

// Kaiming fan-in normal init for conv weights (gain matched to the leaky
// slope), gamma = 1, beta = 0, bias = 0. Deterministic per seed.
template <typename T>
ParamSet<T> build_params(const ModelSpec& spec, uint64_t seed) {
  Rng rng(seed);
  const double gain = std::sqrt(2.0 / (1.0 + spec.leaky_slope * spec.leaky_slope));
  ParamSet<T> params;
  for (const auto& l : layer_table(spec)) {
    const double fan_in = static_cast<double>(l.in_ch * l.k * l.k);
    const double stddev = gain / std::sqrt(fan_in);
    Tensor<T> w = Tensor<T>::uninit({l.out_ch, l.in_ch, l.k, l.k});
    for (auto& v : w.raw()) v = static_cast<T>(rng.normal() * stddev);
    params.add(l.conv + ".weight", w);
    if (l.bias) params.add(l.conv + ".bias", Tensor<T>::zeros({l.out_ch}));
    if (!l.bn.empty()) {
      params.add(l.bn + ".gamma", Tensor<T>::full({l.out_ch}, T(1)));
      params.add(l.bn + ".beta", Tensor<T>::zeros({l.out_ch}));
    }
  }
  return params;
}

// Feature map captured after a layer group: the channel with the highest
// mean activation, batch item 0.
template <typename T>
struct FeatureCapture {
  std::string group;
  Tensor<T> map;  // [H, W], detached
};

namespace detail {

template <typename T>
void capture_group(std::vector<FeatureCapture<T>>* captures, const std::string& group,
                   const Tensor<T>& feat) {
  if (!captures) return;
  const int64_t c = feat.dim(1), h = feat.dim(2), w = feat.dim(3), hw = h * w;
  int64_t best = 0;
  double best_mean = -std::numeric_limits<double>::infinity();
  for (int64_t ic = 0; ic < c; ++ic) {
    double acc = 0;
    for (int64_t i = 0; i < hw; ++i) acc += feat.data()[ic * hw + i];
    if (acc > best_mean) {
      best_mean = acc;
      best = ic;
    }
  }
  Tensor<T> map = Tensor<T>::uninit({h, w});
  std::copy_n(feat.data().data() + best * hw, hw, map.raw().data());
  captures->push_back({group, map});
}

}  // namespace detail

template <typename T>
Tensor<T> forward(const ModelSpec& spec, const ParamSet<T>& params, const Tensor<T>& images,
                  std::vector<FeatureCapture<T>>* captures = nullptr) {
  detail::check_nchw("forward", images);
  check_arg(images.dim(1) == 3, "forward: expected 3 input channels, got " +
                                    std::to_string(images.dim(1)));
  check_arg(images.dim(2) % 4 == 0 && images.dim(3) % 4 == 0,
            "forward: spatial dims " + std::to_string(images.dim(2)) + "x" +
                std::to_string(images.dim(3)) + " must be divisible by 4");

  const auto table = layer_table(spec);
  auto def = [&](const std::string& name) -> const ConvLayerDef& {
    for (const auto& l : table)
      if (l.conv == name) return l;
    fail("forward: unknown layer " + name);
  };
  auto conv_of = [&](const Tensor<T>& x, const ConvLayerDef& l) {
    ConvSpec cs{l.in_ch, l.out_ch, l.k, l.k, l.stride, l.dilation, l.padding, l.bias};
    return l.bias ? conv2d(x, params.at(l.conv + ".weight"), params.at(l.conv + ".bias"), cs)
                  : conv2d(x, params.at(l.conv + ".weight"), cs);
  };
  auto bn_of = [&](const Tensor<T>& x, const ConvLayerDef& l) {
    return batch_norm2d(x, params.at(l.bn + ".gamma"), params.at(l.bn + ".beta"), spec.bn_eps);
  };
  auto cba = [&](const Tensor<T>& x, const std::string& name) {
    const auto& l = def(name);
    return leaky_relu(bn_of(conv_of(x, l), l), spec.leaky_slope);
  };
  auto res_block = [&](const Tensor<T>& x, const std::string& block) {
    Tensor<T> y = cba(x, block + ".conv1");
    const auto& l2 = def(block + ".conv2");
    y = bn_of(conv_of(y, l2), l2);
    const auto& lp = def(block + ".proj");
    Tensor<T> shortcut = bn_of(conv_of(x, lp), lp);
    return leaky_relu(add(y, shortcut), spec.leaky_slope);
  };

  Tensor<T> x = cba(images, "head.conv1");
  x = cba(x, "head.conv2");
  detail::capture_group(captures, "head", x);
  x = res_block(x, "block1");
  detail::capture_group(captures, "block1", x);
  x = res_block(x, "block2");
  detail::capture_group(captures, "block2", x);
  x = res_block(x, "block3");
  detail::capture_group(captures, "block3", x);
  x = cba(x, "degrid.conv1");
  x = cba(x, "degrid.conv2");
  detail::capture_group(captures, "degrid", x);
  x = conv_of(x, def("upsample.conv"));
  detail::capture_group(captures, "upsample", x);
  return pixel_shuffle(x, spec.upsample_factor);
}

}  // namespace metadrn
