#include "metadrn/nn.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "metadrn/conv.hpp"
#include "metadrn/rng.hpp"
#include "test_helpers.hpp"

using namespace metadrn;
using testutil::random_tensor;

using TD = Tensor<double>;

TEST(BatchNorm, ConstantInputIsZero) {
  TD x = TD::full({2, 3, 4, 4}, 7.5);
  TD gamma = TD::full({3}, 1.0);
  TD beta = TD::zeros({3});
  TD y = batch_norm2d(x, gamma, beta);
  EXPECT_LT(max_abs_diff(y, TD::zeros(y.shape())), 1e-9);
}

TEST(BatchNorm, PlusMinusOneIsNearIdentity) {
  TD x = TD::uninit({2, 1, 1, 2});
  x.raw() = {-1, 1, -1, 1};
  TD y = batch_norm2d(x, TD::full({1}, 1.0), TD::zeros({1}), 1e-12);
  EXPECT_TRUE(allclose(y, x, 1e-6));
}

TEST(BatchNorm, ZeroGammaCollapsesToBeta) {
  Rng rng(5);
  TD x = random_tensor<double>({2, 2, 3, 3}, rng);
  TD y = batch_norm2d(x, TD::zeros({2}), TD::full({2}, 5.0));
  EXPECT_LT(max_abs_diff(y, TD::full(y.shape(), 5.0)), 1e-12);
}

TEST(LeakyRelu, ValuesAndGradient) {
  TD x = TD::from_data({3}, {2.0, -1.0, 0.0}).set_requires_grad(true);
  TD y = leaky_relu(x, 0.01);
  EXPECT_DOUBLE_EQ(y.data()[0], 2.0);
  EXPECT_DOUBLE_EQ(y.data()[1], -0.01);
  EXPECT_DOUBLE_EQ(y.data()[2], 0.0);
  auto g = backward(sum(y), {x});
  EXPECT_DOUBLE_EQ(g[0].data()[0], 1.0);
  EXPECT_DOUBLE_EQ(g[0].data()[1], 0.01);
  EXPECT_DOUBLE_EQ(g[0].data()[2], 1.0);  // subgradient at 0 defined as 1
  EXPECT_THROW(leaky_relu(x, 1.5), std::invalid_argument);
}

TEST(PixelShuffle, IndexMapDefinition) {
  TD x = TD::from_data({1, 4, 1, 1}, {1, 2, 3, 4});
  TD y = pixel_shuffle(x, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_TRUE(allclose(y, TD::from_data({1, 1, 2, 2}, {1, 2, 3, 4}), 0.0));
}

TEST(PixelShuffle, ShapeContract) {
  TD x = TD::zeros({2, 32, 8, 8});
  EXPECT_EQ(pixel_shuffle(x, 4).shape(), (Shape{2, 2, 32, 32}));
  EXPECT_THROW(pixel_shuffle(TD::zeros({1, 3, 2, 2}), 2), std::invalid_argument);
}

TEST(PixelShuffle, InverseIsIdentity) {
  Rng rng(11);
  TD x = random_tensor<double>({2, 8, 3, 5}, rng);
  EXPECT_TRUE(allclose(pixel_unshuffle(pixel_shuffle(x, 2), 2), x, 0.0));
  TD y = random_tensor<double>({2, 2, 4, 6}, rng);
  EXPECT_TRUE(allclose(pixel_shuffle(pixel_unshuffle(y, 2), 2), y, 0.0));
}

// A 1x1 conv followed by pixel_shuffle(r) equals a stride-r transposed conv
// whose r x r kernel is the inverse-shuffle rearrangement of the 1x1 weights.
TEST(PixelShuffle, EquivalentToTransposedConv) {
  Rng rng(21);
  const int64_t ci = 3, c = 2, r = 2, h = 4, w = 5;
  TD x = random_tensor<double>({2, ci, h, w}, rng);
  TD w1x1 = random_tensor<double>({c * r * r, ci, 1, 1}, rng);

  ConvSpec spec1{ci, c * r * r, 1, 1, 1, 1, 0, false};
  TD shuffled = pixel_shuffle(conv2d(x, w1x1, spec1), r);

  // conv_transpose2d consumes the forward-conv weight layout [Co,Ci,kh,kw]
  // with Co playing the role of the transpose input channels. Build it so
  // that tap (i,j) of output channel oc draws from shuffle source channel
  // oc*r*r + i*r + j.
  TD wt = TD::zeros({ci, c, r, r});
  for (int64_t icn = 0; icn < ci; ++icn)
    for (int64_t oc = 0; oc < c; ++oc)
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < r; ++j)
          wt.raw()[((icn * c + oc) * r + i) * r + j] =
              w1x1.data()[(oc * r * r + i * r + j) * ci + icn];
  ConvSpec spec2{c, ci, r, r, r, 1, 0, false};
  TD deconv = conv_transpose2d(x, wt, spec2, h * r, w * r);

  EXPECT_LT(max_abs_diff(shuffled, deconv), 1e-12);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  TD logits = TD::full({2, 2, 3, 3}, 0.7);
  TD target = TD::zeros({2, 3, 3});
  EXPECT_NEAR(softmax_cross_entropy(logits, target).item(), std::log(2.0), 1e-12);
}

TEST(CrossEntropy, LargeMarginDrivesLossToZero) {
  TD logits = TD::zeros({1, 2, 2, 2});
  for (int i = 0; i < 4; ++i) logits.raw()[4 + i] = 50.0;  // channel 1 wins everywhere
  TD target = TD::full({1, 2, 2}, 1.0);
  EXPECT_LT(softmax_cross_entropy(logits, target).item(), 1e-12);
}

TEST(CrossEntropy, MatchesPerPixelOracle) {
  Rng rng(31);
  TD logits = random_tensor<double>({1, 2, 2, 2}, rng, -3.0, 3.0);
  TD target = TD::uninit({1, 2, 2});
  for (auto& v : target.raw()) v = static_cast<double>(rng.uniform_int(2));

  double want = 0;
  for (int64_t i = 0; i < 4; ++i) {
    const double z0 = logits.data()[i], z1 = logits.data()[4 + i];
    const int64_t t = static_cast<int64_t>(target.data()[i]);
    const double zt = t == 0 ? z0 : z1;
    want += -std::log(std::exp(zt) / (std::exp(z0) + std::exp(z1)));
  }
  want /= 4.0;
  EXPECT_NEAR(softmax_cross_entropy(logits, target).item(), want, 1e-9);
}

TEST(CrossEntropy, OutOfRangeClassThrows) {
  TD logits = TD::zeros({1, 2, 1, 1});
  TD target = TD::full({1, 1, 1}, 2.0);
  EXPECT_THROW(softmax_cross_entropy(logits, target), std::invalid_argument);
}

TEST(CrossEntropy, StableUnderHugeLogits) {
  TD logits = TD::full({1, 2, 1, 1}, 1e4);
  logits.raw()[1] = -1e4;
  TD target = TD::zeros({1, 1, 1});
  const double loss = softmax_cross_entropy(logits, target).item();
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_NEAR(loss, 0.0, 1e-12);
}

TEST(SoftmaxChannel, SumsToOne) {
  Rng rng(77);
  TD z = random_tensor<double>({2, 3, 2, 2}, rng, -4.0, 4.0);
  TD p = softmax_channel(z);
  EXPECT_LT(max_abs_diff(pixel_sum(p), TD::full({2, 2, 2}, 1.0)), 1e-12);
}

TEST(Sigmoid, MatchesClosedForm) {
  TD x = TD::from_data({3}, {-2.0, 0.0, 3.0});
  TD y = sigmoid(x);
  for (int i = 0; i < 3; ++i)
    EXPECT_NEAR(y.data()[i], 1.0 / (1.0 + std::exp(-x.data()[i])), 1e-14);
}
