#include "metadrn/conv.hpp"

#include <gtest/gtest.h>

#include "metadrn/rng.hpp"
#include "test_helpers.hpp"

using namespace metadrn;
using testutil::conv2d_oracle;
using testutil::random_tensor;

using TD = Tensor<double>;

TEST(Conv2d, AllOnesCenterAndCorner) {
  ConvSpec spec{1, 1, 3, 3, 1, 1, 1, false};
  TD x = TD::full({1, 1, 3, 3}, 1.0);
  TD w = TD::full({1, 1, 3, 3}, 1.0);
  TD y = conv2d(x, w, spec);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_DOUBLE_EQ(y.data()[4], 9.0);  // center: full kernel footprint
  EXPECT_DOUBLE_EQ(y.data()[0], 4.0);  // corner: 2x2 in bounds
}

TEST(Conv2d, DilatedAllOnesCenter) {
  ConvSpec spec{1, 1, 3, 3, 1, 2, 2, false};
  TD x = TD::full({1, 1, 5, 5}, 1.0);
  TD w = TD::full({1, 1, 3, 3}, 1.0);
  TD y = conv2d(x, w, spec);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 5, 5}));
  EXPECT_DOUBLE_EQ(y.data()[12], 9.0);  // all 9 dilated taps in bounds at center
}

TEST(Conv2d, MatchesOracleAcrossStridesAndDilations) {
  Rng rng(123);
  for (int64_t stride : {1, 2}) {
    for (int64_t dilation : {1, 2, 4}) {
      for (int64_t padding : {int64_t{0}, int64_t{1}, dilation}) {
        const int64_t extent = dilation * 2 + 1;
        if (extent > 6 + 2 * padding) continue;
        ConvSpec spec{2, 3, 3, 3, stride, dilation, padding, false};
        TD x = random_tensor<double>({1, 2, 6, 6}, rng);
        TD w = random_tensor<double>({3, 2, 3, 3}, rng);
        TD got = conv2d(x, w, spec);
        TD want = conv2d_oracle(x, w, spec);
        EXPECT_EQ(got.shape(), want.shape())
            << "s=" << stride << " d=" << dilation << " p=" << padding;
        EXPECT_LT(max_abs_diff(got, want), 1e-12)
            << "s=" << stride << " d=" << dilation << " p=" << padding;
      }
    }
  }
}

TEST(Conv2d, RectangularKernelAndInput) {
  Rng rng(7);
  ConvSpec spec{1, 2, 2, 3, 1, 1, 1, false};
  TD x = random_tensor<double>({2, 1, 5, 7}, rng);
  TD w = random_tensor<double>({2, 1, 2, 3}, rng);
  EXPECT_LT(max_abs_diff(conv2d(x, w, spec), conv2d_oracle(x, w, spec)), 1e-12);
}

TEST(Conv2d, BiasBroadcastsPerChannel) {
  ConvSpec spec{1, 2, 1, 1, 1, 1, 0, true};
  TD x = TD::full({1, 1, 2, 2}, 0.0);
  TD w = TD::zeros({2, 1, 1, 1});
  TD b = TD::from_data({2}, {1.5, -2.5});
  TD y = conv2d(x, w, b, spec);
  EXPECT_DOUBLE_EQ(y.data()[0], 1.5);
  EXPECT_DOUBLE_EQ(y.data()[4], -2.5);
}

TEST(Conv2d, ShapeErrors) {
  ConvSpec spec{2, 1, 3, 3, 1, 1, 1, false};
  TD x = TD::zeros({1, 3, 4, 4});  // wrong channel count
  TD w = TD::zeros({1, 2, 3, 3});
  EXPECT_THROW(conv2d(x, w, spec), std::invalid_argument);

  ConvSpec big{1, 1, 3, 3, 1, 4, 0, false};  // effective kernel 9 > input 4
  TD x2 = TD::zeros({1, 1, 4, 4});
  TD w2 = TD::zeros({1, 1, 3, 3});
  EXPECT_THROW(conv2d(x2, w2, big), std::invalid_argument);
}

// The adjoint identity <conv(x,w), g> == <x, conv_transpose(g,w)> for random
// tensors nails the scatter indexing of the transposed kernel.
TEST(ConvTranspose2d, AdjointIdentity) {
  Rng rng(99);
  for (int64_t stride : {1, 2}) {
    for (int64_t dilation : {1, 2}) {
      ConvSpec spec{2, 3, 3, 3, stride, dilation, dilation, false};
      TD x = random_tensor<double>({2, 2, 8, 8}, rng);
      TD w = random_tensor<double>({3, 2, 3, 3}, rng);
      TD y = conv2d(x, w, spec);
      TD g = random_tensor<double>(y.shape(), rng);
      TD xt = conv_transpose2d(g, w, spec, 8, 8);
      const double lhs = sum(mul(y, g)).item();
      const double rhs = sum(mul(x, xt)).item();
      EXPECT_NEAR(lhs, rhs, 1e-10) << "s=" << stride << " d=" << dilation;
    }
  }
}

TEST(ConvWeightGrad, AdjointIdentity) {
  Rng rng(1234);
  ConvSpec spec{2, 3, 3, 3, 2, 2, 2, false};
  TD x = random_tensor<double>({2, 2, 8, 8}, rng);
  TD w = random_tensor<double>({3, 2, 3, 3}, rng);
  TD y = conv2d(x, w, spec);
  TD g = random_tensor<double>(y.shape(), rng);
  TD dw = conv2d_weight_grad(x, g, spec);
  EXPECT_NEAR(sum(mul(y, g)).item(), sum(mul(w, dw)).item(), 1e-10);
}

TEST(Conv2d, BackwardMatchesOracleGradients) {
  Rng rng(55);
  ConvSpec spec{2, 2, 3, 3, 2, 2, 2, false};
  TD x = random_tensor<double>({1, 2, 6, 6}, rng).set_requires_grad(true);
  TD w = random_tensor<double>({2, 2, 3, 3}, rng).set_requires_grad(true);
  TD proj = random_tensor<double>({1, 2, 3, 3}, rng);
  TD loss = sum(mul(conv2d(x, w, spec), proj));
  auto grads = backward(loss, {x, w});
  EXPECT_TRUE(allclose(grads[0], conv_transpose2d(proj, w.detach(), spec, 6, 6), 1e-12));
  EXPECT_TRUE(allclose(grads[1], conv2d_weight_grad(x.detach(), proj, spec), 1e-12));
}
