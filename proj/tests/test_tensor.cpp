#include "metadrn/tensor.hpp"

#include <gtest/gtest.h>

#include "metadrn/rng.hpp"

using namespace metadrn;

using TD = Tensor<double>;

TEST(Tensor, ShapeAndData) {
  TD t = TD::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6);
  EXPECT_EQ(t.dim(1), 3);
  EXPECT_THROW(TD::from_data({2, 2}, {1, 2, 3}), std::invalid_argument);
  EXPECT_THROW(t.item(), std::invalid_argument);
  EXPECT_DOUBLE_EQ(TD::scalar(4.0).item(), 4.0);
}

TEST(Tensor, AddZeroIsIdentity) {
  TD x = TD::from_data({3}, {1.5, -2.0, 0.25});
  TD y = add(x, TD::zeros({3}));
  EXPECT_TRUE(allclose(x, y, 0.0));
}

TEST(Tensor, MeanOfSmallVector) {
  TD x = TD::from_data({3}, {1, 2, 3});
  EXPECT_DOUBLE_EQ(mean(x).item(), 2.0);
}

TEST(Tensor, ShapeMismatchThrows) {
  TD a = TD::zeros({2, 2});
  TD b = TD::zeros({4});
  EXPECT_THROW(add(a, b), std::invalid_argument);
  EXPECT_THROW(mul(a, b), std::invalid_argument);
}

TEST(Autograd, LinearGradientIsInput) {
  TD w = TD::from_data({3}, {0.5, -1.0, 2.0}).set_requires_grad(true);
  TD x = TD::from_data({3}, {3.0, 4.0, 5.0});
  TD loss = sum(mul(w, x));
  auto grads = backward(loss, {w});
  EXPECT_TRUE(allclose(grads[0], x, 0.0));
}

TEST(Autograd, FanOutAccumulates) {
  TD x = TD::scalar(3.0).set_requires_grad(true);
  TD y = add(x, x);
  auto grads = backward(y, {x});
  EXPECT_DOUBLE_EQ(grads[0].item(), 2.0);
}

TEST(Autograd, DiamondGraph) {
  // z = (x + x) * (x + x) => dz/dx = 8x
  TD x = TD::scalar(1.5).set_requires_grad(true);
  TD s = add(x, x);
  TD z = mul(s, s);
  auto grads = backward(z, {x});
  EXPECT_DOUBLE_EQ(grads[0].item(), 12.0);
}

TEST(Autograd, DetachBlocksGradient) {
  TD x = TD::scalar(2.0).set_requires_grad(true);
  TD y = mul(detach(x), x);  // only the second factor contributes
  auto grads = backward(y, {x});
  EXPECT_DOUBLE_EQ(grads[0].item(), 2.0);
}

TEST(Autograd, UnreachedParameterGetsZeros) {
  TD w = TD::from_data({2}, {1, 1}).set_requires_grad(true);
  TD v = TD::from_data({2}, {1, 1}).set_requires_grad(true);
  TD loss = sum(w);
  auto grads = backward(loss, {w, v});
  EXPECT_TRUE(allclose(grads[1], TD::zeros({2}), 0.0));
}

TEST(Autograd, NonScalarLossThrows) {
  TD w = TD::from_data({2}, {1, 1}).set_requires_grad(true);
  EXPECT_THROW(backward(mul(w, w), {w}), std::invalid_argument);
}

TEST(Autograd, NanGradientNamesOp) {
  TD x = TD::from_data({2}, {0.0, 1.0}).set_requires_grad(true);
  TD loss = sum(log(x));  // grad 1/x is infinite at 0
  try {
    backward(loss, {x});
    FAIL() << "expected error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
  }
}

// A gradient of a gradient: f(p) = p^2, adapted = p - 0.1 * f'(p),
// then d/dp adapted^2 = 2 * adapted * (1 - 0.2) at p = 1 -> 1.28.
TEST(Autograd, SecondOrderThroughGradient) {
  TD p = TD::scalar(1.0).set_requires_grad(true);
  TD f = mul(p, p);
  auto g1 = backward(f, {p}, /*create_graph=*/true);
  TD adapted = sub(p, scalar_mul(g1[0], 0.1));
  TD outer = mul(adapted, adapted);
  auto g2 = backward(outer, {p});
  EXPECT_NEAR(g2[0].item(), 1.28, 1e-12);
}

TEST(Autograd, CreateGraphFalseYieldsDetachedGrads) {
  TD p = TD::scalar(1.0).set_requires_grad(true);
  TD f = mul(p, p);
  auto g = backward(f, {p}, /*create_graph=*/false);
  EXPECT_FALSE(g[0].has_node());
  EXPECT_FALSE(g[0].requires_grad());
}

TEST(Autograd, NoGradModeRecordsNothing) {
  TD p = TD::scalar(2.0).set_requires_grad(true);
  NoGradGuard ng;
  TD y = mul(p, p);
  EXPECT_FALSE(y.has_node());
}

TEST(Ops, ReshapeRoundTrip) {
  TD x = TD::from_data({2, 3}, {1, 2, 3, 4, 5, 6}).set_requires_grad(true);
  TD y = reshape(x, {3, 2});
  EXPECT_EQ(y.shape(), (Shape{3, 2}));
  auto g = backward(sum(mul(y, y)), {x});
  EXPECT_EQ(g[0].shape(), (Shape{2, 3}));
  EXPECT_DOUBLE_EQ(g[0].data()[5], 12.0);
}

TEST(Ops, ConcatAndSliceGradients) {
  TD a = TD::from_data({1, 2}, {1, 2}).set_requires_grad(true);
  TD b = TD::from_data({2, 2}, {3, 4, 5, 6}).set_requires_grad(true);
  TD c = concat0<double>({a, b});
  EXPECT_EQ(c.shape(), (Shape{3, 2}));
  TD weights = TD::from_data({3, 2}, {1, 1, 2, 2, 3, 3});
  auto g = backward(sum(mul(c, weights)), {a, b});
  EXPECT_TRUE(allclose(g[0], TD::from_data({1, 2}, {1, 1}), 0.0));
  EXPECT_TRUE(allclose(g[1], TD::from_data({2, 2}, {2, 2, 3, 3}), 0.0));
}

TEST(Ops, ChannelAndPixelBroadcastShapes) {
  TD x = TD::full({2, 3, 4, 4}, 1.0);
  EXPECT_TRUE(allclose(channel_sum(x), TD::full({3}, 32.0), 0.0));
  EXPECT_TRUE(allclose(pixel_sum(x), TD::full({2, 4, 4}, 3.0), 0.0));
  TD v = TD::from_data({3}, {1, 2, 3});
  TD bc = channel_broadcast(v, {2, 3, 2, 2});
  EXPECT_DOUBLE_EQ(bc.data()[4], 2.0);
}

TEST(Ops, SelectScatterRoundTrip) {
  TD x = TD::from_data({1, 2, 1, 2}, {10, 20, 30, 40});
  TD ids = TD::from_data({1, 1, 2}, {1, 0});
  TD picked = select_class(x, ids);
  EXPECT_TRUE(allclose(picked, TD::from_data({1, 1, 2}, {30, 20}), 0.0));
  TD scattered = scatter_class(picked, ids, 2);
  EXPECT_TRUE(allclose(scattered, TD::from_data({1, 2, 1, 2}, {0, 20, 30, 0}), 0.0));
  TD bad = TD::from_data({1, 1, 2}, {2, 0});
  EXPECT_THROW(select_class(x, bad), std::invalid_argument);
}

TEST(Rng, DeterministicAndForkable) {
  Rng a(42), b(42);
  for (int i = 0; i < 16; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c = a.fork(7), d = a.fork(7);
  EXPECT_EQ(c.next_u64(), d.next_u64());
  EXPECT_NE(a.fork(1).next_u64(), a.fork(2).next_u64());
  Rng e(1);
  for (int i = 0; i < 1000; ++i) {
    double u = e.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(e.uniform_int(10), 10u);
  }
}
