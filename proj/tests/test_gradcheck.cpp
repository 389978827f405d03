#include <gtest/gtest.h>

#include <chrono>

#include "metadrn/conv.hpp"
#include "metadrn/nn.hpp"
#include "metadrn/rng.hpp"
#include "test_helpers.hpp"

using namespace metadrn;
using testutil::gradcheck;
using testutil::random_tensor;

using TD = Tensor<double>;
using Inputs = std::vector<TD>;

namespace {

void expect_grads_ok(const std::function<TD(const Inputs&)>& fn, Inputs inputs,
                     std::vector<bool> diff, uint64_t seed) {
  Rng rng(seed);
  auto r = gradcheck(fn, std::move(inputs), diff, rng);
  EXPECT_LE(r.worst_excess, 0.0) << "analytic=" << r.worst_analytic << " fd=" << r.worst_fd;
}

}  // namespace

TEST(GradCheck, ElementwiseSuite) {
  Rng rng(1);
  expect_grads_ok([](const Inputs& in) { return add(in[0], in[1]); },
                  {random_tensor<double>({2, 3}, rng), random_tensor<double>({2, 3}, rng)},
                  {true, true}, 10);
  expect_grads_ok([](const Inputs& in) { return sub(in[0], in[1]); },
                  {random_tensor<double>({2, 3}, rng), random_tensor<double>({2, 3}, rng)},
                  {true, true}, 11);
  expect_grads_ok([](const Inputs& in) { return mul(in[0], in[1]); },
                  {random_tensor<double>({2, 3}, rng), random_tensor<double>({2, 3}, rng)},
                  {true, true}, 12);
  expect_grads_ok([](const Inputs& in) { return scalar_mul(in[0], -1.7); },
                  {random_tensor<double>({5}, rng)}, {true}, 13);
  expect_grads_ok([](const Inputs& in) { return scalar_add(in[0], 0.3); },
                  {random_tensor<double>({5}, rng)}, {true}, 14);
  expect_grads_ok([](const Inputs& in) { return exp(in[0]); },
                  {random_tensor<double>({4}, rng)}, {true}, 15);
  expect_grads_ok([](const Inputs& in) { return log(in[0]); },
                  {random_tensor<double>({4}, rng, 0.5, 2.0)}, {true}, 16);
  expect_grads_ok([](const Inputs& in) { return pow_scalar(in[0], -0.5); },
                  {random_tensor<double>({4}, rng, 0.5, 2.0)}, {true}, 17);
  expect_grads_ok([](const Inputs& in) { return sigmoid(in[0]); },
                  {random_tensor<double>({6}, rng, -2.0, 2.0)}, {true}, 18);
}

TEST(GradCheck, ReductionsAndBroadcasts) {
  Rng rng(2);
  expect_grads_ok([](const Inputs& in) { return sum(in[0]); },
                  {random_tensor<double>({3, 2}, rng)}, {true}, 20);
  expect_grads_ok([](const Inputs& in) { return mean(in[0]); },
                  {random_tensor<double>({3, 2}, rng)}, {true}, 21);
  expect_grads_ok([](const Inputs& in) { return broadcast_scalar(in[0], {2, 3}); },
                  {TD::scalar(0.7)}, {true}, 22);
  expect_grads_ok([](const Inputs& in) { return channel_sum(in[0]); },
                  {random_tensor<double>({2, 3, 2, 2}, rng)}, {true}, 23);
  expect_grads_ok([](const Inputs& in) { return channel_broadcast(in[0], {2, 3, 2, 2}); },
                  {random_tensor<double>({3}, rng)}, {true}, 24);
  expect_grads_ok([](const Inputs& in) { return pixel_sum(in[0]); },
                  {random_tensor<double>({2, 3, 2, 2}, rng)}, {true}, 25);
  expect_grads_ok([](const Inputs& in) { return pixel_broadcast(in[0], 3); },
                  {random_tensor<double>({2, 2, 2}, rng)}, {true}, 26);
}

TEST(GradCheck, ShapeOps) {
  Rng rng(3);
  expect_grads_ok([](const Inputs& in) { return reshape(in[0], {6}); },
                  {random_tensor<double>({2, 3}, rng)}, {true}, 30);
  expect_grads_ok([](const Inputs& in) { return concat0<double>({in[0], in[1]}); },
                  {random_tensor<double>({2, 3}, rng), random_tensor<double>({1, 3}, rng)},
                  {true, true}, 31);
  expect_grads_ok([](const Inputs& in) { return slice0(in[0], 1, 2); },
                  {random_tensor<double>({4, 2}, rng)}, {true}, 32);
  expect_grads_ok([](const Inputs& in) { return pad0(in[0], 1, 4); },
                  {random_tensor<double>({2, 3}, rng)}, {true}, 33);
}

TEST(GradCheck, SelectAndScatter) {
  Rng rng(4);
  TD ids = TD::uninit({1, 2, 2});
  for (auto& v : ids.raw()) v = static_cast<double>(rng.uniform_int(3));
  expect_grads_ok([ids](const Inputs& in) { return select_class(in[0], ids); },
                  {random_tensor<double>({1, 3, 2, 2}, rng)}, {true}, 40);
  expect_grads_ok([ids](const Inputs& in) { return scatter_class(in[0], ids, 3); },
                  {random_tensor<double>({1, 2, 2}, rng)}, {true}, 41);
}

TEST(GradCheck, LeakyReluAwayFromKink) {
  Rng rng(5);
  TD x = random_tensor<double>({3, 3}, rng, 0.1, 1.0);
  for (size_t i = 0; i < x.raw().size(); i += 2) x.raw()[i] = -x.raw()[i];
  expect_grads_ok([](const Inputs& in) { return leaky_relu(in[0], 0.01); }, {x}, {true}, 50);
}

TEST(GradCheck, ConvFamily) {
  Rng rng(6);
  for (int64_t stride : {1, 2}) {
    for (int64_t dilation : {1, 2}) {
      ConvSpec spec{2, 3, 3, 3, stride, dilation, dilation, false};
      expect_grads_ok(
          [spec](const Inputs& in) { return conv2d(in[0], in[1], spec); },
          {random_tensor<double>({1, 2, 6, 6}, rng), random_tensor<double>({3, 2, 3, 3}, rng)},
          {true, true}, 60 + stride * 10 + dilation);
    }
  }
  ConvSpec spec{2, 3, 3, 3, 2, 1, 1, false};
  const int64_t ho = conv_out_size(6, 3, 2, 1, 1);
  expect_grads_ok(
      [spec](const Inputs& in) { return conv_transpose2d(in[0], in[1], spec, 6, 6); },
      {random_tensor<double>({1, 3, ho, ho}, rng), random_tensor<double>({3, 2, 3, 3}, rng)},
      {true, true}, 61);
  expect_grads_ok(
      [spec](const Inputs& in) { return conv2d_weight_grad(in[0], in[1], spec); },
      {random_tensor<double>({1, 2, 6, 6}, rng), random_tensor<double>({1, 3, ho, ho}, rng)},
      {true, true}, 62);

  ConvSpec with_bias{2, 3, 1, 1, 1, 1, 0, true};
  expect_grads_ok(
      [with_bias](const Inputs& in) { return conv2d(in[0], in[1], in[2], with_bias); },
      {random_tensor<double>({1, 2, 3, 3}, rng), random_tensor<double>({3, 2, 1, 1}, rng),
       random_tensor<double>({3}, rng)},
      {true, true, true}, 63);
}

TEST(GradCheck, BatchNorm) {
  Rng rng(7);
  expect_grads_ok(
      [](const Inputs& in) { return batch_norm2d(in[0], in[1], in[2], 1e-5); },
      {random_tensor<double>({2, 2, 3, 3}, rng), random_tensor<double>({2}, rng, 0.5, 1.5),
       random_tensor<double>({2}, rng)},
      {true, true, true}, 70);
}

TEST(GradCheck, PixelShuffle) {
  Rng rng(8);
  expect_grads_ok([](const Inputs& in) { return pixel_shuffle(in[0], 2); },
                  {random_tensor<double>({1, 8, 2, 2}, rng)}, {true}, 80);
  expect_grads_ok([](const Inputs& in) { return pixel_unshuffle(in[0], 2); },
                  {random_tensor<double>({1, 2, 4, 4}, rng)}, {true}, 81);
}

TEST(GradCheck, SoftmaxAndCrossEntropy) {
  Rng rng(9);
  TD target = TD::uninit({1, 2, 2});
  for (auto& v : target.raw()) v = static_cast<double>(rng.uniform_int(2));
  expect_grads_ok([target](const Inputs& in) { return softmax_cross_entropy(in[0], target); },
                  {random_tensor<double>({1, 2, 2, 2}, rng, -2.0, 2.0)}, {true}, 90);
  expect_grads_ok([](const Inputs& in) { return softmax_channel(in[0]); },
                  {random_tensor<double>({1, 3, 2, 2}, rng, -2.0, 2.0)}, {true}, 91);
}

// Full-suite wall-clock budget; also exercised standalone by the acceptance
// binary which repeats all checks under 60 s.
TEST(GradCheck, SuiteIsFast) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(10);
  ConvSpec spec{2, 2, 3, 3, 1, 2, 2, false};
  expect_grads_ok(
      [spec](const Inputs& in) { return conv2d(in[0], in[1], spec); },
      {random_tensor<double>({1, 2, 8, 8}, rng), random_tensor<double>({2, 2, 3, 3}, rng)},
      {true, true}, 100);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(secs, 60.0);
}
