#include "metadrn/model.hpp"

#include <gtest/gtest.h>

#include "metadrn/nn.hpp"
#include "metadrn/rng.hpp"
#include "test_helpers.hpp"

using namespace metadrn;
using testutil::random_tensor;

using TF = Tensor<float>;
using TD = Tensor<double>;

namespace {

// Counting formula written out from the architecture constants, independent
// of layer_table: conv weights in*out*k^2, one bias on the upsample conv,
// 2 affine scalars per normalized channel.
int64_t expected_count(int64_t c16, int64_t c64, int64_t c128, int64_t c256, int64_t c512,
                       int64_t num_classes) {
  const int64_t convs = 3 * c16 * 9 + c16 * c64 * 9                      // head
                        + c64 * c128 * 9 + c128 * c128 * 9 + c64 * c128  // block1 + proj
                        + c128 * c256 * 9 + c256 * c256 * 9 + c128 * c256
                        + c256 * c512 * 9 + c512 * c512 * 9 + c256 * c512
                        + c512 * c512 * 9 + c512 * c512 * 9   // degrid
                        + c512 * num_classes * 16;            // upsample 1x1
  const int64_t bias = num_classes * 16;
  const int64_t bn = 2 * (c16 + c64 + 3 * c128 + 3 * c256 + 3 * c512 + 2 * c512);
  return convs + bias + bn;
}

}  // namespace

TEST(Model, CountAtFullWidthHitsBudget) {
  ModelSpec spec;
  const int64_t count = count_params(spec);
  EXPECT_EQ(count, expected_count(16, 64, 128, 256, 512, 2));
  EXPECT_EQ(count, 9569136);
  // within +-1% of the 9.56M parameter budget
  EXPECT_GE(count, 9464400);
  EXPECT_LE(count, 9655600);
}

TEST(Model, CountAtEighthWidthMatchesFormulaAndBuild) {
  ModelSpec spec;
  spec.width_multiplier = 1.0 / 8.0;
  const int64_t count = count_params(spec);
  EXPECT_EQ(count, expected_count(2, 8, 16, 32, 64, 2));
  EXPECT_EQ(count, 152218);
  auto params = build_params<float>(spec, 3);
  EXPECT_EQ(params.total_scalars(), count);
}

TEST(Model, CountMatchesBuiltAtFullWidth) {
  ModelSpec spec;
  auto params = build_params<float>(spec, 1);
  EXPECT_EQ(params.total_scalars(), count_params(spec));
}

TEST(Model, HeadOnlyWeightCounts) {
  ModelSpec spec;
  auto table = layer_table(spec);
  EXPECT_EQ(table[0].in_ch * table[0].out_ch * table[0].k * table[0].k, 432);
  EXPECT_EQ(table[1].in_ch * table[1].out_ch * table[1].k * table[1].k, 9216);
}

TEST(Model, BuildIsDeterministic) {
  ModelSpec spec;
  spec.width_multiplier = 0.125;
  auto a = build_params<float>(spec, 42);
  auto b = build_params<float>(spec, 42);
  ASSERT_TRUE(a.congruent(b));
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.entry(i).second.data(), b.entry(i).second.data()) << a.entry(i).first;
  }
  auto c = build_params<float>(spec, 43);
  bool any_diff = false;
  for (size_t i = 0; i < a.size(); ++i)
    if (a.entry(i).second.data() != c.entry(i).second.data()) any_diff = true;
  EXPECT_TRUE(any_diff);
}

TEST(Model, ForwardShapeContract) {
  ModelSpec spec;
  spec.width_multiplier = 0.125;
  auto params = build_params<float>(spec, 7);
  Rng rng(9);
  TF x = random_tensor<float>({2, 3, 64, 64}, rng, 0.0, 1.0);
  TF logits = forward(spec, params, x);
  EXPECT_EQ(logits.shape(), (Shape{2, 2, 64, 64}));

  TF x2 = random_tensor<float>({1, 3, 32, 32}, rng, 0.0, 1.0);
  TF logits2 = forward(spec, params, x2);
  EXPECT_EQ(logits2.shape(), (Shape{1, 2, 32, 32}));
  EXPECT_TRUE(logits2.all_finite());

  EXPECT_THROW(forward(spec, params, TF::zeros({1, 3, 30, 32})), std::invalid_argument);
}

TEST(Model, ForwardIsDeterministic) {
  ModelSpec spec;
  spec.width_multiplier = 0.125;
  auto params = build_params<float>(spec, 7);
  Rng rng(10);
  TF x = random_tensor<float>({1, 3, 16, 16}, rng, 0.0, 1.0);
  TF a = forward(spec, params, x);
  TF b = forward(spec, params, x);
  EXPECT_EQ(a.data(), b.data());
}

TEST(Model, ZeroFinalConvGivesUniformForeground) {
  ModelSpec spec;
  spec.width_multiplier = 0.125;
  auto params = build_params<float>(spec, 7);
  const double b0 = 0.3, b1 = -0.4;
  params.set("upsample.conv.weight", TF::zeros(params.at("upsample.conv.weight").shape()));
  TF bias = TF::uninit({32});
  for (int i = 0; i < 32; ++i) bias.raw()[i] = static_cast<float>(i < 16 ? b0 : b1);
  params.set("upsample.conv.bias", bias);

  Rng rng(11);
  TF x = random_tensor<float>({1, 3, 16, 16}, rng, 0.0, 1.0);
  TF prob = softmax_channel(forward(spec, params, x));
  const double want = 1.0 / (1.0 + std::exp(-(b1 - b0)));
  for (int64_t i = 0; i < 16 * 16; ++i)
    EXPECT_NEAR(prob.data()[16 * 16 + i], want, 1e-6);
}

TEST(Model, EveryParameterGetsGradient) {
  ModelSpec spec;
  spec.width_multiplier = 0.125;
  auto params = build_params<float>(spec, 21).leaf_view();
  Rng rng(22);
  TF x = random_tensor<float>({2, 3, 16, 16}, rng, 0.0, 1.0);
  TF target = TF::uninit({2, 16, 16});
  for (auto& v : target.raw()) v = static_cast<float>(rng.uniform_int(2));
  TF loss = softmax_cross_entropy(forward(spec, params, x), target);
  auto grads = backward(loss, params.tensors());
  for (size_t i = 0; i < params.size(); ++i) {
    double norm = 0;
    for (float v : grads[i].data()) norm += static_cast<double>(v) * v;
    EXPECT_GT(norm, 0.0) << params.entry(i).first;
  }
}

TEST(Model, CaptureProducesSixGroupsAtExpectedSizes) {
  ModelSpec spec;
  spec.width_multiplier = 0.125;
  auto params = build_params<float>(spec, 5);
  Rng rng(6);
  TF x = random_tensor<float>({1, 3, 32, 32}, rng, 0.0, 1.0);
  std::vector<FeatureCapture<float>> caps;
  TF logits = forward(spec, params, x, &caps);
  ASSERT_EQ(caps.size(), 6u);
  const std::vector<int64_t> sizes = {16, 8, 8, 8, 8, 8};
  for (size_t i = 0; i < caps.size(); ++i) {
    EXPECT_EQ(caps[i].map.shape(), (Shape{sizes[i], sizes[i]})) << caps[i].group;
    EXPECT_TRUE(caps[i].map.all_finite());
  }
  EXPECT_EQ(logits.shape(), (Shape{1, 2, 32, 32}));
}

// The dilation schedule must reproduce, layer for layer, the receptive-field
// growth of the strided counterpart that downsamples in blocks 2-3 instead.
TEST(Model, DilationScheduleMatchesStridedCounterpart) {
  ModelSpec spec;
  struct Row {
    int64_t k, stride, dilation;
  };
  // main path of this architecture
  std::vector<Row> ours;
  for (const auto& l : layer_table(spec))
    if (!l.shortcut) ours.push_back({l.k, l.stride, l.dilation});
  // classic counterpart: same stack but stride-2 entries into blocks 2 and 3
  // with all dilations 1
  std::vector<Row> counterpart = {
      {3, 2, 1}, {3, 1, 1},            // head
      {3, 2, 1}, {3, 1, 1},            // block1
      {3, 2, 1}, {3, 1, 1},            // block2 downsamples
      {3, 2, 1}, {3, 1, 1},            // block3 downsamples
      {3, 1, 1}, {3, 1, 1}, {1, 1, 1}  // degrid + 1x1 (degrid dilation removed too)
  };
  auto rf_growth = [](const std::vector<Row>& rows) {
    std::vector<int64_t> increments;
    int64_t input_stride = 1;
    for (const auto& r : rows) {
      increments.push_back((r.k - 1) / 2 * r.dilation * input_stride);
      input_stride *= r.stride;
    }
    return increments;
  };
  auto a = rf_growth(ours);
  auto b = rf_growth(counterpart);
  ASSERT_EQ(a.size(), b.size());
  // blocks 2-3 and overall radius agree; the strided counterpart reaches the
  // same receptive field that the dilations 1,1,1,2,2,4 provide
  int64_t ra = 0, rb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ra += a[i];
    rb += b[i];
  }
  for (size_t i = 4; i < 8; ++i) EXPECT_EQ(a[i], b[i]) << "resblock conv " << i;
  EXPECT_EQ(ra - a[8] - a[9], rb - b[8] - b[9]);  // identical up to the degrid tail
}

// Shifting the input by the total downsampling factor shifts the logits by
// the same amount; interior pixels whose receptive field avoids the padding
// match. Both images go through one batch so the normalization constants are
// shared and padding is the only source of spatial bias.
TEST(Model, ShiftEquivarianceInInterior) {
  ModelSpec spec;
  spec.width_multiplier = 0.125;
  auto params = build_params<float>(spec, 13);
  Rng rng(14);
  const int64_t n = 128, shift = 4, radius = 57;
  TF batch = TF::zeros({2, 3, n, n});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t h = 0; h < n; ++h)
      for (int64_t w = 0; w < n; ++w) {
        const float v = static_cast<float>(rng.uniform());
        batch.raw()[(c * n + h) * n + w] = v;
        if (w + shift < n) batch.raw()[((3 + c) * n + h) * n + w + shift] = v;
      }

  NoGradGuard ng;
  TF y = forward(spec, params, batch);
  double worst = 0;
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t h = radius; h < n - radius; ++h)
      for (int64_t w = radius + shift; w < n - radius; ++w) {
        const double a = y.data()[((2 + c) * n + h) * n + w];
        const double b = y.data()[(c * n + h) * n + w - shift];
        worst = std::max(worst, std::abs(a - b));
      }
  EXPECT_LT(worst, 1e-4);
}
