#include <gtest/gtest.h>

#include <cstring>
#include <string>
#include <vector>

#include "erasenet/model.hpp"
#include "support/helpers.hpp"
#include "support/oracles.hpp"

using namespace erasenet;
using erasenet::testing::kLayerSizes;
using erasenet::testing::random_tensor;

namespace {

// counted straight off the table rows, no engine types involved
std::size_t block_params(std::size_t cin, std::size_t f, std::size_t k, std::size_t depth) {
  std::size_t n = cin * f * k * k + 3 * f;  // kernel, bias, gamma, beta
  n += (depth - 1) * (f * f * k * k + 3 * f);
  return n;
}
std::size_t up_params(std::size_t cin, std::size_t f) { return cin * f * 9 + f; }

bool bytes_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST(Model, TraceMatchesLayerTable) {
  auto net = build_erasenet(Variant::EraseNet4, 0.25, 3);
  std::vector<TraceEntry> trace;
  const auto y = net.forward(random_tensor<float>({1, 1, 256, 256}, 1, 0, 1), Mode::Infer, nullptr, &trace);
  ASSERT_EQ(trace.size(), kLayerSizes.size());
  for (std::size_t i = 0; i < kLayerSizes.size(); ++i) {
    EXPECT_EQ(trace[i].label, kLayerSizes[i].label) << i;
    EXPECT_EQ(trace[i].shape.h, kLayerSizes[i].size) << kLayerSizes[i].label;
    EXPECT_EQ(trace[i].shape.w, kLayerSizes[i].size) << kLayerSizes[i].label;
  }
  EXPECT_EQ(y.shape(), (Shape{1, 1, 256, 256}));
  for (float v : y.data()) {
    ASSERT_GT(v, 0.0f);
    ASSERT_LT(v, 1.0f);
  }
}

TEST(Model, FullWidthChannelCounts) {
  const auto a = erasenet_architecture(Variant::EraseNet4);
  EXPECT_EQ(a.encoder[0], (ConvBlockSpec{2, 64, 5}));
  EXPECT_EQ(a.encoder[1], (ConvBlockSpec{2, 64, 5}));
  EXPECT_EQ(a.encoder[2], (ConvBlockSpec{3, 128, 3}));
  EXPECT_EQ(a.encoder[3], (ConvBlockSpec{3, 256, 3}));
  EXPECT_EQ(a.bottleneck, (ConvBlockSpec{4, 512, 3}));
  const std::size_t ups[] = {256, 128, 64, 64};
  const ConvBlockSpec dec[] = {{3, 256, 3}, {3, 128, 3}, {3, 64, 5}, {3, 64, 5}};
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(a.decoder[i].transpose_filters, ups[i]);
    EXPECT_EQ(a.decoder[i].block, dec[i]);
  }
}

TEST(Model, FourDownAndFourUpSamplings) {
  auto net = build_erasenet(Variant::EraseNet4, 0.125);
  int transitions = 0, transposes = 0;
  std::vector<const LayerDesc*> concats;
  for (const auto& l : net.layers()) {
    transitions += l.kind == LayerKind::Transition;
    transposes += l.kind == LayerKind::ConvTranspose;
    if (l.kind == LayerKind::Concatenation) concats.push_back(&l);
  }
  EXPECT_EQ(transitions, 4);
  EXPECT_EQ(transposes, 4);
  ASSERT_EQ(concats.size(), 4u);
  // ConvTranspose (i) pairs with Residual (5 - i)
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(concats[i]->index, i);
    EXPECT_EQ(concats[i]->partner + 1, 4 - i);
  }
}

TEST(Model, EraseNet3HasThreeOfEach) {
  auto net = build_erasenet(Variant::EraseNet3, 0.125);
  int transitions = 0, transposes = 0, concats = 0;
  for (const auto& l : net.layers()) {
    transitions += l.kind == LayerKind::Transition;
    transposes += l.kind == LayerKind::ConvTranspose;
    concats += l.kind == LayerKind::Concatenation;
  }
  EXPECT_EQ(transitions, 3);
  EXPECT_EQ(transposes, 3);
  EXPECT_EQ(concats, 3);
  EXPECT_EQ(net.architecture().required_multiple(), 8u);
  const auto y = net.forward(random_tensor<float>({1, 1, 24, 40}, 2, 0, 1), Mode::Infer);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 24, 40}));
}

TEST(Model, ParameterCountMatchesScriptedCount) {
  const std::size_t e4 = block_params(1, 64, 5, 2) + block_params(64, 64, 5, 2) + block_params(64, 128, 3, 3) +
                         block_params(128, 256, 3, 3) + block_params(256, 512, 3, 4) + up_params(512, 256) +
                         block_params(512, 256, 3, 3) + up_params(256, 128) + block_params(256, 128, 3, 3) +
                         up_params(128, 64) + block_params(128, 64, 5, 3) + up_params(64, 64) +
                         block_params(128, 64, 5, 3) + 64 * 9 + 1;
  EXPECT_EQ(e4, 15779073u);  // same count from a separate python one-liner
  EXPECT_EQ(build_erasenet(Variant::EraseNet4).parameter_count(), e4);

  const std::size_t e3 = block_params(1, 64, 5, 2) + block_params(64, 64, 5, 2) + block_params(64, 128, 3, 3) +
                         block_params(128, 256, 3, 3) + up_params(256, 128) + block_params(256, 128, 3, 3) +
                         up_params(128, 64) + block_params(128, 64, 5, 3) + up_params(64, 64) +
                         block_params(128, 64, 5, 3) + 64 * 9 + 1;
  EXPECT_EQ(e3, 3973889u);
  EXPECT_EQ(build_erasenet(Variant::EraseNet3).parameter_count(), e3);
}

TEST(Model, ParameterNamesUniqueAndDotted) {
  auto net = build_erasenet(Variant::EraseNet4, 0.125);
  std::vector<std::string> names;
  for (const auto& [n, p] : net.parameters()) names.push_back(n);
  EXPECT_EQ(names.front(), "enc.block1.conv0.kernel");
  EXPECT_EQ(names.back(), "head.bias");
  auto sorted = names;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
  EXPECT_TRUE(net.find_parameter("dec.up4.kernel").has_value());
  EXPECT_TRUE(net.find_parameter("enc.block5.bn3.gamma").has_value());
  EXPECT_FALSE(net.find_parameter("enc.block6.conv0.kernel").has_value());
}

TEST(Model, RejectsUnalignedInput) {
  auto net = build_erasenet(Variant::EraseNet4, 0.125);
  try {
    net.forward(Tensor<float>::zeros({1, 1, 250, 250}), Mode::Infer);
    FAIL() << "250x250 accepted";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("multiple of 16"), std::string::npos) << e.what();
  }
  auto net3 = build_erasenet(Variant::EraseNet3, 0.125);
  EXPECT_THROW(net3.forward(Tensor<float>::zeros({1, 1, 20, 16}), Mode::Infer), ShapeError);
  EXPECT_THROW(net.forward(Tensor<float>::zeros({1, 2, 16, 16}), Mode::Infer), ShapeError);
}

TEST(Model, AcceptsPageModeInput) {
  auto net = build_erasenet(Variant::EraseNet4, 0.125);
  const auto y = net.forward(random_tensor<float>({1, 1, 480, 864}, 4, 0, 1), Mode::Infer);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 480, 864}));
}

TEST(Model, TrainModeNeedsRng) {
  auto net = build_erasenet(Variant::EraseNet4, 0.125);
  EXPECT_THROW(net.forward(Tensor<float>::zeros({1, 1, 16, 16}), Mode::Train), std::invalid_argument);
}

TEST(Model, UnknownVariantRejected) { EXPECT_THROW(variant_from_int(5), std::invalid_argument); }

TEST(Model, InferIsPure) {
  auto net = build_erasenet(Variant::EraseNet4, 0.125, 9);
  const auto x = random_tensor<float>({2, 1, 32, 32}, 5, 0, 1);
  {
    Rng rng(1);
    net.forward(x, Mode::Train, &rng);  // move running stats off their defaults
  }
  std::vector<std::vector<float>> before;
  for (auto& [n, b] : net.buffers()) before.push_back(*b);
  std::vector<std::vector<float>> params;
  for (const auto& [n, p] : net.parameters()) params.emplace_back(p.data().begin(), p.data().end());

  const auto a = net.forward(x, Mode::Infer);
  const auto b = net.forward(x, Mode::Infer);
  EXPECT_TRUE(bytes_equal(a, b));
  std::size_t i = 0;
  for (auto& [n, buf] : net.buffers()) EXPECT_EQ(*buf, before[i++]) << n;
  i = 0;
  for (const auto& [n, p] : net.parameters()) {
    EXPECT_TRUE(std::equal(p.data().begin(), p.data().end(), params[i].begin())) << n;
    ++i;
  }
}

TEST(Model, SameSeedSameForward) {
  auto a = build_erasenet(Variant::EraseNet3, 0.125, 11);
  auto b = build_erasenet(Variant::EraseNet3, 0.125, 11);
  const auto x = random_tensor<float>({2, 1, 16, 16}, 6, 0, 1);
  Rng ra(3), rb(3);
  EXPECT_TRUE(bytes_equal(a.forward(x, Mode::Train, &ra), b.forward(x, Mode::Train, &rb)));
}

TEST(ConvBlock, ZeroWeightsGiveZeros) {
  ConvBlock<float> block{{3, 4, 3}, {}};
  for (std::size_t l = 0; l < 3; ++l) {
    const std::size_t cin = l == 0 ? 2 : 4;
    block.layers.push_back({{Tensor<float>::zeros({4, cin, 3, 3}), Tensor<float>::zeros({1, 4, 1, 1})},
                            BatchNormState<float>::make(4)});
  }
  for (Mode m : {Mode::Train, Mode::Infer}) {
    const auto y = conv_block_forward(random_tensor<float>({2, 2, 6, 6}, 7), block, m);
    EXPECT_EQ(y.shape(), (Shape{2, 4, 6, 6}));
    for (float v : y.data()) ASSERT_EQ(v, 0.0f);
  }
}

namespace {

ConvBlock<float> seeded_block(std::size_t cin, ConvBlockSpec spec, std::uint64_t seed) {
  ConvBlock<float> block{spec, {}};
  for (std::size_t l = 0; l < spec.depth; ++l) {
    const std::size_t c = l == 0 ? cin : spec.filters;
    CompositeLayer<float> layer{{random_tensor<float>({spec.filters, c, spec.kernel, spec.kernel}, seed + 10 * l, -0.4, 0.4),
                                 random_tensor<float>({1, spec.filters, 1, 1}, seed + 10 * l + 1, -0.1, 0.1)},
                                BatchNormState<float>::make(spec.filters)};
    layer.bn.gamma = random_tensor<float>({1, spec.filters, 1, 1}, seed + 10 * l + 2, 0.5, 1.5);
    layer.bn.beta = random_tensor<float>({1, spec.filters, 1, 1}, seed + 10 * l + 3, -0.2, 0.2);
    block.layers.push_back(std::move(layer));
  }
  return block;
}

Tensor<float> composite(const Tensor<float>& in, CompositeLayer<float>& l, Mode m) {
  return leaky_relu(batchnorm2d(conv2d(in, l.conv), l.bn, m), 0.2f);
}

}  // namespace

// hand-unrolled depth-3 blocks built from the primitives
TEST(ConvBlock, MatchesUnrolledGraphWhenProjecting) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto block = seeded_block(2, {3, 4, 3}, 100 * seed);
    auto copy = block;
    const auto x = random_tensor<float>({2, 2, 8, 8}, seed);
    const auto y = conv_block_forward(x, block, Mode::Train);
    auto& L = copy.layers;
    const auto x1 = composite(x, L[0], Mode::Train);
    const auto x2 = composite(x1, L[1], Mode::Train);  // x0 has 2 channels: left out
    const auto x3 = composite(add(x1, x2), L[2], Mode::Train);
    ASSERT_EQ(y.shape(), x3.shape());
    for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y.data()[i], x3.data()[i], 1e-5) << seed;
  }
}

TEST(ConvBlock, MatchesUnrolledGraphWithMatchingInput) {
  for (std::uint64_t seed : {4u, 5u}) {
    auto block = seeded_block(4, {3, 4, 5}, 100 * seed);
    auto copy = block;
    const auto x = random_tensor<float>({1, 4, 8, 8}, seed);
    const auto y = conv_block_forward(x, block, Mode::Infer);
    auto& L = copy.layers;
    const auto x1 = composite(x, L[0], Mode::Infer);
    const auto x2 = composite(add(x, x1), L[1], Mode::Infer);
    const auto x3 = composite(add(add(x, x1), x2), L[2], Mode::Infer);
    for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y.data()[i], x3.data()[i], 1e-5) << seed;
  }
}

TEST(Transition, HalvesAndKeepsConstants) {
  const auto y = transition_forward(Tensor<float>::full({1, 3, 8, 8}, 0.7f), Mode::Infer, nullptr);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 4, 4}));
  for (float v : y.data()) EXPECT_EQ(v, 0.7f);
  EXPECT_THROW(transition_forward(Tensor<float>::zeros({1, 1, 5, 4}), Mode::Infer, nullptr), ShapeError);
}

TEST(Transition, TrainModeDropoutStatistics) {
  Rng rng(17);
  const std::size_t side = 256;
  const auto y = transition_forward(Tensor<float>::full({1, 1, 2 * side, 2 * side}, 1.0f), Mode::Train, &rng);
  double mean = 0.0;
  std::size_t zeros = 0;
  for (float v : y.data()) {
    mean += v;
    zeros += v == 0.0f;
  }
  const double n = static_cast<double>(y.size());
  mean /= n;
  // survivors are 1/0.7; per-element sd = sqrt(0.3/0.7)
  EXPECT_NEAR(mean, 1.0, 3.0 * std::sqrt(0.3 / 0.7) / std::sqrt(n));
  EXPECT_NEAR(static_cast<double>(zeros) / n, 0.3, 3.0 * std::sqrt(0.21 / n));
}
