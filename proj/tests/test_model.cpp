#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "support.hpp"
#include "tinyicenet/kernels.hpp"
#include "tinyicenet/model.hpp"

using namespace tinyicenet;
using testing::random_tensor;

namespace {

std::size_t count_kind(const std::vector<LayerSpec>& layers, LayerKind kind) {
  return static_cast<std::size_t>(std::count_if(layers.begin(), layers.end(), [&](auto& l) { return l.kind == kind; }));
}

/// Randomises BN statistics so folding and inference-mode BN are exercised.
template <typename T>
void perturb_batchnorm(Model<T>& m, Rng& rng) {
  for (std::size_t i = 0; i < m.layers().size(); ++i) {
    if (m.layers()[i].kind != LayerKind::BatchNorm) continue;
    auto& p = m.params()[i];
    for (std::size_t c = 0; c < p.gamma.size(); ++c) {
      p.gamma[c] = static_cast<T>(rng.uniform(0.5, 1.5));
      p.beta[c] = static_cast<T>(rng.uniform(-0.3, 0.3));
      p.running_mean[c] = static_cast<T>(rng.uniform(-0.2, 0.2));
      p.running_var[c] = static_cast<T>(rng.uniform(0.5, 2.0));
    }
  }
}

}  // namespace

TEST_CASE("canonical layer sequence") {
  const auto layers = tinyicenet_layers(7);
  CHECK(count_kind(layers, LayerKind::Conv3x3) + count_kind(layers, LayerKind::Conv1x1) == 9);
  CHECK(count_kind(layers, LayerKind::MaxPool2x2) == 3);
  CHECK(count_kind(layers, LayerKind::Upsample) == 1);
  CHECK(count_kind(layers, LayerKind::Argmax) == 1);
  CHECK(count_kind(layers, LayerKind::BatchNorm) == 8);

  std::vector<std::size_t> widths;
  std::size_t prev = 2;
  for (const auto& l : layers) {
    CHECK(l.in_channels == prev);
    prev = l.out_channels;
    if (l.kind == LayerKind::Conv3x3) {
      CHECK_FALSE(l.has_bias);
      widths.push_back(l.out_channels);
    }
    if (l.kind == LayerKind::Conv1x1) CHECK(l.has_bias);
    if (l.kind == LayerKind::Upsample) CHECK(l.factor == 8);
  }
  CHECK(widths == std::vector<std::size_t>{16, 16, 32, 32, 64, 64, 64, 64});
  CHECK(layers.back().kind == LayerKind::Argmax);
  CHECK(layers[layers.size() - 2] == LayerSpec::conv1x1(64, 7));
}

TEST_CASE("parameter counts") {
  CHECK(count_params(build_tinyicenet(7, 0)) == 146599);
  CHECK(std::abs(146599.0 - 146600.0) / 146600.0 < 0.005);
  CHECK(count_params(build_tinyicenet(6, 0)) == 146534);
  const std::vector<LayerSpec> single{LayerSpec::conv3x3(2, 16)};
  CHECK(count_params(single) == 288);

  // Closed form: conv weights, BN gamma/beta, head bias.
  std::size_t conv = 0, bn = 0;
  const std::size_t chain[][2] = {{2, 16}, {16, 16}, {16, 32}, {32, 32}, {32, 64}, {64, 64}, {64, 64}, {64, 64}};
  for (auto& c : chain) {
    conv += c[0] * c[1] * 9;
    bn += 2 * c[1];
  }
  conv += 64 * 7;
  CHECK(conv == 145888);
  CHECK(bn == 704);
  CHECK(conv + bn + 7 == 146599);
}

TEST_CASE("conv MACs follow the per-layer closed form") {
  const auto layers = tinyicenet_layers(7);
  const MacReport r = count_macs(std::span<const LayerSpec>(layers), Shape{1, 2, 512, 512});

  // Oracle written out per conv: (spatial side, c_in, c_out, k).
  const std::uint64_t table[][4] = {{512, 2, 16, 3}, {512, 16, 16, 3}, {256, 16, 32, 3}, {256, 32, 32, 3},
                                    {128, 32, 64, 3}, {128, 64, 64, 3}, {64, 64, 64, 3},  {64, 64, 64, 3},
                                    {512, 64, 7, 1}};
  std::uint64_t expect = 0;
  for (auto& t : table) expect += t[0] * t[0] * t[1] * t[2] * t[3] * t[3];
  CHECK(r.conv_macs == expect);
  CHECK(r.conv_macs == 2910846976ULL);
  CHECK(std::abs(double(r.conv_macs) - 2.97e9) / 2.97e9 < 0.03);
  CHECK(r.elementwise_ops > 0);
  CHECK(std::abs(double(r.total()) - 2.97e9) / 2.97e9 < 0.005);

  std::uint64_t per_layer = 0;
  for (const auto& c : r.per_layer) per_layer += c.macs;
  CHECK(per_layer == r.conv_macs);

  const std::vector<LayerSpec> head{LayerSpec::conv1x1(64, 7)};
  CHECK(count_macs(std::span<const LayerSpec>(head), Shape{1, 64, 512, 512}).conv_macs == 117440512ULL);
  CHECK(count_macs(std::span<const LayerSpec>(), Shape{1, 2, 512, 512}).conv_macs == 0);
}

TEST_CASE("forward shapes") {
  const Model32 m = build_tinyicenet<float>(7, 1, 64);
  Rng rng(1);
  const Tensor32 x = random_tensor<float>({1, 2, 64, 64}, rng);
  CHECK(logits(m, x).shape() == Shape{1, 7, 64, 64});
  CHECK(predict(m, x).shape() == Shape{1, 1, 64, 64});
  std::size_t up = 0;
  while (m.layers()[up].kind != LayerKind::Upsample) ++up;
  CHECK(forward(m, x, up).shape() == Shape{1, 64, 8, 8});
  CHECK_THROWS_AS(forward(m, Tensor32({1, 2, 60, 64})), ShapeError);
  CHECK_THROWS_AS(forward(m, Tensor32({1, 3, 64, 64})), ShapeError);
}

TEST_CASE("forward at the full input size") {
  const Model32 m = build_tinyicenet<float>(7, 2);
  Rng rng(2);
  const Tensor32 x = random_tensor<float>({1, 2, 512, 512}, rng);
  std::size_t up = 0;
  while (m.layers()[up].kind != LayerKind::Upsample) ++up;
  CHECK(forward(m, x, up).shape() == Shape{1, 64, 64, 64});
  CHECK(logits(m, x).shape() == Shape{1, 7, 512, 512});
  CHECK(predict(m, x).shape() == Shape{1, 1, 512, 512});
}

TEST_CASE("zero input yields the head bias") {
  const Model32 m = build_tinyicenet<float>(7, 3, 64);
  const Tensor32 z = logits(m, Tensor32({1, 2, 64, 64}, 0.0f));
  const auto& bias = m.params()[m.logits_end() - 1].bias;
  REQUIRE(bias.size() == 7);
  for (std::size_t c = 0; c < 7; ++c)
    for (std::size_t i = 0; i < 64 * 64; ++i) REQUIRE(z.plane(0, c)[i] == bias[c]);
}

TEST_CASE("truncated forward equals manual composition") {
  Model32 m = build_tinyicenet<float>(7, 4, 64);
  Rng rng(4);
  perturb_batchnorm(m, rng);
  const Tensor32 x = random_tensor<float>({2, 2, 16, 16}, rng);
  const auto& p0 = m.params()[0];
  const auto& p1 = m.params()[1];
  const Tensor32 manual =
      relu(batchnorm_ref<float>(conv2d_ref(x, ConvKernel<float>{p0.weight, {}}, 1), p1.gamma, p1.beta,
                                p1.running_mean, p1.running_var, m.bn_eps()));
  CHECK(bit_equal(forward(m, x, 3), manual));
}

TEST_CASE("initialisation is seeded") {
  const Model32 a = build_tinyicenet<float>(7, 9, 64), b = build_tinyicenet<float>(7, 9, 64),
                c = build_tinyicenet<float>(7, 10, 64);
  CHECK(a.params()[0].weight == b.params()[0].weight);
  CHECK_FALSE(a.params()[0].weight == c.params()[0].weight);
  // Kaiming-uniform bound sqrt(6 / fan_in) for the first conv (fan_in 18).
  const double bound = std::sqrt(6.0 / 18.0);
  for (float w : a.params()[0].weight.data()) CHECK(std::abs(w) <= bound);
  const auto& bn = a.params()[1];
  CHECK(bn.gamma == std::vector<float>(16, 1.0f));
  CHECK(bn.running_var == std::vector<float>(16, 1.0f));
}

TEST_CASE("pre-upsample features shift with the input by whole pooling cells") {
  Model32 m = build_tinyicenet<float>(7, 5, 128);
  Rng rng(5);
  perturb_batchnorm(m, rng);
  const Tensor32 x = random_tensor<float>({1, 2, 128, 128}, rng);
  Tensor32 shifted = random_tensor<float>({1, 2, 128, 128}, rng);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 128; ++y)
      for (std::size_t xx = 0; xx + 8 < 128; ++xx) shifted.at(0, c, y, xx) = x.at(0, c, y, xx + 8);
  std::size_t up = 0;
  while (m.layers()[up].kind != LayerKind::Upsample) ++up;
  const Tensor32 f = forward(m, x, up), g = forward(m, shifted, up);
  // Receptive-field radius is 30 input pixels, so columns 4..10 see neither
  // the left border nor the refilled right edge.
  for (std::size_t c = 0; c < 64; ++c)
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 4; j <= 10; ++j) REQUIRE(g.at(0, c, i, j) == f.at(0, c, i, j + 1));
}

TEST_CASE("fold_batchnorm") {
  SUBCASE("identity statistics keep the weights") {
    const Model32 m = build_tinyicenet<float>(7, 6, 64);
    const Model32 f = fold_batchnorm(m);
    CHECK(f.layers().size() < m.layers().size());
    CHECK(count_kind(f.layers(), LayerKind::BatchNorm) == 0);
    const auto& w0 = m.params()[0].weight;
    const auto& f0 = f.params()[0];
    for (std::size_t i = 0; i < w0.size(); ++i)
      CHECK(f0.weight.data()[i] == doctest::Approx(w0.data()[i]).epsilon(1e-5));
    for (float b : f0.bias) CHECK(b == 0.0f);
  }
  SUBCASE("gamma 2 doubles the weights") {
    Model32 m = build_tinyicenet<float>(7, 6, 64);
    std::fill(m.params()[1].gamma.begin(), m.params()[1].gamma.end(), 2.0f);
    const Model32 f = fold_batchnorm(m);
    for (std::size_t i = 0; i < m.params()[0].weight.size(); ++i)
      CHECK(f.params()[0].weight.data()[i] == doctest::Approx(2 * m.params()[0].weight.data()[i]).epsilon(1e-5));
  }
  SUBCASE("random statistics keep logits and argmax") {
    Model32 m = build_tinyicenet<float>(7, 7, 64);
    Rng rng(7);
    perturb_batchnorm(m, rng);
    const Model32 f = fold_batchnorm(m);
    const Tensor32 x = random_tensor<float>({2, 2, 64, 64}, rng);
    const Tensor32 a = logits(m, x), b = logits(f, x);
    CHECK(testing::max_rel_error(a.data(), b.data()) < 1e-4);
    const LabelMap pa = predict(m, x), pb = predict(f, x);
    std::size_t same = 0;
    for (std::size_t i = 0; i < pa.size(); ++i) same += pa.data()[i] == pb.data()[i];
    CHECK(double(same) / double(pa.size()) >= 0.999);
  }
  SUBCASE("non-positive variance is rejected") {
    Model32 m = build_tinyicenet<float>(7, 6, 64);
    m.params()[1].running_var[0] = -1.0f;
    CHECK_THROWS(fold_batchnorm(m));
  }
}

TEST_CASE("model cast keeps topology and values") {
  const Model32 m = build_tinyicenet<float>(7, 8, 64);
  const Model64 d = m.cast<double>();
  CHECK(d.layers() == m.layers());
  CHECK(d.params()[0].weight.data()[5] == double(m.params()[0].weight.data()[5]));
  CHECK(d.num_classes() == 7);
  CHECK(d.spatial_divisor() == 8);
}
