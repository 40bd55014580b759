#include <doctest.h>

#include <cmath>
#include <limits>

#include "support.hpp"
#include "tinyicenet/io.hpp"
#include "tinyicenet/quantization.hpp"

using namespace tinyicenet;
using testing::random_tensor;

namespace {

double max_abs(const Tensor64& w) {
  double m = 0.0;
  for (double v : w.data()) m = std::max(m, std::abs(v));
  return m;
}

double mean_reconstruction_error(const Tensor64& w, int bits, ScaleMode mode) {
  const Tensor64 d = quantize_tensor(w, bits, mode).dequantize<double>();
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += std::abs(d.data()[i] - w.data()[i]);
  return s / static_cast<double>(w.size());
}

Model32 model_with_stats(std::uint64_t seed, std::size_t size = 64) {
  Model32 m = build_tinyicenet<float>(7, seed, size);
  Rng rng(seed);
  for (std::size_t i = 0; i < m.layers().size(); ++i) {
    auto& p = m.params()[i];
    for (auto& g : p.gamma) g = static_cast<float>(rng.uniform(0.5, 1.5));
    for (auto& b : p.beta) b = static_cast<float>(rng.uniform(-0.2, 0.2));
    for (auto& v : p.running_var) v = static_cast<float>(rng.uniform(0.5, 2));
  }
  return m;
}

}  // namespace

TEST_CASE("float-scale example") {
  const Tensor64 w({1, 1, 1, 3}, std::vector<double>{-1.0, 0.5, 1.0});
  const QuantizedTensor q = quantize_tensor(w, 8, ScaleMode::FloatScale);
  CHECK(q.params.scale == doctest::Approx(1.0 / 127).epsilon(1e-15));
  CHECK(q.q.storage() == std::vector<std::int64_t>{-127, 64, 127});
  CHECK(q.params.bits == 8);
  CHECK(q.params.qmax() == 127);
}

TEST_CASE("power-of-two scale") {
  const Tensor64 w({1, 1, 1, 3}, std::vector<double>{-1.0, 0.5, 1.0});
  const QuantizedTensor q = quantize_tensor(w, 8, ScaleMode::PowerOfTwo);
  // 1/127 lies in (2^-7, 2^-6], so the scale rounds up to 2^-6.
  CHECK(q.params.scale == std::ldexp(1.0, -6));
  CHECK(q.params.exponent() == -6);
  CHECK(q.q.storage() == std::vector<std::int64_t>{-64, 32, 64});
  CHECK(choose_scale(127.0, 8, ScaleMode::PowerOfTwo) == 1.0);
  CHECK(choose_scale(127.5, 8, ScaleMode::PowerOfTwo) == 2.0);
  CHECK(choose_scale(0.0, 8, ScaleMode::PowerOfTwo) == 1.0);
  CHECK(choose_scale(0.0, 8, ScaleMode::FloatScale) == 1.0);
  CHECK_THROWS(QuantParams{8, 0.3, ScaleMode::PowerOfTwo}.exponent());
}

TEST_CASE("all-zero tensor") {
  const QuantizedTensor q = quantize_tensor(Tensor64({1, 2, 3, 3}, 0.0), 8, ScaleMode::FloatScale);
  CHECK(q.params.scale == 1.0);
  for (auto v : q.q.data()) CHECK(v == 0);
}

TEST_CASE("rejects bad input") {
  Tensor64 w({1, 1, 1, 2}, 0.5);
  CHECK_THROWS_AS(quantize_tensor(w, 1), ConfigError);
  CHECK_THROWS_AS(quantize_tensor(w, 33), ConfigError);
  w.data()[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(quantize_tensor(w, 8), NumericError);
  w.data()[1] = std::nan("");
  CHECK_THROWS_AS(quantize_tensor(w, 8), NumericError);
  CHECK(parse_scale_mode("pow2") == ScaleMode::PowerOfTwo);
  CHECK(parse_scale_mode(to_string(ScaleMode::FloatScale)) == ScaleMode::FloatScale);
  CHECK_THROWS_AS(parse_scale_mode("log"), ConfigError);
}

TEST_CASE("32-bit reconstruction error") {
  Rng rng(1);
  const Tensor64 w = random_tensor<double>({4, 4, 3, 3}, rng, -3, 3);
  for (auto mode : {ScaleMode::FloatScale, ScaleMode::PowerOfTwo}) {
    const Tensor64 d = quantize_tensor(w, 32, mode).dequantize<double>();
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(std::abs(d.data()[i] - w.data()[i]) < 1e-7 * max_abs(w));
  }
}

TEST_CASE("error bound, symmetry, idempotence") {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const Tensor64 w = random_tensor<double>({3, 2, 3, 3}, rng, -rng.uniform(0.01, 5), rng.uniform(0.01, 5));
    Tensor64 neg = w;
    for (auto& v : neg.data()) v = -v;
    for (int bits : {2, 3, 4, 8, 13, 24, 32})
      for (auto mode : {ScaleMode::FloatScale, ScaleMode::PowerOfTwo}) {
        const QuantizedTensor q = quantize_tensor(w, bits, mode);
        const Tensor64 d = q.dequantize<double>();
        const double s = q.params.scale;
        for (std::size_t i = 0; i < w.size(); ++i) {
          REQUIRE(std::abs(d.data()[i] - w.data()[i]) <= s / 2);
          REQUIRE(std::llabs(q.q.data()[i]) <= q.params.qmax());
        }
        const QuantizedTensor n = quantize_tensor(neg, bits, mode);
        CHECK(n.params.scale == s);
        for (std::size_t i = 0; i < w.size(); ++i) REQUIRE(n.q.data()[i] == -q.q.data()[i]);
        CHECK(quantize_tensor(d, bits, mode).q == q.q);
      }
  }
}

TEST_CASE("mean reconstruction error does not grow with bits") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor64 w = random_tensor<double>({8, 4, 3, 3}, rng, -1, 1);
    for (auto mode : {ScaleMode::FloatScale, ScaleMode::PowerOfTwo}) {
      double prev = std::numeric_limits<double>::infinity();
      for (int bits : {4, 6, 8, 10, 12, 16, 24, 32}) {
        const double e = mean_reconstruction_error(w, bits, mode);
        CHECK(e <= prev);
        prev = e;
      }
    }
  }
}

TEST_CASE("power-of-two dequantization is exact") {
  Rng rng(4);
  const Tensor64 w = random_tensor<double>({2, 2, 3, 3}, rng);
  const QuantizedTensor q = quantize_tensor(w, 24, ScaleMode::PowerOfTwo);
  const Tensor64 d = q.dequantize<double>();
  for (std::size_t i = 0; i < w.size(); ++i)
    CHECK(d.data()[i] == std::ldexp(static_cast<double>(q.q.data()[i]), q.params.exponent()));
  for (int k : {-60, -20, 0, 20, 60}) {
    const QuantizedTensor e{Tensor<std::int64_t>({1, 1, 1, 1}, 12345), QuantParams{16, std::ldexp(1.0, k), ScaleMode::PowerOfTwo}};
    CHECK(e.dequantize<double>().data()[0] / std::ldexp(1.0, k) == 12345.0);
  }
}

TEST_CASE("fake quantization") {
  const QuantParams qp{8, 0.125, ScaleMode::PowerOfTwo};
  const Tensor64 grid({1, 1, 1, 4}, std::vector<double>{0.0, 0.125, -1.5, 15.875});
  CHECK(fake_quant_forward(grid, qp) == grid);
  CHECK(fake_quant_forward(Tensor64({1, 1, 1, 1}, 0.125 * 0.4), qp).data()[0] == 0.0);
  CHECK(fake_quant_forward(Tensor64({1, 1, 1, 1}, 0.125 * 0.5), qp).data()[0] == 0.125);
  CHECK(fake_quant_forward(Tensor64({1, 1, 1, 1}, -0.125 * 0.5), qp).data()[0] == -0.125);
  // Values past qmax clamp and get no gradient; -15.9375 sits at -127.5 steps.
  const Tensor64 big({1, 1, 1, 3}, std::vector<double>{100.0, 15.875, -15.9375});
  const Tensor64 f = fake_quant_forward(big, qp);
  CHECK(f.data()[0] == 127 * 0.125);
  const Tensor64 m = ste_mask(big, qp);
  CHECK(m.storage() == std::vector<double>{0.0, 1.0, 0.0});
}

TEST_CASE("straight-through gradient matches finite differences of the surrounding loss") {
  // loss(w) = sum a_i * fq(w_i)^2. The STE gradient is 2 a_i fq(w_i) * mask_i;
  // the oracle differentiates the loss in the dequantized value at fq(w).
  Rng rng(5);
  const double s = 1.0 / 64;
  const QuantParams qp{8, s, ScaleMode::PowerOfTwo};
  for (int trial = 0; trial < 20; ++trial) {
    Tensor64 w({1, 1, 4, 4});
    for (auto& v : w.data()) {
      // Integer grid point plus an offset at least s/4 from a rounding boundary.
      const double k = std::floor(rng.uniform(-100, 100));
      v = (k + rng.uniform(-0.25, 0.25)) * s;
    }
    const auto a = testing::random_vector<double>(16, rng);
    const Tensor64 fq = fake_quant_forward(w, qp), mask = ste_mask(w, qp);
    auto loss = [&](const Tensor64& v) {
      double l = 0.0;
      for (std::size_t i = 0; i < 16; ++i) l += a[i] * v.data()[i] * v.data()[i];
      return l;
    };
    const double h = 1e-5;
    for (std::size_t i = 0; i < 16; ++i) {
      REQUIRE(mask.data()[i] == 1.0);
      Tensor64 up = w, down = w;
      up.data()[i] += h;
      down.data()[i] -= h;
      // The perturbation stays inside the rounding cell.
      REQUIRE(fake_quant_forward(up, qp).data()[i] == fq.data()[i]);
      REQUIRE(fake_quant_forward(down, qp).data()[i] == fq.data()[i]);
      Tensor64 vu = fq, vd = fq;
      vu.data()[i] += h;
      vd.data()[i] -= h;
      const double numeric = (loss(vu) - loss(vd)) / (2 * h);
      const double ste = 2 * a[i] * fq.data()[i] * mask.data()[i];
      CHECK(std::abs(numeric - ste) <= 1e-5 * std::max(1e-3, std::abs(ste)));
    }
  }
}

TEST_CASE("ptq_calibrate") {
  const Model32 m = model_with_stats(6);
  const QuantizedModel q8 = ptq_calibrate(m, 8);
  CHECK(q8.bits() == 8);
  CHECK(q8.activations == ActivationFormat{16, 12});
  std::size_t convs = 0;
  for (std::size_t i = 0; i < q8.folded.layers().size(); ++i) {
    const bool conv = q8.folded.layers()[i].is_conv();
    CHECK(q8.weights[i].has_value() == conv);
    if (!conv) continue;
    ++convs;
    CHECK(q8.weights[i]->params.mode == ScaleMode::PowerOfTwo);
    CHECK(q8.weights[i]->dequantize<float>() == q8.folded.params()[i].weight);
  }
  CHECK(convs == 9);
  CHECK(ptq_calibrate(m, 8).weights == q8.weights);
  CHECK_THROWS_AS(ptq_calibrate(m, 40), ConfigError);

  QuantizedModel edited = q8;
  edited.folded.params()[0].weight.data()[0] = 99.0f;
  refresh_dequantized(edited);
  CHECK(edited.folded.params()[0].weight == q8.folded.params()[0].weight);
}

TEST_CASE("ptq weight error shrinks per layer as bits grow") {
  const Model32 m = model_with_stats(7);
  const Model32 folded = fold_batchnorm(m);
  std::vector<double> prev;
  for (int bits : {4, 6, 8, 12, 16, 24, 32}) {
    const QuantizedModel q = ptq_calibrate(m, bits);
    std::vector<double> err;
    for (std::size_t i = 0; i < folded.layers().size(); ++i) {
      if (!folded.layers()[i].is_conv()) continue;
      const auto& a = folded.params()[i].weight;
      const auto& b = q.folded.params()[i].weight;
      double s = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(double(a.data()[k]) - b.data()[k]);
      err.push_back(s / a.size());
    }
    if (!prev.empty())
      for (std::size_t l = 0; l < err.size(); ++l) CHECK(err[l] <= prev[l]);
    prev = err;
  }
}

TEST_CASE("ptq logit error does not grow from 8 to 16 bits") {
  const Model32 m = model_with_stats(8);
  Rng rng(8);
  const Tensor32 x = random_tensor<float>({1, 2, 64, 64}, rng);
  const Tensor32 ref = logits(fold_batchnorm(m), x);
  double prev = std::numeric_limits<double>::infinity();
  for (int bits = 8; bits <= 16; ++bits) {
    const Tensor32 l = logits(ptq_calibrate(m, bits).dequantized(), x);
    double e = 0.0;
    for (std::size_t i = 0; i < l.size(); ++i) e += std::abs(double(l.data()[i]) - ref.data()[i]);
    e /= double(l.size());
    CHECK(e <= prev);
    prev = e;
  }
}

TEST_CASE("argmax is invariant to a positive scaling of the head") {
  const Model32 m = model_with_stats(9);
  const QuantizedModel q = ptq_calibrate(m, 8);
  Rng rng(9);
  const Tensor32 x = random_tensor<float>({1, 2, 64, 64}, rng);
  const LabelMap base = predict(q.dequantized(), x);
  for (float alpha : {0.25f, 2.0f, 8.0f}) {
    Model32 scaled = q.dequantized();
    auto& head = scaled.params()[scaled.logits_end() - 1];
    for (auto& v : head.weight.data()) v *= alpha;
    for (auto& v : head.bias) v *= alpha;
    CHECK(predict(scaled, x) == base);
  }
}

TEST_CASE("QAT at 32 bits tracks float training; runs replay") {
  const auto scenes = generate_corpus(SceneGenParams::desk(16, 7), 6, 31);
  std::span<const Scene> all(scenes);
  TrainConfig c = TrainConfig::desk(2);
  c.epochs = 2;
  c.steps_per_epoch = 4;
  c.batch_size = 2;
  const Model32 init = build_tinyicenet<float>(7, 2, 16);
  const TrainResult f = train_loop(c, init, all.first(4), all.subspan(4));
  const QatResult q = qat_train(c, 32, init, all.first(4), all.subspan(4));
  const QatResult q2 = qat_train(c, 32, init, all.first(4), all.subspan(4));
  REQUIRE(q.training.history.size() == f.history.size());
  for (std::size_t i = 0; i < f.history.size(); ++i) {
    CHECK(std::abs(q.training.history[i].loss - f.history[i].loss) <= 1e-3 * f.history[i].loss);
    CHECK(q.training.history[i].loss == q2.training.history[i].loss);
  }
  CHECK(q.model.bits() == 32);
  CHECK(q.model.weights == q2.model.weights);

  const QatResult q4 = qat_train(c, 4, init, all.first(4), all.subspan(4));
  CHECK(q4.model.bits() == 4);
  for (const auto& w : q4.model.weights)
    if (w)
      for (auto v : w->q.data()) CHECK(std::llabs(v) <= 7);
}

TEST_CASE("fake_quantize_model returns per-layer masks") {
  Model32 m = model_with_stats(10);
  const Model32 before = m;
  const auto masks = fake_quantize_model(m, 4, ScaleMode::PowerOfTwo);
  REQUIRE(masks.size() == m.layers().size());
  for (std::size_t i = 0; i < masks.size(); ++i) {
    CHECK(masks[i].empty() == !m.layers()[i].is_conv());
    if (!m.layers()[i].is_conv()) continue;
    const QuantizedTensor q = quantize_tensor(before.params()[i].weight, 4, ScaleMode::PowerOfTwo);
    CHECK(m.params()[i].weight == q.dequantize<float>());
  }
}

TEST_CASE("bitwidth sweep") {
  const auto scenes = generate_corpus(SceneGenParams::desk(16, 7), 3, 41);
  const Model32 m = build_tinyicenet<float>(7, 3, 16);
  const std::vector<int> bits{12, 4, 32, 8};
  const auto pts = bitwidth_sweep(m, scenes, bits);
  REQUIRE(pts.size() == 4);
  CHECK(pts[0].bits == 4);
  CHECK(pts[1].bits == 8);
  CHECK(pts[2].bits == 12);
  CHECK(pts[3].bits == 32);
  for (const auto& p : pts) {
    CHECK(p.f1 >= 0.0);
    CHECK(p.f1 <= 1.0);
  }
  const double fp = evaluate_model(m, std::span<const Scene>(scenes)).aggregate_f1;
  CHECK(std::abs(pts[3].f1 - fp) <= 0.005);
  CHECK_THROWS(bitwidth_sweep(m, scenes, std::vector<int>{}));

  const auto rows = parse_csv(sweep_csv(pts));
  REQUIRE(rows.size() == 5);
  CHECK(rows[0] == std::vector<std::string>{"bits", "f1"});
  CHECK(rows[1][0] == "4");
  CHECK(rows[4][0] == "32");
}
