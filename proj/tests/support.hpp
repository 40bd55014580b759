#pragma once

// Shared test helpers: random tensors and brute-force oracles written
// independently of the library code they check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tinyicenet/model.hpp"
#include "tinyicenet/reference_ops.hpp"
#include "tinyicenet/training.hpp"
#include "tinyicenet/rng.hpp"
#include "tinyicenet/tensor.hpp"

namespace testing {

using namespace tinyicenet;

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
std::vector<T> random_vector(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return v;
}

inline LabelMap random_labels(Shape shape, std::size_t classes, Rng& rng, double ignore_prob = 0.0) {
  LabelMap t(shape);
  for (auto& v : t.data()) v = rng.coin(ignore_prob) ? 255 : static_cast<std::uint8_t>(rng.below(classes));
  return t;
}

/// Copies `x` into a zero border of width `pad`, then slides the kernel with
/// plain nested loops. Accumulates in A.
template <typename A, typename T>
Tensor<A> brute_conv(const Tensor<T>& x, const Tensor<T>& w, const std::vector<T>& bias, std::size_t pad,
                     std::size_t stride = 1) {
  const Shape s = x.shape();
  const std::size_t hp = s.h + 2 * pad, wp = s.w + 2 * pad;
  std::vector<A> padded(s.n * s.c * hp * wp, A{0});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t xx = 0; xx < s.w; ++xx)
          padded[((n * s.c + c) * hp + y + pad) * wp + xx + pad] = static_cast<A>(x.at(n, c, y, xx));

  const std::size_t co = w.shape().n, kh = w.shape().h, kw = w.shape().w;
  const std::size_t ho = (hp - kh) / stride + 1, wo = (wp - kw) / stride + 1;
  Tensor<A> out({s.n, co, ho, wo});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xx = 0; xx < wo; ++xx) {
          A acc{0};
          for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const A v = padded[((n * s.c + c) * hp + y * stride + ky) * wp + xx * stride + kx];
                acc += v * static_cast<A>(w.at(o, c, ky, kx));
              }
          if (!bias.empty()) acc += static_cast<A>(bias[o]);
          out.at(n, o, y, xx) = acc;
        }
  return out;
}

/// max |a - b| / max(max|a|, max|b|, floor): one scale for the whole tensor,
/// so near-zero entries do not dominate.
template <typename A, typename B>
double max_rel_error(const A& a, const B& b, double floor = 1e-12) {
  double diff = 0.0, scale = floor;
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    scale = std::max({scale, std::abs(static_cast<double>(a[i])), std::abs(static_cast<double>(b[i]))});
  }
  return diff / scale;
}

inline const std::vector<double>& flat(const Tensor64& t) { return t.storage(); }
inline const std::vector<double>& flat(const std::vector<double>& v) { return v; }

/// Central-difference check of every parameter gradient of `model`
/// (Real64). Returns the worst tensor-wise relative error over all parameter
/// tensors.
inline double finite_difference_error(const Model64& model, const Tensor64& input, const LabelMap& labels,
                                      double step = 1e-5) {
  const BackwardResult<double> analytic = backward(model, input, labels);
  double worst = 0.0;
  Model64 probe = model;
  auto check = [&](auto member, auto grad_member) {
    for (std::size_t i = 0; i < model.layers().size(); ++i) {
      auto& values = probe.params()[i].*member;
      const auto& g = analytic.grads[i].*grad_member;
      if (values.size() == 0) continue;
      std::vector<double> numeric(values.size());
      for (std::size_t k = 0; k < values.size(); ++k) {
        const double saved = values.data()[k];
        values.data()[k] = saved + step;
        const double up = training_loss(probe, input, labels);
        values.data()[k] = saved - step;
        const double down = training_loss(probe, input, labels);
        values.data()[k] = saved;
        numeric[k] = (up - down) / (2 * step);
      }
      worst = std::max(worst, max_rel_error(flat(g), numeric, 1e-8));
    }
  };
  check(&LayerParams<double>::weight, &LayerParams<double>::weight);
  check(&LayerParams<double>::bias, &LayerParams<double>::bias);
  check(&LayerParams<double>::gamma, &LayerParams<double>::gamma);
  check(&LayerParams<double>::beta, &LayerParams<double>::beta);
  return worst;
}

/// Small model exercising every trainable layer kind plus ReLU, pooling and
/// upsampling: conv-bn-relu, pool, conv-bn-relu, upsample, 1x1 head.
inline Model64 tiny_model(std::size_t in, std::size_t mid, std::size_t classes, std::size_t size, std::uint64_t seed,
                          UpsampleMode mode = UpsampleMode::Nearest) {
  std::vector<LayerSpec> layers{LayerSpec::conv3x3(in, mid),   LayerSpec::batchnorm(mid), LayerSpec::relu(mid),
                                LayerSpec::maxpool(mid),       LayerSpec::conv3x3(mid, mid), LayerSpec::batchnorm(mid),
                                LayerSpec::relu(mid),          LayerSpec::upsample(mid, 2), LayerSpec::conv1x1(mid, classes),
                                LayerSpec::argmax(classes)};
  Model64 m(std::move(layers), in, size, size, mode);
  initialize_params(m, seed);
  Rng rng(seed ^ 0x5eedULL);
  for (std::size_t i = 0; i < m.layers().size(); ++i) {
    auto& p = m.params()[i];
    for (auto& g : p.gamma) g = rng.uniform(0.5, 1.5);
    for (auto& b : p.beta) b = rng.uniform(-0.5, 0.5);
  }
  return m;
}

/// Weighted F1 by direct per-pixel counting of TP/FP/FN per class, without a
/// confusion matrix.
inline double f1_counting_oracle(const LabelMap& pred, const LabelMap& truth, std::size_t classes,
                                 std::uint8_t ignore = 255) {
  double weighted = 0.0, support_total = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const auto t = truth.data()[i], p = pred.data()[i];
      if (t == ignore) continue;
      if (p == c && t == c) tp += 1;
      if (p == c && t != c) fp += 1;
      if (p != c && t == c) fn += 1;
    }
    const double support = tp + fn;
    if (support == 0) continue;
    const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double recall = tp / support;
    const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    weighted += support * f1;
    support_total += support;
  }
  return support_total > 0 ? weighted / support_total : 0.0;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(std::hash<std::string>{}(tag) ^ static_cast<std::uint64_t>(reinterpret_cast<std::uintptr_t>(this)));
    path_ = std::filesystem::temp_directory_path() / ("tinyicenet_" + tag + "_" + std::to_string(rng.next() % 1000000));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
