#pragma once

// Serial reference implementations of every layer primitive. These are the
// oracles the parallel kernels (kernels.hpp) and the streaming simulator
// (dataflow.hpp) are checked against; clarity wins over speed here.

#include <cstddef>
#include <span>
#include <vector>

#include "tinyicenet/tensor.hpp"

namespace tinyicenet {

/// Weights of shape (out, in, kh, kw) and an optional per-output-channel bias
/// (empty vector = no bias).
template <typename T>
struct ConvKernel {
  Tensor<T> weights;
  std::vector<T> bias;

  std::size_t out_channels() const noexcept { return weights.shape().n; }
  std::size_t in_channels() const noexcept { return weights.shape().c; }
  std::size_t kh() const noexcept { return weights.shape().h; }
  std::size_t kw() const noexcept { return weights.shape().w; }
  bool has_bias() const noexcept { return !bias.empty(); }
};

enum class UpsampleMode { Nearest, Bilinear };

/// Direct convolution. Each output element accumulates in T over
/// (in_channel, ky, kx) in row-major order, skipping padded taps, then adds the
/// bias. Works for real and integer T (integers accumulate in int64).
template <typename T>
Tensor<T> conv2d_ref(const Tensor<T>& input, const ConvKernel<T>& kernel, std::size_t pad, std::size_t stride = 1);

/// 2x2 max pooling with stride 2. Requires even spatial dims.
template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& input);

template <typename T>
Tensor<T> upsample(const Tensor<T>& input, std::size_t factor, UpsampleMode mode = UpsampleMode::Nearest);

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, std::size_t factor) {
  return upsample(input, factor, UpsampleMode::Nearest);
}

/// out = gamma * (x - mean) / sqrt(var + eps) + beta, per channel.
template <typename T>
Tensor<T> batchnorm_ref(const Tensor<T>& input, std::span<const T> gamma, std::span<const T> beta,
                        std::span<const T> running_mean, std::span<const T> running_var, T eps);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

/// Index of the largest channel per pixel; ties go to the lowest index.
template <typename T>
LabelMap argmax_channels(const Tensor<T>& input);

}  // namespace tinyicenet
