#pragma once

// OpenMP-parallel layer kernels used by the model forward pass and training.
//
// Forward kernels reproduce the per-element accumulation order of the serial
// reference ops in reference_ops.hpp, so for the same inputs they return
// bit-identical results (tests/test_kernels.cpp checks this). Only the loop
// nest differs: rows are swept with vectorisable inner loops and (n, channel)
// planes are distributed across threads.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tinyicenet/reference_ops.hpp"
#include "tinyicenet/tensor.hpp"

namespace tinyicenet::kernels {

/// Stride-1 convolution, bit-identical to conv2d_ref(input, {weights, bias}, pad, 1).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, std::span<const T> bias, std::size_t pad);

/// Gradient of a stride-1 convolution w.r.t. its input.
template <typename T>
Tensor<T> conv2d_grad_input(const Tensor<T>& grad_out, const Tensor<T>& weights, std::size_t pad,
                            const Shape& input_shape);

/// Gradient w.r.t. weights (same shape as the weights) and, when `grad_bias`
/// is non-null, the per-channel bias gradient.
template <typename T>
void conv2d_grad_params(const Tensor<T>& grad_out, const Tensor<T>& input, std::size_t pad, Tensor<T>& grad_weights,
                        std::vector<T>* grad_bias);

/// Inference-mode batch norm, bit-identical to batchnorm_ref.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, std::span<const T> gamma, std::span<const T> beta,
                    std::span<const T> mean, std::span<const T> var, T eps);

/// Training-mode batch norm: normalises with the batch statistics.
template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
  std::vector<T> batch_mean;
  std::vector<T> batch_var;  // biased (divides by element count)
  std::size_t count = 0;     // elements per channel
};

template <typename T>
Tensor<T> batchnorm_train(const Tensor<T>& input, std::span<const T> gamma, std::span<const T> beta, T eps,
                          BatchNormCache<T>& cache);

/// Returns dL/dx; writes dL/dgamma and dL/dbeta.
template <typename T>
Tensor<T> batchnorm_backward(const Tensor<T>& grad_out, const BatchNormCache<T>& cache, std::span<const T> gamma,
                             std::vector<T>& grad_gamma, std::vector<T>& grad_beta);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

/// dL/dx given dL/dy and the ReLU output y.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& output);

/// Max pooling that also records which of the four window slots won
/// (0..3 in raster order; ties keep the first maximum).
template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& input, std::vector<std::uint8_t>* winners = nullptr);

template <typename T>
Tensor<T> maxpool2x2_backward(const Tensor<T>& grad_out, const std::vector<std::uint8_t>& winners,
                              const Shape& input_shape);

template <typename T>
Tensor<T> upsample(const Tensor<T>& input, std::size_t factor, UpsampleMode mode);

template <typename T>
Tensor<T> upsample_backward(const Tensor<T>& grad_out, std::size_t factor, UpsampleMode mode,
                            const Shape& input_shape);

template <typename T>
LabelMap argmax_channels(const Tensor<T>& input);

/// Mean softmax cross-entropy over pixels whose label != ignore_label.
template <typename T>
struct CrossEntropyResult {
  double loss = 0.0;
  std::size_t valid = 0;
  Tensor<T> grad;  // dL/dlogits, zero at ignored pixels
};

template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits, const LabelMap& labels,
                                            std::uint8_t ignore_label, bool want_grad);

/// Number of OpenMP threads the kernels will use.
int thread_count();

}  // namespace tinyicenet::kernels
