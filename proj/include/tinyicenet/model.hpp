#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tinyicenet/reference_ops.hpp"
#include "tinyicenet/tensor.hpp"

namespace tinyicenet {

enum class LayerKind { Conv3x3, BatchNorm, ReLU, MaxPool2x2, Upsample, Conv1x1, Argmax };

std::string to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  bool has_bias = false;
  std::size_t factor = 1;  // Upsample only

  static LayerSpec conv3x3(std::size_t in, std::size_t out, bool bias = false) {
    return {LayerKind::Conv3x3, in, out, bias, 1};
  }
  static LayerSpec conv1x1(std::size_t in, std::size_t out, bool bias = true) {
    return {LayerKind::Conv1x1, in, out, bias, 1};
  }
  static LayerSpec batchnorm(std::size_t c) { return {LayerKind::BatchNorm, c, c, false, 1}; }
  static LayerSpec relu(std::size_t c) { return {LayerKind::ReLU, c, c, false, 1}; }
  static LayerSpec maxpool(std::size_t c) { return {LayerKind::MaxPool2x2, c, c, false, 1}; }
  static LayerSpec upsample(std::size_t c, std::size_t f) { return {LayerKind::Upsample, c, c, false, f}; }
  static LayerSpec argmax(std::size_t c) { return {LayerKind::Argmax, c, 1, false, 1}; }

  bool is_conv() const noexcept { return kind == LayerKind::Conv3x3 || kind == LayerKind::Conv1x1; }
  std::size_t kernel_size() const noexcept { return kind == LayerKind::Conv3x3 ? 3 : 1; }
  std::size_t pad() const noexcept { return kind == LayerKind::Conv3x3 ? 1 : 0; }
  bool operator==(const LayerSpec&) const = default;
};

/// Trainable and running-statistic tensors of one layer. Which members are
/// populated depends on the layer kind.
template <typename T>
struct LayerParams {
  Tensor<T> weight;  // conv: (out, in, k, k)
  std::vector<T> bias;
  std::vector<T> gamma, beta, running_mean, running_var;  // batch norm
};

inline constexpr double kBatchNormEps = 1e-5;

/// Ordered layer graph plus parameters. The topology is fixed at
/// construction; parameters stay mutable for training.
template <typename T>
class Model {
 public:
  Model() = default;
  Model(std::vector<LayerSpec> layers, std::size_t input_channels, std::size_t input_height = 512,
        std::size_t input_width = 512, UpsampleMode upsample_mode = UpsampleMode::Nearest);

  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  std::vector<LayerParams<T>>& params() noexcept { return params_; }
  const std::vector<LayerParams<T>>& params() const noexcept { return params_; }

  std::size_t input_channels() const noexcept { return input_channels_; }
  std::size_t input_height() const noexcept { return input_height_; }
  std::size_t input_width() const noexcept { return input_width_; }
  UpsampleMode upsample_mode() const noexcept { return upsample_mode_; }
  T bn_eps() const noexcept { return static_cast<T>(kBatchNormEps); }

  /// Output channels of the last conv layer (the logit count).
  std::size_t num_classes() const;
  /// Spatial dims must be divisible by this (2^pool count).
  std::size_t spatial_divisor() const;
  /// Index of the Argmax layer, or layers().size() when absent.
  std::size_t logits_end() const;

  template <typename U>
  Model<U> cast() const;

 private:
  std::vector<LayerSpec> layers_;
  std::vector<LayerParams<T>> params_;
  std::size_t input_channels_ = 0;
  std::size_t input_height_ = 0;
  std::size_t input_width_ = 0;
  UpsampleMode upsample_mode_ = UpsampleMode::Nearest;
};

using Model32 = Model<float>;
using Model64 = Model<double>;

/// DConv(2->16) Pool DConv(16->32) Pool DConv(32->64) Pool DConv(64->64)
/// Upsample(8) Conv1x1(64->num_classes) Argmax, Kaiming-uniform weights.
std::vector<LayerSpec> tinyicenet_layers(std::size_t num_classes = 7);

template <typename T = float>
Model<T> build_tinyicenet(std::size_t num_classes, std::uint64_t seed, std::size_t input_size = 512);

/// Kaiming-uniform (fan-in, ReLU gain) conv weights, PyTorch-style bias,
/// identity batch norm. Deterministic in `seed`.
template <typename T>
void initialize_params(Model<T>& model, std::uint64_t seed);

/// Inference-mode forward pass. With `stop_at`, only layers [0, stop_at) run
/// and that intermediate activation is returned. An Argmax layer writes class
/// indices as values of T.
template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& input, std::optional<std::size_t> stop_at = std::nullopt);

/// Forward up to (excluding) the Argmax layer.
template <typename T>
Tensor<T> logits(const Model<T>& model, const Tensor<T>& input) {
  return forward(model, input, model.logits_end());
}

template <typename T>
LabelMap predict(const Model<T>& model, const Tensor<T>& input);

/// Weights, biases, BN gamma/beta. Running statistics are not parameters.
std::size_t count_params(std::span<const LayerSpec> layers);

template <typename T>
std::size_t count_params(const Model<T>& model) {
  return count_params(std::span<const LayerSpec>(model.layers()));
}

struct LayerCost {
  std::size_t layer = 0;
  LayerKind kind = LayerKind::ReLU;
  std::uint64_t macs = 0;
  std::uint64_t elementwise = 0;
};

struct MacReport {
  std::uint64_t conv_macs = 0;
  /// One op per element touched by BN, ReLU, pooling (inputs), upsampling
  /// (outputs) and argmax (inputs).
  std::uint64_t elementwise_ops = 0;
  std::vector<LayerCost> per_layer;
  std::uint64_t total() const noexcept { return conv_macs + elementwise_ops; }
};

MacReport count_macs(std::span<const LayerSpec> layers, const Shape& input_shape);

template <typename T>
MacReport count_macs(const Model<T>& model, const Shape& input_shape) {
  return count_macs(std::span<const LayerSpec>(model.layers()), input_shape);
}

/// Folds each Conv+BatchNorm pair into a biased conv (deployment form).
template <typename T>
Model<T> fold_batchnorm(const Model<T>& model);

/// Throws ShapeError unless `input` can run through `model`.
template <typename T>
void check_input(const Model<T>& model, const Shape& input);

}  // namespace tinyicenet
