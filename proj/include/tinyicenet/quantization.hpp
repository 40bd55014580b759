#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tinyicenet/evaluation.hpp"
#include "tinyicenet/model.hpp"
#include "tinyicenet/scene.hpp"
#include "tinyicenet/tensor.hpp"
#include "tinyicenet/training.hpp"

namespace tinyicenet {

enum class ScaleMode { FloatScale, PowerOfTwo };

std::string to_string(ScaleMode mode);
ScaleMode parse_scale_mode(const std::string& name);

/// Symmetric per-tensor quantization: real = q * scale, q in [-qmax, qmax]
/// with qmax = 2^(bits-1) - 1. Rounding is to nearest, ties away from zero.
struct QuantParams {
  int bits = 8;
  double scale = 1.0;
  ScaleMode mode = ScaleMode::PowerOfTwo;

  std::int64_t qmax() const { return signed_max(bits); }
  /// Power-of-two exponent k with scale == 2^k. Throws for FloatScale or a
  /// scale that is not an exact power of two.
  int exponent() const;
  void validate() const;
  bool operator==(const QuantParams&) const = default;
};

inline constexpr int kMinQuantBits = 2;
inline constexpr int kMaxQuantBits = 32;

struct QuantizedTensor {
  Tensor<std::int64_t> q;
  QuantParams params;

  template <typename T = double>
  Tensor<T> dequantize() const;
  bool operator==(const QuantizedTensor&) const = default;
};

/// Scale for a tensor whose largest magnitude is `max_abs`; 1 when max_abs is 0.
double choose_scale(double max_abs, int bits, ScaleMode mode);

/// Derives the scale from `w` and quantizes. Throws NumericError on
/// non-finite elements, ConfigError on bits outside [2, 32].
template <typename T>
QuantizedTensor quantize_tensor(const Tensor<T>& w, int bits, ScaleMode mode = ScaleMode::PowerOfTwo);

/// Quantizes with fixed parameters (values beyond the range are clamped).
template <typename T>
QuantizedTensor quantize_with(const Tensor<T>& w, const QuantParams& qp);

/// dequantize(quantize(w)) evaluated in real arithmetic.
template <typename T>
Tensor<T> fake_quant_forward(const Tensor<T>& w, const QuantParams& qp);

/// Straight-through gradient of fake_quant_forward: 1 where |w/s| <= qmax, else 0.
template <typename T>
Tensor<T> ste_mask(const Tensor<T>& w, const QuantParams& qp);

/// Fixed-point format of activations between layers in the dataflow engine.
struct ActivationFormat {
  int bits = 16;
  int frac_bits = 12;
  bool operator==(const ActivationFormat&) const = default;
};

/// BN-folded model with integer conv weights. Biases stay real-valued.
struct QuantizedModel {
  Model32 folded;  // conv weights hold the dequantized values
  std::vector<std::optional<QuantizedTensor>> weights;  // per layer; set for convs
  ActivationFormat activations;

  int bits() const;
  const Model32& dequantized() const { return folded; }
};

/// Rebuilds `folded` weights from the integer tensors.
void refresh_dequantized(QuantizedModel& qm);

/// Folds batch norm and quantizes every conv weight tensor per layer.
QuantizedModel ptq_calibrate(const Model32& model, int bits, ScaleMode mode = ScaleMode::PowerOfTwo,
                             ActivationFormat activations = {});

/// Fake-quantizes every conv weight of `model` in place with a scale derived
/// from the current weights; returns the STE masks per layer.
std::vector<Tensor32> fake_quantize_model(Model32& model, int bits, ScaleMode mode);

struct QatResult {
  QuantizedModel model;
  TrainResult training;
};

/// train_loop with weights-only fake quantization of every conv, scales
/// recomputed each step. The best checkpoint is exported via ptq_calibrate
/// at the same bitwidth.
QatResult qat_train(const TrainConfig& config, int bits, const Model32& init, std::span<const Scene> train,
                    std::span<const Scene> val, ScaleMode mode = ScaleMode::PowerOfTwo, TrainHooks hooks = {});

struct SweepPoint {
  int bits = 0;
  double f1 = 0.0;
};

/// PTQ + evaluation at each bitwidth; rows ascending by bits.
std::vector<SweepPoint> bitwidth_sweep(const Model32& model, std::span<const Scene> eval_set,
                                       std::span<const int> bits_list, ScaleMode mode = ScaleMode::PowerOfTwo,
                                       F1Average metric = F1Average::Weighted);

std::string sweep_csv(std::span<const SweepPoint> points);

}  // namespace tinyicenet
