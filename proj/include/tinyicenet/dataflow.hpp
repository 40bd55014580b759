#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tinyicenet/model.hpp"
#include "tinyicenet/quantization.hpp"
#include "tinyicenet/tensor.hpp"

namespace tinyicenet {

enum class ConvVariant { Standard, SIPO, Pointwise };

std::string to_string(ConvVariant v);
ConvVariant parse_conv_variant(const std::string& name);

struct DataflowConfig {
  ConvVariant variant = ConvVariant::Standard;
  std::size_t uf_in = 1;
  std::size_t uf_out = 1;  // SIPO only
  int act_bits = 16;
  int act_frac_bits = 12;
  int acc_bits = 32;
  int weight_bits = 8;

  void validate() const;
  ActivationFormat activation() const { return {act_bits, act_frac_bits}; }
  bool operator==(const DataflowConfig&) const = default;
};

/// Accumulator width that rules out overflow for `taps` products of an
/// act_bits activation and a weight_bits weight: act + weight + ceil(log2 taps).
int required_acc_bits(int act_bits, int weight_bits, std::size_t taps);

/// Conv weights quantized with a power-of-two scale, plus a real bias.
struct FixedPointKernel {
  QuantizedTensor weight;  // (out, in, k, k)
  std::vector<double> bias;  // empty = none

  std::size_t out() const { return weight.q.shape().n; }
  std::size_t in() const { return weight.q.shape().c; }
  std::size_t kh() const { return weight.q.shape().h; }
  std::size_t kw() const { return weight.q.shape().w; }
};

/// Real activations to the fixed-point format (round to nearest, ties away
/// from zero, saturating).
FixedPointTensor quantize_activations(const Tensor32& x, ActivationFormat format);

/// Bias in accumulator units (activation LSB times weight LSB), rounded.
std::vector<std::int64_t> bias_to_accumulator(const FixedPointKernel& kernel, int act_frac_bits);

/// Output rescale: shift `acc` from 2^(k - frac) units to 2^-frac units with
/// round-half-up, then saturate to act_bits.
std::int64_t rescale_accumulator(std::int64_t acc, int weight_exponent, const DataflowConfig& config);

/// Brute-force fixed-point convolution (stride 1, zero padding): integer MACs
/// in (ci, ky, kx) order, bias, one rescale-and-saturate per output.
FixedPointTensor fixed_point_conv_ref(const FixedPointTensor& input, const FixedPointKernel& kernel, std::size_t pad,
                                      const DataflowConfig& config);

/// (kh-1) row buffers of channel vectors feeding a kh x kw window register.
/// Pixels arrive in raster order over a stream of width `width`.
class LineBuffer {
 public:
  LineBuffer(std::size_t kh, std::size_t kw, std::size_t width, std::size_t channels);

  void push(std::span<const std::int64_t> pixel);
  /// Pixels pushed before the first complete window.
  std::size_t prime_pixels() const noexcept { return (kh_ - 1) * width_ + kw_; }
  bool primed() const noexcept { return pushed_ >= prime_pixels(); }
  /// True when the window covers a kh x kw block that does not wrap a row.
  bool window_valid() const noexcept;
  /// Throws ConfigError when read before priming.
  std::int64_t window(std::size_t ky, std::size_t kx, std::size_t c) const;
  std::size_t pushed() const noexcept { return pushed_; }

 private:
  std::size_t kh_, kw_, width_, channels_;
  std::size_t pushed_ = 0;
  std::vector<std::int64_t> rows_;    // (kh-1) x width x channels
  std::vector<std::int64_t> window_;  // kh x kw x channels
};

struct StreamResult {
  FixedPointTensor output;
  // Both summed over the batch.
  std::uint64_t prime_cycles = 0;    // pixels pushed before each first window
  std::uint64_t compute_cycles = 0;  // one per MAC-grid pass
};

/// Streams each image through a line buffer (zero padding injected into the
/// stream) and computes outputs per the configured variant.
StreamResult stream_conv(const DataflowConfig& config, const FixedPointTensor& input, const FixedPointKernel& kernel);

struct LayerCycles {
  std::size_t layer = 0;
  ConvVariant variant = ConvVariant::Standard;
  std::size_t uf_in = 1;
  std::size_t uf_out = 1;
  std::uint64_t prime = 0;
  std::uint64_t steady = 0;
  std::uint64_t total = 0;
};

struct CycleReport {
  std::vector<LayerCycles> layers;

  std::uint64_t bottleneck_cycles() const;
  /// Frames per second of the streaming pipeline at `clock_mhz`.
  double fps(double clock_mhz) const;
};

/// Cycle model of one conv layer on an h_in x w_in input. Priming is
/// measured on the zero-padded stream width.
LayerCycles cycle_estimate(const LayerSpec& layer, std::size_t h_in, std::size_t w_in, const DataflowConfig& config);

/// One config per conv layer, in layer order.
CycleReport pipeline_cycles(std::span<const LayerSpec> layers, std::size_t height, std::size_t width,
                            std::span<const DataflowConfig> configs);

struct LayerResources {
  std::size_t layer = 0;
  std::uint64_t mac_units = 0;
  std::uint64_t buffer_bits = 0;
  std::uint64_t weight_bits = 0;
};

struct ResourceReport {
  std::vector<LayerResources> layers;
  std::uint64_t mac_units = 0;
  std::uint64_t buffer_bits = 0;
  std::uint64_t weight_bits = 0;
};

ResourceReport resource_estimate(std::span<const LayerSpec> layers, std::size_t height, std::size_t width,
                                 std::span<const DataflowConfig> configs);

struct Schedule {
  std::vector<DataflowConfig> configs;
  CycleReport cycles;
  std::size_t budget_used = 0;
};

/// Greedy bottleneck-first unrolling under a budget of sum(uf_in * uf_out).
/// 3x3 layers start Standard and 1x1 layers Pointwise, all with uf_in = 1.
/// Each grant goes to the bottleneck layer: double uf_in up to c_in, then
/// (3x3 only) switch to SIPO and double uf_out up to c_out. Stops at the
/// first grant that does not fit the budget.
Schedule schedule_pipeline(std::span<const LayerSpec> layers, std::size_t height, std::size_t width,
                           std::size_t uf_budget, const DataflowConfig& base = {});

std::string cycle_csv(const CycleReport& report);
std::string resource_csv(const ResourceReport& report);

/// Conv layers of `qm` as fixed-point kernels (requires power-of-two scales).
std::vector<FixedPointKernel> fixed_point_kernels(const QuantizedModel& qm);

/// Whole-network inference in the fixed-point format: conv via stream_conv
/// (or the fixed-point reference when `stream` is false), integer ReLU,
/// max-pool and nearest upsampling, then argmax.
LabelMap fixed_point_predict(const QuantizedModel& qm, const Tensor32& input, std::span<const DataflowConfig> configs,
                             bool stream = true);

}  // namespace tinyicenet
