#include "tinyicenet/dataflow.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "tinyicenet/reference_ops.hpp"

namespace tinyicenet {

std::string to_string(ConvVariant v) {
  switch (v) {
    case ConvVariant::Standard: return "standard";
    case ConvVariant::SIPO: return "sipo";
    case ConvVariant::Pointwise: return "pointwise";
  }
  return "?";
}

ConvVariant parse_conv_variant(const std::string& name) {
  if (name == "standard") return ConvVariant::Standard;
  if (name == "sipo") return ConvVariant::SIPO;
  if (name == "pointwise") return ConvVariant::Pointwise;
  throw ConfigError("unknown variant '" + name + "' (expected standard|sipo|pointwise)");
}

void DataflowConfig::validate() const {
  if (uf_in == 0 || uf_out == 0) throw ConfigError("unroll factors must be >= 1");
  if (variant != ConvVariant::SIPO && uf_out != 1) throw ConfigError("uf_out applies to the SIPO variant only");
  if (act_bits < 2 || act_bits > 32) throw ConfigError("act_bits must be in [2, 32]");
  if (act_frac_bits < 0 || act_frac_bits >= 62) throw ConfigError("act_frac_bits out of range");
  if (acc_bits < 2 || acc_bits > 63) throw ConfigError("acc_bits must be in [2, 63]");
  if (weight_bits < kMinQuantBits || weight_bits > kMaxQuantBits) throw ConfigError("weight_bits must be in [2, 32]");
}

int required_acc_bits(int act_bits, int weight_bits, std::size_t taps) {
  int log2_taps = 0;
  while ((std::size_t{1} << log2_taps) < taps) ++log2_taps;
  return act_bits + weight_bits + log2_taps;
}

FixedPointTensor quantize_activations(const Tensor32& x, ActivationFormat format) {
  if (format.bits < 2 || format.bits > 32 || format.frac_bits < 0) throw ConfigError("invalid activation format");
  FixedPointTensor out{Tensor<std::int64_t>(x.shape()), format.bits, std::ldexp(1.0, -format.frac_bits)};
  const double lo = static_cast<double>(signed_min(format.bits));
  const double hi = static_cast<double>(signed_max(format.bits));
  auto src = x.data();
  auto dst = out.q.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (!std::isfinite(src[i])) throw NumericError("non-finite activation at element " + std::to_string(i));
    dst[i] = static_cast<std::int64_t>(std::clamp(std::round(std::ldexp(static_cast<double>(src[i]), format.frac_bits)), lo, hi));
  }
  return out;
}

namespace {

void check_kernel(const FixedPointKernel& kernel, const DataflowConfig& config) {
  config.validate();
  const QuantParams& qp = kernel.weight.params;
  if (qp.mode != ScaleMode::PowerOfTwo) throw ConfigError("dataflow weights need a power-of-two scale");
  qp.validate();
  if (qp.bits != config.weight_bits)
    throw ConfigError("kernel has " + std::to_string(qp.bits) + "-bit weights, config expects " +
                      std::to_string(config.weight_bits));
  if (!kernel.bias.empty() && kernel.bias.size() != kernel.out()) throw ShapeError("bias", "one bias per output channel");
}

void check_input_format(const FixedPointTensor& input, const DataflowConfig& config, std::size_t in_channels) {
  if (input.bits != config.act_bits || input.scale != std::ldexp(1.0, -config.act_frac_bits))
    throw ConfigError("input is not in the configured activation format");
  if (input.q.shape().c != in_channels)
    throw ShapeError("channels", "input has " + std::to_string(input.q.shape().c) + " channels, kernel expects " +
                                     std::to_string(in_channels));
}

void check_accumulator(std::int64_t acc, int acc_bits) {
  if (acc > signed_max(acc_bits) || acc < signed_min(acc_bits))
    throw NumericError("accumulator overflow: " + std::to_string(acc) + " exceeds " + std::to_string(acc_bits) +
                       " bits");
}

}  // namespace

std::vector<std::int64_t> bias_to_accumulator(const FixedPointKernel& kernel, int act_frac_bits) {
  const int k = kernel.weight.params.exponent();
  std::vector<std::int64_t> out(kernel.bias.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = std::round(std::ldexp(kernel.bias[i], act_frac_bits - k));
    if (!std::isfinite(v) || std::abs(v) >= 0x1p62) throw NumericError("bias does not fit the accumulator");
    out[i] = static_cast<std::int64_t>(v);
  }
  return out;
}

std::int64_t rescale_accumulator(std::int64_t acc, int weight_exponent, const DataflowConfig& config) {
  const __int128 hi = signed_max(config.act_bits);
  const __int128 lo = signed_min(config.act_bits);
  __int128 v = acc;
  if (weight_exponent < 0) {
    const int sh = std::min(-weight_exponent, 100);
    // Round half up: floor((acc + 2^(sh-1)) / 2^sh) via arithmetic shift.
    v = (v + (static_cast<__int128>(1) << (sh - 1))) >> sh;
  } else if (acc != 0) {
    if (weight_exponent > 62) return acc > 0 ? static_cast<std::int64_t>(hi) : static_cast<std::int64_t>(lo);
    v = v * (static_cast<__int128>(1) << weight_exponent);
  }
  return static_cast<std::int64_t>(std::clamp(v, lo, hi));
}

FixedPointTensor fixed_point_conv_ref(const FixedPointTensor& input, const FixedPointKernel& kernel, std::size_t pad,
                                      const DataflowConfig& config) {
  check_kernel(kernel, config);
  check_input_format(input, config, kernel.in());
  const Shape is = input.q.shape();
  const std::size_t kh = kernel.kh(), kw = kernel.kw();
  if (is.h + 2 * pad < kh || is.w + 2 * pad < kw) throw ShapeError("height", "input smaller than the kernel");
  const std::size_t ho = is.h + 2 * pad - kh + 1, wo = is.w + 2 * pad - kw + 1;
  const int k = kernel.weight.params.exponent();
  const auto bias = bias_to_accumulator(kernel, config.act_frac_bits);
  FixedPointTensor out{Tensor<std::int64_t>({is.n, kernel.out(), ho, wo}), config.act_bits, input.scale};
  const auto& w = kernel.weight.q;
  for (std::size_t n = 0; n < is.n; ++n)
    for (std::size_t co = 0; co < kernel.out(); ++co)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          std::int64_t acc = 0;
          for (std::size_t ci = 0; ci < kernel.in(); ++ci)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
                if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(is.h) || x >= static_cast<std::ptrdiff_t>(is.w))
                  continue;
                acc += input.q.at(n, ci, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) * w.at(co, ci, ky, kx);
              }
          if (!bias.empty()) acc += bias[co];
          check_accumulator(acc, config.acc_bits);
          out.q.at(n, co, oy, ox) = rescale_accumulator(acc, k, config);
        }
  return out;
}

LineBuffer::LineBuffer(std::size_t kh, std::size_t kw, std::size_t width, std::size_t channels)
    : kh_(kh), kw_(kw), width_(width), channels_(channels),
      rows_((kh - 1) * width * channels, 0), window_(kh * kw * channels, 0) {
  if (kh == 0 || kw == 0 || channels == 0) throw ConfigError("line buffer needs a non-empty window");
  if (width < kw) throw ShapeError("width", "stream narrower than the window");
}

void LineBuffer::push(std::span<const std::int64_t> pixel) {
  if (pixel.size() != channels_) throw ShapeError("channels", "pixel vector size mismatch");
  const std::size_t x = pushed_ % width_;
  const std::size_t C = channels_;
  for (std::size_t ky = 0; ky < kh_; ++ky) {
    std::int64_t* row = window_.data() + ky * kw_ * C;
    std::copy(row + C, row + kw_ * C, row);
    std::int64_t* incoming = row + (kw_ - 1) * C;
    if (ky + 1 < kh_)
      std::copy_n(rows_.data() + (ky * width_ + x) * C, C, incoming);
    else
      std::copy(pixel.begin(), pixel.end(), incoming);
  }
  for (std::size_t r = 0; r + 1 < kh_; ++r) {
    std::int64_t* dst = rows_.data() + (r * width_ + x) * C;
    if (r + 2 < kh_)
      std::copy_n(rows_.data() + ((r + 1) * width_ + x) * C, C, dst);
    else
      std::copy(pixel.begin(), pixel.end(), dst);
  }
  ++pushed_;
}

bool LineBuffer::window_valid() const noexcept { return primed() && (pushed_ - 1) % width_ >= kw_ - 1; }

std::int64_t LineBuffer::window(std::size_t ky, std::size_t kx, std::size_t c) const {
  if (!primed())
    throw ConfigError("window read after " + std::to_string(pushed_) + " pixels; priming needs " +
                      std::to_string(prime_pixels()));
  return window_[(ky * kw_ + kx) * channels_ + c];
}

StreamResult stream_conv(const DataflowConfig& config, const FixedPointTensor& input, const FixedPointKernel& kernel) {
  check_kernel(kernel, config);
  check_input_format(input, config, kernel.in());
  const std::size_t kh = kernel.kh(), kw = kernel.kw();
  if (kh != kw || kh % 2 == 0) throw ConfigError("stream_conv supports odd square kernels");
  if (config.variant == ConvVariant::Pointwise && kh != 1) throw ConfigError("pointwise variant needs a 1x1 kernel");
  const std::size_t pad = kh / 2;
  const Shape is = input.q.shape();
  const std::size_t c_in = kernel.in(), c_out = kernel.out();
  const std::size_t uf_in = std::min(config.uf_in, c_in);
  const std::size_t uf_out = std::min(config.uf_out, c_out);
  const std::size_t hp = is.h + 2 * pad, wp = is.w + 2 * pad;
  const int k = kernel.weight.params.exponent();
  const auto bias = bias_to_accumulator(kernel, config.act_frac_bits);
  const auto& w = kernel.weight.q;

  StreamResult result;
  result.output = FixedPointTensor{Tensor<std::int64_t>({is.n, c_out, is.h, is.w}), config.act_bits, input.scale};
  std::vector<std::int64_t> pixel(c_in);
  std::vector<std::int64_t> acc(c_out);

  for (std::size_t n = 0; n < is.n; ++n) {
    LineBuffer lb(kh, kw, wp, c_in);
    bool first_window = true;
    for (std::size_t y = 0; y < hp; ++y) {
      for (std::size_t x = 0; x < wp; ++x) {
        // Read and Buffer: zero pixels are injected at the borders.
        const bool inside = y >= pad && y < is.h + pad && x >= pad && x < is.w + pad;
        for (std::size_t c = 0; c < c_in; ++c) pixel[c] = inside ? input.q.at(n, c, y - pad, x - pad) : 0;
        lb.push(pixel);
        if (!lb.window_valid()) continue;
        if (first_window) {
          result.prime_cycles += lb.pushed();
          first_window = false;
        }
        const std::size_t oy = y + 1 - kh, ox = x + 1 - kw;

        // Compute: accumulate uf_in input channels of the window per cycle.
        auto mac_chunk = [&](std::size_t co, std::size_t c0) {
          const std::size_t c1 = std::min(c0 + uf_in, c_in);
          for (std::size_t ci = c0; ci < c1; ++ci)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) acc[co] += lb.window(ky, kx, ci) * w.at(co, ci, ky, kx);
        };
        std::fill(acc.begin(), acc.end(), 0);
        switch (config.variant) {
          case ConvVariant::Standard:
            for (std::size_t co = 0; co < c_out; ++co)
              for (std::size_t c0 = 0; c0 < c_in; c0 += uf_in) {
                mac_chunk(co, c0);
                ++result.compute_cycles;
              }
            break;
          case ConvVariant::SIPO:
            for (std::size_t g = 0; g < c_out; g += uf_out)
              for (std::size_t c0 = 0; c0 < c_in; c0 += uf_in) {
                for (std::size_t co = g; co < std::min(g + uf_out, c_out); ++co) mac_chunk(co, c0);
                ++result.compute_cycles;
              }
            break;
          case ConvVariant::Pointwise:
            for (std::size_t c0 = 0; c0 < c_in; c0 += uf_in) {
              for (std::size_t co = 0; co < c_out; ++co) mac_chunk(co, c0);
              ++result.compute_cycles;
            }
            break;
        }

        // Write: bias, one rescale-and-saturate per output.
        for (std::size_t co = 0; co < c_out; ++co) {
          std::int64_t a = acc[co];
          if (!bias.empty()) a += bias[co];
          check_accumulator(a, config.acc_bits);
          result.output.q.at(n, co, oy, ox) = rescale_accumulator(a, k, config);
        }
      }
    }
  }
  return result;
}

namespace {

std::uint64_t ceil_div(std::uint64_t a, std::uint64_t b) { return (a + b - 1) / b; }

}  // namespace

std::uint64_t CycleReport::bottleneck_cycles() const {
  std::uint64_t m = 0;
  for (const auto& l : layers) m = std::max(m, l.total);
  return m;
}

double CycleReport::fps(double clock_mhz) const {
  if (!(clock_mhz > 0.0)) throw ConfigError("clock must be positive");
  const std::uint64_t b = bottleneck_cycles();
  return b == 0 ? 0.0 : clock_mhz * 1e6 / static_cast<double>(b);
}

LayerCycles cycle_estimate(const LayerSpec& layer, std::size_t h_in, std::size_t w_in, const DataflowConfig& config) {
  if (!layer.is_conv()) throw ConfigError("cycle_estimate applies to conv layers");
  config.validate();
  const std::size_t k = layer.kernel_size(), pad = layer.pad();
  if (config.variant == ConvVariant::Pointwise && k != 1) throw ConfigError("pointwise variant needs a 1x1 layer");
  const std::uint64_t c_in = layer.in_channels, c_out = layer.out_channels;
  LayerCycles r;
  r.variant = config.variant;
  r.uf_in = std::min<std::size_t>(config.uf_in, c_in);
  r.uf_out = config.variant == ConvVariant::SIPO ? std::min<std::size_t>(config.uf_out, c_out) : 1;
  const std::uint64_t h_out = h_in + 2 * pad - k + 1, w_out = w_in + 2 * pad - k + 1;
  const std::uint64_t in_passes = ceil_div(c_in, r.uf_in);
  switch (config.variant) {
    case ConvVariant::Standard: r.steady = h_out * w_out * c_out * in_passes; break;
    case ConvVariant::SIPO: r.steady = h_out * w_out * ceil_div(c_out, r.uf_out) * in_passes; break;
    case ConvVariant::Pointwise: r.steady = h_out * w_out * in_passes; break;
  }
  r.prime = (k - 1) * (w_in + 2 * pad) + k;
  r.total = r.prime + r.steady;
  return r;
}

namespace {

// Calls fn(layer_index, spec, h, w, conv_index) for each conv with its input dims.
template <typename Fn>
void walk_convs(std::span<const LayerSpec> layers, std::size_t height, std::size_t width, Fn fn) {
  std::size_t h = height, w = width, conv = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    switch (l.kind) {
      case LayerKind::Conv3x3:
      case LayerKind::Conv1x1: fn(i, l, h, w, conv++); break;
      case LayerKind::MaxPool2x2:
        h /= 2;
        w /= 2;
        break;
      case LayerKind::Upsample:
        h *= l.factor;
        w *= l.factor;
        break;
      default: break;
    }
  }
}

std::size_t conv_count(std::span<const LayerSpec> layers) {
  return static_cast<std::size_t>(std::count_if(layers.begin(), layers.end(), [](const LayerSpec& l) { return l.is_conv(); }));
}

void check_config_count(std::span<const LayerSpec> layers, std::span<const DataflowConfig> configs) {
  if (configs.size() != conv_count(layers))
    throw ConfigError("expected " + std::to_string(conv_count(layers)) + " dataflow configs, got " +
                      std::to_string(configs.size()));
}

}  // namespace

CycleReport pipeline_cycles(std::span<const LayerSpec> layers, std::size_t height, std::size_t width,
                            std::span<const DataflowConfig> configs) {
  check_config_count(layers, configs);
  CycleReport report;
  walk_convs(layers, height, width, [&](std::size_t i, const LayerSpec& l, std::size_t h, std::size_t w, std::size_t c) {
    LayerCycles lc = cycle_estimate(l, h, w, configs[c]);
    lc.layer = i;
    report.layers.push_back(lc);
  });
  return report;
}

ResourceReport resource_estimate(std::span<const LayerSpec> layers, std::size_t height, std::size_t width,
                                 std::span<const DataflowConfig> configs) {
  check_config_count(layers, configs);
  ResourceReport report;
  walk_convs(layers, height, width, [&](std::size_t i, const LayerSpec& l, std::size_t, std::size_t w, std::size_t c) {
    const DataflowConfig& cfg = configs[c];
    cfg.validate();
    const std::uint64_t k = l.kernel_size();
    const std::uint64_t uf_in = std::min<std::size_t>(cfg.uf_in, l.in_channels);
    const std::uint64_t uf_out = cfg.variant == ConvVariant::SIPO ? std::min<std::size_t>(cfg.uf_out, l.out_channels) : 1;
    LayerResources r;
    r.layer = i;
    r.mac_units = uf_in * k * k * uf_out;
    r.buffer_bits = (k - 1) * w * l.in_channels * static_cast<std::uint64_t>(cfg.act_bits);
    r.weight_bits = static_cast<std::uint64_t>(l.out_channels) * l.in_channels * k * k * cfg.weight_bits;
    if (l.has_bias) r.weight_bits += static_cast<std::uint64_t>(l.out_channels) * cfg.acc_bits;
    report.mac_units += r.mac_units;
    report.buffer_bits += r.buffer_bits;
    report.weight_bits += r.weight_bits;
    report.layers.push_back(r);
  });
  return report;
}

Schedule schedule_pipeline(std::span<const LayerSpec> layers, std::size_t height, std::size_t width,
                           std::size_t uf_budget, const DataflowConfig& base) {
  std::vector<LayerSpec> convs;
  for (const auto& l : layers)
    if (l.is_conv()) convs.push_back(l);
  if (uf_budget < convs.size())
    throw ConfigError("uf budget " + std::to_string(uf_budget) + " is below the conv layer count " +
                      std::to_string(convs.size()));
  Schedule s;
  for (const auto& l : convs) {
    DataflowConfig c = base;
    c.variant = l.kernel_size() == 1 ? ConvVariant::Pointwise : ConvVariant::Standard;
    c.uf_in = 1;
    c.uf_out = 1;
    s.configs.push_back(c);
  }
  s.budget_used = convs.size();
  for (;;) {
    s.cycles = pipeline_cycles(layers, height, width, s.configs);
    if (s.cycles.layers.empty()) break;
    std::size_t b = 0;
    for (std::size_t i = 1; i < s.cycles.layers.size(); ++i)
      if (s.cycles.layers[i].total > s.cycles.layers[b].total) b = i;
    DataflowConfig next = s.configs[b];
    const LayerSpec& l = convs[b];
    if (next.uf_in < l.in_channels) {
      next.uf_in = std::min(2 * next.uf_in, l.in_channels);
    } else if (next.variant != ConvVariant::Pointwise && next.uf_out < l.out_channels) {
      next.variant = ConvVariant::SIPO;
      next.uf_out = std::min(2 * next.uf_out, l.out_channels);
    } else {
      break;  // bottleneck fully unrolled
    }
    const std::size_t cost = next.uf_in * next.uf_out - s.configs[b].uf_in * s.configs[b].uf_out;
    if (s.budget_used + cost > uf_budget) break;
    s.budget_used += cost;
    s.configs[b] = next;
  }
  return s;
}

std::string cycle_csv(const CycleReport& report) {
  std::string out = "layer,variant,uf_in,uf_out,prime,steady,total\n";
  for (const auto& l : report.layers) {
    out += std::to_string(l.layer) + "," + to_string(l.variant) + "," + std::to_string(l.uf_in) + "," +
           std::to_string(l.uf_out) + "," + std::to_string(l.prime) + "," + std::to_string(l.steady) + "," +
           std::to_string(l.total) + "\n";
  }
  return out;
}

std::string resource_csv(const ResourceReport& report) {
  std::string out = "layer,mac_units,buffer_bits,weight_bits\n";
  for (const auto& l : report.layers) {
    out += std::to_string(l.layer) + "," + std::to_string(l.mac_units) + "," + std::to_string(l.buffer_bits) + "," +
           std::to_string(l.weight_bits) + "\n";
  }
  out += "total," + std::to_string(report.mac_units) + "," + std::to_string(report.buffer_bits) + "," +
         std::to_string(report.weight_bits) + "\n";
  return out;
}

std::vector<FixedPointKernel> fixed_point_kernels(const QuantizedModel& qm) {
  std::vector<FixedPointKernel> out;
  const auto& layers = qm.folded.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!layers[i].is_conv()) continue;
    if (i >= qm.weights.size() || !qm.weights[i]) throw ConfigError("conv layer " + std::to_string(i) + " is not quantized");
    FixedPointKernel k{*qm.weights[i], {}};
    for (float b : qm.folded.params()[i].bias) k.bias.push_back(b);
    out.push_back(std::move(k));
  }
  return out;
}

LabelMap fixed_point_predict(const QuantizedModel& qm, const Tensor32& input, std::span<const DataflowConfig> configs,
                             bool stream) {
  const Model32& m = qm.folded;
  check_input(m, input.shape());
  const auto kernels = fixed_point_kernels(qm);
  std::vector<DataflowConfig> cfgs(configs.begin(), configs.end());
  if (cfgs.empty()) {
    for (const auto& l : m.layers())
      if (l.is_conv()) cfgs.push_back({l.kernel_size() == 1 ? ConvVariant::Pointwise : ConvVariant::Standard});
  }
  check_config_count(m.layers(), cfgs);

  FixedPointTensor x = quantize_activations(input, qm.activations);
  std::size_t conv = 0;
  for (std::size_t i = 0; i < m.layers().size(); ++i) {
    const LayerSpec& l = m.layers()[i];
    switch (l.kind) {
      case LayerKind::Conv3x3:
      case LayerKind::Conv1x1: {
        DataflowConfig cfg = cfgs[conv];
        cfg.act_bits = qm.activations.bits;
        cfg.act_frac_bits = qm.activations.frac_bits;
        cfg.weight_bits = kernels[conv].weight.params.bits;
        cfg.acc_bits = std::max(cfg.acc_bits, required_acc_bits(cfg.act_bits, cfg.weight_bits,
                                                                l.in_channels * l.kernel_size() * l.kernel_size()) + 1);
        cfg.acc_bits = std::min(cfg.acc_bits, 63);
        x = stream ? stream_conv(cfg, x, kernels[conv]).output : fixed_point_conv_ref(x, kernels[conv], l.pad(), cfg);
        ++conv;
        break;
      }
      case LayerKind::BatchNorm: throw ConfigError("fixed-point inference needs a BN-folded model");
      case LayerKind::ReLU: x.q = relu(x.q); break;
      case LayerKind::MaxPool2x2: x.q = maxpool2x2(x.q); break;
      case LayerKind::Upsample:
        if (m.upsample_mode() != UpsampleMode::Nearest) throw ConfigError("fixed-point upsampling is nearest-only");
        x.q = upsample(x.q, l.factor, UpsampleMode::Nearest);
        break;
      case LayerKind::Argmax: return argmax_channels(x.q);
    }
  }
  return argmax_channels(x.q);
}

}  // namespace tinyicenet
