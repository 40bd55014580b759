#include "tinyicenet/model.hpp"

#include <cmath>

#include "tinyicenet/kernels.hpp"
#include "tinyicenet/rng.hpp"

namespace tinyicenet {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv3x3: return "conv3x3";
    case LayerKind::BatchNorm: return "bn";
    case LayerKind::ReLU: return "relu";
    case LayerKind::MaxPool2x2: return "maxpool";
    case LayerKind::Upsample: return "upsample";
    case LayerKind::Conv1x1: return "conv1x1";
    case LayerKind::Argmax: return "argmax";
  }
  return "?";
}

template <typename T>
Model<T>::Model(std::vector<LayerSpec> layers, std::size_t input_channels, std::size_t input_height,
                std::size_t input_width, UpsampleMode upsample_mode)
    : layers_(std::move(layers)),
      input_channels_(input_channels),
      input_height_(input_height),
      input_width_(input_width),
      upsample_mode_(upsample_mode) {
  std::size_t channels = input_channels_;
  params_.resize(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& l = layers_[i];
    const std::string where = "layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
    if (l.in_channels != channels) {
      throw ShapeError("channels", where + " expects " + std::to_string(l.in_channels) + " input channels, gets " +
                                       std::to_string(channels));
    }
    if (!l.is_conv() && l.kind != LayerKind::Argmax && l.out_channels != l.in_channels)
      throw ShapeError("channels", where + " cannot change the channel count");
    if (l.kind == LayerKind::Argmax && i + 1 != layers_.size()) throw ConfigError(where + " must be the last layer");
    if (l.kind == LayerKind::Upsample && l.factor == 0) throw ConfigError(where + " has factor 0");
    if (l.is_conv() && (l.in_channels == 0 || l.out_channels == 0)) throw ConfigError(where + " has no channels");

    LayerParams<T>& p = params_[i];
    if (l.is_conv()) {
      const std::size_t k = l.kernel_size();
      p.weight = Tensor<T>(Shape{l.out_channels, l.in_channels, k, k});
      if (l.has_bias) p.bias.assign(l.out_channels, T{});
    } else if (l.kind == LayerKind::BatchNorm) {
      p.gamma.assign(l.in_channels, T(1));
      p.beta.assign(l.in_channels, T(0));
      p.running_mean.assign(l.in_channels, T(0));
      p.running_var.assign(l.in_channels, T(1));
    }
    channels = l.kind == LayerKind::Argmax ? 1 : l.out_channels;
  }
}

template <typename T>
std::size_t Model<T>::num_classes() const {
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
    if (it->is_conv()) return it->out_channels;
  return input_channels_;
}

template <typename T>
std::size_t Model<T>::spatial_divisor() const {
  std::size_t d = 1;
  for (const auto& l : layers_)
    if (l.kind == LayerKind::MaxPool2x2) d *= 2;
  return d;
}

template <typename T>
std::size_t Model<T>::logits_end() const {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].kind == LayerKind::Argmax) return i;
  return layers_.size();
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  Model<U> out(layers_, input_channels_, input_height_, input_width_, upsample_mode_);
  auto conv = [](const std::vector<T>& v) { return std::vector<U>(v.begin(), v.end()); };
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const LayerParams<T>& s = params_[i];
    LayerParams<U>& d = out.params()[i];
    if (!s.weight.empty()) d.weight = s.weight.template cast<U>();
    d.bias = conv(s.bias);
    d.gamma = conv(s.gamma);
    d.beta = conv(s.beta);
    d.running_mean = conv(s.running_mean);
    d.running_var = conv(s.running_var);
  }
  return out;
}

std::vector<LayerSpec> tinyicenet_layers(std::size_t num_classes) {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  std::vector<LayerSpec> layers;
  auto dconv = [&layers](std::size_t in, std::size_t out) {
    layers.push_back(LayerSpec::conv3x3(in, out));
    layers.push_back(LayerSpec::batchnorm(out));
    layers.push_back(LayerSpec::relu(out));
    layers.push_back(LayerSpec::conv3x3(out, out));
    layers.push_back(LayerSpec::batchnorm(out));
    layers.push_back(LayerSpec::relu(out));
  };
  dconv(2, 16);
  layers.push_back(LayerSpec::maxpool(16));
  dconv(16, 32);
  layers.push_back(LayerSpec::maxpool(32));
  dconv(32, 64);
  layers.push_back(LayerSpec::maxpool(64));
  dconv(64, 64);
  layers.push_back(LayerSpec::upsample(64, 8));
  layers.push_back(LayerSpec::conv1x1(64, num_classes));
  layers.push_back(LayerSpec::argmax(num_classes));
  return layers;
}

template <typename T>
void initialize_params(Model<T>& model, std::uint64_t seed) {
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    const LayerSpec& l = model.layers()[i];
    LayerParams<T>& p = model.params()[i];
    if (!l.is_conv()) continue;
    Rng rng(derive_seed(seed, {0x1417, i}));
    const double fan_in = static_cast<double>(l.in_channels * l.kernel_size() * l.kernel_size());
    const double bound = std::sqrt(6.0 / fan_in);
    for (auto& w : p.weight.data()) w = static_cast<T>(rng.uniform(-bound, bound));
    const double bias_bound = 1.0 / std::sqrt(fan_in);
    for (auto& b : p.bias) b = static_cast<T>(rng.uniform(-bias_bound, bias_bound));
  }
}

template <typename T>
Model<T> build_tinyicenet(std::size_t num_classes, std::uint64_t seed, std::size_t input_size) {
  Model<T> model(tinyicenet_layers(num_classes), 2, input_size, input_size);
  initialize_params(model, seed);
  return model;
}

template <typename T>
void check_input(const Model<T>& model, const Shape& s) {
  if (s.c != model.input_channels()) {
    throw ShapeError("channels", "model takes " + std::to_string(model.input_channels()) + " input channels, got " +
                                     std::to_string(s.c));
  }
  const std::size_t d = model.spatial_divisor();
  if (s.h == 0 || s.h % d != 0)
    throw ShapeError("height", "height " + std::to_string(s.h) + " not a positive multiple of " + std::to_string(d));
  if (s.w == 0 || s.w % d != 0)
    throw ShapeError("width", "width " + std::to_string(s.w) + " not a positive multiple of " + std::to_string(d));
}

template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& input, std::optional<std::size_t> stop_at) {
  check_input(model, input.shape());
  const std::size_t end = stop_at.value_or(model.layers().size());
  if (end > model.layers().size()) throw ConfigError("stop_at beyond the last layer");

  Tensor<T> x = input;
  for (std::size_t i = 0; i < end; ++i) {
    const LayerSpec& l = model.layers()[i];
    const LayerParams<T>& p = model.params()[i];
    switch (l.kind) {
      case LayerKind::Conv3x3:
      case LayerKind::Conv1x1:
        x = kernels::conv2d<T>(x, p.weight, p.bias, l.pad());
        break;
      case LayerKind::BatchNorm:
        x = kernels::batchnorm<T>(x, p.gamma, p.beta, p.running_mean, p.running_var, model.bn_eps());
        break;
      case LayerKind::ReLU:
        x = kernels::relu(x);
        break;
      case LayerKind::MaxPool2x2:
        x = kernels::maxpool2x2(x);
        break;
      case LayerKind::Upsample:
        x = kernels::upsample(x, l.factor, model.upsample_mode());
        break;
      case LayerKind::Argmax: {
        const LabelMap labels = kernels::argmax_channels(x);
        x = labels.template cast<T>();
        break;
      }
    }
  }
  return x;
}

template <typename T>
LabelMap predict(const Model<T>& model, const Tensor<T>& input) {
  return kernels::argmax_channels(logits(model, input));
}

std::size_t count_params(std::span<const LayerSpec> layers) {
  std::size_t total = 0;
  for (const auto& l : layers) {
    if (l.is_conv()) {
      total += l.out_channels * l.in_channels * l.kernel_size() * l.kernel_size();
      if (l.has_bias) total += l.out_channels;
    } else if (l.kind == LayerKind::BatchNorm) {
      total += 2 * l.in_channels;
    }
  }
  return total;
}

MacReport count_macs(std::span<const LayerSpec> layers, const Shape& input_shape) {
  MacReport report;
  std::uint64_t n = input_shape.n == 0 ? 1 : input_shape.n;
  std::uint64_t h = input_shape.h;
  std::uint64_t w = input_shape.w;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    LayerCost cost{i, l.kind, 0, 0};
    const std::uint64_t elems = n * l.in_channels * h * w;
    switch (l.kind) {
      case LayerKind::Conv3x3:
      case LayerKind::Conv1x1: {
        const std::uint64_t k = l.kernel_size();
        // stride 1 and "same" padding: output extent equals input extent
        cost.macs = n * h * w * l.out_channels * l.in_channels * k * k;
        break;
      }
      case LayerKind::BatchNorm:
      case LayerKind::ReLU:
      case LayerKind::Argmax:
        cost.elementwise = elems;
        break;
      case LayerKind::MaxPool2x2:
        cost.elementwise = elems;
        h /= 2;
        w /= 2;
        break;
      case LayerKind::Upsample:
        h *= l.factor;
        w *= l.factor;
        cost.elementwise = n * l.in_channels * h * w;
        break;
    }
    report.conv_macs += cost.macs;
    report.elementwise_ops += cost.elementwise;
    report.per_layer.push_back(cost);
  }
  return report;
}

template <typename T>
Model<T> fold_batchnorm(const Model<T>& model) {
  std::vector<LayerSpec> layers;
  std::vector<LayerParams<T>> params;
  const auto& src_layers = model.layers();
  for (std::size_t i = 0; i < src_layers.size(); ++i) {
    const LayerSpec& l = src_layers[i];
    const LayerParams<T>& p = model.params()[i];
    const bool foldable = l.is_conv() && i + 1 < src_layers.size() && src_layers[i + 1].kind == LayerKind::BatchNorm;
    if (!foldable) {
      layers.push_back(l);
      params.push_back(p);
      continue;
    }
    const LayerParams<T>& bn = model.params()[i + 1];
    LayerSpec folded = l;
    folded.has_bias = true;
    LayerParams<T> fp;
    fp.weight = p.weight;
    fp.bias.assign(l.out_channels, T{});
    const std::size_t per_out = l.in_channels * l.kernel_size() * l.kernel_size();
    for (std::size_t co = 0; co < l.out_channels; ++co) {
      const double denom = static_cast<double>(bn.running_var[co]) + kBatchNormEps;
      if (!(denom > 0.0) || !std::isfinite(denom))
        throw ConfigError("cannot fold layer " + std::to_string(i + 1) + ": running_var + eps must be positive");
      const double stddev = std::sqrt(denom);
      const double g = static_cast<double>(bn.gamma[co]);
      T* w = fp.weight.data().data() + co * per_out;
      for (std::size_t k = 0; k < per_out; ++k) w[k] = static_cast<T>(static_cast<double>(w[k]) * g / stddev);
      const double b = p.bias.empty() ? 0.0 : static_cast<double>(p.bias[co]);
      fp.bias[co] = static_cast<T>(static_cast<double>(bn.beta[co]) +
                                   g * (b - static_cast<double>(bn.running_mean[co])) / stddev);
    }
    layers.push_back(folded);
    params.push_back(std::move(fp));
    ++i;  // skip the batch norm
  }
  Model<T> out(std::move(layers), model.input_channels(), model.input_height(), model.input_width(),
               model.upsample_mode());
  out.params() = std::move(params);
  return out;
}

template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;

#define TINYICENET_MODEL(T)                                                                    \
  template void initialize_params(Model<T>&, std::uint64_t);                                   \
  template Model<T> build_tinyicenet<T>(std::size_t, std::uint64_t, std::size_t);              \
  template void check_input(const Model<T>&, const Shape&);                                    \
  template Tensor<T> forward(const Model<T>&, const Tensor<T>&, std::optional<std::size_t>);   \
  template LabelMap predict(const Model<T>&, const Tensor<T>&);                                \
  template Model<T> fold_batchnorm(const Model<T>&);

TINYICENET_MODEL(float)
TINYICENET_MODEL(double)
#undef TINYICENET_MODEL

}  // namespace tinyicenet
