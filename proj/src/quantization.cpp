#include "tinyicenet/quantization.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace tinyicenet {

std::string to_string(ScaleMode mode) { return mode == ScaleMode::FloatScale ? "float" : "pow2"; }

ScaleMode parse_scale_mode(const std::string& name) {
  if (name == "float") return ScaleMode::FloatScale;
  if (name == "pow2") return ScaleMode::PowerOfTwo;
  throw ConfigError("unknown scale mode '" + name + "' (expected float|pow2)");
}

namespace {

void check_bits(int bits) {
  if (bits < kMinQuantBits || bits > kMaxQuantBits)
    throw ConfigError("bits must be in [2, 32], got " + std::to_string(bits));
}

}  // namespace

int QuantParams::exponent() const {
  if (mode != ScaleMode::PowerOfTwo) throw ConfigError("float-scale parameters have no exponent");
  int e = 0;
  const double f = std::frexp(scale, &e);
  if (f != 0.5) throw ConfigError("scale is not a power of two");
  return e - 1;
}

void QuantParams::validate() const {
  check_bits(bits);
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("quantization scale must be positive and finite");
  if (mode == ScaleMode::PowerOfTwo) (void)exponent();
}

template <typename T>
Tensor<T> QuantizedTensor::dequantize() const {
  Tensor<T> out(q.shape());
  auto src = q.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i)
    dst[i] = static_cast<T>(static_cast<double>(src[i]) * params.scale);
  return out;
}

template Tensor<float> QuantizedTensor::dequantize<float>() const;
template Tensor<double> QuantizedTensor::dequantize<double>() const;

double choose_scale(double max_abs, int bits, ScaleMode mode) {
  check_bits(bits);
  if (!std::isfinite(max_abs) || max_abs < 0.0) throw NumericError("tensor magnitude is not finite");
  if (max_abs == 0.0) return 1.0;
  const double ratio = max_abs / static_cast<double>(signed_max(bits));
  if (mode == ScaleMode::FloatScale) return ratio;
  int e = 0;
  const double f = std::frexp(ratio, &e);  // ratio = f * 2^e, f in [0.5, 1)
  return std::ldexp(1.0, f == 0.5 ? e - 1 : e);
}

template <typename T>
QuantizedTensor quantize_with(const Tensor<T>& w, const QuantParams& qp) {
  qp.validate();
  QuantizedTensor out{Tensor<std::int64_t>(w.shape()), qp};
  const double qmax = static_cast<double>(qp.qmax());
  auto src = w.data();
  auto dst = out.q.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double v = static_cast<double>(src[i]);
    if (!std::isfinite(v)) throw NumericError("non-finite weight at element " + std::to_string(i));
    dst[i] = static_cast<std::int64_t>(std::clamp(std::round(v / qp.scale), -qmax, qmax));
  }
  return out;
}

template <typename T>
QuantizedTensor quantize_tensor(const Tensor<T>& w, int bits, ScaleMode mode) {
  check_bits(bits);
  double max_abs = 0.0;
  auto src = w.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double v = static_cast<double>(src[i]);
    if (!std::isfinite(v)) throw NumericError("non-finite weight at element " + std::to_string(i));
    max_abs = std::max(max_abs, std::abs(v));
  }
  return quantize_with(w, QuantParams{bits, choose_scale(max_abs, bits, mode), mode});
}

template <typename T>
Tensor<T> fake_quant_forward(const Tensor<T>& w, const QuantParams& qp) {
  return quantize_with(w, qp).template dequantize<T>();
}

template <typename T>
Tensor<T> ste_mask(const Tensor<T>& w, const QuantParams& qp) {
  qp.validate();
  const double qmax = static_cast<double>(qp.qmax());
  Tensor<T> mask(w.shape());
  auto src = w.data();
  auto dst = mask.data();
  for (std::size_t i = 0; i < src.size(); ++i)
    dst[i] = std::abs(static_cast<double>(src[i]) / qp.scale) <= qmax ? T{1} : T{0};
  return mask;
}

#define TINYICENET_QUANT(T)                                                      \
  template QuantizedTensor quantize_with(const Tensor<T>&, const QuantParams&); \
  template QuantizedTensor quantize_tensor(const Tensor<T>&, int, ScaleMode);   \
  template Tensor<T> fake_quant_forward(const Tensor<T>&, const QuantParams&);  \
  template Tensor<T> ste_mask(const Tensor<T>&, const QuantParams&);

TINYICENET_QUANT(float)
TINYICENET_QUANT(double)
#undef TINYICENET_QUANT

int QuantizedModel::bits() const {
  for (const auto& w : weights)
    if (w) return w->params.bits;
  throw ConfigError("quantized model has no quantized layers");
}

void refresh_dequantized(QuantizedModel& qm) {
  if (qm.weights.size() != qm.folded.layers().size())
    throw ShapeError("layers", "one quantization slot per layer expected");
  for (std::size_t i = 0; i < qm.weights.size(); ++i) {
    if (!qm.weights[i]) continue;
    Tensor32 w = qm.weights[i]->dequantize<float>();
    if (w.shape() != qm.folded.params()[i].weight.shape())
      throw ShapeError("weight", "layer " + std::to_string(i) + ": quantized weights " + w.shape().str() +
                                     " vs " + qm.folded.params()[i].weight.shape().str());
    qm.folded.params()[i].weight = std::move(w);
  }
}

QuantizedModel ptq_calibrate(const Model32& model, int bits, ScaleMode mode, ActivationFormat activations) {
  check_bits(bits);
  QuantizedModel qm{fold_batchnorm(model), {}, activations};
  qm.weights.resize(qm.folded.layers().size());
  for (std::size_t i = 0; i < qm.weights.size(); ++i) {
    if (!qm.folded.layers()[i].is_conv()) continue;
    qm.weights[i] = quantize_tensor(qm.folded.params()[i].weight, bits, mode);
  }
  refresh_dequantized(qm);
  return qm;
}

std::vector<Tensor32> fake_quantize_model(Model32& model, int bits, ScaleMode mode) {
  std::vector<Tensor32> masks(model.layers().size());
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (!model.layers()[i].is_conv()) continue;
    Tensor32& w = model.params()[i].weight;
    const QuantizedTensor qt = quantize_tensor(w, bits, mode);
    masks[i] = ste_mask(w, qt.params);
    w = qt.dequantize<float>();
  }
  return masks;
}

QatResult qat_train(const TrainConfig& config, int bits, const Model32& init, std::span<const Scene> train,
                    std::span<const Scene> val, ScaleMode mode, TrainHooks hooks) {
  check_bits(bits);
  hooks.weight_transform = [bits, mode](Model32& effective) { return fake_quantize_model(effective, bits, mode); };
  QatResult out;
  out.training = train_loop(config, init, train, val, hooks);
  out.model = ptq_calibrate(out.training.best, bits, mode);
  return out;
}

std::vector<SweepPoint> bitwidth_sweep(const Model32& model, std::span<const Scene> eval_set,
                                       std::span<const int> bits_list, ScaleMode mode, F1Average metric) {
  if (bits_list.empty()) throw ConfigError("bits list is empty");
  std::vector<int> bits(bits_list.begin(), bits_list.end());
  for (int b : bits) check_bits(b);
  std::sort(bits.begin(), bits.end());
  std::vector<SweepPoint> points(bits.size());
  for (std::size_t i = 0; i < bits.size(); ++i) {
    const QuantizedModel qm = ptq_calibrate(model, bits[i], mode);
    points[i] = {bits[i], evaluate_model(qm.dequantized(), eval_set, metric).aggregate_f1};
  }
  return points;
}

std::string sweep_csv(std::span<const SweepPoint> points) {
  std::string out = "bits,f1\n";
  char buf[64];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%d,%.6f\n", p.bits, p.f1);
    out += buf;
  }
  return out;
}

}  // namespace tinyicenet
