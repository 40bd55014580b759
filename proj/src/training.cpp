#include "tinyicenet/training.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include "tinyicenet/kernels.hpp"
#include "tinyicenet/rng.hpp"

namespace tinyicenet {

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (epochs == 0 || steps_per_epoch == 0 || batch_size == 0)
    throw ConfigError("epochs, steps_per_epoch and batch_size must be positive");
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) throw ConfigError("bn_momentum must be in [0, 1]");
}

TrainConfig TrainConfig::desk(std::uint64_t seed) {
  TrainConfig c;
  c.epochs = 8;
  c.steps_per_epoch = 50;
  c.batch_size = 4;
  c.seed = seed;
  c.desk_scale = true;
  return c;
}

template <typename T>
LossTerms cross_entropy_masked(const Tensor<T>& logits, const LabelMap& labels, std::uint8_t ignore_label) {
  const auto ce = kernels::softmax_cross_entropy(logits, labels, ignore_label, false);
  return {ce.valid, logits.shape().c, ce.loss};
}

namespace {

// Activations the backward pass needs, recorded by the training-mode forward.
template <typename T>
struct Tape {
  std::vector<Tensor<T>> saved;  // conv: input, relu: output
  std::vector<Shape> in_shapes;
  std::vector<kernels::BatchNormCache<T>> bn;
  std::vector<std::vector<std::uint8_t>> winners;
};

template <typename T>
Tensor<T> forward_train(const Model<T>& model, const Tensor<T>& input, Tape<T>& tape) {
  check_input(model, input.shape());
  const std::size_t end = model.logits_end();
  tape.saved.assign(end, {});
  tape.in_shapes.assign(end, {});
  tape.bn.assign(end, {});
  tape.winners.assign(end, {});
  Tensor<T> x = input;
  for (std::size_t i = 0; i < end; ++i) {
    const LayerSpec& l = model.layers()[i];
    const LayerParams<T>& p = model.params()[i];
    tape.in_shapes[i] = x.shape();
    switch (l.kind) {
      case LayerKind::Conv3x3:
      case LayerKind::Conv1x1: {
        Tensor<T> y = kernels::conv2d<T>(x, p.weight, p.bias, l.pad());
        tape.saved[i] = std::move(x);
        x = std::move(y);
        break;
      }
      case LayerKind::BatchNorm:
        x = kernels::batchnorm_train<T>(x, p.gamma, p.beta, model.bn_eps(), tape.bn[i]);
        break;
      case LayerKind::ReLU:
        x = kernels::relu(x);
        tape.saved[i] = x;
        break;
      case LayerKind::MaxPool2x2:
        x = kernels::maxpool2x2(x, &tape.winners[i]);
        break;
      case LayerKind::Upsample:
        x = kernels::upsample(x, l.factor, model.upsample_mode());
        break;
      case LayerKind::Argmax:
        break;
    }
  }
  return x;
}

}  // namespace

template <typename T>
BackwardResult<T> backward(const Model<T>& model, const Tensor<T>& input, const LabelMap& labels,
                           std::uint8_t ignore_label) {
  Tape<T> tape;
  const Tensor<T> out = forward_train(model, input, tape);
  auto ce = kernels::softmax_cross_entropy(out, labels, ignore_label, true);

  BackwardResult<T> result;
  result.loss = {ce.valid, out.shape().c, ce.loss};
  result.grads.resize(model.layers().size());
  Tensor<T> g = std::move(ce.grad);
  for (std::size_t i = model.logits_end(); i-- > 0;) {
    const LayerSpec& l = model.layers()[i];
    const LayerParams<T>& p = model.params()[i];
    LayerParams<T>& grad = result.grads[i];
    switch (l.kind) {
      case LayerKind::Conv3x3:
      case LayerKind::Conv1x1:
        grad.weight = Tensor<T>(p.weight.shape());
        kernels::conv2d_grad_params(g, tape.saved[i], l.pad(), grad.weight, l.has_bias ? &grad.bias : nullptr);
        if (i > 0) g = kernels::conv2d_grad_input(g, p.weight, l.pad(), tape.in_shapes[i]);
        break;
      case LayerKind::BatchNorm: {
        const auto& cache = tape.bn[i];
        g = kernels::batchnorm_backward<T>(g, cache, p.gamma, grad.gamma, grad.beta);
        grad.running_mean = cache.batch_mean;
        grad.running_var.resize(cache.batch_var.size());
        const double m = static_cast<double>(cache.count);
        const double correction = m > 1.0 ? m / (m - 1.0) : 1.0;
        for (std::size_t c = 0; c < cache.batch_var.size(); ++c)
          grad.running_var[c] = static_cast<T>(static_cast<double>(cache.batch_var[c]) * correction);
        break;
      }
      case LayerKind::ReLU:
        g = kernels::relu_backward(g, tape.saved[i]);
        break;
      case LayerKind::MaxPool2x2:
        g = kernels::maxpool2x2_backward(g, tape.winners[i], tape.in_shapes[i]);
        break;
      case LayerKind::Upsample:
        g = kernels::upsample_backward(g, l.factor, model.upsample_mode(), tape.in_shapes[i]);
        break;
      case LayerKind::Argmax:
        break;
    }
  }
  return result;
}

template <typename T>
double training_loss(const Model<T>& model, const Tensor<T>& input, const LabelMap& labels,
                     std::uint8_t ignore_label) {
  Tape<T> tape;
  const Tensor<T> out = forward_train(model, input, tape);
  return kernels::softmax_cross_entropy(out, labels, ignore_label, false).loss;
}

template <typename T>
void update_running_stats(Model<T>& model, const Gradients<T>& batch_stats, double momentum) {
  if (batch_stats.size() != model.layers().size()) throw ShapeError("layers", "batch statistics per layer expected");
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    if (model.layers()[i].kind != LayerKind::BatchNorm) continue;
    LayerParams<T>& p = model.params()[i];
    const LayerParams<T>& b = batch_stats[i];
    if (b.running_mean.size() != p.running_mean.size()) continue;  // layer not reached by backward
    for (std::size_t c = 0; c < p.running_mean.size(); ++c) {
      p.running_mean[c] = static_cast<T>((1.0 - momentum) * p.running_mean[c] + momentum * b.running_mean[c]);
      p.running_var[c] = static_cast<T>((1.0 - momentum) * p.running_var[c] + momentum * b.running_var[c]);
    }
  }
}

namespace {

template <typename T>
void sgd_update(std::span<T> param, std::span<const T> grad, std::vector<T>& velocity, double lr, double momentum,
                double weight_decay) {
  if (grad.empty()) return;
  if (grad.size() != param.size()) throw ShapeError("gradient", "gradient/parameter size mismatch");
  if (velocity.size() != param.size()) velocity.assign(param.size(), T{});
  const T m = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), step = static_cast<T>(lr);
  for (std::size_t k = 0; k < param.size(); ++k) {
    velocity[k] = m * velocity[k] + (grad[k] + wd * param[k]);
    param[k] -= step * velocity[k];
  }
}

}  // namespace

template <typename T>
void sgd_step(Model<T>& model, const Gradients<T>& grads, SgdState<T>& state, double lr, double momentum,
              double weight_decay) {
  const std::size_t layers = model.layers().size();
  if (grads.size() != layers) throw ShapeError("layers", "one gradient entry per layer expected");
  if (state.velocity.size() != layers) state.velocity.assign(layers, {});
  for (std::size_t i = 0; i < layers; ++i) {
    LayerParams<T>& p = model.params()[i];
    const LayerParams<T>& g = grads[i];
    LayerParams<T>& v = state.velocity[i];
    sgd_update<T>(p.weight.data(), g.weight.data(), v.weight.storage(), lr, momentum, weight_decay);
    sgd_update<T>(p.bias, g.bias, v.bias, lr, momentum, weight_decay);
    sgd_update<T>(p.gamma, g.gamma, v.gamma, lr, momentum, weight_decay);
    sgd_update<T>(p.beta, g.beta, v.beta, lr, momentum, weight_decay);
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps == 0) throw ConfigError("cosine schedule needs total_steps > 0");
  if (step > total_steps) throw ConfigError("step beyond the schedule");
  return 0.5 * lr0 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

std::uint64_t sample_seed(std::uint64_t seed, std::size_t epoch, std::size_t step, std::size_t index) {
  return derive_seed(seed, {0x7a11, epoch, step, index});
}

TrainResult train_loop(const TrainConfig& config, Model32 model, std::span<const Scene> train,
                       std::span<const Scene> val, const TrainHooks& hooks) {
  config.validate();
  if (train.empty()) throw ConfigError("training set is empty");
  if (val.empty()) throw ConfigError("validation set is empty");

  const std::size_t total = config.epochs * config.steps_per_epoch;
  SgdState<float> state;
  TrainResult result;
  result.history.reserve(total);

  auto effective_model = [&](std::vector<Tensor32>* masks) {
    Model32 eff = model;
    if (hooks.weight_transform) {
      auto m = hooks.weight_transform(eff);
      if (masks) *masks = std::move(m);
    }
    return eff;
  };

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t s = 0; s < config.steps_per_epoch; ++s) {
      const std::size_t global = epoch * config.steps_per_epoch + s;
      const double lr = cosine_lr(global, total, config.lr0);

      std::vector<Scene> batch(config.batch_size);
      for (std::size_t b = 0; b < config.batch_size; ++b) {
        Rng rng(sample_seed(config.seed, epoch, s, b));
        const Scene& pick = train[rng.below(train.size())];
        batch[b] = config.augment ? augment(pick, rng) : pick;
      }
      const Tensor32 input = stack_inputs(batch);
      const LabelMap labels = stack_labels(batch);

      BackwardResult<float> res;
      if (hooks.weight_transform) {
        std::vector<Tensor32> masks;
        const Model32 eff = effective_model(&masks);
        res = backward(eff, input, labels, config.ignore_label);
        for (std::size_t i = 0; i < masks.size() && i < res.grads.size(); ++i) {
          if (masks[i].empty() || res.grads[i].weight.empty()) continue;
          auto g = res.grads[i].weight.data();
          auto mk = masks[i].data();
          for (std::size_t k = 0; k < g.size(); ++k) g[k] *= mk[k];
        }
      } else {
        res = backward(model, input, labels, config.ignore_label);
      }
      if (!std::isfinite(res.loss.value)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(s) +
                           " (global step " + std::to_string(global) + ")");
      }
      update_running_stats(model, res.grads, config.bn_momentum);
      sgd_step(model, res.grads, state, lr, config.momentum, config.weight_decay);

      StepRecord rec{epoch, global, res.loss.value, lr, std::nullopt};
      if (s + 1 == config.steps_per_epoch) {
        const Model32 eff = effective_model(nullptr);
        rec.val_f1 = evaluate_model(eff, val, config.metric, config.ignore_label).aggregate_f1;
        if (*rec.val_f1 > result.best_f1) {
          result.best_f1 = *rec.val_f1;
          result.best_epoch = epoch;
          result.best = model;
          if (hooks.on_improve) hooks.on_improve(model, epoch, *rec.val_f1);
        }
      }
      if (hooks.on_step) hooks.on_step(rec);
      result.history.push_back(rec);
    }
  }
  result.last = std::move(model);
  return result;
}

std::string history_csv(const std::vector<StepRecord>& history) {
  std::string out = "epoch,step,loss,lr,val_f1\n";
  char buf[160];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,", r.epoch, r.step, r.loss, r.lr);
    out += buf;
    if (r.val_f1) {
      std::snprintf(buf, sizeof buf, "%.6f", *r.val_f1);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

#define TINYICENET_TRAINING(T)                                                                            \
  template LossTerms cross_entropy_masked(const Tensor<T>&, const LabelMap&, std::uint8_t);               \
  template BackwardResult<T> backward(const Model<T>&, const Tensor<T>&, const LabelMap&, std::uint8_t);  \
  template double training_loss(const Model<T>&, const Tensor<T>&, const LabelMap&, std::uint8_t);        \
  template void update_running_stats(Model<T>&, const Gradients<T>&, double);                             \
  template void sgd_step(Model<T>&, const Gradients<T>&, SgdState<T>&, double, double, double);

TINYICENET_TRAINING(float)
TINYICENET_TRAINING(double)
#undef TINYICENET_TRAINING

}  // namespace tinyicenet
