#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tinyicenet/evaluation.hpp"
#include "tinyicenet/model.hpp"
#include "tinyicenet/scene.hpp"

namespace tinyicenet {

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t steps_per_epoch = 500;
  std::size_t batch_size = 32;
  double lr0 = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.01;
  std::uint8_t ignore_label = kIgnoreLabel;
  std::uint64_t seed = 0;
  bool desk_scale = false;
  bool augment = true;
  double bn_momentum = 0.1;
  F1Average metric = F1Average::Weighted;

  void validate() const;
  /// 8 epochs x 50 steps, batch 4.
  static TrainConfig desk(std::uint64_t seed = 0);
};

/// Masked mean cross-entropy: N valid pixels, C classes, value >= 0.
struct LossTerms {
  std::size_t valid_pixels = 0;
  std::size_t classes = 0;
  double value = 0.0;
};

template <typename T>
LossTerms cross_entropy_masked(const Tensor<T>& logits, const LabelMap& labels,
                               std::uint8_t ignore_label = kIgnoreLabel);

/// Parameter gradients use the LayerParams layout: weight/bias for convs,
/// gamma/beta for batch norm (running_mean/var hold the batch statistics).
template <typename T>
using Gradients = std::vector<LayerParams<T>>;

template <typename T>
struct BackwardResult {
  LossTerms loss;
  Gradients<T> grads;
};

/// Training-mode forward (batch-statistics BN) up to the logits, masked
/// cross-entropy, and exact reverse-mode gradients for every parameter.
template <typename T>
BackwardResult<T> backward(const Model<T>& model, const Tensor<T>& input, const LabelMap& labels,
                           std::uint8_t ignore_label = kIgnoreLabel);

/// Loss of the training-mode forward pass only (finite-difference oracle).
template <typename T>
double training_loss(const Model<T>& model, const Tensor<T>& input, const LabelMap& labels,
                     std::uint8_t ignore_label = kIgnoreLabel);

/// running = (1 - momentum) * running + momentum * batch, where `batch_stats`
/// is the BackwardResult gradient set (its BN entries carry the batch mean and
/// unbiased variance in running_mean / running_var).
template <typename T>
void update_running_stats(Model<T>& model, const Gradients<T>& batch_stats, double momentum);

template <typename T>
struct SgdState {
  Gradients<T> velocity;
};

/// Classical SGD with coupled L2: v = momentum*v + (g + wd*p); p -= lr*v.
template <typename T>
void sgd_step(Model<T>& model, const Gradients<T>& grads, SgdState<T>& state, double lr, double momentum,
              double weight_decay);

/// 0.5 * lr0 * (1 + cos(pi * step / total_steps)).
double cosine_lr(std::size_t step, std::size_t total_steps, double lr0);

struct StepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;  // global step index
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> val_f1;  // set on the last step of each epoch
};

struct TrainResult {
  Model32 best;
  Model32 last;
  double best_f1 = -1.0;
  std::size_t best_epoch = 0;
  std::vector<StepRecord> history;
};

/// Applied to a copy of the master weights before every forward pass; returns
/// a mask (1 = pass gradient through) per layer, empty for layers without
/// weights. Used for QAT.
using WeightTransform = std::function<std::vector<Tensor32>(Model32& effective)>;

struct TrainHooks {
  /// Called whenever validation F1 beats the previous best.
  std::function<void(const Model32& model, std::size_t epoch, double val_f1)> on_improve;
  std::function<void(const StepRecord&)> on_step;
  WeightTransform weight_transform;
};

/// Seed for the stream used by sample `index` of `step` in `epoch`.
std::uint64_t sample_seed(std::uint64_t seed, std::size_t epoch, std::size_t step, std::size_t index);

/// Trains a copy of `model`. Each epoch runs steps_per_epoch SGD steps over
/// augmented random batches from `train`, then scores `val`; the best
/// validation model is returned in TrainResult::best.
TrainResult train_loop(const TrainConfig& config, Model32 model, std::span<const Scene> train,
                       std::span<const Scene> val, const TrainHooks& hooks = {});

/// `epoch,step,loss,lr,val_f1` rows, one per step (val_f1 empty mid-epoch).
std::string history_csv(const std::vector<StepRecord>& history);

}  // namespace tinyicenet
