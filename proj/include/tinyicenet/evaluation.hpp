#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tinyicenet/model.hpp"
#include "tinyicenet/scene.hpp"
#include "tinyicenet/tensor.hpp"

namespace tinyicenet {

/// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : classes_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const noexcept { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * classes_ + pred]; }
  std::uint64_t valid_pixels() const noexcept { return valid_; }

  void add(std::size_t truth, std::size_t pred, std::uint64_t count = 1);
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);

  std::uint64_t true_positives(std::size_t c) const { return at(c, c); }
  std::uint64_t false_positives(std::size_t c) const;
  std::uint64_t false_negatives(std::size_t c) const;
  /// Ground-truth pixel count of class c.
  std::uint64_t support(std::size_t c) const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t valid_ = 0;
};

/// Counts every pixel whose ground truth is not `ignore_label`. Class codes
/// >= num_classes (other than the ignore code) raise ConfigError.
ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& truth, std::size_t num_classes,
                          std::uint8_t ignore_label = kIgnoreLabel);

enum class F1Average { Weighted, Macro, Micro };

F1Average parse_f1_average(const std::string& name);
std::string to_string(F1Average mode);

struct F1Score {
  double value = 0.0;
  bool no_valid_pixels = false;
};

/// Per-class F1 = 2PR/(P+R), 0 when P+R = 0.
/// Weighted: support-weighted mean over classes with support > 0.
/// Macro: plain mean over classes that occur in truth or prediction.
/// Micro: pooled TP / valid pixels.
F1Score f1_score(const ConfusionMatrix& cm, F1Average mode = F1Average::Weighted);
inline F1Score f1_weighted(const ConfusionMatrix& cm) { return f1_score(cm, F1Average::Weighted); }
double class_f1(const ConfusionMatrix& cm, std::size_t c);

struct SceneScore {
  std::string id;
  std::uint64_t valid_pixels = 0;
  double f1 = 0.0;
};

struct EvaluationReport {
  std::vector<SceneScore> scenes;
  ConfusionMatrix pooled;
  double aggregate_f1 = 0.0;
};

/// Scores precomputed predictions (one map per scene, same order).
EvaluationReport evaluate_predictions(std::span<const LabelMap> predictions, std::span<const Scene> scenes,
                                      std::size_t num_classes, F1Average mode = F1Average::Weighted,
                                      std::uint8_t ignore_label = kIgnoreLabel);

/// Runs the model on each scene and scores it; the aggregate is computed on
/// the element-wise sum of the per-scene confusion matrices.
template <typename T>
EvaluationReport evaluate_model(const Model<T>& model, std::span<const Scene> scenes,
                                F1Average mode = F1Average::Weighted, std::uint8_t ignore_label = kIgnoreLabel);

/// `scene_id,valid_pixels,f1` rows then `aggregate,<total>,<f1>`.
std::string evaluation_csv(const EvaluationReport& report);

}  // namespace tinyicenet
