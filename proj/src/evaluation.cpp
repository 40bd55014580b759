#include "tinyicenet/evaluation.hpp"

#include <cstdio>

namespace tinyicenet {

void ConfusionMatrix::add(std::size_t truth, std::size_t pred, std::uint64_t count) {
  if (truth >= classes_ || pred >= classes_) throw ConfigError("confusion index outside class range");
  counts_[truth * classes_ + pred] += count;
  valid_ += count;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw ShapeError("classes", "cannot add confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  valid_ += other.valid_;
  return *this;
}

std::uint64_t ConfusionMatrix::false_positives(std::size_t c) const {
  std::uint64_t col = 0;
  for (std::size_t t = 0; t < classes_; ++t) col += at(t, c);
  return col - at(c, c);
}

std::uint64_t ConfusionMatrix::false_negatives(std::size_t c) const { return support(c) - at(c, c); }

std::uint64_t ConfusionMatrix::support(std::size_t c) const {
  std::uint64_t row = 0;
  for (std::size_t p = 0; p < classes_; ++p) row += at(c, p);
  return row;
}

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& truth, std::size_t num_classes,
                          std::uint8_t ignore_label) {
  if (pred.shape() != truth.shape())
    throw ShapeError("labels", "prediction " + pred.shape().str() + " vs truth " + truth.shape().str());
  ConfusionMatrix cm(num_classes);
  auto p = pred.data();
  auto t = truth.data();
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] == ignore_label) continue;
    if (t[i] >= num_classes)
      throw ConfigError("ground-truth class " + std::to_string(t[i]) + " outside 0.." + std::to_string(num_classes - 1));
    if (p[i] >= num_classes)
      throw ConfigError("predicted class " + std::to_string(p[i]) + " outside 0.." + std::to_string(num_classes - 1));
    cm.add(t[i], p[i]);
  }
  return cm;
}

F1Average parse_f1_average(const std::string& name) {
  if (name == "weighted") return F1Average::Weighted;
  if (name == "macro") return F1Average::Macro;
  if (name == "micro") return F1Average::Micro;
  throw ConfigError("unknown metric '" + name + "' (expected weighted|macro|micro)");
}

std::string to_string(F1Average mode) {
  switch (mode) {
    case F1Average::Weighted: return "weighted";
    case F1Average::Macro: return "macro";
    case F1Average::Micro: return "micro";
  }
  return "?";
}

double class_f1(const ConfusionMatrix& cm, std::size_t c) {
  const double tp = static_cast<double>(cm.true_positives(c));
  const double fp = static_cast<double>(cm.false_positives(c));
  const double fn = static_cast<double>(cm.false_negatives(c));
  const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  const double r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  return p + r > 0 ? 2.0 * p * r / (p + r) : 0.0;
}

F1Score f1_score(const ConfusionMatrix& cm, F1Average mode) {
  F1Score out;
  if (cm.valid_pixels() == 0) {
    out.no_valid_pixels = true;
    return out;
  }
  switch (mode) {
    case F1Average::Weighted: {
      double num = 0.0, den = 0.0;
      for (std::size_t c = 0; c < cm.classes(); ++c) {
        const double support = static_cast<double>(cm.support(c));
        if (support == 0.0) continue;
        num += support * class_f1(cm, c);
        den += support;
      }
      out.value = num / den;
      break;
    }
    case F1Average::Macro: {
      double sum = 0.0;
      std::size_t n = 0;
      for (std::size_t c = 0; c < cm.classes(); ++c) {
        if (cm.support(c) + cm.false_positives(c) == 0) continue;
        sum += class_f1(cm, c);
        ++n;
      }
      out.value = sum / static_cast<double>(n);
      break;
    }
    case F1Average::Micro: {
      std::uint64_t tp = 0;
      for (std::size_t c = 0; c < cm.classes(); ++c) tp += cm.true_positives(c);
      out.value = static_cast<double>(tp) / static_cast<double>(cm.valid_pixels());
      break;
    }
  }
  return out;
}

EvaluationReport evaluate_predictions(std::span<const LabelMap> predictions, std::span<const Scene> scenes,
                                      std::size_t num_classes, F1Average mode, std::uint8_t ignore_label) {
  if (predictions.size() != scenes.size()) throw ShapeError("scenes", "one prediction per scene required");
  EvaluationReport report;
  report.pooled = ConfusionMatrix(num_classes);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const ConfusionMatrix cm = confusion(predictions[i], scene_labels(scenes[i]), num_classes, ignore_label);
    report.scenes.push_back({scenes[i].id, cm.valid_pixels(), f1_score(cm, mode).value});
    report.pooled += cm;
  }
  report.aggregate_f1 = f1_score(report.pooled, mode).value;
  return report;
}

template <typename T>
EvaluationReport evaluate_model(const Model<T>& model, std::span<const Scene> scenes, F1Average mode,
                                std::uint8_t ignore_label) {
  std::vector<LabelMap> predictions;
  predictions.reserve(scenes.size());
  for (const Scene& s : scenes) predictions.push_back(predict(model, scene_input(s).template cast<T>()));
  return evaluate_predictions(predictions, scenes, model.num_classes(), mode, ignore_label);
}

template EvaluationReport evaluate_model(const Model<float>&, std::span<const Scene>, F1Average, std::uint8_t);
template EvaluationReport evaluate_model(const Model<double>&, std::span<const Scene>, F1Average, std::uint8_t);

std::string evaluation_csv(const EvaluationReport& report) {
  std::string out = "scene_id,valid_pixels,f1\n";
  char buf[64];
  for (const auto& s : report.scenes) {
    std::snprintf(buf, sizeof buf, "%.6f", s.f1);
    out += s.id + "," + std::to_string(s.valid_pixels) + "," + buf + "\n";
  }
  std::snprintf(buf, sizeof buf, "%.6f", report.aggregate_f1);
  out += "aggregate," + std::to_string(report.pooled.valid_pixels()) + "," + buf + "\n";
  return out;
}

}  // namespace tinyicenet
