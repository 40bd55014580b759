#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "support.hpp"
#include "tinyicenet/evaluation.hpp"
#include "tinyicenet/io.hpp"

using namespace tinyicenet;
using testing::random_labels;

namespace {

LabelMap row(std::vector<std::uint8_t> v) {
  const std::size_t n = v.size();
  return LabelMap({1, 1, 1, n}, std::move(v));
}

}  // namespace

TEST_CASE("confusion matrix examples") {
  const ConfusionMatrix cm = confusion(row({0, 0, 1, 1}), row({0, 1, 1, 1}), 2);
  CHECK(cm.at(0, 0) == 1);
  CHECK(cm.at(1, 0) == 1);
  CHECK(cm.at(1, 1) == 2);
  CHECK(cm.at(0, 1) == 0);
  CHECK(cm.valid_pixels() == 4);
  CHECK(cm.true_positives(1) == 2);
  CHECK(cm.false_positives(0) == 1);
  CHECK(cm.false_negatives(1) == 1);
  CHECK(cm.support(1) == 3);

  const ConfusionMatrix d = confusion(row({0, 2, 1, 2}), row({0, 2, 1, 2}), 3);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t p = 0; p < 3; ++p) CHECK((d.at(t, p) > 0) == (t == p));

  const ConfusionMatrix z = confusion(row({0, 1, 2}), row({255, 255, 255}), 3);
  CHECK(z.valid_pixels() == 0);
  CHECK(z == ConfusionMatrix(3));

  CHECK_THROWS_AS(confusion(row({0, 3}), row({0, 1}), 3), ConfigError);
  CHECK_THROWS_AS(confusion(row({0, 1}), row({0, 7}), 3), ConfigError);
  CHECK_THROWS_AS(confusion(row({0, 1, 1}), row({0, 1}), 3), ShapeError);
}

TEST_CASE("weighted F1 examples") {
  CHECK(f1_weighted(confusion(row({0, 0, 1, 1}), row({0, 1, 1, 1}), 2)).value ==
        doctest::Approx((1.0 * 2.0 / 3.0 + 3.0 * 0.8) / 4.0).epsilon(1e-15));
  CHECK(f1_weighted(confusion(row({0, 0, 1, 1}), row({0, 1, 1, 1}), 2)).value == doctest::Approx(0.76667).epsilon(1e-5));
  CHECK(class_f1(confusion(row({0, 0, 1, 1}), row({0, 1, 1, 1}), 2), 0) == doctest::Approx(2.0 / 3.0));
  CHECK(f1_weighted(confusion(row({2, 0, 1}), row({2, 0, 1}), 3)).value == 1.0);
  CHECK(f1_weighted(confusion(row({1, 2, 0}), row({0, 1, 2}), 3)).value == 0.0);

  const F1Score none = f1_weighted(confusion(row({1}), row({255}), 3));
  CHECK(none.value == 0.0);
  CHECK(none.no_valid_pixels);
}

TEST_CASE("averaging modes") {
  const ConfusionMatrix cm = confusion(row({0, 0, 1, 1, 2}), row({0, 1, 1, 1, 0}), 3);
  // Per-class F1: class 0 = 0.5, class 1 = 0.8, class 2 = 0 (predicted only).
  CHECK(f1_score(cm, F1Average::Macro).value == doctest::Approx((0.5 + 0.8 + 0.0) / 3));
  CHECK(f1_score(cm, F1Average::Micro).value == doctest::Approx(3.0 / 5));
  CHECK(f1_score(cm, F1Average::Weighted).value == doctest::Approx((2 * 0.5 + 3 * 0.8) / 5));
  CHECK(parse_f1_average("macro") == F1Average::Macro);
  CHECK(to_string(F1Average::Weighted) == "weighted");
  CHECK_THROWS_AS(parse_f1_average("harmonic"), ConfigError);
}

TEST_CASE("weighted F1 agrees with the counting oracle") {
  Rng rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t classes = 2 + rng.below(6);
    const LabelMap truth = random_labels({1, 1, 16, 16}, classes, rng, rng.uniform(0, 0.5));
    const LabelMap pred = random_labels({1, 1, 16, 16}, classes, rng);
    const double a = f1_weighted(confusion(pred, truth, classes)).value;
    CHECK(std::abs(a - testing::f1_counting_oracle(pred, truth, classes)) <= 1e-12);
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }
}

TEST_CASE("F1 invariances") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t classes = 7;
    LabelMap truth = random_labels({1, 1, 12, 12}, classes, rng, 0.1);
    const LabelMap pred = random_labels({1, 1, 12, 12}, classes, rng);
    const ConfusionMatrix cm = confusion(pred, truth, classes);

    std::vector<std::uint8_t> perm(classes);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = classes - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    LabelMap pt = truth, pp = pred;
    for (auto& v : pt.data())
      if (v != 255) v = perm[v];
    for (auto& v : pp.data()) v = perm[v];
    CHECK(f1_weighted(confusion(pp, pt, classes)).value == doctest::Approx(f1_weighted(cm).value).epsilon(1e-12));

    std::size_t k = rng.below(truth.size());
    while (truth.data()[k] == 255) k = rng.below(truth.size());
    const std::size_t t = truth.data()[k], p = pred.data()[k];
    truth.data()[k] = 255;
    const ConfusionMatrix masked = confusion(pred, truth, classes);
    CHECK(masked.valid_pixels() + 1 == cm.valid_pixels());
    CHECK(masked.at(t, p) + 1 == cm.at(t, p));
  }
}

TEST_CASE("F1 is one exactly for a diagonal matrix") {
  ConfusionMatrix cm(3);
  cm.add(0, 0, 5);
  cm.add(2, 2, 1);
  CHECK(f1_weighted(cm).value == 1.0);
  cm.add(2, 1);
  CHECK(f1_weighted(cm).value < 1.0);
}

TEST_CASE("per-scene and pooled scores") {
  Scene s{"a", 2, 2, std::vector<float>(4, 0.0f), std::vector<float>(4, 0.0f), {0, 1, 1, 255}};
  const LabelMap perfect({1, 1, 2, 2}, std::vector<std::uint8_t>{0, 1, 1, 0});
  const std::vector<Scene> one{s};
  const EvaluationReport r = evaluate_predictions(std::vector<LabelMap>{perfect}, one, 7);
  CHECK(r.scenes[0].f1 == 1.0);
  CHECK(r.scenes[0].valid_pixels == 3);
  CHECK(r.aggregate_f1 == 1.0);

  Scene s2 = s;
  s2.id = "b";
  const LabelMap half({1, 1, 2, 2}, std::vector<std::uint8_t>{1, 1, 1, 0});
  const std::vector<Scene> twins{s, s2};
  const EvaluationReport e = evaluate_predictions(std::vector<LabelMap>{half, half}, twins, 7);
  CHECK(e.aggregate_f1 == doctest::Approx(e.scenes[0].f1).epsilon(1e-15));

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Scene> scenes;
    std::vector<LabelMap> preds;
    ConfusionMatrix pooled(5);
    for (int i = 0; i < 3; ++i) {
      const LabelMap t = random_labels({1, 1, 8, 8}, 5, rng, 0.2);
      const LabelMap p = random_labels({1, 1, 8, 8}, 5, rng);
      scenes.push_back(Scene{"s" + std::to_string(i), 8, 8, std::vector<float>(64), std::vector<float>(64), t.storage()});
      preds.push_back(p);
      pooled += confusion(p, t, 5);
    }
    const EvaluationReport rep = evaluate_predictions(preds, scenes, 5);
    CHECK(rep.pooled == pooled);
    CHECK(rep.aggregate_f1 == f1_weighted(pooled).value);
  }

  const auto rows = parse_csv(evaluation_csv(r));
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == std::vector<std::string>{"scene_id", "valid_pixels", "f1"});
  CHECK(rows[1][0] == "a");
  CHECK(rows[2][0] == "aggregate");
  CHECK(rows[2][1] == "3");
}

TEST_CASE("evaluate_model runs the model per scene") {
  const auto scenes = generate_corpus(SceneGenParams::desk(16, 7), 3, 5);
  const Model32 m = build_tinyicenet<float>(7, 5, 16);
  const EvaluationReport r = evaluate_model(m, std::span<const Scene>(scenes));
  REQUIRE(r.scenes.size() == 3);
  std::vector<LabelMap> preds;
  for (const auto& s : scenes) preds.push_back(predict(m, scene_input(s)));
  const EvaluationReport o = evaluate_predictions(preds, scenes, 7);
  CHECK(r.aggregate_f1 == o.aggregate_f1);
  CHECK(r.scenes[1].f1 == o.scenes[1].f1);
  CHECK(r.scenes[0].id == "scene_0000");
}
