#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tinyicenet/rng.hpp"
#include "tinyicenet/tensor.hpp"

namespace tinyicenet {

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// One dual-polarised sample: HH and HV backscatter plus SOD class codes
/// (255 marks pixels excluded from loss and metrics). Grids are row-major.
struct Scene {
  std::string id;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> hh;
  std::vector<float> hv;
  std::vector<std::uint8_t> labels;

  std::size_t pixels() const noexcept { return height * width; }
  /// Throws ShapeError if the three grids disagree with height*width.
  void validate() const;
  bool operator==(const Scene&) const = default;
};

/// Stacks scenes into a (n, 2, h, w) input and (n, 1, h, w) labels.
/// All scenes must share dimensions.
Tensor32 stack_inputs(std::span<const Scene> scenes);
LabelMap stack_labels(std::span<const Scene> scenes);
Tensor32 scene_input(const Scene& scene);
LabelMap scene_labels(const Scene& scene);

struct SceneGenParams {
  std::size_t height = 512;
  std::size_t width = 512;
  std::size_t num_classes = 6;  // SOD codes 0..5
  std::size_t floe_count_min = 3;
  std::size_t floe_count_max = 8;
  std::vector<double> hh_means;  // per class, in [-1, 1]; empty = defaults
  std::vector<double> hv_means;
  double speckle_strength = 0.0;
  std::size_t border_mask_width = 0;
  double nan_probability = 0.0;

  void validate() const;
  /// Noiseless 64x64 scenes with one to three floes.
  static SceneGenParams desk(std::size_t size = 64, std::size_t num_classes = 7);
  static std::vector<double> default_hh_means(std::size_t classes);
  static std::vector<double> default_hv_means(std::size_t classes);
};

/// Nearest-site ("floe") label regions with per-region classes; channels are
/// class means under multiplicative speckle, clipped to [-1, 1]. Output is
/// raw: NaN pixels are left for preprocess() to clean.
Scene synth_scene(const SceneGenParams& params, Rng& rng, std::string id = {});

Scene flip_horizontal(const Scene& scene);
Scene flip_vertical(const Scene& scene);
/// Counter-clockwise rotation by quarter_turns * 90 degrees.
Scene rotate90(const Scene& scene, int quarter_turns);
/// Resample by `factor` (bilinear channels, nearest labels), then centre-crop
/// or reflect-pad back to the original size.
Scene rescale(const Scene& scene, double factor);

struct AugmentPlan {
  bool hflip = false;
  bool vflip = false;
  int quarter_turns = 0;
  double scale = 1.0;  // 1.0 = no rescale
};

/// Each transform independently with probability 0.5; rotations by a random
/// multiple of 90 degrees (only 180 for non-square scenes); scale in [0.8, 1.25].
AugmentPlan draw_augment_plan(const Scene& scene, Rng& rng);
Scene apply_augment(const Scene& scene, const AugmentPlan& plan);
Scene augment(const Scene& scene, Rng& rng);

}  // namespace tinyicenet
