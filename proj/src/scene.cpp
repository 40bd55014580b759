#include "tinyicenet/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tinyicenet {

void Scene::validate() const {
  const std::size_t n = pixels();
  if (hh.size() != n) throw ShapeError("hh", "HH grid has " + std::to_string(hh.size()) + " values, expected " + std::to_string(n));
  if (hv.size() != n) throw ShapeError("hv", "HV grid has " + std::to_string(hv.size()) + " values, expected " + std::to_string(n));
  if (labels.size() != n)
    throw ShapeError("labels", "label grid has " + std::to_string(labels.size()) + " values, expected " + std::to_string(n));
}

Tensor32 stack_inputs(std::span<const Scene> scenes) {
  if (scenes.empty()) throw ShapeError("batch", "no scenes to stack");
  const std::size_t h = scenes[0].height, w = scenes[0].width;
  Tensor32 out(Shape{scenes.size(), 2, h, w});
  for (std::size_t n = 0; n < scenes.size(); ++n) {
    const Scene& s = scenes[n];
    s.validate();
    if (s.height != h || s.width != w) throw ShapeError("spatial", "scene " + s.id + " differs in size from the batch");
    std::copy(s.hh.begin(), s.hh.end(), out.plane(n, 0));
    std::copy(s.hv.begin(), s.hv.end(), out.plane(n, 1));
  }
  return out;
}

LabelMap stack_labels(std::span<const Scene> scenes) {
  if (scenes.empty()) throw ShapeError("batch", "no scenes to stack");
  const std::size_t h = scenes[0].height, w = scenes[0].width;
  LabelMap out(Shape{scenes.size(), 1, h, w});
  for (std::size_t n = 0; n < scenes.size(); ++n) {
    const Scene& s = scenes[n];
    s.validate();
    if (s.height != h || s.width != w) throw ShapeError("spatial", "scene " + s.id + " differs in size from the batch");
    std::copy(s.labels.begin(), s.labels.end(), out.plane(n, 0));
  }
  return out;
}

Tensor32 scene_input(const Scene& scene) { return stack_inputs(std::span<const Scene>(&scene, 1)); }
LabelMap scene_labels(const Scene& scene) { return stack_labels(std::span<const Scene>(&scene, 1)); }

std::vector<double> SceneGenParams::default_hh_means(std::size_t classes) {
  static const double table[] = {-0.80, -0.45, -0.10, 0.25, 0.55, 0.85, -0.65, 0.05};
  std::vector<double> out;
  for (std::size_t c = 0; c < classes; ++c) out.push_back(c < 8 ? table[c] : -0.9 + 1.8 * static_cast<double>(c) / static_cast<double>(classes));
  return out;
}

std::vector<double> SceneGenParams::default_hv_means(std::size_t classes) {
  static const double table[] = {-0.75, 0.40, -0.30, 0.70, -0.55, 0.10, 0.85, -0.90};
  std::vector<double> out;
  for (std::size_t c = 0; c < classes; ++c) out.push_back(c < 8 ? table[c] : 0.9 - 1.8 * static_cast<double>(c) / static_cast<double>(classes));
  return out;
}

SceneGenParams SceneGenParams::desk(std::size_t size, std::size_t num_classes) {
  SceneGenParams p;
  p.height = p.width = size;
  p.num_classes = num_classes;
  p.floe_count_min = 1;
  p.floe_count_max = 3;
  return p;
}

void SceneGenParams::validate() const {
  if (height == 0 || width == 0) throw ConfigError("scene dimensions must be positive");
  if (num_classes == 0 || num_classes > 255) throw ConfigError("num_classes must be in 1..255");
  if (floe_count_min == 0 || floe_count_min > floe_count_max) throw ConfigError("invalid floe count range");
  for (const auto* means : {&hh_means, &hv_means}) {
    if (!means->empty() && means->size() != num_classes) throw ConfigError("class mean table size != num_classes");
    for (double m : *means)
      if (!(m >= -1.0 && m <= 1.0)) throw ConfigError("class means must lie in [-1, 1]");
  }
  if (!(speckle_strength >= 0.0)) throw ConfigError("speckle_strength must be >= 0");
  if (!(nan_probability >= 0.0 && nan_probability <= 1.0)) throw ConfigError("nan_probability must be in [0, 1]");
}

Scene synth_scene(const SceneGenParams& params, Rng& rng, std::string id) {
  params.validate();
  const auto hh_means = params.hh_means.empty() ? SceneGenParams::default_hh_means(params.num_classes) : params.hh_means;
  const auto hv_means = params.hv_means.empty() ? SceneGenParams::default_hv_means(params.num_classes) : params.hv_means;

  const std::size_t sites = params.floe_count_min + rng.below(params.floe_count_max - params.floe_count_min + 1);
  struct Site {
    double y, x;
    std::uint8_t cls;
  };
  std::vector<Site> floes(sites);
  for (auto& f : floes) {
    f.y = rng.uniform(0.0, static_cast<double>(params.height));
    f.x = rng.uniform(0.0, static_cast<double>(params.width));
    f.cls = static_cast<std::uint8_t>(rng.below(params.num_classes));
  }

  Scene s;
  s.id = std::move(id);
  s.height = params.height;
  s.width = params.width;
  s.hh.resize(s.pixels());
  s.hv.resize(s.pixels());
  s.labels.resize(s.pixels());
  const std::size_t b = params.border_mask_width;
  for (std::size_t y = 0; y < s.height; ++y) {
    for (std::size_t x = 0; x < s.width; ++x) {
      const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < floes.size(); ++k) {
        const double d = (floes[k].y - py) * (floes[k].y - py) + (floes[k].x - px) * (floes[k].x - px);
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      const std::uint8_t cls = floes[best].cls;
      const std::size_t i = y * s.width + x;
      // Speckle multiplies intensity, i.e. the [0, 1] image of the normalised value.
      auto speckled = [&](double mean) {
        double m = 1.0;
        if (params.speckle_strength > 0.0) m = std::max(0.0, 1.0 + params.speckle_strength * rng.normal());
        const double intensity = 0.5 * (mean + 1.0) * m;
        return static_cast<float>(std::clamp(2.0 * intensity - 1.0, -1.0, 1.0));
      };
      s.hh[i] = speckled(hh_means[cls]);
      s.hv[i] = speckled(hv_means[cls]);
      const bool border = y < b || x < b || y + b >= s.height || x + b >= s.width;
      s.labels[i] = border ? kIgnoreLabel : cls;
      if (params.nan_probability > 0.0 && rng.coin(params.nan_probability)) {
        s.hh[i] = std::numeric_limits<float>::quiet_NaN();
        s.hv[i] = std::numeric_limits<float>::quiet_NaN();
      }
    }
  }
  return s;
}

namespace {

template <typename F>
Scene remap(const Scene& src, std::size_t h, std::size_t w, F source_index) {
  Scene out;
  out.id = src.id;
  out.height = h;
  out.width = w;
  out.hh.resize(h * w);
  out.hv.resize(h * w);
  out.labels.resize(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t j = source_index(y, x);
      const std::size_t i = y * w + x;
      out.hh[i] = src.hh[j];
      out.hv[i] = src.hv[j];
      out.labels[i] = src.labels[j];
    }
  return out;
}

std::size_t reflect101(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto m = static_cast<std::ptrdiff_t>(n);
  while (i < 0 || i >= m) i = i < 0 ? -i : 2 * m - 2 - i;
  return static_cast<std::size_t>(i);
}

}  // namespace

Scene flip_horizontal(const Scene& scene) {
  scene.validate();
  const std::size_t w = scene.width;
  return remap(scene, scene.height, w, [w](std::size_t y, std::size_t x) { return y * w + (w - 1 - x); });
}

Scene flip_vertical(const Scene& scene) {
  scene.validate();
  const std::size_t h = scene.height, w = scene.width;
  return remap(scene, h, w, [h, w](std::size_t y, std::size_t x) { return (h - 1 - y) * w + x; });
}

Scene rotate90(const Scene& scene, int quarter_turns) {
  scene.validate();
  const int k = ((quarter_turns % 4) + 4) % 4;
  const std::size_t h = scene.height, w = scene.width;
  switch (k) {
    case 0: return scene;
    case 1: return remap(scene, w, h, [w](std::size_t y, std::size_t x) { return x * w + (w - 1 - y); });
    case 2: return remap(scene, h, w, [h, w](std::size_t y, std::size_t x) { return (h - 1 - y) * w + (w - 1 - x); });
    default: return remap(scene, w, h, [h, w](std::size_t y, std::size_t x) { return (h - 1 - x) * w + y; });
  }
}

Scene rescale(const Scene& scene, double factor) {
  scene.validate();
  if (!(factor > 0.0)) throw ConfigError("rescale factor must be positive");
  const std::size_t h = scene.height, w = scene.width;
  const std::size_t sh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(h) * factor)));
  const std::size_t sw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(w) * factor)));
  if (sh == h && sw == w) return scene;

  // Resample into an sh x sw grid.
  const double ry = static_cast<double>(h) / static_cast<double>(sh);
  const double rx = static_cast<double>(w) / static_cast<double>(sw);
  auto bilinear_index = [](double dst, double ratio, std::size_t extent, std::size_t& i0, std::size_t& i1, double& f) {
    double src = (dst + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(extent - 1));
    i0 = static_cast<std::size_t>(src);
    i1 = std::min(i0 + 1, extent - 1);
    f = src - static_cast<double>(i0);
  };
  std::vector<float> hh(sh * sw), hv(sh * sw);
  std::vector<std::uint8_t> lab(sh * sw);
  for (std::size_t y = 0; y < sh; ++y) {
    std::size_t y0, y1;
    double fy;
    bilinear_index(static_cast<double>(y), ry, h, y0, y1, fy);
    const std::size_t ny = std::min(h - 1, static_cast<std::size_t>((static_cast<double>(y) + 0.5) * ry));
    for (std::size_t x = 0; x < sw; ++x) {
      std::size_t x0, x1;
      double fx;
      bilinear_index(static_cast<double>(x), rx, w, x0, x1, fx);
      const std::size_t nx = std::min(w - 1, static_cast<std::size_t>((static_cast<double>(x) + 0.5) * rx));
      auto interp = [&](const std::vector<float>& g) {
        const double top = g[y0 * w + x0] * (1.0 - fx) + g[y0 * w + x1] * fx;
        const double bot = g[y1 * w + x0] * (1.0 - fx) + g[y1 * w + x1] * fx;
        return static_cast<float>(top * (1.0 - fy) + bot * fy);
      };
      hh[y * sw + x] = interp(scene.hh);
      hv[y * sw + x] = interp(scene.hv);
      lab[y * sw + x] = scene.labels[ny * w + nx];
    }
  }

  // Centre-crop or reflect-pad each axis back to the original extent.
  const auto off_y = (static_cast<std::ptrdiff_t>(sh) - static_cast<std::ptrdiff_t>(h)) / 2;
  const auto off_x = (static_cast<std::ptrdiff_t>(sw) - static_cast<std::ptrdiff_t>(w)) / 2;
  Scene out;
  out.id = scene.id;
  out.height = h;
  out.width = w;
  out.hh.resize(h * w);
  out.hv.resize(h * w);
  out.labels.resize(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = reflect101(static_cast<std::ptrdiff_t>(y) + off_y, sh);
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sx = reflect101(static_cast<std::ptrdiff_t>(x) + off_x, sw);
      out.hh[y * w + x] = hh[sy * sw + sx];
      out.hv[y * w + x] = hv[sy * sw + sx];
      out.labels[y * w + x] = lab[sy * sw + sx];
    }
  }
  return out;
}

AugmentPlan draw_augment_plan(const Scene& scene, Rng& rng) {
  AugmentPlan plan;
  plan.hflip = rng.coin();
  plan.vflip = rng.coin();
  if (rng.coin()) {
    plan.quarter_turns = scene.height == scene.width ? 1 + static_cast<int>(rng.below(3)) : 2;
  }
  if (rng.coin()) plan.scale = rng.uniform(0.8, 1.25);
  return plan;
}

Scene apply_augment(const Scene& scene, const AugmentPlan& plan) {
  Scene out = scene;
  if (plan.hflip) out = flip_horizontal(out);
  if (plan.vflip) out = flip_vertical(out);
  if (plan.quarter_turns % 4 != 0) out = rotate90(out, plan.quarter_turns);
  if (plan.scale != 1.0) out = rescale(out, plan.scale);
  return out;
}

Scene augment(const Scene& scene, Rng& rng) { return apply_augment(scene, draw_augment_plan(scene, rng)); }

}  // namespace tinyicenet
