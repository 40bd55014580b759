#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tinyicenet/model.hpp"
#include "tinyicenet/quantization.hpp"
#include "tinyicenet/scene.hpp"

namespace tinyicenet {

struct PreprocessOptions {
  bool rescale = true;
  std::size_t target_size = 0;  // 0 keeps the input size
};

/// Per-channel min-max rescale of finite values to [-1, 1] (a constant
/// channel becomes 0), then NaN -> 0. Labels outside 0..num_classes-1 become
/// 255. With target_size > 0 the scene is centre-cropped or padded (inputs 0,
/// labels 255) to target_size x target_size.
Scene preprocess(const Scene& raw, std::size_t num_classes, const PreprocessOptions& options = {});

/// `count` synthetic scenes named scene_0000...; scene i draws from
/// derive_seed(seed, {i}). The generator already works in normalised units,
/// so only the NaN and label cleanup of preprocess() is applied: a per-scene
/// min-max stretch would erase the absolute class intensities.
std::vector<Scene> generate_corpus(const SceneGenParams& params, std::size_t count, std::uint64_t seed);

inline constexpr std::uint16_t kSceneFormatVersion = 1;
inline constexpr std::uint16_t kCheckpointFormatVersion = 1;

std::vector<std::uint8_t> encode_scene(const Scene& scene);
/// `id` is not stored in the file; it is supplied by the caller.
Scene decode_scene(std::span<const std::uint8_t> bytes, std::string id = {});

void scene_write(const std::filesystem::path& path, const Scene& scene);
/// The scene id is the file stem.
Scene scene_read(const std::filesystem::path& path);

/// Writes `<dir>/<id>.tisc` per scene.
void write_corpus(const std::filesystem::path& dir, std::span<const Scene> scenes);
/// Every *.tisc in `dir`, sorted by file name.
std::vector<Scene> read_corpus(const std::filesystem::path& dir);

struct TrainingMeta {
  std::size_t epoch = 0;
  double val_f1 = 0.0;
  std::uint64_t seed = 0;
  bool operator==(const TrainingMeta&) const = default;
};

/// Float model, or a quantized (BN-folded) one when `weights` is non-empty.
struct Checkpoint {
  Model32 model;
  std::vector<std::optional<QuantizedTensor>> weights;
  ActivationFormat activations;
  TrainingMeta meta;

  bool quantized() const { return !weights.empty(); }
  QuantizedModel to_quantized() const;

  static Checkpoint from_float(const Model32& model, TrainingMeta meta = {});
  static Checkpoint from_quantized(const QuantizedModel& qm, TrainingMeta meta = {});
};

/// `kind:in:out:bias:factor` per layer, separated by ';'.
std::string architecture_descriptor(std::span<const LayerSpec> layers);
std::vector<LayerSpec> parse_architecture(const std::string& descriptor);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void checkpoint_write(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint checkpoint_read(const std::filesystem::path& path);

/// Throws FormatError(ArchitectureMismatch) naming the first layer that
/// differs from `expected`.
void check_architecture(const Checkpoint& ckpt, std::span<const LayerSpec> expected);

/// Binary PGM (P5) of a single-image label map.
void write_pgm(const std::filesystem::path& path, const LabelMap& labels);
LabelMap read_pgm(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// Comma-separated rows (no quoting); the header is row 0.
std::vector<std::vector<std::string>> parse_csv(const std::string& text);

}  // namespace tinyicenet
