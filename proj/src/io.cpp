#include "tinyicenet/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "tinyicenet/rng.hpp"

namespace tinyicenet {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace fs = std::filesystem;

// ---------------------------------------------------------------- preprocess

namespace {

void rescale_channel(std::vector<float>& v, bool rescale) {
  float lo = INFINITY, hi = -INFINITY;
  for (float x : v)
    if (std::isfinite(x)) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  const bool any = lo <= hi;
  const bool identity = !rescale || (any && lo == -1.0f && hi == 1.0f);
  for (float& x : v) {
    if (!std::isfinite(x)) {
      x = 0.0f;
    } else if (identity) {
      continue;
    } else if (hi == lo) {
      x = 0.0f;
    } else {
      const double t = (static_cast<double>(x) - lo) / (static_cast<double>(hi) - lo);
      x = std::clamp(static_cast<float>(2.0 * t - 1.0), -1.0f, 1.0f);
    }
  }
}

Scene fit(const Scene& s, std::size_t size) {
  Scene out;
  out.id = s.id;
  out.height = out.width = size;
  out.hh.assign(size * size, 0.0f);
  out.hv.assign(size * size, 0.0f);
  out.labels.assign(size * size, kIgnoreLabel);
  // Offsets of the centred overlap in source and destination.
  auto span1d = [](std::size_t src, std::size_t dst, std::size_t& s0, std::size_t& d0, std::size_t& len) {
    if (src >= dst) {
      s0 = (src - dst) / 2;
      d0 = 0;
      len = dst;
    } else {
      s0 = 0;
      d0 = (dst - src) / 2;
      len = src;
    }
  };
  std::size_t sy, dy, ly, sx, dx, lx;
  span1d(s.height, size, sy, dy, ly);
  span1d(s.width, size, sx, dx, lx);
  for (std::size_t y = 0; y < ly; ++y)
    for (std::size_t x = 0; x < lx; ++x) {
      const std::size_t si = (sy + y) * s.width + sx + x, di = (dy + y) * size + dx + x;
      out.hh[di] = s.hh[si];
      out.hv[di] = s.hv[si];
      out.labels[di] = s.labels[si];
    }
  return out;
}

}  // namespace

Scene preprocess(const Scene& raw, std::size_t num_classes, const PreprocessOptions& options) {
  raw.validate();
  if (num_classes == 0 || num_classes > 255) throw ConfigError("num_classes must be in [1, 255]");
  Scene s = raw;
  rescale_channel(s.hh, options.rescale);
  rescale_channel(s.hv, options.rescale);
  for (auto& l : s.labels)
    if (l >= num_classes) l = kIgnoreLabel;
  const std::size_t t = options.target_size;
  if (t > 0 && (s.height != t || s.width != t)) s = fit(s, t);
  return s;
}

std::vector<Scene> generate_corpus(const SceneGenParams& params, std::size_t count, std::uint64_t seed) {
  params.validate();
  std::vector<Scene> out(count);
  char id[32];
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, {i}));
    std::snprintf(id, sizeof id, "scene_%04zu", i);
    out[i] = preprocess(synth_scene(params, rng, id), params.num_classes, {.rescale = false});
  }
  return out;
}

// ------------------------------------------------------------- byte helpers

namespace {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <typename T>
  void put(T v) {
    raw(&v, sizeof v);
  }
  void floats(std::span<const float> v) { raw(v.data(), v.size_bytes()); }
  void crc() { put<std::uint32_t>(static_cast<std::uint32_t>(crc32(0L, buf_.data(), static_cast<uInt>(buf_.size())))); }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, b_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T get() {
    T v;
    raw(&v, sizeof v);
    return v;
  }
  void floats(std::span<float> v) { raw(v.data(), v.size_bytes()); }
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n)
      throw FormatError(FormatErrc::Truncated, "needed " + std::to_string(n) + " bytes at offset " +
                                                   std::to_string(pos_) + ", file has " + std::to_string(b_.size()));
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

void check_magic(std::span<const std::uint8_t> bytes, const char (&magic)[5]) {
  if (bytes.size() < 4) {
    if (std::memcmp(bytes.data(), magic, bytes.size()) == 0)
      throw FormatError(FormatErrc::Truncated, "file shorter than its magic");
    throw FormatError(FormatErrc::BadMagic, "not a " + std::string(magic) + " file");
  }
  if (std::memcmp(bytes.data(), magic, 4) != 0) throw FormatError(FormatErrc::BadMagic, "expected " + std::string(magic));
}

void check_version(std::uint16_t got, std::uint16_t want) {
  if (got != want)
    throw FormatError(FormatErrc::VersionMismatch,
                      "file version " + std::to_string(got) + ", reader supports " + std::to_string(want));
}

void check_crc(std::span<const std::uint8_t> bytes) {
  // The last four bytes hold the CRC-32 of everything before them.
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  const auto actual = static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(body)));
  if (stored != actual) throw FormatError(FormatErrc::ChecksumMismatch, "stored CRC does not match contents");
}

}  // namespace

// ------------------------------------------------------------------- scenes

std::vector<std::uint8_t> encode_scene(const Scene& scene) {
  scene.validate();
  ByteWriter w;
  w.raw("TISC", 4);
  w.put<std::uint16_t>(kSceneFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(scene.height));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(scene.width));
  w.floats(scene.hh);
  w.floats(scene.hv);
  w.raw(scene.labels.data(), scene.labels.size());
  w.crc();
  return std::move(w.bytes());
}

Scene decode_scene(std::span<const std::uint8_t> bytes, std::string id) {
  check_magic(bytes, "TISC");
  ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  check_version(r.get<std::uint16_t>(), kSceneFormatVersion);
  Scene s;
  s.id = std::move(id);
  s.height = r.get<std::uint32_t>();
  s.width = r.get<std::uint32_t>();
  const std::uint64_t px = static_cast<std::uint64_t>(s.height) * s.width;
  const std::uint64_t expected = px * 9 + 4;
  if (r.remaining() < expected)
    throw FormatError(FormatErrc::Truncated, std::to_string(s.height) + "x" + std::to_string(s.width) + " scene needs " +
                                                 std::to_string(expected) + " payload bytes, found " +
                                                 std::to_string(r.remaining()));
  if (r.remaining() > expected) throw FormatError(FormatErrc::Malformed, "trailing bytes after the scene payload");
  check_crc(bytes);
  s.hh.resize(px);
  s.hv.resize(px);
  s.labels.resize(px);
  r.floats(s.hh);
  r.floats(s.hv);
  r.raw(s.labels.data(), px);
  return s;
}

void scene_write(const fs::path& path, const Scene& scene) { write_file(path, encode_scene(scene)); }

Scene scene_read(const fs::path& path) { return decode_scene(read_file(path), path.stem().string()); }

void write_corpus(const fs::path& dir, std::span<const Scene> scenes) {
  fs::create_directories(dir);
  for (const Scene& s : scenes) {
    if (s.id.empty()) throw ConfigError("scene without an id cannot be written to a corpus");
    scene_write(dir / (s.id + ".tisc"), s);
  }
}

std::vector<Scene> read_corpus(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("scene directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".tisc") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Scene> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(scene_read(f));
  return out;
}

// -------------------------------------------------------------- checkpoints

QuantizedModel Checkpoint::to_quantized() const {
  if (!quantized()) throw ConfigError("checkpoint holds a float model");
  QuantizedModel qm{model, weights, activations};
  refresh_dequantized(qm);
  return qm;
}

Checkpoint Checkpoint::from_float(const Model32& model, TrainingMeta meta) { return {model, {}, {}, meta}; }

Checkpoint Checkpoint::from_quantized(const QuantizedModel& qm, TrainingMeta meta) {
  return {qm.folded, qm.weights, qm.activations, meta};
}

namespace {

LayerKind parse_kind(const std::string& s) {
  for (LayerKind k : {LayerKind::Conv3x3, LayerKind::BatchNorm, LayerKind::ReLU, LayerKind::MaxPool2x2,
                      LayerKind::Upsample, LayerKind::Conv1x1, LayerKind::Argmax})
    if (to_string(k) == s) return k;
  throw FormatError(FormatErrc::Malformed, "unknown layer kind '" + s + "'");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::size_t parse_size(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw FormatError(FormatErrc::Malformed, "bad " + what + " '" + s + "'");
  }
}

double parse_real(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw FormatError(FormatErrc::Malformed, "bad " + what + " '" + s + "'");
  return v;
}

std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

std::string describe(const LayerSpec& l) {
  return to_string(l.kind) + "(" + std::to_string(l.in_channels) + "->" + std::to_string(l.out_channels) +
         (l.has_bias ? ", bias" : "") + (l.kind == LayerKind::Upsample ? ", x" + std::to_string(l.factor) : "") + ")";
}

std::size_t int_bytes(int bits) { return static_cast<std::size_t>((bits + 7) / 8); }

}  // namespace

std::string architecture_descriptor(std::span<const LayerSpec> layers) {
  std::string out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (i) out += ';';
    out += to_string(l.kind) + ":" + std::to_string(l.in_channels) + ":" + std::to_string(l.out_channels) + ":" +
           (l.has_bias ? "1" : "0") + ":" + std::to_string(l.factor);
  }
  return out;
}

std::vector<LayerSpec> parse_architecture(const std::string& descriptor) {
  std::vector<LayerSpec> layers;
  if (descriptor.empty()) return layers;
  for (const std::string& item : split(descriptor, ';')) {
    const auto f = split(item, ':');
    if (f.size() != 5) throw FormatError(FormatErrc::Malformed, "layer descriptor '" + item + "'");
    LayerSpec l;
    l.kind = parse_kind(f[0]);
    l.in_channels = parse_size(f[1], "in_channels");
    l.out_channels = parse_size(f[2], "out_channels");
    if (f[3] != "0" && f[3] != "1") throw FormatError(FormatErrc::Malformed, "bias flag '" + f[3] + "'");
    l.has_bias = f[3] == "1";
    l.factor = parse_size(f[4], "factor");
    layers.push_back(l);
  }
  return layers;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  const Model32& m = ckpt.model;
  const auto& layers = m.layers();
  if (ckpt.quantized() && ckpt.weights.size() != layers.size())
    throw ShapeError("layers", "one quantization slot per layer expected");

  std::string header;
  auto kv = [&header](const std::string& k, const std::string& v) { header += k + "=" + v + "\n"; };
  kv("arch", architecture_descriptor(layers));
  kv("input", std::to_string(m.input_channels()) + "x" + std::to_string(m.input_height()) + "x" +
                  std::to_string(m.input_width()));
  kv("upsample", m.upsample_mode() == UpsampleMode::Nearest ? "nearest" : "bilinear");
  kv("num_classes", std::to_string(layers.empty() ? 0 : m.num_classes()));
  kv("dtype", ckpt.quantized() ? "quantized" : "float32");
  if (ckpt.quantized()) {
    kv("activation", std::to_string(ckpt.activations.bits) + "/" + std::to_string(ckpt.activations.frac_bits));
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& q = ckpt.weights[i];
      if (!q) continue;
      kv("layer." + std::to_string(i) + ".bits", std::to_string(q->params.bits));
      kv("layer." + std::to_string(i) + ".scale", hexfloat(q->params.scale));
      kv("layer." + std::to_string(i) + ".mode", to_string(q->params.mode));
    }
  }
  kv("epoch", std::to_string(ckpt.meta.epoch));
  kv("val_f1", hexfloat(ckpt.meta.val_f1));
  kv("seed", std::to_string(ckpt.meta.seed));

  ByteWriter w;
  w.raw("TIN1", 4);
  w.put<std::uint16_t>(kCheckpointFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(header.size()));
  w.raw(header.data(), header.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerParams<float>& p = m.params()[i];
    if (layers[i].is_conv()) {
      if (ckpt.quantized() && ckpt.weights[i]) {
        const QuantizedTensor& q = *ckpt.weights[i];
        if (q.q.shape() != p.weight.shape()) throw ShapeError("weight", "layer " + std::to_string(i));
        const std::size_t nb = int_bytes(q.params.bits);
        for (std::int64_t v : q.q.data()) w.raw(&v, nb);  // low bytes of the two's-complement value
      } else {
        w.floats(p.weight.data());
      }
      w.floats(p.bias);
    } else if (layers[i].kind == LayerKind::BatchNorm) {
      w.floats(p.gamma);
      w.floats(p.beta);
      w.floats(p.running_mean);
      w.floats(p.running_var);
    }
  }
  w.crc();
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  check_magic(bytes, "TIN1");
  ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  check_version(r.get<std::uint16_t>(), kCheckpointFormatVersion);
  const std::uint32_t hlen = r.get<std::uint32_t>();
  r.need(static_cast<std::size_t>(hlen) + 4);
  check_crc(bytes);
  std::string header(hlen, '\0');
  r.raw(header.data(), hlen);

  std::map<std::string, std::string> kv;
  for (const std::string& line : split(header, '\n')) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(FormatErrc::Malformed, "header line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto field = [&kv](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError(FormatErrc::Malformed, "header lacks '" + k + "'");
    return it->second;
  };

  const auto layers = parse_architecture(field("arch"));
  const auto dims = split(field("input"), 'x');
  if (dims.size() != 3) throw FormatError(FormatErrc::Malformed, "input dims '" + field("input") + "'");
  const std::string& up = field("upsample");
  if (up != "nearest" && up != "bilinear") throw FormatError(FormatErrc::Malformed, "upsample mode '" + up + "'");

  Checkpoint ck;
  try {
    ck.model = Model32(layers, parse_size(dims[0], "channels"), parse_size(dims[1], "height"),
                       parse_size(dims[2], "width"), up == "nearest" ? UpsampleMode::Nearest : UpsampleMode::Bilinear);
  } catch (const ShapeError& e) {
    throw FormatError(FormatErrc::ArchitectureMismatch, e.what());
  } catch (const ConfigError& e) {
    throw FormatError(FormatErrc::ArchitectureMismatch, e.what());
  }
  if (!layers.empty() && parse_size(field("num_classes"), "num_classes") != ck.model.num_classes())
    throw FormatError(FormatErrc::ArchitectureMismatch, "num_classes disagrees with the layer list");

  const std::string& dtype = field("dtype");
  if (dtype != "float32" && dtype != "quantized") throw FormatError(FormatErrc::Malformed, "dtype '" + dtype + "'");
  if (dtype == "quantized") {
    const auto act = split(field("activation"), '/');
    if (act.size() != 2) throw FormatError(FormatErrc::Malformed, "activation format");
    ck.activations = {static_cast<int>(parse_size(act[0], "activation bits")),
                      static_cast<int>(parse_size(act[1], "activation fraction bits"))};
    ck.weights.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (!layers[i].is_conv()) continue;
      const std::string key = "layer." + std::to_string(i) + ".";
      QuantParams qp;
      qp.bits = static_cast<int>(parse_size(field(key + "bits"), "bits"));
      qp.scale = parse_real(field(key + "scale"), "scale");
      try {
        qp.mode = parse_scale_mode(field(key + "mode"));
        qp.validate();
      } catch (const ConfigError& e) {
        throw FormatError(FormatErrc::Malformed, "layer " + std::to_string(i) + ": " + e.what());
      }
      ck.weights[i] = QuantizedTensor{Tensor<std::int64_t>(ck.model.params()[i].weight.shape()), qp};
    }
  }
  ck.meta.epoch = parse_size(field("epoch"), "epoch");
  ck.meta.val_f1 = parse_real(field("val_f1"), "val_f1");
  ck.meta.seed = parse_size(field("seed"), "seed");

  for (std::size_t i = 0; i < layers.size(); ++i) {
    LayerParams<float>& p = ck.model.params()[i];
    if (layers[i].is_conv()) {
      if (ck.quantized()) {
        QuantizedTensor& q = *ck.weights[i];
        const std::size_t nb = int_bytes(q.params.bits);
        const std::int64_t lo = -q.params.qmax(), hi = q.params.qmax();
        for (std::int64_t& v : q.q.data()) {
          std::uint64_t u = 0;
          r.raw(&u, nb);
          const int shift = static_cast<int>(64 - 8 * nb);
          v = shift > 0 ? static_cast<std::int64_t>(u << shift) >> shift : static_cast<std::int64_t>(u);
          if (v < lo || v > hi)
            throw FormatError(FormatErrc::Malformed, "layer " + std::to_string(i) + ": weight outside the bit range");
        }
      } else {
        r.floats(p.weight.data());
      }
      r.floats(p.bias);
    } else if (layers[i].kind == LayerKind::BatchNorm) {
      r.floats(p.gamma);
      r.floats(p.beta);
      r.floats(p.running_mean);
      r.floats(p.running_var);
    }
  }
  if (r.remaining() != 4)
    throw FormatError(FormatErrc::Malformed, std::to_string(r.remaining() - 4) + " bytes beyond the declared payload");
  if (ck.quantized()) {
    QuantizedModel qm = ck.to_quantized();
    ck.model = std::move(qm.folded);
  }
  return ck;
}

void checkpoint_write(const fs::path& path, const Checkpoint& ckpt) { write_file(path, encode_checkpoint(ckpt)); }

Checkpoint checkpoint_read(const fs::path& path) { return decode_checkpoint(read_file(path)); }

void check_architecture(const Checkpoint& ckpt, std::span<const LayerSpec> expected) {
  const auto& got = ckpt.model.layers();
  const std::size_t n = std::min(got.size(), expected.size());
  for (std::size_t i = 0; i < n; ++i)
    if (!(got[i] == expected[i]))
      throw FormatError(FormatErrc::ArchitectureMismatch, "layer " + std::to_string(i) + ": expected " +
                                                              describe(expected[i]) + ", checkpoint has " +
                                                              describe(got[i]));
  if (got.size() != expected.size())
    throw FormatError(FormatErrc::ArchitectureMismatch,
                      "layer " + std::to_string(n) + ": expected " + std::to_string(expected.size()) +
                          " layers, checkpoint has " + std::to_string(got.size()));
}

// ------------------------------------------------------------- misc files

void write_pgm(const fs::path& path, const LabelMap& labels) {
  const Shape& s = labels.shape();
  if (s.n != 1 || s.c != 1) throw ShapeError("labels", "PGM output needs a single (1, 1, h, w) map");
  const std::string head = "P5\n" + std::to_string(s.w) + " " + std::to_string(s.h) + "\n255\n";
  std::vector<std::uint8_t> bytes(head.begin(), head.end());
  bytes.insert(bytes.end(), labels.data().begin(), labels.data().end());
  write_file(path, bytes);
}

LabelMap read_pgm(const fs::path& path) {
  const auto bytes = read_file(path);
  std::string text(bytes.begin(), bytes.end());
  std::istringstream in(text);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  if (!(in >> magic >> w >> h >> maxval) || magic != "P5" || maxval != 255)
    throw FormatError(FormatErrc::BadMagic, "not an 8-bit binary PGM: " + path.string());
  const auto off = static_cast<std::size_t>(in.tellg()) + 1;
  if (bytes.size() < off + w * h) throw FormatError(FormatErrc::Truncated, path.string());
  return LabelMap({1, 1, h, w}, std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                                                          bytes.begin() + static_cast<std::ptrdiff_t>(off + w * h)));
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ConfigError("write failed: " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const fs::path& path) {
  const auto b = read_file(path);
  return std::string(b.begin(), b.end());
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    rows.push_back(split(line, ','));
  }
  return rows;
}

}  // namespace tinyicenet
