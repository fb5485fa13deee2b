#pragma once

// Dataset assembly: label manifests, per-sample augmentation followed by file
// encoding, synthetic byte-level tasks, and padded batching.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "byteformer/byte_order.hpp"
#include "byteformer/codec.hpp"
#include "byteformer/errors.hpp"
#include "byteformer/privacy.hpp"
#include "byteformer/random.hpp"

namespace byteformer {

inline constexpr std::int32_t pad_id = 256;

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
  std::string path;
  int label = 0;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  int class_count = 0;

  std::filesystem::path resolve(const ManifestEntry& e) const { return root / e.path; }
};

// CSV of "relative/path,label" lines, no header. Blank lines are skipped.
inline Manifest load_manifest(const std::filesystem::path& root, const std::filesystem::path& manifest_path,
                              int class_count) {
  if (class_count <= 0) throw ConfigError("class_count must be positive");
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot read manifest " + manifest_path.string());
  Manifest m{root, {}, class_count};
  std::set<std::string> seen;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = manifest_path.string() + ":" + std::to_string(lineno);
    const auto comma = line.rfind(',');
    if (comma == std::string::npos || comma == 0) throw DataError(where + ": expected 'path,label'");
    ManifestEntry e{line.substr(0, comma), 0};
    const std::string label = line.substr(comma + 1);
    std::size_t used = 0;
    try {
      e.label = std::stoi(label, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != label.size()) throw DataError(where + ": label '" + label + "' is not an integer");
    if (e.label < 0 || e.label >= class_count) {
      throw DataError(where + ": label " + std::to_string(e.label) + " outside [0, " + std::to_string(class_count) + ")");
    }
    if (!seen.insert(e.path).second) throw DataError(where + ": duplicate path " + e.path);
    if (!std::filesystem::is_regular_file(root / e.path)) throw IoError(where + ": missing file " + (root / e.path).string());
    m.entries.push_back(std::move(e));
  }
  if (m.entries.empty()) throw DataError("no samples in " + manifest_path.string());
  return m;
}

// ---------------------------------------------------------------------------
// Image helpers

// Bilinear resampling with half-pixel centres.
inline ImageTensor resize_bilinear(const ImageTensor& src, std::size_t out_h, std::size_t out_w) {
  ImageTensor dst(out_h, out_w);
  const double sy = static_cast<double>(src.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(src.width) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
        const double bottom = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
        dst.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(top * (1 - wy) + bottom * wy, 0.0, 255.0)));
      }
    }
  }
  return dst;
}

inline ImageTensor crop(const ImageTensor& src, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  if (top + h > src.height || left + w > src.width) throw DataError("crop outside image");
  ImageTensor dst(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    std::copy_n(src.pixels.begin() + static_cast<std::ptrdiff_t>(((top + y) * src.width + left) * 3), w * 3,
                dst.pixels.begin() + static_cast<std::ptrdiff_t>(y * w * 3));
  }
  return dst;
}

inline ImageTensor flip_horizontal(const ImageTensor& src) {
  ImageTensor dst(src.height, src.width);
  for (std::size_t y = 0; y < src.height; ++y) {
    for (std::size_t x = 0; x < src.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) dst.at(y, x, c) = src.at(y, src.width - 1 - x, c);
    }
  }
  return dst;
}

// Random-resized-crop: area fraction in [0.08, 1], aspect ratio in [3/4, 4/3]
// (log-uniform), ten attempts before falling back to a centre crop.
inline ImageTensor random_resized_crop(const ImageTensor& src, std::size_t size, Rng& rng) {
  const double area = static_cast<double>(src.height * src.width);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * (0.08 + 0.92 * uniform01(rng));
    const double log_ratio = std::log(3.0 / 4.0) + (std::log(4.0 / 3.0) - std::log(3.0 / 4.0)) * uniform01(rng);
    const double ratio = std::exp(log_ratio);
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
    if (w == 0 || h == 0 || w > src.width || h > src.height) continue;
    const std::size_t top = bounded(rng, src.height - h + 1);
    const std::size_t left = bounded(rng, src.width - w + 1);
    return resize_bilinear(crop(src, top, left, h, w), size, size);
  }
  const std::size_t side = std::min(src.height, src.width);
  return resize_bilinear(crop(src, (src.height - side) / 2, (src.width - side) / 2, side, side), size, size);
}

// Shorter side resized to `size`, then a centred size x size crop.
inline ImageTensor center_crop(const ImageTensor& src, std::size_t size) {
  if (src.height == size && src.width == size) return src;
  const double scale = static_cast<double>(size) / static_cast<double>(std::min(src.height, src.width));
  const auto h = std::max(size, static_cast<std::size_t>(std::lround(src.height * scale)));
  const auto w = std::max(size, static_cast<std::size_t>(std::lround(src.width * scale)));
  const ImageTensor resized = (h == src.height && w == src.width) ? src : resize_bilinear(src, h, w);
  return crop(resized, (h - size) / 2, (w - size) / 2, size, size);
}

// ---------------------------------------------------------------------------
// Samples and encodings

using Sample = std::variant<ImageTensor, AudioClip>;

struct EncodeOptions {
  Encoding encoding = Encoding::fHWC;
  int png_filter = 0;
  std::size_t image_size = 224;
  std::size_t audio_samples = 16000;
};

inline Encoding parse_encoding(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "fhwc") return Encoding::fHWC;
  if (lower == "fchw") return Encoding::fCHW;
  if (lower == "tiff") return Encoding::TIFF;
  if (lower == "png") return Encoding::PNG;
  if (lower == "wav_u8" || lower == "u8") return Encoding::WAV_U8;
  if (lower == "wav_i16" || lower == "i16") return Encoding::WAV_I16;
  if (lower == "wav_i32" || lower == "i32") return Encoding::WAV_I32;
  if (lower == "wav_f32" || lower == "f32") return Encoding::WAV_F32;
  if (lower == "raw") return Encoding::RAW;
  throw UsageError("unsupported encoding '" + std::string(name) + "'");
}

inline bool is_wav(Encoding e) {
  return e == Encoding::WAV_U8 || e == Encoding::WAV_I16 || e == Encoding::WAV_I32 || e == Encoding::WAV_F32;
}

inline WavDepth wav_depth(Encoding e) {
  switch (e) {
    case Encoding::WAV_U8: return WavDepth::U8;
    case Encoding::WAV_I16: return WavDepth::I16;
    case Encoding::WAV_I32: return WavDepth::I32;
    case Encoding::WAV_F32: return WavDepth::F32;
    default: throw UsageError("encoding " + std::string(to_string(e)) + " is not a WAV depth");
  }
}

inline ByteSequence encode_image(const ImageTensor& img, const EncodeOptions& opts) {
  switch (opts.encoding) {
    case Encoding::fHWC: return encode_fhwc(img);
    case Encoding::fCHW: return encode_fchw(img);
    case Encoding::TIFF: return encode_tiff(img);
    case Encoding::PNG: return encode_png(img, opts.png_filter);
    default: throw UsageError("encoding " + std::string(to_string(opts.encoding)) + " does not apply to images");
  }
}

// Pads with silence or trims symmetrically to exactly n samples.
inline AudioClip fit_length(const AudioClip& clip, std::size_t n) {
  AudioClip out{clip.sample_rate, std::vector<double>(n, 0.0)};
  if (clip.samples.size() >= n) {
    const std::size_t start = (clip.samples.size() - n) / 2;
    std::copy_n(clip.samples.begin() + static_cast<std::ptrdiff_t>(start), n, out.samples.begin());
  } else {
    std::copy(clip.samples.begin(), clip.samples.end(), out.samples.begin());
  }
  return out;
}

// Training: random resized crop and horizontal flip, then encode. Evaluation:
// fixed-size centre crop, then encode. Audio is fitted to a fixed length.
inline ByteSequence sample_to_bytes(const Sample& sample, const EncodeOptions& opts, bool train, Rng& rng) {
  if (const auto* img = std::get_if<ImageTensor>(&sample)) {
    ImageTensor view;
    if (train) {
      view = random_resized_crop(*img, opts.image_size, rng);
      if (bounded(rng, 2)) view = flip_horizontal(view);
    } else {
      view = center_crop(*img, opts.image_size);
    }
    return encode_image(view, opts);
  }
  const auto& clip = std::get<AudioClip>(sample);
  if (!is_wav(opts.encoding)) throw UsageError("audio samples need a WAV encoding");
  return encode_wav(fit_length(clip, opts.audio_samples), wav_depth(opts.encoding));
}

inline Sample load_sample(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.empty()) throw DataError("empty input: " + path.string());
  try {
    switch (detect_encoding(bytes)) {
      case Encoding::PNG: return decode_png(bytes);
      case Encoding::TIFF: return decode_tiff(bytes);
      case Encoding::WAV_U8:
      case Encoding::WAV_I16:
      case Encoding::WAV_I32:
      case Encoding::WAV_F32: return decode_wav(bytes).clip;
      default: break;
    }
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.reason());
  }
  throw DataError(path.string() + ": not a decodable image or audio file");
}

// ---------------------------------------------------------------------------
// Synthetic tasks

struct LabeledBytes {
  ByteSequence seq;
  int label = 0;
};

enum class SyntheticTask { locality, histogram };

struct SyntheticSpec {
  SyntheticTask task = SyntheticTask::locality;
  int num_classes = 4;
  std::size_t length = 4096;
  std::size_t motif_length = 64;
  // Locality task: one motif copy is planted in each of motif_count equal segments.
  std::size_t motif_count = 1;
  // Fixes motifs and byte profiles so that train and validation splits agree.
  std::uint64_t task_seed = 0;
};

// Locality motifs: four distinct byte values, each repeated motif_length / 4
// times, in a class-specific block order. All classes share one byte multiset,
// so only the ordering carries the label. The first four block orders have
// pairwise disjoint adjacent pairs.
inline std::vector<std::vector<std::uint8_t>> locality_motifs(const SyntheticSpec& spec) {
  if (spec.num_classes < 1 || spec.num_classes > 24) throw ConfigError("locality task supports 1 to 24 classes");
  if (spec.motif_length < 4 || spec.motif_length % 4 != 0) throw ConfigError("motif_length must be a multiple of 4");
  if (spec.motif_count < 1 || spec.motif_length * spec.motif_count > spec.length) {
    throw ConfigError("motif_count copies of motif_length bytes do not fit in the sequence");
  }
  Rng rng(mix_seed({spec.task_seed, 0x6d6f746966ull}));
  std::array<std::uint8_t, 256> values{};
  std::iota(values.begin(), values.end(), std::uint8_t{0});
  for (std::size_t i = 255; i > 0; --i) std::swap(values[i], values[bounded(rng, i + 1)]);
  std::vector<std::array<int, 4>> orders = {{0, 1, 2, 3}, {1, 3, 0, 2}, {2, 0, 3, 1}, {3, 2, 1, 0}};
  std::array<int, 4> perm = {0, 1, 2, 3};
  do {
    if (std::find(orders.begin(), orders.end(), perm) == orders.end()) orders.push_back(perm);
  } while (std::next_permutation(perm.begin(), perm.end()));
  const std::size_t block = spec.motif_length / 4;
  std::vector<std::vector<std::uint8_t>> motifs;
  for (int c = 0; c < spec.num_classes; ++c) {
    std::vector<std::uint8_t> motif;
    for (int b : orders[static_cast<std::size_t>(c)]) motif.insert(motif.end(), block, values[static_cast<std::size_t>(b)]);
    motifs.push_back(std::move(motif));
  }
  return motifs;
}

// Histogram profiles: class c draws half its bytes uniformly from a private
// set of 256 / C values and half uniformly from all 256.
inline std::vector<std::vector<std::uint8_t>> histogram_favoured(const SyntheticSpec& spec) {
  if (spec.num_classes < 1 || spec.num_classes > 256) throw ConfigError("histogram task supports 1 to 256 classes");
  Rng rng(mix_seed({spec.task_seed, 0x68697374ull}));
  std::array<std::uint8_t, 256> values{};
  std::iota(values.begin(), values.end(), std::uint8_t{0});
  for (std::size_t i = 255; i > 0; --i) std::swap(values[i], values[bounded(rng, i + 1)]);
  const std::size_t per = 256 / static_cast<std::size_t>(spec.num_classes);
  std::vector<std::vector<std::uint8_t>> sets;
  for (std::size_t c = 0; c < static_cast<std::size_t>(spec.num_classes); ++c) {
    sets.emplace_back(values.begin() + static_cast<std::ptrdiff_t>(c * per),
                      values.begin() + static_cast<std::ptrdiff_t>((c + 1) * per));
  }
  return sets;
}

// n labelled sequences with labels cycling 0..C-1 (balanced when C divides n).
inline std::vector<LabeledBytes> make_synthetic(const SyntheticSpec& spec, std::size_t n, Rng& rng) {
  std::vector<LabeledBytes> out;
  out.reserve(n);
  if (spec.task == SyntheticTask::locality) {
    const auto motifs = locality_motifs(spec);
    for (std::size_t i = 0; i < n; ++i) {
      const int label = static_cast<int>(i % static_cast<std::size_t>(spec.num_classes));
      std::vector<std::uint8_t> bytes(spec.length);
      for (auto& b : bytes) b = static_cast<std::uint8_t>(rng() >> 56);
      const auto& motif = motifs[static_cast<std::size_t>(label)];
      const std::size_t segment = spec.length / spec.motif_count;
      for (std::size_t m = 0; m < spec.motif_count; ++m) {
        const std::size_t offset = m * segment + bounded(rng, segment - spec.motif_length + 1);
        std::copy(motif.begin(), motif.end(), bytes.begin() + static_cast<std::ptrdiff_t>(offset));
      }
      out.push_back({{std::move(bytes), Encoding::RAW}, label});
    }
  } else {
    const auto sets = histogram_favoured(spec);
    for (std::size_t i = 0; i < n; ++i) {
      const int label = static_cast<int>(i % static_cast<std::size_t>(spec.num_classes));
      const auto& fav = sets[static_cast<std::size_t>(label)];
      std::vector<std::uint8_t> bytes(spec.length);
      for (auto& b : bytes) {
        b = bounded(rng, 2) ? fav[bounded(rng, fav.size())] : static_cast<std::uint8_t>(bounded(rng, 256));
      }
      out.push_back({{std::move(bytes), Encoding::RAW}, label});
    }
  }
  return out;
}

struct LabeledImage {
  ImageTensor image;
  int label = 0;
};

// Small images for spatial-layout classes: 0 bright top half, 1 bright bottom
// half, 2 flat mid-grey, 3 full-range noise. Every pixel carries +-24 noise.
inline std::vector<LabeledImage> make_synthetic_images(std::size_t n, std::size_t size, Rng& rng) {
  std::vector<LabeledImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 4);
    ImageTensor img(size, size);
    const int bright = 170 + static_cast<int>(bounded(rng, 60));
    const int dark = 20 + static_cast<int>(bounded(rng, 60));
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        for (std::size_t c = 0; c < 3; ++c) {
          int base = 0;
          switch (label) {
            case 0: base = y < size / 2 ? bright : dark; break;
            case 1: base = y < size / 2 ? dark : bright; break;
            case 2: base = 128; break;
            default: base = static_cast<int>(bounded(rng, 256)); break;
          }
          const int v = base + static_cast<int>(bounded(rng, 49)) - 24;
          img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
        }
      }
    }
    out.push_back({std::move(img), label});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

// tokens[i * max_length + j] is a byte id, or pad_id exactly when j >= lengths[i].
struct Batch {
  std::size_t batch_size = 0;
  std::size_t max_length = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::size_t> lengths;
  std::vector<int> labels;
};

inline Batch collate(std::span<const LabeledBytes> samples, std::size_t max_input_bytes) {
  if (samples.empty()) throw DataError("cannot collate an empty batch");
  Batch batch;
  batch.batch_size = samples.size();
  for (const auto& s : samples) {
    if (s.seq.bytes.empty()) throw DataError("empty input in batch");
    if (s.seq.size() > max_input_bytes) {
      throw DataError("input of " + std::to_string(s.seq.size()) + " bytes exceeds max_input_bytes " +
                      std::to_string(max_input_bytes));
    }
    batch.max_length = std::max(batch.max_length, s.seq.size());
  }
  batch.tokens.assign(batch.batch_size * batch.max_length, pad_id);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& bytes = samples[i].seq.bytes;
    std::copy(bytes.begin(), bytes.end(), batch.tokens.begin() + static_cast<std::ptrdiff_t>(i * batch.max_length));
    batch.lengths.push_back(bytes.size());
    batch.labels.push_back(samples[i].label);
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Sources: indexable labelled samples rendered to bytes on demand.

class DataSource {
 public:
  virtual ~DataSource() = default;
  virtual std::size_t size() const = 0;
  virtual int label(std::size_t index) const = 0;
  // Bytes for one sample. Training-mode draws consume rng; evaluation must not depend on it.
  virtual ByteSequence render(std::size_t index, bool train, Rng& rng) const = 0;
};

class BytesSource : public DataSource {
 public:
  explicit BytesSource(std::vector<LabeledBytes> samples) : samples_(std::move(samples)) {}
  std::size_t size() const override { return samples_.size(); }
  int label(std::size_t i) const override { return samples_.at(i).label; }
  ByteSequence render(std::size_t i, bool, Rng&) const override { return samples_.at(i).seq; }

 private:
  std::vector<LabeledBytes> samples_;
};

// Images encoded on demand; with a camera spec, captured by the masking camera instead.
class ImageSource : public DataSource {
 public:
  ImageSource(std::vector<LabeledImage> images, EncodeOptions opts, std::optional<CameraSpec> camera = {},
              std::uint64_t eval_seed = 0, bool augment = false)
      : images_(std::move(images)), opts_(opts), camera_(camera), eval_seed_(eval_seed), augment_(augment) {}
  std::size_t size() const override { return images_.size(); }
  int label(std::size_t i) const override { return images_.at(i).label; }
  ByteSequence render(std::size_t i, bool train, Rng& rng) const override {
    const auto& img = images_.at(i).image;
    if (camera_) {
      if (train && camera_->seed_policy == CameraSpec::SeedPolicy::per_sample) return camera_capture(img, *camera_, rng);
      Rng fixed(mix_seed({eval_seed_, i}));
      return camera_capture(img, *camera_, fixed);
    }
    if (augment_) return sample_to_bytes(Sample{img}, opts_, train, rng);
    return encode_image(img, opts_);
  }
  void set_camera(std::optional<CameraSpec> camera) { camera_ = camera; }

 private:
  std::vector<LabeledImage> images_;
  EncodeOptions opts_;
  std::optional<CameraSpec> camera_;
  std::uint64_t eval_seed_;
  bool augment_;
};

// Files listed in a manifest. RAW ingests file bytes as-is; other encodings decode then re-encode.
class ManifestSource : public DataSource {
 public:
  ManifestSource(Manifest manifest, EncodeOptions opts, std::optional<CameraSpec> camera = {},
                 std::uint64_t eval_seed = 0)
      : manifest_(std::move(manifest)), opts_(opts), camera_(camera), eval_seed_(eval_seed) {}
  std::size_t size() const override { return manifest_.entries.size(); }
  int label(std::size_t i) const override { return manifest_.entries.at(i).label; }
  ByteSequence render(std::size_t i, bool train, Rng& rng) const override {
    const auto path = manifest_.resolve(manifest_.entries.at(i));
    if (opts_.encoding == Encoding::RAW && !camera_) return ingest_file(path);
    const Sample sample = load_sample(path);
    if (camera_) {
      const auto* img = std::get_if<ImageTensor>(&sample);
      if (!img) throw DataError(path.string() + ": camera capture needs an image");
      const ImageTensor view = train ? random_resized_crop(*img, opts_.image_size, rng) : center_crop(*img, opts_.image_size);
      if (train && camera_->seed_policy == CameraSpec::SeedPolicy::per_sample) return camera_capture(view, *camera_, rng);
      Rng fixed(mix_seed({eval_seed_, i}));
      return camera_capture(view, *camera_, fixed);
    }
    return sample_to_bytes(sample, opts_, train, rng);
  }
  void set_camera(std::optional<CameraSpec> camera) { camera_ = camera; }

 private:
  Manifest manifest_;
  EncodeOptions opts_;
  std::optional<CameraSpec> camera_;
  std::uint64_t eval_seed_;
};

// Post-encoding transforms applied to every rendered sample.
struct Pipeline {
  std::optional<OrderTransform> order;
  std::optional<PermutationMap> phi;
  int noise = 0;

  ByteSequence apply(ByteSequence seq, Rng& rng) const {
    if (order && order->kind != OrderKind::baseline) seq = apply_order(seq, *order, rng);
    if (phi) seq = obfuscate(seq, *phi, noise, rng);
    return seq;
  }
};

// Per-sample generator: a pure function of (seed, epoch, index), so the bytes
// do not depend on batch composition or on the order samples are rendered in.
inline Rng sample_rng(std::uint64_t seed, std::uint64_t epoch, std::size_t index) {
  return Rng(mix_seed({seed, epoch, index}));
}

inline LabeledBytes render_sample(const DataSource& source, const Pipeline& pipeline, std::size_t index, bool train,
                                  std::uint64_t seed, std::uint64_t epoch) {
  Rng rng = sample_rng(seed, train ? epoch : 0xE7A1ull, index);
  return {pipeline.apply(source.render(index, train, rng), rng), source.label(index)};
}

}  // namespace byteformer
