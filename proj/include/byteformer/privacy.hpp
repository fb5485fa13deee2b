#pragma once

// Input obfuscation by a fixed byte-value permutation, and the masked-capture
// camera that emits a position-free subsequence of pixel channels.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "byteformer/codec.hpp"
#include "byteformer/errors.hpp"
#include "byteformer/random.hpp"
#include "byteformer/tensor.hpp"

namespace byteformer {

struct PermutationMap {
  std::array<std::uint8_t, 256> forward{};
  std::array<std::uint8_t, 256> inverse{};
  std::uint64_t seed = 0;

  static PermutationMap identity() {
    PermutationMap m;
    std::iota(m.forward.begin(), m.forward.end(), std::uint8_t{0});
    m.inverse = m.forward;
    return m;
  }

  std::uint8_t operator()(std::uint8_t byte) const { return forward[byte]; }

  bool is_bijection() const {
    std::array<bool, 256> hit{};
    for (auto v : forward) hit[v] = true;
    if (!std::all_of(hit.begin(), hit.end(), [](bool h) { return h; })) return false;
    for (int i = 0; i < 256; ++i) {
      if (inverse[forward[i]] != i) return false;
    }
    return true;
  }

  // 256 bytes of the forward table followed by the seed, little-endian.
  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out(forward.begin(), forward.end());
    for (int s = 0; s < 64; s += 8) out.push_back(static_cast<std::uint8_t>(seed >> s));
    return out;
  }

  static PermutationMap deserialize(std::span<const std::uint8_t> bytes) {
    if (bytes.size() != 264) throw DataError("permutation map must be 264 bytes, got " + std::to_string(bytes.size()));
    PermutationMap m;
    std::copy_n(bytes.begin(), 256, m.forward.begin());
    for (int i = 0; i < 8; ++i) m.seed |= static_cast<std::uint64_t>(bytes[256 + i]) << (8 * i);
    for (int i = 0; i < 256; ++i) m.inverse[m.forward[i]] = static_cast<std::uint8_t>(i);
    if (!m.is_bijection()) throw DataError("permutation map is not a bijection");
    return m;
  }

  bool operator==(const PermutationMap&) const = default;
};

// Fisher-Yates shuffle of 0..255 driven by a seeded generator.
inline PermutationMap gen_permutation(std::uint64_t seed) {
  PermutationMap m = PermutationMap::identity();
  m.seed = seed;
  Rng rng(seed);
  for (std::size_t i = 255; i > 0; --i) std::swap(m.forward[i], m.forward[bounded(rng, i + 1)]);
  for (int i = 0; i < 256; ++i) m.inverse[m.forward[i]] = static_cast<std::uint8_t>(i);
  return m;
}

// b' = phi[(b + u) mod 256] with u drawn uniformly from {-a, ..., a} per byte.
inline ByteSequence obfuscate(const ByteSequence& seq, const PermutationMap& phi, int noise_a, Rng& rng) {
  if (noise_a < 0) throw UsageError("noise amplitude must be >= 0");
  ByteSequence out{std::vector<std::uint8_t>(seq.bytes.size()), seq.encoding};
  const auto span = static_cast<std::uint64_t>(2 * noise_a + 1);
  for (std::size_t i = 0; i < seq.bytes.size(); ++i) {
    int v = seq.bytes[i];
    if (noise_a > 0) v += static_cast<int>(bounded(rng, span)) - noise_a;
    out.bytes[i] = phi.forward[static_cast<std::uint8_t>((v % 256 + 256) % 256)];
  }
  return out;
}

// Embedding table for obfuscated inputs: out[phi[i]] = table[i] for the 256
// byte rows. Any further rows (the padding token) are copied unchanged.
template <typename T>
Tensor<T> reindex_embedding(const Tensor<T>& table, const PermutationMap& phi) {
  if (table.rank() != 2 || table.dim(0) < 256) {
    throw ShapeError("embedding table " + shape_str(table.shape()) + " has fewer than 256 rows");
  }
  const std::size_t d = table.dim(1);
  std::vector<T> out(table.data().begin(), table.data().end());
  for (std::size_t i = 0; i < 256; ++i) {
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(i * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(phi.forward[i] * d));
  }
  return Tensor<T>(table.shape(), std::move(out), table.requires_grad());
}

struct CameraSpec {
  enum class SeedPolicy { per_sample, fixed };
  double keep_fraction = 1.0;
  SeedPolicy seed_policy = SeedPolicy::per_sample;

  void validate() const {
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
      throw UsageError("camera keep fraction must be in (0, 1], got " + std::to_string(keep_fraction));
    }
  }
};

inline std::size_t camera_kept_count(std::size_t height, std::size_t width, double keep_fraction) {
  return static_cast<std::size_t>(
      std::llround(keep_fraction * static_cast<double>(height * width * ImageTensor::channels)));
}

// Keeps round(f * H * W * 3) pixel channels chosen uniformly without
// replacement and emits their values in raster order, positions discarded.
inline ByteSequence camera_capture(const ImageTensor& img, const CameraSpec& spec, Rng& rng) {
  img.validate();
  spec.validate();
  const std::size_t total = img.pixels.size();
  const std::size_t kept = camera_kept_count(img.height, img.width, spec.keep_fraction);
  if (kept == 0) throw DataError("camera keep fraction retains no pixel channels");
  if (kept == total) return {img.pixels, Encoding::fHWC};
  // Partial Fisher-Yates over positions, then restore raster order.
  std::vector<std::uint32_t> positions(total);
  std::iota(positions.begin(), positions.end(), 0u);
  for (std::size_t i = 0; i < kept; ++i) std::swap(positions[i], positions[i + bounded(rng, total - i)]);
  positions.resize(kept);
  std::sort(positions.begin(), positions.end());
  std::vector<std::uint8_t> out(kept);
  for (std::size_t i = 0; i < kept; ++i) out[i] = img.pixels[positions[i]];
  return {std::move(out), Encoding::fHWC};
}

}  // namespace byteformer
