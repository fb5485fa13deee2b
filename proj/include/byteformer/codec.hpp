#pragma once

// Minimal file encoders and parsers for the byte streams the model consumes.
//
// Writers are bit-exact and deterministic: fHWC/fCHW raw dumps, a baseline
// little-endian TIFF with a single uncompressed strip, a PNG whose IDAT holds a
// zlib stream of stored deflate blocks, and mono RIFF/WAVE at four depths.
// Parsers read back everything the writers produce; the PNG parser also
// inflates ordinary compressed PNGs so that arbitrary inputs can be decoded.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "byteformer/errors.hpp"

namespace byteformer {

enum class Encoding { fHWC, fCHW, TIFF, PNG, JPEG, WAV_U8, WAV_I16, WAV_I32, WAV_F32, MP3, RAW };

inline std::string_view to_string(Encoding e) {
  switch (e) {
    case Encoding::fHWC: return "fHWC";
    case Encoding::fCHW: return "fCHW";
    case Encoding::TIFF: return "TIFF";
    case Encoding::PNG: return "PNG";
    case Encoding::JPEG: return "JPEG";
    case Encoding::WAV_U8: return "WAV_U8";
    case Encoding::WAV_I16: return "WAV_I16";
    case Encoding::WAV_I32: return "WAV_I32";
    case Encoding::WAV_F32: return "WAV_F32";
    case Encoding::MP3: return "MP3";
    case Encoding::RAW: return "RAW";
  }
  return "RAW";
}

struct ByteSequence {
  std::vector<std::uint8_t> bytes;
  Encoding encoding = Encoding::RAW;

  std::size_t size() const { return bytes.size(); }
  bool operator==(const ByteSequence&) const = default;
};

// RGB image, 8 bits per channel, HWC raster order.
struct ImageTensor {
  static constexpr std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  ImageTensor() = default;
  ImageTensor(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w * channels, 0) {}
  ImageTensor(std::size_t h, std::size_t w, std::vector<std::uint8_t> px) : height(h), width(w), pixels(std::move(px)) {
    validate();
  }

  void validate() const {
    if (height == 0 || width == 0) throw DataError("image has zero extent");
    if (pixels.size() != height * width * channels) {
      throw DataError("image " + std::to_string(height) + "x" + std::to_string(width) + "x3 holds " +
                      std::to_string(pixels.size()) + " values");
    }
  }
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
  bool operator==(const ImageTensor&) const = default;
};

// Mono audio, samples nominally in [-1, 1].
struct AudioClip {
  std::uint32_t sample_rate = 16000;
  std::vector<double> samples;

  bool operator==(const AudioClip&) const = default;
};

enum class WavDepth { U8, I16, I32, F32 };

inline std::size_t bytes_per_sample(WavDepth depth) {
  switch (depth) {
    case WavDepth::U8: return 1;
    case WavDepth::I16: return 2;
    case WavDepth::I32: return 4;
    case WavDepth::F32: return 4;
  }
  return 1;
}

inline Encoding wav_encoding(WavDepth depth) {
  switch (depth) {
    case WavDepth::U8: return Encoding::WAV_U8;
    case WavDepth::I16: return Encoding::WAV_I16;
    case WavDepth::I32: return Encoding::WAV_I32;
    case WavDepth::F32: return Encoding::WAV_F32;
  }
  return Encoding::WAV_U8;
}

// ---------------------------------------------------------------------------
// Checksums

inline std::uint32_t crc32(std::span<const std::uint8_t> data, std::uint32_t crc = 0) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t n = 0; n < 256; ++n) {
      std::uint32_t c = n;
      for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[n] = c;
    }
    return t;
  }();
  crc = ~crc;
  for (std::uint8_t b : data) crc = table[(crc ^ b) & 0xFFu] ^ (crc >> 8);
  return ~crc;
}

inline std::uint32_t adler32(std::span<const std::uint8_t> data) {
  constexpr std::uint32_t mod = 65521;
  std::uint32_t a = 1, b = 0;
  // 5552 is the largest run for which b cannot overflow 32 bits before reduction.
  for (std::size_t i = 0; i < data.size();) {
    const std::size_t end = std::min(data.size(), i + 5552);
    for (; i < end; ++i) {
      a += data[i];
      b += a;
    }
    a %= mod;
    b %= mod;
  }
  return (b << 16) | a;
}

namespace detail {

inline void put_le16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_le32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}
inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}
inline void put_tag(std::vector<std::uint8_t>& out, std::string_view tag) { out.insert(out.end(), tag.begin(), tag.end()); }

inline std::uint16_t get_le16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}
inline std::uint32_t get_le32(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}
inline std::uint32_t get_be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (static_cast<std::uint32_t>(b[at]) << 24) | (static_cast<std::uint32_t>(b[at + 1]) << 16) |
         (static_cast<std::uint32_t>(b[at + 2]) << 8) | static_cast<std::uint32_t>(b[at + 3]);
}

inline void need(std::span<const std::uint8_t> b, std::size_t end, const char* what) {
  if (end > b.size()) throw DataError(std::string("truncated ") + what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Raw dumps

inline ByteSequence encode_fhwc(const ImageTensor& img) {
  img.validate();
  return {img.pixels, Encoding::fHWC};
}

inline ByteSequence encode_fchw(const ImageTensor& img) {
  img.validate();
  const std::size_t plane = img.height * img.width;
  std::vector<std::uint8_t> out(img.pixels.size());
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < ImageTensor::channels; ++c) out[c * plane + i] = img.pixels[i * ImageTensor::channels + c];
  }
  return {std::move(out), Encoding::fCHW};
}

inline ImageTensor decode_fhwc(std::span<const std::uint8_t> bytes, std::size_t height, std::size_t width) {
  if (bytes.size() != height * width * ImageTensor::channels) {
    throw DataError("fHWC stream of " + std::to_string(bytes.size()) + " bytes for " + std::to_string(height) + "x" +
                    std::to_string(width));
  }
  return ImageTensor(height, width, std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
}

inline ImageTensor decode_fchw(std::span<const std::uint8_t> bytes, std::size_t height, std::size_t width) {
  const std::size_t plane = height * width;
  if (bytes.size() != plane * ImageTensor::channels) {
    throw DataError("fCHW stream of " + std::to_string(bytes.size()) + " bytes for " + std::to_string(height) + "x" +
                    std::to_string(width));
  }
  ImageTensor img(height, width);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < ImageTensor::channels; ++c) img.pixels[i * ImageTensor::channels + c] = bytes[c * plane + i];
  }
  return img;
}

// ---------------------------------------------------------------------------
// TIFF
//
// Layout: 8-byte header, one IFD of ten entries at offset 8, the three-value
// BitsPerSample array, then the pixel strip. The header is therefore a fixed
// 140 bytes for every image.

namespace tiff {

inline constexpr std::size_t entry_count = 10;
inline constexpr std::size_t header_length = 8 + 2 + entry_count * 12 + 4 + 6;

enum Tag : std::uint16_t {
  ImageWidth = 256,
  ImageLength = 257,
  BitsPerSample = 258,
  Compression = 259,
  Photometric = 262,
  StripOffsets = 273,
  SamplesPerPixel = 277,
  RowsPerStrip = 278,
  StripByteCounts = 279,
  PlanarConfig = 284,
};

enum Type : std::uint16_t { Byte = 1, Short = 3, Long = 4 };

}  // namespace tiff

inline ByteSequence encode_tiff(const ImageTensor& img) {
  img.validate();
  constexpr auto u32max = std::numeric_limits<std::uint32_t>::max();
  if (img.width > u32max || img.height > u32max || img.pixels.size() > u32max - tiff::header_length) {
    throw EncodingError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                        " exceeds 32-bit TIFF offsets");
  }
  const auto width = static_cast<std::uint32_t>(img.width);
  const auto height = static_cast<std::uint32_t>(img.height);
  const auto strip_bytes = static_cast<std::uint32_t>(img.pixels.size());
  const std::uint32_t bps_offset = 8 + 2 + tiff::entry_count * 12 + 4;
  const std::uint32_t data_offset = bps_offset + 6;

  std::vector<std::uint8_t> out;
  out.reserve(tiff::header_length + img.pixels.size());
  detail::put_tag(out, "II");
  detail::put_le16(out, 42);
  detail::put_le32(out, 8);
  detail::put_le16(out, static_cast<std::uint16_t>(tiff::entry_count));
  auto entry = [&](std::uint16_t tag, std::uint16_t type, std::uint32_t count, std::uint32_t value) {
    detail::put_le16(out, tag);
    detail::put_le16(out, type);
    detail::put_le32(out, count);
    // SHORT values are left-justified within the 4-byte value field.
    if (type == tiff::Short && count == 1) {
      detail::put_le16(out, static_cast<std::uint16_t>(value));
      detail::put_le16(out, 0);
    } else {
      detail::put_le32(out, value);
    }
  };
  entry(tiff::ImageWidth, tiff::Long, 1, width);
  entry(tiff::ImageLength, tiff::Long, 1, height);
  entry(tiff::BitsPerSample, tiff::Short, 3, bps_offset);
  entry(tiff::Compression, tiff::Short, 1, 1);
  entry(tiff::Photometric, tiff::Short, 1, 2);
  entry(tiff::StripOffsets, tiff::Long, 1, data_offset);
  entry(tiff::SamplesPerPixel, tiff::Short, 1, 3);
  entry(tiff::RowsPerStrip, tiff::Long, 1, height);
  entry(tiff::StripByteCounts, tiff::Long, 1, strip_bytes);
  entry(tiff::PlanarConfig, tiff::Short, 1, 1);
  detail::put_le32(out, 0);
  for (int c = 0; c < 3; ++c) detail::put_le16(out, 8);
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return {std::move(out), Encoding::TIFF};
}

// Baseline TIFF reader: 8-bit chunky RGB/RGBA/gray, uncompressed strips, either byte order.
inline ImageTensor decode_tiff(std::span<const std::uint8_t> b) {
  detail::need(b, 8, "TIFF header");
  const bool little = b[0] == 'I' && b[1] == 'I';
  if (!little && !(b[0] == 'M' && b[1] == 'M')) throw DataError("not a TIFF stream");
  auto u16 = [&](std::size_t at) -> std::uint32_t {
    detail::need(b, at + 2, "TIFF field");
    return little ? detail::get_le16(b, at) : static_cast<std::uint32_t>((b[at] << 8) | b[at + 1]);
  };
  auto u32 = [&](std::size_t at) -> std::uint32_t {
    detail::need(b, at + 4, "TIFF field");
    return little ? detail::get_le32(b, at) : detail::get_be32(b, at);
  };
  if (u16(2) != 42) throw DataError("bad TIFF magic");
  const std::size_t ifd = u32(4);
  const std::size_t n = u16(ifd);

  struct Field {
    std::uint32_t type = 0, count = 0;
    std::size_t value_at = 0;
  };
  auto type_size = [](std::uint32_t type) -> std::size_t { return type == tiff::Short ? 2 : type == tiff::Long ? 4 : 1; };
  std::array<std::optional<Field>, 300> fields;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = ifd + 2 + i * 12;
    const std::uint32_t tag = u16(at);
    Field f{u16(at + 2), u32(at + 4), at + 8};
    if (f.count * type_size(f.type) > 4) f.value_at = u32(at + 8);
    if (tag < fields.size()) fields[tag] = f;
  }
  auto value = [&](tiff::Tag tag, std::size_t index, std::optional<std::uint32_t> fallback = {}) -> std::uint32_t {
    const auto& f = fields[tag];
    if (!f) {
      if (fallback) return *fallback;
      throw DataError("TIFF missing tag " + std::to_string(tag));
    }
    if (index >= f->count) throw DataError("TIFF tag " + std::to_string(tag) + " index out of range");
    const std::size_t at = f->value_at + index * type_size(f->type);
    switch (f->type) {
      case tiff::Short: return u16(at);
      case tiff::Long: return u32(at);
      default: detail::need(b, at + 1, "TIFF field"); return b[at];
    }
  };
  const std::size_t width = value(tiff::ImageWidth, 0);
  const std::size_t height = value(tiff::ImageLength, 0);
  const std::size_t spp = value(tiff::SamplesPerPixel, 0, 1);
  if (value(tiff::Compression, 0, 1) != 1) throw DataError("compressed TIFF is not supported");
  if (value(tiff::PlanarConfig, 0, 1) != 1) throw DataError("planar TIFF is not supported");
  const std::size_t bps_count = fields[tiff::BitsPerSample] ? fields[tiff::BitsPerSample]->count : 1;
  for (std::size_t c = 0; c < spp; ++c) {
    if (value(tiff::BitsPerSample, std::min(c, bps_count - 1), 1) != 8) {
      throw DataError("TIFF bit depth other than 8 is not supported");
    }
  }
  if (spp != 1 && spp != 3 && spp != 4) throw DataError("TIFF with " + std::to_string(spp) + " samples per pixel");
  const std::size_t strips = fields[tiff::StripOffsets] ? fields[tiff::StripOffsets]->count : 0;
  std::vector<std::uint8_t> raw;
  raw.reserve(width * height * spp);
  for (std::size_t s = 0; s < strips; ++s) {
    const std::size_t off = value(tiff::StripOffsets, s);
    const std::size_t len = value(tiff::StripByteCounts, s);
    detail::need(b, off + len, "TIFF strip");
    raw.insert(raw.end(), b.begin() + static_cast<std::ptrdiff_t>(off), b.begin() + static_cast<std::ptrdiff_t>(off + len));
  }
  if (raw.size() < width * height * spp) throw DataError("TIFF strips shorter than image");
  ImageTensor img(height, width);
  for (std::size_t i = 0; i < width * height; ++i) {
    for (std::size_t c = 0; c < 3; ++c) img.pixels[i * 3 + c] = raw[i * spp + (spp == 1 ? 0 : c)];
  }
  return img;
}

// ---------------------------------------------------------------------------
// PNG

inline constexpr std::array<std::uint8_t, 8> png_signature = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};

// Applies PNG filter `type` (0 None, 1 Sub, 2 Up) to one scanline. `prior`
// is the previous raw scanline, empty for the first row.
inline std::vector<std::uint8_t> png_filter_row(int type, std::span<const std::uint8_t> row,
                                                std::span<const std::uint8_t> prior, std::size_t bpp) {
  std::vector<std::uint8_t> out(row.begin(), row.end());
  switch (type) {
    case 0: break;
    case 1:
      for (std::size_t i = bpp; i < row.size(); ++i) out[i] = static_cast<std::uint8_t>(row[i] - row[i - bpp]);
      break;
    case 2:
      if (!prior.empty()) {
        for (std::size_t i = 0; i < row.size(); ++i) out[i] = static_cast<std::uint8_t>(row[i] - prior[i]);
      }
      break;
    default: throw EncodingError("PNG filter type " + std::to_string(type) + " not in {0, 1, 2}");
  }
  return out;
}

namespace detail {

inline void put_png_chunk(std::vector<std::uint8_t>& out, std::string_view type, std::span<const std::uint8_t> data) {
  if (data.size() > 0x7FFFFFFFu) throw EncodingError("PNG chunk exceeds 2^31 - 1 bytes");
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t crc_start = out.size();
  put_tag(out, type);
  out.insert(out.end(), data.begin(), data.end());
  put_be32(out, crc32(std::span<const std::uint8_t>(out).subspan(crc_start)));
}

// zlib container holding only stored deflate blocks.
inline std::vector<std::uint8_t> zlib_stored(std::span<const std::uint8_t> raw) {
  constexpr std::size_t max_block = 65535;
  std::vector<std::uint8_t> out;
  const std::size_t blocks = std::max<std::size_t>(1, (raw.size() + max_block - 1) / max_block);
  out.reserve(raw.size() + blocks * 5 + 6);
  out.push_back(0x78);  // CM = 8, CINFO = 7
  out.push_back(0x01);  // FLEVEL = 0, FCHECK makes 0x7801 divisible by 31
  std::size_t pos = 0;
  for (std::size_t i = 0; i < blocks; ++i) {
    const std::size_t len = std::min(max_block, raw.size() - pos);
    out.push_back(i + 1 == blocks ? 0x01 : 0x00);
    put_le16(out, static_cast<std::uint16_t>(len));
    put_le16(out, static_cast<std::uint16_t>(~len));
    out.insert(out.end(), raw.begin() + static_cast<std::ptrdiff_t>(pos), raw.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  put_be32(out, adler32(raw));
  return out;
}

}  // namespace detail

// Filtered scanlines (one filter byte per row) exactly as placed in the deflate stream.
inline std::vector<std::uint8_t> png_scanlines(const ImageTensor& img, int filter_type) {
  const std::size_t stride = img.width * ImageTensor::channels;
  std::vector<std::uint8_t> raw;
  raw.reserve(img.height * (stride + 1));
  std::span<const std::uint8_t> pixels(img.pixels);
  for (std::size_t y = 0; y < img.height; ++y) {
    auto row = pixels.subspan(y * stride, stride);
    auto prior = y ? pixels.subspan((y - 1) * stride, stride) : std::span<const std::uint8_t>{};
    raw.push_back(static_cast<std::uint8_t>(filter_type));
    auto filtered = png_filter_row(filter_type, row, prior, ImageTensor::channels);
    raw.insert(raw.end(), filtered.begin(), filtered.end());
  }
  return raw;
}

inline ByteSequence encode_png(const ImageTensor& img, int filter_type = 0) {
  img.validate();
  if (img.width > 0x7FFFFFFFu || img.height > 0x7FFFFFFFu) throw EncodingError("image exceeds PNG dimension limit");
  std::vector<std::uint8_t> out(png_signature.begin(), png_signature.end());
  std::vector<std::uint8_t> ihdr;
  detail::put_be32(ihdr, static_cast<std::uint32_t>(img.width));
  detail::put_be32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // depth 8, truecolor, deflate, adaptive filtering, no interlace
  detail::put_png_chunk(out, "IHDR", ihdr);
  detail::put_png_chunk(out, "IDAT", detail::zlib_stored(png_scanlines(img, filter_type)));
  detail::put_png_chunk(out, "IEND", {});
  return {std::move(out), Encoding::PNG};
}

struct PngChunk {
  std::string type;
  std::span<const std::uint8_t> data;
};

// Splits a PNG stream into chunks, verifying the signature and every CRC.
inline std::vector<PngChunk> png_chunks(std::span<const std::uint8_t> b) {
  if (b.size() < 8 || !std::equal(png_signature.begin(), png_signature.end(), b.begin())) {
    throw DataError("missing PNG signature");
  }
  std::vector<PngChunk> chunks;
  std::size_t pos = 8;
  while (pos < b.size()) {
    detail::need(b, pos + 8, "PNG chunk header");
    const std::size_t len = detail::get_be32(b, pos);
    detail::need(b, pos + 12 + len, "PNG chunk");
    const auto crc = detail::get_be32(b, pos + 8 + len);
    if (crc32(b.subspan(pos + 4, len + 4)) != crc) throw DataError("PNG chunk CRC mismatch");
    chunks.push_back({std::string(b.begin() + static_cast<std::ptrdiff_t>(pos + 4), b.begin() + static_cast<std::ptrdiff_t>(pos + 8)),
                      b.subspan(pos + 8, len)});
    pos += 12 + len;
    if (chunks.back().type == "IEND") break;
  }
  return chunks;
}

namespace detail {

inline std::uint8_t paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
  if (pb <= pc) return static_cast<std::uint8_t>(b);
  return static_cast<std::uint8_t>(c);
}

}  // namespace detail

// 8-bit non-interlaced PNG reader (gray, gray+alpha, RGB, RGBA); alpha is dropped.
inline ImageTensor decode_png(std::span<const std::uint8_t> b) {
  const auto chunks = png_chunks(b);
  if (chunks.empty() || chunks.front().type != "IHDR" || chunks.front().data.size() != 13) {
    throw DataError("PNG must start with IHDR");
  }
  const auto& ihdr = chunks.front().data;
  const std::size_t width = detail::get_be32(ihdr, 0);
  const std::size_t height = detail::get_be32(ihdr, 4);
  const int depth = ihdr[8], color = ihdr[9], interlace = ihdr[12];
  if (depth != 8) throw DataError("PNG bit depth " + std::to_string(depth) + " is not supported");
  if (interlace != 0) throw DataError("interlaced PNG is not supported");
  std::size_t bpp = 0;
  switch (color) {
    case 0: bpp = 1; break;
    case 2: bpp = 3; break;
    case 4: bpp = 2; break;
    case 6: bpp = 4; break;
    default: throw DataError("PNG color type " + std::to_string(color) + " is not supported");
  }
  if (width == 0 || height == 0) throw DataError("PNG has zero extent");
  std::vector<std::uint8_t> compressed;
  for (const auto& c : chunks) {
    if (c.type == "IDAT") compressed.insert(compressed.end(), c.data.begin(), c.data.end());
  }
  const std::size_t stride = width * bpp;
  std::vector<std::uint8_t> raw(height * (stride + 1));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, compressed.data(), static_cast<uLong>(compressed.size())) != Z_OK ||
      raw_len != raw.size()) {
    throw DataError("corrupt PNG image data");
  }
  std::vector<std::uint8_t> pixels(height * stride);
  for (std::size_t y = 0; y < height; ++y) {
    const int filter = raw[y * (stride + 1)];
    const std::uint8_t* in = raw.data() + y * (stride + 1) + 1;
    std::uint8_t* cur = pixels.data() + y * stride;
    const std::uint8_t* up = y ? cur - stride : nullptr;
    for (std::size_t i = 0; i < stride; ++i) {
      const int a = i >= bpp ? cur[i - bpp] : 0;
      const int u = up ? up[i] : 0;
      const int c = (up && i >= bpp) ? up[i - bpp] : 0;
      int pred = 0;
      switch (filter) {
        case 0: pred = 0; break;
        case 1: pred = a; break;
        case 2: pred = u; break;
        case 3: pred = (a + u) / 2; break;
        case 4: pred = detail::paeth(a, u, c); break;
        default: throw DataError("PNG filter type " + std::to_string(filter));
      }
      cur[i] = static_cast<std::uint8_t>(in[i] + pred);
    }
  }
  ImageTensor img(height, width);
  for (std::size_t i = 0; i < width * height; ++i) {
    for (std::size_t c = 0; c < 3; ++c) img.pixels[i * 3 + c] = pixels[i * bpp + (bpp < 3 ? 0 : c)];
  }
  return img;
}

// ---------------------------------------------------------------------------
// WAV

inline std::size_t wav_header_length(WavDepth depth) { return depth == WavDepth::F32 ? 58 : 44; }

namespace detail {

inline std::int64_t quantize(double x, double scale, std::int64_t lo, std::int64_t hi) {
  return std::clamp(static_cast<std::int64_t>(std::llround(x * scale)), lo, hi);
}

}  // namespace detail

// Mono RIFF/WAVE. Integer depths use PCM (format 1) with a 44-byte header;
// F32 uses IEEE float (format 3) with an 18-byte fmt chunk and a fact chunk,
// for a 58-byte header. Samples outside [-1, 1] are clamped with a warning.
inline ByteSequence encode_wav(const AudioClip& clip, WavDepth depth) {
  if (clip.sample_rate == 0) throw EncodingError("sample rate must be positive");
  const std::size_t width = bytes_per_sample(depth);
  const std::size_t payload = clip.samples.size() * width;
  if (payload > 0xFFFFFFFFull - wav_header_length(depth)) throw EncodingError("audio exceeds RIFF size limit");
  std::size_t clamped = 0;
  for (double s : clip.samples) clamped += (s < -1.0 || s > 1.0 || std::isnan(s)) ? 1 : 0;
  if (clamped) std::cerr << "warning: clamped " << clamped << " WAV samples outside [-1, 1]\n";

  std::vector<std::uint8_t> out;
  out.reserve(wav_header_length(depth) + payload);
  const bool is_float = depth == WavDepth::F32;
  detail::put_tag(out, "RIFF");
  detail::put_le32(out, static_cast<std::uint32_t>(wav_header_length(depth) - 8 + payload));
  detail::put_tag(out, "WAVE");
  detail::put_tag(out, "fmt ");
  detail::put_le32(out, is_float ? 18 : 16);
  detail::put_le16(out, is_float ? 3 : 1);
  detail::put_le16(out, 1);
  detail::put_le32(out, clip.sample_rate);
  detail::put_le32(out, static_cast<std::uint32_t>(clip.sample_rate * width));
  detail::put_le16(out, static_cast<std::uint16_t>(width));
  detail::put_le16(out, static_cast<std::uint16_t>(width * 8));
  if (is_float) {
    detail::put_le16(out, 0);
    detail::put_tag(out, "fact");
    detail::put_le32(out, 4);
    detail::put_le32(out, static_cast<std::uint32_t>(clip.samples.size()));
  }
  detail::put_tag(out, "data");
  detail::put_le32(out, static_cast<std::uint32_t>(payload));
  for (double raw : clip.samples) {
    const double s = std::isnan(raw) ? 0.0 : std::clamp(raw, -1.0, 1.0);
    switch (depth) {
      case WavDepth::U8:
        out.push_back(static_cast<std::uint8_t>(detail::quantize(s, 128.0, -128, 127) + 128));
        break;
      case WavDepth::I16:
        detail::put_le16(out, static_cast<std::uint16_t>(detail::quantize(s, 32768.0, -32768, 32767)));
        break;
      case WavDepth::I32:
        detail::put_le32(out, static_cast<std::uint32_t>(
                                  detail::quantize(s, 2147483648.0, std::numeric_limits<std::int32_t>::min(),
                                                   std::numeric_limits<std::int32_t>::max())));
        break;
      case WavDepth::F32:
        detail::put_le32(out, std::bit_cast<std::uint32_t>(static_cast<float>(s)));
        break;
    }
  }
  return {std::move(out), wav_encoding(depth)};
}

struct DecodedWav {
  AudioClip clip;
  WavDepth depth = WavDepth::I16;
};

inline DecodedWav decode_wav(std::span<const std::uint8_t> b) {
  detail::need(b, 12, "RIFF header");
  if (std::memcmp(b.data(), "RIFF", 4) != 0 || std::memcmp(b.data() + 8, "WAVE", 4) != 0) {
    throw DataError("not a RIFF/WAVE stream");
  }
  std::optional<std::uint16_t> format, channels, bits;
  std::uint32_t rate = 0;
  std::span<const std::uint8_t> data;
  bool have_data = false;
  for (std::size_t pos = 12; pos + 8 <= b.size();) {
    const std::size_t len = detail::get_le32(b, pos + 4);
    detail::need(b, pos + 8 + len, "WAV chunk");
    if (std::memcmp(b.data() + pos, "fmt ", 4) == 0) {
      if (len < 16) throw DataError("WAV fmt chunk too short");
      format = detail::get_le16(b, pos + 8);
      channels = detail::get_le16(b, pos + 10);
      rate = detail::get_le32(b, pos + 12);
      bits = detail::get_le16(b, pos + 22);
      if (*format == 0xFFFE && len >= 26) format = detail::get_le16(b, pos + 32);
    } else if (std::memcmp(b.data() + pos, "data", 4) == 0) {
      data = b.subspan(pos + 8, len);
      have_data = true;
    }
    pos += 8 + len + (len & 1);
  }
  if (!format || !have_data) throw DataError("WAV missing fmt or data chunk");
  if (*channels != 1) throw DataError("only mono WAV is supported, got " + std::to_string(*channels) + " channels");
  DecodedWav out;
  out.clip.sample_rate = rate;
  if (*format == 3 && *bits == 32) {
    out.depth = WavDepth::F32;
  } else if (*format == 1 && *bits == 8) {
    out.depth = WavDepth::U8;
  } else if (*format == 1 && *bits == 16) {
    out.depth = WavDepth::I16;
  } else if (*format == 1 && *bits == 32) {
    out.depth = WavDepth::I32;
  } else {
    throw DataError("unsupported WAV format " + std::to_string(*format) + " at " + std::to_string(*bits) + " bits");
  }
  const std::size_t width = bytes_per_sample(out.depth);
  const std::size_t count = data.size() / width;
  out.clip.samples.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t at = i * width;
    switch (out.depth) {
      case WavDepth::U8: out.clip.samples[i] = (static_cast<int>(data[at]) - 128) / 128.0; break;
      case WavDepth::I16:
        out.clip.samples[i] = static_cast<std::int16_t>(detail::get_le16(data, at)) / 32768.0;
        break;
      case WavDepth::I32:
        out.clip.samples[i] = static_cast<std::int32_t>(detail::get_le32(data, at)) / 2147483648.0;
        break;
      case WavDepth::F32: out.clip.samples[i] = std::bit_cast<float>(detail::get_le32(data, at)); break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ingestion

inline Encoding detect_encoding(std::span<const std::uint8_t> b) {
  auto starts = [&](std::initializer_list<std::uint8_t> magic) {
    return b.size() >= magic.size() && std::equal(magic.begin(), magic.end(), b.begin());
  };
  if (starts({0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A})) return Encoding::PNG;
  if (starts({'I', 'I', 42, 0}) || starts({'M', 'M', 0, 42})) return Encoding::TIFF;
  if (starts({0xFF, 0xD8, 0xFF})) return Encoding::JPEG;
  if (b.size() >= 12 && starts({'R', 'I', 'F', 'F'}) && std::memcmp(b.data() + 8, "WAVE", 4) == 0) {
    try {
      return wav_encoding(decode_wav(b).depth);
    } catch (const DataError&) {
      return Encoding::RAW;
    }
  }
  if (starts({'I', 'D', '3'})) return Encoding::MP3;
  if (b.size() >= 2 && b[0] == 0xFF && (b[1] & 0xE0) == 0xE0 && (b[1] & 0x06) != 0) return Encoding::MP3;
  return Encoding::RAW;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading " + path.string());
  return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

// File bytes used directly as tokens, tagged by magic number.
inline ByteSequence ingest_file(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  if (bytes.empty()) throw DataError("empty input: " + path.string());
  const auto tag = detect_encoding(bytes);
  return {std::move(bytes), tag};
}

// Decodes an image file (PNG or TIFF) into RGB.
inline ImageTensor decode_image(std::span<const std::uint8_t> bytes) {
  switch (detect_encoding(bytes)) {
    case Encoding::PNG: return decode_png(bytes);
    case Encoding::TIFF: return decode_tiff(bytes);
    default: throw DataError("not a decodable image (PNG or TIFF expected)");
  }
}

}  // namespace byteformer
