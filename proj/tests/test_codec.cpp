#include <gtest/gtest.h>

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <limits>

#include "byteformer/codec.hpp"
#include "byteformer/random.hpp"

using namespace byteformer;

namespace {

ImageTensor random_image(Rng& rng, std::size_t h, std::size_t w) {
  ImageTensor img(h, w);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(bounded(rng, 256));
  return img;
}

// Samples drawn from the exact quantization grid of `depth`, so a round trip
// is lossless.
AudioClip grid_clip(Rng& rng, std::size_t n, WavDepth depth) {
  AudioClip clip;
  clip.samples.resize(n);
  for (auto& s : clip.samples) {
    switch (depth) {
      case WavDepth::U8: s = (static_cast<double>(bounded(rng, 256)) - 128.0) / 128.0; break;
      case WavDepth::I16: s = (static_cast<double>(bounded(rng, 65536)) - 32768.0) / 32768.0; break;
      case WavDepth::I32: s = (static_cast<double>(bounded(rng, 1ull << 32)) - 2147483648.0) / 2147483648.0; break;
      case WavDepth::F32: s = static_cast<float>(uniform01(rng) * 2.0 - 1.0); break;
    }
  }
  return clip;
}

std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return b[at] | (b[at + 1] << 8) | (b[at + 2] << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}
std::uint16_t le16(const std::vector<std::uint8_t>& b, std::size_t at) { return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8)); }

std::vector<std::uint8_t> bytes_of(std::string_view s) { return {s.begin(), s.end()}; }

// Concatenated IDAT payloads inflated with zlib.
std::vector<std::uint8_t> inflate_idat(const ByteSequence& png, std::size_t expected) {
  std::vector<std::uint8_t> z;
  for (const auto& c : png_chunks(png.bytes)) {
    if (c.type == "IDAT") z.insert(z.end(), c.data.begin(), c.data.end());
  }
  std::vector<std::uint8_t> out(expected + 16);
  uLongf len = out.size();
  EXPECT_EQ(uncompress(out.data(), &len, z.data(), z.size()), Z_OK);
  out.resize(len);
  return out;
}

class TempDir {
 public:
  TempDir() {
    path_ = std::filesystem::temp_directory_path() / ("bf_codec_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                                      "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace

TEST(Raw, FhwcLength) {
  ImageTensor img(224, 224);
  EXPECT_EQ(encode_fhwc(img).size(), 150528u);
  EXPECT_EQ(encode_fchw(img).size(), 150528u);
  EXPECT_EQ(encode_fhwc(img).encoding, Encoding::fHWC);
}

TEST(Raw, SinglePixelIsIdentity) {
  ImageTensor img(1, 1, {10, 20, 30});
  EXPECT_EQ(encode_fhwc(img).bytes, (std::vector<std::uint8_t>{10, 20, 30}));
  EXPECT_EQ(encode_fchw(img).bytes, (std::vector<std::uint8_t>{10, 20, 30}));
}

TEST(Raw, ChannelOrder) {
  ImageTensor img(2, 1, {1, 2, 3, 4, 5, 6});  // r0 g0 b0 r1 g1 b1
  EXPECT_EQ(encode_fhwc(img).bytes, (std::vector<std::uint8_t>{1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(encode_fchw(img).bytes, (std::vector<std::uint8_t>{1, 4, 2, 5, 3, 6}));
}

TEST(Raw, InvalidImageRejected) {
  ImageTensor img;
  img.height = 2;
  img.width = 2;
  img.pixels.assign(5, 0);
  EXPECT_THROW(encode_fhwc(img), DataError);
  EXPECT_THROW(ImageTensor(0, 3, {}), DataError);
}

TEST(Raw, RoundTrips) {
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto img = random_image(rng, 1 + bounded(rng, 20), 1 + bounded(rng, 20));
    EXPECT_EQ(decode_fhwc(encode_fhwc(img).bytes, img.height, img.width), img);
    EXPECT_EQ(decode_fchw(encode_fchw(img).bytes, img.height, img.width), img);
  }
}

TEST(Checksum, KnownVectors) {
  EXPECT_EQ(crc32(bytes_of("123456789")), 0xCBF43926u);
  EXPECT_EQ(adler32(bytes_of("Wikipedia")), 0x11E60398u);
  EXPECT_EQ(crc32(std::vector<std::uint8_t>{}), 0u);
  EXPECT_EQ(adler32(std::vector<std::uint8_t>{}), 1u);
}

TEST(Checksum, MatchesZlib) {
  Rng rng(2);
  std::vector<std::uint8_t> data(100000);
  for (auto& b : data) b = static_cast<std::uint8_t>(bounded(rng, 256));
  EXPECT_EQ(crc32(data), ::crc32(0, data.data(), static_cast<uInt>(data.size())));
  EXPECT_EQ(adler32(data), ::adler32(1, data.data(), static_cast<uInt>(data.size())));
}

TEST(Tiff, HeaderLengthPinned) {
  Rng rng(3);
  const auto a = encode_tiff(random_image(rng, 224, 224));
  const auto b = encode_tiff(random_image(rng, 224, 224));
  EXPECT_EQ(a.size(), 150528u + 140u);
  EXPECT_EQ(b.size(), a.size());
  EXPECT_EQ(a.encoding, Encoding::TIFF);
}

TEST(Tiff, Deterministic) {
  Rng rng(4);
  const auto img = random_image(rng, 17, 9);
  EXPECT_EQ(encode_tiff(img), encode_tiff(img));
}

TEST(Tiff, RequiredTags) {
  Rng rng(5);
  const auto img = random_image(rng, 6, 7);
  const auto b = encode_tiff(img).bytes;
  ASSERT_EQ(b[0], 'I');
  ASSERT_EQ(b[1], 'I');
  ASSERT_EQ(le16(b, 2), 42);
  const std::size_t ifd = le32(b, 4);
  const std::size_t n = le16(b, ifd);
  std::map<std::uint16_t, std::pair<std::uint16_t, std::uint32_t>> tags;  // tag -> (type, value/offset)
  std::uint16_t last = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t e = ifd + 2 + i * 12;
    const std::uint16_t tag = le16(b, e);
    EXPECT_GT(tag, last) << "IFD entries must be sorted";
    last = tag;
    const std::uint16_t type = le16(b, e + 2);
    tags[tag] = {type, type == 3 && le32(b, e + 4) == 1 ? le16(b, e + 8) : le32(b, e + 8)};
  }
  EXPECT_EQ(tags.at(256).second, 7u);
  EXPECT_EQ(tags.at(257).second, 6u);
  EXPECT_EQ(tags.at(259).second, 1u);
  EXPECT_EQ(tags.at(262).second, 2u);
  EXPECT_EQ(tags.at(277).second, 3u);
  EXPECT_EQ(tags.at(278).second, 6u);
  EXPECT_EQ(tags.at(279).second, 6u * 7u * 3u);
  const std::size_t bps = tags.at(258).second;
  EXPECT_EQ(le16(b, bps), 8);
  EXPECT_EQ(le16(b, bps + 2), 8);
  EXPECT_EQ(le16(b, bps + 4), 8);
  const std::size_t strip = tags.at(273).second;
  EXPECT_EQ(strip, tiff::header_length);
  EXPECT_TRUE(std::equal(img.pixels.begin(), img.pixels.end(), b.begin() + static_cast<std::ptrdiff_t>(strip)));
}

TEST(Tiff, RoundTrips) {
  Rng rng(6);
  for (int i = 0; i < 50; ++i) {
    const auto img = random_image(rng, 1 + bounded(rng, 30), 1 + bounded(rng, 30));
    EXPECT_EQ(decode_tiff(encode_tiff(img).bytes), img);
  }
}

TEST(Tiff, TruncatedStreamRejected) {
  Rng rng(7);
  auto b = encode_tiff(random_image(rng, 4, 4)).bytes;
  b.resize(b.size() - 1);
  EXPECT_THROW(decode_tiff(b), DataError);
}

TEST(Png, SubFilterOnSingleChannelRow) {
  const std::vector<std::uint8_t> row{10, 20, 35};
  EXPECT_EQ(png_filter_row(1, row, {}, 1), (std::vector<std::uint8_t>{10, 10, 15}));
}

TEST(Png, FilterArithmeticWraps) {
  const std::vector<std::uint8_t> row{200, 10};
  const std::vector<std::uint8_t> prior{250, 5};
  EXPECT_EQ(png_filter_row(1, row, {}, 1), (std::vector<std::uint8_t>{200, 66}));
  EXPECT_EQ(png_filter_row(2, row, prior, 1), (std::vector<std::uint8_t>{206, 5}));
  EXPECT_EQ(png_filter_row(2, row, {}, 1), row);
  EXPECT_THROW(png_filter_row(3, row, prior, 1), EncodingError);
}

TEST(Png, PayloadCountsAt224) {
  Rng rng(8);
  const auto img = random_image(rng, 224, 224);
  const auto png = encode_png(img, 0);
  const auto chunks = png_chunks(png.bytes);
  ASSERT_EQ(chunks.size(), 3u);
  EXPECT_EQ(chunks[0].type, "IHDR");
  EXPECT_EQ(chunks[1].type, "IDAT");
  EXPECT_EQ(chunks[2].type, "IEND");
  const auto raw = inflate_idat(png, 224 + 150528);
  ASSERT_EQ(raw.size(), 224u + 150528u);
  for (std::size_t y = 0; y < 224; ++y) {
    EXPECT_EQ(raw[y * (224 * 3 + 1)], 0);
    EXPECT_TRUE(std::equal(raw.begin() + static_cast<std::ptrdiff_t>(y * 673 + 1), raw.begin() + static_cast<std::ptrdiff_t>((y + 1) * 673),
                           img.pixels.begin() + static_cast<std::ptrdiff_t>(y * 672)));
  }
}

TEST(Png, StoredBlocksOnly) {
  Rng rng(9);
  const auto png = encode_png(random_image(rng, 224, 224), 0);
  const auto idat = png_chunks(png.bytes)[1].data;
  EXPECT_EQ((idat[0] * 256 + idat[1]) % 31, 0);
  EXPECT_EQ(idat[0] & 0x0F, 8);
  std::size_t pos = 2, payload = 0;
  bool final = false;
  while (!final) {
    const auto header = idat[pos];
    final = header & 1;
    EXPECT_EQ((header >> 1) & 3, 0) << "non-stored deflate block";
    const std::size_t len = idat[pos + 1] | (idat[pos + 2] << 8);
    const std::size_t nlen = idat[pos + 3] | (idat[pos + 4] << 8);
    EXPECT_EQ(len ^ 0xFFFF, nlen);
    payload += len;
    pos += 5 + len;
  }
  EXPECT_EQ(payload, 224u + 150528u);
  EXPECT_EQ(pos + 4, idat.size());
}

TEST(Png, FilterBytesPerRow) {
  Rng rng(10);
  const auto img = random_image(rng, 5, 4);
  for (int f : {0, 1, 2}) {
    const auto raw = inflate_idat(encode_png(img, f), 5 * 13);
    ASSERT_EQ(raw.size(), 5u * 13u);
    for (std::size_t y = 0; y < 5; ++y) EXPECT_EQ(raw[y * 13], f);
  }
}

TEST(Png, RoundTripsAllFilters) {
  Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    const auto img = random_image(rng, 1 + bounded(rng, 30), 1 + bounded(rng, 30));
    for (int f : {0, 1, 2}) EXPECT_EQ(decode_png(encode_png(img, f).bytes), img);
  }
}

TEST(Png, CorruptedCrcRejected) {
  Rng rng(12);
  auto b = encode_png(random_image(rng, 3, 3)).bytes;
  b[40] ^= 0xFF;
  EXPECT_THROW(png_chunks(b), DataError);
  EXPECT_THROW(decode_png(b), DataError);
}

TEST(Png, Deterministic) {
  Rng rng(13);
  const auto img = random_image(rng, 8, 8);
  EXPECT_EQ(encode_png(img, 1), encode_png(img, 1));
}

TEST(Wav, LengthsAt16000Samples) {
  AudioClip clip;
  clip.samples.assign(16000, 0.25);
  EXPECT_EQ(encode_wav(clip, WavDepth::U8).size(), 16044u);
  EXPECT_EQ(encode_wav(clip, WavDepth::I16).size(), 32044u);
  EXPECT_EQ(encode_wav(clip, WavDepth::I32).size(), 64044u);
  EXPECT_EQ(encode_wav(clip, WavDepth::F32).size(), 64058u);
}

TEST(Wav, SilenceU8IsMidpoint) {
  AudioClip clip;
  clip.samples.assign(100, 0.0);
  const auto b = encode_wav(clip, WavDepth::U8).bytes;
  for (std::size_t i = 44; i < b.size(); ++i) EXPECT_EQ(b[i], 128);
}

TEST(Wav, HeaderFields) {
  AudioClip clip;
  clip.samples.assign(10, 0.0);
  const auto pcm = encode_wav(clip, WavDepth::I16).bytes;
  EXPECT_EQ(std::string(pcm.begin(), pcm.begin() + 4), "RIFF");
  EXPECT_EQ(le32(pcm, 4), pcm.size() - 8);
  EXPECT_EQ(le16(pcm, 20), 1);
  EXPECT_EQ(le16(pcm, 22), 1);
  EXPECT_EQ(le32(pcm, 24), 16000u);
  EXPECT_EQ(le16(pcm, 34), 16);
  EXPECT_EQ(le32(pcm, 40), 20u);
  const auto flt = encode_wav(clip, WavDepth::F32).bytes;
  EXPECT_EQ(le16(flt, 20), 3);
  EXPECT_EQ(std::string(flt.begin() + 38, flt.begin() + 42), "fact");
  EXPECT_EQ(le32(flt, 46), 10u);
  EXPECT_EQ(std::string(flt.begin() + 50, flt.begin() + 54), "data");
}

TEST(Wav, FullScaleMapping) {
  AudioClip clip;
  clip.samples = {-1.0, 1.0, 0.5};
  const auto u8 = encode_wav(clip, WavDepth::U8).bytes;
  EXPECT_EQ(u8[44], 0);
  EXPECT_EQ(u8[45], 255);
  EXPECT_EQ(u8[46], 192);
  const auto i16 = encode_wav(clip, WavDepth::I16).bytes;
  EXPECT_EQ(static_cast<std::int16_t>(le16(i16, 44)), -32768);
  EXPECT_EQ(static_cast<std::int16_t>(le16(i16, 46)), 32767);
  EXPECT_EQ(static_cast<std::int16_t>(le16(i16, 48)), 16384);
  const auto i32 = encode_wav(clip, WavDepth::I32).bytes;
  EXPECT_EQ(static_cast<std::int32_t>(le32(i32, 44)), std::numeric_limits<std::int32_t>::min());
  EXPECT_EQ(static_cast<std::int32_t>(le32(i32, 48)), std::numeric_limits<std::int32_t>::max());
}

TEST(Wav, OutOfRangeClampsWithWarning) {
  AudioClip clip;
  clip.samples = {1.5, -3.0, 0.0};
  ::testing::internal::CaptureStderr();
  const auto b = encode_wav(clip, WavDepth::I16).bytes;
  const std::string err = ::testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("clamped 2"), std::string::npos) << err;
  EXPECT_EQ(static_cast<std::int16_t>(le16(b, 44)), 32767);
  EXPECT_EQ(static_cast<std::int16_t>(le16(b, 46)), -32768);
}

TEST(Wav, ZeroSampleRateRejected) {
  AudioClip clip;
  clip.sample_rate = 0;
  EXPECT_THROW(encode_wav(clip, WavDepth::U8), EncodingError);
}

TEST(Wav, RoundTripsEveryDepth) {
  Rng rng(14);
  for (auto depth : {WavDepth::U8, WavDepth::I16, WavDepth::I32, WavDepth::F32}) {
    for (int i = 0; i < 50; ++i) {
      const auto clip = grid_clip(rng, 1 + bounded(rng, 400), depth);
      const auto decoded = decode_wav(encode_wav(clip, depth).bytes);
      EXPECT_EQ(decoded.depth, depth);
      EXPECT_EQ(decoded.clip, clip);
    }
  }
}

TEST(Ingest, DetectsMagicNumbers) {
  Rng rng(15);
  const auto img = random_image(rng, 2, 2);
  AudioClip clip;
  clip.samples = {0.0, 0.5};
  EXPECT_EQ(detect_encoding(encode_png(img).bytes), Encoding::PNG);
  EXPECT_EQ(detect_encoding(encode_tiff(img).bytes), Encoding::TIFF);
  EXPECT_EQ(detect_encoding(encode_wav(clip, WavDepth::U8).bytes), Encoding::WAV_U8);
  EXPECT_EQ(detect_encoding(encode_wav(clip, WavDepth::F32).bytes), Encoding::WAV_F32);
  EXPECT_EQ(detect_encoding(std::vector<std::uint8_t>{0xFF, 0xD8, 0xFF, 0xE0}), Encoding::JPEG);
  EXPECT_EQ(detect_encoding(bytes_of("ID3\x03")), Encoding::MP3);
  EXPECT_EQ(detect_encoding(bytes_of("hello")), Encoding::RAW);
}

TEST(Ingest, FileRoundTrip) {
  TempDir dir;
  Rng rng(16);
  const auto png = encode_png(random_image(rng, 3, 5));
  write_file_bytes(dir.path() / "a.png", png.bytes);
  const auto seq = ingest_file(dir.path() / "a.png");
  EXPECT_EQ(seq.encoding, Encoding::PNG);
  EXPECT_EQ(seq.bytes, png.bytes);
}

TEST(Ingest, EmptyFileIsError) {
  TempDir dir;
  write_file_bytes(dir.path() / "empty.bin", std::vector<std::uint8_t>{});
  try {
    ingest_file(dir.path() / "empty.bin");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("empty input"), std::string::npos);
  }
}

TEST(Ingest, MissingFileIsIoError) {
  EXPECT_THROW(ingest_file("/nonexistent/definitely/missing.bin"), IoError);
}

TEST(Ingest, DecodeImageDispatch) {
  Rng rng(17);
  const auto img = random_image(rng, 4, 3);
  EXPECT_EQ(decode_image(encode_png(img, 2).bytes), img);
  EXPECT_EQ(decode_image(encode_tiff(img).bytes), img);
  EXPECT_THROW(decode_image(encode_fhwc(img).bytes), DataError);
}
