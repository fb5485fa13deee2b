#pragma once

// Binary checkpoint: "BFCK", u32 version, u32-length config text, u32 tensor
// count, then per tensor u32 name length, name, u32 rank, u32 dims and
// little-endian f32 values. docs/checkpoint.md has the byte layout.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "byteformer/errors.hpp"
#include "byteformer/tensor.hpp"

namespace byteformer {

inline constexpr char checkpoint_magic[4] = {'B', 'F', 'C', 'K'};
inline constexpr std::uint32_t checkpoint_version = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::string config_text;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline std::uint32_t narrow_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFull) throw EncodingError(std::string(what) + " exceeds 32-bit checkpoint field");
  return static_cast<std::uint32_t>(v);
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  float f32() {
    return std::bit_cast<float>(u32("tensor data"));
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw DataError(std::string("truncated checkpoint while reading ") + what);
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(checkpoint_magic, checkpoint_magic + 4);
  detail::put_u32(out, checkpoint_version);
  detail::put_u32(out, detail::narrow_u32(ckpt.config_text.size(), "config text"));
  out.insert(out.end(), ckpt.config_text.begin(), ckpt.config_text.end());
  detail::put_u32(out, detail::narrow_u32(ckpt.tensors.size(), "tensor count"));
  for (const auto& t : ckpt.tensors) {
    if (shape_numel(t.shape) != t.values.size()) throw ShapeError("checkpoint tensor " + t.name + " size mismatch");
    detail::put_u32(out, detail::narrow_u32(t.name.size(), "tensor name"));
    out.insert(out.end(), t.name.begin(), t.name.end());
    detail::put_u32(out, detail::narrow_u32(t.shape.size(), "tensor rank"));
    for (auto d : t.shape) detail::put_u32(out, detail::narrow_u32(d, "tensor dimension"));
    for (float v : t.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), checkpoint_magic, 4) != 0) {
    throw DataError("not a checkpoint (missing BFCK magic)");
  }
  std::vector<std::uint8_t> body(bytes.begin() + 4, bytes.end());
  detail::Reader in(body);
  const auto version = in.u32("version");
  if (version != checkpoint_version) throw DataError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.config_text = in.text(in.u32("config length"), "config text");
  const auto count = in.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = in.text(in.u32("name length"), "tensor name");
    const auto rank = in.u32("tensor rank");
    for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(in.u32("tensor dimension"));
    const std::size_t n = shape_numel(t.shape);
    if (in.remaining() / 4 < n) throw DataError("truncated checkpoint in tensor " + t.name);
    t.values.resize(n);
    for (auto& v : t.values) v = in.f32();
    ckpt.tensors.push_back(std::move(t));
  }
  if (!in.done()) throw DataError("trailing bytes after checkpoint tensors");
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_checkpoint(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.reason());
  }
}

template <typename T>
CheckpointTensor to_checkpoint_tensor(const std::string& name, const Tensor<T>& t) {
  CheckpointTensor out{name, t.shape(), std::vector<float>(t.size())};
  for (std::size_t i = 0; i < t.size(); ++i) out.values[i] = static_cast<float>(t.data()[i]);
  return out;
}

// Copies stored values into an existing tensor of matching shape.
template <typename T>
void restore_tensor(const Checkpoint& ckpt, const std::string& name, Tensor<T> target) {
  const auto* t = ckpt.find(name);
  if (!t) throw DataError("checkpoint has no tensor " + name);
  if (t->shape != target.shape()) {
    throw DataError("checkpoint tensor " + name + " has shape " + shape_str(t->shape) + ", model expects " +
                    shape_str(target.shape()));
  }
  auto values = target.data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<T>(t->values[i]);
}

}  // namespace byteformer
