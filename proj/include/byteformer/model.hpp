#pragma once

// ByteFormer: byte embedding -> strided Conv1D (or windowed mean) -> positional
// embedding -> pre-norm transformer blocks with full, shifted-window or bag
// attention and pairwise downsampling -> masked mean pool -> linear classifier.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "byteformer/dataset.hpp"
#include "byteformer/errors.hpp"
#include "byteformer/random.hpp"
#include "byteformer/tensor.hpp"

namespace byteformer {

enum class AttentionKind { full, window, bag };

inline std::string_view to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::full: return "full";
    case AttentionKind::window: return "window";
    case AttentionKind::bag: return "bag";
  }
  return "window";
}

inline AttentionKind parse_attention(std::string_view name) {
  if (name == "full") return AttentionKind::full;
  if (name == "window") return AttentionKind::window;
  if (name == "bag") return AttentionKind::bag;
  throw ConfigError("unknown attention '" + std::string(name) + "' (expected full, window or bag)");
}

// Tokens entering the transformer for an input of `bytes` bytes.
inline std::size_t token_length(std::size_t bytes, std::size_t kernel) {
  return conv_output_length(bytes, kernel, kernel / 2);
}

struct ByteFormerConfig {
  std::size_t vocab_size = 257;
  std::size_t embed_dim = 192;
  std::size_t depth = 12;
  std::size_t heads = 3;
  std::size_t mlp_ratio = 4;
  std::size_t conv_kernel = 32;
  std::size_t window_size = 128;
  AttentionKind attention = AttentionKind::window;
  std::vector<std::size_t> downsample_after = {0, 1, 3, 5, 7, 9};
  std::size_t max_tokens = 9416;
  std::size_t num_classes = 1000;
  bool use_positional = true;
  bool use_conv = true;
  double norm_eps = 1e-6;

  std::size_t conv_stride() const { return conv_kernel / 2; }

  bool downsamples_after(std::size_t block) const {
    return std::find(downsample_after.begin(), downsample_after.end(), block) != downsample_after.end();
  }

  void validate() const {
    if (vocab_size != 257) throw ConfigError("vocab_size must be 257 (256 byte values + padding)");
    if (conv_kernel < 2 || conv_kernel % 2 != 0) throw ConfigError("conv_kernel must be even and >= 2");
    if (window_size < 1) throw ConfigError("window_size must be >= 1");
    if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
    if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
    if (max_tokens < 1) throw ConfigError("max_tokens must be >= 1");
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    for (auto b : downsample_after) {
      if (b >= depth) throw ConfigError("downsample_after index " + std::to_string(b) + " outside [0, depth)");
    }
  }

  // key=value lines; the checkpoint format embeds this text.
  std::string to_text() const {
    std::ostringstream out;
    out << "model.vocab_size=" << vocab_size << "\n"
        << "model.embed_dim=" << embed_dim << "\n"
        << "model.depth=" << depth << "\n"
        << "model.heads=" << heads << "\n"
        << "model.mlp_ratio=" << mlp_ratio << "\n"
        << "model.kernel=" << conv_kernel << "\n"
        << "model.window=" << window_size << "\n"
        << "model.attention=" << to_string(attention) << "\n"
        << "model.downsample=";
    for (std::size_t i = 0; i < downsample_after.size(); ++i) out << (i ? "," : "") << downsample_after[i];
    out << "\n"
        << "model.max_tokens=" << max_tokens << "\n"
        << "num_classes=" << num_classes << "\n"
        << "model.positional=" << (use_positional ? "true" : "false") << "\n"
        << "model.conv=" << (use_conv ? "true" : "false") << "\n";
    return out.str();
  }
};

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
struct LinearParams {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
struct NormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
struct BlockParams {
  NormParams<T> norm1;
  LinearParams<T> qkv;
  LinearParams<T> proj;
  LinearParams<T> bag_qkv;   // bag attention only
  LinearParams<T> bag_proj;  // bag attention only
  NormParams<T> norm2;
  LinearParams<T> fc1;
  LinearParams<T> fc2;
  LinearParams<T> downsample;  // present when the block is followed by downsampling
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool decay = false;
};

template <typename T>
struct ByteFormerParams {
  Tensor<T> token_embedding;  // [257, d]; row 256 is the padding token
  Tensor<T> conv_kernel;      // [k, d, d]
  Tensor<T> conv_bias;        // [d]
  Tensor<T> positional;       // [max_tokens, d]
  std::vector<BlockParams<T>> blocks;
  NormParams<T> norm;
  LinearParams<T> head;

  // Handles alias the stored tensors. Weight decay applies to matrices and
  // kernels only; embeddings, biases and norm parameters are exempt.
  std::vector<NamedParam<T>> named() const {
    std::vector<NamedParam<T>> out;
    auto put = [&](std::string name, const Tensor<T>& t, bool decay) {
      if (t.defined()) out.push_back({std::move(name), t, decay});
    };
    auto put_linear = [&](const std::string& prefix, const LinearParams<T>& p) {
      put(prefix + ".weight", p.weight, true);
      put(prefix + ".bias", p.bias, false);
    };
    auto put_norm = [&](const std::string& prefix, const NormParams<T>& p) {
      put(prefix + ".gamma", p.gamma, false);
      put(prefix + ".beta", p.beta, false);
    };
    put("token_embedding", token_embedding, false);
    put("conv.kernel", conv_kernel, true);
    put("conv.bias", conv_bias, false);
    put("positional", positional, false);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "blocks." + std::to_string(i);
      const auto& b = blocks[i];
      put_norm(p + ".norm1", b.norm1);
      put_linear(p + ".qkv", b.qkv);
      put_linear(p + ".proj", b.proj);
      put_linear(p + ".bag_qkv", b.bag_qkv);
      put_linear(p + ".bag_proj", b.bag_proj);
      put_norm(p + ".norm2", b.norm2);
      put_linear(p + ".fc1", b.fc1);
      put_linear(p + ".fc2", b.fc2);
      put_linear(p + ".downsample", b.downsample);
    }
    put_norm("norm", norm);
    put_linear("head", head);
    return out;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : named()) n += p.tensor.size();
    return n;
  }

  void zero_grad() const {
    for (auto p : named()) p.tensor.zero_grad();
  }
};

namespace detail {

template <typename T>
LinearParams<T> init_linear(std::size_t in, std::size_t out, Rng& rng, bool grad) {
  return {Tensor<T>::randn({in, out}, rng, T(0.02), grad), Tensor<T>::zeros({out}, grad)};
}

template <typename T>
NormParams<T> init_norm(std::size_t d, bool grad) {
  return {Tensor<T>::filled({d}, T(1), grad), Tensor<T>::zeros({d}, grad)};
}

}  // namespace detail

// Byte embeddings ~ N(0, 1); conv kernel ~ N(0, 1/(k d)); other matrices ~ N(0, 0.02^2);
// positional rows ~ N(0, 0.02^2); biases 0; norm gains 1.
template <typename T>
ByteFormerParams<T> init_params(const ByteFormerConfig& cfg, std::uint64_t seed, bool requires_grad = true) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t d = cfg.embed_dim;
  ByteFormerParams<T> p;
  p.token_embedding = Tensor<T>::randn({cfg.vocab_size, d}, rng, T(1), requires_grad);
  if (cfg.use_conv) {
    const double fan_in = static_cast<double>(cfg.conv_kernel * d);
    p.conv_kernel = Tensor<T>::randn({cfg.conv_kernel, d, d}, rng, static_cast<T>(1.0 / std::sqrt(fan_in)), requires_grad);
    p.conv_bias = Tensor<T>::zeros({d}, requires_grad);
  }
  if (cfg.use_positional) p.positional = Tensor<T>::randn({cfg.max_tokens, d}, rng, T(0.02), requires_grad);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    BlockParams<T> b;
    b.norm1 = detail::init_norm<T>(d, requires_grad);
    b.qkv = detail::init_linear<T>(d, 3 * d, rng, requires_grad);
    b.proj = detail::init_linear<T>(d, d, rng, requires_grad);
    if (cfg.attention == AttentionKind::bag) {
      b.bag_qkv = detail::init_linear<T>(d, 3 * d, rng, requires_grad);
      b.bag_proj = detail::init_linear<T>(d, d, rng, requires_grad);
    }
    b.norm2 = detail::init_norm<T>(d, requires_grad);
    b.fc1 = detail::init_linear<T>(d, cfg.mlp_ratio * d, rng, requires_grad);
    b.fc2 = detail::init_linear<T>(cfg.mlp_ratio * d, d, rng, requires_grad);
    if (cfg.downsamples_after(i)) b.downsample = detail::init_linear<T>(2 * d, d, rng, requires_grad);
    p.blocks.push_back(std::move(b));
  }
  p.norm = detail::init_norm<T>(d, requires_grad);
  p.head = detail::init_linear<T>(d, cfg.num_classes, rng, requires_grad);
  return p;
}

// Same architecture in another scalar width, values converted.
template <typename To, typename From>
ByteFormerParams<To> cast_params(const ByteFormerConfig& cfg, const ByteFormerParams<From>& src,
                                 bool requires_grad = true) {
  auto out = init_params<To>(cfg, 0, requires_grad);
  auto dst = out.named();
  auto from = src.named();
  if (dst.size() != from.size()) throw ShapeError("parameter sets differ in size");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].name != from[i].name || dst[i].tensor.shape() != from[i].tensor.shape()) {
      throw ShapeError("parameter mismatch at " + from[i].name);
    }
    auto values = dst[i].tensor.data();
    auto source = from[i].tensor.data();
    for (std::size_t j = 0; j < values.size(); ++j) values[j] = static_cast<To>(source[j]);
  }
  return out;
}

template <typename T>
ByteFormerParams<T> clone_params(const ByteFormerConfig& cfg, const ByteFormerParams<T>& src, bool requires_grad = true) {
  return cast_params<T, T>(cfg, src, requires_grad);
}

// ---------------------------------------------------------------------------
// Forward stages

template <typename T>
struct TokenState {
  Tensor<T> tokens;                 // [B, L, d]
  std::vector<std::uint8_t> mask;   // [B, L], 1 = valid

  std::size_t batch() const { return tokens.dim(0); }
  std::size_t length() const { return tokens.dim(1); }
  std::size_t width() const { return tokens.dim(2); }
  std::size_t valid_count(std::size_t b) const {
    return static_cast<std::size_t>(std::count(mask.begin() + static_cast<std::ptrdiff_t>(b * length()),
                                               mask.begin() + static_cast<std::ptrdiff_t>((b + 1) * length()), 1));
  }
};

namespace detail {

// A reduced token is valid when every position of its receptive field is.
inline std::vector<std::uint8_t> reduced_mask(std::span<const std::uint8_t> mask, std::size_t batch, std::size_t len,
                                              std::size_t k, std::size_t stride) {
  const std::size_t out_len = conv_output_length(len, k, stride);
  std::vector<std::uint8_t> out(batch * out_len, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < out_len; ++t) {
      const auto* field = mask.data() + b * len + t * stride;
      out[b * out_len + t] = std::all_of(field, field + k, [](std::uint8_t m) { return m != 0; }) ? 1 : 0;
    }
  }
  return out;
}

}  // namespace detail

template <typename T>
TokenState<T> embed_bytes(const Batch& batch, const Tensor<T>& table) {
  if (batch.tokens.size() != batch.batch_size * batch.max_length) throw ShapeError("malformed batch");
  TokenState<T> state;
  state.tokens = embedding_gather(table, batch.tokens, Shape{batch.batch_size, batch.max_length});
  state.mask.assign(batch.tokens.size(), 0);
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    for (std::size_t j = 0; j < batch.lengths[b]; ++j) state.mask[b * batch.max_length + j] = 1;
  }
  return state;
}

// Conv1D with kernel k and stride k/2 (or the windowed mean when use_conv is
// off). An output token is valid when its whole receptive field is valid, so
// a sample of S bytes keeps floor((S - k) / (k / 2)) + 1 tokens however much
// padding its batch carries.
template <typename T>
TokenState<T> reduce_sequence(const TokenState<T>& state, const ByteFormerParams<T>& params,
                              const ByteFormerConfig& cfg) {
  const std::size_t k = cfg.conv_kernel, stride = cfg.conv_stride();
  const std::size_t batch = state.batch(), len = state.length();
  for (std::size_t b = 0; b < batch; ++b) {
    const auto valid = state.valid_count(b);
    if (valid < k) throw SequenceTooShortError(valid, k);
  }
  TokenState<T> out;
  out.tokens = cfg.use_conv ? conv1d(state.tokens, params.conv_kernel, params.conv_bias, stride)
                            : window_mean(state.tokens, k, stride);
  out.mask = detail::reduced_mask(state.mask, batch, len, k, stride);
  return out;
}

// embed_bytes followed by reduce_sequence, with the convolution fused into the
// embedding lookup when use_conv is set.
template <typename T>
TokenState<T> embed_and_reduce(const Batch& batch, const ByteFormerParams<T>& params, const ByteFormerConfig& cfg) {
  if (!cfg.use_conv) return reduce_sequence(embed_bytes(batch, params.token_embedding), params, cfg);
  if (batch.tokens.size() != batch.batch_size * batch.max_length) throw ShapeError("malformed batch");
  const std::size_t k = cfg.conv_kernel;
  for (auto n : batch.lengths) {
    if (n < k) throw SequenceTooShortError(n, k);
  }
  std::vector<std::uint8_t> mask(batch.tokens.size(), 0);
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(b * batch.max_length), batch.lengths[b], 1);
  }
  TokenState<T> out;
  out.tokens = embedding_conv1d(params.token_embedding, batch.tokens, batch.batch_size, params.conv_kernel,
                                params.conv_bias, cfg.conv_stride());
  out.mask = detail::reduced_mask(mask, batch.batch_size, batch.max_length, k, cfg.conv_stride());
  return out;
}

template <typename T>
TokenState<T> add_positional(const TokenState<T>& state, const Tensor<T>& pos_table, const ByteFormerConfig& cfg) {
  if (!cfg.use_positional) return state;
  const std::size_t len = state.length();
  if (len > cfg.max_tokens || len > pos_table.dim(0)) {
    throw ConfigError("sequence of " + std::to_string(len) + " tokens exceeds max_tokens " +
                      std::to_string(cfg.max_tokens));
  }
  return {add_broadcast(state.tokens, slice_rows(pos_table, len)), state.mask};
}

// Assignment of tokens to independent attention groups.
struct AttentionLayout {
  std::size_t groups = 0;
  std::size_t group_size = 0;
  std::vector<std::ptrdiff_t> gather;   // slot -> token row (b * L + p), or -1 for an empty slot
  std::vector<std::ptrdiff_t> scatter;  // token row -> slot
  std::vector<std::uint8_t> allowed;    // [groups, n, n]
  bool identity = false;                // slots coincide with token rows
};

inline AttentionLayout full_layout(std::size_t batch, std::size_t len, std::span<const std::uint8_t> mask) {
  AttentionLayout lay;
  lay.groups = batch;
  lay.group_size = len;
  lay.identity = true;
  lay.allowed.resize(batch * len * len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < len; ++i) {
      std::copy_n(mask.data() + b * len, len, lay.allowed.data() + (b * len + i) * len);
    }
  }
  return lay;
}

// Non-overlapping windows of w tokens over the sequence padded to a multiple
// of w. With a shift s, window slots start s tokens later and wrap cyclically;
// slots that wrapped may not attend to slots that did not, and vice versa.
inline AttentionLayout window_layout(std::size_t batch, std::size_t len, std::size_t w,
                                     std::span<const std::size_t> shifts, std::span<const std::uint8_t> mask) {
  const std::size_t windows = (len + w - 1) / w;
  const std::size_t padded = windows * w;
  AttentionLayout lay;
  lay.groups = batch * windows;
  lay.group_size = w;
  lay.gather.assign(lay.groups * w, -1);
  lay.scatter.assign(batch * len, -1);
  std::vector<std::uint8_t> wrapped(lay.groups * w, 0), valid(lay.groups * w, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t shift = shifts[b];
    for (std::size_t slot = 0; slot < padded; ++slot) {
      const std::size_t pos = (slot + shift) % padded;
      const std::size_t row = b * padded + slot;
      wrapped[row] = slot + shift >= padded ? 1 : 0;
      if (pos < len) {
        lay.gather[row] = static_cast<std::ptrdiff_t>(b * len + pos);
        lay.scatter[b * len + pos] = static_cast<std::ptrdiff_t>(row);
        valid[row] = mask[b * len + pos];
      }
    }
  }
  lay.allowed.assign(lay.groups * w * w, 0);
  for (std::size_t g = 0; g < lay.groups; ++g) {
    for (std::size_t i = 0; i < w; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        lay.allowed[(g * w + i) * w + j] = valid[g * w + j] && wrapped[g * w + i] == wrapped[g * w + j];
      }
    }
  }
  return lay;
}

inline AttentionLayout window_layout(std::size_t batch, std::size_t len, std::size_t w, std::size_t shift,
                                     std::span<const std::uint8_t> mask) {
  const std::vector<std::size_t> shifts(batch, shift);
  return window_layout(batch, len, w, shifts, mask);
}

// Layout used by a given block: full attention, or windows shifted by w/2 on
// odd-indexed blocks for samples whose valid tokens span more than one window.
inline AttentionLayout block_layout(const ByteFormerConfig& cfg, std::size_t block_index, std::size_t batch,
                                    std::size_t len, std::span<const std::uint8_t> mask) {
  if (cfg.attention == AttentionKind::full) return full_layout(batch, len, mask);
  const std::size_t w = cfg.window_size;
  std::vector<std::size_t> shifts(batch, 0);
  if (cfg.attention == AttentionKind::window && block_index % 2 == 1) {
    for (std::size_t b = 0; b < batch; ++b) {
      const auto row = mask.subspan(b * len, len);
      const auto valid = std::count_if(row.begin(), row.end(), [](std::uint8_t m) { return m != 0; });
      if (static_cast<std::size_t>(valid) > w) shifts[b] = w / 2;
    }
  }
  return window_layout(batch, len, w, shifts, mask);
}

namespace detail {

template <typename T>
Tensor<T> grouped_attention(const Tensor<T>& h, const AttentionLayout& lay, const LinearParams<T>& qkv_p,
                            std::size_t heads) {
  const std::size_t batch = h.dim(0), len = h.dim(1), d = h.dim(2);
  Tensor<T> qkv = linear(h, qkv_p.weight, qkv_p.bias);
  if (lay.identity) return attention(qkv, heads, lay.allowed);
  Tensor<T> grouped = gather_rows(qkv, lay.gather, Shape{lay.groups, lay.group_size, 3 * d});
  Tensor<T> attended = attention(grouped, heads, lay.allowed);
  return gather_rows(attended, lay.scatter, Shape{batch, len, d});
}

// Stage 2 of bag attention: attention across per-bag mean tokens, broadcast
// back onto every member of each bag.
template <typename T>
Tensor<T> inter_bag(const Tensor<T>& y, std::span<const std::uint8_t> mask, const AttentionLayout& bags,
                    const BlockParams<T>& block, std::size_t heads) {
  const std::size_t batch = y.dim(0), len = y.dim(1), d = y.dim(2);
  const std::size_t per_batch = bags.groups / batch, w = bags.group_size;
  std::vector<std::uint8_t> slot_valid(bags.gather.size(), 0);
  for (std::size_t s = 0; s < bags.gather.size(); ++s) {
    slot_valid[s] = bags.gather[s] >= 0 && mask[static_cast<std::size_t>(bags.gather[s])];
  }
  Tensor<T> members = gather_rows(y, bags.gather, Shape{bags.groups, w, d});
  Tensor<T> means = reshape(masked_mean(members, slot_valid), Shape{batch, per_batch, d});
  std::vector<std::uint8_t> bag_valid(bags.groups, 0);
  for (std::size_t g = 0; g < bags.groups; ++g) {
    bag_valid[g] = std::any_of(slot_valid.begin() + static_cast<std::ptrdiff_t>(g * w),
                               slot_valid.begin() + static_cast<std::ptrdiff_t>((g + 1) * w),
                               [](std::uint8_t v) { return v != 0; });
  }
  const AttentionLayout across = full_layout(batch, per_batch, bag_valid);
  Tensor<T> mixed = linear(grouped_attention(means, across, block.bag_qkv, heads), block.bag_proj.weight,
                           block.bag_proj.bias);
  std::vector<std::ptrdiff_t> owner(batch * len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < len; ++p) owner[b * len + p] = static_cast<std::ptrdiff_t>(b * per_batch + p / w);
  }
  return gather_rows(mixed, std::move(owner), Shape{batch, len, d});
}

}  // namespace detail

// Pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x)) with an exact-GELU MLP.
template <typename T>
TokenState<T> attention_block(const TokenState<T>& state, const BlockParams<T>& block, std::size_t block_index,
                              const ByteFormerConfig& cfg) {
  const std::size_t batch = state.batch(), len = state.length();
  const AttentionLayout lay = block_layout(cfg, block_index, batch, len, state.mask);
  Tensor<T> h = layer_norm(state.tokens, block.norm1.gamma, block.norm1.beta, cfg.norm_eps);
  Tensor<T> y = linear(detail::grouped_attention(h, lay, block.qkv, cfg.heads), block.proj.weight, block.proj.bias);
  if (cfg.attention == AttentionKind::bag) y = add(y, detail::inter_bag(y, state.mask, lay, block, cfg.heads));
  Tensor<T> x = add(state.tokens, y);
  Tensor<T> m = layer_norm(x, block.norm2.gamma, block.norm2.beta, cfg.norm_eps);
  m = linear(gelu(linear(m, block.fc1.weight, block.fc1.bias)), block.fc2.weight, block.fc2.bias);
  return {add(x, m), state.mask};
}

// Halves the sequence: adjacent pairs (invalid members zeroed) are concatenated
// and projected back to d. A merged token is valid if either member was.
template <typename T>
TokenState<T> downsample(const TokenState<T>& state, const LinearParams<T>& proj) {
  const std::size_t batch = state.batch(), len = state.length(), half = (len + 1) / 2;
  TokenState<T> out;
  out.tokens = linear(concat_pairs(state.tokens, state.mask), proj.weight, proj.bias);
  out.mask.assign(batch * half, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < half; ++t) {
      const bool left = state.mask[b * len + 2 * t] != 0;
      const bool right = 2 * t + 1 < len && state.mask[b * len + 2 * t + 1] != 0;
      out.mask[b * half + t] = (left || right) ? 1 : 0;
    }
  }
  return out;
}

// Sequence lengths observed during one forward pass.
struct ForwardTrace {
  std::size_t input_length = 0;
  std::size_t token_length = 0;               // L_t, entering the transformer
  std::vector<std::size_t> block_lengths;     // after each block (and its downsampling)
  std::vector<std::size_t> valid_tokens;      // per sample, entering the transformer
};

template <typename T>
Tensor<T> forward(const Batch& batch, const ByteFormerParams<T>& params, const ByteFormerConfig& cfg,
                  ForwardTrace* trace = nullptr) {
  TokenState<T> state = embed_and_reduce(batch, params, cfg);
  state = add_positional(state, params.positional, cfg);
  if (trace) {
    trace->input_length = batch.max_length;
    trace->token_length = state.length();
    trace->block_lengths.clear();
    trace->valid_tokens.clear();
    for (std::size_t b = 0; b < state.batch(); ++b) trace->valid_tokens.push_back(state.valid_count(b));
  }
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    state = attention_block(state, params.blocks[i], i, cfg);
    if (cfg.downsamples_after(i)) state = downsample(state, params.blocks[i].downsample);
    if (trace) trace->block_lengths.push_back(state.length());
  }
  Tensor<T> normed = layer_norm(state.tokens, params.norm.gamma, params.norm.beta, cfg.norm_eps);
  Tensor<T> pooled = masked_mean(normed, state.mask);
  return linear(pooled, params.head.weight, params.head.bias);
}

}  // namespace byteformer
