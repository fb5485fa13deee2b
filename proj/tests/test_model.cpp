#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "byteformer/model.hpp"
#include "test_util.hpp"

using namespace byteformer;

namespace {

ByteFormerConfig tiny_config() {
  ByteFormerConfig cfg;
  cfg.embed_dim = 16;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.conv_kernel = 4;
  cfg.window_size = 8;
  cfg.downsample_after = {0};
  cfg.max_tokens = 64;
  cfg.num_classes = 4;
  return cfg;
}

LabeledBytes random_bytes(std::size_t n, Rng& rng, int label = 0) {
  std::vector<std::uint8_t> bytes(n);
  for (auto& b : bytes) b = static_cast<std::uint8_t>(bounded(rng, 256));
  return {{std::move(bytes), Encoding::RAW}, label};
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a.data()[i] - b.data()[i])));
  return m;
}

}  // namespace

TEST(Embedding, ConstantBytesGiveConstantTokens) {
  Rng rng(1);
  auto table = Tensor<double>::randn({257, 4}, rng);
  std::vector<LabeledBytes> s{{{std::vector<std::uint8_t>(6, 0), Encoding::RAW}, 0}};
  auto state = embed_bytes(collate(s, 100), table);
  for (std::size_t t = 0; t < 6; ++t) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(state.tokens.data()[t * 4 + j], table.data()[j]);
  }
}

TEST(Embedding, IdAbovePadIsIndexError) {
  auto table = Tensor<double>::zeros({257, 2});
  std::vector<std::int32_t> ids{3, 257};
  EXPECT_THROW(embedding_gather(table, ids, Shape{2}), IndexError);
}

TEST(Reduce, TokenLengthLaw) {
  EXPECT_EQ(token_length(150528, 32), 9407u);
  EXPECT_EQ(token_length(150668, 32), 9415u);
  EXPECT_EQ(token_length(48564, 8), 12140u);
  EXPECT_EQ(token_length(64058, 32), 4002u);
}

TEST(Reduce, WindowMeanOfConstantInputIsConstant) {
  auto cfg = tiny_config();
  cfg.use_conv = false;
  auto params = init_params<double>(cfg, 2, false);
  std::vector<LabeledBytes> s{{{std::vector<std::uint8_t>(20, 77), Encoding::RAW}, 0}};
  auto state = reduce_sequence(embed_bytes(collate(s, 100), params.token_embedding), params, cfg);
  ASSERT_EQ(state.length(), token_length(20, 4));
  for (std::size_t t = 0; t < state.length(); ++t) {
    for (std::size_t j = 0; j < 16; ++j) {
      EXPECT_NEAR(state.tokens.data()[t * 16 + j], params.token_embedding.data()[77 * 16 + j], 1e-12);
    }
  }
}

TEST(Reduce, ShortSequenceRaises) {
  auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 3, false);
  Rng rng(3);
  std::vector<LabeledBytes> s{random_bytes(3, rng)};
  try {
    forward(collate(s, 100), params, cfg);
    FAIL() << "expected SequenceTooShortError";
  } catch (const SequenceTooShortError& e) {
    EXPECT_EQ(e.length(), 3u);
    EXPECT_EQ(e.kernel(), 4u);
  }
}

TEST(Reduce, PaddedPositionsDoNotCreateValidTokens) {
  auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 4, false);
  Rng rng(4);
  std::vector<LabeledBytes> s{random_bytes(40, rng), random_bytes(17, rng)};
  auto state = reduce_sequence(embed_bytes(collate(s, 100), params.token_embedding), params, cfg);
  EXPECT_EQ(state.valid_count(0), token_length(40, 4));
  EXPECT_EQ(state.valid_count(1), token_length(17, 4));
}

TEST(Positional, ZeroTableAndDisabledAreIdentity) {
  auto cfg = tiny_config();
  Rng rng(5);
  TokenState<double> state{Tensor<double>::randn({1, 5, 16}, rng), std::vector<std::uint8_t>(5, 1)};
  auto zero = add_positional(state, Tensor<double>::zeros({64, 16}), cfg);
  EXPECT_EQ(max_abs_diff(zero.tokens, state.tokens), 0.0);
  cfg.use_positional = false;
  auto off = add_positional(state, Tensor<double>::randn({64, 16}, rng), cfg);
  EXPECT_EQ(max_abs_diff(off.tokens, state.tokens), 0.0);
}

TEST(Positional, BoundaryAndOverflow) {
  auto cfg = tiny_config();
  cfg.max_tokens = 5;
  Rng rng(6);
  auto table = Tensor<double>::randn({5, 16}, rng);
  TokenState<double> state{Tensor<double>::zeros({1, 5, 16}), std::vector<std::uint8_t>(5, 1)};
  auto out = add_positional(state, table, cfg);
  for (std::size_t i = 0; i < table.size(); ++i) EXPECT_EQ(out.tokens.data()[i], table.data()[i]);
  TokenState<double> longer{Tensor<double>::zeros({1, 6, 16}), std::vector<std::uint8_t>(6, 1)};
  EXPECT_THROW(add_positional(longer, table, cfg), ConfigError);
}

TEST(Attention, WindowCoveringSequenceEqualsFullPerBlock) {
  Rng rng(7);
  for (std::size_t block = 0; block < 2; ++block) {
    auto cfg = tiny_config();
    auto params = init_params<double>(cfg, 7, false);
    TokenState<double> state{Tensor<double>::randn({2, 8, 16}, rng), std::vector<std::uint8_t>(16, 1)};
    for (std::size_t j = 5; j < 8; ++j) state.mask[8 + j] = 0;
    cfg.attention = AttentionKind::window;
    auto windowed = attention_block(state, params.blocks[block], block, cfg);
    cfg.attention = AttentionKind::full;
    auto full = attention_block(state, params.blocks[block], block, cfg);
    EXPECT_LT(max_abs_diff(windowed.tokens, full.tokens), 1e-12) << "block " << block;
  }
}

TEST(Attention, SingleValidKeyPassesValueThrough) {
  Rng rng(8);
  auto h = Tensor<double>::randn({1, 4, 6}, rng);
  LinearParams<double> qkv{Tensor<double>::randn({6, 18}, rng), Tensor<double>::zeros({18})};
  std::vector<std::uint8_t> mask{0, 0, 1, 0};
  auto out = detail::grouped_attention(h, full_layout(1, 4, mask), qkv, 2);
  auto proj = linear(h, qkv.weight);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(out.data()[i * 6 + c], proj.data()[2 * 18 + 12 + c], 1e-12);
  }
}

TEST(Attention, ShiftedWindowBlocksWrapAround) {
  const std::size_t w = 4, len = 2 * w;
  std::vector<std::uint8_t> mask(len, 1);
  auto lay = window_layout(1, len, w, w / 2, mask);
  const auto slot_first = static_cast<std::size_t>(lay.scatter[0]);
  const auto slot_last = static_cast<std::size_t>(lay.scatter[len - 1]);
  ASSERT_EQ(slot_first / w, slot_last / w);
  const std::size_t g = slot_first / w, i = slot_first % w, j = slot_last % w;
  EXPECT_EQ(lay.allowed[(g * w + i) * w + j], 0);
  EXPECT_EQ(lay.allowed[(g * w + j) * w + i], 0);

  Rng rng(9);
  Tensor<double> qkv({lay.groups, w, 6}, bft::random_vector(lay.groups * w * 6, rng));
  auto logits = attention_logits(qkv, 1, lay.allowed);
  EXPECT_TRUE(std::isinf(logits[(g * w + i) * w + j]));
  EXPECT_LT(logits[(g * w + i) * w + j], 0);
  EXPECT_TRUE(std::isfinite(logits[(g * w + i) * w + i]));
}

TEST(Attention, ShiftOnlyOnOddBlocksOfLongSequences) {
  auto cfg = tiny_config();
  std::vector<std::uint8_t> mask(16, 1);
  EXPECT_EQ(block_layout(cfg, 0, 1, 16, mask).scatter[0], 0);
  EXPECT_NE(block_layout(cfg, 1, 1, 16, mask).scatter[0], 0);
  std::vector<std::uint8_t> short_mask(8, 1);
  EXPECT_EQ(block_layout(cfg, 1, 1, 8, short_mask).scatter[0], 0);
}

TEST(Attention, ShiftDecidedPerSampleNotByBatchLength) {
  auto cfg = tiny_config();
  std::vector<std::uint8_t> mask(32, 0);
  std::fill_n(mask.begin(), 16, 1);
  std::fill_n(mask.begin() + 16, 6, 1);
  const auto lay = block_layout(cfg, 1, 2, 16, mask);
  EXPECT_NE(lay.scatter[0], 0);
  EXPECT_EQ(lay.scatter[16], 16);
}

TEST(Forward, PaddingInvarianceAcrossLengthsInFloat) {
  for (auto kind : {AttentionKind::full, AttentionKind::window, AttentionKind::bag}) {
    auto cfg = tiny_config();
    cfg.attention = kind;
    auto params = init_params<float>(cfg, 15, false);
    Rng rng(15);
    for (std::size_t n = 8; n <= 60; n += 5) {
      auto sample = random_bytes(n, rng);
      std::vector<LabeledBytes> alone{sample};
      std::vector<LabeledBytes> padded{sample, random_bytes(64, rng)};
      auto a = forward(collate(alone, 64), params, cfg);
      auto b = forward(collate(padded, 64), params, cfg);
      for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(a.data()[c], b.data()[c], 1e-5) << to_string(kind) << " n=" << n;
    }
  }
}

TEST(Downsample, CeilChain) {
  std::size_t len = 9415;
  std::vector<std::size_t> seen;
  for (int i = 0; i < 6; ++i) seen.push_back(len = (len + 1) / 2);
  EXPECT_EQ(seen, (std::vector<std::size_t>{4708, 2354, 1177, 589, 295, 148}));

  auto cfg = tiny_config();
  cfg.depth = 6;
  cfg.downsample_after = {0, 1, 3, 5};
  cfg.window_size = 4;
  auto params = init_params<float>(cfg, 10, false);
  Rng rng(10);
  std::vector<LabeledBytes> s{random_bytes(130, rng)};
  ForwardTrace trace;
  forward(collate(s, 200), params, cfg, &trace);
  EXPECT_EQ(trace.token_length, 64u);
  EXPECT_EQ(trace.block_lengths, (std::vector<std::size_t>{32, 16, 16, 8, 8, 4}));
}

TEST(Downsample, PairOfIdenticalTokensAndOrMask) {
  Rng rng(11);
  std::vector<double> row = bft::random_vector(3, rng);
  std::vector<double> data(row);
  data.insert(data.end(), row.begin(), row.end());
  TokenState<double> state{Tensor<double>({1, 2, 3}, data), {1, 1}};
  LinearParams<double> proj{Tensor<double>::randn({6, 3}, rng), Tensor<double>::zeros({3})};
  auto a = downsample(state, proj);
  auto b = downsample(state, proj);
  EXPECT_EQ(a.length(), 1u);
  EXPECT_EQ(max_abs_diff(a.tokens, b.tokens), 0.0);

  TokenState<double> half{Tensor<double>({1, 2, 3}, data), {1, 0}};
  auto merged = downsample(half, proj);
  EXPECT_EQ(merged.mask[0], 1);
  TokenState<double> odd{Tensor<double>::zeros({1, 3, 3}), {1, 1, 1}};
  EXPECT_EQ(downsample(odd, proj).length(), 2u);
}

TEST(Forward, TinyOutputShape) {
  auto cfg = tiny_config();
  auto params = init_params<float>(cfg, 12, false);
  Rng rng(12);
  std::vector<LabeledBytes> s{random_bytes(64, rng), random_bytes(64, rng), random_bytes(50, rng)};
  auto logits = forward(collate(s, 64), params, cfg);
  EXPECT_EQ(logits.shape(), (Shape{3, 4}));
}

TEST(Forward, PaddingInvarianceAllAttentionKinds) {
  for (auto kind : {AttentionKind::full, AttentionKind::window, AttentionKind::bag}) {
    auto cfg = tiny_config();
    cfg.attention = kind;
    auto params = init_params<double>(cfg, 13, false);
    Rng rng(13);
    auto sample = random_bytes(37, rng);
    std::vector<LabeledBytes> alone{sample};
    std::vector<LabeledBytes> padded{sample, random_bytes(64, rng)};
    auto a = forward(collate(alone, 64), params, cfg);
    auto b = forward(collate(padded, 64), params, cfg);
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_NEAR(a.data()[c], b.data()[c], 1e-10) << to_string(kind);
    }
  }
}

TEST(Forward, ReverseInvarianceWithoutPositionOrConv) {
  auto cfg = tiny_config();
  cfg.depth = 0;
  cfg.downsample_after = {};
  cfg.use_conv = false;
  cfg.use_positional = false;
  auto params = init_params<double>(cfg, 14, false);
  Rng rng(14);
  auto sample = random_bytes(40, rng);
  auto reversed = sample;
  std::reverse(reversed.seq.bytes.begin(), reversed.seq.bytes.end());
  std::vector<LabeledBytes> a{sample}, b{reversed};
  auto la = forward(collate(a, 64), params, cfg);
  auto lb = forward(collate(b, 64), params, cfg);
  EXPECT_LT(max_abs_diff(la, lb), 1e-12);
}

TEST(Forward, GradcheckTinyConfigEveryParameter) {
  for (auto kind : {AttentionKind::window, AttentionKind::bag}) {
    auto cfg = tiny_config();
    cfg.attention = kind;
    auto params = init_params<double>(cfg, 15, true);
    Rng rng(15);
    std::vector<LabeledBytes> s{random_bytes(64, rng, 1), random_bytes(48, rng, 3)};
    const Batch batch = collate(s, 64);
    std::vector<std::pair<std::string, Tensor<double>>> named;
    for (const auto& p : params.named()) named.emplace_back(p.name, p.tensor);
    GradcheckOptions opts;
    opts.max_coords_per_tensor = 6;
    auto report = gradcheck([&] { return softmax_cross_entropy(forward(batch, params, cfg), batch.labels); }, named,
                            opts);
    EXPECT_EQ(report.entries.size(), named.size());
    for (const auto& e : report.entries) EXPECT_LT(e.max_rel_error, 1e-4) << to_string(kind) << " " << e.name;
  }
}

TEST(Config, ValidationAndText) {
  auto cfg = tiny_config();
  cfg.conv_kernel = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.downsample_after = {2};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_NE(tiny_config().to_text().find("model.kernel=4\n"), std::string::npos);
  EXPECT_THROW(parse_attention("global"), ConfigError);
}

TEST(Params, DecayOnlyOnMatrices) {
  auto params = init_params<float>(tiny_config(), 16, false);
  for (const auto& p : params.named()) {
    const bool matrix = p.name.ends_with(".weight") || p.name == "conv.kernel";
    EXPECT_EQ(p.decay, matrix) << p.name;
  }
  auto copy = clone_params(tiny_config(), params, false);
  EXPECT_EQ(copy.named()[0].tensor.data()[5], params.named()[0].tensor.data()[5]);
}

TEST(Reduce, FusedPathMatchesEmbedThenReduce) {
  auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 17, false);
  Rng rng(17);
  std::vector<LabeledBytes> s{random_bytes(40, rng), random_bytes(23, rng)};
  const Batch batch = collate(s, 64);
  auto fused = embed_and_reduce(batch, params, cfg);
  auto plain = reduce_sequence(embed_bytes(batch, params.token_embedding), params, cfg);
  EXPECT_EQ(fused.mask, plain.mask);
  EXPECT_LT(max_abs_diff(fused.tokens, plain.tokens), 1e-12);
}
