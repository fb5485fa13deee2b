#pragma once

// Byte-ordering transforms for probing how much a model relies on locality.
// Each is a permutation of positions, so the byte multiset is preserved.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "byteformer/codec.hpp"
#include "byteformer/errors.hpp"
#include "byteformer/random.hpp"

namespace byteformer {

enum class OrderKind { baseline, random_shuffle, stride, window_shuffle, cyclic, reverse };

inline std::string_view to_string(OrderKind kind) {
  switch (kind) {
    case OrderKind::baseline: return "baseline";
    case OrderKind::random_shuffle: return "random_shuffle";
    case OrderKind::stride: return "stride";
    case OrderKind::window_shuffle: return "window_shuffle";
    case OrderKind::cyclic: return "cyclic";
    case OrderKind::reverse: return "reverse";
  }
  return "baseline";
}

inline OrderKind parse_order_kind(std::string_view name) {
  for (auto kind : {OrderKind::baseline, OrderKind::random_shuffle, OrderKind::stride, OrderKind::window_shuffle,
                    OrderKind::cyclic, OrderKind::reverse}) {
    if (name == to_string(kind)) return kind;
  }
  throw UsageError("unknown byte order '" + std::string(name) +
                   "' (expected baseline, random_shuffle, stride, window_shuffle, cyclic or reverse)");
}

struct OrderTransform {
  OrderKind kind = OrderKind::baseline;
  std::size_t window = 1024;
  std::size_t stride = 1024;
  // Drawn once at construction for window_shuffle and reused for every sample.
  std::vector<std::uint32_t> fixed_perm;

  static OrderTransform make(OrderKind kind, std::size_t window = 1024, std::size_t stride = 1024,
                             std::uint64_t seed = 0) {
    if (window == 0 || stride == 0) throw UsageError("byte-order window and stride must be >= 1");
    OrderTransform t{kind, window, stride, {}};
    if (kind == OrderKind::window_shuffle) {
      t.fixed_perm.resize(window);
      std::iota(t.fixed_perm.begin(), t.fixed_perm.end(), 0u);
      Rng rng(seed);
      for (std::size_t i = window - 1; i > 0; --i) std::swap(t.fixed_perm[i], t.fixed_perm[bounded(rng, i + 1)]);
    }
    return t;
  }
};

// Output position i takes input position order[i].
inline std::vector<std::size_t> order_indices(std::size_t n, const OrderTransform& t, Rng& rng) {
  std::vector<std::size_t> order;
  order.reserve(n);
  switch (t.kind) {
    case OrderKind::baseline:
      for (std::size_t i = 0; i < n; ++i) order.push_back(i);
      break;
    case OrderKind::random_shuffle:
      for (std::size_t i = 0; i < n; ++i) order.push_back(i);
      for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[bounded(rng, i + 1)]);
      break;
    case OrderKind::stride:
      // Column-major read of a stride x ceil(n / stride) matrix; cells past n are skipped.
      for (std::size_t r = 0; r < t.stride; ++r) {
        for (std::size_t i = r; i < n; i += t.stride) order.push_back(i);
      }
      break;
    case OrderKind::window_shuffle:
      for (std::size_t start = 0; start < n; start += t.window) {
        const std::size_t len = std::min(t.window, n - start);
        for (auto p : t.fixed_perm) {
          if (p < len) order.push_back(start + p);
        }
      }
      break;
    case OrderKind::cyclic: {
      const std::size_t split = n / 2;
      for (std::size_t i = split; i < n; ++i) order.push_back(i);
      for (std::size_t i = 0; i < split; ++i) order.push_back(i);
      break;
    }
    case OrderKind::reverse:
      for (std::size_t i = n; i > 0; --i) order.push_back(i - 1);
      break;
  }
  return order;
}

inline ByteSequence apply_order(const ByteSequence& seq, const OrderTransform& t, Rng& rng) {
  if (seq.bytes.empty()) throw DataError("byte-order transform of an empty sequence");
  if (t.kind == OrderKind::window_shuffle && t.fixed_perm.size() != t.window) {
    throw UsageError("window_shuffle transform was not constructed with OrderTransform::make");
  }
  const auto order = order_indices(seq.bytes.size(), t, rng);
  ByteSequence out{std::vector<std::uint8_t>(seq.bytes.size()), seq.encoding};
  for (std::size_t i = 0; i < order.size(); ++i) out.bytes[i] = seq.bytes[order[i]];
  return out;
}

}  // namespace byteformer
