#pragma once

// Absolute cosine similarity between embedding rows, written as CSV and as an
// 8-bit greyscale PGM.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "byteformer/errors.hpp"
#include "byteformer/tensor.hpp"

namespace byteformer {

struct SimilarityMatrix {
  std::size_t n = 0;
  std::vector<double> values;  // row-major n x n, in [0, 1]
  std::vector<std::size_t> zero_rows;

  double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }

  double off_diagonal_mean() const {
    if (n < 2) return 0.0;
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i != j) sum += at(i, j);
      }
    }
    return sum / static_cast<double>(n * (n - 1));
  }
};

// |x . y| / (|x| |y|) over the first `rows` rows of a [N, d] table. A zero-norm
// row has its row and column set to 0.
template <typename T>
SimilarityMatrix abs_cosine(const Tensor<T>& table, std::size_t rows) {
  if (table.rank() != 2) throw ShapeError("abs_cosine expects a [N, d] table, got " + shape_str(table.shape()));
  if (table.dim(0) < rows) {
    throw ShapeError("table " + shape_str(table.shape()) + " has fewer than " + std::to_string(rows) + " rows");
  }
  const std::size_t d = table.dim(1);
  const T* p = table.data().data();
  std::vector<double> norms(rows);
  SimilarityMatrix m;
  m.n = rows;
  m.values.assign(rows * rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(p[i * d + c]) * static_cast<double>(p[i * d + c]);
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0) m.zero_rows.push_back(i);
  }
  for (std::size_t i = 0; i < rows; ++i) {
    if (norms[i] == 0.0) continue;
    for (std::size_t j = i; j < rows; ++j) {
      if (norms[j] == 0.0) continue;
      double dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += static_cast<double>(p[i * d + c]) * static_cast<double>(p[j * d + c]);
      const double v = i == j ? 1.0 : std::min(1.0, std::abs(dot) / (norms[i] * norms[j]));
      m.values[i * rows + j] = v;
      m.values[j * rows + i] = v;
    }
  }
  return m;
}

inline void write_csv(const std::filesystem::path& path, const SimilarityMatrix& m) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << std::setprecision(6) << std::fixed;
  for (std::size_t i = 0; i < m.n; ++i) {
    for (std::size_t j = 0; j < m.n; ++j) out << (j ? "," : "") << m.at(i, j);
    out << "\n";
  }
  if (!out) throw IoError("failed writing " + path.string());
}

// Binary P5 with maxval 255; value v maps to round(255 v).
inline void write_pgm(const std::filesystem::path& path, const SimilarityMatrix& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << m.n << " " << m.n << "\n255\n";
  for (double v : m.values) out.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  if (!out) throw IoError("failed writing " + path.string());
}

struct EmbeddingAnalysis {
  SimilarityMatrix tokens;
  SimilarityMatrix positions;
};

// Token matrix over the 256 byte rows (padding row excluded) and positional
// matrix over the first 256 positions.
template <typename T>
EmbeddingAnalysis analyze_embeddings(const Tensor<T>& token_table, const Tensor<T>& positional) {
  EmbeddingAnalysis out;
  out.tokens = abs_cosine(token_table, 256);
  if (!positional.defined()) throw DataError("checkpoint has no positional embeddings to analyze");
  out.positions = abs_cosine(positional, std::min<std::size_t>(256, positional.dim(0)));
  return out;
}

inline void write_analysis(const std::string& prefix, const EmbeddingAnalysis& a) {
  for (auto i : a.tokens.zero_rows) std::cerr << "warning: token embedding " << i << " has zero norm\n";
  for (auto i : a.positions.zero_rows) std::cerr << "warning: positional embedding " << i << " has zero norm\n";
  write_csv(prefix + "_tokens.csv", a.tokens);
  write_pgm(prefix + "_tokens.pgm", a.tokens);
  write_csv(prefix + "_positions.csv", a.positions);
  write_pgm(prefix + "_positions.pgm", a.positions);
}

}  // namespace byteformer
