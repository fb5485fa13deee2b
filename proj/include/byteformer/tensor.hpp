#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a shared handle to a graph node. Operations record their inputs
// and a backward closure on the result node whenever any input requires a
// gradient. GradTape orders the reachable nodes topologically and replays the
// closures in reverse. Two scalar widths are supported: float for training and
// double for gradient checking.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "byteformer/errors.hpp"

namespace byteformer {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                       " elements but " + std::to_string(data.size()) + " were given");
    }
    for (auto dim : shape) {
      if (dim == 0) throw ShapeError("zero-sized dimension in shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  template <class Rng>
  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    std::vector<T> data(shape_numel(shape));
    for (auto& v : data) v = static_cast<T>(dist(rng));
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T>& storage() { return node_->data; }
  const std::vector<T>& storage() const { return node_->data; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<T> grad() { return node_->ensure_grad(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }
  void clear_grad() { node_->grad.clear(); }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  const char* op_name() const { return node_->op; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  // Copy of the values as a fresh leaf.
  Tensor detach(bool requires_grad = false) const { return Tensor(shape(), node_->data, requires_grad); }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& src, bool requires_grad = false) {
  std::vector<To> data(src.size());
  std::transform(src.data().begin(), src.data().end(), data.begin(), [](From v) { return static_cast<To>(v); });
  return Tensor<To>(src.shape(), std::move(data), requires_grad);
}

namespace detail {

template <typename T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                  std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = name;
  for (const auto& in : inputs) {
    if (in.defined() && in.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const auto& in : inputs) node->inputs.push_back(in.defined() ? in.node() : nullptr);
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
bool wants_grad(const std::shared_ptr<Node<T>>& node) {
  return node && node->requires_grad;
}

}  // namespace detail

// Topologically ordered record of the operations reachable from a root.
template <typename T>
class GradTape {
 public:
  explicit GradTape(const Tensor<T>& root) : root_(root) {
    std::unordered_set<const Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* child = node->inputs[next++].get();
        if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  // Nodes in execution order: every node appears after all of its inputs.
  const std::vector<Node<T>*>& ops() const { return order_; }
  std::size_t size() const { return order_.size(); }

  void backward(bool check_finite = false) {
    if (root_.size() != 1) throw ShapeError("backward from non-scalar of shape " + shape_str(root_.shape()));
    if (!root_.requires_grad()) return;
    root_.node()->ensure_grad()[0] = T(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<T>* node = *it;
      if (!node->backward || node->grad.empty()) continue;
      node->backward(*node);
      if (!check_finite) continue;
      for (const auto& in : node->inputs) {
        if (!in || in->grad.empty()) continue;
        for (T g : in->grad) {
          if (!std::isfinite(g)) throw NumericError(std::string("non-finite gradient in backward of ") + node->op);
        }
      }
    }
  }

 private:
  Tensor<T> root_;
  std::vector<Node<T>*> order_;
};

template <typename T>
void backward(const Tensor<T>& root, bool check_finite = false) {
  GradTape<T>(root).backward(check_finite);
}

// ---------------------------------------------------------------------------
// Elementwise and shape operations

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  return detail::make_op<T>("add", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!detail::wants_grad(in)) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// a + b where b's shape is a trailing suffix of a's shape (bias, positional rows).
template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sb.size() > sa.size() || !std::equal(sb.begin(), sb.end(), sa.end() - static_cast<std::ptrdiff_t>(sb.size()))) {
    throw ShapeError("cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
  }
  const std::size_t inner = b.size();
  std::vector<T> out(a.size());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); i += inner) {
    for (std::size_t j = 0; j < inner; ++j) out[i + j] = pa[i + j] + pb[j];
  }
  return detail::make_op<T>("add_broadcast", sa, std::move(out), {a, b}, [inner](Node<T>& self) {
    if (detail::wants_grad(self.inputs[0])) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants_grad(self.inputs[1])) {
      auto& g = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); i += inner) {
        for (std::size_t j = 0; j < inner; ++j) g[j] += self.grad[i + j];
      }
    }
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const T* px = x.data().data();
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>(0.5 * px[i] * (1.0 + std::erf(px[i] * inv_sqrt2)));
  }
  return detail::make_op<T>("gelu", x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& in = *self.inputs[0];
    auto& g = in.ensure_grad();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = in.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      g[i] += static_cast<T>(self.grad[i] * (cdf + v * pdf));
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return detail::make_op<T>("reshape", std::move(shape), x.storage(), {x}, [](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(x.size());
  const T* px = x.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = px[i * n + j];
  }
  return detail::make_op<T>("transpose", Shape{n, m}, std::move(out), {x}, [m, n](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    }
  });
}

// First `rows` entries along axis 0.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t rows) {
  if (rows == 0 || rows > x.dim(0)) {
    throw ShapeError("slice of " + std::to_string(rows) + " rows from " + shape_str(x.shape()));
  }
  Shape shape = x.shape();
  shape[0] = rows;
  const std::size_t n = shape_numel(shape);
  std::vector<T> out(x.data().begin(), x.data().begin() + static_cast<std::ptrdiff_t>(n));
  return detail::make_op<T>("slice_rows", std::move(shape), std::move(out), {x}, [n](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
  });
}

// Row gather over the last axis: output row r is input row index[r], or zeros
// when index[r] < 0. out_shape must hold index.size() rows of the input width.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<std::ptrdiff_t> index, Shape out_shape) {
  const std::size_t width = x.shape().back();
  const std::size_t rows_in = x.size() / width;
  if (shape_numel(out_shape) != index.size() * width) {
    throw ShapeError("gather of " + std::to_string(index.size()) + " rows of width " + std::to_string(width) +
                     " into " + shape_str(out_shape));
  }
  std::vector<T> out(index.size() * width, T(0));
  const T* px = x.data().data();
  for (std::size_t r = 0; r < index.size(); ++r) {
    const auto src = index[r];
    if (src < 0) continue;
    if (static_cast<std::size_t>(src) >= rows_in) {
      throw IndexError("gather row " + std::to_string(src) + " of " + std::to_string(rows_in));
    }
    std::copy_n(px + static_cast<std::size_t>(src) * width, width, out.data() + r * width);
  }
  return detail::make_op<T>("gather_rows", std::move(out_shape), std::move(out), {x},
                            [index = std::move(index), width](Node<T>& self) {
                              auto& g = self.inputs[0]->ensure_grad();
                              for (std::size_t r = 0; r < index.size(); ++r) {
                                if (index[r] < 0) continue;
                                T* dst = g.data() + static_cast<std::size_t>(index[r]) * width;
                                const T* src = self.grad.data() + r * width;
                                for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
                              }
                            });
}

// [B, L, d] -> [B, ceil(L/2), 2d]. Adjacent tokens are concatenated; tokens
// whose mask entry is zero, and the phantom token of an odd length, enter as
// zero vectors.
template <typename T>
Tensor<T> concat_pairs(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
  if (x.rank() != 3) throw ShapeError("concat_pairs expects [B, L, d], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), len = x.dim(1), width = x.dim(2);
  if (mask.size() != batch * len) throw ShapeError("concat_pairs mask size " + std::to_string(mask.size()));
  const std::size_t half = (len + 1) / 2;
  std::vector<std::ptrdiff_t> index(batch * half * 2, -1);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < half * 2; ++p) {
      if (p < len && mask[b * len + p]) index[b * half * 2 + p] = static_cast<std::ptrdiff_t>(b * len + p);
    }
  }
  return gather_rows(x, std::move(index), Shape{batch, half, 2 * width});
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return detail::make_op<T>("matmul", Shape{m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    const auto& A = self.inputs[0]->data;
    const auto& B = self.inputs[1]->data;
    const T* dc = self.grad.data();
    if (detail::wants_grad(self.inputs[0])) {
      auto& ga = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          T acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += dc[i * n + j] * B[p * n + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (detail::wants_grad(self.inputs[1])) {
      auto& gb = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const T av = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * dc[i * n + j];
        }
      }
    }
  });
}

// x[..., in] * weight[in, out] + bias[out]. bias may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  const std::size_t in = weight.dim(0), out_w = weight.dim(1);
  if (weight.rank() != 2 || x.shape().back() != in) {
    throw ShapeError("linear of " + shape_str(x.shape()) + " with weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_w)) {
    throw ShapeError("linear bias " + shape_str(bias.shape()) + " for " + std::to_string(out_w) + " outputs");
  }
  const std::size_t rows = x.size() / in;
  Shape shape = x.shape();
  shape.back() = out_w;
  std::vector<T> out(rows * out_w);
  const T* px = x.data().data();
  const T* pw = weight.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* orow = out.data() + r * out_w;
    if (bias.defined()) {
      std::copy_n(bias.data().data(), out_w, orow);
    } else {
      std::fill_n(orow, out_w, T(0));
    }
    const T* xrow = px + r * in;
    for (std::size_t i = 0; i < in; ++i) {
      const T xv = xrow[i];
      const T* wrow = pw + i * out_w;
      for (std::size_t o = 0; o < out_w; ++o) orow[o] += xv * wrow[o];
    }
  }
  return detail::make_op<T>(
      "linear", std::move(shape), std::move(out), {x, weight, bias}, [rows, in, out_w](Node<T>& self) {
        const T* dy = self.grad.data();
        const auto& X = self.inputs[0]->data;
        const auto& W = self.inputs[1]->data;
        if (detail::wants_grad(self.inputs[0])) {
          auto& gx = self.inputs[0]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            const T* dyr = dy + r * out_w;
            for (std::size_t i = 0; i < in; ++i) {
              const T* wrow = W.data() + i * out_w;
              T acc = 0;
              for (std::size_t o = 0; o < out_w; ++o) acc += dyr[o] * wrow[o];
              gx[r * in + i] += acc;
            }
          }
        }
        if (detail::wants_grad(self.inputs[1])) {
          auto& gw = self.inputs[1]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            const T* dyr = dy + r * out_w;
            const T* xrow = X.data() + r * in;
            for (std::size_t i = 0; i < in; ++i) {
              const T xv = xrow[i];
              T* gwrow = gw.data() + i * out_w;
              for (std::size_t o = 0; o < out_w; ++o) gwrow[o] += xv * dyr[o];
            }
          }
        }
        if (self.inputs.size() > 2 && detail::wants_grad(self.inputs[2])) {
          auto& gb = self.inputs[2]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t o = 0; o < out_w; ++o) gb[o] += dy[r * out_w + o];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization, reductions, losses

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-6) {
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm over " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) +
                     " and beta " + shape_str(beta.shape()));
  }
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  const T* px = x.data().data();
  const T* pg = gamma.data().data();
  const T* pb = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = px + r * d;
    double mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<T>(istd);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = static_cast<T>((xr[j] - mean) * istd);
      xhat[r * d + j] = h;
      out[r * d + j] = h * pg[j] + pb[j];
    }
  }
  return detail::make_op<T>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const T* dy = self.grad.data();
        const auto& G = self.inputs[1]->data;
        if (detail::wants_grad(self.inputs[1])) {
          auto& gg = self.inputs[1]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) gg[j] += dy[r * d + j] * xhat[r * d + j];
          }
        }
        if (detail::wants_grad(self.inputs[2])) {
          auto& gb = self.inputs[2]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) gb[j] += dy[r * d + j];
          }
        }
        if (detail::wants_grad(self.inputs[0])) {
          auto& gx = self.inputs[0]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0, mean_dh_h = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = dy[r * d + j] * G[j];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + j];
            }
            mean_dh /= static_cast<double>(d);
            mean_dh_h /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = dy[r * d + j] * G[j];
              gx[r * d + j] += static_cast<T>(inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h));
            }
          }
        }
      });
}

// Softmax along the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  std::vector<T> out(x.size());
  const T* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = px + r * c;
    const T mx = *std::max_element(xr, xr + c);
    T sum = 0;
    for (std::size_t j = 0; j < c; ++j) sum += (out[r * c + j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= sum;
  }
  return detail::make_op<T>("softmax", x.shape(), std::move(out), {x}, [rows, c](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.data.data() + r * c;
      const T* dy = self.grad.data() + r * c;
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += y[j] * dy[j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += y[j] * (dy[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("cross entropy expects [B, C], got " + shape_str(logits.shape()));
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw ShapeError(std::to_string(labels.size()) + " labels for logits " + shape_str(logits.shape()));
  }
  std::vector<T> probs(logits.size());
  double loss = 0;
  const T* pl = logits.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw IndexError("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
    }
    const T* row = pl + b * classes;
    const T mx = *std::max_element(row, row + classes);
    double sum = 0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(static_cast<double>(row[c] - mx));
    const double lse = static_cast<double>(mx) + std::log(sum);
    loss += lse - static_cast<double>(row[label]);
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = static_cast<T>(std::exp(row[c] - lse));
  }
  loss /= static_cast<double>(batch);
  std::vector<int> saved(labels.begin(), labels.end());
  return detail::make_op<T>("softmax_cross_entropy", Shape{1}, std::vector<T>{static_cast<T>(loss)}, {logits},
                            [batch, classes, probs = std::move(probs), saved = std::move(saved)](Node<T>& self) {
                              auto& g = self.inputs[0]->ensure_grad();
                              const T scale = self.grad[0] / static_cast<T>(batch);
                              for (std::size_t b = 0; b < batch; ++b) {
                                for (std::size_t c = 0; c < classes; ++c) {
                                  T p = probs[b * classes + c];
                                  if (static_cast<int>(c) == saved[b]) p -= T(1);
                                  g[b * classes + c] += scale * p;
                                }
                              }
                            });
}

template <typename T>
Tensor<T> mean_over_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("mean over axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) shape.push_back(s[i]);
  }
  if (shape.empty()) shape.push_back(1);
  std::vector<T> out(outer * inner, T(0));
  const T* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += px[(o * n + k) * inner + i];
    }
  }
  for (auto& v : out) v /= static_cast<T>(n);
  return detail::make_op<T>("mean_over_axis", std::move(shape), std::move(out), {x}, [outer, n, inner](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const T scale = T(1) / static_cast<T>(n);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = 0; i < inner; ++i) g[(o * n + k) * inner + i] += self.grad[o * inner + i] * scale;
      }
    }
  });
}

// x[G, n, d] -> [G, d]: mean over the entries whose mask is set. A group with
// no set entries yields a zero vector.
template <typename T>
Tensor<T> masked_mean(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
  if (x.rank() != 3) throw ShapeError("masked_mean expects [G, n, d], got " + shape_str(x.shape()));
  const std::size_t groups = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (mask.size() != groups * n) throw ShapeError("masked_mean mask size " + std::to_string(mask.size()));
  std::vector<T> out(groups * d, T(0));
  std::vector<T> weight(groups, T(0));
  const T* px = x.data().data();
  for (std::size_t g = 0; g < groups; ++g) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask[g * n + i]) continue;
      ++count;
      const T* row = px + (g * n + i) * d;
      for (std::size_t j = 0; j < d; ++j) out[g * d + j] += row[j];
    }
    if (count == 0) continue;
    weight[g] = T(1) / static_cast<T>(count);
    for (std::size_t j = 0; j < d; ++j) out[g * d + j] *= weight[g];
  }
  std::vector<std::uint8_t> saved(mask.begin(), mask.end());
  return detail::make_op<T>(
      "masked_mean", Shape{groups, d}, std::move(out), {x},
      [groups, n, d, weight = std::move(weight), saved = std::move(saved)](Node<T>& self) {
        auto& gx = self.inputs[0]->ensure_grad();
        for (std::size_t g = 0; g < groups; ++g) {
          for (std::size_t i = 0; i < n; ++i) {
            if (!saved[g * n + i]) continue;
            for (std::size_t j = 0; j < d; ++j) gx[(g * n + i) * d + j] += self.grad[g * d + j] * weight[g];
          }
        }
      });
}

// Scalar sum of x weighted by a constant array; projects any tensor to a loss.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::span<const T> weights) {
  if (weights.size() != x.size()) throw ShapeError("weighted_sum weights do not match " + shape_str(x.shape()));
  T acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x.data()[i] * weights[i];
  std::vector<T> w(weights.begin(), weights.end());
  return detail::make_op<T>("weighted_sum", Shape{1}, std::vector<T>{acc}, {x}, [w = std::move(w)](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * w[i];
  });
}

// ---------------------------------------------------------------------------
// Sequence operations

// Rows of table[V, d] selected by ids; output shape is prefix + [d].
template <typename T>
Tensor<T> embedding_gather(const Tensor<T>& table, std::span<const std::int32_t> ids, Shape prefix) {
  if (table.rank() != 2) throw ShapeError("embedding table must be [V, d], got " + shape_str(table.shape()));
  if (shape_numel(prefix) != ids.size()) {
    throw ShapeError(std::to_string(ids.size()) + " ids for output prefix " + shape_str(prefix));
  }
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  const T* pt = table.data().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(pt + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  prefix.push_back(d);
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return detail::make_op<T>("embedding_gather", std::move(prefix), std::move(out), {table},
                            [d, saved = std::move(saved)](Node<T>& self) {
                              auto& g = self.inputs[0]->ensure_grad();
                              for (std::size_t i = 0; i < saved.size(); ++i) {
                                T* dst = g.data() + static_cast<std::size_t>(saved[i]) * d;
                                const T* src = self.grad.data() + i * d;
                                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                              }
                            });
}

inline std::size_t conv_output_length(std::size_t length, std::size_t kernel, std::size_t stride) {
  if (length < kernel) throw SequenceTooShortError(length, kernel);
  return (length - kernel) / stride + 1;
}

// Valid 1D convolution over the sequence axis: x[B, L, in], kernel[k, in, out].
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride) {
  if (x.rank() != 3 || kernel.rank() != 3 || x.dim(2) != kernel.dim(1)) {
    throw ShapeError("conv1d of " + shape_str(x.shape()) + " with kernel " + shape_str(kernel.shape()));
  }
  if (stride == 0) throw ShapeError("conv1d stride must be >= 1");
  const std::size_t batch = x.dim(0), len = x.dim(1), din = x.dim(2);
  const std::size_t k = kernel.dim(0), dout = kernel.dim(2);
  if (bias.defined() && bias.size() != dout) throw ShapeError("conv1d bias " + shape_str(bias.shape()));
  const std::size_t out_len = conv_output_length(len, k, stride);
  std::vector<T> out(batch * out_len * dout);
  const T* px = x.data().data();
  const T* pk = kernel.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < out_len; ++t) {
      T* orow = out.data() + (b * out_len + t) * dout;
      if (bias.defined()) {
        std::copy_n(bias.data().data(), dout, orow);
      } else {
        std::fill_n(orow, dout, T(0));
      }
      const T* xin = px + (b * len + t * stride) * din;
      // The k rows of x under the kernel are contiguous, as are the k*din rows of the kernel.
      for (std::size_t r = 0; r < k * din; ++r) {
        const T xv = xin[r];
        const T* krow = pk + r * dout;
        for (std::size_t o = 0; o < dout; ++o) orow[o] += xv * krow[o];
      }
    }
  }
  return detail::make_op<T>(
      "conv1d", Shape{batch, out_len, dout}, std::move(out), {x, kernel, bias},
      [batch, len, din, k, dout, out_len, stride](Node<T>& self) {
        const auto& X = self.inputs[0]->data;
        const auto& K = self.inputs[1]->data;
        const T* dy = self.grad.data();
        const bool gx_on = detail::wants_grad(self.inputs[0]);
        const bool gk_on = detail::wants_grad(self.inputs[1]);
        T* gx = gx_on ? self.inputs[0]->ensure_grad().data() : nullptr;
        T* gk = gk_on ? self.inputs[1]->ensure_grad().data() : nullptr;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t t = 0; t < out_len; ++t) {
            const T* dyr = dy + (b * out_len + t) * dout;
            const std::size_t base = (b * len + t * stride) * din;
            for (std::size_t r = 0; r < k * din; ++r) {
              const T* krow = K.data() + r * dout;
              if (gx_on) {
                T acc = 0;
                for (std::size_t o = 0; o < dout; ++o) acc += dyr[o] * krow[o];
                gx[base + r] += acc;
              }
              if (gk_on) {
                const T xv = X[base + r];
                T* gkrow = gk + r * dout;
                for (std::size_t o = 0; o < dout; ++o) gkrow[o] += xv * dyr[o];
              }
            }
          }
        }
        if (self.inputs.size() > 2 && detail::wants_grad(self.inputs[2])) {
          auto& gb = self.inputs[2]->ensure_grad();
          for (std::size_t r = 0; r < batch * out_len; ++r) {
            for (std::size_t o = 0; o < dout; ++o) gb[o] += dy[r * dout + o];
          }
        }
      });
}

// conv1d(embedding_gather(table, ids), kernel, bias, stride) computed through
// per-tap projections of the table: P[j] = table K[j], out[t] = bias + sum_j P[j][ids[t s + j]].
// ids is [B, L] row-major.
template <typename T>
Tensor<T> embedding_conv1d(const Tensor<T>& table, std::span<const std::int32_t> ids, std::size_t batch,
                           const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride) {
  if (table.rank() != 2 || kernel.rank() != 3 || table.dim(1) != kernel.dim(1)) {
    throw ShapeError("embedding_conv1d of table " + shape_str(table.shape()) + " with kernel " +
                     shape_str(kernel.shape()));
  }
  if (stride == 0) throw ShapeError("conv1d stride must be >= 1");
  if (batch == 0 || ids.size() % batch != 0) throw ShapeError("ids do not split into " + std::to_string(batch) + " rows");
  const std::size_t vocab = table.dim(0), din = table.dim(1), k = kernel.dim(0), dout = kernel.dim(2);
  const std::size_t len = ids.size() / batch;
  if (bias.defined() && bias.size() != dout) throw ShapeError("conv1d bias " + shape_str(bias.shape()));
  const std::size_t out_len = conv_output_length(len, k, stride);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("token id " + std::to_string(id) + " outside table of " + std::to_string(vocab) + " rows");
    }
  }
  const T* pt = table.data().data();
  const T* pk = kernel.data().data();
  // proj[(j * vocab + v) * dout + o]
  std::vector<T> proj(k * vocab * dout, T(0));
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t v = 0; v < vocab; ++v) {
      T* prow = proj.data() + (j * vocab + v) * dout;
      for (std::size_t c = 0; c < din; ++c) {
        const T tv = pt[v * din + c];
        const T* krow = pk + (j * din + c) * dout;
        for (std::size_t o = 0; o < dout; ++o) prow[o] += tv * krow[o];
      }
    }
  }
  std::vector<T> out(batch * out_len * dout);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < out_len; ++t) {
      T* orow = out.data() + (b * out_len + t) * dout;
      if (bias.defined()) {
        std::copy_n(bias.data().data(), dout, orow);
      } else {
        std::fill_n(orow, dout, T(0));
      }
      const std::int32_t* window = ids.data() + b * len + t * stride;
      for (std::size_t j = 0; j < k; ++j) {
        const T* prow = proj.data() + (j * vocab + static_cast<std::size_t>(window[j])) * dout;
        for (std::size_t o = 0; o < dout; ++o) orow[o] += prow[o];
      }
    }
  }
  std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
  return detail::make_op<T>(
      "embedding_conv1d", Shape{batch, out_len, dout}, std::move(out), {table, kernel, bias},
      [ids = std::move(id_copy), batch, len, vocab, din, k, dout, out_len, stride](Node<T>& self) {
        const T* dy = self.grad.data();
        std::vector<T> dproj(k * vocab * dout, T(0));
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t t = 0; t < out_len; ++t) {
            const T* dyr = dy + (b * out_len + t) * dout;
            const std::int32_t* window = ids.data() + b * len + t * stride;
            for (std::size_t j = 0; j < k; ++j) {
              T* drow = dproj.data() + (j * vocab + static_cast<std::size_t>(window[j])) * dout;
              for (std::size_t o = 0; o < dout; ++o) drow[o] += dyr[o];
            }
          }
        }
        const auto& table_data = self.inputs[0]->data;
        const auto& kernel_data = self.inputs[1]->data;
        if (detail::wants_grad(self.inputs[0])) {
          auto& gt = self.inputs[0]->ensure_grad();
          for (std::size_t j = 0; j < k; ++j) {
            for (std::size_t v = 0; v < vocab; ++v) {
              const T* drow = dproj.data() + (j * vocab + v) * dout;
              for (std::size_t c = 0; c < din; ++c) {
                const T* krow = kernel_data.data() + (j * din + c) * dout;
                T acc = 0;
                for (std::size_t o = 0; o < dout; ++o) acc += drow[o] * krow[o];
                gt[v * din + c] += acc;
              }
            }
          }
        }
        if (detail::wants_grad(self.inputs[1])) {
          auto& gk = self.inputs[1]->ensure_grad();
          for (std::size_t j = 0; j < k; ++j) {
            for (std::size_t v = 0; v < vocab; ++v) {
              const T* drow = dproj.data() + (j * vocab + v) * dout;
              for (std::size_t c = 0; c < din; ++c) {
                const T tv = table_data[v * din + c];
                T* gkrow = gk.data() + (j * din + c) * dout;
                for (std::size_t o = 0; o < dout; ++o) gkrow[o] += tv * drow[o];
              }
            }
          }
        }
        if (self.inputs.size() > 2 && detail::wants_grad(self.inputs[2])) {
          auto& gb = self.inputs[2]->ensure_grad();
          for (std::size_t r = 0; r < batch * out_len; ++r) {
            for (std::size_t o = 0; o < dout; ++o) gb[o] += dy[r * dout + o];
          }
        }
      });
}

// Mean over sliding windows of k positions with the given stride: x[B, L, d] -> [B, L', d].
template <typename T>
Tensor<T> window_mean(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  if (x.rank() != 3) throw ShapeError("window_mean expects [B, L, d], got " + shape_str(x.shape()));
  if (stride == 0 || k == 0) throw ShapeError("window_mean kernel and stride must be >= 1");
  const std::size_t batch = x.dim(0), len = x.dim(1), d = x.dim(2);
  const std::size_t out_len = conv_output_length(len, k, stride);
  std::vector<T> out(batch * out_len * d, T(0));
  const T* px = x.data().data();
  const T inv = T(1) / static_cast<T>(k);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < out_len; ++t) {
      T* orow = out.data() + (b * out_len + t) * d;
      for (std::size_t j = 0; j < k; ++j) {
        const T* xr = px + (b * len + t * stride + j) * d;
        for (std::size_t c = 0; c < d; ++c) orow[c] += xr[c];
      }
      for (std::size_t c = 0; c < d; ++c) orow[c] *= inv;
    }
  }
  return detail::make_op<T>("window_mean", Shape{batch, out_len, d}, std::move(out), {x},
                            [batch, len, d, k, stride, out_len, inv](Node<T>& self) {
                              auto& gx = self.inputs[0]->ensure_grad();
                              for (std::size_t b = 0; b < batch; ++b) {
                                for (std::size_t t = 0; t < out_len; ++t) {
                                  const T* dyr = self.grad.data() + (b * out_len + t) * d;
                                  for (std::size_t j = 0; j < k; ++j) {
                                    T* gr = gx.data() + (b * len + t * stride + j) * d;
                                    for (std::size_t c = 0; c < d; ++c) gr[c] += dyr[c] * inv;
                                  }
                                }
                              }
                            });
}

namespace detail {

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace detail

// Scaled dot-product logits of one attention call, with -inf at disallowed
// (query, key) pairs. Layout [G, heads, n, n]. Inspection only; not recorded.
template <typename T>
std::vector<T> attention_logits(const Tensor<T>& qkv, std::size_t heads, std::span<const std::uint8_t> allowed) {
  const std::size_t groups = qkv.dim(0), n = qkv.dim(1), d3 = qkv.dim(2), d = d3 / 3, dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const T* p = qkv.data().data();
  std::vector<T> out(groups * heads * n * n);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          T& s = out[((g * heads + h) * n + i) * n + j];
          s = allowed[(g * n + i) * n + j]
                  ? detail::dot(p + (g * n + i) * d3 + h * dh, p + (g * n + j) * d3 + d + h * dh, dh) * scale
                  : -std::numeric_limits<T>::infinity();
        }
      }
    }
  }
  return out;
}

// Multi-head self-attention over independent groups.
//   qkv:     [G, n, 3d], laid out as [queries | keys | values], heads split evenly within each.
//   allowed: [G, n, n], nonzero where query i may attend to key j.
// A query with no allowed key produces a zero output row.
template <typename T>
Tensor<T> attention(const Tensor<T>& qkv, std::size_t heads, std::span<const std::uint8_t> allowed) {
  if (qkv.rank() != 3 || qkv.dim(2) % 3 != 0) {
    throw ShapeError("attention expects [G, n, 3d], got " + shape_str(qkv.shape()));
  }
  const std::size_t groups = qkv.dim(0), n = qkv.dim(1), d3 = qkv.dim(2), d = d3 / 3;
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("embedding width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (allowed.size() != groups * n * n) throw ShapeError("attention mask size " + std::to_string(allowed.size()));
  const std::size_t dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const T* p = qkv.data().data();
  std::vector<T> out(groups * n * d, T(0));
  std::vector<T> probs(groups * heads * n * n, T(0));
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        const T* q = p + (g * n + i) * d3 + h * dh;
        const std::uint8_t* ok = allowed.data() + (g * n + i) * n;
        T* row = probs.data() + ((g * heads + h) * n + i) * n;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          if (!ok[j]) continue;
          row[j] = detail::dot(q, p + (g * n + j) * d3 + d + h * dh, dh) * scale;
          mx = std::max(mx, row[j]);
        }
        if (mx == -std::numeric_limits<T>::infinity()) continue;
        T sum = 0;
        for (std::size_t j = 0; j < n; ++j) {
          if (!ok[j]) continue;
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        T* o = out.data() + (g * n + i) * d + h * dh;
        for (std::size_t j = 0; j < n; ++j) {
          if (!ok[j]) continue;
          row[j] /= sum;
          const T* v = p + (g * n + j) * d3 + 2 * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) o[c] += row[j] * v[c];
        }
      }
    }
  }
  return detail::make_op<T>(
      "attention", Shape{groups, n, d}, std::move(out), {qkv},
      [groups, heads, n, d, d3, dh, scale, probs = std::move(probs)](Node<T>& self) {
        const T* p = self.inputs[0]->data.data();
        T* gp = self.inputs[0]->ensure_grad().data();
        std::vector<T> dprob(n);
        for (std::size_t g = 0; g < groups; ++g) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < n; ++i) {
              const T* row = probs.data() + ((g * heads + h) * n + i) * n;
              const T* dout = self.grad.data() + (g * n + i) * d + h * dh;
              T weighted = 0;
              for (std::size_t j = 0; j < n; ++j) {
                if (row[j] == T(0)) continue;
                const T* v = p + (g * n + j) * d3 + 2 * d + h * dh;
                T* dv = gp + (g * n + j) * d3 + 2 * d + h * dh;
                dprob[j] = detail::dot(dout, v, dh);
                weighted += row[j] * dprob[j];
                for (std::size_t c = 0; c < dh; ++c) dv[c] += row[j] * dout[c];
              }
              const T* q = p + (g * n + i) * d3 + h * dh;
              T* dq = gp + (g * n + i) * d3 + h * dh;
              for (std::size_t j = 0; j < n; ++j) {
                if (row[j] == T(0)) continue;
                const T ds = row[j] * (dprob[j] - weighted) * scale;
                const T* k = p + (g * n + j) * d3 + d + h * dh;
                T* dk = gp + (g * n + j) * d3 + d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                  dq[c] += ds * k[c];
                  dk[c] += ds * q[c];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradcheckOptions {
  double step = 1e-5;
  // Coordinates checked per tensor; 0 checks all of them.
  std::size_t max_coords_per_tensor = 0;
  // Denominator floor of the relative error, absorbing round-off on near-zero gradients.
  double abs_floor = 1e-6;
  std::uint64_t seed = 0;
};

struct GradcheckEntry {
  std::string name;
  std::size_t coords_checked = 0;
  double max_rel_error = 0;
  double max_abs_error = 0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;

  double max_rel_error() const {
    double worst = 0;
    for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
    return worst;
  }
  bool passed(double tolerance) const { return max_rel_error() < tolerance; }
};

// Central finite differences against the analytic gradient of loss_fn(), a
// scalar-valued closure over the given parameters. Runs in double precision.
template <class LossFn>
GradcheckReport gradcheck(LossFn&& loss_fn, std::vector<std::pair<std::string, Tensor<double>>> params,
                          const GradcheckOptions& options = {}) {
  for (auto& [name, p] : params) {
    if (!p.requires_grad()) throw Error("gradcheck parameter " + name + " does not require grad");
    p.zero_grad();
  }
  {
    Tensor<double> loss = loss_fn();
    GradTape<double>(loss).backward(/*check_finite=*/true);
  }
  std::mt19937_64 rng(options.seed);
  GradcheckReport report;
  for (auto& [name, p] : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_tensor && coords.size() > options.max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_tensor);
    }
    GradcheckEntry entry{name, coords.size(), 0.0, 0.0};
    auto values = p.data();
    for (std::size_t idx : coords) {
      const double saved = values[idx];
      values[idx] = saved + options.step;
      const double plus = loss_fn().item();
      values[idx] = saved - options.step;
      const double minus = loss_fn().item();
      values[idx] = saved;
      const double numeric = (plus - minus) / (2 * options.step);
      const double err = std::abs(analytic[idx] - numeric);
      const double denom = std::max({std::abs(analytic[idx]), std::abs(numeric), options.abs_floor});
      entry.max_abs_error = std::max(entry.max_abs_error, err);
      entry.max_rel_error = std::max(entry.max_rel_error, err / denom);
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace byteformer
