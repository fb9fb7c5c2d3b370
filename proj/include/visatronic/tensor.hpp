#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// Every op produces a new node. When gradients are enabled and any input
// requires grad, the node keeps its inputs and a backward closure that
// accumulates into their `grad` buffers. `backward(loss)` orders the graph
// topologically (a Tape) and runs the closures once each, in reverse.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "visatronic/error.hpp"

namespace visatronic::tc {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool& checked_mode_flag() {
  thread_local bool enabled = false;
  return enabled;
}

// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Checked mode verifies every op output is finite.
inline void set_checked_mode(bool on) { checked_mode_flag() = on; }

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    require(numel_of(shape) == data.size(), ErrorKind::kShape,
            "tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return from_data(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return from_data(std::move(shape), std::vector<T>(n, v), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) { return from_data({}, {v}, requires_grad); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  const std::vector<T>& data() const { return node_->value; }
  // Direct writes are for leaves (parameters, inputs) only.
  std::vector<T>& mutable_data() { return node_->value; }

  const std::vector<T>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  std::vector<T>& mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->value.size(), T(0));
    else node_->grad.clear();
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) node_->ensure_grad();
  }

  T item() const {
    require(numel() == 1, ErrorKind::kContract, "item() on a tensor with " + std::to_string(numel()) + " elements");
    return node_->value[0];
  }
  T at(std::size_t i) const { return node_->value.at(i); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  // Detached copy of the value.
  Tensor detach() const { return from_data(shape(), data(), false); }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
void check_finite(const Node<T>& n) {
  if (!checked_mode_flag()) return;
  for (T v : n.value) {
    if (!std::isfinite(static_cast<double>(v))) {
      fail(ErrorKind::kNumeric, std::string("non-finite value produced by op '") + n.op + "'");
    }
  }
}

template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (grad_mode_flag()) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  check_finite(*n);
  return Tensor<T>(std::move(n));
}

template <class T>
std::vector<T>* grad_of(Node<T>& parent) {
  if (!parent.requires_grad) return nullptr;
  parent.ensure_grad();
  return &parent.grad;
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[m,n] += op(A) * op(B), row-major buffers; op transposes when asked.
// A is stored [m,k] (or [k,m] when trans_a), B is [k,n] (or [n,k]).
// Operands are staged in Eigen-aligned storage: with wide SIMD, Eigen's
// small-product kernels pick a summation order from the buffer address, and
// std::vector storage would make results differ between identical calls.
template <class T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool trans_a = false,
              bool trans_b = false) {
  using Map = Eigen::Map<const RowMat<T>>;
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  const RowMat<T> A = Map(a, trans_a ? ei(k) : ei(m), trans_a ? ei(m) : ei(k));
  const RowMat<T> B = Map(b, trans_b ? ei(n) : ei(k), trans_b ? ei(k) : ei(n));
  RowMat<T> C(ei(m), ei(n));
  if (!trans_a && !trans_b) C.noalias() = A * B;
  if (!trans_a && trans_b) C.noalias() = A * B.transpose();
  if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
  if (trans_a && trans_b) C.noalias() = A.transpose() * B.transpose();
  const T* r = C.data();
  for (std::size_t i = 0; i < m * n; ++i) c[i] += r[i];
}

template <class T>
std::vector<T> transpose2d(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  }
  return out;
}

inline void expect(bool ok, const std::string& msg) { require(ok, ErrorKind::kShape, msg); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape and backward

template <class T>
class Tape {
 public:
  // Nodes reachable from `root` that require grad, inputs before outputs.
  explicit Tape(Node<T>* root) {
    if (root == nullptr || !root->requires_grad) return;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<T>* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  const std::vector<Node<T>*>& order() const noexcept { return order_; }

  void run_backward() {
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

 private:
  std::vector<Node<T>*> order_;
};

// Accumulates d(loss)/d(leaf) into every reachable leaf's grad buffer.
template <class T>
void backward(const Tensor<T>& loss, T seed = T(1)) {
  require(loss.numel() == 1, ErrorKind::kContract,
          "backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  Tape<T> tape(loss.node());
  loss.node()->ensure_grad();
  loss.node()->grad[0] += seed;
  tape.run_backward();
  // Interior buffers are no longer needed.
  for (Node<T>* n : tape.order()) {
    if (n->backward) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  return detail::make_result<T>("add", a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
    for (int k = 0; k < 2; ++k) {
      if (auto* g = detail::grad_of(*self.parents[k])) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect(a.shape() == b.shape(), "sub: shape mismatch");
  std::vector<T> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
  return detail::make_result<T>("sub", a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
    if (auto* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = detail::grad_of(*self.parents[1])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  return detail::make_result<T>("mul", a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = detail::grad_of(*self.parents[1])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data());
  for (T& v : out) v *= s;
  return detail::make_result<T>("scale", a.shape(), std::move(out), {a.node_ptr()}, [s](Node<T>& self) {
    if (auto* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
    }
  });
}

// x[..., n] + bias[n], broadcast over all leading dimensions.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::expect(x.rank() >= 1 && bias.rank() == 1 && bias.dim(0) == x.shape().back(), "add_bias: shape mismatch");
  const std::size_t n = bias.dim(0);
  std::vector<T> out(x.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.data()[i % n];
  return detail::make_result<T>("add_bias", x.shape(), std::move(out), {x.node_ptr(), bias.node_ptr()},
                                [n](Node<T>& self) {
                                  if (auto* g = detail::grad_of(*self.parents[0])) {
                                    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
                                  }
                                  if (auto* g = detail::grad_of(*self.parents[1])) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % n] += self.grad[i];
                                  }
                                });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    out[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return detail::make_result<T>("gelu", x.shape(), std::move(out), {x.node_ptr()}, [inv_sqrt2](Node<T>& self) {
    if (auto* g = detail::grad_of(*self.parents[0])) {
      const auto& xv = self.parents[0]->value;
      const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
      for (std::size_t i = 0; i < g->size(); ++i) {
        const T v = xv[i];
        const T d = T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * std::exp(T(-0.5) * v * v) * inv_sqrt_2pi;
        (*g)[i] += self.grad[i] * d;
      }
    }
  });
}

// Multiplies by a Bernoulli(1 - p) mask scaled by 1 / (1 - p).
template <class T, class Rng>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  require(p < 1.0, ErrorKind::kConfig, "dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<T> mask(x.numel());
  const T s = T(1.0 / (1.0 - p));
  for (T& m : mask) m = keep(rng) ? s : T(0);
  return mul(x, Tensor<T>::from_data(x.shape(), std::move(mask)));
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return detail::make_result<T>("sum", {}, {acc}, {x.node_ptr()}, [](Node<T>& self) {
    if (auto* g = detail::grad_of(*self.parents[0])) {
      for (T& v : *g) v += self.grad[0];
    }
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  detail::expect(x.numel() > 0, "mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

enum class Reduce { kSum, kMean, kMax };

// x[n * group, d] -> [n, d], reducing each consecutive block of `group` rows.
// Max routes the gradient to the first maximal row.
template <class T>
Tensor<T> group_reduce(const Tensor<T>& x, std::size_t group, Reduce kind) {
  detail::expect(x.rank() == 2 && group > 0 && x.dim(0) % group == 0, "group_reduce: rows must be a multiple of group");
  const std::size_t n = x.dim(0) / group, d = x.dim(1);
  std::vector<T> out(n * d, T(0));
  std::vector<std::uint32_t> argmax;
  const auto& xv = x.data();
  if (kind == Reduce::kMax) {
    argmax.assign(n * d, 0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < d; ++c) {
        std::size_t best = 0;
        T bv = xv[(i * group) * d + c];
        for (std::size_t r = 1; r < group; ++r) {
          const T v = xv[(i * group + r) * d + c];
          if (v > bv) {
            bv = v;
            best = r;
          }
        }
        out[i * d + c] = bv;
        argmax[i * d + c] = static_cast<std::uint32_t>(best);
      }
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t r = 0; r < group; ++r) {
        const T* row = xv.data() + (i * group + r) * d;
        for (std::size_t c = 0; c < d; ++c) out[i * d + c] += row[c];
      }
    }
    if (kind == Reduce::kMean) {
      for (T& v : out) v /= static_cast<T>(group);
    }
  }
  return detail::make_result<T>(
      "group_reduce", {n, d}, std::move(out), {x.node_ptr()},
      [n, d, group, kind, argmax = std::move(argmax)](Node<T>& self) {
        auto* g = detail::grad_of(*self.parents[0]);
        if (!g) return;
        const T s = kind == Reduce::kMean ? T(1) / static_cast<T>(group) : T(1);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t c = 0; c < d; ++c) {
            const T up = self.grad[i * d + c];
            if (kind == Reduce::kMax) {
              (*g)[(i * group + argmax[i * d + c]) * d + c] += up;
            } else {
              for (std::size_t r = 0; r < group; ++r) (*g)[(i * group + r) * d + c] += up * s;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::expect(numel_of(shape) == x.numel(), "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return detail::make_result<T>("reshape", std::move(shape), x.data(), {x.node_ptr()}, [](Node<T>& self) {
    if (auto* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::expect(x.rank() == 2, "transpose: rank-2 tensors only");
  const std::size_t r = x.dim(0), c = x.dim(1);
  return detail::make_result<T>("transpose", {c, r}, detail::transpose2d(x.data().data(), r, c), {x.node_ptr()},
                                [r, c](Node<T>& self) {
                                  if (auto* g = detail::grad_of(*self.parents[0])) {
                                    for (std::size_t i = 0; i < r; ++i) {
                                      for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += self.grad[j * r + i];
                                    }
                                  }
                                });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis = 0) {
  detail::expect(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  detail::expect(axis < s0.size(), "concat: axis out of range");
  std::size_t outer = 1, inner = 1, total = 0;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    detail::expect(p.rank() == s0.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < s0.size(); ++i) {
      detail::expect(i == axis || p.dim(i) == s0[i], "concat: shape mismatch off the concat axis");
    }
    widths.push_back(p.dim(axis) * inner);
    total += p.dim(axis);
  }
  Shape shape = s0;
  shape[axis] = total;
  const std::size_t row = total * inner;
  std::vector<T> out(outer * row);
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data() + o * widths[k], widths[k], out.data() + o * row + off);
    }
    off += widths[k];
    parents.push_back(parts[k].node_ptr());
  }
  return detail::make_result<T>("concat", std::move(shape), std::move(out), std::move(parents),
                                [outer, row, widths = std::move(widths)](Node<T>& self) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                    if (auto* g = detail::grad_of(*self.parents[k])) {
                                      for (std::size_t o = 0; o < outer; ++o) {
                                        for (std::size_t i = 0; i < widths[k]; ++i) {
                                          (*g)[o * widths[k] + i] += self.grad[o * row + off + i];
                                        }
                                      }
                                    }
                                    off += widths[k];
                                  }
                                });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  detail::expect(axis < x.rank() && start + length <= x.dim(axis), "slice: out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t in_row = x.dim(axis) * inner, out_row = length * inner, off = start * inner;
  std::vector<T> out(outer * out_row);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + o * in_row + off, out_row, out.data() + o * out_row);
  }
  Shape shape = x.shape();
  shape[axis] = length;
  return detail::make_result<T>("slice", std::move(shape), std::move(out), {x.node_ptr()},
                                [outer, in_row, out_row, off](Node<T>& self) {
                                  if (auto* g = detail::grad_of(*self.parents[0])) {
                                    for (std::size_t o = 0; o < outer; ++o) {
                                      for (std::size_t i = 0; i < out_row; ++i) {
                                        (*g)[o * in_row + off + i] += self.grad[o * out_row + i];
                                      }
                                    }
                                  }
                                });
}

// Rows of `table` selected by `ids`; also used to permute rows.
template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids) {
  detail::expect(table.rank() == 2, "embedding_lookup: table must be rank 2");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<T> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && static_cast<std::size_t>(idx[i]) < rows, ErrorKind::kContract,
            "embedding_lookup: id " + std::to_string(idx[i]) + " outside table of " + std::to_string(rows) + " rows");
    std::copy_n(table.data().data() + static_cast<std::size_t>(idx[i]) * d, d, out.data() + i * d);
  }
  const std::size_t n = idx.size();
  return detail::make_result<T>("embedding_lookup", {n, d}, std::move(out), {table.node_ptr()},
                                [d, idx = std::move(idx)](Node<T>& self) {
                                  if (auto* g = detail::grad_of(*self.parents[0])) {
                                    for (std::size_t i = 0; i < idx.size(); ++i) {
                                      T* dst = g->data() + static_cast<std::size_t>(idx[i]) * d;
                                      const T* src = self.grad.data() + i * d;
                                      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                                    }
                                  }
                                });
}

// out[i] = x[i, idx[i]]
template <class T>
Tensor<T> gather(const Tensor<T>& x, std::span<const int> idx) {
  detail::expect(x.rank() == 2 && x.dim(0) == idx.size(), "gather: need x[n, c] with n indices");
  const std::size_t c = x.dim(1);
  std::vector<int> cols(idx.begin(), idx.end());
  std::vector<T> out(cols.size());
  for (std::size_t i = 0; i < cols.size(); ++i) {
    require(cols[i] >= 0 && static_cast<std::size_t>(cols[i]) < c, ErrorKind::kContract, "gather: index out of range");
    out[i] = x.data()[i * c + static_cast<std::size_t>(cols[i])];
  }
  const std::size_t n = cols.size();
  return detail::make_result<T>("gather", {n}, std::move(out), {x.node_ptr()},
                                [c, cols = std::move(cols)](Node<T>& self) {
                                  if (auto* g = detail::grad_of(*self.parents[0])) {
                                    for (std::size_t i = 0; i < cols.size(); ++i) {
                                      (*g)[i * c + static_cast<std::size_t>(cols[i])] += self.grad[i];
                                    }
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                 "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result<T>("matmul", {m, n}, std::move(out), {a.node_ptr(), b.node_ptr()},
                                [m, k, n](Node<T>& self) {
                                  const auto& av = self.parents[0]->value;
                                  const auto& bv = self.parents[1]->value;
                                  if (auto* g = detail::grad_of(*self.parents[0])) {
                                    detail::gemm_acc(self.grad.data(), bv.data(), g->data(), m, n, k, false, true);
                                  }
                                  if (auto* g = detail::grad_of(*self.parents[1])) {
                                    detail::gemm_acc(av.data(), self.grad.data(), g->data(), k, m, n, true, false);
                                  }
                                });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Normalisation and activations over the last axis

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  detail::expect(x.rank() >= 1 && x.shape().back() > 0, "softmax: empty last axis");
  const std::size_t c = x.shape().back(), rows = x.numel() / c;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * c;
    T* o = out.data() + r * c;
    const T mx = *std::max_element(in, in + c);
    T z = T(0);
    for (std::size_t j = 0; j < c; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[j] /= z;
  }
  return detail::make_result<T>("softmax", x.shape(), std::move(out), {x.node_ptr()}, [rows, c](Node<T>& self) {
    if (auto* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = self.value.data() + r * c;
        const T* dy = self.grad.data() + r * c;
        T dot = T(0);
        for (std::size_t j = 0; j < c; ++j) dot += dy[j] * y[j];
        for (std::size_t j = 0; j < c; ++j) (*g)[r * c + j] += y[j] * (dy[j] - dot);
      }
    }
  });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  detail::expect(x.rank() >= 1 && x.shape().back() > 0, "log_softmax: empty last axis");
  const std::size_t c = x.shape().back(), rows = x.numel() / c;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * c;
    T* o = out.data() + r * c;
    const T mx = *std::max_element(in, in + c);
    T z = T(0);
    for (std::size_t j = 0; j < c; ++j) z += std::exp(in[j] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) o[j] = in[j] - lse;
  }
  return detail::make_result<T>("log_softmax", x.shape(), std::move(out), {x.node_ptr()}, [rows, c](Node<T>& self) {
    if (auto* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = self.value.data() + r * c;
        const T* dy = self.grad.data() + r * c;
        T total = T(0);
        for (std::size_t j = 0; j < c; ++j) total += dy[j];
        for (std::size_t j = 0; j < c; ++j) (*g)[r * c + j] += dy[j] - std::exp(y[j]) * total;
      }
    }
  });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::expect(x.rank() >= 1, "layer_norm: rank >= 1 required");
  const std::size_t d = x.shape().back(), rows = x.numel() / d;
  detail::expect(gamma.rank() == 1 && gamma.dim(0) == d && beta.rank() == 1 && beta.dim(0) == d,
                 "layer_norm: gain/bias must match the last axis");
  std::vector<T> out(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (in[j] - mu) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gamma.data()[j] + beta.data()[j];
    }
  }
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const auto& gam = self.parents[1]->value;
        auto* gx = detail::grad_of(*self.parents[0]);
        auto* gg = detail::grad_of(*self.parents[1]);
        auto* gb = detail::grad_of(*self.parents[2]);
        std::vector<T> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dy = self.grad.data() + r * d;
          const T* xh = xhat.data() + r * d;
          if (gg) for (std::size_t j = 0; j < d; ++j) (*gg)[j] += dy[j] * xh[j];
          if (gb) for (std::size_t j = 0; j < d; ++j) (*gb)[j] += dy[j];
          if (gx) {
            T m1 = T(0), m2 = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = dy[j] * gam[j];
              m1 += dxhat[j];
              m2 += dxhat[j] * xh[j];
            }
            m1 /= static_cast<T>(d);
            m2 /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) (*gx)[r * d + j] += inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Rotary position embedding and attention

// Rotates consecutive pairs (2i, 2i+1) of one head vector by
// position * base^(-2i / head_dim).
template <class T>
void rope_rotate_inplace(std::span<T> v, double position, double base, double sign = 1.0) {
  const std::size_t hd = v.size();
  for (std::size_t i = 0; i + 1 < hd; i += 2) {
    const double theta = sign * position * std::pow(base, -static_cast<double>(i) / static_cast<double>(hd));
    const T c = static_cast<T>(std::cos(theta)), s = static_cast<T>(std::sin(theta));
    const T a = v[i], b = v[i + 1];
    v[i] = a * c - b * s;
    v[i + 1] = a * s + b * c;
  }
}

template <class T>
std::vector<T> rope_rotate(std::span<const T> v, std::int64_t position, double base) {
  require(v.size() % 2 == 0, ErrorKind::kConfig, "RoPE needs an even head dimension");
  std::vector<T> out(v.begin(), v.end());
  rope_rotate_inplace<T>(out, static_cast<double>(position), base);
  return out;
}

// x[n, heads * head_dim]; row i rotated at positions[i] within every head.
template <class T>
Tensor<T> rope(const Tensor<T>& x, std::span<const std::int64_t> positions, std::size_t heads, double base) {
  detail::expect(x.rank() == 2 && x.dim(0) == positions.size() && heads > 0 && x.dim(1) % heads == 0,
                 "rope: need x[n, heads * head_dim] and n positions");
  const std::size_t n = x.dim(0), width = x.dim(1), hd = width / heads;
  require(hd % 2 == 0, ErrorKind::kConfig, "RoPE needs an even head dimension");
  // cos/sin table per (row, pair).
  std::vector<T> cs(n * hd / 2), sn(n * hd / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < hd / 2; ++p) {
      const double theta = static_cast<double>(positions[i]) *
                           std::pow(base, -static_cast<double>(2 * p) / static_cast<double>(hd));
      cs[i * hd / 2 + p] = static_cast<T>(std::cos(theta));
      sn[i * hd / 2 + p] = static_cast<T>(std::sin(theta));
    }
  }
  std::vector<T> out(x.data());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* v = out.data() + i * width + h * hd;
      for (std::size_t p = 0; p < hd / 2; ++p) {
        const T c = cs[i * hd / 2 + p], s = sn[i * hd / 2 + p];
        const T a = v[2 * p], b = v[2 * p + 1];
        v[2 * p] = a * c - b * s;
        v[2 * p + 1] = a * s + b * c;
      }
    }
  }
  return detail::make_result<T>("rope", x.shape(), std::move(out), {x.node_ptr()},
                                [n, width, heads, hd, cs = std::move(cs), sn = std::move(sn)](Node<T>& self) {
                                  auto* g = detail::grad_of(*self.parents[0]);
                                  if (!g) return;
                                  for (std::size_t i = 0; i < n; ++i) {
                                    for (std::size_t h = 0; h < heads; ++h) {
                                      const T* dy = self.grad.data() + i * width + h * hd;
                                      T* dx = g->data() + i * width + h * hd;
                                      for (std::size_t p = 0; p < hd / 2; ++p) {
                                        const T c = cs[i * hd / 2 + p], s = sn[i * hd / 2 + p];
                                        dx[2 * p] += dy[2 * p] * c + dy[2 * p + 1] * s;
                                        dx[2 * p + 1] += -dy[2 * p] * s + dy[2 * p + 1] * c;
                                      }
                                    }
                                  }
                                });
}

// Boolean n x n reachability: allowed[i * n + j] != 0 when row i may attend to j.
using AttentionMask = std::shared_ptr<const std::vector<std::uint8_t>>;

// Multi-head scaled dot-product attention. q, k, v are [n, heads * head_dim];
// every row must be allowed to attend to at least one position.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    const AttentionMask& allowed) {
  detail::expect(q.rank() == 2 && q.shape() == k.shape() && q.shape() == v.shape() && heads > 0 &&
                     q.dim(1) % heads == 0,
                 "attention: q, k, v must share shape [n, heads * head_dim]");
  const std::size_t n = q.dim(0), width = q.dim(1), hd = width / heads;
  detail::expect(allowed && allowed->size() == n * n, "attention: mask must be n x n");
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(hd));
  const auto& mask = *allowed;
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < n && !any; ++j) any = mask[i * n + j] != 0;
    require(any, ErrorKind::kContract, "attention: a row has no reachable positions");
  }
  std::vector<T> probs(heads * n * n, T(0));
  std::vector<T> out(n * width, T(0));
  std::vector<T> kt(hd * n), vh(n * hd);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t c = 0; c < hd; ++c) {
        kt[c * n + j] = k.data()[j * width + h * hd + c];
        vh[j * hd + c] = v.data()[j * width + h * hd + c];
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      T* p = probs.data() + (h * n + i) * n;
      const T* qi = q.data().data() + i * width + h * hd;
      for (std::size_t c = 0; c < hd; ++c) {
        const T qc = qi[c] * inv_scale;
        const T* krow = kt.data() + c * n;
        for (std::size_t j = 0; j < n; ++j) p[j] += qc * krow[j];
      }
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (mask[i * n + j]) mx = std::max(mx, p[j]);
      }
      T z = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        p[j] = mask[i * n + j] ? std::exp(p[j] - mx) : T(0);
        z += p[j];
      }
      T* o = out.data() + i * width + h * hd;
      for (std::size_t j = 0; j < n; ++j) {
        p[j] /= z;
        if (p[j] == T(0)) continue;
        const T* vj = vh.data() + j * hd;
        for (std::size_t c = 0; c < hd; ++c) o[c] += p[j] * vj[c];
      }
    }
  }
  return detail::make_result<T>(
      "attention", q.shape(), std::move(out), {q.node_ptr(), k.node_ptr(), v.node_ptr()},
      [n, width, heads, hd, inv_scale, probs = std::move(probs)](Node<T>& self) {
        const auto& qv = self.parents[0]->value;
        const auto& kv = self.parents[1]->value;
        const auto& vv = self.parents[2]->value;
        auto* gq = detail::grad_of(*self.parents[0]);
        auto* gk = detail::grad_of(*self.parents[1]);
        auto* gv = detail::grad_of(*self.parents[2]);
        std::vector<T> dp(n), ds(n);
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < n; ++i) {
            const T* p = probs.data() + (h * n + i) * n;
            const T* dout = self.grad.data() + i * width + h * hd;
            T dot = T(0);
            for (std::size_t j = 0; j < n; ++j) {
              if (p[j] == T(0)) {
                dp[j] = T(0);
                continue;
              }
              const T* vj = vv.data() + j * width + h * hd;
              T acc = T(0);
              for (std::size_t c = 0; c < hd; ++c) acc += dout[c] * vj[c];
              dp[j] = acc;
              dot += p[j] * acc;
              if (gv) {
                T* gvj = gv->data() + j * width + h * hd;
                for (std::size_t c = 0; c < hd; ++c) gvj[c] += p[j] * dout[c];
              }
            }
            const T* qi = qv.data() + i * width + h * hd;
            for (std::size_t j = 0; j < n; ++j) {
              if (p[j] == T(0)) continue;
              const T s = p[j] * (dp[j] - dot) * inv_scale;
              const T* kj = kv.data() + j * width + h * hd;
              if (gq) {
                T* gqi = gq->data() + i * width + h * hd;
                for (std::size_t c = 0; c < hd; ++c) gqi[c] += s * kj[c];
              }
              if (gk) {
                T* gkj = gk->data() + j * width + h * hd;
                for (std::size_t c = 0; c < hd; ++c) gkj[c] += s * qi[c];
              }
            }
          }
        }
      });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

}  // namespace visatronic::tc
