#pragma once

// Dense tensors with tape-free reverse-mode differentiation.
//
// Every op output keeps links to the inputs that require gradients together
// with a closure that pushes its own gradient into theirs. `backward` walks
// that DAG in reverse topological order. Scalar type is a template parameter:
// float for training, double for finite-difference oracles.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ganformer/errors.hpp"

namespace ganformer {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Global switches (thread-local).

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool& finite_checks() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording in its scope; used for sampling and evaluation.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Which side of the kink every leaky_relu unit sits on, in call order.
/// Recording at one input and replaying at nearby inputs makes the network
/// locally linear in its activations, so finite differences of gradients
/// see curvature only from smooth ops.
struct SlopePattern {
  std::vector<std::vector<bool>> masks;
  std::size_t cursor = 0;
};

namespace detail {
struct SlopeTape {
  SlopePattern* pattern = nullptr;
  bool replay = false;
};
inline SlopeTape& slope_tape() {
  thread_local SlopeTape tape;
  return tape;
}
}  // namespace detail

class SlopePatternGuard {
 public:
  enum class Mode { kRecord, kReplay };
  SlopePatternGuard(SlopePattern& pattern, Mode mode) : previous_(detail::slope_tape()) {
    if (mode == Mode::kRecord) pattern.masks.clear();
    pattern.cursor = 0;
    detail::slope_tape() = {&pattern, mode == Mode::kReplay};
  }
  ~SlopePatternGuard() { detail::slope_tape() = previous_; }
  SlopePatternGuard(const SlopePatternGuard&) = delete;
  SlopePatternGuard& operator=(const SlopePatternGuard&) = delete;

 private:
  detail::SlopeTape previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }
inline void set_finite_checks(bool enabled) { detail::finite_checks() = enabled; }

/// Multiply-accumulate counters. Matmuls are charged to the active category,
/// affine maps always to `projection`, convolutions to `convolution`.
struct MacCounter {
  enum class Category { kGeneral, kAttention };
  std::uint64_t general = 0;
  std::uint64_t attention = 0;
  std::uint64_t projection = 0;
  std::uint64_t convolution = 0;
  Category active = Category::kGeneral;

  std::uint64_t total() const { return general + attention + projection + convolution; }
  void reset() { *this = MacCounter{}; }
  void charge_matmul(std::uint64_t macs) {
    (active == Category::kAttention ? attention : general) += macs;
  }
};

inline MacCounter& mac_counter() {
  thread_local MacCounter counter;
  return counter;
}

/// Routes matmul MACs to a category for the lifetime of the scope.
class MacScope {
 public:
  explicit MacScope(MacCounter::Category category) : previous_(mac_counter().active) {
    mac_counter().active = category;
  }
  ~MacScope() { mac_counter().active = previous_; }
  MacScope(const MacScope&) = delete;
  MacScope& operator=(const MacScope&) = delete;

 private:
  MacCounter::Category previous_;
};

// ---------------------------------------------------------------------------

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <typename T>
void check_finite(const std::vector<T>& values, const char* op) {
  if (!finite_checks()) return;
  T acc = 0;
  for (const T v : values) acc += v * T(0);
  if (!(acc == T(0))) throw NumericalError(std::string("non-finite value produced by ") + op);
}

}  // namespace detail

/// Gradients keyed by parameter identity. Absent keys mean zero gradient.
template <typename T>
class GradMap {
 public:
  bool contains(const Tensor<T>& param) const { return grads_.count(param.id()) != 0; }

  /// Gradient for `param`, or zeros of its shape when absent.
  Tensor<T> get(const Tensor<T>& param) const;

  std::span<const T> view(const Tensor<T>& param) const {
    auto it = grads_.find(param.id());
    if (it == grads_.end()) return {};
    return it->second;
  }

  void insert(const void* id, std::vector<T> grad) { grads_[id] = std::move(grad); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<const void*, std::vector<T>> grads_;
};

template <typename T = float>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<detail::Node<T>>()) {
    node_->data.assign(shape_size(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<detail::Node<T>>()) {
    if (shape_size(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  /// Parameter leaf: a tensor that requires gradients.
  static Tensor parameter(Shape shape, std::vector<T> data) {
    Tensor t(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  /// Extent along `axis`; negative axes count from the back.
  std::size_t extent(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw UsageError("axis " + std::to_string(axis) + " out of range");
    return node_->shape[static_cast<std::size_t>(a)];
  }

  std::span<const T> data() const { return node_->data; }
  std::vector<T> values() const { return node_->data; }

  /// In-place access for optimizer updates between graph builds.
  std::span<T> mutable_data() { return node_->data; }

  T item() const {
    if (size() != 1) throw UsageError("item() on tensor of shape " + shape_string(shape()));
    return node_->data[0];
  }

  T operator[](std::size_t flat) const { return node_->data[flat]; }

  T at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw UsageError("index rank mismatch");
    std::size_t flat = 0;
    std::size_t d = 0;
    for (const std::size_t i : index) flat = flat * node_->shape[d++] + i;
    return node_->data[flat];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Toggles gradient tracking on a leaf (e.g. freezing discriminator weights).
  Tensor& set_requires_grad(bool flag) {
    if (!node_->parents.empty()) throw UsageError("set_requires_grad on a non-leaf tensor");
    node_->requires_grad = flag;
    return *this;
  }

  /// Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  /// Stable identity used to key gradients.
  const void* id() const { return node_.get(); }

  const NodePtr& node() const { return node_; }

  /// Internal: wraps a freshly computed node.
  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  NodePtr node_;
};

template <typename T>
Tensor<T> GradMap<T>::get(const Tensor<T>& param) const {
  auto it = grads_.find(param.id());
  if (it == grads_.end()) return Tensor<T>::zeros(param.shape());
  return Tensor<T>(param.shape(), it->second);
}

namespace detail {

/// Creates an op output. Only inputs that require gradients become parents,
/// and the closure is dropped entirely when no input does.
template <typename T>
Tensor<T> record(Shape shape, std::vector<T> data, std::initializer_list<const Tensor<T>*> inputs,
                 std::function<void(Node<T>&)> backward, const char* op) {
  check_finite(data, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (grad_mode()) {
    for (const Tensor<T>* in : inputs) {
      if (in->requires_grad()) node->parents.push_back(in->node());
    }
    if (!node->parents.empty()) {
      node->requires_grad = true;
      node->backward = std::move(backward);
    }
  }
  return Tensor<T>::from_node(std::move(node));
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw UsageError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

/// Broadcast rule for binary elementwise ops: equal shapes, or the smaller
/// operand's shape is a suffix of the larger one, or it holds one element.
inline bool suffix_of(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace detail

/// Runs reverse-mode differentiation from a scalar loss and returns the
/// gradients of every leaf that requires them.
template <typename T>
GradMap<T> backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw UsageError("backward requires a scalar loss, got shape " +
                     (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  GradMap<T> result;
  if (!loss.requires_grad()) return result;

  using Node = detail::Node<T>;
  // Iterative post-order DFS gives a deterministic topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  order.back()->grad_buffer().assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->grad.empty()) continue;
    if (node->backward) {
      node->backward(*node);
      std::vector<T>().swap(node->grad);
    } else {
      result.insert(node, std::move(node->grad));
      node->grad.clear();
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise ops.

namespace detail {

enum class BinaryKind { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* op) {
  const bool a_big = a.size() >= b.size();
  const Tensor<T>& big = a_big ? a : b;
  const Tensor<T>& small = a_big ? b : a;
  const bool scalar_small = small.size() == 1;
  if (!scalar_small && !suffix_of(small.shape(), big.shape())) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t n = big.size();
  std::vector<T> out(n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  const std::size_t na = a.size();
  const std::size_t nb = b.size();
  for (std::size_t i = 0; i < n; ++i) {
    const T x = pa[na == n ? i : i % na];
    const T y = pb[nb == n ? i : i % nb];
    out[i] = kind == BinaryKind::kAdd ? x + y : kind == BinaryKind::kSub ? x - y : x * y;
  }
  auto an = a.node();
  auto bn = b.node();
  return record<T>(big.shape(), std::move(out), {&a, &b},
                   [an, bn, kind, n](Node<T>& self) {
                     const std::size_t na = an->data.size();
                     const std::size_t nb = bn->data.size();
                     if (an->requires_grad) {
                       auto& ga = an->grad_buffer();
                       for (std::size_t i = 0; i < n; ++i) {
                         const T g = kind == BinaryKind::kMul ? self.grad[i] * bn->data[nb == n ? i : i % nb]
                                                              : self.grad[i];
                         ga[na == n ? i : i % na] += g;
                       }
                     }
                     if (bn->requires_grad) {
                       auto& gb = bn->grad_buffer();
                       for (std::size_t i = 0; i < n; ++i) {
                         T g = self.grad[i];
                         if (kind == BinaryKind::kSub) g = -g;
                         if (kind == BinaryKind::kMul) g *= an->data[na == n ? i : i % na];
                         gb[nb == n ? i : i % nb] += g;
                       }
                     }
                   },
                   op);
}

/// Elementwise unary op given value and derivative-from-(input, output) functors.
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df, const char* op) {
  std::vector<T> out(x.size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  auto xn = x.node();
  return record<T>(x.shape(), std::move(out), {&x},
                   [xn, df](Node<T>& self) {
                     auto& g = xn->grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(xn->data[i], self.data[i]);
                   },
                   op);
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::kAdd, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::kSub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::kMul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary(
      x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; }, "scale");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return detail::unary(
      x, [offset](T v) { return v + offset; }, [](T, T) { return T(1); }, "add_scalar");
}

/// x if x > 0 else alpha * x. The slope at exactly 0 is taken to be alpha.
/// Under a replaying SlopePatternGuard the recorded mask picks the slope.
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T alpha = T(0.2)) {
  if (!(alpha > T(0) && alpha < T(1))) throw UsageError("leaky_relu alpha must lie in (0,1)");
  auto& tape = detail::slope_tape();
  if (!tape.pattern) {
    return detail::unary(
        x, [alpha](T v) { return v > T(0) ? v : alpha * v; },
        [alpha](T v, T) { return v > T(0) ? T(1) : alpha; }, "leaky_relu");
  }
  std::vector<bool> mask;
  if (tape.replay) {
    if (tape.pattern->cursor >= tape.pattern->masks.size() ||
        tape.pattern->masks[tape.pattern->cursor].size() != x.size()) {
      throw StateError("leaky_relu replay does not match the recorded slope pattern");
    }
    mask = tape.pattern->masks[tape.pattern->cursor++];
  } else {
    mask.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) mask[i] = x.data()[i] > T(0);
    tape.pattern->masks.push_back(mask);
  }
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] ? x.data()[i] : alpha * x.data()[i];
  auto xn = x.node();
  return detail::record<T>(x.shape(), std::move(out), {&x},
                           [xn, alpha, mask = std::move(mask)](detail::Node<T>& self) {
                             auto& g = xn->grad_buffer();
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (mask[i] ? T(1) : alpha);
                           },
                           "leaky_relu");
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; }, "tanh");
}

/// Overflow-safe log(1 + exp(x)).
template <typename T>
T softplus_value(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return softplus_value(v); },
      [](T v, T) { return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); },
      "softplus");
}

// ---------------------------------------------------------------------------
// Reductions and layout.

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (const T v : x.data()) total += v;
  auto xn = x.node();
  return detail::record<T>(Shape{}, {total}, {&x},
                           [xn](detail::Node<T>& self) {
                             auto& g = xn->grad_buffer();
                             for (auto& v : g) v += self.grad[0];
                           },
                           "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  auto xn = x.node();
  return detail::record<T>(std::move(shape), x.values(), {&x},
                           [xn](detail::Node<T>& self) {
                             auto& g = xn->grad_buffer();
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                           },
                           "reshape");
}

/// General axis permutation: output axis i is input axis perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw DimensionError("permute: permutation rank mismatch");
  Shape out_shape(r);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.shape()[i];
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[perm[i]];
    strides[i] = in_strides[perm[i]];
  }
  // source offset for each output element
  std::vector<std::size_t> src(x.size());
  std::vector<std::size_t> idx(r, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    src[flat] = offset;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      offset += strides[d];
      if (idx[d] < out_shape[d]) break;
      offset -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<T> out(x.size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[src[i]];
  auto xn = x.node();
  return detail::record<T>(std::move(out_shape), std::move(out), {&x},
                           [xn, src = std::move(src)](detail::Node<T>& self) {
                             auto& g = xn->grad_buffer();
                             for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
                           },
                           "permute");
}

/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last2 needs rank >= 2");
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

// ---------------------------------------------------------------------------
// Matrix products.

/// a[..,p,q] x b[..,q,r] (or b[..,r,q] when `transpose_b`). Batch extents must
/// be equal, or one operand may be an unbatched matrix.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t p = a.extent(-2);
  const std::size_t q = a.extent(-1);
  const std::size_t bq = transpose_b ? b.extent(-1) : b.extent(-2);
  const std::size_t r = transpose_b ? b.extent(-2) : b.extent(-1);
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  const bool batch_ok = a_batch == b_batch || a_batch.empty() || b_batch.empty();
  if (q != bq || !batch_ok) {
    throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + (transpose_b ? "^T" : ""));
  }
  const Shape batch = a_batch.empty() ? b_batch : a_batch;
  const std::size_t nb = shape_size(batch);
  const std::size_t a_step = a_batch.empty() ? 0 : p * q;
  const std::size_t b_step = b_batch.empty() ? 0 : q * r;
  Shape out_shape = batch;
  out_shape.push_back(p);
  out_shape.push_back(r);
  std::vector<T> out(nb * p * r);
  for (std::size_t i = 0; i < nb; ++i) {
    detail::CMapMat<T> A(a.data().data() + i * a_step, p, q);
    detail::MapMat<T> C(out.data() + i * p * r, p, r);
    if (transpose_b) {
      detail::CMapMat<T> B(b.data().data() + i * b_step, r, q);
      C.noalias() = A * B.transpose();
    } else {
      detail::CMapMat<T> B(b.data().data() + i * b_step, q, r);
      C.noalias() = A * B;
    }
  }
  mac_counter().charge_matmul(static_cast<std::uint64_t>(nb * p * q * r));
  auto an = a.node();
  auto bn = b.node();
  return detail::record<T>(
      std::move(out_shape), std::move(out), {&a, &b},
      [an, bn, nb, p, q, r, a_step, b_step, transpose_b](detail::Node<T>& self) {
        for (std::size_t i = 0; i < nb; ++i) {
          detail::CMapMat<T> G(self.grad.data() + i * p * r, p, r);
          if (an->requires_grad) {
            detail::MapMat<T> GA(an->grad_buffer().data() + i * a_step, p, q);
            if (transpose_b) {
              detail::CMapMat<T> B(bn->data.data() + i * b_step, r, q);
              GA.noalias() += G * B;
            } else {
              detail::CMapMat<T> B(bn->data.data() + i * b_step, q, r);
              GA.noalias() += G * B.transpose();
            }
          }
          if (bn->requires_grad) {
            detail::CMapMat<T> A(an->data.data() + i * a_step, p, q);
            if (transpose_b) {
              detail::MapMat<T> GB(bn->grad_buffer().data() + i * b_step, r, q);
              GB.noalias() += G.transpose() * A;
            } else {
              detail::MapMat<T> GB(bn->grad_buffer().data() + i * b_step, q, r);
              GB.noalias() += A.transpose() * G;
            }
          }
        }
      },
      "matmul");
}

/// Affine map over the last axis: y = multiplier * x W^T + b, with W[out,in].
/// `multiplier` is the equalized-learning-rate runtime scale.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, T multiplier = T(1)) {
  if (weight.rank() != 2 || x.rank() < 1 || x.extent(-1) != weight.extent(1)) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " vs weight " +
                         shape_string(weight.shape()));
  }
  const std::size_t in = weight.extent(1);
  const std::size_t out_dim = weight.extent(0);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.extent(0) != out_dim)) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " vs weight " +
                         shape_string(weight.shape()));
  }
  const std::size_t rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  // Row-wise kernel with a fixed accumulation order: each output row depends
  // only on its input row, bit for bit, wherever the row sits in the batch.
  std::vector<T> wt(in * out_dim);
  for (std::size_t o = 0; o < out_dim; ++o)
    for (std::size_t k = 0; k < in; ++k) wt[k * out_dim + o] = weight.data()[o * in + k];
  std::vector<T> out(rows * out_dim, T(0));
  const T* xp = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* acc = out.data() + r * out_dim;
    for (std::size_t k = 0; k < in; ++k) {
      const T xv = xp[r * in + k];
      const T* wrow = wt.data() + k * out_dim;
      for (std::size_t o = 0; o < out_dim; ++o) acc[o] += xv * wrow[o];
    }
    for (std::size_t o = 0; o < out_dim; ++o) {
      acc[o] = acc[o] * multiplier + (has_bias ? bias.data()[o] : T(0));
    }
  }
  mac_counter().projection += static_cast<std::uint64_t>(rows * in * out_dim);
  auto xn = x.node();
  auto wn = weight.node();
  auto bnode = has_bias ? bias.node() : nullptr;
  Tensor<T> empty_bias;
  const Tensor<T>& bias_ref = has_bias ? bias : empty_bias;
  auto backward = [xn, wn, bnode, rows, in, out_dim, multiplier](detail::Node<T>& self) {
    detail::CMapMat<T> G(self.grad.data(), rows, out_dim);
    if (xn->requires_grad) {
      detail::CMapMat<T> W(wn->data.data(), out_dim, in);
      detail::MapMat<T> GX(xn->grad_buffer().data(), rows, in);
      GX.noalias() += (G * W) * multiplier;
    }
    if (wn->requires_grad) {
      detail::CMapMat<T> X(xn->data.data(), rows, in);
      detail::MapMat<T> GW(wn->grad_buffer().data(), out_dim, in);
      GW.noalias() += (G.transpose() * X) * multiplier;
    }
    if (bnode && bnode->requires_grad) {
      // Fixed row order; Eigen's colwise redux depends on buffer alignment.
      std::vector<T> acc(out_dim, T(0));
      const T* g = self.grad.data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out_dim; ++o) acc[o] += g[r * out_dim + o];
      T* gb = bnode->grad_buffer().data();
      for (std::size_t o = 0; o < out_dim; ++o) gb[o] += acc[o];
    }
  };
  if (has_bias) return detail::record<T>(std::move(out_shape), std::move(out), {&x, &weight, &bias_ref}, backward, "linear");
  return detail::record<T>(std::move(out_shape), std::move(out), {&x, &weight}, backward, "linear");
}

// ---------------------------------------------------------------------------
// Normalizations.

/// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const std::size_t len = x.shape()[ax];
  std::size_t inner = 1;
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t outer = x.size() / (len * inner);
  std::vector<T> out(x.size());
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * len * inner + j;
      T mx = in[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, in[base + k * inner]);
      T total = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(in[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] *= inv;
    }
  }
  auto xn = x.node();
  return detail::record<T>(x.shape(), std::move(out), {&x},
                           [xn, outer, len, inner](detail::Node<T>& self) {
                             auto& g = xn->grad_buffer();
                             for (std::size_t o = 0; o < outer; ++o) {
                               for (std::size_t j = 0; j < inner; ++j) {
                                 const std::size_t base = o * len * inner + j;
                                 T dot = 0;
                                 for (std::size_t k = 0; k < len; ++k) {
                                   dot += self.grad[base + k * inner] * self.data[base + k * inner];
                                 }
                                 for (std::size_t k = 0; k < len; ++k) {
                                   const std::size_t i = base + k * inner;
                                   g[i] += self.data[i] * (self.grad[i] - dot);
                                 }
                               }
                             }
                           },
                           "softmax");
}

/// Normalizes each vector along the last axis to zero mean and unit
/// population deviation, sigma = sqrt(var + eps).
template <typename T>
Tensor<T> channel_norm(const Tensor<T>& x, T eps = T(1e-8)) {
  const std::size_t d = x.extent(-1);
  if (d < 2) throw DimensionError("channel_norm needs at least 2 channels");
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size());
  std::vector<T> inv_sigma(rows);
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * d;
    T mu = 0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_sigma[r] = is;
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = (row[c] - mu) * is;
  }
  auto xn = x.node();
  return detail::record<T>(x.shape(), std::move(out), {&x},
                           [xn, rows, d, inv_sigma = std::move(inv_sigma)](detail::Node<T>& self) {
                             auto& g = xn->grad_buffer();
                             const T inv_d = T(1) / static_cast<T>(d);
                             for (std::size_t r = 0; r < rows; ++r) {
                               const T* y = self.data.data() + r * d;
                               const T* gy = self.grad.data() + r * d;
                               T mean_g = 0;
                               T mean_gy = 0;
                               for (std::size_t c = 0; c < d; ++c) {
                                 mean_g += gy[c];
                                 mean_gy += gy[c] * y[c];
                               }
                               mean_g *= inv_d;
                               mean_gy *= inv_d;
                               for (std::size_t c = 0; c < d; ++c) {
                                 g[r * d + c] += inv_sigma[r] * (gy[c] - mean_g - y[c] * mean_gy);
                               }
                             }
                           },
                           "channel_norm");
}

// ---------------------------------------------------------------------------
// Image ops on NCHW tensors.

/// Stride-1 cross-correlation with zero padding k/2 ("same" output) for odd
/// square kernels: x[N,C,H,W], w[O,C,k,k], b[O] (b may be undefined).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, T multiplier = T(1)) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw DimensionError("conv2d expects NCHW input and OCkk weight, got " + shape_string(x.shape()) + " and " +
                         shape_string(w.shape()));
  }
  const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  const std::size_t O = w.extent(0), K = w.extent(2);
  if (w.extent(1) != C) {
    throw DimensionError("conv2d channel mismatch: input " + shape_string(x.shape()) + ", weight " +
                         shape_string(w.shape()));
  }
  if (w.extent(3) != K || K % 2 == 0) throw DimensionError("conv2d kernel must be odd and square");
  if (b.defined() && (b.rank() != 1 || b.extent(0) != O)) {
    throw DimensionError("conv2d bias " + shape_string(b.shape()) + " for " + std::to_string(O) + " outputs");
  }
  const std::size_t HW = H * W;
  const std::size_t CK = C * K * K;
  const std::size_t cols = N * HW;
  const long pad = static_cast<long>(K / 2);

  // col[(c,ky,kx), (n,y,x)]
  std::vector<T> col(CK * cols);
  const auto in = x.data();
  if (K == 1) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        std::copy_n(in.data() + (n * C + c) * HW, HW, col.data() + c * cols + n * HW);
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t ky = 0; ky < K; ++ky) {
        for (std::size_t kx = 0; kx < K; ++kx) {
          T* dst = col.data() + ((c * K + ky) * K + kx) * cols;
          for (std::size_t n = 0; n < N; ++n) {
            const T* src = in.data() + (n * C + c) * HW;
            for (std::size_t y = 0; y < H; ++y) {
              const long sy = static_cast<long>(y) + static_cast<long>(ky) - pad;
              T* drow = dst + n * HW + y * W;
              if (sy < 0 || sy >= static_cast<long>(H)) {
                std::fill_n(drow, W, T(0));
                continue;
              }
              for (std::size_t xx = 0; xx < W; ++xx) {
                const long sx = static_cast<long>(xx) + static_cast<long>(kx) - pad;
                drow[xx] = (sx < 0 || sx >= static_cast<long>(W)) ? T(0) : src[sy * static_cast<long>(W) + sx];
              }
            }
          }
        }
      }
    }
  }
  std::vector<T> tmp(O * cols);
  {
    detail::CMapMat<T> Wm(w.data().data(), O, CK);
    detail::CMapMat<T> Cm(col.data(), CK, cols);
    detail::MapMat<T> Y(tmp.data(), O, cols);
    Y.noalias() = (Wm * Cm) * multiplier;
  }
  std::vector<T> out(N * O * HW);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < O; ++o) {
      const T bias = b.defined() ? b.data()[o] : T(0);
      const T* src = tmp.data() + o * cols + n * HW;
      T* dst = out.data() + (n * O + o) * HW;
      for (std::size_t i = 0; i < HW; ++i) dst[i] = src[i] + bias;
    }
  }
  mac_counter().convolution += static_cast<std::uint64_t>(O * CK * cols);

  auto xn = x.node();
  auto wn = w.node();
  auto bnode = b.defined() ? b.node() : nullptr;
  // The column buffer is only needed for the weight gradient.
  auto saved_col = std::make_shared<std::vector<T>>(w.requires_grad() ? std::move(col) : std::vector<T>{});
  auto backward = [xn, wn, bnode, saved_col, N, C, H, W, O, K, multiplier](detail::Node<T>& self) {
    const std::size_t HW = H * W, CK = C * K * K, cols = N * HW;
    const long pad = static_cast<long>(K / 2);
    std::vector<T> g(O * cols);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o)
        std::copy_n(self.grad.data() + (n * O + o) * HW, HW, g.data() + o * cols + n * HW);
    detail::CMapMat<T> G(g.data(), O, cols);
    if (bnode && bnode->requires_grad) {
      auto& gb = bnode->grad_buffer();
      // Plain loop: Eigen's vectorized redux splits by buffer alignment, which
      // varies between allocations.
      for (std::size_t o = 0; o < O; ++o) {
        T acc = T(0);
        for (std::size_t i = 0; i < cols; ++i) acc += g[o * cols + i];
        gb[o] += acc;
      }
    }
    // Gate on what was saved: the flag may have been toggled since forward.
    if (wn->requires_grad && !saved_col->empty()) {
      detail::CMapMat<T> Cm(saved_col->data(), CK, cols);
      detail::MapMat<T> GW(wn->grad_buffer().data(), O, CK);
      GW.noalias() += (G * Cm.transpose()) * multiplier;
    }
    if (xn->requires_grad) {
      std::vector<T> dcol(CK * cols);
      detail::CMapMat<T> Wm(wn->data.data(), O, CK);
      detail::MapMat<T> DC(dcol.data(), CK, cols);
      DC.noalias() = (Wm.transpose() * G) * multiplier;
      auto& gx = xn->grad_buffer();
      if (K == 1) {
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const T* src = dcol.data() + c * cols + n * HW;
            T* dst = gx.data() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) dst[i] += src[i];
          }
      } else {
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < K; ++ky)
            for (std::size_t kx = 0; kx < K; ++kx) {
              const T* src = dcol.data() + ((c * K + ky) * K + kx) * cols;
              for (std::size_t n = 0; n < N; ++n) {
                T* dst = gx.data() + (n * C + c) * HW;
                for (std::size_t y = 0; y < H; ++y) {
                  const long sy = static_cast<long>(y) + static_cast<long>(ky) - pad;
                  if (sy < 0 || sy >= static_cast<long>(H)) continue;
                  const T* srow = src + n * HW + y * W;
                  for (std::size_t xx = 0; xx < W; ++xx) {
                    const long sx = static_cast<long>(xx) + static_cast<long>(kx) - pad;
                    if (sx >= 0 && sx < static_cast<long>(W)) dst[sy * static_cast<long>(W) + sx] += srow[xx];
                  }
                }
              }
            }
      }
    }
  };
  if (b.defined()) return detail::record<T>({N, O, H, W}, std::move(out), {&x, &w, &b}, backward, "conv2d");
  return detail::record<T>({N, O, H, W}, std::move(out), {&x, &w}, backward, "conv2d");
}

enum class Resize { kUp2, kDown2 };

namespace detail {

/// Separable 1-D bilinear taps for half-pixel-center resampling.
struct Taps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_hi;  // weight of `hi`; `lo` gets 1 - w_hi
};

inline Taps bilinear_taps(std::size_t in, std::size_t out) {
  Taps t;
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    t.lo.push_back(lo);
    t.hi.push_back(hi);
    t.w_hi.push_back(src - static_cast<double>(lo));
  }
  return t;
}

}  // namespace detail

/// Bilinear resampling by 2 or 1/2 with half-pixel centers and edge clamping.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, Resize factor) {
  if (x.rank() != 4) throw DimensionError("resize_bilinear expects NCHW, got " + shape_string(x.shape()));
  const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  std::size_t OH, OW;
  if (factor == Resize::kUp2) {
    OH = 2 * H;
    OW = 2 * W;
  } else {
    if (H % 2 || W % 2) throw DimensionError("downsampling needs even extents, got " + shape_string(x.shape()));
    OH = H / 2;
    OW = W / 2;
  }
  auto ty = std::make_shared<detail::Taps>(detail::bilinear_taps(H, OH));
  auto tx = std::make_shared<detail::Taps>(detail::bilinear_taps(W, OW));
  const std::size_t planes = N * C;
  std::vector<T> out(planes * OH * OW);
  const auto in = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = in.data() + p * H * W;
    T* dst = out.data() + p * OH * OW;
    for (std::size_t oy = 0; oy < OH; ++oy) {
      const T wy = static_cast<T>(ty->w_hi[oy]);
      const T* r0 = src + ty->lo[oy] * W;
      const T* r1 = src + ty->hi[oy] * W;
      for (std::size_t ox = 0; ox < OW; ++ox) {
        const T wx = static_cast<T>(tx->w_hi[ox]);
        const std::size_t x0 = tx->lo[ox], x1 = tx->hi[ox];
        const T top = r0[x0] * (T(1) - wx) + r0[x1] * wx;
        const T bot = r1[x0] * (T(1) - wx) + r1[x1] * wx;
        dst[oy * OW + ox] = top * (T(1) - wy) + bot * wy;
      }
    }
  }
  auto xn = x.node();
  return detail::record<T>({N, C, OH, OW}, std::move(out), {&x},
                           [xn, ty, tx, planes, H, W, OH, OW](detail::Node<T>& self) {
                             auto& g = xn->grad_buffer();
                             for (std::size_t p = 0; p < planes; ++p) {
                               T* dst = g.data() + p * H * W;
                               const T* src = self.grad.data() + p * OH * OW;
                               for (std::size_t oy = 0; oy < OH; ++oy) {
                                 const T wy = static_cast<T>(ty->w_hi[oy]);
                                 T* r0 = dst + ty->lo[oy] * W;
                                 T* r1 = dst + ty->hi[oy] * W;
                                 for (std::size_t ox = 0; ox < OW; ++ox) {
                                   const T wx = static_cast<T>(tx->w_hi[ox]);
                                   const T v = src[oy * OW + ox];
                                   const std::size_t x0 = tx->lo[ox], x1 = tx->hi[ox];
                                   r0[x0] += v * (T(1) - wy) * (T(1) - wx);
                                   r0[x1] += v * (T(1) - wy) * wx;
                                   r1[x0] += v * wy * (T(1) - wx);
                                   r1[x1] += v * wy * wx;
                                 }
                               }
                             }
                           },
                           "resize_bilinear");
}

/// y[n,c,h,w] = x[n,c,h,w] * s[c].
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& s) {
  if (x.rank() != 4 || s.rank() != 1 || s.extent(0) != x.extent(1)) {
    throw DimensionError("channel_scale of " + shape_string(x.shape()) + " by " + shape_string(s.shape()));
  }
  const std::size_t N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
  std::vector<T> out(x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) out[(n * C + c) * HW + i] = x.data()[(n * C + c) * HW + i] * s.data()[c];
  auto xn = x.node();
  auto sn = s.node();
  return detail::record<T>(x.shape(), std::move(out), {&x, &s},
                           [xn, sn, N, C, HW](detail::Node<T>& self) {
                             const T* g = self.grad.data();
                             if (xn->requires_grad) {
                               auto& gx = xn->grad_buffer();
                               for (std::size_t n = 0; n < N; ++n)
                                 for (std::size_t c = 0; c < C; ++c)
                                   for (std::size_t i = 0; i < HW; ++i)
                                     gx[(n * C + c) * HW + i] += g[(n * C + c) * HW + i] * sn->data[c];
                             }
                             if (sn->requires_grad) {
                               auto& gs = sn->grad_buffer();
                               for (std::size_t c = 0; c < C; ++c) {
                                 T acc = T(0);
                                 for (std::size_t n = 0; n < N; ++n)
                                   for (std::size_t i = 0; i < HW; ++i)
                                     acc += g[(n * C + c) * HW + i] * xn->data[(n * C + c) * HW + i];
                                 gs[c] += acc;
                               }
                             }
                           },
                           "channel_scale");
}

/// Appends one channel holding the mean over (C,H,W) of the cross-batch
/// population standard deviation, [N,C,H,W] -> [N,C+1,H,W]. Positions with
/// zero spread contribute a zero subgradient.
template <typename T>
Tensor<T> minibatch_stddev(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("minibatch_stddev expects NCHW, got " + shape_string(x.shape()));
  const std::size_t N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
  if (N < 2) throw UsageError("minibatch_stddev needs at least 2 batch items, got " + std::to_string(N));
  const std::size_t per_item = C * HW;
  const auto in = x.data();
  auto mean = std::make_shared<std::vector<T>>(per_item, T(0));
  auto stddev = std::make_shared<std::vector<T>>(per_item, T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < per_item; ++i) (*mean)[i] += in[n * per_item + i];
  for (auto& v : *mean) v /= static_cast<T>(N);
  T total = T(0);
  for (std::size_t i = 0; i < per_item; ++i) {
    T var = T(0);
    for (std::size_t n = 0; n < N; ++n) {
      const T dlt = in[n * per_item + i] - (*mean)[i];
      var += dlt * dlt;
    }
    (*stddev)[i] = std::sqrt(var / static_cast<T>(N));
    total += (*stddev)[i];
  }
  const T stat = total / static_cast<T>(per_item);
  std::vector<T> out(N * (C + 1) * HW);
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(in.data() + n * per_item, per_item, out.data() + n * (C + 1) * HW);
    std::fill_n(out.data() + n * (C + 1) * HW + per_item, HW, stat);
  }
  auto xn = x.node();
  return detail::record<T>({N, C + 1, x.extent(2), x.extent(3)}, std::move(out), {&x},
                           [xn, mean, stddev, N, C, HW, per_item](detail::Node<T>& self) {
                             auto& gx = xn->grad_buffer();
                             T gstat = T(0);
                             for (std::size_t n = 0; n < N; ++n) {
                               const T* g = self.grad.data() + n * (C + 1) * HW;
                               for (std::size_t i = 0; i < per_item; ++i) gx[n * per_item + i] += g[i];
                               for (std::size_t i = 0; i < HW; ++i) gstat += g[per_item + i];
                             }
                             // d stat / d x[n,i] = (x[n,i] - mean[i]) / (N * std[i] * per_item)
                             const T coef = gstat / static_cast<T>(per_item * N);
                             for (std::size_t i = 0; i < per_item; ++i) {
                               const T sd = (*stddev)[i];
                               if (sd == T(0)) continue;
                               for (std::size_t n = 0; n < N; ++n)
                                 gx[n * per_item + i] += coef * (xn->data[n * per_item + i] - (*mean)[i]) / sd;
                             }
                           },
                           "minibatch_stddev");
}

/// Converts a tensor between scalar types, keeping no graph (test/oracle use).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> out(x.size());
  std::transform(x.data().begin(), x.data().end(), out.begin(), [](From v) { return static_cast<To>(v); });
  return Tensor<To>(x.shape(), std::move(out));
}

}  // namespace ganformer
