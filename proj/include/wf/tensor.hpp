#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "wf/error.hpp"

namespace wf {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor with reverse-mode autodiff. Each operation appends
// a node to the implicit tape (the DAG of Node records); backward() replays
// it in reverse topological order. Tensors are immutable once created by an
// op; leaves may be written through data() before the graph is built.
//
// Scalar is float for training runs and double for verification runs; both
// instantiations are compiled into the library.
struct AllocMeter;

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  bool consumed = false;  // set once backward has replayed through this node
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // empty for leaves
  AllocMeter* meter = nullptr;  // meter this node's buffer was charged to

  Node(Shape s, bool rg);
  ~Node();

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  void ensure_grad();
};

template <typename S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, S value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<S> values, bool requires_grad = false);
  static Tensor scalar(S value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->numel(); }
  std::int64_t dim(int axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<S> data() { return {node_->data.data(), node_->data.size()}; }
  std::span<const S> data() const { return {node_->data.data(), node_->data.size()}; }
  std::span<S> grad();
  std::span<const S> grad() const;
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad();

  S item() const;

  // Value copy detached from the graph.
  Tensor detach() const;

  std::shared_ptr<Node<S>>& node() { return node_; }
  const std::shared_ptr<Node<S>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<S>> node_;
};

// Thread-local autodiff switch; disable for inference/benchmark passes so no
// graph is recorded.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Transient-allocation meter. While a scope is active on the current thread,
// every tensor buffer allocation/free is tracked and the running peak kept.
// The benchmark harness wraps attention forwards with this to measure the
// working set of the attention path without counting process RSS.
struct AllocMeter {
  std::uint64_t cur_bytes = 0;
  std::uint64_t peak_bytes = 0;
};

AllocMeter* active_alloc_meter();

class AllocMeterScope {
 public:
  explicit AllocMeterScope(AllocMeter& meter);
  ~AllocMeterScope();
  AllocMeterScope(const AllocMeterScope&) = delete;
  AllocMeterScope& operator=(const AllocMeterScope&) = delete;

 private:
  AllocMeter* prev_;
};

// ---- primitive operations ----------------------------------------------
// All ops propagate gradients; broadcasting follows the usual right-aligned
// rule (sizes equal or 1).

template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> add_scalar(const Tensor<S>& a, S v);
template <typename S> Tensor<S> mul_scalar(const Tensor<S>& a, S v);

// a: [.., m, k] x b: [.., k, n] -> [.., m, n]; batch dims must match exactly
// or b may be rank-2 (shared across the batch).
template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
// a: [.., m, k] x b: [.., n, k] -> [.., m, n] (b transposed on the fly).
template <typename S> Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b);

template <typename S> Tensor<S> reshape(const Tensor<S>& x, Shape shape);
template <typename S> Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& axes);
template <typename S> Tensor<S> transpose_last2(const Tensor<S>& x);
template <typename S> Tensor<S> narrow(const Tensor<S>& x, int axis, std::int64_t start,
                                       std::int64_t len);
template <typename S> Tensor<S> gather_rows(const Tensor<S>& x,
                                            const std::vector<std::int64_t>& rows);
template <typename S> Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis);
template <typename S> Tensor<S> broadcast_to(const Tensor<S>& x, Shape shape);
template <typename S> Tensor<S> reduce_sum(const Tensor<S>& x, std::vector<int> axes,
                                           bool keepdims);
template <typename S> Tensor<S> sum_all(const Tensor<S>& x);

// Numerically stable softmax (row max subtracted before exponentiation).
// -inf logits get exactly zero weight; a slice that is entirely -inf yields
// an all-zero row instead of an error so fully masked pad channels stay
// representable.
template <typename S> Tensor<S> softmax(const Tensor<S>& x, int axis);
template <typename S> Tensor<S> log_softmax(const Tensor<S>& x, int axis);

// Per-row (last axis) normalization followed by the affine gain/bias.
template <typename S> Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain,
                                           const Tensor<S>& bias, S eps);
// tanh-approximation GELU.
template <typename S> Tensor<S> gelu(const Tensor<S>& x);

// Reverse-mode sweep from a scalar loss. Every requires_grad leaf reachable
// from `loss` receives (accumulates) its gradient exactly once. Replaying a
// graph twice without a fresh forward is an error.
template <typename S> void backward(const Tensor<S>& loss);

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace wf
