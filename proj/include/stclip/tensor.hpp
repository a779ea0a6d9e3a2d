#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stclip {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct Node;
struct TensorAccess;
}  // namespace detail

/// Dense row-major float32 array with reverse-mode gradient tracking.
///
/// A Tensor is a cheap handle onto an immutable value. Operations produce new
/// tensors and, when any input requires a gradient, record a backward closure.
/// Calling backward() on a scalar result accumulates d(result)/d(leaf) into the
/// grad buffer of every leaf that requires a gradient. Gradient buffers are the
/// only mutable state and belong to whoever built the graph.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor vector(std::initializer_list<float> values);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t dim(std::size_t axis) const;
  // Product of all leading dimensions (1 for rank <= 1).
  std::size_t rows() const;
  // Size of the last dimension (1 for a scalar).
  std::size_t cols() const;

  std::span<const float> data() const;
  float item() const;
  float at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  bool has_grad() const;
  // Accumulated gradient; empty span when none has been computed.
  std::span<const float> grad() const;

  // Reverse pass from a single-element tensor, seeding d(self)/d(self) = 1.
  void backward() const;
  // Same values, cut from the graph, never requires grad.
  Tensor detach() const;
  // Fresh leaf holding a copy of the values.
  Tensor clone_leaf(bool requires_grad) const;
  bool all_finite() const;

 private:
  friend struct detail::TensorAccess;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Primitive operations. All are pure: inputs are never modified.
// "rows" refers to the product of leading dimensions, "cols" to the last.

// a: [...×k], b: [k×n] -> [...×n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
// s must hold a single element.
Tensor mul_scalar(const Tensor& a, const Tensor& s);
// v: [cols], broadcast over rows.
Tensor add_rowvec(const Tensor& a, const Tensor& v);
Tensor mul_rowvec(const Tensor& a, const Tensor& v);

Tensor exp(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);

Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);
Tensor l2_normalize_rows(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Mean over consecutive blocks of `group` rows: [G·group × D] -> [G × D].
Tensor group_mean(const Tensor& a, std::size_t group);

// Rank-2 row operations.
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);
// Picks a[row, col] for each pair; result shape [pairs].
Tensor select_elements(const Tensor& a,
                       std::span<const std::pair<std::size_t, std::size_t>> at);

// Elementwise numerically stable binary cross-entropy on logits.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

struct AttentionOutput {
  Tensor out;         // [G·Cq × D]
  Tensor head_mean;   // [G·Cq × Ck], mean over heads of softmax maps; no grad
};

// Scaled dot-product attention over `groups` independent blocks.
// q: [G·Cq × D], k, v: [G·Ck × D]. Heads split the D columns evenly.
// With causal, query i of a block sees keys 0..i (requires Cq == Ck).
AttentionOutput attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          std::size_t heads, std::size_t groups = 1,
                          bool causal = false);

}  // namespace stclip
