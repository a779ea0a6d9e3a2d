#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "stclip/tensor.hpp"

namespace stclip::detail {

struct Node;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  std::vector<float>& grad_buffer();
  // Gradient sink for input i, or nullptr when that input needs none.
  float* input_grad(std::size_t i) {
    Node& in = *inputs[i];
    return in.requires_grad ? in.grad_buffer().data() : nullptr;
  }
  const float* input_value(std::size_t i) const { return inputs[i]->value.data(); }
};

struct TensorAccess {
  static std::shared_ptr<Node> node(const Tensor& t) { return t.node_; }
  static Tensor wrap(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }
};

Tensor make_result(Shape shape, std::vector<float> value,
                   std::initializer_list<const Tensor*> inputs, BackwardFn fn);
Tensor make_result(Shape shape, std::vector<float> value,
                   std::span<const Tensor> inputs, BackwardFn fn);

// C[m×n] (+)= A[m×k] · B[k×n], all row-major, 64-bit accumulation.
void gemm_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);
// C[m×n] (+)= A[m×k] · B[n×k]ᵀ
void gemm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);
// C[m×n] (+)= A[k×m]ᵀ · B[k×n]
void gemm_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);

}  // namespace stclip::detail
