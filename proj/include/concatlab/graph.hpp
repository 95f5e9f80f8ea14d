#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "concatlab/tensor.hpp"

namespace concatlab::ad {

// Define-by-run reverse-mode autodiff. Each op computes its value eagerly,
// validates finiteness, and registers a closure that scatters the node's
// adjoint into its parents. backward() visits each reachable node exactly
// once in reverse topological order.
struct Node {
  Tensor value;
  Tensor grad;  // allocated during backward for requires_grad nodes
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  bool grad_allocated() const { return grad.size() == value.size() && value.size() > 0; }
};

using Value = std::shared_ptr<Node>;

Value leaf(Tensor t, bool requires_grad = false);
inline Value constant(Tensor t) { return leaf(std::move(t), false); }

// Forward value of an already-built graph (eager construction caches values).
const Tensor& evaluate(const Value& root);

// Reverse pass from a scalar root. Zeroes reachable grads, seeds the root
// with 1, then accumulates. Non-trainable leaves receive no gradient.
void backward(const Value& root);

// --- elementwise binary (same shape any rank, or rank<=2 with broadcasting
// --- over size-1 dimensions; size-1 tensors broadcast against anything) ---
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value div(const Value& a, const Value& b);

// --- elementwise with constants ---
Value add_scalar(const Value& a, double s);
Value mul_scalar(const Value& a, double s);
Value pow_scalar(const Value& a, double p);  // a must be > 0 unless p is a non-negative integer
Value neg(const Value& a);
Value clamp(const Value& a, double lo, double hi);  // pass-through gradient strictly inside

// --- nonlinearities ---
Value sigmoid(const Value& a);
Value log_(const Value& a);
Value exp_(const Value& a);
Value leaky_relu(const Value& a, double slope);

// --- structure ---
Value matmul(const Value& a, const Value& b);  // (m x k) * (k x n)
Value transpose(const Value& a);               // 2D
// axis semantics: the axis along which probabilities sum to one
// (0: each column sums to 1; 1: each row sums to 1).
Value softmax(const Value& a, int axis);
// Rows with norm <= 1e-12 pass through unchanged (treated as constant scale).
Value l2_normalize_rows(const Value& a);
Value sum_all(const Value& a);   // -> [1,1]
Value mean_all(const Value& a);  // -> [1,1]
Value sum_axis(const Value& a, int axis);   // 2D; axis 0 -> [1,n], axis 1 -> [m,1]
Value mean_axis(const Value& a, int axis);  // 2D
Value concat(const std::vector<Value>& parts, int axis);  // 2D
Value gather_rows(const Value& a, std::vector<std::int64_t> indices);  // 2D

// affine layer: x (B x I) * w (I x O) + b (1 x O)
Value affine(const Value& x, const Value& w, const Value& b);

// --- batch normalization over rows of a B x F tensor ---
struct BatchNormState {
  Tensor running_mean;  // 1 x F
  Tensor running_var;   // 1 x F
  double momentum = 0.1;
  double eps = 1e-5;
  std::int64_t batches_seen = 0;

  static BatchNormState init(std::int64_t features);
};

// Training with batch >= 2 uses batch statistics (biased for normalization,
// unbiased for the running update). Training with batch < 2 and eval mode
// use running statistics and perform no update.
Value batch_norm(const Value& x, const Value& gamma, const Value& beta, BatchNormState& state, bool training);

}  // namespace concatlab::ad
