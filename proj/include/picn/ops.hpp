#pragma once

#include <vector>

#include "picn/tensor.hpp"

// Differentiable operations. Every function returns a new tensor and records
// a backward rule on the current thread's tape when recording is enabled and
// an input requires a gradient. Elementwise binaries require identical shapes;
// use broadcast_to for the explicit size-1 expansions the networks need.
namespace picn::ops {

inline constexpr double kLeakySlope = 0.1;

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T value);

// Derivative at exactly 0 is taken from the positive side (1).
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& a, T slope = T(kLeakySlope));
template <typename T> Tensor<T> tanh(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
// d|x|/dx = sign(x), 0 at 0.
template <typename T> Tensor<T> abs(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);
// Gradient at sqrt(0) is defined as 0.
template <typename T> Tensor<T> sqrt(const Tensor<T>& a);
// Gradient passes where lo <= x <= hi and is zero outside.
template <typename T> Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);

// Reductions. An empty axes list is rejected; use the *_all variants for a
// full reduction to a rank-0 scalar.
template <typename T> Tensor<T> sum(const Tensor<T>& a, const std::vector<std::size_t>& axes, bool keepdim = false);
template <typename T> Tensor<T> mean(const Tensor<T>& a, const std::vector<std::size_t>& axes, bool keepdim = false);
// Gradient goes to the first maximal element along the reduced axes.
template <typename T> Tensor<T> max(const Tensor<T>& a, const std::vector<std::size_t>& axes, bool keepdim = false);
template <typename T> Tensor<T> sum_all(const Tensor<T>& a);
template <typename T> Tensor<T> mean_all(const Tensor<T>& a);

// 2-D product with optional transposition of either operand.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a = false, bool transpose_b = false);
// Batched 3-D product: [B,M,K] x [B,K,N] (after optional transposition of the last two axes).
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a = false, bool transpose_b = false);

// Max-subtracted softmax along one axis.
template <typename T> Tensor<T> softmax(const Tensor<T>& a, std::size_t axis);

template <typename T> Tensor<T> reshape(const Tensor<T>& a, const Shape& shape);
// Expands extents equal to 1 (rank must match); the backward pass sums.
template <typename T> Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T> Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length);

// Cross-correlation of [B,Cin,H,W] with [Cout,Cin,k,k]. bias may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad);
template <typename T> Tensor<T> avg_pool2(const Tensor<T>& a);
template <typename T> Tensor<T> upsample_nearest2(const Tensor<T>& a);

}  // namespace picn::ops
