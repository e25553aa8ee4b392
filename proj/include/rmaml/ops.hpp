#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "rmaml/tensor.hpp"

namespace rmaml {

// Differentiable primitives. Binary elementwise ops accept equal shapes, or a
// rank-0 operand on either side; nothing else broadcasts.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);
/// Zero gradient everywhere.
Tensor sign(const Tensor& a);
/// Gradient passes where lo <= a <= hi and is zero outside.
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
/// [B, ...] -> [B, prod(...)]
Tensor flatten(const Tensor& a);

using IndexMap = std::shared_ptr<const std::vector<std::ptrdiff_t>>;

/// out[i] = a.flat[index[i]], or 0 where index[i] < 0.
Tensor gather(const Tensor& a, IndexMap index, Shape out_shape);
/// out.flat[index[i]] += a[i]; the adjoint of gather.
Tensor scatter_add(const Tensor& a, IndexMap index, Shape out_shape);

/// x [B,C,H,W], weight [O,C,kh,kw], stride 1, symmetric zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t padding);
/// Non-overlapping window max; ties go to the first element in row-major order.
Tensor maxpool2d(const Tensor& x, std::size_t window);

/// Adds a per-column bias: x [B,N] + b [N].
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
/// x [B,C,H,W] * scale[C] + shift[C] per channel.
Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift);
/// Adds a per-channel bias to x [B,C,H,W].
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

/// Row-wise log-softmax of [B,N].
Tensor log_softmax(const Tensor& logits);
Tensor softmax(const Tensor& logits);
/// Mean cross-entropy of [B,N] logits against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Mean over rows of KL(softmax(p_logits) || softmax(q_logits)).
Tensor kl_div(const Tensor& p_logits, const Tensor& q_logits);
/// Mean over rows of max(z_y - max_{j != y} z_j, -kappa).
Tensor margin_loss(const Tensor& logits, std::span<const int> labels, double kappa = 0.0);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

/// Row-wise argmax of [B,N]; ties resolve to the lowest column.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace rmaml
