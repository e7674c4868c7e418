// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "ulab/tensor.hpp"

// Differentiable tensor operations. Layouts: images and feature maps are
// NCHW, token sequences are [batch, length, width], matrices are row-major.
namespace ulab {

// Elementwise, equal shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor square(const Tensor& x);

// [m,k] x [k,n]; trans flags reinterpret the stored operand as transposed.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
// x [n,in], w [out,in], bias [out] (may be undefined)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

Tensor reshape(const Tensor& x, Shape shape);
// [b,r,c] -> [b,c,r]; a rank-2 input is treated as b = 1.
Tensor transpose(const Tensor& x);

// x [n,c,h,w], w [o,c,k,k], bias [o] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad);
Tensor upsample_nearest2x(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end);
// x [n,c,h,w] + v [n,c] broadcast over space.
Tensor add_channel_vector(const Tensor& x, const Tensor& v);
Tensor global_avg_pool(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// q [b,lq,d], k,v [b,lk,d]. Scaled dot-product attention split into heads
// along d. causal masks keys beyond the query position (requires lq == lk).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, bool causal);

// table [vocab,d], ids -> [ids.size(), d]
Tensor embedding(const Tensor& table, const std::vector<std::size_t>& ids);
Tensor select_rows(const Tensor& x, const std::vector<std::size_t>& rows);
// e [n,d], token [d] or [1,d] -> [n,2,d] with rows (e_i, token)
Tensor append_token(const Tensor& e, const Tensor& token);
Tensor normalize_rows(const Tensor& x, double eps = 1e-12);

// Reductions to shape [1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor frobenius_norm(const Tensor& x);
// logits [n,c], integer labels; mean negative log-likelihood.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);

}  // namespace ulab
