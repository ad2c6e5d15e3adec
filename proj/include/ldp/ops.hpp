#pragma once

#include <vector>

#include "ldp/tensor.hpp"

// Differentiable tensor operations. Every op validates shapes, checks the
// output for NaN/Inf, and (when a tape is bound and an input requires grad)
// records a backward closure. Accumulation order is fixed row-major
// sequential so repeated runs are bit-identical.
namespace ldp::ops {

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor silu(const Tensor& x);

// x [N,C,H,W] + bias [N,C] broadcast over spatial dims.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

// input [N,Cin,H,W], weight [Cout,Cin,Kh,Kw], bias [Cout].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding);

Tensor avg_pool2d(const Tensor& input, int factor);
Tensor upsample_nearest(const Tensor& input, int factor);

// gamma/beta [C]; normalizes each group of channels to mean 0, variance 1
// before the affine transform.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  float eps = 1e-5f);

// weight [out,in], bias [out]. Rank dispatch: [N,in] rows, [N,T,in] tokens,
// and [N,C,H,W] pointwise over channels (1x1-conv semantics).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor softmax_lastdim(const Tensor& x);

// Batched matmul over rank-3 stacks: [N,T,K] x [N,K,S] -> [N,T,S].
Tensor bmm(const Tensor& a, const Tensor& b);
// [N,T,K] x [N,S,K] -> [N,T,S] (second operand transposed on last dims).
Tensor bmm_nt(const Tensor& a, const Tensor& b);

// q [N,T,C], k/v [N,S,C]; scale 1/sqrt(C). Composed from bmm/softmax so the
// gradient comes from the primitives.
Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v);

inline Tensor residual_add(const Tensor& a, const Tensor& b) { return add(a, b); }

Tensor concat_channels(const Tensor& a, const Tensor& b);

// [N,C,H,W] <-> [N,H*W,C]
Tensor to_tokens(const Tensor& x);
Tensor from_tokens(const Tensor& x, int h, int w);

// table [V,S,D], ids per batch row -> [N,S,D]. Differentiable w.r.t. table.
Tensor embed_rows(const Tensor& table, const std::vector<int>& ids);

// Reductions to scalar.
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

} // namespace ldp::ops
