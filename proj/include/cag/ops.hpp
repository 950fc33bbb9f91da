#pragma once

#include <vector>

#include "cag/autodiff.hpp"

namespace cag::ad {

// Elementwise, identical shapes.
Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, double s);
Var square(Graph& g, Var a);
// Elementwise against a constant tensor of the same size.
Var mul_const(Graph& g, Var a, const Tensor& c);
Var sub_const(Graph& g, Var a, const Tensor& c);
Var add_const(Graph& g, Var a, const Tensor& c);

Var silu(Graph& g, Var a);
Var sigmoid(Graph& g, Var a);
Var tanh(Graph& g, Var a);

Var sum(Graph& g, Var a);
Var mean(Graph& g, Var a);
Var reshape(Graph& g, Var a, Shape shape);

// a[n,k] * b[k,m]. Rank-N inputs are viewed with the first axis as rows.
Var matmul(Graph& g, Var a, Var b);
// a[n,k] * b[m,k]^T
Var matmul_nt(Graph& g, Var a, Var b);
// x[n,k] * w[k,m] + bias[m]; bias may be an invalid Var.
Var linear(Graph& g, Var x, Var w, Var bias);

// x[N,C,H,W], w[O,C,k,k], bias[O]; stride 1, symmetric zero padding.
Var conv2d(Graph& g, Var x, Var w, Var bias, int pad);
// 2x2 average pooling; H and W must be even.
Var avg_pool2(Graph& g, Var x);
// Bilinear resize with half-pixel centers and edge clamping.
Var resize_bilinear(Graph& g, Var x, Index out_h, Index out_w);

// x[N,C,H,W] -> [N*T, C*p*p], tokens in row-major grid order.
Var patchify(Graph& g, Var x, int patch);
// x[N*T, D] + pe[T, D] broadcast over N.
Var add_rows_periodic(Graph& g, Var x, Var pe);
Var layer_norm(Graph& g, Var x, Var gamma, Var beta, double eps = 1e-5);
// Single-head scaled dot-product attention over groups of `tokens` rows.
Var self_attention(Graph& g, Var q, Var k, Var v, Index tokens);
// [N*T, D] -> [N, D]
Var mean_pool_tokens(Graph& g, Var x, Index tokens);

Var concat_cols(Graph& g, const std::vector<Var>& parts);
Var slice_cols(Graph& g, Var x, Index begin, Index count);
Var l2_normalize_rows(Graph& g, Var x, double eps = 1e-12);

Var log_softmax(Graph& g, Var logits);
// Per-row cross-entropy of softmax(logits) against integer targets -> [N].
Var cross_entropy(Graph& g, Var logits, const std::vector<int>& targets);

// Sum over ordered pairs i != j of <z_i, z_j>, z = rows of x.
Var pairwise_inner_sum(Graph& g, Var x);
// Column mean [d] and unbiased (N-1) column variance [d] of x[N,d].
Var column_mean(Graph& g, Var x);
Var column_variance(Graph& g, Var x);

}  // namespace cag::ad
