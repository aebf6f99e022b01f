// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mmae/tensor.hpp"

#include <span>
#include <vector>

namespace mmae {

// Elementwise. Shapes must match exactly; the model handles its own
// broadcasting needs through add_rowvec.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

// m: [n x d], v: [d] (or [1 x d]); adds v to every row.
Tensor add_rowvec(const Tensor& m, const Tensor& v);

// a: [m x k], b: [k x n]. Backward: dA = dC B^T, dB = A^T dC.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);

// Normalizes along `axis` (negative counts from the back); slices along the
// reduced axis sum to 1. Stabilized by max subtraction.
Tensor softmax(const Tensor& x, int axis = -1);

// Normalization over the last axis, then affine with gamma/beta (rank 1,
// length = last dim).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// Exact Gaussian-CDF form x * Phi(x).
Tensor gelu(const Tensor& x);

// Copies rows of x in idx order; indices may repeat. Backward scatters
// (accumulating) into the source rows.
Tensor gather_rows(const Tensor& x, const std::vector<int>& idx);

Tensor slice_cols(const Tensor& x, int start, int count);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// Column means of a [n x d] matrix as [1 x d].
Tensor mean_rows(const Tensor& x);

// Mean negative log-likelihood of labels under softmax(logits), logits
// [b x c]. Backward is the usual (softmax - one_hot) / b.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace mmae
