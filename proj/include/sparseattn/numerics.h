#pragma once

#include <cstddef>
#include <span>

#include "sparseattn/tensor.h"

namespace sparseattn {

// Dense product a[m x k] * b[k x n]. Each output entry is accumulated
// left-to-right over the contraction index, starting from 0.
Tensor matmul(const Tensor& a, const Tensor& b);
// a[m x k] * b[n x k]^T, same summation order.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// a[k x m]^T * b[k x n], same summation order.
Tensor matmul_tn(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);

// Row-wise softmax with max subtraction. Rows sum to 1 within 1e-12.
Tensor softmax_rows(const Tensor& x);

// Row i of the result is the mean of input rows [i*block, min((i+1)*block, N)).
// The final block may be ragged and is averaged over its actual length.
Tensor block_mean_pool(const Tensor& x, std::size_t block);

// Number of blocks of size `block` covering `n` items.
constexpr std::size_t ceil_div(std::size_t n, std::size_t block) { return (n + block - 1) / block; }

double dot(std::span<const double> a, std::span<const double> b);
double sum(std::span<const double> a);
double l1_norm(std::span<const double> a);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Elementwise helpers for same-shaped tensors.
Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
void add_inplace(Tensor& a, const Tensor& b);

}  // namespace sparseattn
