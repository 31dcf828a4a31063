#pragma once

// Brute-force reference implementations for tests. Each one is a naive loop
// over the definition and shares nothing with the library except Tensor.
// Keep them slow and obvious: no tiling, no reuse of library helpers.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "sparseattn/tensor.h"

namespace oracles {

using sparseattn::Tensor;

// Large negative stand-in for -inf; exp() of it underflows to exactly 0.
inline constexpr double kNegInf = -1e30;

struct Deviation {
  double max_abs = 0.0;
  double relative = 0.0;  // max_abs / max(|reference|), or max_abs if reference is 0
};
Deviation deviation(const Tensor& value, const Tensor& reference);

Tensor naive_matmul(const Tensor& a, const Tensor& b);
Tensor naive_softmax_rows(const Tensor& x);

// O = softmax(q k^T / sqrt(d)) v via explicit S, P, O.
Tensor dense_attention(const Tensor& q, const Tensor& k, const Tensor& v);
// Dropped scores set to kNegInf before the softmax. Every mask row needs a 1.
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& token_mask);

// Mean of rows [i*block, min((i+1)*block, n)).
Tensor mean_pool(const Tensor& x, std::size_t block);
// softmax(pool(q) pool(k)^T / sqrt(d)).
Tensor pooled_probs(const Tensor& q, const Tensor& k, std::size_t b_q, std::size_t b_kv);

// 0/1 indicator of the `count` largest entries, ties to the lower index, by
// repeated linear argmax.
std::vector<int> top_count(const std::vector<double>& row, std::size_t count);
// Smallest number of entries of any subset whose sum reaches p - slack,
// found by enumerating all 2^n subsets. n <= 20.
std::size_t min_subset_size_reaching(const std::vector<double>& row, double p, double slack);

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every i.
std::vector<double> fd_grad(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                            double h);
// Same, restricted to the listed coordinates.
std::vector<double> fd_grad_at(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                               const std::vector<std::size_t>& coords, double h);

// max |a - b| / max(|a|, |b|, floor) over entries.
double rel_err(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-8);

}  // namespace oracles
