#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "sparseattn/masker.h"
#include "sparseattn/tensor.h"

namespace sparseattn {

// Receives one increment per computed (query block, key block) tile.
struct BlockCounter {
  std::atomic<std::uint64_t> computed{0};

  std::uint64_t value() const { return computed.load(); }
  void reset() { computed.store(0); }
};

struct KernelOptions {
  BlockCounter* counter = nullptr;
  // Permutation of [0, T_n) giving the key-block visit order within each
  // query block. Empty means ascending.
  std::span<const std::size_t> key_block_order = {};
};

struct AttentionOutput {
  Tensor out;               // N x d
  std::vector<double> lse;  // per query row, over kept tiles only
  BlockMask mask_used;
};

struct AttentionGrads {
  Tensor dq, dk, dv;
};

// softmax(q k^T / sqrt(d)) v, materializing the full score matrix.
AttentionOutput dense_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Pooled map -> hybrid Top-k/Top-p mask -> tiled online-softmax kernel.
AttentionOutput sparse_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const SparsityConfig& cfg, KernelOptions opts = {});

// Tiled kernel with a caller-supplied mask. Dropped tiles cost nothing: no
// score product, no exponentials, no value product.
AttentionOutput sparse_attention_with_mask(const Tensor& q, const Tensor& k, const Tensor& v,
                                           const BlockMask& bm, KernelOptions opts = {});

// Gradients of the masked, renormalized attention output. The mask is a
// constant of the forward pass. Probabilities are recomputed per tile from
// the stored log-sum-exp.
AttentionGrads attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                  const AttentionOutput& fwd, const Tensor& d_out);
AttentionGrads attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                  const BlockMask& bm, const Tensor& d_out);

// Full-row log-sum-exp of q k^T / sqrt(d), without tiling.
std::vector<double> dense_row_lse(const Tensor& q, const Tensor& k);

// Token-level probability mass kept by `sparse` in each query row,
// exp(lse_kept - lse_full).
std::vector<double> token_retained_mass(const Tensor& q, const Tensor& k,
                                        const AttentionOutput& sparse);

}  // namespace sparseattn
