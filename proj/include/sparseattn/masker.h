#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "sparseattn/tensor.h"

namespace sparseattn {

// Full block-masking policy. Defaults are the 1.3B/480p settings the method
// was tuned with (Top-k 0.03, Top-p 0.2, 128x64 tiles).
struct SparsityConfig {
  double k_frac = 0.03;
  double p_frac = 0.2;
  std::size_t b_q = 128;
  std::size_t b_kv = 64;

  // Throws ParameterError on out-of-range fields.
  void validate() const;
};

// Absolute slack on the Top-p cumulative-mass comparison.
inline constexpr double kTopPSlack = 1e-12;

// Block-pooled attention probabilities, one distribution per query block.
struct PooledMap {
  Tensor probs;  // T_m x T_n
  std::size_t b_q = 1;
  std::size_t b_kv = 1;
  std::size_t n_tokens = 0;

  // Wraps an arbitrary row-stochastic matrix as a token-level map
  // (b_q = b_kv = 1, n_tokens = cols). Rows must sum to 1 within 1e-12.
  static PooledMap from_probs(Tensor probs);
};

// Keep/drop flag per (query block, key block) tile.
class BlockMask {
 public:
  BlockMask() = default;
  // All tiles dropped; callers set the ones to keep.
  BlockMask(std::size_t rows, std::size_t cols, std::size_t b_q, std::size_t b_kv,
            std::size_t n_tokens);

  static BlockMask all_ones(std::size_t n_tokens, std::size_t b_q, std::size_t b_kv);
  static BlockMask from_rows(const std::vector<std::vector<int>>& keep, std::size_t b_q,
                             std::size_t b_kv, std::size_t n_tokens);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t b_q() const { return b_q_; }
  std::size_t b_kv() const { return b_kv_; }
  std::size_t n_tokens() const { return n_tokens_; }

  bool keep(std::size_t i, std::size_t j) const { return keep_[i * cols_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool value) { keep_[i * cols_ + j] = value ? 1 : 0; }
  std::span<const std::uint8_t> row(std::size_t i) const {
    return std::span<const std::uint8_t>(keep_).subspan(i * cols_, cols_);
  }

  std::size_t row_kept(std::size_t i) const;
  std::size_t kept() const;
  std::size_t total() const { return rows_ * cols_; }
  // 1 - kept / total.
  double sparsity() const;

  // Every row keeps at least one tile.
  bool rows_nonempty() const;
  // Throws PreconditionError if a row is empty, or ShapeError if the grid does
  // not tile `n_tokens` with the stored block sizes.
  void validate() const;

  friend bool operator==(const BlockMask& a, const BlockMask& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t b_q_ = 1;
  std::size_t b_kv_ = 1;
  std::size_t n_tokens_ = 0;
  std::vector<std::uint8_t> keep_;
};

// Row-level selection rules. Ties are broken toward the lower index, so the
// descending order used everywhere is (value desc, index asc).
std::vector<std::size_t> descending_order(std::span<const double> row);
// Keeps max(1, ceil(k_frac * n)) largest entries.
std::vector<std::uint8_t> select_top_k(std::span<const double> row, double k_frac);
std::size_t top_k_count(std::size_t n, double k_frac);
// Keeps the shortest descending prefix whose sum reaches p_frac (>= with
// kTopPSlack), never fewer than one entry.
std::vector<std::uint8_t> select_top_p(std::span<const double> row, double p_frac);

// softmax(pool(q) pool(k)^T / sqrt(d)) with mean pooling over b_q / b_kv rows.
PooledMap pooled_map(const Tensor& q, const Tensor& k, const SparsityConfig& cfg);

BlockMask top_k_mask(const PooledMap& pm, double k_frac);
BlockMask top_p_mask(const PooledMap& pm, double p_frac);
// Union of the Top-k and Top-p selections, per row.
BlockMask hybrid_mask(const PooledMap& pm, const SparsityConfig& cfg);
BlockMask mask_union(const BlockMask& a, const BlockMask& b);

// Token-level 0/1 matrix: entry (a, b) = keep(a / b_q, b / b_kv).
Tensor expand_mask(const BlockMask& bm);

// Retained pooled probability per row under `bm`.
std::vector<double> retained_mass(const PooledMap& pm, const BlockMask& bm);

// CSV: "b_q,b_kv,n_tokens" line, the values line, a `c0,c1,...` header, then
// one 0/1 row per query block.
void write_mask_csv(std::ostream& out, const BlockMask& bm);
BlockMask read_mask_csv(std::istream& in);

}  // namespace sparseattn
