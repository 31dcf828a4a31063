#include "sparseattn/attention.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "sparseattn/errors.h"
#include "sparseattn/numerics.h"

namespace sparseattn {
namespace {

void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, const char* op) {
  require_matrix(q, op);
  require_matrix(k, op);
  require_matrix(v, op);
  if (q.cols() != k.cols()) throw ShapeError(std::string(op) + ": q and k head dims differ");
  if (k.rows() != v.rows()) throw ShapeError(std::string(op) + ": k and v token counts differ");
  if (q.rows() != k.rows()) throw ShapeError(std::string(op) + ": q and k token counts differ");
  require_finite(q, op);
  require_finite(k, op);
  require_finite(v, op);
}

void check_mask(const BlockMask& bm, std::size_t n, const char* op) {
  if (bm.n_tokens() != n) {
    throw ShapeError(std::string(op) + ": mask covers " + std::to_string(bm.n_tokens()) +
                     " tokens, inputs have " + std::to_string(n));
  }
  bm.validate();
}

std::vector<std::size_t> visit_order(const KernelOptions& opts, std::size_t blocks) {
  std::vector<std::size_t> order(blocks);
  if (opts.key_block_order.empty()) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    return order;
  }
  if (opts.key_block_order.size() != blocks) {
    throw ShapeError("key_block_order must list every key block exactly once");
  }
  std::vector<std::uint8_t> seen(blocks, 0);
  for (std::size_t t = 0; t < blocks; ++t) {
    const std::size_t j = opts.key_block_order[t];
    if (j >= blocks || seen[j]) throw ShapeError("key_block_order is not a permutation");
    seen[j] = 1;
    order[t] = j;
  }
  return order;
}

}  // namespace

AttentionOutput dense_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  check_qkv(q, k, v, "dense_attention");
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor scores = matmul_nt(q, k);
  for (double& s : scores.data()) s *= scale;

  AttentionOutput result;
  result.lse.resize(q.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    auto row = scores.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double s : row) total += std::exp(s - mx);
    result.lse[i] = mx + std::log(total);
  }
  result.out = matmul(softmax_rows(scores), v);
  result.mask_used = BlockMask::all_ones(q.rows(), q.rows(), q.rows());
  return result;
}

AttentionOutput sparse_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const SparsityConfig& cfg, KernelOptions opts) {
  check_qkv(q, k, v, "sparse_attention");
  const PooledMap pm = pooled_map(q, k, cfg);
  return sparse_attention_with_mask(q, k, v, hybrid_mask(pm, cfg), opts);
}

AttentionOutput sparse_attention_with_mask(const Tensor& q, const Tensor& k, const Tensor& v,
                                           const BlockMask& bm, KernelOptions opts) {
  check_qkv(q, k, v, "sparse_attention_with_mask");
  const std::size_t n = q.rows();
  const std::size_t d = q.cols();
  const std::size_t dv = v.cols();
  check_mask(bm, n, "sparse_attention_with_mask");
  const auto order = visit_order(opts, bm.cols());
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();

  AttentionOutput result;
  result.out = Tensor::zeros(n, dv);
  result.lse.assign(n, 0.0);
  result.mask_used = bm;

  std::vector<double> row_max, row_sum, tile;
  for (std::size_t i = 0; i < bm.rows(); ++i) {
    const std::size_t r0 = i * bm.b_q();
    const std::size_t r1 = std::min(r0 + bm.b_q(), n);
    const std::size_t rows = r1 - r0;
    row_max.assign(rows, kNegInf);
    row_sum.assign(rows, 0.0);

    for (std::size_t j : order) {
      if (!bm.keep(i, j)) continue;
      if (opts.counter) opts.counter->computed.fetch_add(1, std::memory_order_relaxed);
      const std::size_t c0 = j * bm.b_kv();
      const std::size_t c1 = std::min(c0 + bm.b_kv(), n);
      const std::size_t cols = c1 - c0;
      tile.resize(cols);

      for (std::size_t r = 0; r < rows; ++r) {
        auto qr = q.row(r0 + r);
        // S_ij row and its max.
        double tile_max = kNegInf;
        for (std::size_t c = 0; c < cols; ++c) {
          tile[c] = dot(qr, k.row(c0 + c)) * scale;
          tile_max = std::max(tile_max, tile[c]);
        }
        const double m_new = std::max(row_max[r], tile_max);
        const double correction = std::exp(row_max[r] - m_new);  // 0 on the first kept tile
        double tile_sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          tile[c] = std::exp(tile[c] - m_new);
          tile_sum += tile[c];
        }
        row_sum[r] = correction * row_sum[r] + tile_sum;
        row_max[r] = m_new;

        double* acc = result.out.row(r0 + r).data();
        for (std::size_t x = 0; x < dv; ++x) acc[x] *= correction;
        for (std::size_t c = 0; c < cols; ++c) {
          const double p = tile[c];
          const double* vc = v.row(c0 + c).data();
          for (std::size_t x = 0; x < dv; ++x) acc[x] += p * vc[x];
        }
      }
    }

    for (std::size_t r = 0; r < rows; ++r) {
      double* acc = result.out.row(r0 + r).data();
      const double inv = 1.0 / row_sum[r];
      for (std::size_t x = 0; x < dv; ++x) acc[x] *= inv;
      result.lse[r0 + r] = row_max[r] + std::log(row_sum[r]);
    }
  }
  require_finite(result.out, "sparse_attention_with_mask");
  return result;
}

AttentionGrads attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                  const AttentionOutput& fwd, const Tensor& d_out) {
  check_qkv(q, k, v, "attention_backward");
  require_matrix(d_out, "attention_backward");
  if (!d_out.same_shape(fwd.out)) throw ShapeError("attention_backward: d_out shape differs from output");
  require_finite(d_out, "attention_backward");
  const BlockMask& bm = fwd.mask_used;
  const std::size_t n = q.rows();
  check_mask(bm, n, "attention_backward");
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));

  AttentionGrads g{Tensor::zeros(n, q.cols()), Tensor::zeros(n, k.cols()), Tensor::zeros(n, v.cols())};

  // delta_r = dO_r . O_r
  std::vector<double> delta(n);
  for (std::size_t r = 0; r < n; ++r) delta[r] = dot(d_out.row(r), fwd.out.row(r));

  for (std::size_t i = 0; i < bm.rows(); ++i) {
    const std::size_t r0 = i * bm.b_q();
    const std::size_t r1 = std::min(r0 + bm.b_q(), n);
    for (std::size_t j = 0; j < bm.cols(); ++j) {
      if (!bm.keep(i, j)) continue;
      const std::size_t c0 = j * bm.b_kv();
      const std::size_t c1 = std::min(c0 + bm.b_kv(), n);
      for (std::size_t r = r0; r < r1; ++r) {
        auto qr = q.row(r);
        auto dor = d_out.row(r);
        auto dqr = g.dq.row(r);
        for (std::size_t c = c0; c < c1; ++c) {
          const double p = std::exp(dot(qr, k.row(c)) * scale - fwd.lse[r]);
          auto dvc = g.dv.row(c);
          for (std::size_t x = 0; x < dvc.size(); ++x) dvc[x] += p * dor[x];
          const double ds = p * (dot(dor, v.row(c)) - delta[r]) * scale;
          auto kc = k.row(c);
          auto dkc = g.dk.row(c);
          for (std::size_t x = 0; x < dqr.size(); ++x) {
            dqr[x] += ds * kc[x];
            dkc[x] += ds * qr[x];
          }
        }
      }
    }
  }
  return g;
}

AttentionGrads attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                  const BlockMask& bm, const Tensor& d_out) {
  return attention_backward(q, k, v, sparse_attention_with_mask(q, k, v, bm), d_out);
}

std::vector<double> dense_row_lse(const Tensor& q, const Tensor& k) {
  require_matrix(q, "dense_row_lse");
  require_matrix(k, "dense_row_lse");
  if (q.cols() != k.cols()) throw ShapeError("dense_row_lse: head dims differ");
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  std::vector<double> lse(q.rows());
  std::vector<double> row(k.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k.rows(); ++j) {
      row[j] = dot(q.row(i), k.row(j)) * scale;
      mx = std::max(mx, row[j]);
    }
    double total = 0.0;
    for (double s : row) total += std::exp(s - mx);
    lse[i] = mx + std::log(total);
  }
  return lse;
}

std::vector<double> token_retained_mass(const Tensor& q, const Tensor& k,
                                        const AttentionOutput& sparse) {
  const auto full = dense_row_lse(q, k);
  if (full.size() != sparse.lse.size()) throw ShapeError("token_retained_mass: row counts differ");
  std::vector<double> tau(full.size());
  for (std::size_t i = 0; i < full.size(); ++i) tau[i] = std::min(1.0, std::exp(sparse.lse[i] - full[i]));
  return tau;
}

}  // namespace sparseattn
