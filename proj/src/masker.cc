#include "sparseattn/masker.h"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>

#include "sparseattn/errors.h"
#include "sparseattn/numerics.h"

namespace sparseattn {

void SparsityConfig::validate() const {
  if (!(k_frac >= 0.0 && k_frac <= 1.0)) throw ParameterError("k_frac must lie in [0, 1]");
  if (!(p_frac >= 0.0 && p_frac <= 1.0)) throw ParameterError("p_frac must lie in [0, 1]");
  if (b_q < 1 || b_kv < 1) throw ParameterError("block sizes must be >= 1");
}

PooledMap PooledMap::from_probs(Tensor probs) {
  require_matrix(probs, "PooledMap::from_probs");
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    auto row = probs.row(i);
    if (std::any_of(row.begin(), row.end(), [](double x) { return !(x >= 0.0); })) {
      throw PreconditionError("PooledMap: negative or NaN probability in row " + std::to_string(i));
    }
    if (std::abs(sum(row) - 1.0) > 1e-12) {
      throw PreconditionError("PooledMap: row " + std::to_string(i) + " does not sum to 1");
    }
  }
  PooledMap pm;
  pm.n_tokens = probs.cols();
  pm.probs = std::move(probs);
  return pm;
}

BlockMask::BlockMask(std::size_t rows, std::size_t cols, std::size_t b_q, std::size_t b_kv,
                     std::size_t n_tokens)
    : rows_(rows), cols_(cols), b_q_(b_q), b_kv_(b_kv), n_tokens_(n_tokens), keep_(rows * cols, 0) {
  if (rows == 0 || cols == 0) throw ShapeError("BlockMask: empty grid");
  if (b_q == 0 || b_kv == 0) throw ParameterError("BlockMask: block sizes must be >= 1");
}

BlockMask BlockMask::all_ones(std::size_t n_tokens, std::size_t b_q, std::size_t b_kv) {
  if (b_q == 0 || b_kv == 0) throw ParameterError("BlockMask: block sizes must be >= 1");
  BlockMask bm(ceil_div(n_tokens, b_q), ceil_div(n_tokens, b_kv), b_q, b_kv, n_tokens);
  std::fill(bm.keep_.begin(), bm.keep_.end(), 1);
  return bm;
}

BlockMask BlockMask::from_rows(const std::vector<std::vector<int>>& keep, std::size_t b_q,
                               std::size_t b_kv, std::size_t n_tokens) {
  if (keep.empty() || keep.front().empty()) throw ShapeError("BlockMask::from_rows: empty");
  BlockMask bm(keep.size(), keep.front().size(), b_q, b_kv, n_tokens);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i].size() != bm.cols_) throw ShapeError("BlockMask::from_rows: ragged rows");
    for (std::size_t j = 0; j < bm.cols_; ++j) bm.set(i, j, keep[i][j] != 0);
  }
  return bm;
}

std::size_t BlockMask::row_kept(std::size_t i) const {
  auto r = row(i);
  return static_cast<std::size_t>(std::count(r.begin(), r.end(), std::uint8_t{1}));
}

std::size_t BlockMask::kept() const {
  return static_cast<std::size_t>(std::count(keep_.begin(), keep_.end(), std::uint8_t{1}));
}

double BlockMask::sparsity() const {
  return 1.0 - static_cast<double>(kept()) / static_cast<double>(total());
}

bool BlockMask::rows_nonempty() const {
  for (std::size_t i = 0; i < rows_; ++i) {
    if (row_kept(i) == 0) return false;
  }
  return true;
}

void BlockMask::validate() const {
  if (rows_ != ceil_div(n_tokens_, b_q_) || cols_ != ceil_div(n_tokens_, b_kv_)) {
    throw ShapeError("BlockMask: " + std::to_string(rows_) + "x" + std::to_string(cols_) +
                     " grid does not tile " + std::to_string(n_tokens_) + " tokens with blocks " +
                     std::to_string(b_q_) + "x" + std::to_string(b_kv_));
  }
  for (std::size_t i = 0; i < rows_; ++i) {
    if (row_kept(i) == 0) {
      throw PreconditionError("BlockMask: query block " + std::to_string(i) + " keeps no key block");
    }
  }
}

std::vector<std::size_t> descending_order(std::span<const double> row) {
  std::vector<std::size_t> order(row.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  return order;
}

std::size_t top_k_count(std::size_t n, double k_frac) {
  if (!(k_frac >= 0.0 && k_frac <= 1.0)) throw ParameterError("k_frac must lie in [0, 1]");
  // The 1e-9 guard keeps products like 0.07 * 100 = 7.000000000000001 at 7.
  const auto raw = static_cast<std::size_t>(std::ceil(k_frac * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(raw, 1, n);
}

std::vector<std::uint8_t> select_top_k(std::span<const double> row, double k_frac) {
  const std::size_t count = top_k_count(row.size(), k_frac);
  const auto order = descending_order(row);
  std::vector<std::uint8_t> keep(row.size(), 0);
  for (std::size_t r = 0; r < count; ++r) keep[order[r]] = 1;
  return keep;
}

std::vector<std::uint8_t> select_top_p(std::span<const double> row, double p_frac) {
  if (!(p_frac >= 0.0 && p_frac <= 1.0)) throw ParameterError("p_frac must lie in [0, 1]");
  const auto order = descending_order(row);
  std::vector<std::uint8_t> keep(row.size(), 0);
  double cumulative = 0.0;
  for (std::size_t idx : order) {
    keep[idx] = 1;
    cumulative += row[idx];
    if (cumulative >= p_frac - kTopPSlack) break;
  }
  return keep;
}

PooledMap pooled_map(const Tensor& q, const Tensor& k, const SparsityConfig& cfg) {
  cfg.validate();
  require_matrix(q, "pooled_map");
  require_matrix(k, "pooled_map");
  if (q.cols() != k.cols()) throw ShapeError("pooled_map: q and k head dims differ");
  if (q.rows() != k.rows()) throw ShapeError("pooled_map: q and k token counts differ");
  const Tensor pq = block_mean_pool(q, cfg.b_q);
  const Tensor pk = block_mean_pool(k, cfg.b_kv);
  Tensor scores = matmul_nt(pq, pk);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  for (double& s : scores.data()) s *= inv_sqrt_d;
  PooledMap pm;
  pm.probs = softmax_rows(scores);
  pm.b_q = cfg.b_q;
  pm.b_kv = cfg.b_kv;
  pm.n_tokens = q.rows();
  return pm;
}

namespace {

template <typename Select>
BlockMask mask_from_rows(const PooledMap& pm, Select select) {
  const Tensor& p = pm.probs;
  BlockMask bm(p.rows(), p.cols(), pm.b_q, pm.b_kv, pm.n_tokens);
  for (std::size_t i = 0; i < p.rows(); ++i) {
    const auto keep = select(p.row(i));
    for (std::size_t j = 0; j < keep.size(); ++j) bm.set(i, j, keep[j] != 0);
  }
  return bm;
}

}  // namespace

BlockMask top_k_mask(const PooledMap& pm, double k_frac) {
  return mask_from_rows(pm, [&](std::span<const double> r) { return select_top_k(r, k_frac); });
}

BlockMask top_p_mask(const PooledMap& pm, double p_frac) {
  return mask_from_rows(pm, [&](std::span<const double> r) { return select_top_p(r, p_frac); });
}

BlockMask mask_union(const BlockMask& a, const BlockMask& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("mask_union: grids differ");
  BlockMask out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out.set(i, j, a.keep(i, j) || b.keep(i, j));
  }
  return out;
}

BlockMask hybrid_mask(const PooledMap& pm, const SparsityConfig& cfg) {
  cfg.validate();
  return mask_union(top_k_mask(pm, cfg.k_frac), top_p_mask(pm, cfg.p_frac));
}

Tensor expand_mask(const BlockMask& bm) {
  bm.validate();
  const std::size_t n = bm.n_tokens();
  Tensor out = Tensor::zeros(n, n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) out(a, b) = bm.keep(a / bm.b_q(), b / bm.b_kv()) ? 1.0 : 0.0;
  }
  return out;
}

std::vector<double> retained_mass(const PooledMap& pm, const BlockMask& bm) {
  if (pm.probs.rows() != bm.rows() || pm.probs.cols() != bm.cols()) {
    throw ShapeError("retained_mass: map and mask grids differ");
  }
  std::vector<double> out(bm.rows(), 0.0);
  for (std::size_t i = 0; i < bm.rows(); ++i) {
    for (std::size_t j = 0; j < bm.cols(); ++j) {
      if (bm.keep(i, j)) out[i] += pm.probs(i, j);
    }
  }
  return out;
}

void write_mask_csv(std::ostream& out, const BlockMask& bm) {
  out << "b_q,b_kv,n_tokens\n" << bm.b_q() << ',' << bm.b_kv() << ',' << bm.n_tokens() << '\n';
  for (std::size_t c = 0; c < bm.cols(); ++c) out << (c ? ",c" : "c") << c;
  out << '\n';
  for (std::size_t i = 0; i < bm.rows(); ++i) {
    for (std::size_t j = 0; j < bm.cols(); ++j) out << (j ? "," : "") << (bm.keep(i, j) ? 1 : 0);
    out << '\n';
  }
}

BlockMask read_mask_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("b_q,b_kv,n_tokens", 0) != 0) {
    throw IoError("mask CSV: missing 'b_q,b_kv,n_tokens' header");
  }
  std::size_t b_q = 0, b_kv = 0, n_tokens = 0;
  char c1 = 0, c2 = 0;
  if (!std::getline(in, line)) throw IoError("mask CSV: missing block metadata");
  std::istringstream meta(line);
  if (!(meta >> b_q >> c1 >> b_kv >> c2 >> n_tokens) || c1 != ',' || c2 != ',') {
    throw IoError("mask CSV: malformed block metadata '" + line + "'");
  }
  if (!std::getline(in, line)) throw IoError("mask CSV: missing column header");
  std::vector<std::vector<int>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::vector<int> r;
    std::istringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) {
      if (cell != "0" && cell != "1" && cell != "0\r" && cell != "1\r") {
        throw IoError("mask CSV: expected 0/1, got '" + cell + "'");
      }
      r.push_back(cell[0] == '1' ? 1 : 0);
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw IoError("mask CSV: no mask rows");
  return BlockMask::from_rows(rows, b_q, b_kv, n_tokens);
}

}  // namespace sparseattn
