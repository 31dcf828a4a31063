#include "sparseattn/analysis.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "sparseattn/errors.h"
#include "sparseattn/numerics.h"
#include "sparseattn/parallel.h"

namespace sparseattn {

RowError error_decompose(std::span<const double> p_row, std::span<const std::uint8_t> m_row,
                         const Tensor& v) {
  require_matrix(v, "error_decompose");
  const std::size_t n = p_row.size();
  if (m_row.size() != n || v.rows() != n) throw ShapeError("error_decompose: length mismatch");
  if (std::abs(sum(p_row) - 1.0) > 1e-12) {
    throw PreconditionError("error_decompose: probability row does not sum to 1");
  }
  if (std::none_of(m_row.begin(), m_row.end(), [](std::uint8_t m) { return m != 0; })) {
    throw PreconditionError("error_decompose: mask keeps nothing");
  }
  const std::size_t d = v.cols();
  RowError e;
  e.dropped_term = Tensor::zeros(1, d);
  e.renorm_term = Tensor::zeros(1, d);
  e.dense_out = Tensor::zeros(1, d);
  e.sparse_out = Tensor::zeros(1, d);

  for (std::size_t j = 0; j < n; ++j) {
    if (m_row[j]) e.tau += p_row[j];
  }
  const double renorm_coef = 1.0 - 1.0 / e.tau;
  auto dropped = e.dropped_term.row(0);
  auto renorm = e.renorm_term.row(0);
  auto dense = e.dense_out.row(0);
  auto sparse = e.sparse_out.row(0);
  for (std::size_t j = 0; j < n; ++j) {
    const double pj = p_row[j];
    auto vj = v.row(j);
    for (std::size_t x = 0; x < d; ++x) {
      dense[x] += pj * vj[x];
      if (m_row[j]) {
        renorm[x] += pj * vj[x];
        sparse[x] += (pj / e.tau) * vj[x];
      } else {
        dropped[x] += pj * vj[x];
      }
    }
  }
  for (double& r : renorm) r *= renorm_coef;
  e.total_error = add(e.dropped_term, e.renorm_term);

  const Tensor direct = subtract(e.dense_out, e.sparse_out);
  double magnitude = 1.0;
  for (std::size_t x = 0; x < d; ++x) magnitude = std::max({magnitude, std::abs(dense[x]), std::abs(sparse[x])});
  if (max_abs_diff(direct, e.total_error) > 1e-10 * magnitude / e.tau) {
    throw NumericError("error_decompose: decomposition disagrees with o - o_s");
  }
  return e;
}

ErrorReport error_report(const Tensor& p, const Tensor& token_mask, const Tensor& v) {
  require_matrix(p, "error_report");
  if (!p.same_shape(token_mask)) throw ShapeError("error_report: mask shape differs from p");
  ErrorReport report;
  double num = 0.0, den = 0.0;
  std::vector<std::uint8_t> m(p.cols());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    auto mrow = token_mask.row(i);
    for (std::size_t j = 0; j < m.size(); ++j) m[j] = mrow[j] != 0.0 ? 1 : 0;
    RowError e = error_decompose(p.row(i), m, v);
    num += l1_norm(e.total_error.data());
    den += l1_norm(e.dense_out.data());
    report.rows.push_back(std::move(e));
  }
  report.relative_l1 = den > 0.0 ? num / den : 0.0;
  return report;
}

double relative_l1(const Tensor& dense, const Tensor& sparse) {
  if (!dense.same_shape(sparse)) throw ShapeError("relative_l1: shape mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < dense.size(); ++i) {
    num += std::abs(dense.data()[i] - sparse.data()[i]);
    den += std::abs(dense.data()[i]);
  }
  return den > 0.0 ? num / den : 0.0;
}

double sparsity_of(const BlockMask& bm) { return bm.sparsity(); }

std::string to_string(RowKind kind) {
  switch (kind) {
    case RowKind::Uniform: return "uniform";
    case RowKind::Skewed: return "skewed";
    case RowKind::OneHot: return "one_hot";
  }
  return "unknown";
}

std::string to_string(MaskRule rule) {
  switch (rule) {
    case MaskRule::TopK: return "top_k";
    case MaskRule::TopP: return "top_p";
    case MaskRule::Hybrid: return "top_k+top_p";
  }
  return "unknown";
}

Tensor generate_rows(const RowDistribution& dist, std::size_t n_rows, std::size_t n_cols, Rng& rng) {
  if (n_rows == 0 || n_cols == 0) throw ParameterError("generate_rows: empty shape");
  Tensor p = Tensor::zeros(n_rows, n_cols);
  for (std::size_t i = 0; i < n_rows; ++i) {
    auto row = p.row(i);
    switch (dist.kind) {
      case RowKind::Uniform: {
        const auto w = rng.dirichlet(n_cols, dist.concentration);
        std::copy(w.begin(), w.end(), row.begin());
        break;
      }
      case RowKind::Skewed: {
        if (n_cols < 2) throw ParameterError("generate_rows: skewed rows need >= 2 columns");
        if (!(dist.sink_mass > 0.0 && dist.sink_mass < 1.0)) {
          throw ParameterError("generate_rows: sink_mass must lie in (0, 1)");
        }
        const auto tail = rng.dirichlet(n_cols - 1, dist.tail_concentration);
        row[0] = dist.sink_mass;
        for (std::size_t j = 1; j < n_cols; ++j) row[j] = (1.0 - dist.sink_mass) * tail[j - 1];
        break;
      }
      case RowKind::OneHot:
        row[rng.uniform_index(n_cols)] = 1.0;
        break;
    }
  }
  return p;
}

Tensor top_count_token_mask(const Tensor& p, std::size_t per_row) {
  Tensor m = Tensor::zeros(p.rows(), p.cols());
  const std::size_t count = std::clamp<std::size_t>(per_row, 1, p.cols());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    const auto order = descending_order(p.row(i));
    for (std::size_t r = 0; r < count; ++r) m(i, order[r]) = 1.0;
  }
  return m;
}

Tensor top_p_token_mask(const Tensor& p, double p_frac) {
  Tensor m = Tensor::zeros(p.rows(), p.cols());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    const auto keep = select_top_p(p.row(i), p_frac);
    for (std::size_t j = 0; j < keep.size(); ++j) m(i, j) = keep[j];
  }
  return m;
}

Tensor hybrid_token_mask(const Tensor& p, std::size_t top_k_per_row, double p_frac) {
  Tensor m = top_count_token_mask(p, top_k_per_row);
  const Tensor mp = top_p_token_mask(p, p_frac);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = std::max(m.data()[i], mp.data()[i]);
  return m;
}

std::size_t count_kept(const Tensor& token_mask) {
  return static_cast<std::size_t>(std::count_if(token_mask.data().begin(), token_mask.data().end(),
                                                [](double x) { return x != 0.0; }));
}

namespace {

// Total keep count of Top-p (optionally with a Top-k floor) at `p_frac`.
std::size_t rule_count(const Tensor& p, std::size_t top_k_floor, double p_frac) {
  const Tensor m = top_k_floor ? hybrid_token_mask(p, top_k_floor, p_frac) : top_p_token_mask(p, p_frac);
  return count_kept(m);
}

// Smallest p_frac in [0, 1] whose keep count is >= budget.
double smallest_p_reaching(const Tensor& p, std::size_t budget, std::size_t top_k_floor) {
  double lo = 0.0, hi = 1.0;
  if (rule_count(p, top_k_floor, lo) >= budget) return lo;
  for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
    const double mid = lo + (hi - lo) / 2.0;
    if (mid <= lo || mid >= hi) break;
    if (rule_count(p, top_k_floor, mid) >= budget) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

Tensor sparse_output(const Tensor& p, const Tensor& token_mask, const Tensor& v) {
  Tensor out = Tensor::zeros(p.rows(), v.cols());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double tau = 0.0;
    for (std::size_t j = 0; j < p.cols(); ++j) {
      if (token_mask(i, j) != 0.0) tau += p(i, j);
    }
    auto o = out.row(i);
    for (std::size_t j = 0; j < p.cols(); ++j) {
      if (token_mask(i, j) == 0.0) continue;
      const double w = p(i, j) / tau;
      auto vj = v.row(j);
      for (std::size_t x = 0; x < o.size(); ++x) o[x] += w * vj[x];
    }
  }
  return out;
}

}  // namespace

bool calibrate_p_for_budget(const Tensor& p, std::size_t budget, std::size_t top_k_floor,
                            double& p_frac_out) {
  p_frac_out = smallest_p_reaching(p, budget, top_k_floor);
  return rule_count(p, top_k_floor, p_frac_out) == budget;
}

double Case1Result::win_rate(MaskRule better, MaskRule worse) const {
  std::size_t wins = 0, done = 0;
  for (const auto& t : trials) {
    if (t.skipped) continue;
    ++done;
    if (t.l1[static_cast<std::size_t>(better)] < t.l1[static_cast<std::size_t>(worse)]) ++wins;
  }
  return done ? static_cast<double>(wins) / static_cast<double>(done) : 0.0;
}

double Case1Result::mean_gap(MaskRule a, MaskRule b) const {
  const double ma = stats[static_cast<std::size_t>(a)].mean_l1;
  const double mb = stats[static_cast<std::size_t>(b)].mean_l1;
  if (mb == 0.0) return ma == 0.0 ? 0.0 : INFINITY;
  return std::abs(ma - mb) / mb;
}

namespace {

constexpr std::uint64_t kCalibrationStream = std::uint64_t{1} << 40;

void check_case1_shape(std::size_t n_rows, std::size_t n_cols, double target_sparsity) {
  if (!(target_sparsity >= 0.0 && target_sparsity < 1.0)) {
    throw ParameterError("case1: target_sparsity must lie in [0, 1)");
  }
  if (n_rows == 0 || n_cols == 0) throw ParameterError("case1: empty shape");
}

}  // namespace

std::string to_string(Case1Matching m) {
  return m == Case1Matching::SharedThreshold ? "shared" : "per-trial";
}

double calibrate_shared_p(const std::vector<RowDistribution>& dists, std::size_t n_rows, std::size_t n_cols,
                          double target_sparsity, std::size_t draws) {
  check_case1_shape(n_rows, n_cols, target_sparsity);
  if (dists.empty() || draws == 0) throw ParameterError("case1 calibration needs at least one draw");
  Tensor pool = Tensor::zeros(dists.size() * draws * n_rows, n_cols);
  std::size_t r = 0;
  for (const auto& dist : dists) {
    const Rng base(dist.seed);
    for (std::size_t i = 0; i < draws; ++i) {
      Rng rng = base.fork(kCalibrationStream + i);
      const Tensor p = generate_rows(dist, n_rows, n_cols, rng);
      for (std::size_t row = 0; row < n_rows; ++row, ++r) {
        std::copy(p.row(row).begin(), p.row(row).end(), pool.row(r).begin());
      }
    }
  }
  const std::size_t budget = top_k_count(n_cols, 1.0 - target_sparsity) * pool.rows();
  return smallest_p_reaching(pool, budget, 0);
}

Case1Result case1_experiment(const Case1Config& cfg) {
  check_case1_shape(cfg.n_rows, cfg.n_cols, cfg.target_sparsity);
  if (cfg.value_dim == 0) throw ParameterError("case1: empty shape");
  const bool shared = cfg.matching == Case1Matching::SharedThreshold;
  if (shared && !(cfg.p_frac >= 0.0 && cfg.p_frac <= 1.0)) throw ParameterError("case1: p_frac must lie in [0, 1]");
  Case1Result result;
  result.config = cfg;
  result.trials.resize(cfg.n_trials);

  const std::size_t per_row = top_k_count(cfg.n_cols, 1.0 - cfg.target_sparsity);
  const std::size_t budget = per_row * cfg.n_rows;
  if (!shared && !(cfg.hybrid_topk_share >= 0.0 && cfg.hybrid_topk_share <= 1.0)) {
    throw ParameterError("case1: hybrid_topk_share must lie in [0, 1]");
  }
  const auto hybrid_floor = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(cfg.hybrid_topk_share * static_cast<double>(per_row))), 1, per_row);
  const double total = static_cast<double>(cfg.n_rows * cfg.n_cols);
  const Rng base(cfg.dist.seed);

  parallel_for(cfg.n_trials, [&](std::size_t t) {
    Case1Trial& trial = result.trials[t];
    Rng rng = base.fork(t);
    trial.seed = rng.seed();
    const Tensor p = generate_rows(cfg.dist, cfg.n_rows, cfg.n_cols, rng);
    const Tensor v = rng.normal_tensor(cfg.n_cols, cfg.value_dim);
    const Tensor dense = matmul(p, v);

    std::array<Tensor, 3> masks;
    masks[0] = top_count_token_mask(p, per_row);
    if (shared) {
      trial.p_frac_top_p = trial.p_frac_hybrid = cfg.p_frac;
      masks[2] = hybrid_token_mask(p, per_row, cfg.p_frac);
    } else {
      const bool ok_p = calibrate_p_for_budget(p, budget, 0, trial.p_frac_top_p);
      const bool ok_h = calibrate_p_for_budget(p, budget, hybrid_floor, trial.p_frac_hybrid);
      trial.skipped = !(ok_p && ok_h);
      masks[2] = hybrid_token_mask(p, hybrid_floor, trial.p_frac_hybrid);
    }
    masks[1] = top_p_token_mask(p, trial.p_frac_top_p);
    for (std::size_t r = 0; r < 3; ++r) {
      trial.l1[r] = relative_l1(dense, sparse_output(p, masks[r], v));
      trial.sparsity[r] = 1.0 - static_cast<double>(count_kept(masks[r])) / total;
    }
  });

  for (MaskRule rule : kAllRules) {
    const auto r = static_cast<std::size_t>(rule);
    MaskerStats& s = result.stats[r];
    s.rule = rule;
    double sum_l1 = 0.0, sum_sp = 0.0;
    for (const auto& t : result.trials) {
      if (t.skipped) continue;
      ++s.n_trials;
      sum_l1 += t.l1[r];
      sum_sp += t.sparsity[r];
    }
    if (s.n_trials == 0) continue;
    s.mean_l1 = sum_l1 / static_cast<double>(s.n_trials);
    s.sparsity = sum_sp / static_cast<double>(s.n_trials);
    double var = 0.0;
    for (const auto& t : result.trials) {
      if (!t.skipped) var += (t.l1[r] - s.mean_l1) * (t.l1[r] - s.mean_l1);
    }
    s.std_l1 = s.n_trials > 1 ? std::sqrt(var / static_cast<double>(s.n_trials - 1)) : 0.0;
  }
  for (const auto& t : result.trials) result.skipped += t.skipped ? 1 : 0;
  return result;
}

double mass_sparsity(const Tensor& p, double retained_mass) {
  require_matrix(p, "mass_sparsity");
  const Tensor m = top_p_token_mask(p, retained_mass);
  return 1.0 - static_cast<double>(count_kept(m)) / static_cast<double>(p.size());
}

namespace {

void require_stochastic(const Tensor& p, const char* what) {
  require_matrix(p, what);
  for (std::size_t i = 0; i < p.rows(); ++i) {
    auto row = p.row(i);
    if (std::any_of(row.begin(), row.end(), [](double x) { return !(x >= 0.0); }) ||
        std::abs(sum(row) - 1.0) > 1e-12) {
      throw PreconditionError(std::string(what) + ": row " + std::to_string(i) + " is not a probability vector");
    }
  }
}

}  // namespace

Case2Result case2_experiment(const Tensor& p_before, const Tensor& p_after, double retained_mass_target,
                             const Tensor& v) {
  require_stochastic(p_before, "case2 p_before");
  require_stochastic(p_after, "case2 p_after");
  if (!p_before.same_shape(p_after)) throw ShapeError("case2: matrices differ in shape");
  if (v.rows() != p_before.cols()) throw ShapeError("case2: V rows must match columns of P");
  if (!(retained_mass_target >= 0.0 && retained_mass_target <= 1.0)) {
    throw ParameterError("case2: retained_mass_target must lie in [0, 1]");
  }

  Case2Result r;
  r.sparsity_before = mass_sparsity(p_before, retained_mass_target);
  r.sparsity_after = mass_sparsity(p_after, retained_mass_target);
  r.matched_sparsity = std::min(r.sparsity_before, r.sparsity_after);
  const auto budget = static_cast<std::size_t>(
      std::llround((1.0 - r.matched_sparsity) * static_cast<double>(p_before.size())));

  auto l1_at_budget = [&](const Tensor& p) {
    const double p_frac = smallest_p_reaching(p, budget, 0);
    const Tensor mask = top_p_token_mask(p, p_frac);
    return relative_l1(matmul(p, v), sparse_output(p, mask, v));
  };
  r.l1_before = l1_at_budget(p_before);
  r.l1_after = l1_at_budget(p_after);
  return r;
}

}  // namespace sparseattn
