#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sparseattn/masker.h"
#include "sparseattn/rng.h"
#include "sparseattn/tensor.h"

namespace sparseattn {

// Error of one renormalized sparse attention row, split into the part lost
// with the dropped probabilities and the part caused by dividing the kept
// ones by tau.
struct RowError {
  double tau = 0.0;     // retained probability mass
  Tensor dropped_term;  // (p * (1 - m)) V
  Tensor renorm_term;   // (1 - 1/tau) (p * m) V
  Tensor total_error;   // dropped_term + renorm_term
  Tensor dense_out;     // p V
  Tensor sparse_out;    // (p * m / tau) V
};

struct ErrorReport {
  std::vector<RowError> rows;
  double relative_l1 = 0.0;  // sum |o - o_s| / sum |o| over every row and column
};

// p_row must sum to 1 within 1e-12 and m_row must keep at least one entry;
// both violations throw PreconditionError.
RowError error_decompose(std::span<const double> p_row, std::span<const std::uint8_t> m_row,
                         const Tensor& v);
// Row-wise decomposition of a full probability matrix under a 0/1 token mask.
ErrorReport error_report(const Tensor& p, const Tensor& token_mask, const Tensor& v);

double relative_l1(const Tensor& dense, const Tensor& sparse);
double sparsity_of(const BlockMask& bm);

enum class RowKind { Uniform, Skewed, OneHot };

// Synthetic attention-row generator.
//   Uniform: each row ~ Dirichlet(concentration).
//   Skewed:  column 0 is a sink holding `sink_mass`; the remaining mass is
//            spread by Dirichlet(tail_concentration).
//   OneHot:  a single random column holds all the mass.
struct RowDistribution {
  RowKind kind = RowKind::Uniform;
  double concentration = 5.0;
  double sink_mass = 0.6;
  double tail_concentration = 0.5;
  std::uint64_t seed = 0;

  static RowDistribution uniform(std::uint64_t seed) { return {RowKind::Uniform, 5.0, 0.6, 0.5, seed}; }
  static RowDistribution skewed(std::uint64_t seed) { return {RowKind::Skewed, 5.0, 0.6, 0.5, seed}; }
  static RowDistribution one_hot(std::uint64_t seed) { return {RowKind::OneHot, 5.0, 0.6, 0.5, seed}; }
};

std::string to_string(RowKind kind);
Tensor generate_rows(const RowDistribution& dist, std::size_t n_rows, std::size_t n_cols, Rng& rng);

enum class MaskRule : std::size_t { TopK = 0, TopP = 1, Hybrid = 2 };
inline constexpr std::array<MaskRule, 3> kAllRules = {MaskRule::TopK, MaskRule::TopP, MaskRule::Hybrid};
std::string to_string(MaskRule rule);

// Token masks (n_rows x n_cols, 0/1) for a row-stochastic matrix.
Tensor top_count_token_mask(const Tensor& p, std::size_t per_row);
Tensor top_p_token_mask(const Tensor& p, double p_frac);
Tensor hybrid_token_mask(const Tensor& p, std::size_t top_k_per_row, double p_frac);
std::size_t count_kept(const Tensor& token_mask);

// Smallest p_frac whose rule keeps `budget` entries in total across all rows.
// Returns false if the step function jumps over `budget` (ties).
bool calibrate_p_for_budget(const Tensor& p, std::size_t budget, std::size_t top_k_floor,
                            double& p_frac_out);

// How Top-p is given the same keep count as Top-k.
//   SharedThreshold: one p_frac for every trial and row family, calibrated
//     beforehand so its mean keep count over a mixed pool of row families
//     equals Top-k's (see calibrate_shared_p).
//   PerTrialBudget: p_frac recalibrated on each trial's own rows to hit
//     Top-k's total keep count exactly.
enum class Case1Matching { SharedThreshold, PerTrialBudget };
std::string to_string(Case1Matching m);

struct Case1Config {
  RowDistribution dist;
  std::size_t n_rows = 64;
  std::size_t n_cols = 64;
  double target_sparsity = 0.9;
  std::size_t n_trials = 100;
  std::size_t value_dim = 16;
  Case1Matching matching = Case1Matching::PerTrialBudget;
  double p_frac = 0.0;  // SharedThreshold only
  // PerTrialBudget only: the hybrid keeps this share of Top-k's count as its
  // Top-k floor and Top-p is calibrated to fill the rest of the budget.
  // SharedThreshold uses the plain union of the two single-rule masks.
  double hybrid_topk_share = 0.5;
};

struct Case1Trial {
  std::uint64_t seed = 0;
  bool skipped = false;
  std::array<double, 3> l1{};        // indexed by MaskRule
  std::array<double, 3> sparsity{};  // indexed by MaskRule
  double p_frac_top_p = 0.0;
  double p_frac_hybrid = 0.0;
};

struct MaskerStats {
  MaskRule rule = MaskRule::TopK;
  double mean_l1 = 0.0;
  double std_l1 = 0.0;
  double sparsity = 0.0;
  std::size_t n_trials = 0;
};

struct Case1Result {
  Case1Config config;
  std::vector<Case1Trial> trials;
  std::array<MaskerStats, 3> stats{};
  std::size_t skipped = 0;

  // Fraction of completed trials where l1[better] < l1[worse].
  double win_rate(MaskRule better, MaskRule worse) const;
  // |mean(a) - mean(b)| / mean(b).
  double mean_gap(MaskRule a, MaskRule b) const;
};

// Per trial: generate rows and a random V, keep max(1, ceil((1 - target) *
// n_cols)) entries per row with Top-k, apply Top-p and the hybrid matched as
// `matching` says, and record each relative L1 error. Under PerTrialBudget,
// trials whose budget cannot be hit exactly are skipped.
Case1Result case1_experiment(const Case1Config& cfg);

// Smallest p_frac whose Top-p keep count, summed over `draws` matrices from
// each distribution, reaches Top-k's total. Draws use RNG streams disjoint
// from the trials of case1_experiment.
double calibrate_shared_p(const std::vector<RowDistribution>& dists, std::size_t n_rows, std::size_t n_cols,
                          double target_sparsity, std::size_t draws);

// Fraction of entries dropped when each row keeps its largest entries until
// their sum reaches `retained_mass`.
double mass_sparsity(const Tensor& p, double retained_mass);

struct Case2Result {
  double sparsity_before = 0.0;
  double sparsity_after = 0.0;
  double matched_sparsity = 0.0;
  double l1_before = 0.0;
  double l1_after = 0.0;
};

// Sparsity of each matrix at the retained-mass target, then the relative L1
// error of both at the lower of the two sparsities (same total keep count,
// largest entries first).
Case2Result case2_experiment(const Tensor& p_before, const Tensor& p_after,
                             double retained_mass_target, const Tensor& v);

}  // namespace sparseattn
