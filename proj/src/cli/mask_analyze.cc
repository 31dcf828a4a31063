#include <algorithm>
#include <sstream>

#include "cli/common.h"
#include "sparseattn/analysis.h"
#include "sparseattn/errors.h"
#include "sparseattn/masker.h"
#include "sparseattn/rng.h"
#include "sparseattn/tensor_io.h"

namespace sparseattn::cli {
namespace {

class MaskAnalyze : public Command {
 public:
  std::string name() const override { return "mask-analyze"; }
  std::string description() const override {
    return "Build Top-k, Top-p and hybrid block masks from a pooled map and report their statistics";
  }

 protected:
  void declare(CLI::App& app, ParamRegistry& p) override {
    p.add(app, "pooled", pooled_path_, "Row-stochastic pooled map (SPT2 or CSV); used as-is with 1x1 blocks");
    p.add(app, "q", q_path_, "Query matrix N x d (SPT2 or CSV)");
    p.add(app, "k", k_path_, "Key matrix N x d (SPT2 or CSV)");
    p.add(app, "generator", generator_, "Synthetic input when no files are given")
        ->check(CLI::IsMember({"pooled-uniform", "pooled-skewed", "qk-random"}));
    p.add(app, "rows", rows_, "Pooled-map rows for the pooled generators");
    p.add(app, "cols", cols_, "Pooled-map columns for the pooled generators");
    p.add(app, "tokens", tokens_, "Sequence length for qk-random");
    p.add(app, "head-dim", head_dim_, "Head dimension for qk-random");
    p.add(app, "k-frac", cfg_.k_frac, "Top-k fraction of key blocks per row");
    p.add(app, "p-frac", cfg_.p_frac, "Top-p cumulative-mass target");
    p.add(app, "b-q", cfg_.b_q, "Query block size");
    p.add(app, "b-kv", cfg_.b_kv, "Key block size");
  }

  void validate() const override {
    cfg_.validate();
    if (q_path_.empty() != k_path_.empty()) throw ConfigError("--q and --k must be given together");
    if (!pooled_path_.empty() && !q_path_.empty()) throw ConfigError("--pooled excludes --q/--k");
    if (generator_ != "pooled-uniform" && generator_ != "pooled-skewed" && generator_ != "qk-random") {
      throw ConfigError("unknown generator '" + generator_ + "'");
    }
    if (rows_ == 0 || cols_ == 0 || tokens_ == 0 || head_dim_ == 0) throw ConfigError("extents must be positive");
  }

  int execute(RunContext& ctx) override {
    const PooledMap pm = build_map(ctx);
    const BlockMask masks[3] = {top_k_mask(pm, cfg_.k_frac), top_p_mask(pm, cfg_.p_frac), hybrid_mask(pm, cfg_)};
    const char* stems[3] = {"mask_top_k", "mask_top_p", "mask_hybrid"};

    Table summary{{"masker", "kept_blocks", "total_blocks", "sparsity", "mean_retained_mass", "min_row_keep",
                   "max_row_keep"},
                  {}};
    std::vector<std::vector<double>> tau(3);
    for (std::size_t r = 0; r < 3; ++r) {
      const BlockMask& bm = masks[r];
      tau[r] = retained_mass(pm, bm);
      double tau_mean = 0.0;
      for (double t : tau[r]) tau_mean += t;
      tau_mean /= static_cast<double>(tau[r].size());
      std::size_t lo = bm.cols(), hi = 0;
      for (std::size_t i = 0; i < bm.rows(); ++i) {
        lo = std::min(lo, bm.row_kept(i));
        hi = std::max(hi, bm.row_kept(i));
      }
      summary.add_row({to_string(kAllRules[r]), bm.kept(), bm.total(), bm.sparsity(), tau_mean, lo, hi});
      std::ostringstream os;
      write_mask_csv(os, bm);
      ctx.write_text(std::string(stems[r]) + ".csv", os.str());
    }

    Table rows{{"row", "top_k", "top_p", "hybrid", "tau_top_k", "tau_top_p", "tau_hybrid"}, {}};
    for (std::size_t i = 0; i < pm.probs.rows(); ++i) {
      const std::size_t nk = masks[0].row_kept(i), np = masks[1].row_kept(i), nh = masks[2].row_kept(i);
      if (nh < std::max(nk, np)) throw InvariantViolation("hybrid row keeps fewer blocks than a single rule");
      rows.add_row({i, nk, np, nh, tau[0][i], tau[1][i], tau[2][i]});
    }
    ctx.write_table("summary", summary);
    ctx.write_table("keep_counts", rows);
    save_csv(ctx.path("pooled_map.csv"), pm.probs);

    ctx.log << "mask-analyze: " << pm.probs.rows() << "x" << pm.probs.cols() << " pooled map\n";
    for (const auto& row : summary.rows) {
      ctx.log << "  " << row[0].get<std::string>() << ": sparsity " << format_double(row[3].get<double>())
              << ", mean retained mass " << format_double(row[4].get<double>()) << '\n';
    }
    return kExitOk;
  }

 private:
  PooledMap build_map(const RunContext& ctx) const {
    if (!pooled_path_.empty()) return PooledMap::from_probs(load_tensor(pooled_path_));
    if (!q_path_.empty()) return pooled_map(load_tensor(q_path_), load_tensor(k_path_), cfg_);
    Rng rng(ctx.seed);
    if (generator_ == "qk-random") {
      const Tensor q = rng.normal_tensor(tokens_, head_dim_);
      const Tensor k = rng.normal_tensor(tokens_, head_dim_);
      return pooled_map(q, k, cfg_);
    }
    const RowDistribution dist =
        generator_ == "pooled-skewed" ? RowDistribution::skewed(ctx.seed) : RowDistribution::uniform(ctx.seed);
    return PooledMap::from_probs(generate_rows(dist, rows_, cols_, rng));
  }

  std::string pooled_path_, q_path_, k_path_;
  std::string generator_ = "pooled-uniform";
  std::size_t rows_ = 32, cols_ = 32;
  std::size_t tokens_ = 1024, head_dim_ = 64;
  SparsityConfig cfg_;
};

}  // namespace

std::unique_ptr<Command> make_mask_analyze() { return std::make_unique<MaskAnalyze>(); }

}  // namespace sparseattn::cli
