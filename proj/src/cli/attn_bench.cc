#include <algorithm>
#include <chrono>
#include <cmath>

#include "cli/common.h"
#include "sparseattn/attention.h"
#include "sparseattn/errors.h"
#include "sparseattn/numerics.h"
#include "sparseattn/rng.h"
#include "sparseattn/tensor_io.h"

namespace sparseattn::cli {
namespace {

// Each row keeps max(1, round((1 - s) * T_n)) key blocks chosen uniformly.
BlockMask random_row_mask(std::size_t n, std::size_t b_q, std::size_t b_kv, double target, Rng& rng) {
  const std::size_t rows = ceil_div(n, b_q), cols = ceil_div(n, b_kv);
  const auto keep = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround((1.0 - target) * static_cast<double>(cols))), 1, cols);
  BlockMask bm(rows, cols, b_q, b_kv, n);
  std::vector<std::size_t> idx(cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) idx[j] = j;
    for (std::size_t j = 0; j < keep; ++j) {
      std::swap(idx[j], idx[j + rng.uniform_index(cols - j)]);
      bm.set(i, idx[j], true);
    }
  }
  return bm;
}

template <typename F>
double median_seconds(std::size_t repeats, F&& f) {
  std::vector<double> t;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto start = std::chrono::steady_clock::now();
    f();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

class AttnBench : public Command {
 public:
  std::string name() const override { return "attn-bench"; }
  std::string description() const override {
    return "Time dense vs block-sparse attention and check computed-block accounting";
  }

 protected:
  void declare(CLI::App& app, ParamRegistry& p) override {
    p.add(app, "tokens", tokens_, "Sequence lengths (comma separated)");
    p.add(app, "head-dim", head_dims_, "Head dimensions (comma separated)");
    p.add(app, "sparsity", sparsities_, "Target block sparsities in [0, 1) (comma separated)");
    p.add(app, "b-q", b_q_, "Query block size");
    p.add(app, "b-kv", b_kv_, "Key block size");
    p.add(app, "repeats", repeats_, "Timed calls per configuration (median reported)");
    p.add(app, "max-tokens", max_tokens_, "Refuse sequence lengths above this (memory guard)");
  }

  void validate() const override {
    if (tokens_.empty() || head_dims_.empty() || sparsities_.empty()) throw ConfigError("grids must be nonempty");
    if (b_q_ == 0 || b_kv_ == 0) throw ConfigError("block sizes must be positive");
    if (repeats_ == 0) throw ConfigError("repeats must be positive");
    for (double s : sparsities_) {
      if (!(s >= 0.0 && s < 1.0)) throw ConfigError("sparsity targets must lie in [0, 1)");
    }
    for (std::size_t n : tokens_) {
      if (n == 0) throw ConfigError("token counts must be positive");
      if (n > max_tokens_) {
        throw ConfigError("N=" + std::to_string(n) + " exceeds --max-tokens " + std::to_string(max_tokens_) +
                          "; the dense reference needs N^2 doubles");
      }
    }
    for (std::size_t d : head_dims_) {
      if (d == 0) throw ConfigError("head dimensions must be positive");
    }
  }

  int execute(RunContext& ctx) override {
    Table table{{"n", "d", "b_q", "b_kv", "target_sparsity", "achieved_sparsity", "kept_blocks", "total_blocks",
                 "computed_blocks", "computed_ratio", "max_dev_dense"},
                {}};
    json timing = json::array();
    Rng rng(ctx.seed);
    for (std::size_t n : tokens_) {
      for (std::size_t d : head_dims_) {
        const Tensor q = rng.normal_tensor(n, d);
        const Tensor k = rng.normal_tensor(n, d);
        const Tensor v = rng.normal_tensor(n, d);
        const AttentionOutput dense = dense_attention(q, k, v);
        const double t_dense = median_seconds(repeats_, [&] { (void)dense_attention(q, k, v); });
        for (double s : sparsities_) {
          const BlockMask bm = s == 0.0 ? BlockMask::all_ones(n, b_q_, b_kv_) : random_row_mask(n, b_q_, b_kv_, s, rng);
          BlockCounter counter;
          const AttentionOutput sp = sparse_attention_with_mask(q, k, v, bm, KernelOptions{&counter, {}});
          const std::uint64_t computed = counter.value();
          if (computed != bm.kept()) throw InvariantViolation("computed-block count differs from kept-block count");
          const double dev = max_abs_diff(sp.out, dense.out);
          if (s == 0.0 && dev > 1e-10) throw InvariantViolation("all-ones mask deviates from dense attention");
          const double ratio = static_cast<double>(computed) / static_cast<double>(bm.total());
          table.add_row({n, d, b_q_, b_kv_, s, bm.sparsity(), bm.kept(), bm.total(), computed, ratio, dev});
          const double t_sparse =
              median_seconds(repeats_, [&] { (void)sparse_attention_with_mask(q, k, v, bm); });
          timing.push_back(json{{"n", n},
                                {"d", d},
                                {"target_sparsity", s},
                                {"dense_seconds", t_dense},
                                {"sparse_seconds", t_sparse},
                                {"speedup", t_dense / t_sparse}});
          ctx.log << "N=" << n << " d=" << d << " sparsity=" << format_double(bm.sparsity()) << " blocks "
                  << computed << "/" << bm.total() << " speedup " << t_dense / t_sparse << "x\n";
        }
      }
    }
    ctx.write_table("bench", table);
    ctx.write_json("timing.json", json{{"repeats", repeats_}, {"runs", timing}});
    return kExitOk;
  }

 private:
  std::vector<std::size_t> tokens_ = {1024, 4096};
  std::vector<std::size_t> head_dims_ = {64};
  std::vector<double> sparsities_ = {0.0, 0.5, 0.9, 0.95};
  std::size_t b_q_ = 64;
  std::size_t b_kv_ = 64;
  std::size_t repeats_ = 3;
  std::size_t max_tokens_ = 8192;
};

}  // namespace

std::unique_ptr<Command> make_attn_bench() { return std::make_unique<AttnBench>(); }

}  // namespace sparseattn::cli
