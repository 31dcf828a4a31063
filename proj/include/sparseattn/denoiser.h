#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sparseattn/attention.h"
#include "sparseattn/masker.h"
#include "sparseattn/rng.h"
#include "sparseattn/tensor.h"

namespace sparseattn {

// Toy velocity-prediction transformer standing in for a video diffusion
// backbone: input projection + learned positions + sinusoidal time embedding
// (+ optional class embedding), pre-LN blocks of {multi-head attention,
// GELU MLP}, final LayerNorm and output projection.
struct DenoiserConfig {
  std::size_t tokens = 64;
  std::size_t channels = 8;
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t mlp_hidden = 64;
  std::size_t time_features = 16;
  std::size_t n_classes = 0;  // 0 disables the class embedding

  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;
};

// Which attention operator every layer uses. Switching modes never touches
// the parameters.
struct AttentionMode {
  bool sparse = false;
  SparsityConfig cfg;

  static AttentionMode dense() { return {}; }
  static AttentionMode sparse_with(const SparsityConfig& cfg) { return {true, cfg}; }
};

struct LayerParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, wk, wv, wo;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
};

struct DenoiserParams {
  Tensor w_in, b_in, pos;
  Tensor w_time, b_time;
  Tensor cls;  // n_classes x d_model, empty when unconditioned
  std::vector<LayerParams> layers;
  Tensor lnf_g, lnf_b;
  Tensor w_out, b_out;

  // Visits every tensor with a stable dotted name, in a fixed order.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::size_t parameter_count() const;
  DenoiserParams zeros_like() const;

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    f(std::string("w_in"), self.w_in);
    f(std::string("b_in"), self.b_in);
    f(std::string("pos"), self.pos);
    f(std::string("w_time"), self.w_time);
    f(std::string("b_time"), self.b_time);
    if (!self.cls.empty()) f(std::string("cls"), self.cls);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "ln1_g", L.ln1_g);
      f(p + "ln1_b", L.ln1_b);
      f(p + "wq", L.wq);
      f(p + "wk", L.wk);
      f(p + "wv", L.wv);
      f(p + "wo", L.wo);
      f(p + "ln2_g", L.ln2_g);
      f(p + "ln2_b", L.ln2_b);
      f(p + "w1", L.w1);
      f(p + "b1", L.b1);
      f(p + "w2", L.w2);
      f(p + "b2", L.b2);
    }
    f(std::string("lnf_g"), self.lnf_g);
    f(std::string("lnf_b"), self.lnf_b);
    f(std::string("w_out"), self.w_out);
    f(std::string("b_out"), self.b_out);
  }
};

// Scaled-normal weights, unit LayerNorm gains, zero biases. The shapes are a
// pure function of `arch`.
DenoiserParams init_params(const DenoiserConfig& arch, Rng& rng);

// FNV-1a over the raw bytes of every parameter, in visiting order.
std::uint64_t params_checksum(const DenoiserParams& params);
double params_max_abs_diff(const DenoiserParams& a, const DenoiserParams& b);

struct DenoiserModel {
  DenoiserConfig arch;
  DenoiserParams params;
  AttentionMode mode;
};

DenoiserModel make_model(const DenoiserConfig& arch, Rng& rng, AttentionMode mode = AttentionMode::dense());

// Sinusoidal features of t: [sin(w_i t), cos(w_i t)] with geometric w_i.
Tensor time_features(double t, std::size_t n_features);

// Activations kept for the backward pass.
struct LayerCache {
  Tensor h_in;
  Tensor ln1_xhat;
  std::vector<double> ln1_rstd;
  Tensor a, q, k, v;
  std::vector<AttentionOutput> heads;
  Tensor attn_concat;
  Tensor h_mid;
  Tensor ln2_xhat;
  std::vector<double> ln2_rstd;
  Tensor b, z, g;
};

struct ForwardCache {
  Tensor x_t;
  Tensor tfeat;
  int cond = -1;
  std::vector<LayerCache> layers;
  Tensor h_final;
  Tensor lnf_xhat;
  std::vector<double> lnf_rstd;
  Tensor f;
};

// Attention statistics gathered during a forward pass, averaged over heads.
struct ForwardStats {
  std::vector<double> layer_sparsity;  // mask sparsity (0 in dense mode)
  std::vector<double> layer_tau;       // token-level retained mass under the mask used
  // When set, also measure retained mass under a Top-k-only mask with this
  // k_frac and the mode's block sizes, which pins the sparsity.
  std::optional<double> fixed_k_frac;
  std::vector<double> layer_tau_fixed;
};

// Velocity prediction u(x_t, cond, t). `cond` < 0 means unconditioned.
Tensor forward_denoiser(const DenoiserModel& model, const Tensor& x_t, double t, int cond = -1,
                        ForwardCache* cache = nullptr, ForwardStats* stats = nullptr);

// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(output).
void backward_denoiser(const DenoiserModel& model, const ForwardCache& cache, const Tensor& d_out,
                       DenoiserParams& grads);

}  // namespace sparseattn
