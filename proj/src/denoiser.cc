#include "sparseattn/denoiser.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <string>

#include "sparseattn/errors.h"
#include "sparseattn/numerics.h"

namespace sparseattn {
namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

void add_row_broadcast(Tensor& x, const Tensor& row) {
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += row.data()[j];
  }
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* b) {
  Tensor y = matmul(x, w);
  if (b) add_row_broadcast(y, *b);
  return y;
}

// dW += x^T dy, db += column sums of dy, returns dy W^T.
Tensor linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dw, Tensor* db) {
  add_inplace(dw, matmul_tn(x, dy));
  if (db) {
    for (std::size_t i = 0; i < dy.rows(); ++i) {
      auto r = dy.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) db->data()[j] += r[j];
    }
  }
  return matmul_nt(dy, w);
}

Tensor layer_norm(const Tensor& x, const Tensor& g, const Tensor& b, Tensor& xhat, std::vector<double>& rstd) {
  const std::size_t n = x.rows(), d = x.cols();
  xhat = Tensor::zeros(n, d);
  rstd.assign(n, 0.0);
  Tensor y = Tensor::zeros(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto xr = x.row(i);
    const double mean = sum(xr) / static_cast<double>(d);
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + kLnEps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (xr[j] - mean) * rstd[i];
      y(i, j) = xhat(i, j) * g.data()[j] + b.data()[j];
    }
  }
  return y;
}

Tensor layer_norm_backward(const Tensor& xhat, const std::vector<double>& rstd, const Tensor& g,
                           const Tensor& dy, Tensor& dg, Tensor& db) {
  const std::size_t n = xhat.rows(), d = xhat.cols();
  Tensor dx = Tensor::zeros(n, d);
  std::vector<double> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dg.data()[j] += dy(i, j) * xhat(i, j);
      db.data()[j] += dy(i, j);
      dxhat[j] = dy(i, j) * g.data()[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat(i, j);
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      dx(i, j) = rstd[i] * (dxhat[j] - mean_dxhat - xhat(i, j) * mean_dxhat_xhat);
    }
  }
  return dx;
}

double gelu(double z) { return 0.5 * z * (1.0 + std::tanh(kGeluC * (z + kGeluA * z * z * z))); }

double gelu_grad(double z) {
  const double th = std::tanh(kGeluC * (z + kGeluA * z * z * z));
  return 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * z * z);
}

Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t width) {
  Tensor out = Tensor::zeros(x.rows(), width);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::copy_n(x.row(i).begin() + static_cast<std::ptrdiff_t>(c0), width, out.row(i).begin());
  }
  return out;
}

void write_cols(Tensor& dst, const Tensor& src, std::size_t c0) {
  for (std::size_t i = 0; i < src.rows(); ++i) {
    std::copy(src.row(i).begin(), src.row(i).end(), dst.row(i).begin() + static_cast<std::ptrdiff_t>(c0));
  }
}

Tensor normal_init(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  return rng.normal_tensor(rows, cols, stddev);
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

}  // namespace

void DenoiserConfig::validate() const {
  if (tokens == 0 || channels == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || mlp_hidden == 0) {
    throw ConfigError("denoiser: every extent must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("denoiser: d_model must be divisible by n_heads");
  if (time_features == 0 || time_features % 2 != 0) {
    throw ConfigError("denoiser: time_features must be a positive even number");
  }
}

std::size_t DenoiserParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

DenoiserParams DenoiserParams::zeros_like() const {
  DenoiserParams z = *this;
  z.for_each([](const std::string&, Tensor& t) { std::fill(t.data().begin(), t.data().end(), 0.0); });
  return z;
}

DenoiserParams init_params(const DenoiserConfig& arch, Rng& rng) {
  arch.validate();
  const std::size_t D = arch.d_model;
  const auto inv_sqrt = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
  DenoiserParams p;
  p.w_in = normal_init(rng, arch.channels, D, inv_sqrt(arch.channels));
  p.b_in = Tensor::zeros(1, D);
  p.pos = normal_init(rng, arch.tokens, D, 1.0);
  p.w_time = normal_init(rng, arch.time_features, D, inv_sqrt(arch.time_features));
  p.b_time = Tensor::zeros(1, D);
  if (arch.n_classes > 0) p.cls = normal_init(rng, arch.n_classes, D, 0.5);
  for (std::size_t l = 0; l < arch.n_layers; ++l) {
    LayerParams L;
    L.ln1_g = Tensor::filled(1, D, 1.0);
    L.ln1_b = Tensor::zeros(1, D);
    L.wq = normal_init(rng, D, D, inv_sqrt(D));
    L.wk = normal_init(rng, D, D, inv_sqrt(D));
    L.wv = normal_init(rng, D, D, inv_sqrt(D));
    L.wo = normal_init(rng, D, D, inv_sqrt(D));
    L.ln2_g = Tensor::filled(1, D, 1.0);
    L.ln2_b = Tensor::zeros(1, D);
    L.w1 = normal_init(rng, D, arch.mlp_hidden, inv_sqrt(D));
    L.b1 = Tensor::zeros(1, arch.mlp_hidden);
    L.w2 = normal_init(rng, arch.mlp_hidden, D, inv_sqrt(arch.mlp_hidden));
    L.b2 = Tensor::zeros(1, D);
    p.layers.push_back(std::move(L));
  }
  p.lnf_g = Tensor::filled(1, D, 1.0);
  p.lnf_b = Tensor::zeros(1, D);
  p.w_out = normal_init(rng, D, arch.channels, inv_sqrt(D));
  p.b_out = Tensor::zeros(1, arch.channels);
  return p;
}

std::uint64_t params_checksum(const DenoiserParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  params.for_each([&](const std::string&, const Tensor& t) {
    for (double x : t.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &x, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
      }
    }
  });
  return h;
}

double params_max_abs_diff(const DenoiserParams& a, const DenoiserParams& b) {
  std::vector<const Tensor*> rhs;
  b.for_each([&](const std::string&, const Tensor& t) { rhs.push_back(&t); });
  double worst = 0.0;
  std::size_t idx = 0;
  a.for_each([&](const std::string&, const Tensor& t) {
    if (idx >= rhs.size()) throw ShapeError("params_max_abs_diff: parameter sets differ");
    worst = std::max(worst, max_abs_diff(t, *rhs[idx++]));
  });
  if (idx != rhs.size()) throw ShapeError("params_max_abs_diff: parameter sets differ");
  return worst;
}

DenoiserModel make_model(const DenoiserConfig& arch, Rng& rng, AttentionMode mode) {
  return DenoiserModel{arch, init_params(arch, rng), mode};
}

Tensor time_features(double t, std::size_t n_features) {
  const std::size_t half = n_features / 2;
  Tensor f = Tensor::zeros(1, n_features);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = 100.0 * std::pow(1000.0, -static_cast<double>(i) / static_cast<double>(half));
    f(0, i) = std::sin(freq * t);
    f(0, half + i) = std::cos(freq * t);
  }
  return f;
}

Tensor forward_denoiser(const DenoiserModel& model, const Tensor& x_t, double t, int cond,
                        ForwardCache* cache, ForwardStats* stats) {
  const DenoiserConfig& arch = model.arch;
  const DenoiserParams& P = model.params;
  require_matrix(x_t, "forward_denoiser");
  if (x_t.rows() != arch.tokens || x_t.cols() != arch.channels) {
    throw ShapeError("forward_denoiser: x_t must be " + std::to_string(arch.tokens) + "x" +
                     std::to_string(arch.channels));
  }
  if (cond >= 0 && static_cast<std::size_t>(cond) >= arch.n_classes) {
    throw ShapeError("forward_denoiser: condition id " + std::to_string(cond) + " out of range");
  }
  if (model.mode.sparse) model.mode.cfg.validate();

  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.x_t = x_t;
  c.cond = cond;
  c.tfeat = time_features(t, arch.time_features);
  c.layers.assign(arch.n_layers, LayerCache{});
  if (stats) {
    stats->layer_sparsity.assign(arch.n_layers, 0.0);
    stats->layer_tau.assign(arch.n_layers, 1.0);
    stats->layer_tau_fixed.assign(arch.n_layers, 1.0);
  }

  Tensor h = linear(x_t, P.w_in, &P.b_in);
  add_inplace(h, P.pos);
  add_row_broadcast(h, linear(c.tfeat, P.w_time, &P.b_time));
  if (cond >= 0 && !P.cls.empty()) {
    const auto row = P.cls.row(static_cast<std::size_t>(cond));
    add_row_broadcast(h, Tensor({1, arch.d_model}, std::vector<double>(row.begin(), row.end())));
  }

  const std::size_t dh = arch.head_dim();
  for (std::size_t l = 0; l < arch.n_layers; ++l) {
    const LayerParams& L = P.layers[l];
    LayerCache& lc = c.layers[l];
    lc.h_in = h;
    lc.a = layer_norm(h, L.ln1_g, L.ln1_b, lc.ln1_xhat, lc.ln1_rstd);
    lc.q = matmul(lc.a, L.wq);
    lc.k = matmul(lc.a, L.wk);
    lc.v = matmul(lc.a, L.wv);
    lc.attn_concat = Tensor::zeros(arch.tokens, arch.d_model);
    lc.heads.clear();
    std::vector<double> head_sparsity, head_tau, head_tau_fixed;
    for (std::size_t hd = 0; hd < arch.n_heads; ++hd) {
      const Tensor qh = slice_cols(lc.q, hd * dh, dh);
      const Tensor kh = slice_cols(lc.k, hd * dh, dh);
      const Tensor vh = slice_cols(lc.v, hd * dh, dh);
      AttentionOutput out = model.mode.sparse ? sparse_attention(qh, kh, vh, model.mode.cfg)
                                              : dense_attention(qh, kh, vh);
      write_cols(lc.attn_concat, out.out, hd * dh);
      if (stats) {
        head_sparsity.push_back(model.mode.sparse ? out.mask_used.sparsity() : 0.0);
        head_tau.push_back(model.mode.sparse ? mean_of(token_retained_mass(qh, kh, out)) : 1.0);
        if (stats->fixed_k_frac) {
          const PooledMap pm = pooled_map(qh, kh, model.mode.cfg);
          const AttentionOutput fixed = sparse_attention_with_mask(qh, kh, vh, top_k_mask(pm, *stats->fixed_k_frac));
          head_tau_fixed.push_back(mean_of(token_retained_mass(qh, kh, fixed)));
        }
      }
      lc.heads.push_back(std::move(out));
    }
    if (stats) {
      stats->layer_sparsity[l] = mean_of(head_sparsity);
      stats->layer_tau[l] = mean_of(head_tau);
      if (stats->fixed_k_frac) stats->layer_tau_fixed[l] = mean_of(head_tau_fixed);
    }
    add_inplace(h, matmul(lc.attn_concat, L.wo));
    lc.h_mid = h;
    lc.b = layer_norm(h, L.ln2_g, L.ln2_b, lc.ln2_xhat, lc.ln2_rstd);
    lc.z = linear(lc.b, L.w1, &L.b1);
    lc.g = lc.z;
    for (double& x : lc.g.data()) x = gelu(x);
    add_inplace(h, linear(lc.g, L.w2, &L.b2));
  }
  c.h_final = h;
  c.f = layer_norm(h, P.lnf_g, P.lnf_b, c.lnf_xhat, c.lnf_rstd);
  Tensor out = linear(c.f, P.w_out, &P.b_out);
  require_finite(out, "forward_denoiser");
  return out;
}

void backward_denoiser(const DenoiserModel& model, const ForwardCache& c, const Tensor& d_out,
                       DenoiserParams& G) {
  const DenoiserConfig& arch = model.arch;
  const DenoiserParams& P = model.params;
  if (d_out.rows() != arch.tokens || d_out.cols() != arch.channels) {
    throw ShapeError("backward_denoiser: d_out shape mismatch");
  }
  if (c.layers.size() != arch.n_layers) throw PreconditionError("backward_denoiser: cache from another model");

  Tensor df = linear_backward(c.f, P.w_out, d_out, G.w_out, &G.b_out);
  Tensor dh = layer_norm_backward(c.lnf_xhat, c.lnf_rstd, P.lnf_g, df, G.lnf_g, G.lnf_b);

  const std::size_t dh_size = arch.head_dim();
  for (std::size_t l = arch.n_layers; l-- > 0;) {
    const LayerParams& L = P.layers[l];
    LayerParams& GL = G.layers[l];
    const LayerCache& lc = c.layers[l];

    // MLP residual branch.
    Tensor dg = linear_backward(lc.g, L.w2, dh, GL.w2, &GL.b2);
    for (std::size_t i = 0; i < dg.size(); ++i) dg.data()[i] *= gelu_grad(lc.z.data()[i]);
    Tensor db = linear_backward(lc.b, L.w1, dg, GL.w1, &GL.b1);
    add_inplace(dh, layer_norm_backward(lc.ln2_xhat, lc.ln2_rstd, L.ln2_g, db, GL.ln2_g, GL.ln2_b));

    // Attention residual branch.
    Tensor dconcat = linear_backward(lc.attn_concat, L.wo, dh, GL.wo, nullptr);
    Tensor dq = Tensor::zeros(arch.tokens, arch.d_model);
    Tensor dk = Tensor::zeros(arch.tokens, arch.d_model);
    Tensor dv = Tensor::zeros(arch.tokens, arch.d_model);
    for (std::size_t hd = 0; hd < arch.n_heads; ++hd) {
      const std::size_t c0 = hd * dh_size;
      const AttentionGrads hg =
          attention_backward(slice_cols(lc.q, c0, dh_size), slice_cols(lc.k, c0, dh_size),
                             slice_cols(lc.v, c0, dh_size), lc.heads[hd], slice_cols(dconcat, c0, dh_size));
      write_cols(dq, hg.dq, c0);
      write_cols(dk, hg.dk, c0);
      write_cols(dv, hg.dv, c0);
    }
    Tensor da = linear_backward(lc.a, L.wq, dq, GL.wq, nullptr);
    add_inplace(da, linear_backward(lc.a, L.wk, dk, GL.wk, nullptr));
    add_inplace(da, linear_backward(lc.a, L.wv, dv, GL.wv, nullptr));
    add_inplace(dh, layer_norm_backward(lc.ln1_xhat, lc.ln1_rstd, L.ln1_g, da, GL.ln1_g, GL.ln1_b));
  }

  // Embeddings.
  add_inplace(G.pos, dh);
  Tensor dh_colsum = Tensor::zeros(1, arch.d_model);
  for (std::size_t i = 0; i < dh.rows(); ++i) {
    for (std::size_t j = 0; j < arch.d_model; ++j) dh_colsum(0, j) += dh(i, j);
  }
  linear_backward(c.tfeat, P.w_time, dh_colsum, G.w_time, &G.b_time);
  if (c.cond >= 0 && !G.cls.empty()) {
    auto row = G.cls.row(static_cast<std::size_t>(c.cond));
    for (std::size_t j = 0; j < arch.d_model; ++j) row[j] += dh_colsum(0, j);
  }
  linear_backward(c.x_t, P.w_in, dh, G.w_in, &G.b_in);
}

}  // namespace sparseattn
