#include "sparseattn/flowmatch.h"

#include <cmath>
#include <numbers>
#include <sstream>
#include <string>

#include "sparseattn/attention.h"
#include "sparseattn/numerics.h"
#include "sparseattn/parallel.h"

namespace sparseattn {
namespace {

void require_nonempty(const FlowBatch& batch, const char* what) {
  if (batch.empty()) throw ParameterError(std::string(what) + ": empty batch");
}

void require_dense_teacher(const DenoiserModel& teacher) {
  if (teacher.mode.sparse) throw ConfigError("teacher must use dense attention");
}

std::vector<Tensor> teacher_targets(const DenoiserModel& teacher, const FlowBatch& batch) {
  std::vector<Tensor> out(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    out[i] = forward_denoiser(teacher, batch[i].x_t, batch[i].t, batch[i].cond);
  });
  return out;
}

std::vector<Tensor> velocity_targets(const FlowBatch& batch) {
  std::vector<Tensor> out;
  out.reserve(batch.size());
  for (const auto& s : batch) out.push_back(s.v_t);
  return out;
}

double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

bool params_finite(const DenoiserParams& p) {
  bool ok = true;
  p.for_each([&](const std::string&, const Tensor& t) { ok = ok && t.all_finite(); });
  return ok;
}

using LossFn = std::function<BatchEval(const DenoiserModel&, const FlowBatch&)>;

TrainResult run_training(DenoiserModel model, const FlowDataset& data, const TrainConfig& cfg, const LossFn& loss_fn) {
  cfg.validate();
  data.validate(model.arch);
  Rng rng(cfg.seed);
  AdamState adam = make_adam_state(model.params);
  std::vector<TrainStats> history;
  history.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const FlowBatch batch = sample_batch(data, cfg.batch_size, rng, cfg.schedule);
    BatchEval ev;
    try {
      ev = loss_fn(model, batch);
    } catch (const NumericError& e) {
      throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": " + e.what(), step, model,
                             history);
    }
    TrainStats st;
    st.step = step;
    st.loss = ev.loss;
    st.layer_sparsity = ev.layer_sparsity;
    st.mean_sparsity = ev.mean_sparsity;
    st.mean_tau = ev.mean_tau;
    st.grad_norm = grad_norm(ev.grads);
    if (!std::isfinite(st.loss) || !std::isfinite(st.grad_norm)) {
      std::ostringstream msg;
      msg << "training diverged at step " << step << ": loss=" << st.loss << " grad_norm=" << st.grad_norm;
      throw TrainingDiverged(msg.str(), step, model, history);
    }
    DenoiserModel before = model;
    adam_step(model.params, ev.grads, adam, cfg.adam);
    if (!params_finite(model.params)) {
      throw TrainingDiverged("parameters became non-finite at step " + std::to_string(step), step,
                             std::move(before), history);
    }
    history.push_back(std::move(st));
    if (cfg.checkpoint_every > 0 && cfg.on_checkpoint && (step + 1) % cfg.checkpoint_every == 0) {
      cfg.on_checkpoint(step + 1, model);
    }
  }
  return {std::move(model), std::move(history)};
}

}  // namespace

double TimeSchedule::draw(Rng& rng) const {
  if (kind == Kind::Fixed) {
    if (!(t >= 0.0 && t <= 1.0)) throw ParameterError("fixed t must lie in [0, 1]");
    return t;
  }
  return rng.uniform();
}

FlowSample make_sample_at(const Tensor& x1, const Tensor& x0, double t, int cond) {
  require_matrix(x1, "make_sample: x1");
  require_finite(x1, "make_sample: x1");
  if (!x0.same_shape(x1)) throw ShapeError("make_sample: x0 and x1 differ in shape");
  if (!(t >= 0.0 && t <= 1.0)) throw ParameterError("make_sample: t must lie in [0, 1]");
  FlowSample s;
  s.x0 = x0;
  s.x1 = x1;
  s.t = t;
  s.cond = cond;
  s.x_t = Tensor(x1.dims());
  s.v_t = Tensor(x1.dims());
  for (std::size_t i = 0; i < x1.size(); ++i) {
    s.x_t.data()[i] = t * x1.data()[i] + (1.0 - t) * x0.data()[i];
    s.v_t.data()[i] = x1.data()[i] - x0.data()[i];
  }
  return s;
}

FlowSample make_sample(const Tensor& x1, Rng& rng, const TimeSchedule& schedule, int cond) {
  require_matrix(x1, "make_sample: x1");
  require_finite(x1, "make_sample: x1");
  const Tensor x0 = rng.normal_tensor(x1.rows(), x1.cols());
  const double t = schedule.draw(rng);
  return make_sample_at(x1, x0, t, cond);
}

BatchEval velocity_regression(const DenoiserModel& model, const FlowBatch& batch, const std::vector<Tensor>& targets,
                              bool want_grads) {
  require_nonempty(batch, "velocity_regression");
  if (targets.size() != batch.size()) throw ShapeError("velocity_regression: one target per sample required");
  const std::size_t B = batch.size();
  struct Slot {
    double sq = 0.0;
    DenoiserParams grads;
    ForwardStats stats;
  };
  std::vector<Slot> slots(B);
  const double denom = static_cast<double>(B * model.arch.tokens * model.arch.channels);
  parallel_for(B, [&](std::size_t i) {
    const FlowSample& s = batch[i];
    ForwardCache cache;
    const Tensor u = forward_denoiser(model, s.x_t, s.t, s.cond, want_grads ? &cache : nullptr, &slots[i].stats);
    if (!u.same_shape(targets[i])) throw ShapeError("velocity_regression: target shape mismatch");
    Tensor diff = subtract(u, targets[i]);
    double sq = 0.0;
    for (double d : diff.data()) sq += d * d;
    slots[i].sq = sq;
    if (want_grads) {
      for (double& d : diff.data()) d *= 2.0 / denom;
      slots[i].grads = model.params.zeros_like();
      backward_denoiser(model, cache, diff, slots[i].grads);
    }
  });

  BatchEval ev;
  double total = 0.0;
  for (const auto& sl : slots) total += sl.sq;
  ev.loss = total / denom;
  if (want_grads) {
    ev.grads = model.params.zeros_like();
    std::vector<Tensor*> dst;
    ev.grads.for_each([&](const std::string&, Tensor& t) { dst.push_back(&t); });
    for (const auto& sl : slots) {
      std::size_t idx = 0;
      sl.grads.for_each([&](const std::string&, const Tensor& t) { add_inplace(*dst[idx++], t); });
    }
  }
  const std::size_t L = model.arch.n_layers;
  ev.layer_sparsity.assign(L, 0.0);
  double tau_sum = 0.0;
  for (const auto& sl : slots) {
    for (std::size_t l = 0; l < L; ++l) {
      ev.layer_sparsity[l] += sl.stats.layer_sparsity[l] / static_cast<double>(B);
      tau_sum += sl.stats.layer_tau[l];
    }
  }
  ev.mean_sparsity = mean(ev.layer_sparsity);
  ev.mean_tau = tau_sum / static_cast<double>(B * L);
  return ev;
}

double diffusion_loss(const DenoiserModel& model, const FlowBatch& batch) {
  require_nonempty(batch, "diffusion_loss");
  return velocity_regression(model, batch, velocity_targets(batch), false).loss;
}

double vd_loss(const DenoiserModel& student, const DenoiserModel& teacher, const FlowBatch& batch) {
  require_dense_teacher(teacher);
  require_nonempty(batch, "vd_loss");
  return velocity_regression(student, batch, teacher_targets(teacher, batch), false).loss;
}

BatchEval diffusion_loss_and_grad(const DenoiserModel& model, const FlowBatch& batch) {
  require_nonempty(batch, "diffusion_loss");
  return velocity_regression(model, batch, velocity_targets(batch), true);
}

BatchEval vd_loss_and_grad(const DenoiserModel& student, const DenoiserModel& teacher, const FlowBatch& batch) {
  require_dense_teacher(teacher);
  require_nonempty(batch, "vd_loss");
  return velocity_regression(student, batch, teacher_targets(teacher, batch), true);
}

AdamState make_adam_state(const DenoiserParams& params) {
  return {params.zeros_like(), params.zeros_like(), 0};
}

void adam_step(DenoiserParams& params, const DenoiserParams& grads, AdamState& state, const AdamConfig& cfg) {
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  std::vector<const Tensor*> g;
  std::vector<Tensor*> m, v;
  grads.for_each([&](const std::string&, const Tensor& t) { g.push_back(&t); });
  state.m.for_each([&](const std::string&, Tensor& t) { m.push_back(&t); });
  state.v.for_each([&](const std::string&, Tensor& t) { v.push_back(&t); });
  std::size_t idx = 0;
  params.for_each([&](const std::string& name, Tensor& p) {
    if (idx >= g.size() || !g[idx]->same_shape(p)) throw ShapeError("adam_step: gradient layout differs at " + name);
    auto pd = p.data();
    auto gd = g[idx]->data();
    auto md = m[idx]->data();
    auto vd = v[idx]->data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
      vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
      pd[i] -= cfg.lr * (md[i] / bc1) / (std::sqrt(vd[i] / bc2) + cfg.eps);
    }
    ++idx;
  });
}

double grad_norm(const DenoiserParams& grads) {
  double s = 0.0;
  grads.for_each([&](const std::string&, const Tensor& t) {
    for (double x : t.data()) s += x * x;
  });
  return std::sqrt(s);
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(adam.lr >= 0.0) || !std::isfinite(adam.lr)) throw ConfigError("learning rate must be finite and >= 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw ConfigError("Adam eps must be positive");
}

void FlowDataset::validate(const DenoiserConfig& arch) const {
  if (latents.empty()) throw ParameterError("dataset is empty");
  if (!labels.empty() && labels.size() != latents.size()) {
    throw ShapeError("dataset: labels must be empty or one per latent");
  }
  for (const auto& x : latents) {
    if (x.rank() != 2 || x.rows() != arch.tokens || x.cols() != arch.channels) {
      throw ShapeError("dataset: latent shape does not match the model");
    }
  }
  for (int c : labels) {
    if (c >= 0 && static_cast<std::size_t>(c) >= arch.n_classes) throw ShapeError("dataset: label out of range");
  }
}

FlowDataset make_smooth_fields(std::size_t count, std::size_t tokens, std::size_t channels, std::size_t n_classes,
                               const FieldSpec& spec, Rng& rng) {
  if (count == 0 || tokens == 0 || channels == 0) throw ParameterError("make_smooth_fields: empty extent");
  if (!(spec.length_scale > 0.0) || spec.n_waves == 0) {
    throw ParameterError("make_smooth_fields: length_scale and n_waves must be positive");
  }
  FlowDataset data;
  data.latents.reserve(count);
  const double amp = spec.amplitude / std::sqrt(static_cast<double>(spec.n_waves));
  for (std::size_t s = 0; s < count; ++s) {
    const int label = n_classes > 0 ? static_cast<int>(rng.uniform_index(n_classes)) : -1;
    Tensor x = Tensor::zeros(tokens, channels);
    for (std::size_t c = 0; c < channels; ++c) {
      double base = spec.offset;
      if (label >= 0) base += spec.class_shift * std::cos(static_cast<double>(label) * 2.0 + static_cast<double>(c));
      for (std::size_t n = 0; n < tokens; ++n) x(n, c) = base;
      for (std::size_t w = 0; w < spec.n_waves; ++w) {
        const double wavelength = spec.length_scale * rng.uniform(0.5, 1.5);
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double a = amp * rng.normal();
        for (std::size_t n = 0; n < tokens; ++n) {
          x(n, c) += a * std::sin(2.0 * std::numbers::pi * static_cast<double>(n) / wavelength + phase);
        }
      }
    }
    data.latents.push_back(std::move(x));
    if (label >= 0) data.labels.push_back(label);
  }
  return data;
}

FlowBatch sample_batch(const FlowDataset& data, std::size_t size, Rng& rng, const TimeSchedule& schedule) {
  if (data.latents.empty()) throw ParameterError("sample_batch: dataset is empty");
  FlowBatch batch;
  batch.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t idx = rng.uniform_index(data.size());
    const int cond = data.labels.empty() ? -1 : data.labels[idx];
    batch.push_back(make_sample(data.latents[idx], rng, schedule, cond));
  }
  return batch;
}

TrainResult train_diffusion(const DenoiserModel& init, const FlowDataset& data, const TrainConfig& cfg) {
  return run_training(init, data, cfg, [](const DenoiserModel& m, const FlowBatch& b) {
    return diffusion_loss_and_grad(m, b);
  });
}

TrainResult train_vd(const DenoiserModel& teacher, const AttentionMode& student_mode, const FlowDataset& data,
                     const TrainConfig& cfg) {
  require_dense_teacher(teacher);
  if (student_mode.sparse) student_mode.cfg.validate();
  DenoiserModel student = teacher;
  student.mode = student_mode;
  return run_training(std::move(student), data, cfg, [&teacher](const DenoiserModel& m, const FlowBatch& b) {
    return vd_loss_and_grad(m, teacher, b);
  });
}

TrainResult train_vd(const DenoiserModel& teacher, const SparsityConfig& cfg, const FlowDataset& data,
                     const TrainConfig& train_cfg) {
  return train_vd(teacher, AttentionMode::sparse_with(cfg), data, train_cfg);
}

double mean_tau_at_fixed_k(const DenoiserModel& model, const FlowBatch& batch, double k_frac) {
  require_nonempty(batch, "mean_tau_at_fixed_k");
  if (!(k_frac > 0.0 && k_frac <= 1.0)) throw ParameterError("mean_tau_at_fixed_k: k_frac must lie in (0, 1]");
  std::vector<double> per_sample(batch.size(), 0.0);
  parallel_for(batch.size(), [&](std::size_t i) {
    ForwardStats st;
    st.fixed_k_frac = k_frac;
    forward_denoiser(model, batch[i].x_t, batch[i].t, batch[i].cond, nullptr, &st);
    per_sample[i] = mean(st.layer_tau_fixed);
  });
  return mean(per_sample);
}

}  // namespace sparseattn
