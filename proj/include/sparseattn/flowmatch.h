#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "sparseattn/denoiser.h"
#include "sparseattn/errors.h"
#include "sparseattn/masker.h"
#include "sparseattn/rng.h"
#include "sparseattn/tensor.h"

namespace sparseattn {

// One rectified-flow training point: x_t = t x1 + (1 - t) x0, v_t = x1 - x0.
struct FlowSample {
  Tensor x0;  // noise
  Tensor x1;  // clean latent
  double t = 0.0;
  Tensor x_t;
  Tensor v_t;
  int cond = -1;
};

using FlowBatch = std::vector<FlowSample>;

struct TimeSchedule {
  enum class Kind { Uniform, Fixed };
  Kind kind = Kind::Uniform;
  double t = 0.5;  // used by Fixed

  static TimeSchedule uniform() { return {}; }
  static TimeSchedule fixed(double t) { return {Kind::Fixed, t}; }
  double draw(Rng& rng) const;
};

// Draws x0 ~ N(0, 1) and t from the schedule.
FlowSample make_sample(const Tensor& x1, Rng& rng, const TimeSchedule& schedule = TimeSchedule::uniform(),
                       int cond = -1);
FlowSample make_sample_at(const Tensor& x1, const Tensor& x0, double t, int cond = -1);

// Loss plus optional gradient, with attention statistics averaged over the
// batch. Statistics are those of the model being trained.
struct BatchEval {
  double loss = 0.0;
  DenoiserParams grads;  // empty layers when gradients were not requested
  std::vector<double> layer_sparsity;
  double mean_sparsity = 0.0;
  double mean_tau = 1.0;
};

// Mean over batch, tokens and channels of (u - v_t)^2.
double diffusion_loss(const DenoiserModel& model, const FlowBatch& batch);
// Mean squared difference between student and dense-teacher predictions on
// the same (x_t, t, cond). Never reads v_t. Throws ConfigError if the
// teacher is not dense.
double vd_loss(const DenoiserModel& student, const DenoiserModel& teacher, const FlowBatch& batch);

BatchEval diffusion_loss_and_grad(const DenoiserModel& model, const FlowBatch& batch);
BatchEval vd_loss_and_grad(const DenoiserModel& student, const DenoiserModel& teacher, const FlowBatch& batch);

// Shared core: MSE of the model against per-sample targets.
BatchEval velocity_regression(const DenoiserModel& model, const FlowBatch& batch, const std::vector<Tensor>& targets,
                              bool want_grads);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  DenoiserParams m, v;
  std::size_t t = 0;
};

AdamState make_adam_state(const DenoiserParams& params);
void adam_step(DenoiserParams& params, const DenoiserParams& grads, AdamState& state, const AdamConfig& cfg);

double grad_norm(const DenoiserParams& grads);

struct TrainStats {
  std::size_t step = 0;
  double loss = 0.0;  // before the update of this step
  std::vector<double> layer_sparsity;
  double mean_sparsity = 0.0;
  double mean_tau = 1.0;
  double grad_norm = 0.0;
};

struct TrainConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 16;
  AdamConfig adam;
  std::uint64_t seed = 0;
  TimeSchedule schedule;
  std::size_t checkpoint_every = 0;  // 0 disables the callback
  std::function<void(std::size_t step, const DenoiserModel&)> on_checkpoint;

  void validate() const;
};

struct FlowDataset {
  std::vector<Tensor> latents;  // each tokens x channels
  std::vector<int> labels;      // empty, or one per latent

  std::size_t size() const { return latents.size(); }
  void validate(const DenoiserConfig& arch) const;
};

// Smooth random fields: per channel, a sum of `n_waves` sinusoids along the
// token axis with wavelengths near `length_scale`, plus `offset` and a
// per-class shift of size `class_shift`.
struct FieldSpec {
  double length_scale = 16.0;
  double amplitude = 1.0;
  double offset = 0.0;
  double class_shift = 0.5;
  std::size_t n_waves = 3;
};

FlowDataset make_smooth_fields(std::size_t count, std::size_t tokens, std::size_t channels, std::size_t n_classes,
                               const FieldSpec& spec, Rng& rng);

// Samples `size` latents uniformly with replacement and builds flow samples.
FlowBatch sample_batch(const FlowDataset& data, std::size_t size, Rng& rng, const TimeSchedule& schedule);

struct TrainResult {
  DenoiserModel model;
  std::vector<TrainStats> stats;
};

// Raised when the loss or gradient stops being finite. Carries the last
// parameters that produced a finite step.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, std::size_t step, DenoiserModel last_good, std::vector<TrainStats> history)
      : NumericError(what), step_(step), last_good_(std::move(last_good)), history_(std::move(history)) {}

  std::size_t step() const { return step_; }
  const DenoiserModel& last_good() const { return last_good_; }
  const std::vector<TrainStats>& history() const { return history_; }

 private:
  std::size_t step_;
  DenoiserModel last_good_;
  std::vector<TrainStats> history_;
};

// Fits `init` to v_t on `data`. Used for teacher pre-training and as the
// diffusion-loss fine-tuning baseline.
TrainResult train_diffusion(const DenoiserModel& init, const FlowDataset& data, const TrainConfig& cfg);

// Student starts as an exact copy of the dense teacher with every attention
// layer switched to `student_mode`, then regresses onto the teacher.
TrainResult train_vd(const DenoiserModel& teacher, const AttentionMode& student_mode, const FlowDataset& data,
                     const TrainConfig& cfg);
TrainResult train_vd(const DenoiserModel& teacher, const SparsityConfig& cfg, const FlowDataset& data,
                     const TrainConfig& train_cfg);

// Token retained mass under a Top-k-only mask with `k_frac` and the block
// sizes of the model's SparsityConfig, measured on the model's own
// activations. Averaged over batch, layers, heads and rows.
double mean_tau_at_fixed_k(const DenoiserModel& model, const FlowBatch& batch, double k_frac);

}  // namespace sparseattn
