#include <gtest/gtest.h>

#include <cmath>

#include "model_helpers.h"
#include "oracles/oracles.h"
#include "sparseattn/flowmatch.h"
#include "sparseattn/numerics.h"

using namespace sparseattn;
using testing_helpers::flatten;
using testing_helpers::param_slots;

namespace {

DenoiserConfig micro_arch() {
  DenoiserConfig a;
  a.tokens = 8;
  a.channels = 2;
  a.d_model = 8;
  a.n_layers = 1;
  a.n_heads = 2;
  a.mlp_hidden = 8;
  a.time_features = 4;
  return a;
}

DenoiserConfig small_arch() {
  DenoiserConfig a;
  a.tokens = 16;
  a.channels = 4;
  a.d_model = 16;
  a.n_layers = 1;
  a.n_heads = 2;
  a.mlp_hidden = 16;
  a.time_features = 8;
  return a;
}

FlowBatch random_batch(const DenoiserConfig& a, std::size_t n, Rng& rng) {
  FlowBatch b;
  for (std::size_t i = 0; i < n; ++i) b.push_back(make_sample(rng.normal_tensor(a.tokens, a.channels), rng));
  return b;
}

// sum over batch of sum (u - target)^2 / (B N c), from the public forward.
double oracle_mse(const DenoiserModel& m, const FlowBatch& batch, const std::vector<Tensor>& targets) {
  double s = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Tensor u = forward_denoiser(m, batch[i].x_t, batch[i].t, batch[i].cond);
    for (std::size_t j = 0; j < u.size(); ++j) {
      const double d = u.data()[j] - targets[i].data()[j];
      s += d * d;
    }
  }
  return s / static_cast<double>(batch.size() * m.arch.tokens * m.arch.channels);
}

}  // namespace

TEST(FlowSample, Interpolant) {
  const Tensor x1 = Tensor::from_rows({{1.0, 2.0}, {3.0, 4.0}});
  const Tensor x0 = Tensor::from_rows({{0.0, -2.0}, {1.0, 0.0}});
  const FlowSample s = make_sample_at(x1, x0, 0.25);
  EXPECT_EQ(s.x_t, Tensor::from_rows({{0.25, -1.0}, {1.5, 1.0}}));
  EXPECT_EQ(s.v_t, Tensor::from_rows({{1.0, 4.0}, {2.0, 4.0}}));
  EXPECT_EQ(make_sample_at(x1, x0, 0.0).x_t, x0);
  EXPECT_EQ(make_sample_at(x1, x0, 1.0).x_t, x1);
}

TEST(FlowSample, ScheduleDraws) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const double t = TimeSchedule::uniform().draw(rng);
    EXPECT_GE(t, 0.0);
    EXPECT_LT(t, 1.0);
  }
  EXPECT_EQ(TimeSchedule::fixed(0.3).draw(rng), 0.3);
  const FlowSample s = make_sample(Tensor::zeros(4, 2), rng, TimeSchedule::fixed(0.6), 1);
  EXPECT_EQ(s.t, 0.6);
  EXPECT_EQ(s.cond, 1);
  EXPECT_EQ(max_abs_diff(s.x_t, scale(s.x0, 0.4)), 0.0);
}

TEST(Losses, MatchOracleMse) {
  Rng rng(2);
  const DenoiserModel teacher = make_model(small_arch(), rng);
  DenoiserModel student = make_model(small_arch(), rng, AttentionMode::sparse_with(SparsityConfig{0.25, 0.3, 4, 4}));
  const FlowBatch batch = random_batch(small_arch(), 3, rng);
  std::vector<Tensor> vt, tu;
  for (const auto& s : batch) {
    vt.push_back(s.v_t);
    tu.push_back(forward_denoiser(teacher, s.x_t, s.t, s.cond));
  }
  EXPECT_NEAR(diffusion_loss(student, batch), oracle_mse(student, batch, vt), 1e-12);
  EXPECT_NEAR(vd_loss(student, teacher, batch), oracle_mse(student, batch, tu), 1e-12);
  EXPECT_NEAR(vd_loss_and_grad(student, teacher, batch).loss, vd_loss(student, teacher, batch), 1e-14);
}

TEST(Losses, VdIgnoresCleanTargets) {
  Rng rng(3);
  const DenoiserModel teacher = make_model(small_arch(), rng);
  DenoiserModel student = teacher;
  student.mode = AttentionMode::sparse_with(SparsityConfig{0.25, 0.1, 4, 4});
  FlowBatch batch = random_batch(small_arch(), 2, rng);
  const double before = vd_loss(student, teacher, batch);
  for (auto& s : batch) {
    s.x1 = rng.normal_tensor(16, 4);
    s.v_t = rng.normal_tensor(16, 4);
  }
  EXPECT_EQ(vd_loss(student, teacher, batch), before);
}

TEST(Losses, IdenticalDenseModelsGiveZeroVd) {
  Rng rng(4);
  const DenoiserModel teacher = make_model(small_arch(), rng);
  const FlowBatch batch = random_batch(small_arch(), 2, rng);
  const BatchEval e = vd_loss_and_grad(teacher, teacher, batch);
  EXPECT_EQ(e.loss, 0.0);
  EXPECT_EQ(grad_norm(e.grads), 0.0);
}

TEST(Losses, FullKeepStudentMatchesTeacher) {
  Rng rng(5);
  const DenoiserModel teacher = make_model(small_arch(), rng);
  DenoiserModel student = teacher;
  student.mode = AttentionMode::sparse_with(SparsityConfig{1.0, 0.1, 4, 4});
  const BatchEval e = vd_loss_and_grad(student, teacher, random_batch(small_arch(), 2, rng));
  EXPECT_LE(e.loss, 1e-20);
  EXPECT_LE(grad_norm(e.grads), 1e-9);
}

TEST(Losses, SparseTeacherIsRejected) {
  Rng rng(6);
  DenoiserModel teacher = make_model(small_arch(), rng);
  teacher.mode = AttentionMode::sparse_with(SparsityConfig{0.5, 0.1, 4, 4});
  const FlowBatch batch = random_batch(small_arch(), 1, rng);
  EXPECT_THROW(vd_loss(teacher, teacher, batch), ConfigError);
  EXPECT_THROW(vd_loss_and_grad(teacher, teacher, batch), ConfigError);
}

TEST(Losses, DiffusionEqualsVdWhenTeacherIsExact) {
  // A teacher whose output is its input's velocity: with x0 = 0 and t = 1,
  // v_t = x1 = x_t, and a zero-weight teacher with b_out = v is exact for a
  // constant latent.
  Rng rng(7);
  DenoiserModel teacher = make_model(small_arch(), rng);
  teacher.params.w_out = Tensor::zeros(16, 4);
  for (std::size_t c = 0; c < 4; ++c) teacher.params.b_out(0, c) = 0.5 * static_cast<double>(c) - 0.7;
  Tensor x1 = Tensor::zeros(16, 4);
  for (std::size_t i = 0; i < 16; ++i) {
    for (std::size_t c = 0; c < 4; ++c) x1(i, c) = teacher.params.b_out(0, c);
  }
  FlowBatch batch = {make_sample_at(x1, Tensor::zeros(16, 4), 0.3), make_sample_at(x1, Tensor::zeros(16, 4), 0.8)};
  DenoiserModel student = make_model(small_arch(), rng, AttentionMode::sparse_with(SparsityConfig{0.25, 0.1, 4, 4}));
  const BatchEval a = diffusion_loss_and_grad(student, batch);
  const BatchEval b = vd_loss_and_grad(student, teacher, batch);
  EXPECT_NEAR(a.loss, b.loss, 1e-14);
  const auto ga = flatten(a.grads), gb = flatten(b.grads);
  for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_NEAR(ga[i], gb[i], 1e-13);
}

TEST(Losses, FullLossGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    Rng rng(seed);
    const DenoiserModel teacher = make_model(micro_arch(), rng);
    DenoiserModel student = make_model(micro_arch(), rng);
    const FlowBatch batch = random_batch(micro_arch(), 2, rng);
    const auto analytic = flatten(vd_loss_and_grad(student, teacher, batch).grads);
    auto slots = param_slots(student.params);
    auto f = [&](const std::vector<double>& theta) {
      for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = theta[i];
      return vd_loss(student, teacher, batch);
    };
    const auto numeric = oracles::fd_grad(f, flatten(student.params), 1e-5);
    EXPECT_LE(oracles::rel_err(analytic, numeric, 1e-4), 1e-4) << "seed " << seed;
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Rng rng(8);
  DenoiserParams p = init_params(micro_arch(), rng);
  const DenoiserParams before = p;
  DenoiserParams g = p.zeros_like();
  g.b_out(0, 0) = 3.0;
  g.b_out(0, 1) = -0.01;
  AdamState st = make_adam_state(p);
  adam_step(p, g, st, AdamConfig{});
  EXPECT_NEAR(p.b_out(0, 0), before.b_out(0, 0) - 1e-3, 1e-10);
  EXPECT_NEAR(p.b_out(0, 1), before.b_out(0, 1) + 1e-3, 1e-8);
  EXPECT_EQ(p.w_in, before.w_in);
  EXPECT_NEAR(grad_norm(g), std::sqrt(9.0 + 1e-4), 1e-12);
}

TEST(Training, ZeroStepsReturnsTeacher) {
  Rng rng(9);
  const DenoiserModel teacher = make_model(small_arch(), rng);
  const FlowDataset data = make_smooth_fields(8, 16, 4, 0, FieldSpec{}, rng);
  TrainConfig cfg;
  cfg.steps = 0;
  const TrainResult r = train_vd(teacher, SparsityConfig{0.25, 0.1, 4, 4}, data, cfg);
  EXPECT_EQ(params_checksum(r.model.params), params_checksum(teacher.params));
  EXPECT_TRUE(r.model.mode.sparse);
  EXPECT_TRUE(r.stats.empty());
}

TEST(Training, ZeroLearningRateLeavesParameters) {
  Rng rng(10);
  const DenoiserModel init = make_model(small_arch(), rng);
  const FlowDataset data = make_smooth_fields(8, 16, 4, 0, FieldSpec{}, rng);
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch_size = 2;
  cfg.adam.lr = 0.0;
  const TrainResult r = train_diffusion(init, data, cfg);
  EXPECT_EQ(params_checksum(r.model.params), params_checksum(init.params));
  EXPECT_EQ(r.stats.size(), 3u);
}

TEST(Training, FixedBatchLossDecreases) {
  Rng rng(11);
  const DenoiserModel init = make_model(small_arch(), rng);
  FlowDataset data = make_smooth_fields(1, 16, 4, 0, FieldSpec{}, rng);
  const FlowSample s = make_sample_at(data.latents[0], rng.normal_tensor(16, 4), 0.5);
  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.schedule = TimeSchedule::fixed(0.5);
  DenoiserModel m = init;
  double prev = diffusion_loss(m, {s});
  // Same (x0, t) every step: plain gradient steps on a fixed objective.
  AdamState st = make_adam_state(m.params);
  for (int i = 0; i < 20; ++i) {
    const BatchEval e = diffusion_loss_and_grad(m, {s});
    adam_step(m.params, e.grads, st, AdamConfig{1e-3});
    const double now = diffusion_loss(m, {s});
    EXPECT_LT(now, prev);
    prev = now;
  }
}

TEST(Training, TeacherIsNeverModified) {
  Rng rng(12);
  const DenoiserModel teacher = make_model(small_arch(), rng);
  const auto sum = params_checksum(teacher.params);
  const FlowDataset data = make_smooth_fields(8, 16, 4, 0, FieldSpec{}, rng);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch_size = 2;
  const TrainResult r = train_vd(teacher, SparsityConfig{0.25, 0.1, 4, 4}, data, cfg);
  EXPECT_EQ(params_checksum(teacher.params), sum);
  EXPECT_NE(params_checksum(r.model.params), sum);
  for (const auto& st : r.stats) {
    EXPECT_GT(st.mean_sparsity, 0.0);
    EXPECT_LE(st.mean_tau, 1.0);
  }
}

TEST(Training, Deterministic) {
  Rng rng(13);
  const DenoiserModel teacher = make_model(small_arch(), rng);
  const FlowDataset data = make_smooth_fields(8, 16, 4, 0, FieldSpec{}, rng);
  TrainConfig cfg;
  cfg.steps = 4;
  cfg.batch_size = 3;
  cfg.seed = 99;
  const auto a = train_vd(teacher, SparsityConfig{0.25, 0.1, 4, 4}, data, cfg);
  const auto b = train_vd(teacher, SparsityConfig{0.25, 0.1, 4, 4}, data, cfg);
  EXPECT_EQ(params_checksum(a.model.params), params_checksum(b.model.params));
}

TEST(Training, CheckpointCallbackCadence) {
  Rng rng(14);
  const DenoiserModel init = make_model(small_arch(), rng);
  const FlowDataset data = make_smooth_fields(4, 16, 4, 0, FieldSpec{}, rng);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch_size = 1;
  cfg.checkpoint_every = 2;
  std::vector<std::size_t> seen;
  cfg.on_checkpoint = [&](std::size_t step, const DenoiserModel&) { seen.push_back(step); };
  (void)train_diffusion(init, data, cfg);
  EXPECT_EQ(seen, (std::vector<std::size_t>{2, 4}));
}

TEST(Data, SmoothFieldsShapeAndLabels) {
  Rng rng(15);
  const FlowDataset d = make_smooth_fields(5, 16, 3, 4, FieldSpec{}, rng);
  ASSERT_EQ(d.size(), 5u);
  ASSERT_EQ(d.labels.size(), 5u);
  for (int l : d.labels) {
    EXPECT_GE(l, 0);
    EXPECT_LT(l, 4);
  }
  DenoiserConfig a = small_arch();
  a.channels = 3;
  a.n_classes = 4;
  EXPECT_NO_THROW(d.validate(a));
  a.channels = 4;
  EXPECT_THROW(d.validate(a), std::invalid_argument);
}
