// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "viny/data.hpp"
#include "viny/errors.hpp"
#include "viny/optim.hpp"

namespace viny {
namespace {

MilestoneSchedule pretrain_schedule() { return PhaseConfig::defaults(Phase::pretrain).schedule; }

TEST(Schedule, PretrainDefaults) {
  const auto s = pretrain_schedule();
  EXPECT_EQ(lr_at_epoch(1e-4, s, 0), 1e-4);
  EXPECT_EQ(lr_at_epoch(1e-4, s, 49), 1e-4);
  EXPECT_EQ(lr_at_epoch(1e-4, s, 50), 1e-5);
  EXPECT_EQ(lr_at_epoch(1e-4, s, 84), 1e-5);
  EXPECT_EQ(lr_at_epoch(1e-4, s, 85), 1e-6);
  EXPECT_EQ(lr_at_epoch(1e-4, s, 99), 1e-6);
}

TEST(Schedule, FinetuneEpoch95) {
  const auto p = PhaseConfig::defaults(Phase::finetune);
  EXPECT_EQ(lr_at_epoch(p.optim.base_lr, p.schedule, 95), 2.5e-4);
  EXPECT_EQ(lr_at_epoch(p.optim.base_lr, p.schedule, 69), 2e-3);
  EXPECT_EQ(lr_at_epoch(p.optim.base_lr, p.schedule, 70), 1e-3);
  EXPECT_EQ(lr_at_epoch(p.optim.base_lr, p.schedule, 90), 5e-4);
}

TEST(Schedule, EmptyMilestonesKeepBaseRate) {
  const MilestoneSchedule s{{}, 0.1};
  for (int e = 0; e < 300; e += 7)
    EXPECT_EQ(lr_at_epoch(3e-4, s, e), 3e-4);
}

TEST(Schedule, NonIncreasingForGammaAtMostOne) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> g(0.01, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    MilestoneSchedule s{{3, 10, 11, 40}, g(rng)};
    for (int e = 1; e < 60; ++e)
      EXPECT_LE(lr_at_epoch(1e-3, s, e), lr_at_epoch(1e-3, s, e - 1));
  }
}

TEST(Schedule, PhaseDefaultsMatchPublishedTable) {
  const auto pre = PhaseConfig::defaults(Phase::pretrain);
  EXPECT_EQ(pre.epochs, 100);
  EXPECT_EQ(pre.optim.base_lr, 1e-4);
  EXPECT_EQ(pre.optim.weight_decay, 0.05);
  EXPECT_EQ(pre.schedule, (MilestoneSchedule{{50, 85}, 0.1}));
  const auto mid = PhaseConfig::defaults(Phase::intermediate);
  EXPECT_EQ(mid.epochs, 200);
  EXPECT_EQ(mid.optim.base_lr, 8e-4);
  EXPECT_EQ(mid.optim.weight_decay, 0.0);
  EXPECT_EQ(mid.schedule, (MilestoneSchedule{{180, 190}, 0.1}));
  const auto fin = PhaseConfig::defaults(Phase::finetune);
  EXPECT_EQ(fin.epochs, 100);
  EXPECT_EQ(fin.optim.base_lr, 2e-3);
  EXPECT_EQ(fin.optim.weight_decay, 1e-4);
  EXPECT_EQ(fin.schedule, (MilestoneSchedule{{70, 90, 95}, 0.5}));
  for (const auto &p : {pre, mid, fin}) {
    EXPECT_EQ(p.batch_size, 64);
    EXPECT_EQ(p.optim.beta1, 0.9);
    EXPECT_EQ(p.optim.beta2, 0.999);
    EXPECT_EQ(p.optim.eps, 1e-8);
  }
}

TEST(Schedule, RejectsInvalidConfigs) {
  EXPECT_THROW((MilestoneSchedule{{5, 5}, 0.1}.validate()), std::invalid_argument);
  EXPECT_THROW((MilestoneSchedule{{5}, 1.5}.validate()), std::invalid_argument);
  OptimConfig o;
  o.beta1 = 1.0;
  EXPECT_THROW(o.validate(), std::invalid_argument);
  o = {};
  o.eps = 0.0;
  EXPECT_THROW(o.validate(), std::invalid_argument);
}

struct Scalar {
  Matrix<double> theta = Matrix<double>::Zero(1, 1);
  Matrix<double> grad = Matrix<double>::Zero(1, 1);
  OptimState<double> state;

  Scalar(double t, double g) {
    theta(0, 0) = t;
    grad(0, 0) = g;
  }
  double step(const OptimConfig &cfg, double lr) {
    optimizer_step<double>({param_ref<double>("w", theta)}, {param_ref<double>("w", grad)}, state,
                           cfg, lr);
    return theta(0, 0);
  }
};

TEST(AdamW, FirstStepMovesByLearningRate) {
  OptimConfig cfg;
  Scalar s(1.0, 1.0);
  EXPECT_NEAR(s.step(cfg, 0.1), 0.9, 1e-7);
  EXPECT_EQ(s.state.t, 1);
}

TEST(AdamW, ZeroGradientWithoutDecayIsStationary) {
  OptimConfig cfg;
  Scalar s(1.0, 0.0);
  EXPECT_EQ(s.step(cfg, 0.1), 1.0);
}

TEST(AdamW, ZeroGradientDecayClosedForm) {
  OptimConfig cfg;
  cfg.weight_decay = 0.05;
  Scalar s(1.0, 0.0);
  EXPECT_NEAR(s.step(cfg, 0.1), 0.995, 1e-7);
}

TEST(AdamW, DecayIsDecoupledFromGradientScale) {
  // With g = 0 every step reduces to theta <- theta (1 - lr wd).
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    OptimConfig cfg;
    cfg.weight_decay = 0.01 + 0.1 * std::abs(u(rng));
    const double lr = 0.01 * std::abs(u(rng));
    double expected = u(rng);
    Scalar s(expected, 0.0);
    for (int k = 0; k < 5; ++k) {
      expected *= 1.0 - lr * cfg.weight_decay;
      EXPECT_NEAR(s.step(cfg, lr), expected, 1e-12);
    }
  }
}

// Independent scalar transcription of the update for comparison.
struct ReferenceAdamW {
  double m = 0, v = 0;
  int t = 0;
  double step(double theta, double g, double lr, double wd, double b1, double b2, double eps) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    return theta - lr * (mh / (std::sqrt(vh) + eps) + wd * theta);
  }
};

TEST(AdamW, MatchesReferenceOnRandomScalars) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    OptimConfig cfg;
    cfg.weight_decay = std::abs(u(rng)) * 0.1;
    cfg.beta1 = 0.5 + 0.2 * std::abs(u(rng));
    cfg.beta2 = 0.9 + 0.04 * std::abs(u(rng));
    const double lr = 0.05 * std::abs(u(rng));
    double theta = u(rng);
    Scalar s(theta, 0.0);
    ReferenceAdamW ref;
    for (int k = 0; k < 10; ++k) {
      const double g = u(rng);
      s.grad(0, 0) = g;
      theta = ref.step(theta, g, lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps);
      EXPECT_NEAR(s.step(cfg, lr), theta, 1e-7 * std::max(1.0, std::abs(theta)));
    }
  }
}

TEST(AdamW, ScalingGradientAndRateIsNotInvariant) {
  OptimConfig cfg;
  Scalar a(1.0, 0.5), b(1.0, 5.0);
  const double da = 1.0 - a.step(cfg, 0.1);
  const double db = 1.0 - b.step(cfg, 0.01);
  EXPECT_GT(std::abs(da - db), 1e-3);
}

TEST(AdamW, NonFiniteGradientRefusesWholeStep) {
  Matrix<double> w = Matrix<double>::Constant(2, 2, 1.0), v = Matrix<double>::Constant(1, 3, 2.0);
  Matrix<double> gw = Matrix<double>::Constant(2, 2, 0.1), gv = Matrix<double>::Constant(1, 3, 0.1);
  gv(0, 2) = std::nan("");
  OptimState<double> state;
  OptimConfig cfg;
  try {
    optimizer_step<double>({param_ref<double>("w", w), param_ref<double>("v", v)},
                           {param_ref<double>("w", gw), param_ref<double>("v", gv)}, state, cfg,
                           0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError &e) {
    EXPECT_NE(std::string(e.what()).find("v[2]"), std::string::npos) << e.what();
  }
  EXPECT_TRUE((w.array() == 1.0).all());
  EXPECT_TRUE((v.array() == 2.0).all());
  EXPECT_EQ(state.t, 0);
}

TEST(AdamW, ExemptionSkipsNormsAndTokens) {
  EXPECT_TRUE(is_norm_or_token("backbone.blocks.3.attn_norm.scale"));
  EXPECT_TRUE(is_norm_or_token("backbone.final_norm.shift"));
  EXPECT_TRUE(is_norm_or_token("backbone.pos_embed"));
  EXPECT_TRUE(is_norm_or_token("backbone.cls_token"));
  EXPECT_TRUE(is_norm_or_token("head.mim.mask_token"));
  EXPECT_FALSE(is_norm_or_token("backbone.blocks.3.attn.qkv.weight"));
  EXPECT_FALSE(is_norm_or_token("head.seg.proj.bias"));

  Matrix<double> n = Matrix<double>::Constant(1, 2, 1.0), w = Matrix<double>::Constant(1, 2, 1.0);
  Matrix<double> z = Matrix<double>::Zero(1, 2);
  OptimConfig cfg;
  cfg.weight_decay = 0.1;
  cfg.exempt_norm_and_tokens = true;
  OptimState<double> state;
  optimizer_step<double>({param_ref<double>("x.norm.scale", n), param_ref<double>("x.weight", w)},
                         {param_ref<double>("x.norm.scale", z), param_ref<double>("x.weight", z)},
                         state, cfg, 0.5);
  EXPECT_EQ(n(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(w(0, 0), 0.95);
}

ModelConfig probe_config() {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.dim = 32;
  c.depth = 2;
  c.heads = 2;
  c.head_dim = 16;
  c.mlp_dim = 64;
  return c;
}

PhaseConfig short_phase(Phase phase, int epochs, int batch) {
  PhaseConfig p = PhaseConfig::defaults(phase);
  p.epochs = epochs;
  p.batch_size = batch;
  p.schedule.milestones = {epochs / 2};
  return p;
}

TEST(TrainPhase, HistoryFollowsSchedule) {
  const auto cfg = probe_config();
  std::mt19937_64 rng(4);
  auto backbone = init_backbone<float>(cfg, rng);
  Head<float> head = init_seg_head<float>(cfg, rng);
  const auto data = synth_generate(DataKind::segmentation, 5, 1, cfg.image_size);
  auto phase = short_phase(Phase::finetune, 4, 2);
  std::vector<EpochLog> seen;
  TrainOptions<float> opts;
  opts.on_epoch = [&](const EpochLog &l) { seen.push_back(l); };
  const auto hist = train_phase<float>(backbone, head, data, phase, rng, opts);
  ASSERT_EQ(hist.size(), 4u);
  ASSERT_EQ(seen.size(), 4u);
  for (int e = 0; e < 4; ++e) {
    EXPECT_EQ(hist[e].epoch, e);
    EXPECT_EQ(hist[e].phase, Phase::finetune);
    EXPECT_EQ(hist[e].lr, lr_at_epoch(phase.optim.base_lr, phase.schedule, e));
    EXPECT_EQ(seen[e].mean_loss, hist[e].mean_loss);
    EXPECT_TRUE(std::isfinite(hist[e].mean_loss));
  }
  EXPECT_EQ(hist[1].lr, 2e-3);
  EXPECT_EQ(hist[2].lr, 1e-3);
}

TEST(TrainPhase, SameSeedSameHistory) {
  const auto cfg = probe_config();
  auto run = [&](Phase phase, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto backbone = init_backbone<float>(cfg, rng);
    Head<float> head;
    DataKind kind;
    if (phase == Phase::pretrain) {
      head = init_mim_head<float>(cfg, rng);
      kind = DataKind::unlabeled;
    } else if (phase == Phase::intermediate) {
      head = init_cls_head<float>(cfg, rng);
      kind = DataKind::classification;
    } else {
      head = init_seg_head<float>(cfg, rng);
      kind = DataKind::segmentation;
    }
    const auto data = synth_generate(kind, 7, 2, cfg.image_size);
    auto hist = train_phase<float>(backbone, head, data, short_phase(phase, 3, 3), rng);
    std::vector<double> losses;
    for (const auto &h : hist)
      losses.push_back(h.mean_loss);
    return std::make_pair(losses, backbone.blocks[1].mlp_out.weight);
  };
  for (Phase p : {Phase::pretrain, Phase::intermediate, Phase::finetune}) {
    const auto a = run(p, 9), b = run(p, 9), c = run(p, 10);
    EXPECT_EQ(a.first, b.first) << phase_name(p);
    EXPECT_EQ(a.second, b.second) << phase_name(p);
    EXPECT_NE(a.first, c.first) << phase_name(p);
  }
}

TEST(TrainPhase, ZeroGradientObjectiveLeavesParametersUnchanged) {
  const auto cfg = probe_config();
  std::mt19937_64 rng(5);
  auto backbone = init_backbone<float>(cfg, rng);
  Head<float> head = init_seg_head<float>(cfg, rng);
  const auto before = backbone;
  const auto head_before = std::get<SegHead<float>>(head).proj.weight;
  const auto data = synth_generate(DataKind::segmentation, 4, 3, cfg.image_size);
  auto phase = short_phase(Phase::finetune, 3, 2);
  phase.optim.weight_decay = 0.0;
  TrainOptions<float> opts;
  opts.gradient_fn = [](const BackboneParams<float> &b, const Head<float> &h, const TaskBatch &) {
    LossGrad<float> g;
    g.loss = 1.0;
    g.d_backbone = BackboneParams<float>::zeros(b.config);
    for (auto &r : param_refs(g.d_backbone))
      std::fill(r.data, r.data + r.size(), 0.0f);
    g.d_head = h;
    for (auto &r : param_refs(g.d_head))
      std::fill(r.data, r.data + r.size(), 0.0f);
    return g;
  };
  const auto hist = train_phase<float>(backbone, head, data, phase, rng, opts);
  EXPECT_EQ(hist.size(), 3u);
  auto now = param_refs(backbone);
  auto old = param_refs(const_cast<BackboneParams<float> &>(before));
  for (std::size_t i = 0; i < now.size(); ++i)
    for (std::int64_t j = 0; j < now[i].size(); ++j)
      ASSERT_EQ(now[i].data[j], old[i].data[j]) << now[i].path;
  EXPECT_EQ(std::get<SegHead<float>>(head).proj.weight, head_before);
}

TEST(TrainPhase, OverfitsTwoSamples) {
  const auto cfg = probe_config();
  std::mt19937_64 rng(6);
  auto backbone = init_backbone<float>(cfg, rng);
  Head<float> head = init_seg_head<float>(cfg, rng);
  const auto data = synth_generate(DataKind::segmentation, 2, 4, cfg.image_size);
  TaskBatch all;
  for (const auto &s : data) {
    all.images.push_back(s.image);
    all.trimaps.push_back(s.trimap());
  }
  const double initial = objective_loss(backbone, head, all);
  auto phase = short_phase(Phase::finetune, 200, 2); // one step per epoch
  phase.schedule.milestones.clear();
  train_phase<float>(backbone, head, data, phase, rng);
  const double final_loss = objective_loss(backbone, head, all);
  EXPECT_LT(final_loss, 0.25 * initial) << initial << " -> " << final_loss;
}

TEST(TrainPhase, RejectsEmptyOrMislabelledData) {
  const auto cfg = probe_config();
  std::mt19937_64 rng(7);
  auto backbone = init_backbone<float>(cfg, rng);
  Head<float> head = init_seg_head<float>(cfg, rng);
  const auto phase = short_phase(Phase::finetune, 1, 2);
  EXPECT_THROW(train_phase<float>(backbone, head, SampleList{}, phase, rng), DataError);
  const auto wrong = synth_generate(DataKind::classification, 3, 1, cfg.image_size);
  EXPECT_THROW(train_phase<float>(backbone, head, wrong, phase, rng), DataError);
  const auto big = synth_generate(DataKind::segmentation, 1, 1, 64);
  EXPECT_THROW(train_phase<float>(backbone, head, big, phase, rng), DataError);
}

TEST(TrainPhase, ResumableStateCountsSteps) {
  const auto cfg = probe_config();
  std::mt19937_64 rng(8);
  auto backbone = init_backbone<float>(cfg, rng);
  Head<float> head = init_cls_head<float>(cfg, rng);
  const auto data = synth_generate(DataKind::classification, 7, 1, cfg.image_size);
  OptimState<float> state;
  TrainOptions<float> opts;
  opts.state = &state;
  train_phase<float>(backbone, head, data, short_phase(Phase::intermediate, 2, 3), rng, opts);
  EXPECT_EQ(state.t, 2 * 3); // ceil(7 / 3) steps per epoch
}

} // namespace
} // namespace viny
