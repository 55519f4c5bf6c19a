// SPDX-License-Identifier: Apache-2.0
#include "viny/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <stdexcept>

#include "viny/errors.hpp"

namespace viny {

std::string phase_name(Phase p) {
  switch (p) {
  case Phase::pretrain:
    return "pretrain";
  case Phase::intermediate:
    return "intermediate";
  case Phase::finetune:
    return "finetune";
  }
  return "unknown";
}

Phase parse_phase(const std::string &name) {
  if (name == "pretrain")
    return Phase::pretrain;
  if (name == "intermediate")
    return Phase::intermediate;
  if (name == "finetune")
    return Phase::finetune;
  throw std::invalid_argument("unknown phase '" + name + "'");
}

void OptimConfig::validate() const {
  if (!(base_lr > 0.0) || !std::isfinite(base_lr))
    throw std::invalid_argument("base_lr must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
    throw std::invalid_argument("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw std::invalid_argument("betas must lie in [0, 1)");
  if (!(eps > 0.0))
    throw std::invalid_argument("eps must be positive");
}

void MilestoneSchedule::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0))
    throw std::invalid_argument("gamma must lie in (0, 1]");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] < 0)
      throw std::invalid_argument("milestones must be non-negative");
    if (i > 0 && milestones[i] <= milestones[i - 1])
      throw std::invalid_argument("milestones must be strictly ascending");
  }
}

PhaseConfig PhaseConfig::defaults(Phase phase) {
  PhaseConfig c;
  c.phase = phase;
  switch (phase) {
  case Phase::pretrain:
    c.epochs = 100;
    c.optim.base_lr = 1e-4;
    c.optim.weight_decay = 0.05;
    c.schedule = {{50, 85}, 0.1};
    break;
  case Phase::intermediate:
    c.epochs = 200;
    c.optim.base_lr = 8e-4;
    c.optim.weight_decay = 0.0;
    c.schedule = {{180, 190}, 0.1};
    break;
  case Phase::finetune:
    c.epochs = 100;
    c.optim.base_lr = 2e-3;
    c.optim.weight_decay = 1e-4;
    c.schedule = {{70, 90, 95}, 0.5};
    break;
  }
  return c;
}

void PhaseConfig::validate() const {
  if (epochs <= 0)
    throw std::invalid_argument("epochs must be positive");
  if (batch_size <= 0)
    throw std::invalid_argument("batch_size must be positive");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0))
    throw std::invalid_argument("mask_ratio must lie in [0, 1]");
  optim.validate();
  schedule.validate();
}

double lr_at_epoch(double base_lr, const MilestoneSchedule &schedule, int epoch) {
  const auto k = std::count_if(schedule.milestones.begin(), schedule.milestones.end(),
                               [&](int m) { return m <= epoch; });
  const double lr = base_lr * std::pow(schedule.gamma, static_cast<double>(k));
  // Schedules are written in decimal; snap to 15 significant digits so that
  // e.g. 1e-4 * 0.1^2 is the double nearest 1e-6 rather than one ulp above.
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.15g", lr);
  return std::strtod(buf, nullptr);
}

bool is_norm_or_token(const std::string &path) {
  auto ends_with = [&](std::string_view s) { return path.ends_with(s); };
  return ends_with(".scale") || ends_with(".shift") || ends_with(".pos_embed") ||
         ends_with(".cls_token") || ends_with(".mask_token");
}

template <typename T>
OptimState<T> OptimState<T>::zeros(const std::vector<ParamRef<T>> &params) {
  OptimState s;
  for (const auto &p : params) {
    s.paths.push_back(p.path);
    s.m.emplace_back(static_cast<std::size_t>(p.size()), T(0));
    s.v.emplace_back(static_cast<std::size_t>(p.size()), T(0));
  }
  return s;
}

template <typename T>
void optimizer_step(const std::vector<ParamRef<T>> &params, const std::vector<ParamRef<T>> &grads,
                    OptimState<T> &state, const OptimConfig &cfg, double lr) {
  if (!(lr >= 0.0))
    throw std::invalid_argument("learning rate must be non-negative");
  if (params.size() != grads.size())
    throw ShapeError("parameter and gradient lists differ in length");
  if (state.paths.empty() && state.t == 0)
    state = OptimState<T>::zeros(params);
  if (state.paths.size() != params.size())
    throw ShapeError("optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size() ||
        static_cast<std::size_t>(params[i].size()) != state.m[i].size())
      throw ShapeError("shape mismatch at " + params[i].path);
    if (params[i].path != state.paths[i])
      throw ShapeError("optimizer state path " + state.paths[i] + " does not match " +
                       params[i].path);
  }
  for (const auto &g : grads)
    for (std::int64_t j = 0; j < g.size(); ++j)
      if (!std::isfinite(g.data[j]))
        throw NumericError("non-finite gradient at " + g.path + "[" + std::to_string(j) +
                           "]; step refused");

  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double wd =
        cfg.exempt_norm_and_tokens && is_norm_or_token(params[i].path) ? 0.0 : cfg.weight_decay;
    T *theta = params[i].data;
    const T *g = grads[i].data;
    T *m = state.m[i].data();
    T *v = state.v[i].data();
    for (std::int64_t j = 0; j < params[i].size(); ++j) {
      const double gj = g[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      const double th = theta[j];
      theta[j] = static_cast<T>(th - lr * (mhat / (std::sqrt(vhat) + cfg.eps) + wd * th));
    }
  }
}

namespace {

template <typename T>
void check_labels(const Head<T> &head, std::span<const Sample> data, const ModelConfig &cfg) {
  const std::string kind = head_kind(head);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample &s = data[i];
    if (s.image.channels != cfg.channels || s.image.height != cfg.image_size ||
        s.image.width != cfg.image_size)
      throw DataError("sample " + std::to_string(i) + " does not match the model image shape");
    if (kind == "cls") {
      const int classes = static_cast<int>(std::get<ClsHead<T>>(head).proj.out());
      if (!s.has_class() || s.class_id() < 0 || s.class_id() >= classes)
        throw DataError("sample " + std::to_string(i) + " lacks a class label in [0, " +
                        std::to_string(classes) + ")");
    } else if (kind == "seg") {
      if (!s.has_trimap() || s.trimap().height != cfg.image_size ||
          s.trimap().width != cfg.image_size)
        throw DataError("sample " + std::to_string(i) + " lacks a matching trimap");
    }
  }
}

} // namespace

template <typename T>
TaskBatch make_batch(const Head<T> &head, std::span<const Sample> data,
                     std::span<const std::size_t> indices, const ModelConfig &cfg,
                     double mask_ratio, std::mt19937_64 &rng) {
  TaskBatch batch;
  const std::string kind = head_kind(head);
  batch.images.reserve(indices.size());
  for (std::size_t idx : indices) {
    const Sample &s = data[idx];
    batch.images.push_back(s.image);
    if (kind == "mim")
      batch.masks.push_back(sample_mask(rng, cfg.num_patches(), mask_ratio));
    else if (kind == "cls")
      batch.labels.push_back(s.class_id());
    else
      batch.trimaps.push_back(s.trimap());
  }
  return batch;
}

template <typename T>
std::vector<EpochLog> train_phase(BackboneParams<T> &backbone, Head<T> &head,
                                  std::span<const Sample> data, const PhaseConfig &phase,
                                  std::mt19937_64 &rng, const TrainOptions<T> &options) {
  phase.validate();
  if (data.empty())
    throw DataError("empty dataset for phase " + phase_name(phase.phase));
  const ModelConfig &cfg = backbone.config;
  check_labels(head, data, cfg);

  auto params = param_refs(backbone);
  for (auto &r : param_refs(head))
    params.push_back(std::move(r));

  OptimState<T> local;
  OptimState<T> &state = options.state ? *options.state : local;
  if (state.paths.empty())
    state = OptimState<T>::zeros(params);

  const GradientFn<T> grad_fn =
      options.gradient_fn ? options.gradient_fn
                          : GradientFn<T>([](const BackboneParams<T> &b, const Head<T> &h,
                                             const TaskBatch &batch) {
                              return gradient(b, h, batch);
                            });

  std::vector<std::size_t> order(data.size());
  std::vector<EpochLog> history;
  for (int epoch = 0; epoch < phase.epochs; ++epoch) {
    const double lr = lr_at_epoch(phase.optim.base_lr, phase.schedule, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(phase.batch_size)) {
      const std::size_t n =
          std::min(order.size() - start, static_cast<std::size_t>(phase.batch_size));
      const std::span<const std::size_t> idx(order.data() + start, n);
      const TaskBatch batch = make_batch(head, data, idx, cfg, phase.mask_ratio, rng);
      LossGrad<T> g = grad_fn(backbone, head, batch);
      auto grads = param_refs(g.d_backbone);
      for (auto &r : param_refs(g.d_head))
        grads.push_back(std::move(r));
      optimizer_step(params, grads, state, phase.optim, lr);
      loss_sum += g.loss * static_cast<double>(n);
    }
    EpochLog log{epoch, phase.phase, lr, loss_sum / static_cast<double>(data.size())};
    if (!std::isfinite(log.mean_loss))
      throw NumericError("non-finite loss in " + phase_name(phase.phase) + " epoch " +
                         std::to_string(epoch));
    history.push_back(log);
    if (options.on_epoch)
      options.on_epoch(log);
  }
  return history;
}

#define VINY_INSTANTIATE(T)                                                                     \
  template struct OptimState<T>;                                                                \
  template void optimizer_step<T>(const std::vector<ParamRef<T>> &,                             \
                                  const std::vector<ParamRef<T>> &, OptimState<T> &,            \
                                  const OptimConfig &, double);                                 \
  template TaskBatch make_batch<T>(const Head<T> &, std::span<const Sample>,                    \
                                   std::span<const std::size_t>, const ModelConfig &, double,   \
                                   std::mt19937_64 &);                                          \
  template std::vector<EpochLog> train_phase<T>(BackboneParams<T> &, Head<T> &,                 \
                                                std::span<const Sample>, const PhaseConfig &,   \
                                                std::mt19937_64 &, const TrainOptions<T> &);

VINY_INSTANTIATE(float)
VINY_INSTANTIATE(double)

#undef VINY_INSTANTIATE

} // namespace viny
