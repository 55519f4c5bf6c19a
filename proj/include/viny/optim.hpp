// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "viny/objectives.hpp"
#include "viny/sample.hpp"

namespace viny {

enum class Phase { pretrain, intermediate, finetune };

std::string phase_name(Phase p);
/// Accepts "pretrain", "intermediate", "finetune"; throws std::invalid_argument.
Phase parse_phase(const std::string &name);

struct OptimConfig {
  double base_lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// When set, normalization scales/shifts and the cls, position and mask
  /// tokens are not decayed.
  bool exempt_norm_and_tokens = false;

  void validate() const;
  bool operator==(const OptimConfig &) const = default;
};

struct MilestoneSchedule {
  std::vector<int> milestones;
  double gamma = 1.0;

  void validate() const;
  bool operator==(const MilestoneSchedule &) const = default;
};

struct PhaseConfig {
  Phase phase = Phase::finetune;
  int epochs = 1;
  OptimConfig optim;
  MilestoneSchedule schedule;
  int batch_size = 64;
  /// Fraction of patches masked per image; only read in pre-training.
  double mask_ratio = 0.5;

  /// Optimizer settings for a phase with the published defaults.
  static PhaseConfig defaults(Phase phase);
  void validate() const;
  bool operator==(const PhaseConfig &) const = default;
};

/// base_lr * gamma^k, k = number of milestones m with m <= epoch, rounded
/// to 15 significant digits.
double lr_at_epoch(double base_lr, const MilestoneSchedule &schedule, int epoch);

/// True for normalization parameters and learned tokens.
bool is_norm_or_token(const std::string &path);

/// First and second moment accumulators aligned with a parameter list.
template <typename T>
struct OptimState {
  std::vector<std::string> paths;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t t = 0;

  static OptimState zeros(const std::vector<ParamRef<T>> &params);
};

/// One decoupled-weight-decay Adam update in place. The whole step is refused
/// (nothing mutated, t unchanged) with NumericError if any gradient entry is
/// non-finite.
template <typename T>
void optimizer_step(const std::vector<ParamRef<T>> &params, const std::vector<ParamRef<T>> &grads,
                    OptimState<T> &state, const OptimConfig &cfg, double lr);

struct EpochLog {
  int epoch = 0;
  Phase phase = Phase::finetune;
  double lr = 0.0;
  double mean_loss = 0.0;
};

template <typename T>
using GradientFn =
    std::function<LossGrad<T>(const BackboneParams<T> &, const Head<T> &, const TaskBatch &)>;

template <typename T>
struct TrainOptions {
  /// Replaces the objective gradient, e.g. for probes. Defaults to gradient().
  GradientFn<T> gradient_fn;
  /// Called after each epoch.
  std::function<void(const EpochLog &)> on_epoch;
  /// Resumes from and updates this state when given.
  OptimState<T> *state = nullptr;
};

/// Trains backbone and head jointly for phase.epochs epochs. Each epoch
/// reshuffles the data from rng and walks it in minibatches (the last one may
/// be short); pre-training draws a fresh mask per image per step from rng.
/// Throws DataError for an empty dataset or labels that do not fit the head.
template <typename T>
std::vector<EpochLog> train_phase(BackboneParams<T> &backbone, Head<T> &head,
                                  std::span<const Sample> data, const PhaseConfig &phase,
                                  std::mt19937_64 &rng, const TrainOptions<T> &options = {});

/// Assembles the objective inputs for a list of samples; masks come from rng
/// for reconstruction heads.
template <typename T>
TaskBatch make_batch(const Head<T> &head, std::span<const Sample> data,
                     std::span<const std::size_t> indices, const ModelConfig &cfg,
                     double mask_ratio, std::mt19937_64 &rng);

} // namespace viny
