// SPDX-License-Identifier: Apache-2.0
//
// Plan files are YAML. Every key is optional unless marked; unknown keys are
// rejected.
//
//   name: <string>                         store directory name, default "plan"
//   seed: <uint>                           base seed
//   runs_per_cell: <int >= 1>
//   reseed_pretrain_per_run: <bool>        false shares one pre-trained model
//                                          per size across run indices
//   save_final_checkpoints: <bool>
//   model: {image_size, patch_size, dim, depth, heads, head_dim, mlp_dim,
//           channels}
//   grid:
//     pretrain_sizes: [<uint>...]          0 = no pre-training
//     intermediate: on | off | both
//     finetune_sizes: [<uint>...]          (required)
//   data:
//     pretrain | intermediate | finetune:
//       {source: synthetic | <folder>, kind: unlabeled | classification |
//        segmentation, size: <uint>, seed: <uint>, class_balanced: <bool>}
//     holdout: {size: <uint>, seed: <uint>}
//   phases:
//     pretrain | intermediate | finetune:
//       {epochs, batch_size, lr, weight_decay, beta1, beta2, eps, gamma,
//        milestones: [...], mask_ratio, exempt_norm_and_tokens}
//   metrics: {accuracy_counts_unknown: <bool>}
//
// Phase keys left out keep the published defaults for that phase.
#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "viny/data.hpp"
#include "viny/metrics.hpp"
#include "viny/optim.hpp"

namespace viny {

class PlanError : public std::runtime_error {
public:
  PlanError(const std::string &message, int line = 0, std::string field = {});
  int line() const { return line_; }
  const std::string &field() const { return field_; }

private:
  int line_;
  std::string field_;
};

enum class IntermediateMode { off, on, both };

struct ExperimentPlan {
  std::string name = "plan";
  std::uint64_t seed = 0;
  int runs_per_cell = 1;
  bool reseed_pretrain_per_run = true;
  bool save_final_checkpoints = true;
  ModelConfig model;

  std::vector<std::size_t> pretrain_sizes{0};
  IntermediateMode intermediate = IntermediateMode::off;
  std::vector<std::size_t> finetune_sizes;

  DatasetSpec pretrain_data{"synthetic", DataKind::unlabeled, std::nullopt, 1, false};
  DatasetSpec intermediate_data{"synthetic", DataKind::classification, 1200, 2, false};
  DatasetSpec finetune_data{"synthetic", DataKind::segmentation, 7349, 3, false};
  std::size_t holdout_size = 1000;
  std::uint64_t holdout_seed = 42;

  PhaseConfig pretrain = PhaseConfig::defaults(Phase::pretrain);
  PhaseConfig intermediate_phase = PhaseConfig::defaults(Phase::intermediate);
  PhaseConfig finetune = PhaseConfig::defaults(Phase::finetune);

  MetricsOptions metrics;

  /// Throws PlanError naming the offending field.
  void validate() const;
};

std::string intermediate_name(IntermediateMode m);

/// Throws PlanError with the 1-based line of the problem.
ExperimentPlan parse_plan(const std::string &text);
ExperimentPlan load_plan(const std::filesystem::path &file);

/// Canonical JSON rendering of every plan field (keys sorted, 2-space indent).
std::string plan_json(const ExperimentPlan &plan);

struct CellKey {
  std::size_t pretrain_size = 0;
  bool intermediate = false;
  std::size_t finetune_size = 0;
  int run = 0;

  /// "p=45000 i=on f=250 r=0"
  std::string label() const;
  /// Parses label() output, tolerating commas for spaces.
  static CellKey parse(const std::string &text);

  auto operator<=>(const CellKey &) const = default;
};

/// Cells ordered by pretrain size, intermediate flag, finetune size, run.
std::vector<CellKey> enumerate_cells(const ExperimentPlan &plan);

/// Seeds for every phase of a cell. Cells that differ only in pretrain size
/// or intermediate flag share init, finetune and subset seeds, so their runs
/// are paired.
struct CellSeeds {
  std::uint64_t init = 0;
  std::uint64_t pretrain = 0;
  std::uint64_t intermediate = 0;
  std::uint64_t finetune = 0;
  std::uint64_t subset = 0;

  bool operator==(const CellSeeds &) const = default;
};

CellSeeds derive_seeds(const ExperimentPlan &plan, const CellKey &key);

/// 16 hex digits identifying the cell and every setting that affects it.
std::string cell_hash(const ExperimentPlan &plan, const CellKey &key);
/// Identity of the pre-trained backbone a cell starts from ("" when none).
std::string pretrain_hash(const ExperimentPlan &plan, const CellKey &key);
/// Identity of the intermediate checkpoint a cell starts from ("" when none).
std::string intermediate_hash(const ExperimentPlan &plan, const CellKey &key);

} // namespace viny
