// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "viny/metrics.hpp"
#include "viny/objectives.hpp"
#include "viny/sample.hpp"
#include "viny/store.hpp"

namespace viny {

struct RunOptions {
  /// Skip cells that already have a record instead of refusing to start.
  bool resume = false;
  /// Prefix for relative dataset folders; $DATA_ROOT when empty.
  std::string data_root;
  /// Worker processes; each takes cells through per-cell locks.
  int jobs = 1;
};

struct GridSummary {
  std::size_t cells = 0;
  std::size_t trained = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
  std::vector<std::string> trained_labels;
  std::vector<std::string> failed_labels;
};

/// Runs every cell of the plan into the store: optional pre-training
/// (cached per pretrain size and run), optional intermediate classification,
/// segmentation fine-tuning, and evaluation on the holdout. A failing cell
/// is recorded under failed/ and the grid moves on.
///
/// Throws DataError when a dataset cannot be resolved, and StoreError when
/// the store already holds completed cells of the plan and resume is off.
GridSummary run_grid(const ExperimentPlan &plan, RunStore &store, const RunOptions &options = {});

/// Tri-map metrics of backbone + head over a labelled segmentation set.
MetricsReport evaluate(const BackboneParams<float> &backbone, const SegHead<float> &head,
                       std::span<const Sample> test, const MetricsOptions &options = {},
                       int batch = 32);

/// Short machine-readable name for an exception type: plan, data, store,
/// numeric, checkpoint, shape or internal.
std::string error_category(const std::exception &e);

} // namespace viny
