// SPDX-License-Identifier: Apache-2.0
//
// Run store layout:
//
//   <store>/plan.json                  canonical plan plus {label, hash} per cell
//   <store>/records/<hash>.json        one completed cell
//   <store>/histories/<hash>.csv       epoch,phase,lr,mean_loss for every phase
//   <store>/failed/<hash>.json         last failure of a cell, removed on success
//   <store>/checkpoints/pretrain-<hash>.ckpt (+ .json with history and timing)
//   <store>/checkpoints/intermediate-<hash>.ckpt (+ .json)
//   <store>/checkpoints/final-<hash>.ckpt
//   <store>/locks/<name>.lock          pid of the process working on it
//   <store>/reports/                   table and plot outputs
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "viny/metrics.hpp"
#include "viny/optim.hpp"
#include "viny/plan.hpp"

namespace viny {

struct RunRecord {
  CellKey key;
  CellSeeds seeds;
  std::string config_hash;
  std::string plan_name;
  /// Per-epoch losses of every phase the cell depends on, in phase order.
  std::vector<EpochLog> history;
  /// Seconds per phase ("pretrain", "intermediate", "finetune", "evaluate").
  /// Cached phases report the time of the run that produced them.
  std::map<std::string, double> wall_clock;
  /// Store-relative checkpoint paths per phase.
  std::map<std::string, std::string> checkpoints;
  std::size_t train_samples = 0;
  std::size_t test_samples = 0;
  MetricsReport metrics;

  bool operator==(const RunRecord &) const;
};

std::string record_to_json(const RunRecord &r);
/// Throws StoreError for malformed input.
RunRecord record_from_json(const std::string &text);

/// epoch,phase,lr,mean_loss rows with a header line.
std::string history_csv(const std::vector<EpochLog> &history);

struct FailureRecord {
  CellKey key;
  std::string config_hash;
  std::string phase;
  std::string category;
  std::string message;
};

struct PlanCell {
  CellKey key;
  std::string hash;
};

/// Exclusive, process-level lock on a store entry. Stale locks whose owner
/// process is gone are taken over.
class StoreLock {
public:
  StoreLock() = default;
  ~StoreLock();
  StoreLock(StoreLock &&other) noexcept;
  StoreLock &operator=(StoreLock &&other) noexcept;

  bool held() const { return !file_.empty(); }
  void release();

private:
  friend class RunStore;
  explicit StoreLock(std::filesystem::path file) : file_(std::move(file)) {}
  std::filesystem::path file_;
};

class RunStore {
public:
  explicit RunStore(std::filesystem::path root);

  const std::filesystem::path &root() const { return root_; }
  std::filesystem::path reports_dir() const { return root_ / "reports"; }
  std::filesystem::path checkpoint_path(const std::string &stage, const std::string &hash) const;
  /// Store-relative form of a path inside the store.
  std::string relative(const std::filesystem::path &p) const;

  /// Records the plan and its cell list; replaces any previous plan.json.
  void write_plan(const ExperimentPlan &plan);
  bool has_plan() const;
  /// Cells of the stored plan in enumeration order. Throws StoreError when
  /// the store has no plan.
  std::vector<PlanCell> plan_cells() const;
  std::string plan_name() const;

  bool has_record(const std::string &hash) const;
  std::optional<RunRecord> read_record(const std::string &hash) const;
  /// Writes the record and its history CSV atomically and clears any
  /// failure entry for the cell.
  void write_record(const RunRecord &r);
  bool remove_record(const std::string &hash);
  /// Completed records belonging to the stored plan, in cell order.
  std::vector<RunRecord> plan_records() const;
  /// Every record file in the store, sorted by hash.
  std::vector<RunRecord> all_records() const;

  void write_failure(const FailureRecord &f);
  std::vector<FailureRecord> failures() const;

  /// Tries once to take the named lock; returns an unheld lock on
  /// contention.
  StoreLock try_lock(const std::string &name) const;
  /// Waits (polling) until the named lock can be taken.
  StoreLock lock(const std::string &name) const;

private:
  std::filesystem::path root_;
};

/// Writes bytes to a temporary sibling and renames it over file.
void write_file_atomic(const std::filesystem::path &file, const std::string &bytes);
std::string read_file(const std::filesystem::path &file);

} // namespace viny
