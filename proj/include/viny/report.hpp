// SPDX-License-Identifier: Apache-2.0
//
// CSV schemas:
//
//   table.csv  pretrain_size,intermediate,finetune_size,runs,expected_runs,
//              accuracy_mean,accuracy_stderr,accuracy_std,miou_mean,
//              miou_stderr,miou_std,iou_fg_mean,iou_bg_mean,iou_unknown_mean,
//              flags
//   trend.csv  series,pretrain_size,intermediate,finetune_size,n,miou_mean,miou_stderr
//   delta.csv  series,pretrain_size,finetune_size,n,delta_mean,delta_stderr
//
// Percentages carry two decimals; the strings are the ones shown in the
// markdown table. flags is a ';'-separated subset of single_run,
// incomplete, missing.
#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "viny/store.hpp"

namespace viny {

/// Nothing to report: the store has no plan or no completed records for the
/// selection.
class NoRecordsError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A plot would have no series at all.
class EmptySeriesError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Restricts reports to a subset of cells. Empty lists select everything.
struct Selector {
  std::vector<std::size_t> pretrain_sizes;
  std::vector<std::size_t> finetune_sizes;
  std::optional<bool> intermediate;

  bool matches(const CellKey &k) const;
};

/// Parses terms such as "p=0,45000", "i=on", "f=250". Throws
/// std::invalid_argument on anything else.
Selector parse_selector(const std::vector<std::string> &terms);

struct TableRow {
  std::size_t pretrain_size = 0;
  bool intermediate = false;
  std::size_t finetune_size = 0;
  std::size_t runs = 0;
  std::size_t expected_runs = 0;
  std::string accuracy;   // "70.33 ± 0.89"
  std::string miou;       // "43.73 ± 1.02"
  std::vector<std::string> fields; // CSV cells after expected_runs
  std::vector<std::string> flags;
};

struct Table {
  std::vector<TableRow> rows;
  std::string markdown;
  std::string csv;
};

/// Aggregates records of the stored plan into rows ordered by intermediate
/// flag, pretrain size and finetune size. Groups with missing runs are
/// flagged; groups with no runs show "n/a". Throws NoRecordsError when no
/// selected cell has a record.
Table emit_table(const RunStore &store, const Selector &selector = {});

/// Splits one CSV line (no quoting is ever emitted).
std::vector<std::string> split_csv_line(const std::string &line);

enum class PlotKind { trend, delta };
PlotKind parse_plot_kind(const std::string &name);

struct Series {
  std::string name;
  std::size_t pretrain_size = 0;
  bool intermediate = false;
  std::vector<double> x;
  std::vector<double> mean;
  std::vector<double> err;
  std::vector<std::size_t> n;
};

struct Plot {
  std::vector<Series> series;
  std::vector<std::string> warnings;
  std::string svg;
  std::string csv;
};

/// trend: mean mIoU against fine-tuning size, one series per pretrain size
/// (and intermediate flag). delta: per pretrain size, mean and standard
/// error of run-paired (with intermediate - without) mIoU differences.
/// Cells lacking either side are skipped with a warning. Throws
/// EmptySeriesError when nothing is left.
Plot emit_plot(const RunStore &store, PlotKind kind, const Selector &selector = {});

/// Human-readable dump of one cell, given by label or hash. Throws
/// NoRecordsError when the cell has neither a record nor a failure entry.
std::string inspect_cell(const RunStore &store, const std::string &cell);

} // namespace viny
