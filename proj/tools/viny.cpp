// SPDX-License-Identifier: Apache-2.0
//
// viny: run experiment grids and report on run stores.
//
// Exit codes:
//   0  success
//   1  internal error
//   2  usage error
//   3  malformed plan
//   4  dataset problem
//   5  no records
//   6  empty plot series
//   7  one or more cells failed
//   8  run store conflict or I/O failure
#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "viny/errors.hpp"
#include "viny/plan.hpp"
#include "viny/report.hpp"
#include "viny/runner.hpp"
#include "viny/store.hpp"

namespace fs = std::filesystem;
using namespace viny;

namespace {

enum Exit {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kPlan = 3,
  kData = 4,
  kNoRecords = 5,
  kEmptySeries = 6,
  kCellFailed = 7,
  kStore = 8,
};

int fail(const std::string &category, const std::string &message, int code) {
  std::cerr << "error: category=" << category << " " << message << "\n";
  return code;
}

struct RunArgs {
  std::string plan;
  bool resume = false;
  std::string data_root;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool dry_run = false;
  int jobs = 1;
};

int cmd_run(const RunArgs &a) {
  ExperimentPlan plan = load_plan(a.plan);
  if (a.seed)
    plan.seed = *a.seed;
  const auto cells = enumerate_cells(plan);
  if (a.dry_run) {
    for (const auto &k : cells)
      std::cout << k.label() << "  " << cell_hash(plan, k) << "\n";
    std::cout << cells.size() << " cells\n";
    return kOk;
  }
  RunStore store(a.out.empty() ? fs::path("runs") / plan.name : fs::path(a.out));
  RunOptions options;
  options.resume = a.resume;
  options.data_root = a.data_root;
  options.jobs = a.jobs;
  const GridSummary s = run_grid(plan, store, options);
  std::cout << fmt::format("{} cells: {} trained, {} skipped, {} failed\nstore: {}\n", s.cells,
                           s.trained, s.skipped, s.failed, store.root().string());
  if (s.failed > 0) {
    for (const auto &l : s.failed_labels)
      std::cerr << "failed: " << l << "\n";
    return fail("training", fmt::format("{} cell(s) failed; see {}/failed", s.failed,
                                        store.root().string()),
                kCellFailed);
  }
  return kOk;
}

int cmd_table(const std::string &store_dir, const std::vector<std::string> &select, bool csv) {
  RunStore store(store_dir);
  const Table t = emit_table(store, parse_selector(select));
  write_file_atomic(store.reports_dir() / "table.md", t.markdown);
  write_file_atomic(store.reports_dir() / "table.csv", t.csv);
  std::cout << (csv ? t.csv : t.markdown);
  return kOk;
}

int cmd_plot(const std::string &store_dir, const std::string &kind_name,
             const std::vector<std::string> &select) {
  RunStore store(store_dir);
  const PlotKind kind = parse_plot_kind(kind_name);
  Plot p;
  try {
    p = emit_plot(store, kind, parse_selector(select));
  } catch (const EmptySeriesError &) {
    std::cerr << "warning: nothing to plot for --kind " << kind_name << "\n";
    throw;
  }
  for (const auto &w : p.warnings)
    std::cerr << "warning: " << w << "\n";
  const fs::path svg = store.reports_dir() / (kind_name + ".svg");
  const fs::path csv = store.reports_dir() / (kind_name + ".csv");
  write_file_atomic(svg, p.svg);
  write_file_atomic(csv, p.csv);
  std::cout << svg.string() << "\n" << csv.string() << "\n";
  return kOk;
}

int cmd_inspect(const std::string &store_dir, const std::string &cell) {
  RunStore store(store_dir);
  std::cout << inspect_cell(store, cell);
  return kOk;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Tiny vision transformer experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  RunArgs run;
  auto *run_cmd = app.add_subcommand("run", "Train every cell of a plan into a run store");
  run_cmd->add_option("plan", run.plan, "Plan file (YAML)")->required();
  run_cmd->add_flag("--resume", run.resume, "Skip cells that already have a record");
  run_cmd->add_option("--data-root", run.data_root, "Prefix for relative dataset folders");
  run_cmd->add_option("--out", run.out, "Run store directory (default runs/<plan name>)");
  run_cmd->add_option("--seed", run.seed, "Override the plan's base seed");
  run_cmd->add_flag("--dry-run", run.dry_run, "Print the resolved cells and exit");
  run_cmd->add_option("--jobs", run.jobs, "Worker processes")->check(CLI::Range(1, 256));

  std::string store_dir;
  std::vector<std::string> select;
  bool csv = false;
  auto *table_cmd = app.add_subcommand("table", "Aggregate records into a results table");
  table_cmd->add_option("store", store_dir, "Run store directory")->required();
  table_cmd->add_option("--select", select, "Terms like p=0,45000 i=on f=250");
  table_cmd->add_flag("--csv", csv, "Print CSV instead of markdown");

  std::string kind;
  auto *plot_cmd = app.add_subcommand("plot", "Write an SVG plot and its data");
  plot_cmd->add_option("store", store_dir, "Run store directory")->required();
  plot_cmd->add_option("--kind", kind, "trend or delta")
      ->required()
      ->check(CLI::IsMember({"trend", "delta"}));
  plot_cmd->add_option("--select", select, "Terms like p=0,45000 f=250");

  std::string cell;
  auto *inspect_cmd = app.add_subcommand("inspect", "Show one cell's record");
  inspect_cmd->add_option("store", store_dir, "Run store directory")->required();
  inspect_cmd->add_option("cell", cell, "Cell label (\"p=0 i=off f=250 r=0\") or hash")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    std::cerr << app.help();
    return fail("usage", e.what(), kUsage);
  }

  spdlog::set_default_logger(spdlog::stderr_color_st("viny"));
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    if (*run_cmd)
      return cmd_run(run);
    if (*table_cmd)
      return cmd_table(store_dir, select, csv);
    if (*plot_cmd)
      return cmd_plot(store_dir, kind, select);
    if (*inspect_cmd)
      return cmd_inspect(store_dir, cell);
  } catch (const PlanError &e) {
    return fail("plan", e.what(), kPlan);
  } catch (const NoRecordsError &e) {
    return fail("no_records", e.what(), kNoRecords);
  } catch (const EmptySeriesError &e) {
    return fail("empty_series", e.what(), kEmptySeries);
  } catch (const DataError &e) {
    return fail("data", e.what(), kData);
  } catch (const StoreError &e) {
    return fail("store", e.what(), kStore);
  } catch (const fs::filesystem_error &e) {
    return fail("store", e.what(), kStore);
  } catch (const std::invalid_argument &e) {
    return fail("usage", e.what(), kUsage);
  } catch (const std::exception &e) {
    return fail(error_category(e), e.what(), kInternal);
  }
  return kInternal;
}
