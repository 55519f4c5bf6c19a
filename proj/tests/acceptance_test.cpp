// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero when any
// criterion fails.
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "store_util.hpp"
#include "test_util.hpp"
#include "viny/checkpoint.hpp"
#include "viny/metrics.hpp"
#include "viny/optim.hpp"
#include "viny/report.hpp"
#include "viny/runner.hpp"

namespace fs = std::filesystem;
using namespace viny;

namespace {

// Pinned tolerances and limits.
constexpr std::int64_t kBackboneParams = 4'842'880;
constexpr std::int64_t kWithTwoOutputHead = 4'843'138;
constexpr std::int64_t kWithSegHead = 4'941'952;
constexpr double kParamSeconds = 1.0;
using testing::kGradFloor;
using testing::kGradStep;
using testing::kGradTolerance;
constexpr double kGradSeconds = 120.0;
constexpr int kMaskDraws = 10'000;
constexpr int kMetricPairs = 1'000;
constexpr double kMetricRelTolerance = 1e-12;
constexpr double kOptimTolerance = 1e-7;
constexpr double kDeskMarginPoints = 1.0;
constexpr double kDeskLossRatio = 0.60;
constexpr int kDeskMinSeeds = 2;
constexpr double kDeltaTolerance = 1e-9;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

Outcome parameter_counts() {
  const auto t0 = Clock::now();
  const ModelConfig cfg;
  std::mt19937_64 rng(1);
  const auto backbone = init_backbone<float>(cfg, rng);
  const std::int64_t analytic = analytic_parameter_count(cfg);
  const std::int64_t counted = count_parameters(backbone);
  const std::int64_t two = counted + count_parameters(Head<float>(ClsHead<float>::zeros(cfg, 2)));
  const std::int64_t seg = counted + count_parameters(Head<float>(SegHead<float>::zeros(cfg)));
  const double secs = seconds_since(t0);
  return {analytic == kBackboneParams && counted == kBackboneParams && two == kWithTwoOutputHead &&
              seg == kWithSegHead && secs < kParamSeconds,
          fmt::format("backbone {} (analytic {}), +2-output head {}, +seg head {}, {:.3f} s", counted,
                      analytic, two, seg, secs)};
}

// ---------------------------------------------------------------------------

double gradient_error(int kind, std::string &worst) {
  auto f = testing::make_fixture(kind, 100 + kind);
  auto g = gradient(f.backbone, f.head, f.batch);
  auto refs = param_refs(f.backbone);
  auto grads = param_refs(g.d_backbone);
  for (auto &r : param_refs(f.head))
    refs.push_back(r);
  for (auto &r : param_refs(g.d_head))
    grads.push_back(r);
  const auto res = testing::check_gradients(
      refs, grads, [&] { return objective_loss(f.backbone, f.head, f.batch); }, kGradStep,
      kGradFloor);
  worst = fmt::format("{}[{}] of {}", res.worst_path, res.worst_index, res.checked);
  return res.max_rel_error;
}

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  const char *names[] = {"reconstruction", "classification", "segmentation"};
  bool ok = true;
  std::string detail;
  for (int k = 0; k < 3; ++k) {
    std::string worst;
    const double err = gradient_error(k, worst);
    ok &= err <= kGradTolerance;
    detail += fmt::format("{} {:.2e} ({}); ", names[k], err, worst);
  }
  const double secs = seconds_since(t0);
  ok &= secs < kGradSeconds;
  return {ok, detail + fmt::format("limit {:.0e}, {:.1f} s", kGradTolerance, secs)};
}

// ---------------------------------------------------------------------------

Outcome mask_properties() {
  const ModelConfig cfg;
  const int np = cfg.num_patches();
  const int want = static_cast<int>(std::lround(0.5 * np));
  std::mt19937_64 rng(7);
  int bad = 0;
  for (int i = 0; i < kMaskDraws; ++i) {
    const auto m = sample_mask(rng, np, 0.5);
    bad += m.count() != want;
  }

  // Bit-invariance of the reconstruction loss to unmasked pixels.
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int variant_failures = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Matrix<double> pred(np, cfg.patch_dim()), target(np, cfg.patch_dim());
    for (Eigen::Index i = 0; i < pred.size(); ++i) {
      pred.data()[i] = u(rng);
      target.data()[i] = u(rng);
    }
    const auto mask = sample_mask(rng, np, 0.5);
    const double base = mim_loss(pred, target, mask);
    Matrix<double> p2 = pred, t2 = target;
    for (int r = 0; r < np; ++r)
      if (!mask.masked(r)) {
        p2.row(r).setConstant(u(rng) * 100.0);
        t2.row(r).setConstant(-u(rng));
      }
    const double moved = mim_loss(p2, t2, mask);
    variant_failures += std::memcmp(&base, &moved, sizeof(double)) != 0;
  }
  return {bad == 0 && variant_failures == 0,
          fmt::format("{} of {} draws with popcount != {} (of {} patches); {} of 100 perturbations "
                      "changed the loss bits",
                      bad, kMaskDraws, want, np, variant_failures)};
}

// ---------------------------------------------------------------------------

Outcome metric_oracle() {
  std::mt19937_64 rng(11);
  double worst = 0.0;
  for (int trial = 0; trial < kMetricPairs; ++trial) {
    const Trimap p = testing::random_trimap(8, 8, rng), t = testing::random_trimap(8, 8, rng);
    ConfusionCounts c;
    accumulate(p, t, c);
    const auto r = miou(c);
    // Set-based reference.
    std::array<std::set<int>, 3> ps, ts;
    int correct = 0;
    for (int i = 0; i < 64; ++i) {
      ps[p.labels[i]].insert(i);
      ts[t.labels[i]].insert(i);
      correct += p.labels[i] == t.labels[i];
    }
    double sum = 0;
    int used = 0;
    for (int k = 0; k < 3; ++k) {
      std::set<int> inter, uni = ps[k];
      for (int x : ps[k])
        if (ts[k].count(x))
          inter.insert(x);
      uni.insert(ts[k].begin(), ts[k].end());
      if (!uni.empty()) {
        sum += 100.0 * static_cast<double>(inter.size()) / static_cast<double>(uni.size());
        ++used;
      }
    }
    const double acc = 100.0 * correct / 64.0, mi = sum / used;
    worst = std::max({worst, std::abs(r.accuracy - acc) / acc, std::abs(r.miou - mi) / mi});
  }
  ConfusionCounts c;
  Trimap pred(2, 2), truth(2, 2);
  pred.labels = {0, 1, 1, 1};
  truth.labels = {0, 0, 1, 1};
  accumulate(pred, truth, c);
  const double worked = miou(c).miou;
  return {worst <= kMetricRelTolerance && std::abs(worked - 175.0 / 3.0) < 1e-12,
          fmt::format("max relative error {:.1e} over {} pairs (limit {:.0e}); 2x2 case {:.2f}%",
                      worst, kMetricPairs, kMetricRelTolerance, worked)};
}

// ---------------------------------------------------------------------------

double one_step(double theta, double g, double wd, double lr) {
  Matrix<double> t(1, 1), d(1, 1);
  t(0, 0) = theta;
  d(0, 0) = g;
  OptimConfig cfg;
  cfg.weight_decay = wd;
  auto state = OptimState<double>::zeros({param_ref<double>("w", t)});
  optimizer_step<double>({param_ref<double>("w", t)}, {param_ref<double>("w", d)}, state, cfg, lr);
  return t(0, 0);
}

Outcome optimizer_closed_forms() {
  // Bias-corrected first step: theta - lr * (sign(g) + wd * theta) up to eps.
  const double a = one_step(1.0, 1.0, 0.0, 0.1);
  const double b = one_step(1.0, 0.0, 0.05, 0.1);
  const double c = one_step(2.0, -3.0, 0.01, 0.01);
  const double c_want = 2.0 - 0.01 * (-1.0 + 0.01 * 2.0);
  const bool steps = std::abs(a - 0.9) <= kOptimTolerance && std::abs(b - 0.995) <= kOptimTolerance &&
                     std::abs(c - c_want) <= kOptimTolerance;

  const auto pre = PhaseConfig::defaults(Phase::pretrain);
  const auto fin = PhaseConfig::defaults(Phase::finetune);
  const bool sched = lr_at_epoch(pre.optim.base_lr, pre.schedule, 0) == 1e-4 &&
                     lr_at_epoch(pre.optim.base_lr, pre.schedule, 50) == 1e-5 &&
                     lr_at_epoch(pre.optim.base_lr, pre.schedule, 85) == 1e-6 &&
                     lr_at_epoch(fin.optim.base_lr, fin.schedule, 95) == 2.5e-4;
  return {steps && sched,
          fmt::format("steps {:.9f} {:.9f} {:.9f} (tol {:.0e}); lr pretrain {:g}/{:g}/{:g}, "
                      "finetune@95 {:g}",
                      a, b, c, kOptimTolerance, lr_at_epoch(1e-4, pre.schedule, 0),
                      lr_at_epoch(1e-4, pre.schedule, 50), lr_at_epoch(1e-4, pre.schedule, 85),
                      lr_at_epoch(fin.optim.base_lr, fin.schedule, 95))};
}

// ---------------------------------------------------------------------------

bool bit_equal(std::vector<ParamRef<float>> x, std::vector<ParamRef<float>> y) {
  if (x.size() != y.size())
    return false;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i].path != y[i].path || x[i].size() != y[i].size() ||
        std::memcmp(x[i].data, y[i].data, sizeof(float) * x[i].size()) != 0)
      return false;
  return true;
}

Outcome checkpoint_round_trip() {
  const ModelConfig cfg;
  std::mt19937_64 rng(13);
  Checkpoint ckpt;
  ckpt.backbone = init_backbone<float>(cfg, rng);
  testing::jitter(param_refs(ckpt.backbone), rng, 0.5);
  ckpt.head = Head<float>(ClsHead<float>::zeros(cfg, 2));
  testing::jitter(param_refs(*ckpt.head), rng, 0.5);
  ckpt.manifest.phase = "intermediate";

  testing::ScratchDir dir("accept_ckpt");
  const auto file = dir.path() / "model.ckpt";
  save_checkpoint(file, ckpt);
  auto back = load_checkpoint(file);
  const bool exact = bit_equal(param_refs(ckpt.backbone), param_refs(back.backbone)) &&
                     bit_equal(param_refs(*ckpt.head), param_refs(*back.head));
  const std::int64_t with_cls = count_parameters(back.backbone) + count_parameters(*back.head);
  back.head = init_seg_head<float>(cfg, rng); // swap for fine-tuning
  const std::int64_t with_seg = count_parameters(back.backbone) + count_parameters(*back.head);
  return {exact && with_cls == kWithTwoOutputHead && with_seg == kWithSegHead,
          fmt::format("bit-exact {}; loaded with 2-output head {}, after swap to seg head {}",
                      exact ? "yes" : "no", with_cls, with_seg)};
}

// ---------------------------------------------------------------------------

Outcome desk_scale(const fs::path &store_dir) {
  const auto t0 = Clock::now();
  const auto plan = load_plan(std::string(VINY_SOURCE_DIR) + "/plans/desk.yaml");
  fs::remove_all(store_dir);
  RunStore store(store_dir);
  const auto summary = run_grid(plan, store);
  const double secs = seconds_since(t0);

  std::map<std::tuple<std::size_t, std::size_t, int>, RunRecord> by;
  for (auto &r : store.plan_records())
    by.emplace(std::tuple{r.key.pretrain_size, r.key.finetune_size, r.key.run}, r);
  auto miou_of = [&](std::size_t p, std::size_t f, int run) {
    const auto it = by.find({p, f, run});
    return it == by.end() ? std::nan("") : it->second.metrics.miou;
  };

  const auto &ps = plan.pretrain_sizes;
  auto fs_sorted = plan.finetune_sizes;
  std::sort(fs_sorted.begin(), fs_sorted.end());
  const std::size_t f_small = fs_sorted.front();
  const std::size_t p_big = *std::max_element(ps.begin(), ps.end());

  int seeds_a = 0, seeds_b = 0;
  std::string detail_b;
  for (int run = 0; run < plan.runs_per_cell; ++run) {
    bool increasing = true;
    for (std::size_t p : ps)
      for (std::size_t i = 1; i < fs_sorted.size(); ++i)
        increasing &= miou_of(p, fs_sorted[i], run) > miou_of(p, fs_sorted[i - 1], run);
    seeds_a += increasing;
    const double diff = miou_of(p_big, f_small, run) - miou_of(0, f_small, run);
    seeds_b += diff >= -kDeskMarginPoints;
    detail_b += fmt::format("{}{:+.2f}", run ? "/" : "", diff);
  }

  // (c) every pre-training run: final-epoch loss below the ratio of the first.
  bool loss_ok = true;
  double worst_ratio = 0.0;
  std::set<std::string> seen;
  for (const auto &[k, r] : by) {
    if (r.key.pretrain_size == 0 || !seen.insert(r.checkpoints.at("pretrain")).second)
      continue;
    std::vector<double> losses;
    for (const auto &e : r.history)
      if (e.phase == Phase::pretrain)
        losses.push_back(e.mean_loss);
    const double ratio = losses.empty() ? INFINITY : losses.back() / losses.front();
    worst_ratio = std::max(worst_ratio, ratio);
    loss_ok &= ratio < kDeskLossRatio;
  }
  loss_ok &= !seen.empty();

  for (const auto &[k, r] : by)
    std::cout << fmt::format("    {:<24} mIoU {:6.2f}  accuracy {:6.2f}\n", r.key.label(),
                             r.metrics.miou, r.metrics.accuracy);
  const bool a_ok = seeds_a >= kDeskMinSeeds, b_ok = seeds_b >= kDeskMinSeeds;
  return {summary.failed == 0 && a_ok && b_ok && loss_ok,
          fmt::format("(a) monotone in {}/{} seeds {}; (b) p={} minus p=0 at f={}: {} points, {}/{} "
                      "within -{:.1f} {}; (c) worst final/first MIM loss {:.3f} (< {:.2f}) {}; "
                      "{} cells, {} failed, {:.0f} s",
                      seeds_a, plan.runs_per_cell, a_ok ? "ok" : "FAIL", p_big, f_small, detail_b,
                      seeds_b, plan.runs_per_cell, kDeskMarginPoints, b_ok ? "ok" : "FAIL",
                      worst_ratio, kDeskLossRatio, loss_ok ? "ok" : "FAIL", summary.cells,
                      summary.failed, secs)};
}

// ---------------------------------------------------------------------------

Outcome grid_bookkeeping() {
  const auto full = load_plan(std::string(VINY_SOURCE_DIR) + "/plans/full.yaml");
  const std::size_t cells = enumerate_cells(full).size();

  testing::ScratchDir dir("accept_grid");
  auto plan = testing::tiny_plan();
  plan.pretrain_sizes = {0, 12};
  plan.finetune_sizes = {4, 8};
  RunStore store(dir.path() / "store");
  const auto first = run_grid(plan, store);
  const CellKey victim{12, false, 8, 0};
  const auto before = store.read_record(cell_hash(plan, victim));
  store.remove_record(cell_hash(plan, victim));
  RunOptions resume;
  resume.resume = true;
  const auto again = run_grid(plan, store, resume);
  const auto after = store.read_record(cell_hash(plan, victim));
  const bool one = again.trained == 1 && again.trained_labels == std::vector{victim.label()} &&
                   before && after && before->metrics.miou == after->metrics.miou;

  // Known means injected into a fresh store.
  RunStore injected(dir.path() / "injected");
  auto grid = parse_plan("name: injected\ngrid: {pretrain_sizes: [45000], intermediate: both, "
                         "finetune_sizes: [250]}\nruns_per_cell: 3\n");
  injected.write_plan(grid);
  for (const auto &k : enumerate_cells(grid)) {
    RunRecord r;
    r.key = k;
    r.config_hash = cell_hash(grid, k);
    r.metrics.miou = k.intermediate ? 48.92 : 52.73;
    r.metrics.accuracy = 70.0;
    r.metrics.included = {true, true, true};
    injected.write_record(r);
  }
  const auto p = emit_plot(injected, PlotKind::delta);
  const double delta = p.series.at(0).mean.at(0);
  const bool delta_ok = std::abs(delta - (-3.81)) <= kDeltaTolerance &&
                        p.csv.find(",-3.81,") != std::string::npos;
  return {cells == 144 && first.trained == 4 && one && delta_ok,
          fmt::format("full plan {} cells; resume after deleting 1 of {} retrained {} ({}); "
                      "delta at 45k/250 = {:.2f}",
                      cells, first.trained, again.trained,
                      one ? "identical metrics" : "mismatch", delta)};
}

} // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"parameter-count identity", parameter_counts},
      {"gradient correctness", gradient_correctness},
      {"mask properties", mask_properties},
      {"metric oracle", metric_oracle},
      {"optimizer/schedule closed forms", optimizer_closed_forms},
      {"checkpoint round-trip", checkpoint_round_trip},
      {"desk-scale behavioral run", [] { return desk_scale(VINY_ACCEPTANCE_STORE); }},
      {"grid bookkeeping", grid_bookkeeping},
  };
  int failed = 0;
  for (const auto &[name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception &e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS  " : "FAIL  ") << name << ": " << o.detail << std::endl;
  }
  std::cout << fmt::format("{} of {} criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
