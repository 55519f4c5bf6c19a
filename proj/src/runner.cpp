// SPDX-License-Identifier: Apache-2.0
#include "viny/runner.hpp"

#include <chrono>
#include <map>
#include <set>

#include <sys/wait.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include "json.hpp"
#include "viny/checkpoint.hpp"
#include "viny/data.hpp"
#include "viny/errors.hpp"
#include "viny/seed.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace viny {

std::string error_category(const std::exception &e) {
  if (dynamic_cast<const PlanError *>(&e))
    return "plan";
  if (dynamic_cast<const DataError *>(&e))
    return "data";
  if (dynamic_cast<const StoreError *>(&e) || dynamic_cast<const fs::filesystem_error *>(&e))
    return "store";
  if (dynamic_cast<const NumericError *>(&e))
    return "numeric";
  if (dynamic_cast<const CheckpointError *>(&e))
    return "checkpoint";
  if (dynamic_cast<const ShapeError *>(&e))
    return "shape";
  return "internal";
}

MetricsReport evaluate(const BackboneParams<float> &backbone, const SegHead<float> &head,
                       std::span<const Sample> test, const MetricsOptions &options, int batch) {
  ConfusionCounts counts;
  std::vector<Image> images;
  for (std::size_t start = 0; start < test.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(test.size(), start + static_cast<std::size_t>(batch));
    images.clear();
    for (std::size_t i = start; i < end; ++i)
      images.push_back(test[i].image);
    const auto features = encode<float>(backbone, images);
    for (std::size_t i = start; i < end; ++i) {
      if (!test[i].has_trimap())
        throw DataError("evaluation sample without a trimap");
      const auto logits = segment_logits(features, static_cast<int>(i - start), head, backbone.config);
      accumulate(predict_trimap(logits), test[i].trimap(), counts);
    }
  }
  return miou(counts, options);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::uint64_t tag(std::string_view s) { return fnv1a64(s); }

/// A backbone produced by an earlier stage, with what it took to make it.
struct Stage {
  BackboneParams<float> backbone;
  std::vector<EpochLog> history;
  std::map<std::string, double> wall_clock;
  std::map<std::string, std::string> checkpoints;
};

json history_json(const std::vector<EpochLog> &h) {
  json a = json::array();
  for (const auto &e : h)
    a.push_back({e.epoch, phase_name(e.phase), e.lr, e.mean_loss});
  return a;
}

std::vector<EpochLog> history_from(const json &a) {
  std::vector<EpochLog> h;
  for (const auto &e : a)
    h.push_back({e[0].get<int>(), parse_phase(e[1].get<std::string>()), e[2].get<double>(),
                 e[3].get<double>()});
  return h;
}

class CellFailure : public std::runtime_error {
public:
  CellFailure(std::string phase, std::string category, const std::string &message)
      : std::runtime_error(message), phase(std::move(phase)), category(std::move(category)) {}
  std::string phase;
  std::string category;
};

class GridRunner {
public:
  GridRunner(const ExperimentPlan &plan, RunStore &store, const RunOptions &options)
      : plan_(plan), store_(store), options_(options) {}

  /// Loads every dataset the plan needs; DataError escapes.
  void prepare() {
    const int size = plan_.model.image_size;
    LoadReport report;
    const SampleList corpus = load_dataset(plan_.finetune_data, size, &report, options_.data_root);
    Split split = split_holdout(corpus, plan_.holdout_size, plan_.holdout_seed);
    finetune_pool_ = std::move(split.train);
    test_ = std::move(split.test);
    for (std::size_t f : plan_.finetune_sizes)
      if (f > finetune_pool_.size())
        throw DataError("fine-tuning size " + std::to_string(f) + " exceeds the " +
                        std::to_string(finetune_pool_.size()) + " training samples available");
    spdlog::info("fine-tuning pool {} samples, holdout {}", finetune_pool_.size(), test_.size());

    const std::size_t largest =
        *std::max_element(plan_.pretrain_sizes.begin(), plan_.pretrain_sizes.end());
    if (largest > 0) {
      DatasetSpec spec = plan_.pretrain_data;
      spec.size_limit = largest;
      pretrain_all_ = load_dataset(spec, size, nullptr, options_.data_root);
    }
    if (plan_.intermediate != IntermediateMode::off) {
      intermediate_ = load_dataset(plan_.intermediate_data, size, nullptr, options_.data_root);
      for (const auto &s : intermediate_)
        if (!s.has_class() || s.class_id() < 0 || s.class_id() >= kIntermediateClasses)
          throw DataError("intermediate data needs class labels in [0, " +
                          std::to_string(kIntermediateClasses) + ")");
    }
  }

  /// Trains cells until none is left that this process can take.
  void work() {
    for (const auto &key : enumerate_cells(plan_)) {
      const std::string hash = cell_hash(plan_, key);
      if (store_.has_record(hash))
        continue;
      StoreLock lock = store_.try_lock("cell-" + hash);
      if (!lock.held() || store_.has_record(hash))
        continue;
      run_cell(key, hash);
    }
  }

private:
  /// Pre-training images for size p. Synthetic samples are prefixes of the
  /// largest set; folder sources are subsampled with the data seed.
  SampleList pretrain_data(std::size_t p) const {
    if (plan_.pretrain_data.synthetic())
      return SampleList(pretrain_all_.begin(), pretrain_all_.begin() + static_cast<long>(p));
    if (p == pretrain_all_.size())
      return pretrain_all_;
    return subsample(pretrain_all_, p, plan_.pretrain_data.seed);
  }

  BackboneParams<float> fresh_backbone(const CellSeeds &seeds, std::mt19937_64 &rng) const {
    rng.seed(seeds.init);
    return init_backbone<float>(plan_.model, rng);
  }

  Stage load_stage(const fs::path &ckpt) const {
    Stage s;
    s.backbone = load_checkpoint(ckpt).backbone;
    const json side = json::parse(read_file(fs::path(ckpt).replace_extension(".json")));
    s.history = history_from(side.at("history"));
    s.wall_clock = side.at("wall_clock").get<std::map<std::string, double>>();
    s.checkpoints = side.at("checkpoints").get<std::map<std::string, std::string>>();
    return s;
  }

  void save_stage(const fs::path &ckpt, const Stage &s, const Head<float> &head,
                  const std::string &phase, int epochs, std::uint64_t seed) const {
    Checkpoint c;
    c.manifest.config = plan_.model;
    c.manifest.phase = phase;
    c.manifest.epoch = epochs;
    c.manifest.seed = seed;
    c.backbone = s.backbone;
    c.head = head;
    // Sidecar first: a checkpoint without its sidecar is never observed.
    const json side = {{"history", history_json(s.history)},
                       {"wall_clock", s.wall_clock},
                       {"checkpoints", s.checkpoints}};
    write_file_atomic(fs::path(ckpt).replace_extension(".json"), side.dump(2) + "\n");
    save_checkpoint(ckpt, c);
  }

  template <typename F>
  auto guarded(const std::string &phase, F &&body) {
    try {
      return body();
    } catch (const CellFailure &) {
      throw;
    } catch (const std::exception &e) {
      throw CellFailure(phase, error_category(e), e.what());
    }
  }

  Stage pretrained(const CellKey &key, const CellSeeds &seeds) {
    const std::string hash = pretrain_hash(plan_, key);
    const fs::path ckpt = store_.checkpoint_path("pretrain", hash);
    if (auto it = stage_failures_.find(hash); it != stage_failures_.end())
      throw it->second;
    try {
      return guarded("pretrain", [&] {
        if (fs::exists(ckpt))
          return load_stage(ckpt);
        StoreLock lock = store_.lock("pretrain-" + hash);
        if (fs::exists(ckpt))
          return load_stage(ckpt);
        spdlog::info("pre-training p={} seed {:016x}", key.pretrain_size, seeds.pretrain);
        const auto t0 = Clock::now();
        std::mt19937_64 rng;
        Stage s;
        s.backbone = fresh_backbone(seeds, rng);
        Head<float> head = init_mim_head<float>(plan_.model, rng);
        std::mt19937_64 train_rng(seeds.pretrain);
        const SampleList data = pretrain_data(key.pretrain_size);
        s.history = train_phase<float>(s.backbone, head, data, plan_.pretrain, train_rng);
        s.wall_clock["pretrain"] = seconds_since(t0);
        s.checkpoints["pretrain"] = store_.relative(ckpt);
        save_stage(ckpt, s, head, "pretrain", plan_.pretrain.epochs, seeds.pretrain);
        return s;
      });
    } catch (const CellFailure &f) {
      stage_failures_.emplace(hash, f);
      throw;
    }
  }

  Stage intermediate(const CellKey &key, const CellSeeds &seeds) {
    const std::string hash = intermediate_hash(plan_, key);
    const fs::path ckpt = store_.checkpoint_path("intermediate", hash);
    if (auto it = stage_failures_.find(hash); it != stage_failures_.end())
      throw it->second;
    try {
      if (fs::exists(ckpt))
        return guarded("intermediate", [&] { return load_stage(ckpt); });
      StoreLock lock = store_.lock("intermediate-" + hash);
      if (fs::exists(ckpt))
        return guarded("intermediate", [&] { return load_stage(ckpt); });
      Stage s;
      if (key.pretrain_size > 0) {
        s = pretrained(key, seeds);
      } else {
        std::mt19937_64 rng;
        s.backbone = fresh_backbone(seeds, rng);
      }
      return guarded("intermediate", [&] {
        spdlog::info("intermediate p={} run {} seed {:016x}", key.pretrain_size, key.run,
                     seeds.intermediate);
        const auto t0 = Clock::now();
        std::mt19937_64 head_rng(mix_seed({seeds.intermediate, tag("head")}));
        Head<float> head = init_cls_head<float>(plan_.model, head_rng);
        std::mt19937_64 train_rng(seeds.intermediate);
        auto h = train_phase<float>(s.backbone, head, intermediate_, plan_.intermediate_phase,
                                    train_rng);
        s.history.insert(s.history.end(), h.begin(), h.end());
        s.wall_clock["intermediate"] = seconds_since(t0);
        s.checkpoints["intermediate"] = store_.relative(ckpt);
        save_stage(ckpt, s, head, "intermediate", plan_.intermediate_phase.epochs,
                   seeds.intermediate);
        return s;
      });
    } catch (const CellFailure &f) {
      stage_failures_.emplace(hash, f);
      throw;
    }
  }

  void run_cell(const CellKey &key, const std::string &hash) {
    const CellSeeds seeds = derive_seeds(plan_, key);
    spdlog::info("cell {} ({})", key.label(), hash);
    try {
      Stage s;
      if (key.intermediate) {
        s = intermediate(key, seeds);
      } else if (key.pretrain_size > 0) {
        s = pretrained(key, seeds);
      } else {
        std::mt19937_64 rng;
        s.backbone = fresh_backbone(seeds, rng);
      }

      RunRecord r = guarded("finetune", [&] {
        const auto t0 = Clock::now();
        const SampleList train = subsample(finetune_pool_, key.finetune_size, seeds.subset);
        std::mt19937_64 head_rng(mix_seed({seeds.finetune, tag("head")}));
        Head<float> head = init_seg_head<float>(plan_.model, head_rng);
        std::mt19937_64 train_rng(seeds.finetune);
        auto h = train_phase<float>(s.backbone, head, train, plan_.finetune, train_rng);
        RunRecord rec;
        rec.key = key;
        rec.seeds = seeds;
        rec.config_hash = hash;
        rec.plan_name = plan_.name;
        rec.history = s.history;
        rec.history.insert(rec.history.end(), h.begin(), h.end());
        rec.wall_clock = s.wall_clock;
        rec.wall_clock["finetune"] = seconds_since(t0);
        rec.checkpoints = s.checkpoints;
        rec.train_samples = train.size();
        if (plan_.save_final_checkpoints) {
          const fs::path ckpt = store_.checkpoint_path("final", hash);
          Checkpoint c;
          c.manifest.config = plan_.model;
          c.manifest.phase = "finetune";
          c.manifest.epoch = plan_.finetune.epochs;
          c.manifest.seed = seeds.finetune;
          c.backbone = s.backbone;
          c.head = head;
          save_checkpoint(ckpt, c);
          rec.checkpoints["finetune"] = store_.relative(ckpt);
        }
        const auto t1 = Clock::now();
        rec.metrics = evaluate(s.backbone, std::get<SegHead<float>>(head), test_, plan_.metrics);
        rec.test_samples = test_.size();
        rec.wall_clock["evaluate"] = seconds_since(t1);
        return rec;
      });
      store_.write_record(r);
      spdlog::info("cell {} done: accuracy {:.2f} mIoU {:.2f}", key.label(), r.metrics.accuracy,
                   r.metrics.miou);
    } catch (const CellFailure &f) {
      spdlog::error("cell {} failed in {}: {}", key.label(), f.phase, f.what());
      store_.write_failure({key, hash, f.phase, f.category, f.what()});
    }
  }

  const ExperimentPlan &plan_;
  RunStore &store_;
  const RunOptions &options_;
  SampleList finetune_pool_, test_, pretrain_all_, intermediate_;
  std::map<std::string, CellFailure> stage_failures_;
};

} // namespace

GridSummary run_grid(const ExperimentPlan &plan, RunStore &store, const RunOptions &options) {
  plan.validate();
  const auto cells = enumerate_cells(plan);
  std::set<std::string> done_before;
  for (const auto &k : cells) {
    const auto h = cell_hash(plan, k);
    if (store.has_record(h))
      done_before.insert(h);
  }
  if (!options.resume && !done_before.empty())
    throw StoreError(std::to_string(done_before.size()) + " of " + std::to_string(cells.size()) +
                     " cells already complete in " + store.root().string() +
                     "; pass --resume to continue");

  store.write_plan(plan);
  GridSummary summary;
  summary.cells = cells.size();
  summary.skipped = done_before.size();
  if (done_before.size() < cells.size()) {
    GridRunner runner(plan, store, options);
    runner.prepare();
    if (options.jobs <= 1) {
      runner.work();
    } else {
      std::vector<pid_t> children;
      for (int j = 0; j < options.jobs; ++j) {
        const pid_t pid = ::fork();
        if (pid < 0)
          throw StoreError("fork failed");
        if (pid == 0) {
          int code = 0;
          try {
            runner.work();
          } catch (const std::exception &e) {
            spdlog::error("worker {}: {}", j, e.what());
            code = 1;
          }
          std::_Exit(code);
        }
        children.push_back(pid);
      }
      bool worker_failed = false;
      for (pid_t pid : children) {
        int status = 0;
        ::waitpid(pid, &status, 0);
        worker_failed |= !WIFEXITED(status) || WEXITSTATUS(status) != 0;
      }
      if (worker_failed)
        throw StoreError("a worker process exited abnormally");
    }
  }

  std::set<std::string> failed;
  for (const auto &f : store.failures())
    failed.insert(f.config_hash);
  for (const auto &k : cells) {
    const auto h = cell_hash(plan, k);
    if (done_before.count(h))
      continue;
    if (store.has_record(h)) {
      ++summary.trained;
      summary.trained_labels.push_back(k.label());
    } else if (failed.count(h)) {
      ++summary.failed;
      summary.failed_labels.push_back(k.label());
    }
  }
  return summary;
}

} // namespace viny
