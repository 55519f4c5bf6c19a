// SPDX-License-Identifier: Apache-2.0
#include "viny/store.hpp"

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <csignal>
#include <fstream>
#include <sstream>
#include <thread>

#include <fcntl.h>
#include <unistd.h>

#include <fmt/format.h>

#include "json.hpp"
#include "viny/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace viny {

namespace {

json nan_as_null(double v) { return std::isnan(v) ? json() : json(v); }
double null_as_nan(const json &j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

json key_json(const CellKey &k) {
  return {{"pretrain_size", k.pretrain_size},
          {"intermediate", k.intermediate},
          {"finetune_size", k.finetune_size},
          {"run", k.run}};
}

CellKey key_from(const json &j) {
  CellKey k;
  k.pretrain_size = j.at("pretrain_size").get<std::size_t>();
  k.intermediate = j.at("intermediate").get<bool>();
  k.finetune_size = j.at("finetune_size").get<std::size_t>();
  k.run = j.at("run").get<int>();
  return k;
}

const char *kClassNames[kTrimapClasses] = {"fg", "bg", "unknown"};

} // namespace

std::string record_to_json(const RunRecord &r) {
  json history = json::array();
  for (const auto &e : r.history)
    history.push_back({{"epoch", e.epoch},
                       {"phase", phase_name(e.phase)},
                       {"lr", e.lr},
                       {"mean_loss", e.mean_loss}});
  json metrics = {{"accuracy", r.metrics.accuracy},
                  {"miou", r.metrics.miou},
                  {"n_pixels", r.metrics.n_pixels}};
  for (int c = 0; c < kTrimapClasses; ++c) {
    const std::string n = kClassNames[c];
    metrics["iou_" + n] = nan_as_null(r.metrics.per_class_iou[c]);
    metrics["precision_" + n] = nan_as_null(r.metrics.per_class_precision[c]);
    metrics["recall_" + n] = nan_as_null(r.metrics.per_class_recall[c]);
    metrics["included_" + n] = r.metrics.included[c];
  }
  const json j = {{"status", "complete"},
                  {"label", r.key.label()},
                  {"key", key_json(r.key)},
                  {"seeds",
                   {{"init", r.seeds.init},
                    {"pretrain", r.seeds.pretrain},
                    {"intermediate", r.seeds.intermediate},
                    {"finetune", r.seeds.finetune},
                    {"subset", r.seeds.subset}}},
                  {"config_hash", r.config_hash},
                  {"plan_name", r.plan_name},
                  {"history", history},
                  {"wall_clock", r.wall_clock},
                  {"checkpoints", r.checkpoints},
                  {"train_samples", r.train_samples},
                  {"test_samples", r.test_samples},
                  {"metrics", metrics}};
  return j.dump(2) + "\n";
}

RunRecord record_from_json(const std::string &text) {
  try {
    const json j = json::parse(text);
    RunRecord r;
    r.key = key_from(j.at("key"));
    const auto &s = j.at("seeds");
    r.seeds = {s.at("init").get<std::uint64_t>(), s.at("pretrain").get<std::uint64_t>(),
               s.at("intermediate").get<std::uint64_t>(), s.at("finetune").get<std::uint64_t>(),
               s.at("subset").get<std::uint64_t>()};
    r.config_hash = j.at("config_hash").get<std::string>();
    r.plan_name = j.at("plan_name").get<std::string>();
    for (const auto &e : j.at("history"))
      r.history.push_back({e.at("epoch").get<int>(), parse_phase(e.at("phase").get<std::string>()),
                           e.at("lr").get<double>(), e.at("mean_loss").get<double>()});
    r.wall_clock = j.at("wall_clock").get<std::map<std::string, double>>();
    r.checkpoints = j.at("checkpoints").get<std::map<std::string, std::string>>();
    r.train_samples = j.at("train_samples").get<std::size_t>();
    r.test_samples = j.at("test_samples").get<std::size_t>();
    const auto &m = j.at("metrics");
    r.metrics.accuracy = m.at("accuracy").get<double>();
    r.metrics.miou = m.at("miou").get<double>();
    r.metrics.n_pixels = m.at("n_pixels").get<std::uint64_t>();
    for (int c = 0; c < kTrimapClasses; ++c) {
      const std::string n = kClassNames[c];
      r.metrics.per_class_iou[c] = null_as_nan(m.at("iou_" + n));
      r.metrics.per_class_precision[c] = null_as_nan(m.at("precision_" + n));
      r.metrics.per_class_recall[c] = null_as_nan(m.at("recall_" + n));
      r.metrics.included[c] = m.at("included_" + n).get<bool>();
    }
    return r;
  } catch (const json::exception &e) {
    throw StoreError(std::string("malformed run record: ") + e.what());
  } catch (const std::invalid_argument &e) {
    throw StoreError(std::string("malformed run record: ") + e.what());
  }
}

bool RunRecord::operator==(const RunRecord &other) const {
  return record_to_json(*this) == record_to_json(other);
}

std::string history_csv(const std::vector<EpochLog> &history) {
  std::string out = "epoch,phase,lr,mean_loss\n";
  for (const auto &e : history)
    out += fmt::format("{},{},{},{}\n", e.epoch, phase_name(e.phase), e.lr, e.mean_loss);
  return out;
}

void write_file_atomic(const fs::path &file, const std::string &bytes) {
  if (file.has_parent_path())
    fs::create_directories(file.parent_path());
  const fs::path tmp = file.string() + fmt::format(".tmp{}", ::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw StoreError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
      throw StoreError("short write to " + tmp.string());
  }
  fs::rename(tmp, file);
}

std::string read_file(const fs::path &file) {
  std::ifstream in(file, std::ios::binary);
  if (!in)
    throw StoreError("cannot read " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- locks -------------------------------------------------------------

StoreLock::~StoreLock() { release(); }

StoreLock::StoreLock(StoreLock &&other) noexcept : file_(std::move(other.file_)) {
  other.file_.clear();
}

StoreLock &StoreLock::operator=(StoreLock &&other) noexcept {
  if (this != &other) {
    release();
    file_ = std::move(other.file_);
    other.file_.clear();
  }
  return *this;
}

void StoreLock::release() {
  if (!file_.empty()) {
    std::error_code ec;
    fs::remove(file_, ec);
    file_.clear();
  }
}

namespace {

bool owner_alive(const fs::path &lock_file) {
  std::ifstream in(lock_file);
  long pid = 0;
  if (!(in >> pid) || pid <= 0)
    return false;
  return ::kill(static_cast<pid_t>(pid), 0) == 0 || errno == EPERM;
}

} // namespace

RunStore::RunStore(fs::path root) : root_(std::move(root)) {}

fs::path RunStore::checkpoint_path(const std::string &stage, const std::string &hash) const {
  return root_ / "checkpoints" / (stage + "-" + hash + ".ckpt");
}

std::string RunStore::relative(const fs::path &p) const {
  return p.lexically_relative(root_).generic_string();
}

StoreLock RunStore::try_lock(const std::string &name) const {
  const fs::path dir = root_ / "locks";
  fs::create_directories(dir);
  const fs::path file = dir / (name + ".lock");
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(file.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
      ::close(fd);
      return StoreLock(file);
    }
    if (errno != EEXIST)
      throw StoreError("cannot create lock " + file.string());
    if (owner_alive(file))
      return {};
    std::error_code ec;
    fs::remove(file, ec); // stale
  }
  return {};
}

StoreLock RunStore::lock(const std::string &name) const {
  for (;;) {
    if (auto l = try_lock(name); l.held())
      return l;
    std::this_thread::sleep_for(std::chrono::milliseconds(200));
  }
}

// ---- plan ----------------------------------------------------------------

void RunStore::write_plan(const ExperimentPlan &plan) {
  json j = json::parse(plan_json(plan));
  json cells = json::array();
  for (const auto &k : enumerate_cells(plan))
    cells.push_back({{"label", k.label()}, {"key", key_json(k)}, {"hash", cell_hash(plan, k)}});
  j["cells"] = cells;
  write_file_atomic(root_ / "plan.json", j.dump(2) + "\n");
}

bool RunStore::has_plan() const { return fs::exists(root_ / "plan.json"); }

namespace {

json load_plan_json(const fs::path &root) {
  const fs::path file = root / "plan.json";
  if (!fs::exists(file))
    throw StoreError("no plan.json in " + root.string() + " (not a run store?)");
  try {
    return json::parse(read_file(file));
  } catch (const json::exception &e) {
    throw StoreError("malformed plan.json: " + std::string(e.what()));
  }
}

} // namespace

std::vector<PlanCell> RunStore::plan_cells() const {
  const json j = load_plan_json(root_);
  std::vector<PlanCell> out;
  try {
    for (const auto &c : j.at("cells"))
      out.push_back({key_from(c.at("key")), c.at("hash").get<std::string>()});
  } catch (const json::exception &e) {
    throw StoreError("malformed plan.json: " + std::string(e.what()));
  }
  return out;
}

std::string RunStore::plan_name() const {
  return load_plan_json(root_).value("name", std::string("plan"));
}

// ---- records -------------------------------------------------------------

bool RunStore::has_record(const std::string &hash) const {
  return fs::exists(root_ / "records" / (hash + ".json"));
}

std::optional<RunRecord> RunStore::read_record(const std::string &hash) const {
  const fs::path file = root_ / "records" / (hash + ".json");
  if (!fs::exists(file))
    return std::nullopt;
  try {
    return record_from_json(read_file(file));
  } catch (const StoreError &e) {
    throw StoreError(file.string() + ": " + e.what());
  }
}

void RunStore::write_record(const RunRecord &r) {
  write_file_atomic(root_ / "histories" / (r.config_hash + ".csv"), history_csv(r.history));
  write_file_atomic(root_ / "records" / (r.config_hash + ".json"), record_to_json(r));
  std::error_code ec;
  fs::remove(root_ / "failed" / (r.config_hash + ".json"), ec);
}

bool RunStore::remove_record(const std::string &hash) {
  std::error_code ec;
  fs::remove(root_ / "histories" / (hash + ".csv"), ec);
  return fs::remove(root_ / "records" / (hash + ".json"), ec);
}

std::vector<RunRecord> RunStore::plan_records() const {
  std::vector<RunRecord> out;
  for (const auto &c : plan_cells())
    if (auto r = read_record(c.hash))
      out.push_back(std::move(*r));
  return out;
}

std::vector<RunRecord> RunStore::all_records() const {
  std::vector<RunRecord> out;
  const fs::path dir = root_ / "records";
  if (!fs::exists(dir))
    return out;
  std::vector<fs::path> files;
  for (const auto &e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto &f : files)
    out.push_back(record_from_json(read_file(f)));
  return out;
}

void RunStore::write_failure(const FailureRecord &f) {
  const json j = {{"status", "failed"},
                  {"label", f.key.label()},
                  {"key", key_json(f.key)},
                  {"config_hash", f.config_hash},
                  {"phase", f.phase},
                  {"category", f.category},
                  {"message", f.message}};
  write_file_atomic(root_ / "failed" / (f.config_hash + ".json"), j.dump(2) + "\n");
}

std::vector<FailureRecord> RunStore::failures() const {
  std::vector<FailureRecord> out;
  const fs::path dir = root_ / "failed";
  if (!fs::exists(dir))
    return out;
  std::vector<fs::path> files;
  for (const auto &e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto &file : files) {
    try {
      const json j = json::parse(read_file(file));
      out.push_back({key_from(j.at("key")), j.at("config_hash").get<std::string>(),
                     j.at("phase").get<std::string>(), j.at("category").get<std::string>(),
                     j.at("message").get<std::string>()});
    } catch (const json::exception &e) {
      throw StoreError(file.string() + ": " + e.what());
    }
  }
  return out;
}

} // namespace viny
