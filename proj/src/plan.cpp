// SPDX-License-Identifier: Apache-2.0
#include "viny/plan.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include "json.hpp"
#include "viny/errors.hpp"
#include "viny/seed.hpp"

namespace viny {

namespace {

std::string with_location(const std::string &message, int line, const std::string &field) {
  std::string out;
  if (line > 0)
    out += "line " + std::to_string(line) + ": ";
  if (!field.empty())
    out += field + ": ";
  return out + message;
}

} // namespace

PlanError::PlanError(const std::string &message, int line, std::string field)
    : std::runtime_error(with_location(message, line, field)), line_(line),
      field_(std::move(field)) {}

std::string intermediate_name(IntermediateMode m) {
  switch (m) {
  case IntermediateMode::off:
    return "off";
  case IntermediateMode::on:
    return "on";
  case IntermediateMode::both:
    return "both";
  }
  return "off";
}

namespace {

int line_of(const YAML::Node &n) { return n.Mark().is_null() ? 0 : n.Mark().line + 1; }

/// A mapping node whose keys are checked against an allow-list.
class Section {
public:
  Section(const YAML::Node &node, std::string path, std::initializer_list<const char *> allowed)
      : node_(node), path_(std::move(path)) {
    if (!node_ || node_.IsNull())
      return;
    if (!node_.IsMap())
      throw PlanError("expected a mapping", line_of(node_), path_);
    for (const auto &kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (std::none_of(allowed.begin(), allowed.end(), [&](const char *a) { return key == a; }))
        throw PlanError("unknown key", line_of(kv.first), field(key));
    }
  }

  bool has(const char *key) const { return node_ && node_.IsMap() && node_[key]; }
  YAML::Node operator[](const char *key) const { return node_[key]; }
  std::string field(const std::string &key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  template <typename T>
  void get(const char *key, T &out) const {
    if (!has(key))
      return;
    const YAML::Node n = node_[key];
    try {
      if constexpr (std::is_same_v<T, bool>) {
        out = n.as<bool>();
      } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
        const auto s = n.as<std::string>();
        if (!s.empty() && s[0] == '-')
          throw PlanError("expected a non-negative integer", line_of(n), field(key));
        out = n.as<T>();
      } else {
        out = n.as<T>();
      }
    } catch (const YAML::Exception &) {
      throw PlanError(std::string("expected ") + type_name<T>(), line_of(n), field(key));
    }
  }

  template <typename T>
  void get_list(const char *key, std::vector<T> &out) const {
    if (!has(key))
      return;
    const YAML::Node n = node_[key];
    if (!n.IsSequence())
      throw PlanError("expected a list", line_of(n), field(key));
    out.clear();
    for (std::size_t i = 0; i < n.size(); ++i) {
      try {
        const auto s = n[i].as<std::string>();
        if constexpr (std::is_unsigned_v<T>)
          if (!s.empty() && s[0] == '-')
            throw YAML::Exception(n[i].Mark(), "negative");
        out.push_back(n[i].as<T>());
      } catch (const YAML::Exception &) {
        throw PlanError(std::string("expected a list of ") + type_name<T>(), line_of(n[i]),
                        field(key) + "[" + std::to_string(i) + "]");
      }
    }
  }

private:
  template <typename T>
  static const char *type_name() {
    if constexpr (std::is_same_v<T, bool>)
      return "true or false";
    else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>)
      return "a non-negative integer";
    else if constexpr (std::is_integral_v<T>)
      return "an integer";
    else if constexpr (std::is_floating_point_v<T>)
      return "a number";
    else
      return "a string";
  }

  YAML::Node node_;
  std::string path_;
};

void read_model(const Section &s, ModelConfig &m) {
  s.get("image_size", m.image_size);
  s.get("patch_size", m.patch_size);
  s.get("dim", m.dim);
  s.get("depth", m.depth);
  s.get("heads", m.heads);
  s.get("head_dim", m.head_dim);
  s.get("mlp_dim", m.mlp_dim);
  s.get("channels", m.channels);
}

void read_dataset(const Section &s, DatasetSpec &d) {
  s.get("source", d.source);
  if (s.has("kind")) {
    std::string k;
    s.get("kind", k);
    try {
      d.kind = parse_kind(k);
    } catch (const std::invalid_argument &) {
      throw PlanError("expected unlabeled, classification or segmentation", line_of(s["kind"]),
                      s.field("kind"));
    }
  }
  if (s.has("size")) {
    std::size_t n = 0;
    s.get("size", n);
    d.size_limit = n;
  }
  s.get("seed", d.seed);
  s.get("class_balanced", d.class_balanced);
}

void read_phase(const Section &s, PhaseConfig &p) {
  s.get("epochs", p.epochs);
  s.get("batch_size", p.batch_size);
  s.get("lr", p.optim.base_lr);
  s.get("weight_decay", p.optim.weight_decay);
  s.get("beta1", p.optim.beta1);
  s.get("beta2", p.optim.beta2);
  s.get("eps", p.optim.eps);
  s.get("exempt_norm_and_tokens", p.optim.exempt_norm_and_tokens);
  s.get("gamma", p.schedule.gamma);
  s.get_list("milestones", p.schedule.milestones);
  s.get("mask_ratio", p.mask_ratio);
}

constexpr std::initializer_list<const char *> kPhaseKeys = {
    "epochs", "batch_size", "lr",    "weight_decay", "beta1",
    "beta2",  "eps",        "gamma", "milestones",   "mask_ratio",
    "exempt_norm_and_tokens"};
constexpr std::initializer_list<const char *> kDataKeys = {"source", "kind", "size", "seed",
                                                           "class_balanced"};

} // namespace

ExperimentPlan parse_plan(const std::string &text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException &e) {
    throw PlanError(e.msg, e.mark.line + 1);
  }
  ExperimentPlan plan;
  const Section top(root, "",
                    {"name", "seed", "runs_per_cell", "reseed_pretrain_per_run",
                     "save_final_checkpoints", "model", "grid", "data", "phases", "metrics"});
  top.get("name", plan.name);
  top.get("seed", plan.seed);
  top.get("runs_per_cell", plan.runs_per_cell);
  top.get("reseed_pretrain_per_run", plan.reseed_pretrain_per_run);
  top.get("save_final_checkpoints", plan.save_final_checkpoints);

  if (top.has("model"))
    read_model(Section(top["model"], "model",
                       {"image_size", "patch_size", "dim", "depth", "heads", "head_dim",
                        "mlp_dim", "channels"}),
               plan.model);

  const Section grid(top["grid"], "grid", {"pretrain_sizes", "intermediate", "finetune_sizes"});
  grid.get_list("pretrain_sizes", plan.pretrain_sizes);
  grid.get_list("finetune_sizes", plan.finetune_sizes);
  if (grid.has("intermediate")) {
    const YAML::Node n = grid["intermediate"];
    const std::string v = n.IsScalar() ? n.Scalar() : "";
    if (v == "on" || v == "true" || v == "yes")
      plan.intermediate = IntermediateMode::on;
    else if (v == "off" || v == "false" || v == "no")
      plan.intermediate = IntermediateMode::off;
    else if (v == "both")
      plan.intermediate = IntermediateMode::both;
    else
      throw PlanError("expected on, off or both", line_of(n), "grid.intermediate");
  }

  const Section data(top["data"], "data", {"pretrain", "intermediate", "finetune", "holdout"});
  if (data.has("pretrain"))
    read_dataset(Section(data["pretrain"], "data.pretrain", kDataKeys), plan.pretrain_data);
  if (data.has("intermediate"))
    read_dataset(Section(data["intermediate"], "data.intermediate", kDataKeys),
                 plan.intermediate_data);
  if (data.has("finetune"))
    read_dataset(Section(data["finetune"], "data.finetune", kDataKeys), plan.finetune_data);
  if (data.has("holdout")) {
    const Section h(data["holdout"], "data.holdout", {"size", "seed"});
    h.get("size", plan.holdout_size);
    h.get("seed", plan.holdout_seed);
  }

  const Section phases(top["phases"], "phases", {"pretrain", "intermediate", "finetune"});
  if (phases.has("pretrain"))
    read_phase(Section(phases["pretrain"], "phases.pretrain", kPhaseKeys), plan.pretrain);
  if (phases.has("intermediate"))
    read_phase(Section(phases["intermediate"], "phases.intermediate", kPhaseKeys),
               plan.intermediate_phase);
  if (phases.has("finetune"))
    read_phase(Section(phases["finetune"], "phases.finetune", kPhaseKeys), plan.finetune);

  if (top.has("metrics")) {
    const Section m(top["metrics"], "metrics", {"accuracy_counts_unknown"});
    m.get("accuracy_counts_unknown", plan.metrics.accuracy_counts_unknown);
  }

  // Validation errors point at the key of the section that holds the field.
  try {
    plan.validate();
  } catch (const PlanError &e) {
    int line = 0;
    YAML::Node node = root;
    std::stringstream path(e.field());
    std::string part;
    while (std::getline(path, part, '.') && node.IsMap()) {
      YAML::Node next;
      for (const auto &kv : node)
        if (kv.first.as<std::string>() == part) {
          line = line_of(kv.first);
          next = kv.second;
        }
      if (!next)
        break;
      node = next;
    }
    throw PlanError(e.what(), line);
  }
  return plan;
}

ExperimentPlan load_plan(const std::filesystem::path &file) {
  std::ifstream in(file);
  if (!in)
    throw PlanError("cannot read plan file " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_plan(ss.str());
}

void ExperimentPlan::validate() const {
  if (name.empty() || name.find('/') != std::string::npos)
    throw PlanError("must be a non-empty name without '/'", 0, "name");
  if (runs_per_cell < 1)
    throw PlanError("must be at least 1", 0, "runs_per_cell");
  try {
    model.validate();
  } catch (const std::exception &e) {
    throw PlanError(e.what(), 0, "model");
  }
  if (pretrain_sizes.empty())
    throw PlanError("must list at least one size", 0, "grid.pretrain_sizes");
  if (finetune_sizes.empty())
    throw PlanError("must list at least one size", 0, "grid.finetune_sizes");
  for (const auto *list : {&pretrain_sizes, &finetune_sizes})
    if (std::set<std::size_t>(list->begin(), list->end()).size() != list->size())
      throw PlanError("sizes must be distinct", 0,
                      list == &pretrain_sizes ? "grid.pretrain_sizes" : "grid.finetune_sizes");
  for (std::size_t f : finetune_sizes)
    if (f == 0)
      throw PlanError("fine-tuning sizes must be positive", 0, "grid.finetune_sizes");

  // Any kind works for pre-training; labels are ignored there.
  if (intermediate_data.kind != DataKind::classification)
    throw PlanError("must be classification data", 0, "data.intermediate.kind");
  if (finetune_data.kind != DataKind::segmentation)
    throw PlanError("must be segmentation data", 0, "data.finetune.kind");
  if (finetune_data.synthetic() && !finetune_data.size_limit)
    throw PlanError("synthetic data needs a size", 0, "data.finetune.size");
  if (intermediate != IntermediateMode::off && intermediate_data.synthetic() &&
      !intermediate_data.size_limit)
    throw PlanError("synthetic data needs a size", 0, "data.intermediate.size");
  if (finetune_data.size_limit) {
    const std::size_t pool = *finetune_data.size_limit;
    if (pool <= holdout_size)
      throw PlanError("fine-tuning corpus must be larger than the holdout", 0, "data.holdout.size");
    for (std::size_t f : finetune_sizes)
      if (f > pool - holdout_size)
        throw PlanError("size " + std::to_string(f) + " exceeds the " +
                            std::to_string(pool - holdout_size) + " training samples left after the holdout",
                        0, "grid.finetune_sizes");
  }

  const std::pair<const PhaseConfig *, const char *> phases[] = {
      {&pretrain, "phases.pretrain"},
      {&intermediate_phase, "phases.intermediate"},
      {&finetune, "phases.finetune"}};
  for (const auto &[p, field] : phases) {
    try {
      p->validate();
    } catch (const std::exception &e) {
      throw PlanError(e.what(), 0, field);
    }
  }
}

std::string CellKey::label() const {
  return fmt::format("p={} i={} f={} r={}", pretrain_size, intermediate ? "on" : "off",
                     finetune_size, run);
}

CellKey CellKey::parse(const std::string &text) {
  std::string s = text;
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream in(s);
  CellKey k;
  int seen = 0;
  std::string tok;
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("bad cell token '" + tok + "'");
    const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    try {
      if (key == "p")
        k.pretrain_size = std::stoull(val);
      else if (key == "i")
        k.intermediate = val == "on" || val == "1" || val == "true";
      else if (key == "f")
        k.finetune_size = std::stoull(val);
      else if (key == "r")
        k.run = std::stoi(val);
      else
        throw std::invalid_argument("");
    } catch (const std::logic_error &) {
      throw std::invalid_argument("bad cell token '" + tok + "'");
    }
    ++seen;
  }
  if (seen != 4)
    throw std::invalid_argument("cell needs p=, i=, f= and r=");
  return k;
}

std::vector<CellKey> enumerate_cells(const ExperimentPlan &plan) {
  std::vector<bool> flags;
  if (plan.intermediate != IntermediateMode::on)
    flags.push_back(false);
  if (plan.intermediate != IntermediateMode::off)
    flags.push_back(true);
  std::vector<CellKey> out;
  for (std::size_t p : plan.pretrain_sizes)
    for (bool i : flags)
      for (std::size_t f : plan.finetune_sizes)
        for (int r = 0; r < plan.runs_per_cell; ++r)
          out.push_back({p, i, f, r});
  return out;
}

namespace {

std::uint64_t tag(std::string_view s) { return fnv1a64(s); }

std::uint64_t pretrain_run(const ExperimentPlan &plan, const CellKey &key) {
  return plan.reseed_pretrain_per_run ? static_cast<std::uint64_t>(key.run) : 0;
}

nlohmann::json to_json(const ModelConfig &m) {
  return {{"image_size", m.image_size}, {"patch_size", m.patch_size}, {"dim", m.dim},
          {"depth", m.depth},           {"heads", m.heads},           {"head_dim", m.head_dim},
          {"mlp_dim", m.mlp_dim},       {"channels", m.channels}};
}

nlohmann::json to_json(const PhaseConfig &p) {
  return {{"phase", phase_name(p.phase)},
          {"epochs", p.epochs},
          {"batch_size", p.batch_size},
          {"lr", p.optim.base_lr},
          {"weight_decay", p.optim.weight_decay},
          {"beta1", p.optim.beta1},
          {"beta2", p.optim.beta2},
          {"eps", p.optim.eps},
          {"exempt_norm_and_tokens", p.optim.exempt_norm_and_tokens},
          {"gamma", p.schedule.gamma},
          {"milestones", p.schedule.milestones},
          {"mask_ratio", p.mask_ratio}};
}

nlohmann::json to_json(const DatasetSpec &d) {
  return {{"source", d.source},
          {"kind", kind_name(d.kind)},
          {"size", d.size_limit ? nlohmann::json(*d.size_limit) : nlohmann::json()},
          {"seed", d.seed},
          {"class_balanced", d.class_balanced}};
}

std::string hex_hash(const nlohmann::json &j) {
  return fmt::format("{:016x}", fnv1a64(j.dump()));
}

} // namespace

std::string plan_json(const ExperimentPlan &plan) {
  const nlohmann::json j = {
      {"name", plan.name},
      {"seed", plan.seed},
      {"runs_per_cell", plan.runs_per_cell},
      {"reseed_pretrain_per_run", plan.reseed_pretrain_per_run},
      {"save_final_checkpoints", plan.save_final_checkpoints},
      {"model", to_json(plan.model)},
      {"grid",
       {{"pretrain_sizes", plan.pretrain_sizes},
        {"intermediate", intermediate_name(plan.intermediate)},
        {"finetune_sizes", plan.finetune_sizes}}},
      {"data",
       {{"pretrain", to_json(plan.pretrain_data)},
        {"intermediate", to_json(plan.intermediate_data)},
        {"finetune", to_json(plan.finetune_data)},
        {"holdout", {{"size", plan.holdout_size}, {"seed", plan.holdout_seed}}}}},
      {"phases",
       {{"pretrain", to_json(plan.pretrain)},
        {"intermediate", to_json(plan.intermediate_phase)},
        {"finetune", to_json(plan.finetune)}}},
      {"metrics", {{"accuracy_counts_unknown", plan.metrics.accuracy_counts_unknown}}}};
  return j.dump(2) + "\n";
}

CellSeeds derive_seeds(const ExperimentPlan &plan, const CellKey &key) {
  const std::uint64_t base = plan.seed;
  const auto run = static_cast<std::uint64_t>(key.run);
  CellSeeds s;
  s.init = mix_seed({base, tag("init"), key.pretrain_size > 0 ? pretrain_run(plan, key) : run});
  s.pretrain = key.pretrain_size > 0
                   ? mix_seed({base, tag("pretrain"), key.pretrain_size, pretrain_run(plan, key)})
                   : 0;
  s.intermediate =
      key.intermediate ? mix_seed({base, tag("intermediate"), key.pretrain_size, run}) : 0;
  s.finetune = mix_seed({base, tag("finetune"), key.finetune_size, run});
  s.subset = mix_seed({base, tag("subset"), run});
  return s;
}

std::string pretrain_hash(const ExperimentPlan &plan, const CellKey &key) {
  if (key.pretrain_size == 0)
    return "";
  const CellSeeds s = derive_seeds(plan, key);
  DatasetSpec data = plan.pretrain_data;
  data.size_limit = key.pretrain_size;
  return hex_hash({{"stage", "pretrain"},
                   {"model", to_json(plan.model)},
                   {"phase", to_json(plan.pretrain)},
                   {"data", to_json(data)},
                   {"init_seed", s.init},
                   {"seed", s.pretrain}});
}

std::string intermediate_hash(const ExperimentPlan &plan, const CellKey &key) {
  if (!key.intermediate)
    return "";
  const CellSeeds s = derive_seeds(plan, key);
  return hex_hash({{"stage", "intermediate"},
                   {"model", to_json(plan.model)},
                   {"start", key.pretrain_size > 0 ? pretrain_hash(plan, key) : ""},
                   {"init_seed", s.init},
                   {"phase", to_json(plan.intermediate_phase)},
                   {"data", to_json(plan.intermediate_data)},
                   {"seed", s.intermediate}});
}

std::string cell_hash(const ExperimentPlan &plan, const CellKey &key) {
  const CellSeeds s = derive_seeds(plan, key);
  return hex_hash({{"stage", "cell"},
                   {"format", 1},
                   {"model", to_json(plan.model)},
                   {"key",
                    {{"pretrain_size", key.pretrain_size},
                     {"intermediate", key.intermediate},
                     {"finetune_size", key.finetune_size},
                     {"run", key.run}}},
                   {"pretrain", pretrain_hash(plan, key)},
                   {"intermediate", intermediate_hash(plan, key)},
                   {"init_seed", s.init},
                   {"phase", to_json(plan.finetune)},
                   {"data", to_json(plan.finetune_data)},
                   {"holdout", {{"size", plan.holdout_size}, {"seed", plan.holdout_seed}}},
                   {"seed", s.finetune},
                   {"subset_seed", s.subset},
                   {"accuracy_counts_unknown", plan.metrics.accuracy_counts_unknown}});
}

} // namespace viny
