// SPDX-License-Identifier: Apache-2.0
#include "viny/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <zlib.h>

#include "json.hpp"
#include "viny/errors.hpp"

namespace viny {
namespace {

constexpr char kMagic[8] = {'V', 'I', 'N', 'Y', 'C', 'K', 'P', 'T'};
constexpr std::size_t kHeaderSize = 8 + 4 + 8;
constexpr std::size_t kTrailerSize = 4;

void put_u32(std::string &out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string &out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in slices.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
    crc = crc32(crc, reinterpret_cast<const Bytef *>(bytes.data() + pos), static_cast<uInt>(n));
    pos += n;
  }
  return static_cast<std::uint32_t>(crc);
}

class Reader {
public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t u(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw CheckpointError("checkpoint body is malformed (field runs past end of body)");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

nlohmann::json config_to_json(const ModelConfig &c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"dim", c.dim},
          {"depth", c.depth},           {"heads", c.heads},           {"head_dim", c.head_dim},
          {"mlp_dim", c.mlp_dim},       {"channels", c.channels}};
}

ModelConfig config_from_json(const nlohmann::json &j) {
  ModelConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.dim = j.at("dim").get<int>();
  c.depth = j.at("depth").get<int>();
  c.heads = j.at("heads").get<int>();
  c.head_dim = j.at("head_dim").get<int>();
  c.mlp_dim = j.at("mlp_dim").get<int>();
  c.channels = j.at("channels").get<int>();
  return c;
}

} // namespace

std::string encode_archive(const std::string &manifest_json,
                           const std::vector<TensorRecord> &tensors) {
  std::string body;
  put_u64(body, manifest_json.size());
  body += manifest_json;
  put_u64(body, tensors.size());
  for (const auto &t : tensors) {
    if (t.values.size() != t.rows * t.cols)
      throw CheckpointError("tensor " + t.path + " has inconsistent shape");
    put_u32(body, static_cast<std::uint32_t>(t.path.size()));
    body += t.path;
    put_u64(body, t.rows);
    put_u64(body, t.cols);
    for (float f : t.values)
      put_u32(body, std::bit_cast<std::uint32_t>(f));
  }
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u64(out, body.size());
  out += body;
  put_u32(out, crc32_of(out));
  return out;
}

void decode_archive(std::string_view bytes, std::string &manifest_json,
                    std::vector<TensorRecord> &tensors) {
  if (bytes.size() < kHeaderSize + kTrailerSize)
    throw CheckpointError("checkpoint is truncated (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError("not a checkpoint archive (bad magic)");
  Reader head(bytes.substr(8, 12));
  const auto version = static_cast<std::uint32_t>(head.u(4));
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version mismatch: archive has " + std::to_string(version) +
                          ", expected " + std::to_string(kCheckpointVersion));
  const std::uint64_t body_size = head.u(8);
  const std::uint64_t expected = kHeaderSize + body_size + kTrailerSize;
  if (body_size > bytes.size() || bytes.size() < expected)
    throw CheckpointError("checkpoint is truncated (" + std::to_string(bytes.size()) +
                          " bytes, header promises " + std::to_string(expected) + ")");
  if (bytes.size() > expected)
    throw CheckpointError("checkpoint has " + std::to_string(bytes.size() - expected) +
                          " trailing bytes");
  Reader trailer(bytes.substr(bytes.size() - kTrailerSize));
  const auto stored_crc = static_cast<std::uint32_t>(trailer.u(4));
  if (stored_crc != crc32_of(bytes.substr(0, bytes.size() - kTrailerSize)))
    throw CheckpointError("checkpoint integrity check failed (CRC-32 mismatch)");

  Reader r(bytes.substr(kHeaderSize, body_size));
  const std::uint64_t mlen = r.u(8);
  manifest_json = std::string(r.take(mlen));
  const std::uint64_t count = r.u(8);
  tensors.clear();
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorRecord t;
    t.path = std::string(r.take(r.u(4)));
    t.rows = r.u(8);
    t.cols = r.u(8);
    if (t.cols != 0 && t.rows > body_size / 4 / t.cols)
      throw CheckpointError("tensor " + t.path + " is larger than the archive");
    const std::string_view raw = r.take(t.rows * t.cols * 4);
    t.values.resize(t.rows * t.cols);
    Reader vr(raw);
    for (auto &f : t.values)
      f = std::bit_cast<float>(static_cast<std::uint32_t>(vr.u(4)));
    tensors.push_back(std::move(t));
  }
  if (!r.done())
    throw CheckpointError("checkpoint body has unread bytes");
}

std::string serialize_checkpoint(const Checkpoint &ckpt) {
  CheckpointManifest man = ckpt.manifest;
  man.format_version = kCheckpointVersion;
  man.head = ckpt.head ? head_kind(*ckpt.head) : "";
  man.optim_step = ckpt.state ? ckpt.state->t : 0;
  const nlohmann::json j = {{"config", config_to_json(ckpt.backbone.config)},
                            {"phase", man.phase},
                            {"epoch", man.epoch},
                            {"seed", man.seed},
                            {"format_version", man.format_version},
                            {"head", man.head},
                            {"optim_step", man.optim_step}};

  std::vector<TensorRecord> tensors;
  auto add = [&](const std::string &path, const auto &t) {
    TensorRecord rec{path, static_cast<std::uint64_t>(t.rows()),
                     static_cast<std::uint64_t>(t.cols()), {}};
    rec.values.assign(t.data(), t.data() + t.size());
    tensors.push_back(std::move(rec));
  };
  visit_params(ckpt.backbone, "backbone", add);
  if (ckpt.head)
    std::visit([&](const auto &h) { visit_head(h, add); }, *ckpt.head);
  if (ckpt.state) {
    const auto &s = *ckpt.state;
    for (std::size_t i = 0; i < s.paths.size(); ++i) {
      tensors.push_back({"optim.m." + s.paths[i], 1, s.m[i].size(), s.m[i]});
      tensors.push_back({"optim.v." + s.paths[i], 1, s.v[i].size(), s.v[i]});
    }
  }
  return encode_archive(j.dump(), tensors);
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  std::string manifest_json;
  std::vector<TensorRecord> tensors;
  decode_archive(bytes, manifest_json, tensors);

  Checkpoint ckpt;
  try {
    const auto j = nlohmann::json::parse(manifest_json);
    ckpt.manifest.config = config_from_json(j.at("config"));
    ckpt.manifest.phase = j.at("phase").get<std::string>();
    ckpt.manifest.epoch = j.at("epoch").get<int>();
    ckpt.manifest.seed = j.at("seed").get<std::uint64_t>();
    ckpt.manifest.format_version = j.at("format_version").get<std::uint32_t>();
    ckpt.manifest.head = j.at("head").get<std::string>();
    ckpt.manifest.optim_step = j.at("optim_step").get<std::int64_t>();
  } catch (const nlohmann::json::exception &e) {
    throw CheckpointError(std::string("checkpoint manifest is invalid: ") + e.what());
  }
  if (ckpt.manifest.format_version != kCheckpointVersion)
    throw CheckpointError("checkpoint manifest version mismatch: " +
                          std::to_string(ckpt.manifest.format_version));
  const ModelConfig &cfg = ckpt.manifest.config;
  try {
    cfg.validate();
  } catch (const std::exception &e) {
    throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
  }

  ckpt.backbone = BackboneParams<float>::zeros(cfg);
  const std::string &kind = ckpt.manifest.head;
  if (kind == "mim") {
    ckpt.head = MimHead<float>::zeros(cfg);
  } else if (kind == "cls") {
    int classes = kIntermediateClasses;
    for (const auto &t : tensors)
      if (t.path == "head.cls.proj.bias")
        classes = static_cast<int>(t.cols);
    ckpt.head = ClsHead<float>::zeros(cfg, classes);
  } else if (kind == "seg") {
    ckpt.head = SegHead<float>::zeros(cfg);
  } else if (!kind.empty()) {
    throw CheckpointError("checkpoint names unknown head '" + kind + "'");
  }

  auto refs = param_refs(ckpt.backbone);
  if (ckpt.head)
    for (auto &r : param_refs(*ckpt.head))
      refs.push_back(std::move(r));
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < refs.size(); ++i)
    index[refs[i].path] = i;

  std::vector<bool> filled(refs.size(), false);
  std::map<std::string, const TensorRecord *> moments;
  for (const auto &t : tensors) {
    if (t.path.starts_with("optim.m.") || t.path.starts_with("optim.v.")) {
      if (!index.contains(t.path.substr(8)))
        throw CheckpointError("unknown parameter path in checkpoint: " + t.path);
      moments[t.path] = &t;
      continue;
    }
    const auto it = index.find(t.path);
    if (it == index.end())
      throw CheckpointError("unknown parameter path in checkpoint: " + t.path);
    const auto &ref = refs[it->second];
    if (static_cast<std::int64_t>(t.rows) != ref.rows ||
        static_cast<std::int64_t>(t.cols) != ref.cols)
      throw CheckpointError("tensor " + t.path + " has shape " + std::to_string(t.rows) + "x" +
                            std::to_string(t.cols) + ", expected " + std::to_string(ref.rows) +
                            "x" + std::to_string(ref.cols));
    if (filled[it->second])
      throw CheckpointError("duplicate tensor in checkpoint: " + t.path);
    std::copy(t.values.begin(), t.values.end(), ref.data);
    filled[it->second] = true;
  }
  for (std::size_t i = 0; i < refs.size(); ++i)
    if (!filled[i])
      throw CheckpointError("checkpoint is missing tensor " + refs[i].path);

  if (!moments.empty()) {
    auto state = OptimState<float>::zeros(refs);
    for (std::size_t i = 0; i < refs.size(); ++i) {
      for (auto *slot : {&state.m[i], &state.v[i]}) {
        const std::string key =
            std::string(slot == &state.m[i] ? "optim.m." : "optim.v.") + refs[i].path;
        const auto it = moments.find(key);
        if (it == moments.end())
          throw CheckpointError("checkpoint is missing optimizer tensor " + key);
        if (it->second->values.size() != slot->size())
          throw CheckpointError("optimizer tensor " + key + " has the wrong size");
        *slot = it->second->values;
      }
    }
    state.t = ckpt.manifest.optim_step;
    ckpt.state = std::move(state);
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path &file, const Checkpoint &ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  if (file.has_parent_path())
    std::filesystem::create_directories(file.parent_path());
  auto tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
      throw CheckpointError("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, file);
}

Checkpoint load_checkpoint(const std::filesystem::path &file) {
  std::ifstream in(file, std::ios::binary);
  if (!in)
    throw CheckpointError("cannot open " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_checkpoint(ss.str());
  } catch (const CheckpointError &e) {
    throw CheckpointError(file.string() + ": " + e.what());
  }
}

} // namespace viny
