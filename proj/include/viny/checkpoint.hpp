// SPDX-License-Identifier: Apache-2.0
//
// Archive layout (all integers little-endian):
//
//   magic        8 bytes  "VINYCKPT"
//   version      u32      kCheckpointVersion
//   body_size    u64      bytes between this field and the trailer
//   body:
//     manifest   u64 length + UTF-8 JSON
//     count      u64
//     count x    u32 path length, path, u64 rows, u64 cols, rows*cols f32
//   crc32        u32      zlib CRC-32 of every preceding byte
//
// Tensor paths:
//   backbone.patch_embed.norm_in.{scale,shift}
//   backbone.patch_embed.proj.{weight,bias}
//   backbone.patch_embed.norm_out.{scale,shift}
//   backbone.pos_embed, backbone.cls_token
//   backbone.blocks.<i>.attn_norm.{scale,shift}
//   backbone.blocks.<i>.attn.qkv.weight
//   backbone.blocks.<i>.attn.out.{weight,bias}
//   backbone.blocks.<i>.mlp_norm.{scale,shift}
//   backbone.blocks.<i>.mlp.in.{weight,bias}
//   backbone.blocks.<i>.mlp.out.{weight,bias}
//   backbone.final_norm.{scale,shift}
//   head.mim.proj.{weight,bias}, head.mim.mask_token
//   head.cls.proj.{weight,bias}
//   head.seg.proj.{weight,bias}
//   optim.m.<path>, optim.v.<path> for every path above that is present
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "viny/optim.hpp"

namespace viny {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointManifest {
  ModelConfig config;
  std::string phase;
  int epoch = 0;
  std::uint64_t seed = 0;
  std::uint32_t format_version = kCheckpointVersion;
  /// "", "mim", "cls" or "seg"; filled in on save.
  std::string head;
  /// Optimizer step count; filled in on save when a state is stored.
  std::int64_t optim_step = 0;

  bool operator==(const CheckpointManifest &) const = default;
};

struct Checkpoint {
  CheckpointManifest manifest;
  BackboneParams<float> backbone;
  std::optional<Head<float>> head;
  std::optional<OptimState<float>> state;
};

struct TensorRecord {
  std::string path;
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  std::vector<float> values;
};

/// Low-level archive codec.
std::string encode_archive(const std::string &manifest_json,
                           const std::vector<TensorRecord> &tensors);
/// Throws CheckpointError on bad magic, version mismatch, truncation or a
/// CRC failure.
void decode_archive(std::string_view bytes, std::string &manifest_json,
                    std::vector<TensorRecord> &tensors);

std::string serialize_checkpoint(const Checkpoint &ckpt);
/// Throws CheckpointError additionally for unknown, missing or misshapen
/// tensors.
Checkpoint parse_checkpoint(std::string_view bytes);

/// Writes atomically (temporary file then rename).
void save_checkpoint(const std::filesystem::path &file, const Checkpoint &ckpt);
Checkpoint load_checkpoint(const std::filesystem::path &file);

} // namespace viny
