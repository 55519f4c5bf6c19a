// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace viny {

/// Architecture hyperparameters. Defaults are the ViNy configuration.
struct ModelConfig {
  int image_size = 128;
  int patch_size = 16;
  int dim = 128;
  int depth = 12;
  int heads = 8;
  int head_dim = 64;
  int mlp_dim = 512;
  int channels = 3;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int num_tokens() const { return num_patches() + 1; }
  int patch_dim() const { return patch_size * patch_size * channels; }
  int inner_dim() const { return heads * head_dim; }

  /// Throws ShapeError when the configuration is not realizable.
  void validate() const;

  bool operator==(const ModelConfig &) const = default;
};

} // namespace viny
