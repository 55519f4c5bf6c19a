// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "viny/config.hpp"
#include "viny/tensor.hpp"

namespace viny {

/// Planar channels x height x width pixel buffer.
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, fill) {}

  float &at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  float at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  bool operator==(const Image &) const = default;
};

/// Splits an image into num_patches rows of patch_dim values.
///
/// Patches are numbered row-major over the patch grid. Inside a patch the
/// layout is channel-major: element (c, py, px) sits at
/// c * patch_size^2 + py * patch_size + px. segment_logits relies on the same
/// order when it reads per-pixel class logits out of a 768-wide head row.
template <typename T>
Matrix<T> patchify(const Image &image, const ModelConfig &cfg);

/// Inverse of patchify.
template <typename T>
Image unpatchify(const Matrix<T> &patches, const ModelConfig &cfg);

} // namespace viny
