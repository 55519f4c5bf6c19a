// SPDX-License-Identifier: Apache-2.0
#include "viny/image.hpp"

#include <cmath>
#include <string>

#include "viny/errors.hpp"

namespace viny {

void ModelConfig::validate() const {
  auto fail = [](const std::string &what) { throw ShapeError("model config: " + what); };
  if (image_size <= 0 || patch_size <= 0 || channels <= 0)
    fail("image_size, patch_size and channels must be positive");
  if (image_size % patch_size != 0)
    fail("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
         std::to_string(patch_size));
  if (dim <= 0 || heads <= 0 || head_dim <= 0 || mlp_dim <= 0)
    fail("dim, heads, head_dim and mlp_dim must be positive");
  if (depth < 0)
    fail("depth must be non-negative");
}

namespace {

void check_image(const Image &image, const ModelConfig &cfg) {
  if (image.channels != cfg.channels || image.height != cfg.image_size ||
      image.width != cfg.image_size)
    throw ShapeError("image is " + std::to_string(image.channels) + "x" +
                     std::to_string(image.height) + "x" + std::to_string(image.width) +
                     ", model expects " + std::to_string(cfg.channels) + "x" +
                     std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  if (image.data.size() != static_cast<std::size_t>(image.channels) * image.height * image.width)
    throw ShapeError("image buffer size does not match its dimensions");
}

} // namespace

template <typename T>
Matrix<T> patchify(const Image &image, const ModelConfig &cfg) {
  check_image(image, cfg);
  const int p = cfg.patch_size;
  const int grid = cfg.grid();
  Matrix<T> out(cfg.num_patches(), cfg.patch_dim());
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      const int row = gy * grid + gx;
      int col = 0;
      for (int c = 0; c < cfg.channels; ++c)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px) {
            const float v = image.at(c, gy * p + py, gx * p + px);
            if (!std::isfinite(v))
              throw ShapeError("image contains a non-finite pixel");
            out(row, col++) = static_cast<T>(v);
          }
    }
  return out;
}

template <typename T>
Image unpatchify(const Matrix<T> &patches, const ModelConfig &cfg) {
  if (patches.rows() != cfg.num_patches() || patches.cols() != cfg.patch_dim())
    throw ShapeError("unpatchify: expected " + std::to_string(cfg.num_patches()) + "x" +
                     std::to_string(cfg.patch_dim()) + " patch matrix");
  const int p = cfg.patch_size;
  const int grid = cfg.grid();
  Image image(cfg.channels, cfg.image_size, cfg.image_size);
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      const int row = gy * grid + gx;
      int col = 0;
      for (int c = 0; c < cfg.channels; ++c)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            image.at(c, gy * p + py, gx * p + px) = static_cast<float>(patches(row, col++));
    }
  return image;
}

template Matrix<float> patchify<float>(const Image &, const ModelConfig &);
template Matrix<double> patchify<double>(const Image &, const ModelConfig &);
template Image unpatchify<float>(const Matrix<float> &, const ModelConfig &);
template Image unpatchify<double>(const Matrix<double> &, const ModelConfig &);

} // namespace viny
