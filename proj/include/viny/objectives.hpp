// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "viny/backbone.hpp"
#include "viny/mask.hpp"

namespace viny {

inline constexpr int kIntermediateClasses = 6;
inline constexpr int kTrimapClasses = 3;

/// Trimap label values.
enum TrimapLabel : std::uint8_t { kForeground = 0, kBackground = 1, kUnknown = 2 };

/// Per-pixel tri-map, row-major.
struct Trimap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  Trimap() = default;
  Trimap(int h, int w, std::uint8_t fill = kForeground)
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t &at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }

  bool operator==(const Trimap &) const = default;
};

/// Number of masked patches for a ratio (round half away from zero).
int masked_patch_count(int num_patches, double ratio);

/// Uniform draw of exactly masked_patch_count positions, without replacement.
MaskPattern sample_mask(std::mt19937_64 &rng, int num_patches, double ratio);

/// Linear reconstruction head plus the learned token substituted at masked
/// positions.
template <typename T>
struct MimHead {
  Affine<T> proj; // dim -> patch_dim
  RowVector<T> mask_token;

  static MimHead zeros(const ModelConfig &cfg);
};

template <typename T>
struct ClsHead {
  Affine<T> proj; // dim -> 6

  static ClsHead zeros(const ModelConfig &cfg, int classes = kIntermediateClasses);
};

template <typename T>
struct SegHead {
  Affine<T> proj; // dim -> patch_size^2 * 3

  static SegHead zeros(const ModelConfig &cfg);
};

template <typename T>
using Head = std::variant<MimHead<T>, ClsHead<T>, SegHead<T>>;

template <typename T>
MimHead<T> init_mim_head(const ModelConfig &cfg, std::mt19937_64 &rng);
template <typename T>
ClsHead<T> init_cls_head(const ModelConfig &cfg, std::mt19937_64 &rng);
template <typename T>
SegHead<T> init_seg_head(const ModelConfig &cfg, std::mt19937_64 &rng);

template <typename H, typename F>
void visit_head(H &h, F &&f) {
  using Plain = std::remove_const_t<H>;
  if constexpr (requires { h.mask_token; }) {
    visit_affine(h.proj, "head.mim.proj", f);
    f("head.mim.mask_token", h.mask_token);
  } else if constexpr (std::is_same_v<Plain, ClsHead<float>> ||
                       std::is_same_v<Plain, ClsHead<double>>) {
    visit_affine(h.proj, "head.cls.proj", f);
  } else {
    visit_affine(h.proj, "head.seg.proj", f);
  }
}

template <typename T>
std::vector<ParamRef<T>> param_refs(Head<T> &head) {
  std::vector<ParamRef<T>> refs;
  std::visit(
      [&](auto &h) {
        visit_head(h, [&](const std::string &path, auto &t) {
          refs.push_back(param_ref<T>(path, t));
        });
      },
      head);
  return refs;
}

template <typename T>
std::int64_t count_parameters(const Head<T> &head) {
  std::int64_t n = 0;
  std::visit(
      [&](const auto &h) {
        visit_head(h, [&](const std::string &, const auto &t) { n += t.size(); });
      },
      head);
  return n;
}

/// "mim", "cls" or "seg".
template <typename T>
std::string head_kind(const Head<T> &head);

/// Mean absolute error over the pixels of masked patches. When d_pred is
/// given it receives d(loss)/d(pred) scaled by grad_scale; rows of unmasked
/// patches get exact zeros. Throws ShapeError for an all-false mask.
template <typename T>
T mim_loss(const Matrix<T> &pred, const Matrix<T> &target, const MaskPattern &mask,
           Matrix<T> *d_pred = nullptr, T grad_scale = T(1));

/// Softmax cross-entropy of one logit row against a class index.
template <typename T>
T cross_entropy(const RowVector<T> &logits, int label, RowVector<T> *d_logits = nullptr,
                T grad_scale = T(1));

/// Cross-entropy of the class-token row of image b passed through head.
template <typename T>
T classify_loss(const TokenFeatures<T> &features, int b, const ClsHead<T> &head, int label);

/// Full-resolution class logits: (image_size * image_size) rows, one per
/// pixel in row-major order, kTrimapClasses columns.
template <typename T>
struct SegLogits {
  int height = 0;
  int width = 0;
  Matrix<T> values;
};

/// Rebuilds full-resolution logits from per-patch head rows
/// (num_patches x patch_size^2 * 3), using the patchify element order with
/// classes in the channel slot.
template <typename T>
SegLogits<T> assemble_logits(const Matrix<T> &patch_logits, const ModelConfig &cfg);

/// Inverse of assemble_logits.
template <typename T>
Matrix<T> disassemble_logits(const SegLogits<T> &logits, const ModelConfig &cfg);

/// Applies the segmentation head to the patch rows of image b.
template <typename T>
SegLogits<T> segment_logits(const TokenFeatures<T> &features, int b, const SegHead<T> &head,
                            const ModelConfig &cfg);

/// Mean per-pixel softmax cross-entropy over all pixels and all three classes.
template <typename T>
T segment_loss(const SegLogits<T> &logits, const Trimap &truth, SegLogits<T> *d_logits = nullptr,
               T grad_scale = T(1));

/// Per-pixel argmax, ties resolved toward the lowest class index.
template <typename T>
Trimap predict_trimap(const SegLogits<T> &logits);

/// Inputs for one objective evaluation. Which fields are used depends on the
/// head: masks for reconstruction, labels for classification, trimaps for
/// segmentation.
struct TaskBatch {
  std::vector<Image> images;
  std::vector<MaskPattern> masks;
  std::vector<int> labels;
  std::vector<Trimap> trimaps;
};

template <typename T>
struct LossGrad {
  double loss = 0.0;
  BackboneParams<T> d_backbone;
  Head<T> d_head;
};

/// Batch objective (mean over images) for whichever head is active.
template <typename T>
double objective_loss(const BackboneParams<T> &backbone, const Head<T> &head,
                      const TaskBatch &batch);

/// Objective value and exact gradients w.r.t. every backbone and head
/// parameter. Throws NumericError naming the first parameter path whose
/// gradient is non-finite.
template <typename T>
LossGrad<T> gradient(const BackboneParams<T> &backbone, const Head<T> &head,
                     const TaskBatch &batch);

template <typename To, typename From>
Head<To> cast_head(const Head<From> &head);

} // namespace viny
