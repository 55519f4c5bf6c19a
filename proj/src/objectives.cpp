// SPDX-License-Identifier: Apache-2.0
#include "viny/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "layers.hpp"
#include "viny/errors.hpp"

namespace viny {

int masked_patch_count(int num_patches, double ratio) {
  return static_cast<int>(std::lround(ratio * num_patches));
}

MaskPattern sample_mask(std::mt19937_64 &rng, int num_patches, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0))
    throw std::invalid_argument("mask ratio must lie in [0, 1]");
  const int k = masked_patch_count(num_patches, ratio);
  std::vector<int> order(static_cast<std::size_t>(num_patches));
  std::iota(order.begin(), order.end(), 0);
  // Partial Fisher-Yates: the first k slots are a uniform k-subset.
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, num_patches - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  MaskPattern m;
  m.ratio = ratio;
  m.mask.assign(static_cast<std::size_t>(num_patches), 0);
  for (int i = 0; i < k; ++i)
    m.mask[order[i]] = 1;
  return m;
}

template <typename T>
MimHead<T> MimHead<T>::zeros(const ModelConfig &cfg) {
  return {Affine<T>(cfg.dim, cfg.patch_dim(), true), RowVector<T>::Zero(cfg.dim)};
}

template <typename T>
ClsHead<T> ClsHead<T>::zeros(const ModelConfig &cfg, int classes) {
  return {Affine<T>(cfg.dim, classes, true)};
}

template <typename T>
SegHead<T> SegHead<T>::zeros(const ModelConfig &cfg) {
  return {Affine<T>(cfg.dim, cfg.patch_size * cfg.patch_size * kTrimapClasses, true)};
}

template <typename T>
MimHead<T> init_mim_head(const ModelConfig &cfg, std::mt19937_64 &rng) {
  auto h = MimHead<T>::zeros(cfg);
  init_affine(h.proj, rng);
  init_token(h.mask_token, rng);
  return h;
}

template <typename T>
ClsHead<T> init_cls_head(const ModelConfig &cfg, std::mt19937_64 &rng) {
  auto h = ClsHead<T>::zeros(cfg);
  init_affine(h.proj, rng);
  return h;
}

template <typename T>
SegHead<T> init_seg_head(const ModelConfig &cfg, std::mt19937_64 &rng) {
  auto h = SegHead<T>::zeros(cfg);
  init_affine(h.proj, rng);
  return h;
}

template <typename T>
std::string head_kind(const Head<T> &head) {
  switch (head.index()) {
  case 0:
    return "mim";
  case 1:
    return "cls";
  default:
    return "seg";
  }
}

template <typename T>
T mim_loss(const Matrix<T> &pred, const Matrix<T> &target, const MaskPattern &mask,
           Matrix<T> *d_pred, T grad_scale) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ShapeError("mim_loss: prediction and target shapes differ");
  if (mask.size() != pred.rows())
    throw ShapeError("mim_loss: mask length does not match patch count");
  const int masked = mask.count();
  if (masked == 0)
    throw ShapeError("mim_loss: mask selects no patches");
  const T denom = static_cast<T>(masked) * static_cast<T>(pred.cols());
  if (d_pred != nullptr)
    d_pred->setZero(pred.rows(), pred.cols());
  T total = 0;
  for (int i = 0; i < mask.size(); ++i) {
    if (!mask.masked(i))
      continue;
    const auto diff = (pred.row(i) - target.row(i)).array();
    total += diff.abs().sum();
    if (d_pred != nullptr)
      d_pred->row(i) = diff.sign().matrix() * (grad_scale / denom);
  }
  return total / denom;
}

template <typename T>
T cross_entropy(const RowVector<T> &logits, int label, RowVector<T> *d_logits, T grad_scale) {
  if (label < 0 || label >= logits.size())
    throw std::out_of_range("class label " + std::to_string(label) + " outside [0, " +
                            std::to_string(logits.size()) + ")");
  const T mx = logits.maxCoeff();
  const RowVector<T> e = (logits.array() - mx).exp().matrix();
  const T sum = e.sum();
  if (d_logits != nullptr) {
    *d_logits = e / sum;
    (*d_logits)[label] -= T(1);
    *d_logits *= grad_scale;
  }
  return std::log(sum) + mx - logits[label];
}

template <typename T>
T classify_loss(const TokenFeatures<T> &features, int b, const ClsHead<T> &head, int label) {
  const RowVector<T> logits = features.cls_row(b) * head.proj.weight + head.proj.bias;
  return cross_entropy(logits, label);
}

template <typename T>
SegLogits<T> assemble_logits(const Matrix<T> &patch_logits, const ModelConfig &cfg) {
  const int p = cfg.patch_size;
  const int grid = cfg.grid();
  if (patch_logits.rows() != cfg.num_patches() || patch_logits.cols() != p * p * kTrimapClasses)
    throw ShapeError("assemble_logits: expected num_patches x patch_size^2*3 logits");
  SegLogits<T> out{cfg.image_size, cfg.image_size,
                   Matrix<T>(static_cast<Eigen::Index>(cfg.image_size) * cfg.image_size,
                             kTrimapClasses)};
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      const int row = gy * grid + gx;
      int col = 0;
      for (int c = 0; c < kTrimapClasses; ++c)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px) {
            const Eigen::Index pixel =
                static_cast<Eigen::Index>(gy * p + py) * cfg.image_size + gx * p + px;
            out.values(pixel, c) = patch_logits(row, col++);
          }
    }
  return out;
}

template <typename T>
Matrix<T> disassemble_logits(const SegLogits<T> &logits, const ModelConfig &cfg) {
  const int p = cfg.patch_size;
  const int grid = cfg.grid();
  if (logits.height != cfg.image_size || logits.width != cfg.image_size ||
      logits.values.cols() != kTrimapClasses)
    throw ShapeError("disassemble_logits: logit grid does not match the model config");
  Matrix<T> out(cfg.num_patches(), p * p * kTrimapClasses);
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      const int row = gy * grid + gx;
      int col = 0;
      for (int c = 0; c < kTrimapClasses; ++c)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px) {
            const Eigen::Index pixel =
                static_cast<Eigen::Index>(gy * p + py) * cfg.image_size + gx * p + px;
            out(row, col++) = logits.values(pixel, c);
          }
    }
  return out;
}

template <typename T>
SegLogits<T> segment_logits(const TokenFeatures<T> &features, int b, const SegHead<T> &head,
                            const ModelConfig &cfg) {
  const Matrix<T> rows = features.patch_rows(b);
  return assemble_logits<T>(detail::affine_forward(rows, head.proj), cfg);
}

template <typename T>
T segment_loss(const SegLogits<T> &logits, const Trimap &truth, SegLogits<T> *d_logits,
               T grad_scale) {
  if (truth.height != logits.height || truth.width != logits.width ||
      logits.values.rows() != static_cast<Eigen::Index>(truth.labels.size()))
    throw ShapeError("segment_loss: logits and trimap sizes differ");
  const auto n = static_cast<Eigen::Index>(truth.labels.size());
  if (d_logits != nullptr) {
    d_logits->height = logits.height;
    d_logits->width = logits.width;
    d_logits->values.resize(n, kTrimapClasses);
  }
  const T inv_n = T(1) / static_cast<T>(n);
  T total = 0;
  RowVector<T> row_grad;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int label = truth.labels[static_cast<std::size_t>(i)];
    if (label >= kTrimapClasses)
      throw std::out_of_range("trimap label " + std::to_string(label) + " outside {0,1,2}");
    const RowVector<T> row = logits.values.row(i);
    if (d_logits != nullptr) {
      total += cross_entropy<T>(row, label, &row_grad, grad_scale * inv_n);
      d_logits->values.row(i) = row_grad;
    } else {
      total += cross_entropy<T>(row, label);
    }
  }
  return total * inv_n;
}

template <typename T>
Trimap predict_trimap(const SegLogits<T> &logits) {
  Trimap out(logits.height, logits.width);
  for (Eigen::Index i = 0; i < logits.values.rows(); ++i) {
    int best = 0;
    for (int c = 1; c < logits.values.cols(); ++c)
      if (logits.values(i, c) > logits.values(i, best))
        best = c;
    out.labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

namespace {

void check_batch(const TaskBatch &batch, std::size_t n, std::size_t expected,
                 const char *field) {
  if (expected != n)
    throw ShapeError(std::string("task batch: ") + field + " count " + std::to_string(expected) +
                     " does not match " + std::to_string(n) + " images");
  (void)batch;
}

// Runs one objective; fills gradients when grads is non-null.
template <typename T>
double run_objective(const BackboneParams<T> &backbone, const Head<T> &head,
                     const TaskBatch &batch, LossGrad<T> *grads) {
  const ModelConfig &cfg = backbone.config;
  const std::size_t n = batch.images.size();
  if (n == 0)
    throw ShapeError("task batch is empty");
  const T inv_b = T(1) / static_cast<T>(n);
  EncoderPass<T> pass(backbone);
  double loss = 0.0;

  if (const auto *mim = std::get_if<MimHead<T>>(&head)) {
    check_batch(batch, n, batch.masks.size(), "mask");
    const auto &feat = pass.forward(batch.images, batch.masks, &mim->mask_token);
    Matrix<T> d_feat;
    MimHead<T> *dh = nullptr;
    if (grads != nullptr) {
      d_feat.setZero(feat.rows.rows(), feat.rows.cols());
      dh = &std::get<MimHead<T>>(grads->d_head);
    }
    for (std::size_t b = 0; b < n; ++b) {
      const Matrix<T> rows = feat.patch_rows(static_cast<int>(b));
      const Matrix<T> pred = detail::affine_forward(rows, mim->proj);
      const Matrix<T> target = patchify<T>(batch.images[b], cfg);
      Matrix<T> d_pred;
      loss += mim_loss<T>(pred, target, batch.masks[b], grads ? &d_pred : nullptr, inv_b);
      if (grads != nullptr)
        d_feat.middleRows(static_cast<Eigen::Index>(b) * feat.tokens + 1, feat.tokens - 1) =
            detail::affine_backward(d_pred, rows, mim->proj, dh->proj);
    }
    if (grads != nullptr)
      pass.backward(d_feat, grads->d_backbone, &dh->mask_token);
  } else if (const auto *cls = std::get_if<ClsHead<T>>(&head)) {
    check_batch(batch, n, batch.labels.size(), "label");
    const auto &feat = pass.forward(batch.images);
    Matrix<T> cls_rows(static_cast<Eigen::Index>(n), cfg.dim);
    for (std::size_t b = 0; b < n; ++b)
      cls_rows.row(static_cast<Eigen::Index>(b)) = feat.cls_row(static_cast<int>(b));
    const Matrix<T> logits = detail::affine_forward(cls_rows, cls->proj);
    Matrix<T> d_logits(logits.rows(), logits.cols());
    RowVector<T> row_grad;
    for (std::size_t b = 0; b < n; ++b) {
      const RowVector<T> row = logits.row(static_cast<Eigen::Index>(b));
      loss += static_cast<double>(
                  cross_entropy<T>(row, batch.labels[b], grads ? &row_grad : nullptr, inv_b)) /
              static_cast<double>(n);
      if (grads != nullptr)
        d_logits.row(static_cast<Eigen::Index>(b)) = row_grad;
    }
    if (grads != nullptr) {
      auto &dh = std::get<ClsHead<T>>(grads->d_head);
      const Matrix<T> d_cls = detail::affine_backward(d_logits, cls_rows, cls->proj, dh.proj);
      Matrix<T> d_feat = Matrix<T>::Zero(feat.rows.rows(), feat.rows.cols());
      for (std::size_t b = 0; b < n; ++b)
        d_feat.row(static_cast<Eigen::Index>(b) * feat.tokens) =
            d_cls.row(static_cast<Eigen::Index>(b));
      pass.backward(d_feat, grads->d_backbone);
    }
    return loss;
  } else {
    const auto &seg = std::get<SegHead<T>>(head);
    check_batch(batch, n, batch.trimaps.size(), "trimap");
    const auto &feat = pass.forward(batch.images);
    Matrix<T> d_feat;
    SegHead<T> *dh = nullptr;
    if (grads != nullptr) {
      d_feat.setZero(feat.rows.rows(), feat.rows.cols());
      dh = &std::get<SegHead<T>>(grads->d_head);
    }
    for (std::size_t b = 0; b < n; ++b) {
      const Matrix<T> rows = feat.patch_rows(static_cast<int>(b));
      const Matrix<T> patch_logits = detail::affine_forward(rows, seg.proj);
      const SegLogits<T> logits = assemble_logits<T>(patch_logits, cfg);
      SegLogits<T> d_logits;
      loss += segment_loss<T>(logits, batch.trimaps[b], grads ? &d_logits : nullptr, inv_b);
      if (grads != nullptr)
        d_feat.middleRows(static_cast<Eigen::Index>(b) * feat.tokens + 1, feat.tokens - 1) =
            detail::affine_backward(disassemble_logits<T>(d_logits, cfg), rows, seg.proj,
                                    dh->proj);
    }
    if (grads != nullptr)
      pass.backward(d_feat, grads->d_backbone);
  }
  return loss / static_cast<double>(n);
}

template <typename T>
Head<T> zero_like(const Head<T> &head, const ModelConfig &cfg) {
  return std::visit(
      [&](const auto &h) -> Head<T> {
        using H = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<H, ClsHead<T>>)
          return ClsHead<T>::zeros(cfg, h.proj.out());
        else
          return H::zeros(cfg);
      },
      head);
}

} // namespace

template <typename T>
double objective_loss(const BackboneParams<T> &backbone, const Head<T> &head,
                      const TaskBatch &batch) {
  return run_objective<T>(backbone, head, batch, nullptr);
}

template <typename T>
LossGrad<T> gradient(const BackboneParams<T> &backbone, const Head<T> &head,
                     const TaskBatch &batch) {
  LossGrad<T> out{0.0, BackboneParams<T>::zeros(backbone.config),
                  zero_like(head, backbone.config)};
  // Normalization scales start at one in zeros(); gradients must start at zero.
  visit_params(out.d_backbone, "backbone", [](const std::string &, auto &t) { t.setZero(); });
  out.loss = run_objective<T>(backbone, head, batch, &out);
  if (!std::isfinite(out.loss))
    throw NumericError("objective value is non-finite");
  for (const auto &r : param_refs(out.d_backbone))
    if (!Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(r.data, r.size()).allFinite())
      throw NumericError("non-finite gradient for " + r.path);
  for (const auto &r : param_refs(out.d_head))
    if (!Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(r.data, r.size()).allFinite())
      throw NumericError("non-finite gradient for " + r.path);
  return out;
}

template <typename To, typename From>
Head<To> cast_head(const Head<From> &head) {
  auto cast_affine = [](const Affine<From> &a) {
    Affine<To> out;
    out.weight = a.weight.template cast<To>();
    out.bias = a.bias.template cast<To>();
    return out;
  };
  return std::visit(
      [&](const auto &h) -> Head<To> {
        using H = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<H, MimHead<From>>)
          return MimHead<To>{cast_affine(h.proj), h.mask_token.template cast<To>()};
        else if constexpr (std::is_same_v<H, ClsHead<From>>)
          return ClsHead<To>{cast_affine(h.proj)};
        else
          return SegHead<To>{cast_affine(h.proj)};
      },
      head);
}

#define VINY_INSTANTIATE(T)                                                                     \
  template struct MimHead<T>;                                                                   \
  template struct ClsHead<T>;                                                                   \
  template struct SegHead<T>;                                                                   \
  template MimHead<T> init_mim_head<T>(const ModelConfig &, std::mt19937_64 &);                \
  template ClsHead<T> init_cls_head<T>(const ModelConfig &, std::mt19937_64 &);                \
  template SegHead<T> init_seg_head<T>(const ModelConfig &, std::mt19937_64 &);                \
  template std::string head_kind<T>(const Head<T> &);                                           \
  template T mim_loss<T>(const Matrix<T> &, const Matrix<T> &, const MaskPattern &,             \
                         Matrix<T> *, T);                                                       \
  template T cross_entropy<T>(const RowVector<T> &, int, RowVector<T> *, T);                   \
  template T classify_loss<T>(const TokenFeatures<T> &, int, const ClsHead<T> &, int);         \
  template SegLogits<T> assemble_logits<T>(const Matrix<T> &, const ModelConfig &);            \
  template Matrix<T> disassemble_logits<T>(const SegLogits<T> &, const ModelConfig &);         \
  template SegLogits<T> segment_logits<T>(const TokenFeatures<T> &, int, const SegHead<T> &,   \
                                          const ModelConfig &);                                 \
  template T segment_loss<T>(const SegLogits<T> &, const Trimap &, SegLogits<T> *, T);         \
  template Trimap predict_trimap<T>(const SegLogits<T> &);                                      \
  template double objective_loss<T>(const BackboneParams<T> &, const Head<T> &,                \
                                    const TaskBatch &);                                         \
  template LossGrad<T> gradient<T>(const BackboneParams<T> &, const Head<T> &,                 \
                                   const TaskBatch &);

VINY_INSTANTIATE(float)
VINY_INSTANTIATE(double)
#undef VINY_INSTANTIATE

template Head<double> cast_head<double, float>(const Head<float> &);
template Head<float> cast_head<float, double>(const Head<double> &);

} // namespace viny
