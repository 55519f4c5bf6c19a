// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "viny/config.hpp"
#include "viny/image.hpp"
#include "viny/mask.hpp"
#include "viny/tensor.hpp"

namespace viny {

/// y = x * weight + bias, with weight stored as (in x out).
template <typename T>
struct Affine {
  Matrix<T> weight;
  RowVector<T> bias; // empty when the map has no additive term

  Affine() = default;
  Affine(int in, int out, bool with_bias)
      : weight(Matrix<T>::Zero(in, out)),
        bias(with_bias ? RowVector<T>::Zero(out) : RowVector<T>()) {}

  bool has_bias() const { return bias.size() > 0; }
  int in() const { return static_cast<int>(weight.rows()); }
  int out() const { return static_cast<int>(weight.cols()); }
};

/// Layer normalization over the last axis (scale / shift).
template <typename T>
struct Norm {
  RowVector<T> scale;
  RowVector<T> shift;

  Norm() = default;
  explicit Norm(int width)
      : scale(RowVector<T>::Ones(width)), shift(RowVector<T>::Zero(width)) {}
};

template <typename T>
struct BlockParams {
  Norm<T> attn_norm;
  Affine<T> qkv;
  Affine<T> out;
  Norm<T> mlp_norm;
  Affine<T> mlp_in;
  Affine<T> mlp_out;
};

template <typename T>
struct BackboneParams {
  ModelConfig config;
  Norm<T> patch_norm_in;
  Affine<T> patch_proj;
  Norm<T> patch_norm_out;
  Matrix<T> pos_embed; // (num_patches + 1) x dim, row 0 belongs to the class token
  RowVector<T> cls_token;
  std::vector<BlockParams<T>> blocks;
  Norm<T> final_norm;

  /// Correctly shaped parameters: norms at identity, everything else zero.
  static BackboneParams zeros(const ModelConfig &cfg);
};

template <typename F, typename A>
void visit_affine(A &a, const std::string &prefix, F &&f) {
  f(prefix + ".weight", a.weight);
  if (a.has_bias())
    f(prefix + ".bias", a.bias);
}

template <typename F, typename N>
void visit_norm(N &n, const std::string &prefix, F &&f) {
  f(prefix + ".scale", n.scale);
  f(prefix + ".shift", n.shift);
}

/// Calls f(path, tensor) for every learnable tensor in canonical order.
/// Works for const and mutable parameter sets.
template <typename P, typename F>
void visit_params(P &p, const std::string &prefix, F &&f) {
  visit_norm(p.patch_norm_in, prefix + ".patch_embed.norm_in", f);
  visit_affine(p.patch_proj, prefix + ".patch_embed.proj", f);
  visit_norm(p.patch_norm_out, prefix + ".patch_embed.norm_out", f);
  f(prefix + ".pos_embed", p.pos_embed);
  f(prefix + ".cls_token", p.cls_token);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    auto &b = p.blocks[i];
    const std::string bp = prefix + ".blocks." + std::to_string(i);
    visit_norm(b.attn_norm, bp + ".attn_norm", f);
    visit_affine(b.qkv, bp + ".attn.qkv", f);
    visit_affine(b.out, bp + ".attn.out", f);
    visit_norm(b.mlp_norm, bp + ".mlp_norm", f);
    visit_affine(b.mlp_in, bp + ".mlp.in", f);
    visit_affine(b.mlp_out, bp + ".mlp.out", f);
  }
  visit_norm(p.final_norm, prefix + ".final_norm", f);
}

template <typename T>
std::vector<ParamRef<T>> param_refs(BackboneParams<T> &p,
                                    const std::string &prefix = "backbone") {
  std::vector<ParamRef<T>> refs;
  visit_params(p, prefix, [&](const std::string &path, auto &t) {
    refs.push_back(param_ref<T>(path, t));
  });
  return refs;
}

/// Learnable scalar count of an instantiated backbone.
template <typename T>
std::int64_t count_parameters(const BackboneParams<T> &p) {
  std::int64_t n = 0;
  visit_params(p, "backbone",
               [&](const std::string &, const auto &t) { n += t.size(); });
  return n;
}

/// Closed-form backbone size for a configuration:
///   patch embed  2*patch_dim + (patch_dim*dim + dim) + 2*dim
///   pos embed    (num_patches + 1) * dim
///   class token  dim
///   per block    2*dim + dim*3*inner + (inner*dim + dim)
///                + 2*dim + (dim*mlp + mlp) + (mlp*dim + dim)
///   final norm   2*dim
std::int64_t analytic_parameter_count(const ModelConfig &cfg);

/// Normalization scales 1 and shifts 0; affine weights from a normal
/// truncated at two standard deviations and rescaled to variance 1/fan_in;
/// additive terms 0; class token and positional table N(0, 0.02^2).
template <typename T>
BackboneParams<T> init_backbone(const ModelConfig &cfg, std::mt19937_64 &rng);

/// Fills an affine map with the truncated-normal initialization.
template <typename T>
void init_affine(Affine<T> &a, std::mt19937_64 &rng);

template <typename T>
void init_token(RowVector<T> &v, std::mt19937_64 &rng);

/// Encoder output: batch * (num_patches + 1) rows of width dim. Row 0 of each
/// image block is the class token; rows 1..num_patches follow patch order.
template <typename T>
struct TokenFeatures {
  int batch = 0;
  int tokens = 0;
  Matrix<T> rows;

  auto image(int b) const { return rows.middleRows(b * tokens, tokens); }
  auto image(int b) { return rows.middleRows(b * tokens, tokens); }
  auto patch_rows(int b) const { return rows.middleRows(b * tokens + 1, tokens - 1); }
  auto cls_row(int b) const { return rows.row(b * tokens); }
};

/// One forward pass of the encoder with everything needed for backward.
///
/// The pass borrows the parameters it was created with; they must outlive
/// it and must not change between forward and backward.
template <typename T>
class EncoderPass {
public:
  explicit EncoderPass(const BackboneParams<T> &params);
  ~EncoderPass();
  EncoderPass(EncoderPass &&) noexcept;
  EncoderPass &operator=(EncoderPass &&) noexcept;

  /// Runs the encoder. When masks is non-empty, embedded patches at masked
  /// positions are replaced with mask_token before positional embeddings are
  /// added. Throws ShapeError on mismatched inputs and NumericError when an
  /// activation becomes non-finite.
  const TokenFeatures<T> &forward(std::span<const Image> images,
                                  std::span<const MaskPattern> masks = {},
                                  const RowVector<T> *mask_token = nullptr);

  /// Accumulates d(loss)/d(params) into grads given d(loss)/d(features).
  /// d_mask_token receives the mask-token gradient when masking was used.
  void backward(const Matrix<T> &d_features, BackboneParams<T> &grads,
                RowVector<T> *d_mask_token = nullptr);

  const TokenFeatures<T> &features() const;

private:
  struct State;
  std::unique_ptr<State> state_;
};

template <typename T>
TokenFeatures<T> encode(const BackboneParams<T> &params,
                        std::span<const Image> images);

template <typename T>
TokenFeatures<T> encode_masked(const BackboneParams<T> &params,
                               std::span<const Image> images,
                               std::span<const MaskPattern> masks,
                               const RowVector<T> &mask_token);

/// Cast every tensor to another scalar type.
template <typename To, typename From>
BackboneParams<To> cast_params(const BackboneParams<From> &p);

} // namespace viny
