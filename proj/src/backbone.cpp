// SPDX-License-Identifier: Apache-2.0
#include "viny/backbone.hpp"

#include <cmath>
#include <string>

#include "layers.hpp"
#include "viny/errors.hpp"

namespace viny {

std::int64_t analytic_parameter_count(const ModelConfig &cfg) {
  const std::int64_t d = cfg.dim;
  const std::int64_t pd = cfg.patch_dim();
  const std::int64_t inner = cfg.inner_dim();
  const std::int64_t mlp = cfg.mlp_dim;
  const std::int64_t patch_embed = 2 * pd + (pd * d + d) + 2 * d;
  const std::int64_t pos = static_cast<std::int64_t>(cfg.num_patches() + 1) * d;
  const std::int64_t cls = d;
  const std::int64_t block =
      2 * d + d * 3 * inner + (inner * d + d) + 2 * d + (d * mlp + mlp) + (mlp * d + d);
  const std::int64_t final_norm = 2 * d;
  return patch_embed + pos + cls + cfg.depth * block + final_norm;
}

template <typename T>
BackboneParams<T> BackboneParams<T>::zeros(const ModelConfig &cfg) {
  cfg.validate();
  BackboneParams<T> p;
  p.config = cfg;
  p.patch_norm_in = Norm<T>(cfg.patch_dim());
  p.patch_proj = Affine<T>(cfg.patch_dim(), cfg.dim, true);
  p.patch_norm_out = Norm<T>(cfg.dim);
  p.pos_embed = Matrix<T>::Zero(cfg.num_tokens(), cfg.dim);
  p.cls_token = RowVector<T>::Zero(cfg.dim);
  p.blocks.resize(static_cast<std::size_t>(cfg.depth));
  for (auto &b : p.blocks) {
    b.attn_norm = Norm<T>(cfg.dim);
    b.qkv = Affine<T>(cfg.dim, 3 * cfg.inner_dim(), false);
    b.out = Affine<T>(cfg.inner_dim(), cfg.dim, true);
    b.mlp_norm = Norm<T>(cfg.dim);
    b.mlp_in = Affine<T>(cfg.dim, cfg.mlp_dim, true);
    b.mlp_out = Affine<T>(cfg.mlp_dim, cfg.dim, true);
  }
  p.final_norm = Norm<T>(cfg.dim);
  return p;
}

namespace {

// Variance of a standard normal truncated to [-2, 2].
double truncated_variance() {
  const double pdf2 = std::exp(-2.0) / std::sqrt(2.0 * 3.14159265358979323846);
  const double mass = std::erf(2.0 / std::sqrt(2.0));
  return 1.0 - 4.0 * pdf2 / mass;
}

} // namespace

template <typename T>
void init_affine(Affine<T> &a, std::mt19937_64 &rng) {
  const double sigma = std::sqrt(1.0 / a.in() / truncated_variance());
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < a.weight.size(); ++i) {
    double z;
    do {
      z = normal(rng);
    } while (std::abs(z) > 2.0);
    a.weight.data()[i] = static_cast<T>(z * sigma);
  }
  if (a.has_bias())
    a.bias.setZero();
}

template <typename T>
void init_token(RowVector<T> &v, std::mt19937_64 &rng) {
  std::normal_distribution<double> normal(0.0, 0.02);
  for (Eigen::Index i = 0; i < v.size(); ++i)
    v[i] = static_cast<T>(normal(rng));
}

template <typename T>
BackboneParams<T> init_backbone(const ModelConfig &cfg, std::mt19937_64 &rng) {
  auto p = BackboneParams<T>::zeros(cfg);
  init_affine(p.patch_proj, rng);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (Eigen::Index i = 0; i < p.pos_embed.size(); ++i)
    p.pos_embed.data()[i] = static_cast<T>(normal(rng));
  init_token(p.cls_token, rng);
  for (auto &b : p.blocks) {
    init_affine(b.qkv, rng);
    init_affine(b.out, rng);
    init_affine(b.mlp_in, rng);
    init_affine(b.mlp_out, rng);
  }
  return p;
}

template <typename T>
struct EncoderPass<T>::State {
  struct Block {
    Matrix<T> x_in;
    detail::NormCache<T> norm1;
    Matrix<T> h1;
    Matrix<T> qkv;
    std::vector<Matrix<T>> probs; // batch * heads, each tokens x tokens
    Matrix<T> attn;
    Matrix<T> x_mid;
    detail::NormCache<T> norm2;
    Matrix<T> h2;
    Matrix<T> pre_act;
    Matrix<T> act;
  };

  const BackboneParams<T> *params;
  int batch = 0;
  bool masked = false;
  std::vector<std::vector<int>> masked_rows;
  Matrix<T> patches;
  detail::NormCache<T> norm_in;
  Matrix<T> normed_patches;
  detail::NormCache<T> norm_out;
  std::vector<Block> blocks;
  Matrix<T> x_last;
  detail::NormCache<T> norm_final;
  TokenFeatures<T> out;
};

template <typename T>
EncoderPass<T>::EncoderPass(const BackboneParams<T> &params)
    : state_(std::make_unique<State>()) {
  state_->params = &params;
}

template <typename T>
EncoderPass<T>::~EncoderPass() = default;
template <typename T>
EncoderPass<T>::EncoderPass(EncoderPass &&) noexcept = default;
template <typename T>
EncoderPass<T> &EncoderPass<T>::operator=(EncoderPass &&) noexcept = default;

template <typename T>
const TokenFeatures<T> &EncoderPass<T>::features() const {
  return state_->out;
}

template <typename T>
const TokenFeatures<T> &EncoderPass<T>::forward(std::span<const Image> images,
                                                std::span<const MaskPattern> masks,
                                                const RowVector<T> *mask_token) {
  State &s = *state_;
  const BackboneParams<T> &p = *s.params;
  const ModelConfig &cfg = p.config;
  const int batch = static_cast<int>(images.size());
  const int np = cfg.num_patches();
  const int tokens = cfg.num_tokens();
  const int inner = cfg.inner_dim();
  const int hd = cfg.head_dim;
  if (batch == 0)
    throw ShapeError("encode: empty batch");
  if (!masks.empty()) {
    if (static_cast<int>(masks.size()) != batch)
      throw ShapeError("encode_masked: " + std::to_string(masks.size()) + " masks for " +
                       std::to_string(batch) + " images");
    if (mask_token == nullptr || mask_token->size() != cfg.dim)
      throw ShapeError("encode_masked: mask token must have width dim");
    for (const auto &m : masks)
      if (m.size() != np)
        throw ShapeError("encode_masked: mask length " + std::to_string(m.size()) +
                         " != num_patches " + std::to_string(np));
  }
  s.batch = batch;
  s.masked = !masks.empty();

  s.patches.resize(static_cast<Eigen::Index>(batch) * np, cfg.patch_dim());
  for (int b = 0; b < batch; ++b)
    s.patches.middleRows(static_cast<Eigen::Index>(b) * np, np) = patchify<T>(images[b], cfg);

  const Matrix<T> a = detail::norm_forward(s.patches, p.patch_norm_in, s.norm_in);
  s.normed_patches = a;
  const Matrix<T> e0 = detail::affine_forward(a, p.patch_proj, np);
  Matrix<T> embedded = detail::norm_forward(e0, p.patch_norm_out, s.norm_out);

  s.masked_rows.assign(static_cast<std::size_t>(batch), {});
  if (s.masked) {
    for (int b = 0; b < batch; ++b)
      for (int i = 0; i < np; ++i)
        if (masks[b].masked(i)) {
          embedded.row(static_cast<Eigen::Index>(b) * np + i) = *mask_token;
          s.masked_rows[b].push_back(i);
        }
  }

  Matrix<T> x(static_cast<Eigen::Index>(batch) * tokens, cfg.dim);
  for (int b = 0; b < batch; ++b) {
    x.row(static_cast<Eigen::Index>(b) * tokens) = p.cls_token + p.pos_embed.row(0);
    x.middleRows(static_cast<Eigen::Index>(b) * tokens + 1, np) =
        embedded.middleRows(static_cast<Eigen::Index>(b) * np, np) +
        p.pos_embed.bottomRows(np);
  }

  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  s.blocks.resize(p.blocks.size());
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    const auto &bp = p.blocks[l];
    auto &c = s.blocks[l];
    c.x_in = x;
    c.h1 = detail::norm_forward(x, bp.attn_norm, c.norm1);
    c.qkv = detail::affine_forward(c.h1, bp.qkv, tokens);
    c.attn.resize(x.rows(), inner);
    c.probs.resize(static_cast<std::size_t>(batch) * cfg.heads);
    for (int b = 0; b < batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * tokens;
      for (int h = 0; h < cfg.heads; ++h) {
        const auto q = c.qkv.block(r0, h * hd, tokens, hd);
        const auto k = c.qkv.block(r0, inner + h * hd, tokens, hd);
        const auto v = c.qkv.block(r0, 2 * inner + h * hd, tokens, hd);
        Matrix<T> &pr = c.probs[static_cast<std::size_t>(b) * cfg.heads + h];
        pr.noalias() = (q * k.transpose()) * scale;
        const Eigen::Matrix<T, Eigen::Dynamic, 1> row_max = pr.rowwise().maxCoeff();
        pr = (pr.colwise() - row_max).array().exp().matrix();
        const Eigen::Matrix<T, Eigen::Dynamic, 1> row_sum = pr.rowwise().sum();
        pr.array().colwise() /= row_sum.array();
        c.attn.block(r0, h * hd, tokens, hd).noalias() = pr * v;
      }
    }
    c.x_mid = x + detail::affine_forward(c.attn, bp.out, tokens);
    c.h2 = detail::norm_forward(c.x_mid, bp.mlp_norm, c.norm2);
    c.pre_act = detail::affine_forward(c.h2, bp.mlp_in, tokens);
    c.act = c.pre_act.unaryExpr([](T v) { return detail::gelu(v); });
    x = c.x_mid + detail::affine_forward(c.act, bp.mlp_out, tokens);
  }
  s.x_last = x;
  s.out.batch = batch;
  s.out.tokens = tokens;
  s.out.rows = detail::norm_forward(x, p.final_norm, s.norm_final);

  if (!s.out.rows.allFinite()) {
    std::string where = "final norm";
    for (std::size_t l = 0; l < s.blocks.size(); ++l) {
      const Matrix<T> &next = l + 1 < s.blocks.size() ? s.blocks[l + 1].x_in : s.x_last;
      if (!next.allFinite()) {
        where = "block " + std::to_string(l);
        break;
      }
    }
    throw NumericError("encoder produced non-finite activations at " + where);
  }
  return s.out;
}

template <typename T>
void EncoderPass<T>::backward(const Matrix<T> &d_features, BackboneParams<T> &grads,
                              RowVector<T> *d_mask_token) {
  State &s = *state_;
  const BackboneParams<T> &p = *s.params;
  const ModelConfig &cfg = p.config;
  const int batch = s.batch;
  const int np = cfg.num_patches();
  const int tokens = cfg.num_tokens();
  const int inner = cfg.inner_dim();
  const int hd = cfg.head_dim;
  if (d_features.rows() != s.out.rows.rows() || d_features.cols() != s.out.rows.cols())
    throw ShapeError("encoder backward: feature gradient shape mismatch");

  Matrix<T> dx = detail::norm_backward(d_features, p.final_norm, s.norm_final, grads.final_norm);

  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  for (std::size_t li = s.blocks.size(); li-- > 0;) {
    const auto &bp = p.blocks[li];
    auto &bg = grads.blocks[li];
    const auto &c = s.blocks[li];

    // MLP branch.
    Matrix<T> d_act = detail::affine_backward(dx, c.act, bp.mlp_out, bg.mlp_out);
    d_act.array() *= c.pre_act.unaryExpr([](T v) { return detail::gelu_grad(v); }).array();
    Matrix<T> d_h2 = detail::affine_backward(d_act, c.h2, bp.mlp_in, bg.mlp_in);
    dx += detail::norm_backward(d_h2, bp.mlp_norm, c.norm2, bg.mlp_norm);

    // Attention branch.
    const Matrix<T> d_attn = detail::affine_backward(dx, c.attn, bp.out, bg.out);
    Matrix<T> d_qkv(c.qkv.rows(), c.qkv.cols());
    for (int b = 0; b < batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * tokens;
      for (int h = 0; h < cfg.heads; ++h) {
        const auto q = c.qkv.block(r0, h * hd, tokens, hd);
        const auto k = c.qkv.block(r0, inner + h * hd, tokens, hd);
        const auto v = c.qkv.block(r0, 2 * inner + h * hd, tokens, hd);
        const Matrix<T> &pr = c.probs[static_cast<std::size_t>(b) * cfg.heads + h];
        const auto d_o = d_attn.block(r0, h * hd, tokens, hd);
        Matrix<T> d_p = d_o * v.transpose();
        d_qkv.block(r0, 2 * inner + h * hd, tokens, hd).noalias() = pr.transpose() * d_o;
        const Eigen::Matrix<T, Eigen::Dynamic, 1> dot =
            (d_p.array() * pr.array()).rowwise().sum();
        Matrix<T> d_s = (pr.array() * (d_p.colwise() - dot).array()).matrix() * scale;
        d_qkv.block(r0, h * hd, tokens, hd).noalias() = d_s * k;
        d_qkv.block(r0, inner + h * hd, tokens, hd).noalias() = d_s.transpose() * q;
      }
    }
    Matrix<T> d_h1 = detail::affine_backward(d_qkv, c.h1, bp.qkv, bg.qkv);
    dx += detail::norm_backward(d_h1, bp.attn_norm, c.norm1, bg.attn_norm);
  }

  // Token assembly.
  Matrix<T> d_embedded(static_cast<Eigen::Index>(batch) * np, cfg.dim);
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * tokens;
    grads.cls_token += dx.row(r0);
    grads.pos_embed.row(0) += dx.row(r0);
    grads.pos_embed.bottomRows(np) += dx.middleRows(r0 + 1, np);
    d_embedded.middleRows(static_cast<Eigen::Index>(b) * np, np) = dx.middleRows(r0 + 1, np);
  }
  if (s.masked) {
    for (int b = 0; b < batch; ++b)
      for (int i : s.masked_rows[b]) {
        const Eigen::Index row = static_cast<Eigen::Index>(b) * np + i;
        if (d_mask_token != nullptr)
          *d_mask_token += d_embedded.row(row);
        d_embedded.row(row).setZero();
      }
  }

  const Matrix<T> d_e0 =
      detail::norm_backward(d_embedded, p.patch_norm_out, s.norm_out, grads.patch_norm_out);
  const Matrix<T> d_a = detail::affine_backward(d_e0, s.normed_patches, p.patch_proj,
                                                grads.patch_proj);
  detail::norm_backward(d_a, p.patch_norm_in, s.norm_in, grads.patch_norm_in);
}

template <typename T>
TokenFeatures<T> encode(const BackboneParams<T> &params, std::span<const Image> images) {
  EncoderPass<T> pass(params);
  return pass.forward(images);
}

template <typename T>
TokenFeatures<T> encode_masked(const BackboneParams<T> &params, std::span<const Image> images,
                               std::span<const MaskPattern> masks,
                               const RowVector<T> &mask_token) {
  if (masks.size() != images.size())
    throw ShapeError("encode_masked: one mask per image required");
  EncoderPass<T> pass(params);
  return pass.forward(images, masks, &mask_token);
}

template <typename To, typename From>
BackboneParams<To> cast_params(const BackboneParams<From> &p) {
  auto out = BackboneParams<To>::zeros(p.config);
  std::vector<const From *> src;
  visit_params(p, "backbone", [&](const std::string &, const auto &t) { src.push_back(t.data()); });
  std::size_t i = 0;
  visit_params(out, "backbone", [&](const std::string &, auto &t) {
    for (Eigen::Index j = 0; j < t.size(); ++j)
      t.data()[j] = static_cast<To>(src[i][j]);
    ++i;
  });
  return out;
}

template struct BackboneParams<float>;
template struct BackboneParams<double>;
template class EncoderPass<float>;
template class EncoderPass<double>;
template BackboneParams<float> init_backbone<float>(const ModelConfig &, std::mt19937_64 &);
template BackboneParams<double> init_backbone<double>(const ModelConfig &, std::mt19937_64 &);
template void init_affine<float>(Affine<float> &, std::mt19937_64 &);
template void init_affine<double>(Affine<double> &, std::mt19937_64 &);
template void init_token<float>(RowVector<float> &, std::mt19937_64 &);
template void init_token<double>(RowVector<double> &, std::mt19937_64 &);
template TokenFeatures<float> encode<float>(const BackboneParams<float> &,
                                            std::span<const Image>);
template TokenFeatures<double> encode<double>(const BackboneParams<double> &,
                                              std::span<const Image>);
template TokenFeatures<float> encode_masked<float>(const BackboneParams<float> &,
                                                   std::span<const Image>,
                                                   std::span<const MaskPattern>,
                                                   const RowVector<float> &);
template TokenFeatures<double> encode_masked<double>(const BackboneParams<double> &,
                                                     std::span<const Image>,
                                                     std::span<const MaskPattern>,
                                                     const RowVector<double> &);
template BackboneParams<double> cast_params<double, float>(const BackboneParams<float> &);
template BackboneParams<float> cast_params<float, double>(const BackboneParams<double> &);

} // namespace viny
