#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "detailclip/config.hpp"
#include "detailclip/nn.hpp"
#include "detailclip/types.hpp"

namespace detailclip {

/// Projection head h, shared between the CLS and patch positions: a 3-layer
/// GELU MLP into an L2-normalised bottleneck, then a weight-normalised
/// (unit-gain) linear layer to head_out_dim logits.
class DistillHead {
 public:
  DistillHead(const TrainConfig& cfg, std::string prefix) : cfg_(cfg), prefix_(std::move(prefix)) {}

  template <class T>
  void init(ParamStore<T>& p, Rng& rng) const {
    nn::init_linear(p, rng, prefix_ + ".fc1", cfg_.vision_width, cfg_.head_hidden_dim);
    nn::init_linear(p, rng, prefix_ + ".fc2", cfg_.head_hidden_dim, cfg_.head_hidden_dim);
    nn::init_linear(p, rng, prefix_ + ".fc3", cfg_.head_hidden_dim, cfg_.head_bottleneck_dim);
    p.add(prefix_ + ".last.v", nn::trunc_normal<T>(rng, cfg_.head_bottleneck_dim, cfg_.head_out_dim, nn::kInitStd));
  }

  /// Returns (bottleneck, logits) for every row of `tokens`.
  template <class T>
  std::pair<Var, Var> forward_with_bottleneck(Graph<T>& g, ParamStore<T>& p, Var tokens) const {
    if (g.value(tokens).cols() != cfg_.vision_width) throw ShapeError("distill head: wrong token width");
    Var h = nn::linear(g, p, prefix_ + ".fc1", tokens);
    h = gelu(g, h);
    h = nn::linear(g, p, prefix_ + ".fc2", h);
    h = gelu(g, h);
    h = nn::linear(g, p, prefix_ + ".fc3", h);
    Var z = l2_normalize_rows(g, h);
    Var w = normalize_columns(g, g.param(p, prefix_ + ".last.v"));
    return {z, matmul(g, z, w)};
  }

  template <class T>
  Var forward(Graph<T>& g, ParamStore<T>& p, Var tokens) const {
    return forward_with_bottleneck(g, p, tokens).second;
  }

 private:
  TrainConfig cfg_;
  std::string prefix_;
};

/// Image-side CLIP projection of the CLS token and the learnable logit scale
/// 1/tau, stored as log(1/tau).
class ClipProjection {
 public:
  ClipProjection(const TrainConfig& cfg, std::string prefix) : cfg_(cfg), prefix_(std::move(prefix)) {}

  template <class T>
  void init(ParamStore<T>& p, Rng& rng) const {
    nn::init_linear(p, rng, prefix_ + ".image_proj", cfg_.vision_width, cfg_.clip_embed_dim, false,
                    1.0 / std::sqrt(static_cast<double>(cfg_.vision_width)));
    p.add(logit_scale_name(), Mat<T>::Constant(1, 1, static_cast<T>(std::log(cfg_.logit_scale_init))));
  }

  /// `cls_rows` selects the CLS token of each sequence in `tokens`.
  template <class T>
  Var image_embed(Graph<T>& g, ParamStore<T>& p, Var tokens, std::vector<int> cls_rows) const {
    if (g.value(tokens).cols() != cfg_.vision_width) throw ShapeError("clip projection: wrong token width");
    return nn::linear_no_bias(g, p, prefix_ + ".image_proj", gather_rows(g, tokens, std::move(cls_rows)));
  }

  /// 1/tau = min(exp(log_scale), logit_scale_max).
  template <class T>
  Var inverse_temperature(Graph<T>& g, ParamStore<T>& p) const {
    return exp_clamped(g, g.param(p, logit_scale_name()), static_cast<T>(cfg_.logit_scale_max));
  }

  std::string logit_scale_name() const { return prefix_ + ".logit_scale"; }

 private:
  TrainConfig cfg_;
  std::string prefix_;
};

/// Reconstruction decoder d with its pixel head. Consumes every patch token
/// (the CLS token is dropped) and predicts pixels for all P positions.
class Decoder {
 public:
  Decoder(const TrainConfig& cfg, std::string prefix) : cfg_(cfg), prefix_(std::move(prefix)) {}

  template <class T>
  void init(ParamStore<T>& p, Rng& rng) const {
    nn::init_linear(p, rng, prefix_ + ".embed", cfg_.vision_width, cfg_.decoder_width);
    p.add(prefix_ + ".pos_embed", nn::trunc_normal<T>(rng, cfg_.num_patches, cfg_.decoder_width, nn::kInitStd));
    for (int l = 0; l < cfg_.decoder_layers; ++l) nn::init_block(p, rng, block_name(l), shape());
    nn::init_layer_norm(p, prefix_ + ".norm", cfg_.decoder_width);
    nn::init_linear(p, rng, prefix_ + ".pixel_head", cfg_.decoder_width, cfg_.patch_dim);
  }

  /// `tokens` is (n * (P + 1)) x vision_width. Returns (n * P) x patch_dim.
  template <class T>
  Var forward(Graph<T>& g, ParamStore<T>& p, Var tokens, int n, const MaskSet* mask = nullptr) const {
    const int P = cfg_.num_patches;
    require_shape(g.value(tokens), static_cast<Eigen::Index>(n) * (P + 1), cfg_.vision_width, "decoder input");
    if (mask != nullptr && (mask->batch != n || mask->patches != P)) throw ShapeError("decoder: mask shape");
    std::vector<int> rows;
    rows.reserve(static_cast<std::size_t>(n) * P);
    for (int b = 0; b < n; ++b) {
      for (int q = 1; q <= P; ++q) rows.push_back(b * (P + 1) + q);
    }
    Var x = gather_rows(g, tokens, std::move(rows));
    x = nn::linear(g, p, prefix_ + ".embed", x);
    x = add_tiled(g, x, g.param(p, prefix_ + ".pos_embed"));
    for (int l = 0; l < cfg_.decoder_layers; ++l) x = nn::block(g, p, block_name(l), shape(), x, n, P);
    x = nn::layer_norm(g, p, prefix_ + ".norm", x);
    return nn::linear(g, p, prefix_ + ".pixel_head", x);
  }

 private:
  nn::BlockShape shape() const { return {cfg_.decoder_width, cfg_.decoder_heads, cfg_.mlp_ratio, false}; }
  std::string block_name(int l) const { return prefix_ + ".blocks." + std::to_string(l); }

  TrainConfig cfg_;
  std::string prefix_;
};

}  // namespace detailclip
