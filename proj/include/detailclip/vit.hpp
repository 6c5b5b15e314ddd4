#pragma once

#include <string>
#include <vector>

#include "detailclip/config.hpp"
#include "detailclip/data.hpp"
#include "detailclip/nn.hpp"
#include "detailclip/types.hpp"

namespace detailclip {

/// Non-overlapping patches in row-major grid order; each row is the patch's
/// pixels flattened as (dy, dx, channel).
template <class T>
Mat<T> patchify(const Image& img, int patch) {
  if (img.height != img.width || patch <= 0 || img.height % patch != 0) {
    throw ShapeError("patchify: " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " image with patch " + std::to_string(patch));
  }
  const int grid = img.height / patch;
  Mat<T> out(grid * grid, patch * patch * 3);
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      const int row = gy * grid + gx;
      int col = 0;
      for (int dy = 0; dy < patch; ++dy) {
        for (int dx = 0; dx < patch; ++dx) {
          for (int c = 0; c < 3; ++c) out(row, col++) = static_cast<T>(img.at(gy * patch + dy, gx * patch + dx, c));
        }
      }
    }
  }
  return out;
}

template <class T>
Image unpatchify(const Mat<T>& patches, int side, int patch) {
  const int grid = side / patch;
  if (side % patch != 0 || patches.rows() != grid * grid || patches.cols() != patch * patch * 3) {
    throw ShapeError("unpatchify: " + shape_str(patches.rows(), patches.cols()) + " for side " +
                     std::to_string(side) + " and patch " + std::to_string(patch));
  }
  Image img(side, side);
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      int col = 0;
      for (int dy = 0; dy < patch; ++dy) {
        for (int dx = 0; dx < patch; ++dx) {
          for (int c = 0; c < 3; ++c) {
            img.at(gy * patch + dy, gx * patch + dx, c) = static_cast<float>(patches(gy * grid + gx, col++));
          }
        }
      }
    }
  }
  return img;
}

/// Patches of n images stacked as (n * P) x patch_dim.
template <class T>
Mat<T> patchify_batch(const std::vector<const Image*>& images, int image_size, int patch) {
  const int grid = image_size / patch;
  const int per = grid * grid;
  Mat<T> out(static_cast<Eigen::Index>(images.size()) * per, patch * patch * 3);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->height != image_size || images[i]->width != image_size) {
      throw ShapeError("view is " + std::to_string(images[i]->height) + "x" + std::to_string(images[i]->width) +
                       ", expected " + std::to_string(image_size) + "x" + std::to_string(image_size));
    }
    out.middleRows(static_cast<Eigen::Index>(i) * per, per) = patchify<T>(*images[i], patch);
  }
  return out;
}

/// Vision transformer g. Token sequences are [CLS] followed by P patch
/// tokens; masked patches have their embedding replaced by a learned mask
/// token before the position embeddings are added.
class VisionEncoder {
 public:
  VisionEncoder(const TrainConfig& cfg, std::string prefix) : cfg_(cfg), prefix_(std::move(prefix)) {}

  const std::string& prefix() const { return prefix_; }
  int seq_len() const { return cfg_.num_patches + 1; }

  template <class T>
  void init(ParamStore<T>& p, Rng& rng) const {
    nn::init_linear(p, rng, prefix_ + ".patch_embed", cfg_.patch_dim, cfg_.vision_width);
    p.add(prefix_ + ".cls_token", nn::trunc_normal<T>(rng, 1, cfg_.vision_width, nn::kInitStd));
    p.add(prefix_ + ".mask_token", nn::trunc_normal<T>(rng, 1, cfg_.vision_width, nn::kInitStd));
    p.add(prefix_ + ".pos_embed", nn::trunc_normal<T>(rng, seq_len(), cfg_.vision_width, nn::kInitStd));
    for (int l = 0; l < cfg_.vision_layers; ++l) nn::init_block(p, rng, block_name(l), shape());
    nn::init_layer_norm(p, prefix_ + ".norm", cfg_.vision_width);
  }

  /// `patches` is (n * P) x patch_dim. Returns (n * (P + 1)) x width tokens.
  template <class T>
  Var forward(Graph<T>& g, ParamStore<T>& p, const Mat<T>& patches, int n, const MaskSet* mask = nullptr,
              AttentionRecord<T>* record = nullptr) const {
    const int P = cfg_.num_patches;
    require_shape(patches, static_cast<Eigen::Index>(n) * P, cfg_.patch_dim, "vision encoder input");
    Var x = nn::linear(g, p, prefix_ + ".patch_embed", g.constant(patches));
    if (mask != nullptr) {
      if (mask->batch != n || mask->patches != P) throw ShapeError("mask shape does not match the batch");
      for (int b = 0; b < n; ++b) {
        const int c = mask->count(b);
        if (c != 0 && c != cfg_.masked_count) {
          throw MaskCardinalityError("sample " + std::to_string(b) + " has " + std::to_string(c) +
                                     " masked patches, expected " + std::to_string(cfg_.masked_count));
        }
      }
      std::vector<char> replace(mask->masked.begin(), mask->masked.end());
      x = substitute_rows(g, x, g.param(p, prefix_ + ".mask_token"), std::move(replace));
    }
    x = prepend_token(g, x, g.param(p, prefix_ + ".cls_token"), n);
    x = add_tiled(g, x, g.param(p, prefix_ + ".pos_embed"));
    if (record != nullptr) {
      record->layers = cfg_.vision_layers;
      record->heads = cfg_.vision_heads;
      record->rows.clear();
    }
    std::vector<Mat<T>> cls_rows;
    for (int l = 0; l < cfg_.vision_layers; ++l) {
      x = nn::block(g, p, block_name(l), shape(), x, n, seq_len(), record != nullptr ? &cls_rows : nullptr);
      if (record != nullptr) {
        for (auto& r : cls_rows) record->rows.push_back(std::move(r));
      }
    }
    return nn::layer_norm(g, p, prefix_ + ".norm", x);
  }

  /// Row indices of the CLS token of each of n sequences.
  std::vector<int> cls_rows(int n) const {
    std::vector<int> rows(static_cast<std::size_t>(n));
    for (int b = 0; b < n; ++b) rows[static_cast<std::size_t>(b)] = b * seq_len();
    return rows;
  }

  /// Row indices of all patch tokens, sequence-major.
  std::vector<int> patch_rows(int n) const {
    std::vector<int> rows;
    rows.reserve(static_cast<std::size_t>(n) * cfg_.num_patches);
    for (int b = 0; b < n; ++b) {
      for (int q = 1; q <= cfg_.num_patches; ++q) rows.push_back(b * seq_len() + q);
    }
    return rows;
  }

 private:
  nn::BlockShape shape() const { return {cfg_.vision_width, cfg_.vision_heads, cfg_.mlp_ratio, false}; }
  std::string block_name(int l) const { return prefix_ + ".blocks." + std::to_string(l); }

  TrainConfig cfg_;
  std::string prefix_;
};

}  // namespace detailclip
