#pragma once

#include <string>
#include <vector>

#include "detailclip/config.hpp"
#include "detailclip/data.hpp"
#include "detailclip/nn.hpp"

namespace detailclip {

/// Causal transformer e. The final hidden state at each caption's EOS
/// position is projected to the joint embedding space.
class TextEncoder {
 public:
  TextEncoder(const TrainConfig& cfg, std::string prefix) : cfg_(cfg), prefix_(std::move(prefix)) {}

  template <class T>
  void init(ParamStore<T>& p, Rng& rng) const {
    p.add(prefix_ + ".token_embed", nn::trunc_normal<T>(rng, cfg_.vocab_size, cfg_.text_width, nn::kInitStd));
    p.add(prefix_ + ".pos_embed", nn::trunc_normal<T>(rng, cfg_.context_length, cfg_.text_width, 0.01));
    for (int l = 0; l < cfg_.text_layers; ++l) nn::init_block(p, rng, block_name(l), shape());
    nn::init_layer_norm(p, prefix_ + ".norm", cfg_.text_width);
    nn::init_linear(p, rng, prefix_ + ".proj", cfg_.text_width, cfg_.clip_embed_dim, false,
                    1.0 / std::sqrt(static_cast<double>(cfg_.text_width)));
  }

  /// Returns batch x clip_embed_dim.
  template <class T>
  Var forward(Graph<T>& g, ParamStore<T>& p, const std::vector<TokenizedCaption>& batch) const {
    if (batch.empty()) throw DegenerateBatch("empty caption batch");
    const int n = static_cast<int>(batch.size());
    const int L = cfg_.context_length;
    std::vector<int> ids;
    std::vector<int> eos_rows;
    ids.reserve(static_cast<std::size_t>(n) * L);
    for (int b = 0; b < n; ++b) {
      const auto& tc = batch[static_cast<std::size_t>(b)];
      if (static_cast<int>(tc.ids.size()) != L) {
        throw LengthError("caption has " + std::to_string(tc.ids.size()) + " tokens, context is " +
                          std::to_string(L));
      }
      if (tc.eot_index < 0 || tc.eot_index >= L || tc.ids[static_cast<std::size_t>(tc.eot_index)] != kEos) {
        throw LengthError("caption has no EOS at its eot_index");
      }
      for (const int id : tc.ids) {
        if (id < 0 || id >= cfg_.vocab_size) throw VocabularyError("token id " + std::to_string(id) + " out of range");
        ids.push_back(id);
      }
      eos_rows.push_back(b * L + tc.eot_index);
    }
    Var x = gather_rows(g, g.param(p, prefix_ + ".token_embed"), std::move(ids));
    x = add_tiled(g, x, g.param(p, prefix_ + ".pos_embed"));
    for (int l = 0; l < cfg_.text_layers; ++l) x = nn::block(g, p, block_name(l), shape(), x, n, L);
    x = nn::layer_norm(g, p, prefix_ + ".norm", x);
    x = gather_rows(g, x, std::move(eos_rows));
    return nn::linear_no_bias(g, p, prefix_ + ".proj", x);
  }

 private:
  nn::BlockShape shape() const { return {cfg_.text_width, cfg_.text_heads, cfg_.mlp_ratio, true}; }
  std::string block_name(int l) const { return prefix_ + ".blocks." + std::to_string(l); }

  TrainConfig cfg_;
  std::string prefix_;
};

}  // namespace detailclip
