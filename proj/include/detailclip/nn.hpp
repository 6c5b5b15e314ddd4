#pragma once

#include <string>
#include <vector>

#include "detailclip/autograd.hpp"

namespace detailclip::nn {

inline constexpr double kInitStd = 0.02;

template <class T>
Mat<T> trunc_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols, double std) {
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.trunc_normal(std));
  return m;
}

/// `name.weight` (in x out) and optionally `name.bias` (1 x out).
template <class T>
void init_linear(ParamStore<T>& p, Rng& rng, const std::string& name, int in, int out, bool bias = true,
                 double std = kInitStd) {
  p.add(name + ".weight", trunc_normal<T>(rng, in, out, std));
  if (bias) p.add(name + ".bias", Mat<T>::Zero(1, out));
}

template <class T>
void init_layer_norm(ParamStore<T>& p, const std::string& name, int width) {
  p.add(name + ".gamma", Mat<T>::Ones(1, width));
  p.add(name + ".beta", Mat<T>::Zero(1, width));
}

template <class T>
Var linear(Graph<T>& g, ParamStore<T>& p, const std::string& name, Var x) {
  return affine(g, x, g.param(p, name + ".weight"), g.param(p, name + ".bias"));
}

template <class T>
Var linear_no_bias(Graph<T>& g, ParamStore<T>& p, const std::string& name, Var x) {
  return matmul(g, x, g.param(p, name + ".weight"));
}

template <class T>
Var layer_norm(Graph<T>& g, ParamStore<T>& p, const std::string& name, Var x) {
  return detailclip::layer_norm(g, x, g.param(p, name + ".gamma"), g.param(p, name + ".beta"));
}

struct BlockShape {
  int width = 0;
  int heads = 0;
  int mlp_ratio = 4;
  bool causal = false;
};

template <class T>
void init_block(ParamStore<T>& p, Rng& rng, const std::string& name, const BlockShape& s) {
  init_layer_norm(p, name + ".ln1", s.width);
  init_linear(p, rng, name + ".attn.qkv", s.width, 3 * s.width);
  init_linear(p, rng, name + ".attn.proj", s.width, s.width);
  init_layer_norm(p, name + ".ln2", s.width);
  init_linear(p, rng, name + ".mlp.fc1", s.width, s.mlp_ratio * s.width);
  init_linear(p, rng, name + ".mlp.fc2", s.mlp_ratio * s.width, s.width);
}

/// Pre-norm transformer block over n sequences of `seq` tokens.
template <class T>
Var block(Graph<T>& g, ParamStore<T>& p, const std::string& name, const BlockShape& s, Var x, int n, int seq,
          std::vector<Mat<T>>* cls_rows = nullptr) {
  Var h = layer_norm(g, p, name + ".ln1", x);
  h = linear(g, p, name + ".attn.qkv", h);
  h = attention(g, h, n, seq, s.heads, s.causal, cls_rows);
  h = linear(g, p, name + ".attn.proj", h);
  x = add(g, x, h);
  h = layer_norm(g, p, name + ".ln2", x);
  h = linear(g, p, name + ".mlp.fc1", h);
  h = gelu(g, h);
  h = linear(g, p, name + ".mlp.fc2", h);
  return add(g, x, h);
}

}  // namespace detailclip::nn
