#pragma once

#include <deque>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <unsupported/Eigen/SpecialFunctions>

#include "detailclip/tensor.hpp"

namespace detailclip {

/// Named parameter arrays with gradient accumulators, in insertion order.
template <class T>
class ParamStore {
 public:
  void add(const std::string& name, Mat<T> value) {
    if (index_.count(name) != 0) throw ShapeMismatch("duplicate parameter " + name);
    index_.emplace(name, entries_.size());
    order_.push_back(name);
    entries_.push_back({std::move(value), Mat<T>()});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Mat<T>& value(const std::string& name) { return entry(name).value; }
  const Mat<T>& value(const std::string& name) const { return entry(name).value; }

  Mat<T>& grad(const std::string& name) {
    auto& e = entry(name);
    if (e.grad.size() == 0) e.grad = Mat<T>::Zero(e.value.rows(), e.value.cols());
    return e.grad;
  }

  /// Gradient without allocating; empty when no gradient was accumulated.
  const Mat<T>& grad_or_empty(const std::string& name) const { return entry(name).grad; }

  const std::vector<std::string>& names() const { return order_; }

  void zero_grad() {
    for (auto& e : entries_) e.grad.resize(0, 0);
  }

  std::size_t scalar_count(const std::string& prefix = {}) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < order_.size(); ++i) {
      if (order_[i].rfind(prefix, 0) == 0) n += static_cast<std::size_t>(entries_[i].value.size());
    }
    return n;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < order_.size(); ++i) out.add(order_[i], entries_[i].value.template cast<U>());
    return out;
  }

 private:
  struct Entry {
    Mat<T> value;
    Mat<T> grad;
  };

  Entry& entry(const std::string& name) {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ShapeMismatch("unknown parameter " + name);
    return entries_[it->second];
  }
  const Entry& entry(const std::string& name) const { return const_cast<ParamStore*>(this)->entry(name); }

  std::vector<std::string> order_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<Entry> entries_;
};

struct Var {
  int id = -1;
};

/// Reverse-mode tape. Every op computes its value eagerly and, when gradients
/// are enabled and some input needs one, records a closure that maps the
/// output gradient onto its inputs. A graph with gradients disabled is a plain
/// forward evaluator (teacher branch, evaluation).
template <class T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, const Mat<T>&)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Mat<T> value) {
    nodes_.push_back(Node{std::move(value), Mat<T>(), false, nullptr, nullptr, {}});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  /// Leaf bound to a stored parameter. Repeated lookups of the same name
  /// return the same leaf, so gradients from every use accumulate into it.
  Var param(ParamStore<T>& store, const std::string& name) {
    const auto key = std::make_pair(static_cast<const void*>(&store), name);
    if (const auto it = param_cache_.find(key); it != param_cache_.end()) return it->second;
    nodes_.push_back(Node{store.value(name), Mat<T>(), grad_enabled_, nullptr, &store, name});
    const Var v{static_cast<int>(nodes_.size()) - 1};
    param_cache_.emplace(key, v);
    return v;
  }

  const Mat<T>& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }

  T scalar(Var v) const { return value(v)(0, 0); }

  bool needs_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).needs_grad; }

  /// Gradient buffer for `v`, zero-initialised on first access.
  Mat<T>& grad(Var v) {
    auto& n = nodes_.at(static_cast<std::size_t>(v.id));
    if (n.grad.size() == 0) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Var record(Mat<T> value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    if (grad_enabled_) {
      for (const Var in : inputs) needs = needs || needs_grad(in);
    }
    nodes_.push_back(Node{std::move(value), Mat<T>(), needs, needs ? std::move(backward) : nullptr, nullptr, {}});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  /// Back-propagates from a 1x1 root and adds leaf gradients into their
  /// parameter stores.
  void backward(Var root) {
    if (!grad_enabled_) throw ShapeError("backward on a graph without gradients");
    require_shape(value(root), 1, 1, "backward root");
    grad(root)(0, 0) = T(1);
    for (int i = root.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, n.grad);
    }
    for (auto& n : nodes_) {
      if (n.store != nullptr && n.grad.size() != 0) n.store->grad(n.param_name) += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool needs_grad;
    Backward backward;
    ParamStore<T>* store;
    std::string param_name;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::map<std::pair<const void*, std::string>, Var> param_cache_;
};

// ---------------------------------------------------------------------------
// Differentiable ops. Values are computed before `record`, and closures
// capture node ids rather than references.

template <class T>
Var matmul(Graph<T>& g, Var a, Var b) {
  const Mat<T>& av = g.value(a);
  const Mat<T>& bv = g.value(b);
  if (av.cols() != bv.rows()) throw ShapeError("matmul: " + shape_str(av.rows(), av.cols()) + " * " +
                                               shape_str(bv.rows(), bv.cols()));
  Mat<T> out = av * bv;
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& g, const Mat<T>& go) {
    if (g.needs_grad(a)) g.grad(a).noalias() += go * g.value(b).transpose();
    if (g.needs_grad(b)) g.grad(b).noalias() += g.value(a).transpose() * go;
  });
}

/// x * W + b with b broadcast over rows.
template <class T>
Var affine(Graph<T>& g, Var x, Var w, Var b) {
  const Mat<T>& xv = g.value(x);
  const Mat<T>& wv = g.value(w);
  const Mat<T>& bv = g.value(b);
  if (xv.cols() != wv.rows() || bv.rows() != 1 || bv.cols() != wv.cols()) {
    throw ShapeError("affine: input " + shape_str(xv.rows(), xv.cols()) + ", weight " +
                     shape_str(wv.rows(), wv.cols()) + ", bias " + shape_str(bv.rows(), bv.cols()));
  }
  Mat<T> out(xv.rows(), wv.cols());
  out.noalias() = xv * wv;
  out.rowwise() += bv.row(0);
  return g.record(std::move(out), {x, w, b}, [x, w, b](Graph<T>& g, const Mat<T>& go) {
    if (g.needs_grad(x)) g.grad(x).noalias() += go * g.value(w).transpose();
    if (g.needs_grad(w)) g.grad(w).noalias() += g.value(x).transpose() * go;
    if (g.needs_grad(b)) g.grad(b) += go.colwise().sum();
  });
}

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
  const Mat<T>& av = g.value(a);
  const Mat<T>& bv = g.value(b);
  require_shape(bv, av.rows(), av.cols(), "add");
  Mat<T> out = av + bv;
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& g, const Mat<T>& go) {
    if (g.needs_grad(a)) g.grad(a) += go;
    if (g.needs_grad(b)) g.grad(b) += go;
  });
}

template <class T>
Var scale(Graph<T>& g, Var a, T s) {
  Mat<T> out = g.value(a) * s;
  return g.record(std::move(out), {a}, [a, s](Graph<T>& g, const Mat<T>& go) { g.grad(a) += go * s; });
}

/// Σ w_i x_i over 1x1 nodes.
template <class T>
Var weighted_sum(Graph<T>& g, const std::vector<Var>& xs, const std::vector<T>& ws) {
  if (xs.size() != ws.size()) throw ShapeError("weighted_sum: arity mismatch");
  Mat<T> out = Mat<T>::Zero(1, 1);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    require_shape(g.value(xs[i]), 1, 1, "weighted_sum term");
    out(0, 0) += ws[i] * g.scalar(xs[i]);
  }
  return g.record(std::move(out), xs, [xs, ws](Graph<T>& g, const Mat<T>& go) {
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (g.needs_grad(xs[i])) g.grad(xs[i])(0, 0) += ws[i] * go(0, 0);
    }
  });
}

/// x (n*seq rows) + pos (seq rows) tiled over the n sequences.
template <class T>
Var add_tiled(Graph<T>& g, Var x, Var pos) {
  const Mat<T>& xv = g.value(x);
  const Mat<T>& pv = g.value(pos);
  const Eigen::Index seq = pv.rows();
  if (xv.cols() != pv.cols() || seq == 0 || xv.rows() % seq != 0) {
    throw ShapeError("add_tiled: " + shape_str(xv.rows(), xv.cols()) + " vs " + shape_str(pv.rows(), pv.cols()));
  }
  Mat<T> out = xv;
  for (Eigen::Index r = 0; r < xv.rows(); r += seq) out.middleRows(r, seq) += pv;
  return g.record(std::move(out), {x, pos}, [x, pos, seq](Graph<T>& g, const Mat<T>& go) {
    if (g.needs_grad(x)) g.grad(x) += go;
    if (g.needs_grad(pos)) {
      auto& gp = g.grad(pos);
      for (Eigen::Index r = 0; r < go.rows(); r += seq) gp += go.middleRows(r, seq);
    }
  });
}

template <class T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta, T eps = T(1e-6)) {
  const Mat<T>& xv = g.value(x);
  const Eigen::Index n = xv.rows();
  const Eigen::Index d = xv.cols();
  require_shape(g.value(gamma), 1, d, "layer_norm gamma");
  require_shape(g.value(beta), 1, d, "layer_norm beta");
  Mat<T> xhat(n, d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = xv.row(r).mean();
    const T var = (xv.row(r).array() - mean).square().mean();
    rstd(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * rstd(r);
  }
  Mat<T> out = (xhat.array().rowwise() * g.value(gamma).row(0).array()).rowwise() + g.value(beta).row(0).array();
  return g.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd)](Graph<T>& g, const Mat<T>& go) {
                    if (g.needs_grad(gamma)) g.grad(gamma) += (go.array() * xhat.array()).colwise().sum().matrix();
                    if (g.needs_grad(beta)) g.grad(beta) += go.colwise().sum();
                    if (g.needs_grad(x)) {
                      const Mat<T> dxhat = go.array().rowwise() * g.value(gamma).row(0).array();
                      auto& gx = g.grad(x);
                      for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                        const T m1 = dxhat.row(r).mean();
                        const T m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
                        gx.row(r).array() += rstd(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                      }
                    }
                  });
}

/// Exact (erf) GELU.
template <class T>
Var gelu(Graph<T>& g, Var x) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  const auto xv = g.value(x).array();
  Mat<T> out = (T(0.5) * xv * (T(1) + (xv * inv_sqrt2).erf())).matrix();
  return g.record(std::move(out), {x}, [x, inv_sqrt2](Graph<T>& g, const Mat<T>& go) {
    const T inv_sqrt2pi = T(0.39894228040143267794);
    const auto v = g.value(x).array();
    g.grad(x).array() +=
        go.array() * (T(0.5) * (T(1) + (v * inv_sqrt2).erf()) + v * inv_sqrt2pi * (T(-0.5) * v.square()).exp());
  });
}

/// Rows of `x` selected (with repetition allowed) by `rows`.
template <class T>
Var gather_rows(Graph<T>& g, Var x, std::vector<int> rows) {
  const Mat<T>& xv = g.value(x);
  Mat<T> out(static_cast<Eigen::Index>(rows.size()), xv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= xv.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = xv.row(rows[i]);
  }
  return g.record(std::move(out), {x}, [x, rows = std::move(rows)](Graph<T>& g, const Mat<T>& go) {
    auto& gx = g.grad(x);
    for (std::size_t i = 0; i < rows.size(); ++i) gx.row(rows[i]) += go.row(static_cast<Eigen::Index>(i));
  });
}

/// Replaces every row r with replace[r] != 0 by the 1 x width `token` row.
template <class T>
Var substitute_rows(Graph<T>& g, Var x, Var token, std::vector<char> replace) {
  const Mat<T>& xv = g.value(x);
  require_shape(g.value(token), 1, xv.cols(), "substitute_rows token");
  if (static_cast<Eigen::Index>(replace.size()) != xv.rows()) throw ShapeError("substitute_rows: mask length");
  Mat<T> out = xv;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    if (replace[static_cast<std::size_t>(r)]) out.row(r) = g.value(token).row(0);
  }
  return g.record(std::move(out), {x, token}, [x, token, replace = std::move(replace)](Graph<T>& g, const Mat<T>& go) {
    const bool gx_needed = g.needs_grad(x);
    const bool gt_needed = g.needs_grad(token);
    for (Eigen::Index r = 0; r < go.rows(); ++r) {
      if (replace[static_cast<std::size_t>(r)]) {
        if (gt_needed) g.grad(token).row(0) += go.row(r);
      } else if (gx_needed) {
        g.grad(x).row(r) += go.row(r);
      }
    }
  });
}

/// Inserts `token` ahead of each of the n blocks of `per` rows.
template <class T>
Var prepend_token(Graph<T>& g, Var x, Var token, int n) {
  const Mat<T>& xv = g.value(x);
  require_shape(g.value(token), 1, xv.cols(), "prepend_token token");
  if (n <= 0 || xv.rows() % n != 0) throw ShapeError("prepend_token: rows not divisible by sequence count");
  const Eigen::Index per = xv.rows() / n;
  Mat<T> out(xv.rows() + n, xv.cols());
  for (Eigen::Index s = 0; s < n; ++s) {
    out.row(s * (per + 1)) = g.value(token).row(0);
    out.middleRows(s * (per + 1) + 1, per) = xv.middleRows(s * per, per);
  }
  return g.record(std::move(out), {x, token}, [x, token, n, per](Graph<T>& g, const Mat<T>& go) {
    for (Eigen::Index s = 0; s < n; ++s) {
      if (g.needs_grad(token)) g.grad(token).row(0) += go.row(s * (per + 1));
      if (g.needs_grad(x)) g.grad(x).middleRows(s * per, per) += go.middleRows(s * (per + 1) + 1, per);
    }
  });
}

/// Row-wise x / max(|x|, eps).
template <class T>
Var l2_normalize_rows(Graph<T>& g, Var x, T eps = T(1e-12)) {
  const Mat<T>& xv = g.value(x);
  Eigen::Matrix<T, Eigen::Dynamic, 1> norms = xv.rowwise().norm();
  Mat<T> out(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) out.row(r) = xv.row(r) / std::max(norms(r), eps);
  Mat<T> saved = out;
  return g.record(std::move(out), {x}, [x, eps, y = std::move(saved), norms = std::move(norms)](Graph<T>& g, const Mat<T>& go) {
    auto& gx = g.grad(x);
    for (Eigen::Index r = 0; r < go.rows(); ++r) {
      if (norms(r) > eps) {
        gx.row(r) += (go.row(r) - y.row(r) * y.row(r).dot(go.row(r))) / norms(r);
      } else {
        gx.row(r) += go.row(r) / eps;
      }
    }
  });
}

/// Column-wise unit normalisation: the weight-normalised linear layer with
/// its gain fixed to 1.
template <class T>
Var normalize_columns(Graph<T>& g, Var v) {
  const Mat<T>& vv = g.value(v);
  RowVec<T> norms = vv.colwise().norm();
  Mat<T> out = vv.array().rowwise() / norms.array();
  Mat<T> saved = out;
  return g.record(std::move(out), {v}, [v, y = std::move(saved), norms = std::move(norms)](Graph<T>& g, const Mat<T>& go) {
    const RowVec<T> dots = (y.array() * go.array()).colwise().sum();
    g.grad(v).array() += (go.array() - y.array().rowwise() * dots.array()).rowwise() / norms.array();
  });
}

/// min(exp(x), cap) for a 1x1 node; zero gradient while clamped.
template <class T>
Var exp_clamped(Graph<T>& g, Var x, T cap) {
  require_shape(g.value(x), 1, 1, "exp_clamped");
  const T e = std::exp(g.scalar(x));
  const bool clamped = e >= cap;
  Mat<T> out(1, 1);
  out(0, 0) = clamped ? cap : e;
  return g.record(std::move(out), {x}, [x, e, clamped](Graph<T>& g, const Mat<T>& go) {
    if (!clamped) g.grad(x)(0, 0) += go(0, 0) * e;
  });
}

/// Per-sequence multi-head self-attention over fused projections.
/// `qkv` holds [q | k | v] (each `width` columns) for n sequences of `seq`
/// rows. When `cls_rows` is non-null, the softmax row of query 0 for each
/// (head, sequence) is written to (*cls_rows)[head].row(sequence).
template <class T>
Var attention(Graph<T>& g, Var qkv, int n, int seq, int heads, bool causal,
              std::vector<Mat<T>>* cls_rows = nullptr) {
  const Mat<T>& x = g.value(qkv);
  if (x.rows() != static_cast<Eigen::Index>(n) * seq || x.cols() % 3 != 0 || (x.cols() / 3) % heads != 0) {
    throw ShapeError("attention: qkv " + shape_str(x.rows(), x.cols()) + " for " + std::to_string(n) + "x" +
                     std::to_string(seq) + " tokens and " + std::to_string(heads) + " heads");
  }
  const Eigen::Index width = x.cols() / 3;
  const Eigen::Index dh = width / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  const bool keep = g.grad_enabled() && g.needs_grad(qkv);
  if (cls_rows != nullptr) cls_rows->assign(static_cast<std::size_t>(heads), Mat<T>(n, seq));

  Mat<T> out(x.rows(), width);
  std::vector<Mat<T>> probs;
  if (keep) probs.resize(static_cast<std::size_t>(n) * heads);
  Mat<T> scores(seq, seq);
  for (int s = 0; s < n; ++s) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(s) * seq;
    for (int h = 0; h < heads; ++h) {
      const auto q = x.block(r0, h * dh, seq, dh);
      const auto k = x.block(r0, width + h * dh, seq, dh);
      const auto v = x.block(r0, 2 * width + h * dh, seq, dh);
      scores.noalias() = q * k.transpose();
      scores *= inv_sqrt;
      for (Eigen::Index i = 0; i < seq; ++i) {
        const Eigen::Index len = causal ? i + 1 : seq;
        auto row = scores.row(i).head(len);
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
        if (causal) scores.row(i).tail(seq - len).setZero();
      }
      out.block(r0, h * dh, seq, dh).noalias() = scores * v;
      if (cls_rows != nullptr) (*cls_rows)[static_cast<std::size_t>(h)].row(s) = scores.row(0);
      if (keep) probs[static_cast<std::size_t>(s) * heads + h] = scores;
    }
  }
  return g.record(std::move(out), {qkv},
                  [qkv, n, seq, heads, width, dh, inv_sqrt, probs = std::move(probs)](Graph<T>& g, const Mat<T>& go) {
                    const Mat<T>& x = g.value(qkv);
                    auto& gx = g.grad(qkv);
                    Mat<T> dp(seq, seq);
                    for (int s = 0; s < n; ++s) {
                      const Eigen::Index r0 = static_cast<Eigen::Index>(s) * seq;
                      for (int h = 0; h < heads; ++h) {
                        const Mat<T>& p = probs[static_cast<std::size_t>(s) * heads + h];
                        const auto q = x.block(r0, h * dh, seq, dh);
                        const auto k = x.block(r0, width + h * dh, seq, dh);
                        const auto v = x.block(r0, 2 * width + h * dh, seq, dh);
                        const auto dout = go.block(r0, h * dh, seq, dh);
                        gx.block(r0, 2 * width + h * dh, seq, dh).noalias() += p.transpose() * dout;
                        dp.noalias() = dout * v.transpose();
                        const Eigen::Matrix<T, Eigen::Dynamic, 1> inner = (dp.array() * p.array()).rowwise().sum();
                        dp = (p.array() * (dp.array().colwise() - inner.array())) * inv_sqrt;
                        gx.block(r0, h * dh, seq, dh).noalias() += dp * k;
                        gx.block(r0, width + h * dh, seq, dh).noalias() += dp.transpose() * q;
                      }
                    }
                  });
}

}  // namespace detailclip
