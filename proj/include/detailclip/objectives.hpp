#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "detailclip/autograd.hpp"
#include "detailclip/config.hpp"
#include "detailclip/types.hpp"

namespace detailclip {

struct LossBreakdown {
  double l_i2t = 0.0;
  double l_t2i = 0.0;
  double l_clip = 0.0;
  double l_cls = 0.0;
  double l_patch = 0.0;
  double l_rec = 0.0;
  double l_tot = 0.0;

  bool operator==(const LossBreakdown&) const = default;
};

struct LossWeights {
  double alpha1 = 1.0;
  double alpha2 = 1.0;
  double alpha3 = 1.0;
};

/// l_tot = a1 * l_cls + a2 * l_patch + a3 * l_rec + l_clip. The CLIP fields
/// are taken as given.
inline LossBreakdown total_loss(LossBreakdown parts, const LossWeights& w) {
  parts.l_tot = w.alpha1 * parts.l_cls + w.alpha2 * parts.l_patch + w.alpha3 * parts.l_rec + parts.l_clip;
  return parts;
}

// ---------------------------------------------------------------------------
// softmax helpers

template <class T>
Mat<T> log_softmax_rows(const Mat<T>& logits, T temp = T(1)) {
  Mat<T> out = logits / temp;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const T mx = out.row(r).maxCoeff();
    const T lse = mx + std::log((out.row(r).array() - mx).exp().sum());
    out.row(r).array() -= lse;
  }
  return out;
}

template <class T>
Mat<T> softmax_rows(const Mat<T>& logits, T temp = T(1)) {
  return log_softmax_rows(logits, temp).array().exp().matrix();
}

// ---------------------------------------------------------------------------
// CLIP objective

template <class T>
struct ClipLossParts {
  T i2t = T(0);
  T t2i = T(0);
  T clip = T(0);
};

namespace detail {

/// Mean over rows of -log softmax(logits)[r, r]; optionally d/dlogits.
template <class T>
T diagonal_cross_entropy(const Mat<T>& logits, Mat<T>* dlogits) {
  const Eigen::Index n = logits.rows();
  const Mat<T> logp = log_softmax_rows(logits);
  T loss = T(0);
  for (Eigen::Index i = 0; i < n; ++i) {
    // -log p_ii without the cancellation of logsumexp - s_ii when the pair dominates its row
    const T diag = logits(i, i);
    const T top = logits.row(i).maxCoeff();
    T rest = T(0);
    if (diag >= top) {
      for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        if (j != i) rest += std::exp(logits(i, j) - diag);
      }
      loss += std::log1p(rest);
    } else {
      for (Eigen::Index j = 0; j < logits.cols(); ++j) rest += std::exp(logits(i, j) - top);
      loss += (top - diag) + std::log(rest);
    }
  }
  loss /= static_cast<T>(n);
  if (dlogits != nullptr) {
    *dlogits = logp.array().exp().matrix();
    dlogits->diagonal().array() -= T(1);
    *dlogits /= static_cast<T>(n);
  }
  return loss;
}

template <class T>
Mat<T> normalized_rows(const Mat<T>& m, const char* what) {
  Mat<T> out = m;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const T norm = m.row(r).norm();
    if (!(norm > T(0))) throw ZeroNormError(std::string(what) + " embedding " + std::to_string(r) + " has zero norm");
    out.row(r) /= norm;
  }
  return out;
}

}  // namespace detail

/// Cosine similarities scaled by 1/tau, symmetric cross-entropy with matched
/// pairs on the diagonal.
template <class T>
ClipLossParts<T> clip_loss(const Mat<T>& image, const Mat<T>& text, T inv_tau) {
  if (image.rows() == 0) throw DegenerateBatch("CLIP loss needs at least one pair");
  require_shape(text, image.rows(), image.cols(), "CLIP text embeddings");
  const Mat<T> logits = inv_tau * (detail::normalized_rows(image, "image") *
                                   detail::normalized_rows(text, "text").transpose());
  ClipLossParts<T> out;
  out.i2t = detail::diagonal_cross_entropy<T>(logits, nullptr);
  out.t2i = detail::diagonal_cross_entropy<T>(logits.transpose(), nullptr);
  out.clip = (out.i2t + out.t2i) / T(2);
  return out;
}

/// Both image views scored against the same captions; each direction is
/// averaged over the views.
template <class T>
ClipLossParts<T> clip_loss_two_view(const Mat<T>& image_u, const Mat<T>& image_v, const Mat<T>& text, T inv_tau) {
  const auto u = clip_loss(image_u, text, inv_tau);
  const auto v = clip_loss(image_v, text, inv_tau);
  ClipLossParts<T> out;
  out.i2t = (u.i2t + v.i2t) / T(2);
  out.t2i = (u.t2i + v.t2i) / T(2);
  out.clip = (out.i2t + out.t2i) / T(2);
  return out;
}

// ---------------------------------------------------------------------------
// teacher targets

/// Running mean of teacher logits; never part of the gradient graph.
template <class T>
struct CenterState {
  RowVec<T> center;
  T momentum = T(0.9);

  CenterState() = default;
  CenterState(int dim, T m) : center(RowVec<T>::Zero(dim)), momentum(m) {}

  /// center <- m * center + (1 - m) * batch_mean
  void update(const RowVec<T>& batch_mean) { center = momentum * center + (T(1) - momentum) * batch_mean; }
};

/// log softmax((logits - center) / temp), without touching the center.
template <class T>
Mat<T> teacher_log_probs(const Mat<T>& logits, T temp, const RowVec<T>& center) {
  if (!(temp > T(0))) throw RangeError("teacher temperature must be positive");
  if (center.size() != logits.cols()) throw ShapeError("center dimension does not match the logits");
  const Mat<T> centered = logits.rowwise() - center;
  return log_softmax_rows<T>(centered, temp);
}

/// Sharpened, centred teacher distribution; then folds this batch's mean
/// logits into the center.
template <class T>
Mat<T> sharpen_teacher(const Mat<T>& logits, T temp, CenterState<T>& center) {
  Mat<T> probs = teacher_log_probs(logits, temp, center.center).array().exp().matrix();
  center.update(logits.colwise().mean());
  return probs;
}

// ---------------------------------------------------------------------------
// distillation

/// Per-row KL between softmax(student / temp) and a teacher given as log
/// probabilities. kStudentTeacher is sum p_s (log p_s - log p_t);
/// kTeacherStudent is sum p_t (log p_t - log p_s). When `dlogits` is set it
/// receives d KL_r / d student_logits for every row.
template <class T>
std::vector<T> kl_rows(const Mat<T>& student_logits, const Mat<T>& teacher_logp, T student_temp, KlDirection dir,
                       Mat<T>* dlogits = nullptr) {
  require_shape(teacher_logp, student_logits.rows(), student_logits.cols(), "teacher distribution");
  const Mat<T> logps = log_softmax_rows(student_logits, student_temp);
  const Mat<T> ps = logps.array().exp().matrix();
  std::vector<T> out(static_cast<std::size_t>(student_logits.rows()));
  if (dlogits != nullptr) dlogits->resize(student_logits.rows(), student_logits.cols());
  for (Eigen::Index r = 0; r < student_logits.rows(); ++r) {
    if (dir == KlDirection::kStudentTeacher) {
      const auto diff = (logps.row(r) - teacher_logp.row(r)).array();
      // p_s == 0 contributes 0 regardless of the teacher
      T kl = T(0);
      for (Eigen::Index k = 0; k < diff.size(); ++k) {
        if (ps(r, k) > T(0)) kl += ps(r, k) * diff(k);
      }
      out[static_cast<std::size_t>(r)] = kl;
      if (dlogits != nullptr) {
        dlogits->row(r) = (ps.row(r).array() * (diff - kl)) / student_temp;
      }
    } else {
      const auto pt = teacher_logp.row(r).array().exp();
      T kl = T(0);
      for (Eigen::Index k = 0; k < pt.size(); ++k) {
        if (pt(k) > T(0)) kl += pt(k) * (teacher_logp(r, k) - logps(r, k));
      }
      out[static_cast<std::size_t>(r)] = kl;
      if (dlogits != nullptr) dlogits->row(r) = (ps.row(r).array() - pt) / student_temp;
    }
  }
  return out;
}

template <class T>
Mat<T> safe_log(const Mat<T>& probs) {
  return probs.unaryExpr([](T p) { return p > T(0) ? std::log(p) : -std::numeric_limits<T>::infinity(); });
}

/// Cross-view CLS loss: the student's view-u distribution is matched to the
/// teacher's view-v target and vice versa, averaged over both pairings and
/// the batch. Inputs are batch x K.
template <class T>
T cls_distill_loss(const Mat<T>& student_u, const Mat<T>& student_v, const Mat<T>& teacher_probs_u,
                   const Mat<T>& teacher_probs_v, T student_temp, KlDirection dir = KlDirection::kStudentTeacher) {
  const auto a = kl_rows(student_u, safe_log(teacher_probs_v), student_temp, dir);
  const auto b = kl_rows(student_v, safe_log(teacher_probs_u), student_temp, dir);
  T sum = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) sum += a[i] + b[i];
  return sum / static_cast<T>(2 * a.size());
}

/// Row weights for a masked mean: 1 / (|M_b| * batch) on masked rows of
/// sample b, 0 elsewhere. Rows are sample-major (batch * P).
inline std::vector<double> masked_row_weights(const MaskSet& mask) {
  std::vector<double> w(mask.masked.size(), 0.0);
  for (int b = 0; b < mask.batch; ++b) {
    const int m = mask.count(b);
    if (m == 0) throw EmptyMask("sample " + std::to_string(b) + " has no masked patches");
    for (int q = 0; q < mask.patches; ++q) {
      if (mask.at(b, q)) w[static_cast<std::size_t>(b) * mask.patches + q] = 1.0 / (m * mask.batch);
    }
  }
  return w;
}

/// Same-view patch loss: mean KL over masked positions, then over the batch.
/// Inputs are (batch * P) x K.
template <class T>
T patch_distill_loss(const Mat<T>& student_logits, const Mat<T>& teacher_probs, const MaskSet& mask, T student_temp,
                     KlDirection dir = KlDirection::kStudentTeacher) {
  if (student_logits.rows() != static_cast<Eigen::Index>(mask.masked.size())) {
    throw ShapeError("patch logits do not match the mask");
  }
  const auto w = masked_row_weights(mask);
  const auto kl = kl_rows(student_logits, safe_log(teacher_probs), student_temp, dir);
  T sum = T(0);
  for (std::size_t r = 0; r < w.size(); ++r) {
    if (w[r] != 0.0) sum += static_cast<T>(w[r]) * kl[r];
  }
  return sum;
}

/// Mean over masked patches of the squared L2 error, then over the batch.
template <class T>
T reconstruction_loss(const Mat<T>& pred, const Mat<T>& target, const MaskSet& mask) {
  require_shape(target, pred.rows(), pred.cols(), "reconstruction target");
  if (pred.rows() != static_cast<Eigen::Index>(mask.masked.size())) {
    throw ShapeError("reconstruction rows do not match the mask");
  }
  const auto w = masked_row_weights(mask);
  T sum = T(0);
  for (std::size_t r = 0; r < w.size(); ++r) {
    if (w[r] != 0.0) sum += static_cast<T>(w[r]) * (pred.row(static_cast<Eigen::Index>(r)) - target.row(static_cast<Eigen::Index>(r))).squaredNorm();
  }
  return sum;
}

// ---------------------------------------------------------------------------
// graph ops over the objectives

/// Σ_r w_r KL_r(student_r, teacher_r); the teacher is a constant.
template <class T>
Var kl_loss(Graph<T>& g, Var student_logits, Mat<T> teacher_logp, std::vector<T> weights, T student_temp,
            KlDirection dir) {
  const Mat<T>& s = g.value(student_logits);
  if (static_cast<Eigen::Index>(weights.size()) != s.rows()) throw ShapeError("kl_loss: weight count");
  Mat<T> d;
  const auto kl = kl_rows(s, teacher_logp, student_temp, dir, &d);
  Mat<T> out = Mat<T>::Zero(1, 1);
  for (std::size_t r = 0; r < kl.size(); ++r) {
    if (weights[r] != T(0)) {
      out(0, 0) += weights[r] * kl[r];
      d.row(static_cast<Eigen::Index>(r)) *= weights[r];
    } else {
      d.row(static_cast<Eigen::Index>(r)).setZero();
    }
  }
  return g.record(std::move(out), {student_logits}, [student_logits, d = std::move(d)](Graph<T>& g, const Mat<T>& go) {
    g.grad(student_logits) += go(0, 0) * d;
  });
}

/// One direction of the CLIP cross-entropy over already-normalised rows.
template <class T>
Var clip_direction_loss(Graph<T>& g, Var image_n, Var text_n, Var inv_tau, bool text_to_image) {
  const Mat<T>& img = g.value(image_n);
  const Mat<T>& txt = g.value(text_n);
  require_shape(txt, img.rows(), img.cols(), "clip_direction_loss text");
  const T scale = g.scalar(inv_tau);
  const Mat<T> cos = img * txt.transpose();
  Mat<T> dlogits;
  Mat<T> out(1, 1);
  if (text_to_image) {
    out(0, 0) = detail::diagonal_cross_entropy<T>(Mat<T>(scale * cos.transpose()), &dlogits);
    dlogits.transposeInPlace();
  } else {
    out(0, 0) = detail::diagonal_cross_entropy<T>(Mat<T>(scale * cos), &dlogits);
  }
  return g.record(std::move(out), {image_n, text_n, inv_tau},
                  [image_n, text_n, inv_tau, scale, cos, dlogits = std::move(dlogits)](Graph<T>& g, const Mat<T>& go) {
                    const T s = go(0, 0);
                    if (g.needs_grad(image_n)) g.grad(image_n).noalias() += (s * scale) * dlogits * g.value(text_n);
                    if (g.needs_grad(text_n)) {
                      g.grad(text_n).noalias() += (s * scale) * dlogits.transpose() * g.value(image_n);
                    }
                    if (g.needs_grad(inv_tau)) g.grad(inv_tau)(0, 0) += s * (dlogits.array() * cos.array()).sum();
                  });
}

/// Σ_r w_r |pred_r - target_r|^2 with a constant target.
template <class T>
Var weighted_squared_error(Graph<T>& g, Var pred, Mat<T> target, std::vector<T> weights) {
  const Mat<T>& p = g.value(pred);
  require_shape(target, p.rows(), p.cols(), "weighted_squared_error target");
  if (static_cast<Eigen::Index>(weights.size()) != p.rows()) throw ShapeError("weighted_squared_error: weights");
  Mat<T> diff = p - target;
  Mat<T> out = Mat<T>::Zero(1, 1);
  for (Eigen::Index r = 0; r < diff.rows(); ++r) {
    const T w = weights[static_cast<std::size_t>(r)];
    if (w != T(0)) {
      out(0, 0) += w * diff.row(r).squaredNorm();
      diff.row(r) *= T(2) * w;
    } else {
      diff.row(r).setZero();
    }
  }
  return g.record(std::move(out), {pred}, [pred, d = std::move(diff)](Graph<T>& g, const Mat<T>& go) {
    g.grad(pred) += go(0, 0) * d;
  });
}

}  // namespace detailclip
