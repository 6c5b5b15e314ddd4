#include <cmath>

#include <gtest/gtest.h>

#include "detailclip/detailclip.hpp"
#include "oracles.hpp"

using namespace detailclip;
using M = Mat<double>;

namespace {

M random(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  M m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

MaskSet mask_from(int batch, int patches, const std::vector<std::vector<int>>& idx) {
  MaskSet m(batch, patches);
  for (int b = 0; b < batch; ++b) {
    for (int q : idx[static_cast<std::size_t>(b)]) m.set(b, q);
  }
  return m;
}

// Finite-difference check of a scalar graph op with respect to one input.
template <class F>
double op_grad_error(M x, F&& build) {
  Graph<double> g;
  ParamStore<double> p;
  p.add("x", x);
  g.backward(build(g, g.param(p, "x")));
  const M analytic = p.grad("x");
  double worst = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    auto at = [&](double d) {
      ParamStore<double> q;
      M y = x;
      y.data()[i] += d;
      q.add("x", y);
      Graph<double> h(false);
      return h.scalar(build(h, h.param(q, "x")));
    };
    const double numeric = (at(1e-6) - at(-1e-6)) / 2e-6;
    worst = std::max(worst, std::abs(numeric - analytic.data()[i]) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace

TEST(ClipLoss, SinglePairIsZero) {
  Rng rng(1);
  const auto r = clip_loss<double>(random(1, 8, rng), random(1, 8, rng), 1.0 / 0.07);
  EXPECT_NEAR(r.clip, 0.0, 1e-12);
  EXPECT_NEAR(r.i2t, 0.0, 1e-12);
}

TEST(ClipLoss, IdenticalEmbeddingsGiveLogN) {
  Rng rng(2);
  const M row = random(1, 8, rng);
  const M all = row.replicate(4, 1);
  const auto r = clip_loss<double>(all, all, 1.0 / 0.07);
  EXPECT_NEAR(r.clip, std::log(4.0), 1e-6);
  EXPECT_NEAR(r.clip, 1.386294, 1e-6);
}

TEST(ClipLoss, MatchesLoopOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const M img = random(3, 5, rng), txt = random(3, 5, rng);
    const double inv_tau = rng.uniform(1.0, 30.0);
    const auto r = clip_loss<double>(img, txt, inv_tau);
    const auto o = oracle::clip(oracle::to_table(img), oracle::to_table(txt), inv_tau);
    EXPECT_LT(oracle::rel_diff(r.i2t, o.i2t), 1e-9);
    EXPECT_LT(oracle::rel_diff(r.t2i, o.t2i), 1e-9);
    EXPECT_LT(oracle::rel_diff(r.clip, o.clip), 1e-9);
  }
}

TEST(ClipLoss, Errors) {
  Rng rng(4);
  M img = random(3, 4, rng);
  img.row(1).setZero();
  EXPECT_THROW(clip_loss<double>(img, random(3, 4, rng), 10.0), ZeroNormError);
  EXPECT_THROW(clip_loss<double>(M(0, 4), M(0, 4), 10.0), DegenerateBatch);
  EXPECT_THROW(clip_loss<double>(random(3, 4, rng), random(2, 4, rng), 10.0), ShapeError);
}

TEST(ClipLoss, GraphDirectionsMatchClosedForm) {
  Rng rng(5);
  const M img = random(4, 6, rng), txt = random(4, 6, rng);
  const double inv_tau = 12.0;
  const auto ref = clip_loss<double>(img, txt, inv_tau);
  Graph<double> g(false);
  const Var a = l2_normalize_rows(g, g.constant(img));
  const Var b = l2_normalize_rows(g, g.constant(txt));
  const Var s = g.constant(M::Constant(1, 1, inv_tau));
  EXPECT_NEAR(g.scalar(clip_direction_loss(g, a, b, s, false)), ref.i2t, 1e-12);
  EXPECT_NEAR(g.scalar(clip_direction_loss(g, a, b, s, true)), ref.t2i, 1e-12);
}

TEST(ClipLoss, GraphGradients) {
  Rng rng(6);
  const M txt = random(4, 6, rng);
  const M img = random(4, 6, rng);
  for (bool t2i : {false, true}) {
    EXPECT_LT(op_grad_error(img, [&](Graph<double>& g, Var x) {
                return clip_direction_loss(g, l2_normalize_rows(g, x), l2_normalize_rows(g, g.constant(txt)),
                                           g.constant(M::Constant(1, 1, 5.0)), t2i);
              }),
              1e-7);
    EXPECT_LT(op_grad_error(M::Constant(1, 1, 3.0), [&](Graph<double>& g, Var s) {
                return clip_direction_loss(g, l2_normalize_rows(g, g.constant(img)),
                                           l2_normalize_rows(g, g.constant(txt)), s, t2i);
              }),
              1e-7);
  }
}

TEST(TeacherTargets, ZeroCenterUnitTempIsSoftmax) {
  Rng rng(7);
  const M z = random(3, 5, rng);
  const M p = teacher_log_probs<double>(z, 1.0, RowVec<double>::Zero(5)).array().exp().matrix();
  for (int r = 0; r < 3; ++r) {
    const auto ref = oracle::softmax(oracle::to_table(z)[static_cast<std::size_t>(r)], 1.0);
    for (int k = 0; k < 5; ++k) EXPECT_NEAR(p(r, k), ref[static_cast<std::size_t>(k)], 1e-12);
  }
}

TEST(TeacherTargets, ConstantLogitsGiveUniform) {
  CenterState<double> c(6, 0.9);
  const M p = sharpen_teacher<double>(M::Constant(2, 6, 3.7), 0.04, c);
  EXPECT_TRUE(((p.array() - 1.0 / 6.0).abs() < 1e-12).all());
}

TEST(TeacherTargets, CenterFollowsGeometricRecurrence) {
  Rng rng(8);
  const M batch = random(5, 4, rng);
  const RowVec<double> mean = batch.colwise().mean();
  CenterState<double> c(4, 0.9);
  for (int t = 1; t <= 6; ++t) {
    sharpen_teacher<double>(batch, 0.04, c);
    const RowVec<double> expected = (1.0 - std::pow(0.9, t)) * mean;
    EXPECT_LT((c.center - expected).cwiseAbs().maxCoeff(), 1e-12) << "t=" << t;
  }
}

TEST(Distill, EqualDistributionsGiveZero) {
  Rng rng(9);
  const M s = random(6, 8, rng);
  const double Ts = 0.1;
  const M tp = softmax_rows<double>(s, Ts);
  for (auto dir : {KlDirection::kStudentTeacher, KlDirection::kTeacherStudent}) {
    for (double v : kl_rows<double>(s, log_softmax_rows<double>(s, Ts), Ts, dir)) EXPECT_NEAR(v, 0.0, 1e-12);
    EXPECT_NEAR(cls_distill_loss<double>(s.topRows(3), s.bottomRows(3), tp.bottomRows(3), tp.topRows(3), Ts, dir), 0.0,
                1e-12);
  }
}

TEST(Distill, OneHotTeacherUniformStudent) {
  const M student = M::Zero(1, 4);
  M teacher = M::Zero(1, 4);
  teacher(0, 2) = 1.0;
  EXPECT_NEAR(kl_rows<double>(student, safe_log(teacher), 0.1, KlDirection::kTeacherStudent)[0], std::log(4.0), 1e-12);
  EXPECT_TRUE(std::isinf(kl_rows<double>(student, safe_log(teacher), 0.1, KlDirection::kStudentTeacher)[0]));
}

TEST(Distill, NonNegative) {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const M su = random(3, 7, rng, 3.0), sv = random(3, 7, rng, 3.0);
    const M tu = softmax_rows<double>(random(3, 7, rng, 3.0), 0.04);
    const M tv = softmax_rows<double>(random(3, 7, rng, 3.0), 0.04);
    for (auto dir : {KlDirection::kStudentTeacher, KlDirection::kTeacherStudent}) {
      EXPECT_GE(cls_distill_loss<double>(su, sv, tu, tv, 0.1, dir), -1e-12);
    }
  }
}

TEST(Distill, ClsLossIsCrossView) {
  Rng rng(11);
  const M su = random(2, 5, rng), sv = random(2, 5, rng);
  const M tu = softmax_rows<double>(random(2, 5, rng), 0.04), tv = softmax_rows<double>(random(2, 5, rng), 0.04);
  double expected = 0.0;
  const auto S_u = oracle::to_table(su), S_v = oracle::to_table(sv), T_u = oracle::to_table(tu),
             T_v = oracle::to_table(tv);
  for (std::size_t b = 0; b < 2; ++b) {
    expected += oracle::kl(oracle::softmax(S_u[b], 0.1), T_v[b]) + oracle::kl(oracle::softmax(S_v[b], 0.1), T_u[b]);
  }
  expected /= 4.0;
  EXPECT_NEAR(cls_distill_loss<double>(su, sv, tu, tv, 0.1), expected, 1e-12);
}

TEST(PatchLoss, MatchesLoopOracle) {
  Rng rng(12);
  const std::vector<std::vector<int>> idx = {{1, 3}, {0, 2}};
  const MaskSet mask = mask_from(2, 4, idx);
  for (int trial = 0; trial < 20; ++trial) {
    const M s = random(8, 6, rng, 2.0);
    const M t = softmax_rows<double>(random(8, 6, rng, 2.0), 0.04);
    for (auto dir : {KlDirection::kStudentTeacher, KlDirection::kTeacherStudent}) {
      const double got = patch_distill_loss<double>(s, t, mask, 0.1, dir);
      const double want = oracle::patch_distill(oracle::to_table(s), oracle::to_table(t), idx, 4, 0.1,
                                                dir == KlDirection::kStudentTeacher);
      EXPECT_LT(oracle::rel_diff(got, want), 1e-9);
    }
  }
}

TEST(PatchLoss, TeacherEqualsStudentAtMaskedRows) {
  Rng rng(13);
  const MaskSet mask = mask_from(1, 4, {{0, 3}});
  const M s = random(4, 6, rng);
  M t = softmax_rows<double>(s, 0.1);
  t.row(1) = softmax_rows<double>(random(1, 6, rng), 0.04);
  EXPECT_NEAR(patch_distill_loss<double>(s, t, mask, 0.1), 0.0, 1e-12);
}

TEST(PatchLoss, VisibleRowsDoNotMatter) {
  Rng rng(14);
  const MaskSet mask = mask_from(2, 4, {{0, 1}, {2, 3}});
  M s = random(8, 6, rng);
  const M t = softmax_rows<double>(random(8, 6, rng), 0.04);
  const double base = patch_distill_loss<double>(s, t, mask, 0.1);
  s.row(2) *= 10.0;
  s.row(5).setConstant(-4.0);
  EXPECT_EQ(patch_distill_loss<double>(s, t, mask, 0.1), base);
  EXPECT_THROW(patch_distill_loss<double>(s, t, MaskSet(2, 4), 0.1), EmptyMask);
}

TEST(Reconstruction, Examples) {
  Rng rng(15);
  const M target = random(4, 192, rng);
  const MaskSet one = mask_from(1, 4, {{2}});
  EXPECT_EQ(reconstruction_loss<double>(target, target, one), 0.0);
  EXPECT_NEAR(reconstruction_loss<double>(M(target.array() + 1.0), target, one), 192.0, 1e-6);

  M pred = target;
  pred.row(2).array() += 0.5;
  const double base = reconstruction_loss<double>(pred, target, one);
  pred.row(0).array() += 3.0;
  pred.row(3).setZero();
  EXPECT_EQ(reconstruction_loss<double>(pred, target, one), base);
}

TEST(Reconstruction, MatchesLoopOracle) {
  Rng rng(16);
  const std::vector<std::vector<int>> idx = {{0, 5}, {1, 2}, {3, 4}};
  const MaskSet mask = mask_from(3, 6, idx);
  const M pred = random(18, 12, rng), target = random(18, 12, rng);
  EXPECT_LT(oracle::rel_diff(reconstruction_loss<double>(pred, target, mask),
                             oracle::reconstruction(oracle::to_table(pred), oracle::to_table(target), idx, 6)),
            1e-12);
}

TEST(GraphLosses, KlAndSquaredErrorGradients) {
  Rng rng(17);
  const M x = random(4, 5, rng);
  const M tlogp = log_softmax_rows<double>(random(4, 5, rng), 0.04);
  const std::vector<double> w = {0.25, 0.0, 0.5, 0.25};
  for (auto dir : {KlDirection::kStudentTeacher, KlDirection::kTeacherStudent}) {
    EXPECT_LT(op_grad_error(x, [&](Graph<double>& g, Var v) { return kl_loss<double>(g, v, tlogp, w, 0.1, dir); }),
              1e-6);
  }
  const M target = random(4, 5, rng);
  EXPECT_LT(op_grad_error(x, [&](Graph<double>& g, Var v) { return weighted_squared_error<double>(g, v, target, w); }),
            1e-7);
}

TEST(TotalLoss, Arithmetic) {
  LossBreakdown parts;
  parts.l_cls = 0.5;
  parts.l_patch = 0.25;
  parts.l_rec = 0.25;
  parts.l_clip = 1.0;
  EXPECT_DOUBLE_EQ(total_loss(parts, {1, 1, 1}).l_tot, 2.0);
  EXPECT_DOUBLE_EQ(total_loss(parts, {1, 1, 0}).l_tot, 1.75);
  EXPECT_DOUBLE_EQ(total_loss(parts, {0, 0, 1}).l_tot, parts.l_rec + parts.l_clip);
  EXPECT_DOUBLE_EQ(total_loss(parts, {1, 1, 0}).l_rec, 0.25);
}
