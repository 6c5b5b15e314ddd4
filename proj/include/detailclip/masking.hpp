#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "detailclip/config.hpp"
#include "detailclip/types.hpp"

namespace detailclip {

/// Mean, over every (layer, head), of the CLS query's softmax weight on each
/// patch key. The rows are used as computed inside attention, so the CLS key
/// keeps its share of the normalisation.
template <class T>
AttentionSummary<T> attention_values(const AttentionRecord<T>& rec) {
  if (rec.layers <= 0 || rec.heads <= 0 || static_cast<int>(rec.rows.size()) != rec.layers * rec.heads) {
    throw ShapeError("attention record does not cover every layer and head");
  }
  const Eigen::Index batch = rec.rows.front().rows();
  const Eigen::Index keys = rec.rows.front().cols();
  if (keys < 2) throw ShapeError("attention record has no patch keys");
  Mat<T> sum = Mat<T>::Zero(batch, keys);
  for (const auto& r : rec.rows) {
    require_shape(r, batch, keys, "attention record rows");
    sum += r;
  }
  sum /= static_cast<T>(rec.rows.size());
  AttentionSummary<T> out;
  out.av = sum.rightCols(keys - 1);
  out.cls_mass = sum.col(0);
  return out;
}

/// Masks the ceil(ratio * P) lowest-AV patches of each sample. Ties go to the
/// lower patch index.
template <class T>
MaskSet select_mask(const AttentionSummary<T>& summary, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw RangeError("mask ratio must lie in (0, 1)");
  const int batch = static_cast<int>(summary.av.rows());
  const int P = static_cast<int>(summary.av.cols());
  const int k = masked_count_for(ratio, P);
  MaskSet mask(batch, P);
  std::vector<int> order(static_cast<std::size_t>(P));
  for (int b = 0; b < batch; ++b) {
    std::iota(order.begin(), order.end(), 0);
    const auto row = summary.av.row(b);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int i, int j) {
      return row(i) < row(j) || (row(i) == row(j) && i < j);
    });
    for (int i = 0; i < k; ++i) mask.set(b, order[static_cast<std::size_t>(i)]);
  }
  return mask;
}

/// Uniformly random mask of the same cardinality; ablation and test use only.
inline MaskSet random_mask(int batch, int patches, double ratio, Rng& rng) {
  const int k = masked_count_for(ratio, patches);
  MaskSet mask(batch, patches);
  std::vector<int> order(static_cast<std::size_t>(patches));
  for (int b = 0; b < batch; ++b) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    for (int i = 0; i < k; ++i) mask.set(b, order[static_cast<std::size_t>(i)]);
  }
  return mask;
}

}  // namespace detailclip
