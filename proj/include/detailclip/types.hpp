#pragma once

#include <cstdint>
#include <vector>

#include "detailclip/tensor.hpp"

namespace detailclip {

/// Per-sample boolean patch mask (true = masked), batch x patches.
struct MaskSet {
  int batch = 0;
  int patches = 0;
  std::vector<std::uint8_t> masked;

  MaskSet() = default;
  MaskSet(int b, int p) : batch(b), patches(p), masked(static_cast<std::size_t>(b) * p, 0) {}

  bool at(int b, int p) const { return masked[static_cast<std::size_t>(b) * patches + p] != 0; }
  void set(int b, int p, bool v = true) { masked[static_cast<std::size_t>(b) * patches + p] = v ? 1 : 0; }

  int count(int b) const {
    int n = 0;
    for (int p = 0; p < patches; ++p) n += at(b, p) ? 1 : 0;
    return n;
  }

  std::vector<int> indices(int b) const {
    std::vector<int> out;
    for (int p = 0; p < patches; ++p) {
      if (at(b, p)) out.push_back(p);
    }
    return out;
  }

  bool operator==(const MaskSet&) const = default;
};

/// CLS-query softmax rows recorded during a forward pass. rows[l * heads + h]
/// is batch x (P + 1); column 0 is the CLS key.
template <class T>
struct AttentionRecord {
  int layers = 0;
  int heads = 0;
  std::vector<Mat<T>> rows;

  const Mat<T>& row_block(int layer, int head) const {
    return rows.at(static_cast<std::size_t>(layer) * heads + head);
  }
};

/// Per-patch attention values, batch x P (the CLS key is excluded).
template <class T>
struct AttentionSummary {
  Mat<T> av;
  /// Mean CLS -> CLS mass per sample; av.rowwise().sum() + cls_mass == 1.
  Eigen::Matrix<T, Eigen::Dynamic, 1> cls_mass;
};

}  // namespace detailclip
