#pragma once

// Deliberately naive reference implementations: plain loops over std::vector,
// no Eigen expressions and no shared helpers from the library, so that a bug
// in the library cannot be reproduced here by construction.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

namespace oracle {

using Table = std::vector<std::vector<double>>;

inline Table random_table(std::size_t rows, std::size_t cols, auto& rng, double scale = 1.0) {
  Table t(rows, std::vector<double>(cols));
  for (auto& r : t) {
    for (auto& v : r) v = scale * rng.normal();
  }
  return t;
}

template <class M>
Table to_table(const M& m) {
  Table t(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (std::size_t j = 0; j < t[i].size(); ++j) t[i][j] = static_cast<double>(m(i, j));
  }
  return t;
}

template <class M>
M to_mat(const Table& t) {
  M m(t.size(), t.empty() ? 0 : t[0].size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (std::size_t j = 0; j < t[i].size(); ++j) m(i, j) = t[i][j];
  }
  return m;
}

struct ClipTerms {
  double i2t;
  double t2i;
  double clip;
};

// Normalise each embedding, form s_ij = <x_i, y_j> / tau, and average the
// negative log of the matched softmax entry over rows (image to text) and
// over columns (text to image).
inline ClipTerms clip(const Table& img, const Table& txt, double inv_tau) {
  const std::size_t n = img.size();
  auto unit = [](std::vector<double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    s = std::sqrt(s);
    for (double& x : v) x /= s;
    return v;
  };
  std::vector<std::vector<double>> x, y;
  for (std::size_t i = 0; i < n; ++i) {
    x.push_back(unit(img[i]));
    y.push_back(unit(txt[i]));
  }
  Table s(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < x[i].size(); ++k) s[i][j] += x[i][k] * y[j][k];
      s[i][j] *= inv_tau;
    }
  }
  double i2t = 0.0, t2i = 0.0;
  // -log(e^{s_ii} / sum_j e^{s_ij}) written as log(1 + sum_{j != i} e^{s_ij - s_ii})
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      row += std::exp(s[i][j] - s[i][i]);
      col += std::exp(s[j][i] - s[i][i]);
    }
    i2t += std::log1p(row);
    t2i += std::log1p(col);
  }
  i2t /= static_cast<double>(n);
  t2i /= static_cast<double>(n);
  return {i2t, t2i, 0.5 * (i2t + t2i)};
}

inline std::vector<double> softmax(const std::vector<double>& z, double temp) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  std::vector<double> p(z.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    p[k] = std::exp((z[k] - mx) / temp);
    sum += p[k];
  }
  for (double& v : p) v /= sum;
  return p;
}

// KL(p || q) with 0 log 0 = 0.
inline double kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] > 0.0) s += p[k] * (std::log(p[k]) - std::log(q[k]));
  }
  return s;
}

// Patch distillation: for each sample, average KL over masked positions,
// then average over samples. `student_first` selects KL(student || teacher).
inline double patch_distill(const Table& student_logits, const Table& teacher_probs,
                            const std::vector<std::vector<int>>& masked, int patches, double student_temp,
                            bool student_first) {
  double total = 0.0;
  for (std::size_t b = 0; b < masked.size(); ++b) {
    double per = 0.0;
    for (int q : masked[b]) {
      const std::size_t r = b * static_cast<std::size_t>(patches) + static_cast<std::size_t>(q);
      const auto ps = softmax(student_logits[r], student_temp);
      per += student_first ? kl(ps, teacher_probs[r]) : kl(teacher_probs[r], ps);
    }
    total += per / static_cast<double>(masked[b].size());
  }
  return total / static_cast<double>(masked.size());
}

inline double reconstruction(const Table& pred, const Table& target, const std::vector<std::vector<int>>& masked,
                             int patches) {
  double total = 0.0;
  for (std::size_t b = 0; b < masked.size(); ++b) {
    double per = 0.0;
    for (int q : masked[b]) {
      const std::size_t r = b * static_cast<std::size_t>(patches) + static_cast<std::size_t>(q);
      for (std::size_t c = 0; c < pred[r].size(); ++c) per += (pred[r][c] - target[r][c]) * (pred[r][c] - target[r][c]);
    }
    total += per / static_cast<double>(masked[b].size());
  }
  return total / static_cast<double>(masked.size());
}

// rows[l][h][b][k]: CLS-query attention weights over P + 1 keys. Returns
// av[b][p] = mean over (l, h) of rows[l][h][b][p + 1].
inline Table attention_values(const std::vector<std::vector<Table>>& rows) {
  const std::size_t L = rows.size(), H = rows[0].size(), B = rows[0][0].size(), K = rows[0][0][0].size();
  Table av(B, std::vector<double>(K - 1, 0.0));
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t p = 0; p + 1 < K; ++p) {
      double s = 0.0;
      for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t h = 0; h < H; ++h) s += rows[l][h][b][p + 1];
      }
      av[b][p] = s / static_cast<double>(L * H);
    }
  }
  return av;
}

// Fully sort (value, index) pairs ascending and keep the first k indices.
inline std::set<int> lowest_k(const std::vector<double>& av, int k) {
  std::vector<std::pair<double, int>> items;
  for (std::size_t i = 0; i < av.size(); ++i) items.emplace_back(av[i], static_cast<int>(i));
  std::sort(items.begin(), items.end());
  std::set<int> out;
  for (int i = 0; i < k; ++i) out.insert(items[static_cast<std::size_t>(i)].second);
  return out;
}

inline double rel_diff(double a, double b) {
  const double s = std::max({std::abs(a), std::abs(b), 1e-12});
  return std::abs(a - b) / s;
}

}  // namespace oracle
