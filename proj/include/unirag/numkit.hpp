#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "unirag/errors.hpp"
#include "unirag/rng.hpp"

namespace unirag {

using Vec = std::vector<double>;

// Norms below this floor are treated as zero everywhere in the library.
inline constexpr double kNormFloor = 1e-12;

// Dense row-major matrix. Rows are contiguous so the hot loops vectorize.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  double* row(std::size_t i) { return data.data() + i * cols; }
  const double* row(std::size_t i) const { return data.data() + i * cols; }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
  }

  static Mat gaussian(std::size_t r, std::size_t c, Rng& rng, double scale) {
    Mat m(r, c);
    for (auto& v : m.data) v = scale * rng.next_gaussian();
    return m;
  }

  bool operator==(const Mat& other) const = default;
};

inline double dot(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::ShapeMismatch,
                "dot: lengths " + std::to_string(a.size()) + " vs " +
                    std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const Vec& a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

inline Vec normalized(const Vec& a) {
  const double n = norm(a);
  if (n < kNormFloor) {
    throw Error(ErrorKind::ZeroVector, "normalized: norm below floor");
  }
  Vec out(a.size());
  const double inv = 1.0 / n;
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * inv;
  return out;
}

inline double cosine_sim(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::ShapeMismatch,
                "cosine_sim: lengths " + std::to_string(a.size()) + " vs " +
                    std::to_string(b.size()));
  }
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += a[i] * b[i];
    saa += a[i] * a[i];
    sbb += b[i] * b[i];
  }
  const double na = std::sqrt(saa);
  const double nb = std::sqrt(sbb);
  if (na < kNormFloor || nb < kNormFloor) {
    throw Error(ErrorKind::ZeroVector, "cosine_sim: norm below floor");
  }
  return sab / (na * nb);
}

inline double cosine_dist(const Vec& a, const Vec& b) {
  return 1.0 - cosine_sim(a, b);
}

// Numerically stable softmax (max subtraction), so logits of magnitude up to
// about 1e3 stay finite.
inline Vec softmax(const Vec& logits) {
  if (logits.empty()) {
    throw Error(ErrorKind::EmptyInput, "softmax: empty logits");
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  Vec out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  const double inv = 1.0 / sum;
  for (auto& v : out) v *= inv;
  return out;
}

// p (1 x d) times A (d x r) times B (r x d) without ever forming the d x d
// product; cost is O(d*r).
inline Vec rowvec_matmul(const Vec& p, const Mat& a, const Mat& b) {
  if (a.rows != p.size() || a.cols != b.rows || b.cols != p.size()) {
    throw Error(ErrorKind::ShapeMismatch,
                "rowvec_matmul: p " + std::to_string(p.size()) + ", A " +
                    std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                    ", B " + std::to_string(b.rows) + "x" +
                    std::to_string(b.cols));
  }
  const std::size_t d = p.size();
  const std::size_t r = a.cols;
  Vec mid(r, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    const double pi = p[i];
    const double* arow = a.row(i);
    for (std::size_t j = 0; j < r; ++j) mid[j] += pi * arow[j];
  }
  Vec out(d, 0.0);
  for (std::size_t j = 0; j < r; ++j) {
    const double mj = mid[j];
    const double* brow = b.row(j);
    for (std::size_t i = 0; i < d; ++i) out[i] += mj * brow[i];
  }
  return out;
}

// C = A (m x k) * B (k x n). i-k-j order keeps the inner loop contiguous.
inline Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols != b.rows) {
    throw Error(ErrorKind::ShapeMismatch,
                "matmul: " + std::to_string(a.cols) + " vs " +
                    std::to_string(b.rows));
  }
  Mat c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = arow[k];
      const double* brow = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

// C += A * B into an existing buffer (same shapes as matmul).
inline void matmul_acc(const Mat& a, const Mat& b, Mat& c) {
  if (a.cols != b.rows || c.rows != a.rows || c.cols != b.cols) {
    throw Error(ErrorKind::ShapeMismatch, "matmul_acc: shape mismatch");
  }
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = arow[k];
      const double* brow = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
}

// C += A^T (k x m) * B (k x n). Reverse-mode accumulator.
inline void matmul_tn_acc(const Mat& a, const Mat& b, Mat& c) {
  if (a.rows != b.rows || c.rows != a.cols || c.cols != b.cols) {
    throw Error(ErrorKind::ShapeMismatch, "matmul_tn_acc: shape mismatch");
  }
  for (std::size_t k = 0; k < a.rows; ++k) {
    const double* arow = a.row(k);
    const double* brow = b.row(k);
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = arow[i];
      double* crow = c.row(i);
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
    }
  }
}

// C += A (m x k) * B^T (n x k). Reverse-mode accumulator.
inline void matmul_nt_acc(const Mat& a, const Mat& b, Mat& c) {
  if (a.cols != b.cols || c.rows != a.rows || c.cols != b.rows) {
    throw Error(ErrorKind::ShapeMismatch, "matmul_nt_acc: shape mismatch");
  }
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
      crow[j] += s;
    }
  }
}

// C = A (m x k) * B^T (n x k) -> m x n. Used for similarity scores.
inline Mat matmul_nt(const Mat& a, const Mat& b) {
  if (a.cols != b.cols) {
    throw Error(ErrorKind::ShapeMismatch,
                "matmul_nt: " + std::to_string(a.cols) + " vs " +
                    std::to_string(b.cols));
  }
  Mat c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
      crow[j] = s;
    }
  }
  return c;
}

// C = A^T (k x m) * B (k x n) -> m x n. Used by reverse-mode passes.
inline Mat matmul_tn(const Mat& a, const Mat& b) {
  if (a.rows != b.rows) {
    throw Error(ErrorKind::ShapeMismatch,
                "matmul_tn: " + std::to_string(a.rows) + " vs " +
                    std::to_string(b.rows));
  }
  Mat c(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k) {
    const double* arow = a.row(k);
    const double* brow = b.row(k);
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = arow[i];
      double* crow = c.row(i);
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

inline Vec mat_vec(const Mat& a, const Vec& x) {
  if (a.cols != x.size()) {
    throw Error(ErrorKind::ShapeMismatch,
                "mat_vec: " + std::to_string(a.cols) + " vs " +
                    std::to_string(x.size()));
  }
  Vec out(a.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) s += arow[j] * x[j];
    out[i] = s;
  }
  return out;
}

inline Vec vec_mat(const Vec& x, const Mat& a) {
  if (a.rows != x.size()) {
    throw Error(ErrorKind::ShapeMismatch,
                "vec_mat: " + std::to_string(x.size()) + " vs " +
                    std::to_string(a.rows));
  }
  Vec out(a.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double xi = x[i];
    const double* arow = a.row(i);
    for (std::size_t j = 0; j < a.cols; ++j) out[j] += xi * arow[j];
  }
  return out;
}

// Orthonormalizes the rows of m in place (modified Gram-Schmidt). Rows must
// be linearly independent, which Gaussian draws are almost surely.
inline void orthonormalize_rows(Mat& m) {
  for (std::size_t i = 0; i < m.rows; ++i) {
    double* ri = m.row(i);
    for (std::size_t j = 0; j < i; ++j) {
      const double* rj = m.row(j);
      double proj = 0.0;
      for (std::size_t k = 0; k < m.cols; ++k) proj += ri[k] * rj[k];
      for (std::size_t k = 0; k < m.cols; ++k) ri[k] -= proj * rj[k];
    }
    double n = 0.0;
    for (std::size_t k = 0; k < m.cols; ++k) n += ri[k] * ri[k];
    n = std::sqrt(n);
    if (n < kNormFloor) {
      throw Error(ErrorKind::ZeroVector, "orthonormalize_rows: degenerate row");
    }
    const double inv = 1.0 / n;
    for (std::size_t k = 0; k < m.cols; ++k) ri[k] *= inv;
  }
}

inline bool all_finite(const Vec& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace unirag
