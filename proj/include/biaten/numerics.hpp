#pragma once

// Dense row-major matrices and the handful of numerically careful kernels
// the ensemble is built from. Every reduction runs left-to-right in index
// order so that a run is bit-reproducible for a given seed.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "biaten/errors.hpp"

namespace biaten {

using Vector = std::vector<double>;

inline constexpr double kCosineEps = 1e-12;
inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    detail::require(data_.size() == rows_ * cols_,
                    "Matrix: data length " + std::to_string(data_.size()) +
                        " does not match " + std::to_string(rows_) + "x" +
                        std::to_string(cols_));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  std::string shape() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline void require_finite(std::span<const double> v, const std::string& what) {
  if (!all_finite(v)) throw NumericalError("non-finite value in " + what);
}

// a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  detail::require(a.cols() == b.rows(),
                  "matmul: shape mismatch " + a.shape() + " * " + b.shape());
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

// a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  detail::require(a.rows() == b.rows(),
                  "matmul_tn: shape mismatch " + a.shape() + "^T * " + b.shape());
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto a_row = a.row(k);
    auto b_row = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a_row[i];
      auto out_row = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aki * b_row[j];
    }
  }
  return out;
}

// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  detail::require(a.cols() == b.cols(),
                  "matmul_nt: shape mismatch " + a.shape() + " * " + b.shape() + "^T");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto a_row = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto b_row = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
      out(i, j) = acc;
    }
  }
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) acc += a[k] * b[k];
  return acc;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t k = 0; k < x.size(); ++k) y[k] += alpha * x[k];
}

inline void add_row_vector(Matrix& m, std::span<const double> v) {
  detail::require(v.size() == m.cols(), "add_row_vector: width mismatch");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < v.size(); ++c) row[c] += v[c];
  }
}

inline Vector column_sums(const Matrix& m) {
  Vector out(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) out[c] += row[c];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax

inline void softmax_into(std::span<const double> logits, std::span<double> out) {
  detail::require(!logits.empty(), "softmax: empty input");
  double peak = -std::numeric_limits<double>::infinity();
  for (double v : logits) {
    if (std::isnan(v)) throw ContractError("softmax: NaN in input");
    peak = std::max(peak, v);
  }
  double total = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = std::exp(logits[k] - peak);
    total += out[k];
  }
  for (std::size_t k = 0; k < logits.size(); ++k) out[k] /= total;
}

inline Vector softmax(std::span<const double> logits) {
  Vector out(logits.size());
  softmax_into(logits, out);
  return out;
}

inline Matrix stable_softmax_rows(const Matrix& m) {
  detail::require(!m.empty(), "stable_softmax_rows: empty matrix");
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) softmax_into(m.row(r), out.row(r));
  return out;
}

// log(softmax(logits)) without forming the probabilities.
inline Vector log_softmax(std::span<const double> logits) {
  double peak = -std::numeric_limits<double>::infinity();
  for (double v : logits) peak = std::max(peak, v);
  double total = 0.0;
  for (double v : logits) total += std::exp(v - peak);
  const double log_total = std::log(total) + peak;
  Vector out(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) out[k] = logits[k] - log_total;
  return out;
}

// Given p = softmax(z) and dL/dp, accumulates dL/dz into dz.
inline void softmax_backward(std::span<const double> probs, std::span<const double> dprobs,
                             std::span<double> dlogits) {
  const double inner = dot(probs, dprobs);
  for (std::size_t k = 0; k < probs.size(); ++k) dlogits[k] += probs[k] * (dprobs[k] - inner);
}

// ---------------------------------------------------------------------------
// Cosine similarity

inline double cosine(std::span<const double> a, std::span<const double> b) {
  detail::require(a.size() == b.size(), "cosine: length mismatch");
  return dot(a, b) / (norm2(a) * norm2(b) + kCosineEps);
}

// Accumulates grad * d cos(a,b)/da into da and grad * d cos(a,b)/db into db.
inline void cosine_backward(std::span<const double> a, std::span<const double> b, double grad,
                            std::span<double> da, std::span<double> db) {
  const double ab = dot(a, b);
  const double na = norm2(a);
  const double nb = norm2(b);
  const double denom = na * nb + kCosineEps;
  const double inv = 1.0 / denom;
  const double coef = ab * inv * inv;
  // d(na)/da = a / na; zero vectors contribute no norm gradient.
  const double ca = na > 0.0 ? coef * nb / na : 0.0;
  const double cb = nb > 0.0 ? coef * na / nb : 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    da[k] += grad * (b[k] * inv - ca * a[k]);
    db[k] += grad * (a[k] * inv - cb * b[k]);
  }
}

// Entry (i, j) is the cosine between row i of q and row j of k.
inline Matrix cosine_rows(const Matrix& q, const Matrix& k) {
  detail::require(q.cols() == k.cols(),
                  "cosine_rows: width mismatch " + q.shape() + " vs " + k.shape());
  Matrix out(q.rows(), k.rows());
  for (std::size_t i = 0; i < q.rows(); ++i)
    for (std::size_t j = 0; j < k.rows(); ++j) out(i, j) = cosine(q.row(i), k.row(j));
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

enum class BnMode { kTrain, kEval };

struct BnState {
  Vector running_mean;
  Vector running_var;
  double momentum = kBatchNormMomentum;
  double eps = kBatchNormEps;

  static BnState fresh(std::size_t width) {
    return BnState{Vector(width, 0.0), Vector(width, 1.0)};
  }
};

struct BnCache {
  BnMode mode = BnMode::kEval;
  Matrix normalized;  // x_hat, before scale/shift
  Vector inv_std;
};

// Train mode normalizes by the biased batch variance and folds the
// unbiased estimate into the running statistics.
inline Matrix batchnorm_forward(const Matrix& x, std::span<const double> scale,
                                std::span<const double> shift, BnState& state, BnMode mode,
                                BnCache* cache = nullptr) {
  const std::size_t batch = x.rows();
  const std::size_t width = x.cols();
  detail::require(scale.size() == width && shift.size() == width &&
                      state.running_mean.size() == width && state.running_var.size() == width,
                  "batchnorm_forward: width mismatch for input " + x.shape());
  Vector mean(width, 0.0);
  Vector var(width, 0.0);
  if (mode == BnMode::kTrain) {
    if (batch < 2)
      throw ContractError("batchnorm_forward: train mode needs a batch of at least 2, got " +
                          std::to_string(batch));
    mean = column_sums(x);
    for (double& m : mean) m /= static_cast<double>(batch);
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t c = 0; c < width; ++c) {
        const double d = x(r, c) - mean[c];
        var[c] += d * d;
      }
    for (double& v : var) v /= static_cast<double>(batch);
    const double correction = static_cast<double>(batch) / static_cast<double>(batch - 1);
    for (std::size_t c = 0; c < width; ++c) {
      state.running_mean[c] =
          (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean[c];
      state.running_var[c] =
          (1.0 - state.momentum) * state.running_var[c] + state.momentum * var[c] * correction;
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  Vector inv_std(width);
  for (std::size_t c = 0; c < width; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + state.eps);

  Matrix normalized(batch, width);
  Matrix out(batch, width);
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      normalized(r, c) = (x(r, c) - mean[c]) * inv_std[c];
      out(r, c) = normalized(r, c) * scale[c] + shift[c];
    }
  if (cache) {
    cache->mode = mode;
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

struct BnGradients {
  Matrix dx;
  Vector dscale;
  Vector dshift;
};

inline BnGradients batchnorm_backward(const BnCache& cache, std::span<const double> scale,
                                      const Matrix& dy) {
  const std::size_t batch = dy.rows();
  const std::size_t width = dy.cols();
  detail::require(cache.normalized.rows() == batch && cache.normalized.cols() == width,
                  "batchnorm_backward: cache shape " + cache.normalized.shape() +
                      " does not match gradient " + dy.shape());
  BnGradients g{Matrix(batch, width), Vector(width, 0.0), Vector(width, 0.0)};
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      g.dscale[c] += dy(r, c) * cache.normalized(r, c);
      g.dshift[c] += dy(r, c);
    }
  if (cache.mode == BnMode::kEval) {
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t c = 0; c < width; ++c) g.dx(r, c) = dy(r, c) * scale[c] * cache.inv_std[c];
    return g;
  }
  // Batch statistics depend on every row:
  // dx = inv_std/B * (B*dxh - sum(dxh) - xh*sum(dxh*xh)), with dxh = dy*scale.
  const double b = static_cast<double>(batch);
  for (std::size_t c = 0; c < width; ++c) {
    const double sum_dxh = g.dshift[c] * scale[c];
    const double sum_dxh_xh = g.dscale[c] * scale[c];
    for (std::size_t r = 0; r < batch; ++r) {
      const double dxh = dy(r, c) * scale[c];
      g.dx(r, c) = cache.inv_std[c] / b *
                   (b * dxh - sum_dxh - cache.normalized(r, c) * sum_dxh_xh);
    }
  }
  return g;
}

}  // namespace biaten
