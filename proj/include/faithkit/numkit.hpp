#pragma once

// Deterministic numeric primitives shared by the toy model, the intervention
// engine, and the probes. Every binary operation checks shapes explicitly;
// there is no broadcasting.

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <utility>
#include <vector>

#include "faithkit/common.hpp"

namespace faithkit::numkit {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kKlSmoothingEps = 1e-12;
inline constexpr double kDistributionTol = 1e-9;

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t n, double fill = 0.0) : data_(n, fill) {}
  Vector(std::initializer_list<double> init) : data_(init) {}
  explicit Vector(std::vector<double> values) : data_(std::move(values)) {}

  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  const std::vector<double>& values() const { return data_; }
  std::vector<double>& values() { return data_; }

  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  double dot(const Vector& other) const {
    require(size() == other.size(), "dot: length mismatch ", size(), " vs ",
            other.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < size(); ++i) acc += data_[i] * other.data_[i];
    return acc;
  }

  double norm() const { return std::sqrt(dot(*this)); }

  Vector& operator+=(const Vector& other) {
    require(size() == other.size(), "operator+=: length mismatch ", size(),
            " vs ", other.size());
    for (std::size_t i = 0; i < size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Vector& operator-=(const Vector& other) {
    require(size() == other.size(), "operator-=: length mismatch ", size(),
            " vs ", other.size());
    for (std::size_t i = 0; i < size(); ++i) data_[i] -= other.data_[i];
    return *this;
  }

  Vector& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend Vector operator+(Vector a, const Vector& b) { return a += b; }
  friend Vector operator-(Vector a, const Vector& b) { return a -= b; }
  friend Vector operator*(Vector a, double s) { return a *= s; }
  friend Vector operator*(double s, Vector a) { return a *= s; }

  friend bool operator==(const Vector& a, const Vector& b) {
    return a.data_ == b.data_;
  }

 private:
  std::vector<double> data_;
};

// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  const std::vector<double>& values() const { return data_; }
  std::vector<double>& values() { return data_; }

  // y = M x, with x of length cols().
  Vector matvec(const Vector& x) const {
    require(x.size() == cols_, "matvec: expected length ", cols_, ", got ",
            x.size());
    Vector out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
      double acc = 0.0;
      const double* row = data_.data() + r * cols_;
      for (std::size_t c = 0; c < cols_; ++c) acc += row[c] * x[c];
      out[r] = acc;
    }
    return out;
  }

  // y = M^T x, with x of length rows().
  Vector transpose_matvec(const Vector& x) const {
    require(x.size() == rows_, "transpose_matvec: expected length ", rows_,
            ", got ", x.size());
    Vector out(cols_);
    for (std::size_t r = 0; r < rows_; ++r) {
      const double xr = x[r];
      const double* row = data_.data() + r * cols_;
      for (std::size_t c = 0; c < cols_; ++c) out[c] += row[c] * xr;
    }
    return out;
  }

  Vector column(std::size_t c) const {
    require(c < cols_, "column index ", c, " out of range (cols=", cols_, ")");
    Vector out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = at(r, c);
    return out;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// A nonnegative vector summing to 1 within kDistributionTol. Constructed via
// from_checked() or softmax(); the invariant is verified on construction.
class Distribution {
 public:
  static Distribution from_checked(std::vector<double> probs) {
    require(!probs.empty(), "Distribution: empty vector");
    double sum = 0.0;
    for (double p : probs) {
      require(std::isfinite(p) && p >= 0.0,
              "Distribution: entries must be finite and nonnegative");
      sum += p;
    }
    require(std::abs(sum - 1.0) <= kDistributionTol,
            "Distribution: probabilities sum to ", sum, ", expected 1 within ",
            kDistributionTol);
    return Distribution(std::move(probs));
  }

  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  const std::vector<double>& values() const { return probs_; }

 private:
  explicit Distribution(std::vector<double> probs) : probs_(std::move(probs)) {}
  std::vector<double> probs_;
};

// Exp-normalization with max-subtraction so large inputs cannot overflow.
inline Distribution softmax(const Vector& v) {
  require(!v.empty(), "softmax: empty input");
  require(v.all_finite(), "softmax: non-finite input");
  double max_val = -std::numeric_limits<double>::infinity();
  for (double x : v) max_val = std::max(max_val, x);
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - max_val);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return Distribution::from_checked(std::move(out));
}

// KL(p || q) in nats. q is smoothed by kKlSmoothingEps before the log; terms
// with p_i = 0 contribute nothing. Negative results can only be smoothing
// artifacts, so the value is clamped at zero.
inline double kl_divergence(const Distribution& p, const Distribution& q) {
  require(p.size() == q.size(), "kl_divergence: length mismatch ", p.size(),
          " vs ", q.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    acc += p[i] * std::log(p[i] / (q[i] + kKlSmoothingEps));
  }
  return std::max(0.0, acc);
}

inline double cosine_similarity(const Vector& u, const Vector& v) {
  require(u.size() == v.size(), "cosine_similarity: length mismatch ", u.size(),
          " vs ", v.size());
  const double nu = u.norm();
  const double nv = v.norm();
  require(nu > 0.0 && nv > 0.0, "cosine_similarity: zero-norm input");
  const double raw = u.dot(v) / (nu * nv);
  return std::clamp(raw, -1.0, 1.0);
}

inline double silu(double x) {
  require(std::isfinite(x), "silu: non-finite input");
  return x / (1.0 + std::exp(-x));
}

inline Vector silu(const Vector& v) {
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = silu(v[i]);
  return out;
}

// Zero-mean unit-variance normalization (population variance, epsilon-damped),
// scaled by gain and shifted by bias.
inline Vector layer_norm(const Vector& v, const Vector& gain,
                         const Vector& bias) {
  require(v.size() == gain.size() && v.size() == bias.size(),
          "layer_norm: length mismatch v=", v.size(), " gain=", gain.size(),
          " bias=", bias.size());
  require(!v.empty(), "layer_norm: empty input");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = (v[i] - mean) * inv * gain[i] + bias[i];
  }
  return out;
}

}  // namespace faithkit::numkit
