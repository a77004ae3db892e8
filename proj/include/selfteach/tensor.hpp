// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "selfteach/error.hpp"

namespace selfteach {

/// Dense row-major matrix. Vectors are stored as n x 1.
template <typename Real> class Tensor2 {
public:
  using value_type = Real;

  Tensor2() = default;
  Tensor2(std::size_t rows, std::size_t cols, Real fill = Real(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor2(std::size_t rows, std::size_t cols, std::vector<Real> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, ErrorCode::invalid_input,
            "tensor data length does not match shape");
  }

  static Tensor2 column(std::vector<Real> values) {
    const auto n = values.size();
    return Tensor2(n, 1, std::move(values));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  Real &operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  Real operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }
  Real &operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  std::span<Real> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const Real> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<Real> values() noexcept { return data_; }
  std::span<const Real> values() const noexcept { return data_; }
  Real *data() noexcept { return data_.data(); }
  const Real *data() const noexcept { return data_.data(); }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }
  void set_zero() { fill(Real(0)); }

  bool same_shape(const Tensor2 &o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](Real v) { return std::isfinite(v); });
  }

  Tensor2 &operator+=(const Tensor2 &o) {
    require(same_shape(o), ErrorCode::invalid_input, "tensor shape mismatch in +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  friend bool operator==(const Tensor2 &a, const Tensor2 &b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  template <typename Other> Tensor2<Other> cast() const {
    Tensor2<Other> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i)
      out[i] = static_cast<Other>(data_[i]);
    return out;
  }

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

namespace linalg {

// y += A x
template <typename Real>
inline void gemv_acc(const Tensor2<Real> &a, std::span<const Real> x,
                     std::span<Real> y) {
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const Real *ar = a.data() + r * n;
    Real acc = 0;
    for (std::size_t c = 0; c < n; ++c) acc += ar[c] * x[c];
    y[r] += acc;
  }
}

// y += A^T x
template <typename Real>
inline void gemv_t_acc(const Tensor2<Real> &a, std::span<const Real> x,
                       std::span<Real> y) {
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const Real xr = x[r];
    if (xr == Real(0)) continue;
    const Real *ar = a.data() + r * n;
    for (std::size_t c = 0; c < n; ++c) y[c] += ar[c] * xr;
  }
}

// A += u v^T
template <typename Real>
inline void ger_acc(Tensor2<Real> &a, std::span<const Real> u,
                    std::span<const Real> v) {
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const Real ur = u[r];
    if (ur == Real(0)) continue;
    Real *ar = a.data() + r * n;
    for (std::size_t c = 0; c < n; ++c) ar[c] += ur * v[c];
  }
}

template <typename Real> inline double squared_norm(const Tensor2<Real> &a) {
  double s = 0;
  for (Real v : a.values()) s += double(v) * double(v);
  return s;
}

} // namespace linalg
} // namespace selfteach
