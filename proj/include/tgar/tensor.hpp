#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

#include "tgar/types.hpp"

namespace tgar {

/// Dense row-major matrix. Vectors are 1×n or n×1 tensors.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, real fill = real{0});
  Tensor(std::size_t rows, std::size_t cols, std::vector<real> data);
  static Tensor from_rows(std::initializer_list<std::initializer_list<real>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  std::vector<std::size_t> shape() const { return {rows_, cols_}; }
  bool empty() const { return data_.empty(); }
  bool same_shape(const Tensor& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }

  real& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  real operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  real& operator[](std::size_t i) { return data_[i]; }
  real operator[](std::size_t i) const { return data_[i]; }

  std::span<real> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const real> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<real> values() { return data_; }
  std::span<const real> values() const { return data_; }
  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }

  void fill(real v);
  bool all_finite() const;
  /// Throws NumericError naming `where` if any entry is NaN or infinite.
  void check_finite(std::string_view where) const;

  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<real> data_;
};

// Row-deterministic kernels: row r of every result depends only on row r of the
// row-indexed operand, with a fixed summation order along the inner dimension.

/// a · b
Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ
Tensor matmul_bt(const Tensor& a, const Tensor& b);
/// aᵀ · b (plain double accumulation, row order ascending)
Tensor matmul_at(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor identity(std::size_t n);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, real s);
real max_abs_diff(const Tensor& a, const Tensor& b);
real frobenius_norm(const Tensor& a);
/// Copies the listed rows of `src` into a new tensor.
Tensor gather_rows(const Tensor& src, std::span<const std::size_t> rows);

/// Fixed-point value with 64 fractional bits held in a signed 128-bit integer.
/// Addition is associative and commutative, so any reduction expressed in it is
/// independent of partitioning, scheduling and summation order.
using fixed_t = __int128;

inline constexpr int kFixedFractionBits = 64;

/// Rounds `x` to the fixed-point grid. Throws NumericError on non-finite input
/// or magnitude ≥ 2^62.
fixed_t to_fixed(real x);
real from_fixed(fixed_t v);

/// Tensor of fixed-point accumulators with the same row-major layout as Tensor.
class ExactTensor {
 public:
  ExactTensor() = default;
  ExactTensor(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  void add(std::size_t index, real x) { data_[index] += to_fixed(x); }
  void add(std::size_t r, std::size_t c, real x) { data_[r * cols_ + c] += to_fixed(x); }
  void add_raw(std::size_t index, fixed_t v) { data_[index] += v; }
  void add_row(std::size_t r, std::span<const real> values);
  void add_tensor(const Tensor& t);
  /// Adds row `src_row` of `other` into row `r`.
  void add_row_from(std::size_t r, const ExactTensor& other, std::size_t src_row);
  void merge(const ExactTensor& other);
  void clear();

  fixed_t raw(std::size_t i) const { return data_[i]; }
  real value(std::size_t r, std::size_t c) const { return from_fixed(data_[r * cols_ + c]); }
  Tensor to_tensor() const;
  Tensor row_tensor(std::size_t r) const;

  bool operator==(const ExactTensor& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<fixed_t> data_;
};

/// Scalar counterpart of ExactTensor.
class ExactSum {
 public:
  void add(real x) { acc_ += to_fixed(x); }
  void merge(const ExactSum& other) { acc_ += other.acc_; }
  real value() const { return from_fixed(acc_); }
  fixed_t raw() const { return acc_; }

 private:
  fixed_t acc_ = 0;
};

}  // namespace tgar
