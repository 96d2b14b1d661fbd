#include "tgar/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace tgar {

Tensor::Tensor(std::size_t rows, std::size_t cols, real fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<real> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("tensor buffer length " + std::to_string(data_.size()) + " does not match shape " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<real>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<real> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged initializer for tensor");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(r, c, std::move(data));
}

void Tensor::fill(real v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](real v) { return std::isfinite(v); });
}

void Tensor::check_finite(std::string_view where) const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      throw NumericError("non-finite value in " + std::string(where) + " at row " + std::to_string(i / cols_) +
                         ", col " + std::to_string(i % cols_));
    }
  }
}

namespace {

void require(bool ok, const char* op, const Tensor& a, const Tensor& b) {
  if (!ok) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.rows(), "matmul", a, b);
  Tensor out(a.rows(), b.cols());
  const std::size_t inner = a.cols();
  const std::size_t n = b.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    real* dst = out.data() + r * n;
    const real* src = a.data() + r * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const real x = src[k];
      if (x == real{0}) continue;
      const real* brow = b.data() + k * n;
      for (std::size_t c = 0; c < n; ++c) dst[c] += x * brow[c];
    }
  }
  return out;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.cols(), "matmul_bt", a, b);
  Tensor out(a.rows(), b.rows());
  const std::size_t inner = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const real* arow = a.data() + r * inner;
    for (std::size_t c = 0; c < b.rows(); ++c) {
      const real* brow = b.data() + c * inner;
      real s = 0;
      for (std::size_t k = 0; k < inner; ++k) s += arow[k] * brow[k];
      out(r, c) = s;
    }
  }
  return out;
}

Tensor matmul_at(const Tensor& a, const Tensor& b) {
  require(a.rows() == b.rows(), "matmul_at", a, b);
  Tensor out(a.cols(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const real x = a(r, i);
      if (x == real{0}) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += x * b(r, j);
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  Tensor out(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  return out;
}

Tensor identity(std::size_t n) {
  Tensor out(n, n);
  for (std::size_t i = 0; i < n; ++i) out(i, i) = 1;
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "add", a, b);
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "sub", a, b);
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "hadamard", a, b);
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

Tensor scaled(const Tensor& a, real s) {
  Tensor out = a;
  for (auto& v : out.values()) v *= s;
  return out;
}

real max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "max_abs_diff", a, b);
  real m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

real frobenius_norm(const Tensor& a) {
  real s = 0;
  for (real v : a.values()) s += v * v;
  return std::sqrt(s);
}

Tensor gather_rows(const Tensor& src, std::span<const std::size_t> rows) {
  Tensor out(rows.size(), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto from = src.row(rows[i]);
    std::copy(from.begin(), from.end(), out.row(i).begin());
  }
  return out;
}

fixed_t to_fixed(real x) {
  const double d = static_cast<double>(x);
  if (!std::isfinite(d)) throw NumericError("non-finite value entering an exact accumulator");
  if (std::abs(d) >= 0x1p62) throw NumericError("value " + std::to_string(d) + " exceeds exact accumulator range");
  return static_cast<fixed_t>(std::nearbyint(std::ldexp(d, kFixedFractionBits)));
}

real from_fixed(fixed_t v) {
  // Split so both halves convert exactly before the single final rounding.
  const bool neg = v < 0;
  unsigned __int128 mag = neg ? static_cast<unsigned __int128>(-(v + 1)) + 1 : static_cast<unsigned __int128>(v);
  const auto hi = static_cast<std::uint64_t>(mag >> 64);
  const auto lo = static_cast<std::uint64_t>(mag);
  long double out = static_cast<long double>(hi) + std::ldexp(static_cast<long double>(lo), -64);
  if (hi >= (std::uint64_t{1} << 11)) {
    // Beyond long double's 64-bit mantissa the sum above may round twice; fall
    // back to the integer conversion which rounds once.
    out = std::ldexp(static_cast<long double>(mag), -64);
  }
  return static_cast<real>(neg ? -out : out);
}

void ExactTensor::add_row(std::size_t r, std::span<const real> values) {
  fixed_t* dst = data_.data() + r * cols_;
  for (std::size_t c = 0; c < values.size(); ++c) dst[c] += to_fixed(values[c]);
}

void ExactTensor::add_tensor(const Tensor& t) {
  if (t.rows() != rows_ || t.cols() != cols_) throw ShapeError("exact accumulator shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += to_fixed(t[i]);
}

void ExactTensor::add_row_from(std::size_t r, const ExactTensor& other, std::size_t src_row) {
  if (other.cols_ != cols_) throw ShapeError("exact accumulator column mismatch");
  const fixed_t* src = other.data_.data() + src_row * cols_;
  fixed_t* dst = data_.data() + r * cols_;
  for (std::size_t c = 0; c < cols_; ++c) dst[c] += src[c];
}

void ExactTensor::merge(const ExactTensor& other) {
  if (other.rows_ != rows_ || other.cols_ != cols_) throw ShapeError("exact accumulator shape mismatch on merge");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

void ExactTensor::clear() { std::fill(data_.begin(), data_.end(), fixed_t{0}); }

Tensor ExactTensor::to_tensor() const {
  Tensor out(rows_, cols_);
  for (std::size_t i = 0; i < data_.size(); ++i) out[i] = from_fixed(data_[i]);
  return out;
}

Tensor ExactTensor::row_tensor(std::size_t r) const {
  Tensor out(1, cols_);
  for (std::size_t c = 0; c < cols_; ++c) out[c] = from_fixed(data_[r * cols_ + c]);
  return out;
}

}  // namespace tgar
