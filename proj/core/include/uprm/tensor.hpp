#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace uprm {

/// Dense row-major matrix of doubles.
///
/// Vectors are represented as 1×n row matrices. Tensors are plain values:
/// copying is deep, and a const Tensor2 can be shared across threads.
class Tensor2 {
 public:
  Tensor2() = default;
  Tensor2(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data);
  Tensor2(std::initializer_list<std::initializer_list<double>> rows);

  static Tensor2 row_vector(std::span<const double> values);
  static Tensor2 column_vector(std::span<const double> values);
  static Tensor2 identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  bool same_shape(const Tensor2& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_string() const;

  bool all_finite() const noexcept;

  Tensor2& operator+=(const Tensor2& other);
  Tensor2& operator*=(double s) noexcept;

  friend bool operator==(const Tensor2&, const Tensor2&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

std::string shape_of(const Tensor2& t);

// Value kernels. These are the forward paths of the tape primitives and are
// usable on their own.

Tensor2 matmul(const Tensor2& a, const Tensor2& b);
/// a · bᵀ
Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b);
/// aᵀ · b
Tensor2 matmul_tn(const Tensor2& a, const Tensor2& b);
Tensor2 transpose(const Tensor2& a);

Tensor2 relu(const Tensor2& x);

/// Max-shifted softmax of a vector. Throws ContractError on empty input.
std::vector<double> softmax(std::span<const double> v, double temperature = 1.0);
/// Row-wise softmax.
Tensor2 softmax_rows(const Tensor2& x, double temperature = 1.0);

/// Max-shifted log(sum(exp(v))).
double log_sum_exp(std::span<const double> v);

inline constexpr double kLayerNormEps = 1e-5;

std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gamma,
                               std::span<const double> beta, double eps = kLayerNormEps);

double sigmoid(double x) noexcept;

/// Throws NumericError naming `what` when any entry is NaN or infinite.
void require_finite(const Tensor2& t, const std::string& what);

}  // namespace uprm
