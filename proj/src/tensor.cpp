#include "moemeta/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "moemeta/error.hpp"

namespace moemeta {

Tensor Tensor::vector(std::vector<double> values) {
  Tensor t;
  t.shape_ = {values.size()};
  t.data_ = std::move(values);
  return t;
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  if (values.size() != rows * cols) {
    fail(ErrorKind::kDimension, "matrix data of length " + std::to_string(values.size()) +
                                    " does not fit shape (" + std::to_string(rows) + ", " +
                                    std::to_string(cols) + ")");
  }
  Tensor t;
  t.shape_ = {rows, cols};
  t.data_ = std::move(values);
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) fail(ErrorKind::kDimension, "ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return matrix(r, c, std::move(values));
}

Tensor Tensor::with_shape(const std::vector<std::size_t>& shape) {
  if (shape.size() == 1) return Tensor(shape[0]);
  if (shape.size() == 2) return Tensor(shape[0], shape[1]);
  fail(ErrorKind::kDimension, "tensor rank must be 1 or 2");
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const { return moemeta::all_finite(data_); }

std::string Tensor::shape_string() const {
  std::string s = "(";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape_[i]);
  }
  if (shape_.size() == 1) s += ",";
  return s + ")";
}

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

double sum(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace moemeta
