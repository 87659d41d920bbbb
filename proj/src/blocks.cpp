#include "moemeta/blocks.hpp"

#include <algorithm>
#include <cmath>

#include "moemeta/error.hpp"

namespace moemeta {

namespace {

void require_dims(bool ok, const char* what) {
  if (!ok) fail(ErrorKind::kDimension, what);
}

}  // namespace

void linear_forward(const Tensor& weight, std::span<const double> x, std::span<const double> bias,
                    std::span<double> y) {
  const std::size_t m = weight.rows();
  const std::size_t n = weight.cols();
  require_dims(weight.rank() == 2, "linear: weight must be a matrix");
  require_dims(x.size() == n, "linear: input length does not match weight columns");
  require_dims(y.size() == m, "linear: output length does not match weight rows");
  require_dims(bias.empty() || bias.size() == m, "linear: bias length does not match weight rows");
  const double* w = weight.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double acc = bias.empty() ? 0.0 : bias[i];
    const double* wr = w + i * n;
    for (std::size_t j = 0; j < n; ++j) acc += wr[j] * x[j];
    y[i] = acc;
  }
}

Tensor linear_forward(const Tensor& weight, const Tensor& x, const Tensor* bias) {
  Tensor y(weight.rows());
  linear_forward(weight, x.data(), bias ? bias->data() : std::span<const double>{}, y.data());
  return y;
}

void linear_backward(const Tensor& weight, std::span<const double> x, std::span<const double> grad_out,
                     std::span<double> grad_weight, std::span<double> grad_x,
                     std::span<double> grad_bias) {
  const std::size_t m = weight.rows();
  const std::size_t n = weight.cols();
  require_dims(x.size() == n && grad_out.size() == m, "linear backward: shape mismatch");
  require_dims(grad_weight.empty() || grad_weight.size() == m * n, "linear backward: weight grad shape");
  require_dims(grad_x.empty() || grad_x.size() == n, "linear backward: input grad shape");
  require_dims(grad_bias.empty() || grad_bias.size() == m, "linear backward: bias grad shape");
  const double* w = weight.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double g = grad_out[i];
    if (g == 0.0) continue;
    if (!grad_weight.empty()) {
      double* gw = grad_weight.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) gw[j] += g * x[j];
    }
    if (!grad_x.empty()) {
      const double* wr = w + i * n;
      for (std::size_t j = 0; j < n; ++j) grad_x[j] += wr[j] * g;
    }
    if (!grad_bias.empty()) grad_bias[i] += g;
  }
}

void relu_forward(std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(std::span<const double> x, std::span<const double> grad_out, std::span<double> grad_x) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > 0.0) grad_x[i] += grad_out[i];
  }
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void softmax_forward(std::span<const double> x, std::span<double> y) {
  require_dims(!x.empty() && x.size() == y.size(), "softmax: empty or mismatched input");
  const double peak = *std::max_element(x.begin(), x.end());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - peak);
    total += y[i];
  }
  for (double& v : y) v /= total;
}

void softmax_backward(std::span<const double> y, std::span<const double> grad_out, std::span<double> grad_x) {
  const double inner = dot(y, grad_out);
  for (std::size_t i = 0; i < y.size(); ++i) grad_x[i] += y[i] * (grad_out[i] - inner);
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

void l2_norm_backward(std::span<const double> v, double norm, double grad_out, std::span<double> grad_v) {
  if (norm == 0.0) return;
  axpy(grad_out / norm, v, grad_v);
}

void mlp_forward(const MlpWeights& mlp, std::span<const double> x, MlpCache& cache) {
  cache.input.assign(x.begin(), x.end());
  cache.pre.resize(mlp.hidden_dim());
  cache.hidden.resize(mlp.hidden_dim());
  cache.out.resize(mlp.output_dim());
  linear_forward(mlp.w1, x, mlp.b1.data(), cache.pre);
  relu_forward(cache.pre, cache.hidden);
  linear_forward(mlp.w2, cache.hidden, mlp.b2.data(), cache.out);
}

void mlp_backward(const MlpWeights& mlp, const MlpCache& cache, std::span<const double> grad_out,
                  const MlpGrads& grads, std::span<double> grad_x) {
  std::vector<double> grad_hidden(mlp.hidden_dim(), 0.0);
  linear_backward(mlp.w2, cache.hidden, grad_out, grads.w2, grad_hidden, grads.b2);
  std::vector<double> grad_pre(mlp.hidden_dim(), 0.0);
  relu_backward(cache.pre, grad_hidden, grad_pre);
  linear_backward(mlp.w1, cache.input, grad_pre, grads.w1, grad_x, grads.b1);
}

}  // namespace moemeta
