#pragma once

// Differentiable building blocks with hand-derived backward passes.
//
// Forward functions write their output. Backward functions ACCUMULATE (+=) into
// every gradient span they are given; an empty span means "not needed".

#include <cstddef>
#include <span>
#include <vector>

#include "moemeta/tensor.hpp"

namespace moemeta {

// y = W x (+ b). W is (m x n), x has n entries, y has m entries; b may be empty.
void linear_forward(const Tensor& weight, std::span<const double> x, std::span<const double> bias,
                    std::span<double> y);
Tensor linear_forward(const Tensor& weight, const Tensor& x, const Tensor* bias = nullptr);

// dW += g x^T, dx += W^T g, db += g.
void linear_backward(const Tensor& weight, std::span<const double> x, std::span<const double> grad_out,
                     std::span<double> grad_weight, std::span<double> grad_x,
                     std::span<double> grad_bias);

void relu_forward(std::span<const double> x, std::span<double> y);
// Subgradient 0 at exactly 0.
void relu_backward(std::span<const double> x, std::span<const double> grad_out, std::span<double> grad_x);

double sigmoid(double x);
// d sigmoid / dx expressed through the output value.
inline double sigmoid_grad_from_output(double s) { return s * (1.0 - s); }

// Max-subtracted softmax; x must be non-empty.
void softmax_forward(std::span<const double> x, std::span<double> y);
// Jacobian-vector product through softmax: dx += y * (g - <y, g>).
void softmax_backward(std::span<const double> y, std::span<const double> grad_out, std::span<double> grad_x);

double l2_norm(std::span<const double> v);
// d||v||/dv = v / ||v||, the zero vector when ||v|| == 0.
void l2_norm_backward(std::span<const double> v, double norm, double grad_out, std::span<double> grad_v);

// Two-layer perceptron: out = W2 relu(W1 x + b1) + b2.
struct MlpWeights {
  const Tensor& w1;
  const Tensor& b1;
  const Tensor& w2;
  const Tensor& b2;

  std::size_t input_dim() const { return w1.cols(); }
  std::size_t hidden_dim() const { return w1.rows(); }
  std::size_t output_dim() const { return w2.rows(); }
};

struct MlpGrads {
  std::span<double> w1;
  std::span<double> b1;
  std::span<double> w2;
  std::span<double> b2;
};

struct MlpCache {
  std::vector<double> input;
  std::vector<double> pre;
  std::vector<double> hidden;
  std::vector<double> out;
};

void mlp_forward(const MlpWeights& mlp, std::span<const double> x, MlpCache& cache);
void mlp_backward(const MlpWeights& mlp, const MlpCache& cache, std::span<const double> grad_out,
                  const MlpGrads& grads, std::span<double> grad_x);

}  // namespace moemeta
