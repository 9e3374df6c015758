#pragma once

#include "rfamoe/tensor.hpp"

// Value-level kernels. The autodiff graph wraps these and adds their adjoints.
namespace rfamoe::ops {

enum class Padding { same, valid };

/// Cross-correlation over the last axis of a [N, Cin, T] input with a
/// [Cout, Cin, S] kernel. Same padding splits S-1 zeros as (S-1)/2 on the
/// left and the remainder on the right, so even kernels pad one extra on the
/// right.
Tensor conv1d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              Padding padding = Padding::same);

struct Conv1dGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};

Conv1dGrads conv1d_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out,
                            Padding padding = Padding::same);

/// Per-(n, c) normalization over the time axis of [N, C, T] with population
/// variance, followed by gamma * y + beta.
Tensor instance_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                     double eps = 1e-5);

/// x * Phi(x) with the exact Gaussian CDF.
Tensor gelu(const Tensor& input);
double gelu(double x);
double gelu_derivative(double x);

/// Softmax along the last axis.
Tensor softmax(const Tensor& input);

/// [N, C, T] -> [N, C], mean over T.
Tensor mean_last_axis(const Tensor& input);

/// y = x W^T + b for x [N, Din], W [Dout, Din], b [Dout].
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

}  // namespace rfamoe::ops
