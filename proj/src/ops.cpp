#include "rfamoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace rfamoe::ops {

namespace {

struct ConvGeometry {
  std::size_t n, cin, cout, t_in, t_out, kernel, pad_left;
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& weight, Padding padding) {
  if (input.rank() != 3) {
    throw ShapeError("conv1d: input must be [N,Cin,T], got " + shape_to_string(input.shape()));
  }
  if (weight.rank() != 3) {
    throw ShapeError("conv1d: weight must be [Cout,Cin,S], got " +
                     shape_to_string(weight.shape()));
  }
  if (weight.dim(1) != input.dim(1)) {
    throw ShapeError("conv1d: input channel axis (input axis 1 = " +
                     std::to_string(input.dim(1)) + ") does not match weight axis 1 (" +
                     std::to_string(weight.dim(1)) + ")");
  }
  ConvGeometry g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.t_in = input.dim(2);
  g.cout = weight.dim(0);
  g.kernel = weight.dim(2);
  if (padding == Padding::same) {
    g.t_out = g.t_in;
    g.pad_left = (g.kernel - 1) / 2;
  } else {
    if (g.kernel > g.t_in) {
      throw ShapeError("conv1d: valid padding needs kernel axis 2 (" + std::to_string(g.kernel) +
                       ") <= input time axis 2 (" + std::to_string(g.t_in) + ")");
    }
    g.t_out = g.t_in - g.kernel + 1;
    g.pad_left = 0;
  }
  return g;
}

// For kernel tap s, the output range [lo, hi) whose source index t + s - pad
// lies inside the input.
inline void tap_range(const ConvGeometry& g, std::size_t s, std::size_t& lo, std::size_t& hi) {
  const long shift = static_cast<long>(s) - static_cast<long>(g.pad_left);
  const long first = std::max<long>(0, -shift);
  const long last = std::min<long>(static_cast<long>(g.t_out), static_cast<long>(g.t_in) - shift);
  lo = static_cast<std::size_t>(first);
  hi = static_cast<std::size_t>(std::max(first, last));
}

}  // namespace

Tensor conv1d(const Tensor& input, const Tensor& weight, const Tensor& bias, Padding padding) {
  const auto g = conv_geometry(input, weight, padding);
  if (bias.rank() != 1 || bias.dim(0) != g.cout) {
    throw ShapeError("conv1d: bias must be [Cout=" + std::to_string(g.cout) + "], got " +
                     shape_to_string(bias.shape()));
  }
  Tensor out({g.n, g.cout, g.t_out});
  const double* x = input.data().data();
  const double* w = weight.data().data();
  double* y = out.data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t co = 0; co < g.cout; ++co) {
      double* yrow = y + (n * g.cout + co) * g.t_out;
      std::fill(yrow, yrow + g.t_out, bias[co]);
      for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const double* xrow = x + (n * g.cin + ci) * g.t_in;
        const double* wrow = w + (co * g.cin + ci) * g.kernel;
        for (std::size_t s = 0; s < g.kernel; ++s) {
          const double ws = wrow[s];
          if (ws == 0.0) continue;
          std::size_t lo, hi;
          tap_range(g, s, lo, hi);
          const double* src = xrow + s - g.pad_left;
          for (std::size_t t = lo; t < hi; ++t) yrow[t] += ws * src[t];
        }
      }
    }
  }
  return out;
}

Conv1dGrads conv1d_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out,
                            Padding padding) {
  const auto g = conv_geometry(input, weight, padding);
  if (grad_out.shape() != Shape{g.n, g.cout, g.t_out}) {
    throw ShapeError("conv1d_backward: grad_out shape " + shape_to_string(grad_out.shape()) +
                     " does not match output shape");
  }
  Conv1dGrads grads{Tensor(input.shape()), Tensor(weight.shape()), Tensor({g.cout})};
  const double* x = input.data().data();
  const double* w = weight.data().data();
  const double* gy = grad_out.data().data();
  double* gx = grads.input.data().data();
  double* gw = grads.weight.data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t co = 0; co < g.cout; ++co) {
      const double* gyrow = gy + (n * g.cout + co) * g.t_out;
      double bsum = 0.0;
      for (std::size_t t = 0; t < g.t_out; ++t) bsum += gyrow[t];
      grads.bias[co] += bsum;
      for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const double* xrow = x + (n * g.cin + ci) * g.t_in;
        double* gxrow = gx + (n * g.cin + ci) * g.t_in;
        const double* wrow = w + (co * g.cin + ci) * g.kernel;
        double* gwrow = gw + (co * g.cin + ci) * g.kernel;
        for (std::size_t s = 0; s < g.kernel; ++s) {
          std::size_t lo, hi;
          tap_range(g, s, lo, hi);
          const double* src = xrow + s - g.pad_left;
          double* gsrc = gxrow + s - g.pad_left;
          const double ws = wrow[s];
          double acc = 0.0;
          for (std::size_t t = lo; t < hi; ++t) {
            acc += gyrow[t] * src[t];
            gsrc[t] += ws * gyrow[t];
          }
          gwrow[s] += acc;
        }
      }
    }
  }
  return grads;
}

Tensor instance_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, double eps) {
  if (input.rank() != 3) {
    throw ShapeError("instance_norm: input must be [N,C,T], got " +
                     shape_to_string(input.shape()));
  }
  const std::size_t n = input.dim(0), c = input.dim(1), t = input.dim(2);
  if (t < 2) throw ShapeError("instance_norm: time axis 2 must have length >= 2");
  if (!(eps > 0.0)) throw std::invalid_argument("instance_norm: eps must be positive");
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("instance_norm: gamma/beta must be [C=" + std::to_string(c) + "]");
  }
  Tensor out(input.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double* row = input.data().data() + (i * c + j) * t;
      double* dst = out.data().data() + (i * c + j) * t;
      double mean = 0.0;
      for (std::size_t k = 0; k < t; ++k) mean += row[k];
      mean /= static_cast<double>(t);
      double var = 0.0;
      for (std::size_t k = 0; k < t; ++k) var += (row[k] - mean) * (row[k] - mean);
      var /= static_cast<double>(t);
      const double inv = 1.0 / std::sqrt(var + eps);
      for (std::size_t k = 0; k < t; ++k) dst[k] = gamma[j] * (row[k] - mean) * inv + beta[j];
    }
  }
  return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Tensor gelu(const Tensor& input) {
  Tensor out = input;
  for (auto& v : out.data()) v = gelu(v);
  return out;
}

Tensor softmax(const Tensor& input) {
  const std::size_t k = input.shape().back();
  Tensor out = input;
  auto d = out.data();
  for (std::size_t off = 0; off < d.size(); off += k) {
    double m = d[off];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, d[off + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      d[off + j] = std::exp(d[off + j] - m);
      z += d[off + j];
    }
    for (std::size_t j = 0; j < k; ++j) d[off + j] /= z;
  }
  return out;
}

Tensor mean_last_axis(const Tensor& input) {
  if (input.rank() != 3) {
    throw ShapeError("mean_last_axis: expected [N,C,T], got " + shape_to_string(input.shape()));
  }
  const std::size_t n = input.dim(0), c = input.dim(1), t = input.dim(2);
  Tensor out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < t; ++k) s += input[i * t + k];
    out[i] = s / static_cast<double>(t);
  }
  return out;
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.rank() != 2 || weight.rank() != 2 || weight.dim(1) != input.dim(1)) {
    throw ShapeError("linear: input " + shape_to_string(input.shape()) + " incompatible with weight " +
                     shape_to_string(weight.shape()) + " (input axis 1 vs weight axis 1)");
  }
  const std::size_t n = input.dim(0), din = input.dim(1), dout = weight.dim(0);
  if (bias.shape() != Shape{dout}) {
    throw ShapeError("linear: bias must be [" + std::to_string(dout) + "]");
  }
  Tensor out({n, dout});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < dout; ++o) {
      double s = bias[o];
      for (std::size_t j = 0; j < din; ++j) s += input.at(i, j) * weight.at(o, j);
      out.at(i, o) = s;
    }
  }
  return out;
}

}  // namespace rfamoe::ops
