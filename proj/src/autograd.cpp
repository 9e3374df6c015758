#include "rfamoe/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

namespace rfamoe::ad {

const Tensor& Var::value() const { return graph->node(id).value; }

Var Graph::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.leaf = true;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Graph::record(std::string op, std::span<const Var> inputs, Tensor value,
                  BackwardFn backward) {
  Node n;
  n.op = std::move(op);
  n.value = std::move(value);
  for (const auto& in : inputs) {
    if (in.graph != this) throw std::logic_error(n.op + ": input belongs to another graph");
    n.inputs.push_back(in.id);
    n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

std::map<NodeId, Tensor> backward(const Graph& graph, NodeId loss) {
  const Node& out = graph.node(loss);
  if (out.value.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_to_string(out.value.shape()));
  }
  std::vector<std::optional<Tensor>> grads(graph.size());
  grads[loss] = Tensor(out.value.shape(), 1.0);
  std::vector<Tensor*> slots;
  for (NodeId id = loss + 1; id-- > 0;) {
    const Node& node = graph.node(id);
    if (!grads[id] || !node.backward) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      const NodeId in = node.inputs[i];
      if (!graph.node(in).requires_grad) continue;
      if (!grads[in]) grads[in] = Tensor(graph.node(in).value.shape());
      slots[i] = &*grads[in];
    }
    node.backward(*grads[id], slots);
    if (!graph.node(id).leaf) grads[id].reset();
  }
  std::map<NodeId, Tensor> result;
  for (NodeId id = 0; id < graph.size(); ++id) {
    const Node& node = graph.node(id);
    if (!node.leaf || !node.requires_grad) continue;
    result.emplace(id, grads[id] ? std::move(*grads[id]) : Tensor(node.value.shape()));
  }
  return result;
}

namespace {

Graph& graph_of(Var a) { return *a.graph; }

void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* layout) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected " + layout + ", got " +
                     shape_to_string(t.shape()));
  }
}

}  // namespace

Var add(Var a, Var b) {
  Tensor y = a.value() + b.value();
  return graph_of(a).record("add", {a, b}, std::move(y),
                            [](const Tensor& gy, std::span<Tensor* const> g) {
                              accumulate(g[0], gy);
                              accumulate(g[1], gy);
                            });
}

Var sub(Var a, Var b) {
  Tensor y = a.value() - b.value();
  return graph_of(a).record("sub", {a, b}, std::move(y),
                            [](const Tensor& gy, std::span<Tensor* const> g) {
                              accumulate(g[0], gy);
                              if (g[1]) accumulate(g[1], -1.0 * gy);
                            });
}

Var mul(Var a, Var b) {
  Tensor y = hadamard(a.value(), b.value());
  return graph_of(a).record("mul", {a, b}, std::move(y),
                            [a, b](const Tensor& gy, std::span<Tensor* const> g) {
                              if (g[0]) accumulate(g[0], hadamard(gy, b.value()));
                              if (g[1]) accumulate(g[1], hadamard(gy, a.value()));
                            });
}

Var scale(Var a, double s) {
  return graph_of(a).record("scale", {a}, s * a.value(),
                            [s](const Tensor& gy, std::span<Tensor* const> g) {
                              accumulate(g[0], s * gy);
                            });
}

Var sum(Var a) {
  return graph_of(a).record("sum", {a}, Tensor::scalar(rfamoe::sum(a.value())),
                            [a](const Tensor& gy, std::span<Tensor* const> g) {
                              if (!g[0]) return;
                              for (auto& v : g[0]->data()) v += gy[0];
                            });
}

Var mse(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mse");
  const std::size_t n = a.value().numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  return graph_of(a).record(
      "mse", {a, b}, Tensor::scalar(acc / static_cast<double>(n)),
      [a, b, n](const Tensor& gy, std::span<Tensor* const> g) {
        const double k = 2.0 * gy[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double d = k * (a.value()[i] - b.value()[i]);
          if (g[0]) (*g[0])[i] += d;
          if (g[1]) (*g[1])[i] -= d;
        }
      });
}

Var reshape(Var a, Shape shape) {
  return graph_of(a).record("reshape", {a}, a.value().reshaped(std::move(shape)),
                            [](const Tensor& gy, std::span<Tensor* const> g) {
                              if (!g[0]) return;
                              auto d = g[0]->data();
                              for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i];
                            });
}

Var conv1d(Var input, Var weight, Var bias, ops::Padding padding) {
  Tensor y = ops::conv1d(input.value(), weight.value(), bias.value(), padding);
  return graph_of(input).record(
      "conv1d", {input, weight, bias}, std::move(y),
      [input, weight, padding](const Tensor& gy, std::span<Tensor* const> g) {
        auto grads = ops::conv1d_backward(input.value(), weight.value(), gy, padding);
        accumulate(g[0], grads.input);
        accumulate(g[1], grads.weight);
        accumulate(g[2], grads.bias);
      });
}

namespace {

// Rows of `src` ([N, C, T]) listed in `rows`, packed into [rows.size(), C, T].
Tensor gather_batch(const Tensor& src, const std::vector<std::size_t>& rows) {
  const std::size_t stride = src.numel() / src.dim(0);
  Tensor out({rows.size(), src.dim(1), src.dim(2)});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(src.data().begin() + rows[r] * stride, stride, out.data().begin() + r * stride);
  }
  return out;
}

void scatter_batch(const Tensor& packed, const std::vector<std::size_t>& rows, Tensor& dst,
                   bool add) {
  const std::size_t stride = packed.numel() / packed.dim(0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto src = packed.data().subspan(r * stride, stride);
    auto out = dst.data().subspan(rows[r] * stride, stride);
    for (std::size_t i = 0; i < stride; ++i) out[i] = add ? out[i] + src[i] : src[i];
  }
}

}  // namespace

Var routed_conv1d(Var input, std::span<const Var> weights, std::span<const Var> biases,
                  std::span<const std::size_t> index) {
  const Tensor& x = input.value();
  require_rank(x, 3, "routed_conv1d", "[N,Cin,T]");
  if (weights.empty() || weights.size() != biases.size()) {
    throw ShapeError("routed_conv1d: need one bias per expert weight");
  }
  if (index.size() != x.dim(0)) {
    throw ShapeError("routed_conv1d: routing index length " + std::to_string(index.size()) +
                     " != input axis 0 (" + std::to_string(x.dim(0)) + ")");
  }
  const std::size_t experts = weights.size();
  const std::size_t cout = weights[0].value().dim(0);
  std::vector<std::vector<std::size_t>> groups(experts);
  for (std::size_t n = 0; n < index.size(); ++n) {
    if (index[n] >= experts) throw std::out_of_range("routed_conv1d: expert index out of range");
    groups[index[n]].push_back(n);
  }
  Tensor y({x.dim(0), cout, x.dim(2)});
  for (std::size_t e = 0; e < experts; ++e) {
    if (weights[e].value().dim(0) != cout) {
      throw ShapeError("routed_conv1d: expert " + std::to_string(e) +
                       " output channel axis 0 differs from expert 0");
    }
    if (groups[e].empty()) continue;
    Tensor part = ops::conv1d(gather_batch(x, groups[e]), weights[e].value(), biases[e].value());
    scatter_batch(part, groups[e], y, false);
  }
  std::vector<Var> inputs{input};
  inputs.insert(inputs.end(), weights.begin(), weights.end());
  inputs.insert(inputs.end(), biases.begin(), biases.end());
  std::vector<Var> w(weights.begin(), weights.end());
  return graph_of(input).record(
      "routed_conv1d", inputs, std::move(y),
      [input, w, groups, experts](const Tensor& gy, std::span<Tensor* const> g) {
        for (std::size_t e = 0; e < experts; ++e) {
          if (groups[e].empty()) continue;
          auto grads = ops::conv1d_backward(gather_batch(input.value(), groups[e]), w[e].value(),
                                            gather_batch(gy, groups[e]));
          if (g[0]) scatter_batch(grads.input, groups[e], *g[0], true);
          accumulate(g[1 + e], grads.weight);
          accumulate(g[1 + experts + e], grads.bias);
        }
      });
}

Var instance_norm(Var input, Var gamma, Var beta, double eps) {
  Tensor y = ops::instance_norm(input.value(), gamma.value(), beta.value(), eps);
  return graph_of(input).record(
      "instance_norm", {input, gamma, beta}, std::move(y),
      [input, gamma, eps](const Tensor& gy, std::span<Tensor* const> g) {
        const Tensor& x = input.value();
        const std::size_t n = x.dim(0), c = x.dim(1), t = x.dim(2);
        const double tn = static_cast<double>(t);
        std::vector<double> xhat(t);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t off = (i * c + j) * t;
            double mean = 0.0;
            for (std::size_t k = 0; k < t; ++k) mean += x[off + k];
            mean /= tn;
            double var = 0.0;
            for (std::size_t k = 0; k < t; ++k) var += (x[off + k] - mean) * (x[off + k] - mean);
            var /= tn;
            const double inv = 1.0 / std::sqrt(var + eps);
            double sum_g = 0.0, sum_gx = 0.0, sum_gy = 0.0, sum_gyx = 0.0;
            for (std::size_t k = 0; k < t; ++k) {
              xhat[k] = (x[off + k] - mean) * inv;
              const double gxh = gy[off + k] * gamma.value()[j];
              sum_g += gxh;
              sum_gx += gxh * xhat[k];
              sum_gy += gy[off + k];
              sum_gyx += gy[off + k] * xhat[k];
            }
            if (g[0]) {
              for (std::size_t k = 0; k < t; ++k) {
                const double gxh = gy[off + k] * gamma.value()[j];
                (*g[0])[off + k] += inv / tn * (tn * gxh - sum_g - xhat[k] * sum_gx);
              }
            }
            if (g[1]) (*g[1])[j] += sum_gyx;
            if (g[2]) (*g[2])[j] += sum_gy;
          }
        }
      });
}

Var gelu(Var a) {
  return graph_of(a).record("gelu", {a}, ops::gelu(a.value()),
                            [a](const Tensor& gy, std::span<Tensor* const> g) {
                              if (!g[0]) return;
                              const Tensor& x = a.value();
                              for (std::size_t i = 0; i < x.numel(); ++i) {
                                (*g[0])[i] += gy[i] * ops::gelu_derivative(x[i]);
                              }
                            });
}

Var softmax(Var a) {
  Tensor y = ops::softmax(a.value());
  const Graph& gr = graph_of(a);
  const NodeId self = gr.size();
  Graph* gp = a.graph;
  return graph_of(a).record(
      "softmax", {a}, std::move(y), [gp, self](const Tensor& gy, std::span<Tensor* const> g) {
        if (!g[0]) return;
        const Tensor& p = gp->node(self).value;
        const std::size_t k = p.shape().back();
        for (std::size_t off = 0; off < p.numel(); off += k) {
          double dot = 0.0;
          for (std::size_t j = 0; j < k; ++j) dot += gy[off + j] * p[off + j];
          for (std::size_t j = 0; j < k; ++j) (*g[0])[off + j] += p[off + j] * (gy[off + j] - dot);
        }
      });
}

Var linear(Var input, Var weight, Var bias) {
  Tensor y = ops::linear(input.value(), weight.value(), bias.value());
  return graph_of(input).record(
      "linear", {input, weight, bias}, std::move(y),
      [input, weight](const Tensor& gy, std::span<Tensor* const> g) {
        const Tensor& x = input.value();
        const Tensor& w = weight.value();
        const std::size_t n = x.dim(0), din = x.dim(1), dout = w.dim(0);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t o = 0; o < dout; ++o) {
            const double go = gy.at(i, o);
            if (g[2]) (*g[2])[o] += go;
            for (std::size_t j = 0; j < din; ++j) {
              if (g[0]) g[0]->at(i, j) += go * w.at(o, j);
              if (g[1]) g[1]->at(o, j) += go * x.at(i, j);
            }
          }
        }
      });
}

Var matmul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& w = b.value();
  require_rank(x, 2, "matmul", "[M,K]");
  require_rank(w, 2, "matmul", "[K,P]");
  if (x.dim(1) != w.dim(0)) {
    throw ShapeError("matmul: left axis 1 (" + std::to_string(x.dim(1)) + ") != right axis 0 (" +
                     std::to_string(w.dim(0)) + ")");
  }
  const std::size_t m = x.dim(0), k = x.dim(1), p = w.dim(1);
  Tensor y({m, p});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t c = 0; c < p; ++c) y.at(i, c) += x.at(i, j) * w.at(j, c);
  return graph_of(a).record("matmul", {a, b}, std::move(y),
                            [a, b, m, k, p](const Tensor& gy, std::span<Tensor* const> g) {
                              const Tensor& x = a.value();
                              const Tensor& w = b.value();
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < k; ++j)
                                  for (std::size_t c = 0; c < p; ++c) {
                                    if (g[0]) g[0]->at(i, j) += gy.at(i, c) * w.at(j, c);
                                    if (g[1]) g[1]->at(j, c) += x.at(i, j) * gy.at(i, c);
                                  }
                            });
}

Var mean_last_axis(Var a) {
  return graph_of(a).record("mean_last_axis", {a}, ops::mean_last_axis(a.value()),
                            [a](const Tensor& gy, std::span<Tensor* const> g) {
                              if (!g[0]) return;
                              const std::size_t t = a.value().dim(2);
                              const double inv = 1.0 / static_cast<double>(t);
                              for (std::size_t i = 0; i < gy.numel(); ++i)
                                for (std::size_t k = 0; k < t; ++k) (*g[0])[i * t + k] += gy[i] * inv;
                            });
}

Var channel_slice(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  require_rank(x, 3, "channel_slice", "[N,C,T]");
  if (begin >= end || end > x.dim(1)) {
    throw ShapeError("channel_slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for channel axis 1 of length " + std::to_string(x.dim(1)));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), t = x.dim(2), w = end - begin;
  Tensor y({n, w, t});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.data().begin() + (i * c + begin) * t, w * t, y.data().begin() + i * w * t);
  return graph_of(a).record("channel_slice", {a}, std::move(y),
                            [n, c, t, w, begin](const Tensor& gy, std::span<Tensor* const> g) {
                              if (!g[0]) return;
                              for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t j = 0; j < w * t; ++j)
                                  (*g[0])[(i * c + begin) * t + j] += gy[i * w * t + j];
                            });
}

Var scale_rows(Var a, Var s) {
  const Tensor& x = a.value();
  if (s.value().shape() != Shape{x.dim(0)}) {
    throw ShapeError("scale_rows: scale must be [N=" + std::to_string(x.dim(0)) + "]");
  }
  const std::size_t stride = x.numel() / x.dim(0);
  Tensor y = x;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= s.value()[i / stride];
  return graph_of(a).record("scale_rows", {a, s}, std::move(y),
                            [a, s, stride](const Tensor& gy, std::span<Tensor* const> g) {
                              for (std::size_t i = 0; i < gy.numel(); ++i) {
                                if (g[0]) (*g[0])[i] += gy[i] * s.value()[i / stride];
                                if (g[1]) (*g[1])[i / stride] += gy[i] * a.value()[i];
                              }
                            });
}

Var gather_rows(Var probs, std::span<const std::size_t> index) {
  const Tensor& p = probs.value();
  require_rank(p, 2, "gather_rows", "[N,E]");
  if (index.size() != p.dim(0)) throw ShapeError("gather_rows: index length != axis 0");
  Tensor y({p.dim(0)});
  for (std::size_t n = 0; n < index.size(); ++n) y[n] = p.at(n, index[n]);
  std::vector<std::size_t> idx(index.begin(), index.end());
  return graph_of(probs).record("gather_rows", {probs}, std::move(y),
                                [idx](const Tensor& gy, std::span<Tensor* const> g) {
                                  if (!g[0]) return;
                                  for (std::size_t n = 0; n < idx.size(); ++n)
                                    g[0]->at(n, idx[n]) += gy[n];
                                });
}

Var stack(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  const Shape& inner = parts[0].value().shape();
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor y(shape);
  const std::size_t stride = parts[0].value().numel();
  for (std::size_t k = 0; k < parts.size(); ++k) {
    if (parts[k].value().shape() != inner) {
      throw ShapeError("stack: part " + std::to_string(k) + " has shape " +
                       shape_to_string(parts[k].value().shape()) + ", expected " +
                       shape_to_string(inner));
    }
    std::copy_n(parts[k].value().data().begin(), stride, y.data().begin() + k * stride);
  }
  return graph_of(parts[0]).record("stack", parts, std::move(y),
                                   [stride](const Tensor& gy, std::span<Tensor* const> g) {
                                     for (std::size_t k = 0; k < g.size(); ++k) {
                                       if (!g[k]) continue;
                                       for (std::size_t i = 0; i < stride; ++i)
                                         (*g[k])[i] += gy[k * stride + i];
                                     }
                                   });
}

Var film(Var h, Var film_params) {
  const Tensor& x = h.value();
  const Tensor& f = film_params.value();
  require_rank(x, 3, "film", "[N,L,T]");
  require_rank(f, 2, "film", "[G,2L]");
  const std::size_t n = x.dim(0), l = x.dim(1), t = x.dim(2), groups = f.dim(0);
  if (f.dim(1) != 2 * l) {
    throw ShapeError("film: parameter axis 1 must be 2L=" + std::to_string(2 * l) + ", got " +
                     std::to_string(f.dim(1)));
  }
  if (n % groups != 0) {
    throw ShapeError("film: feature axis 0 (" + std::to_string(n) +
                     ") not divisible by group axis 0 (" + std::to_string(groups) + ")");
  }
  const std::size_t per = n / groups;
  Tensor y(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < l; ++j) {
      const double gam = f.at(i / per, j), bet = f.at(i / per, l + j);
      for (std::size_t k = 0; k < t; ++k) y.at(i, j, k) = gam * x.at(i, j, k) + bet;
    }
  return graph_of(h).record(
      "film", {h, film_params}, std::move(y),
      [h, film_params, n, l, t, per](const Tensor& gy, std::span<Tensor* const> g) {
        const Tensor& x = h.value();
        const Tensor& f = film_params.value();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < l; ++j) {
            const double gam = f.at(i / per, j);
            double sgx = 0.0, sg = 0.0;
            for (std::size_t k = 0; k < t; ++k) {
              const double go = gy.at(i, j, k);
              if (g[0]) g[0]->at(i, j, k) += gam * go;
              sgx += go * x.at(i, j, k);
              sg += go;
            }
            if (g[1]) {
              g[1]->at(i / per, j) += sgx;
              g[1]->at(i / per, l + j) += sg;
            }
          }
      });
}

Var per_sample_conv1x1(Var input, Var weight, Var bias) {
  const Tensor& x = input.value();
  require_rank(x, 3, "per_sample_conv1x1", "[N,L,T]");
  const std::size_t n = x.dim(0), l = x.dim(1), t = x.dim(2);
  if (weight.value().shape() != Shape{n, l} || bias.value().shape() != Shape{n}) {
    throw ShapeError("per_sample_conv1x1: weight must be [N,L] and bias [N] for input " +
                     shape_to_string(x.shape()));
  }
  Tensor y({n, 1, t});
  for (std::size_t i = 0; i < n; ++i) {
    double* yrow = y.data().data() + i * t;
    std::fill(yrow, yrow + t, bias.value()[i]);
    for (std::size_t j = 0; j < l; ++j) {
      const double w = weight.value().at(i, j);
      const double* xrow = x.data().data() + (i * l + j) * t;
      for (std::size_t k = 0; k < t; ++k) yrow[k] += w * xrow[k];
    }
  }
  return graph_of(input).record(
      "per_sample_conv1x1", {input, weight, bias}, std::move(y),
      [input, weight, n, l, t](const Tensor& gy, std::span<Tensor* const> g) {
        const Tensor& x = input.value();
        for (std::size_t i = 0; i < n; ++i) {
          const double* gyrow = gy.data().data() + i * t;
          if (g[2]) {
            double s = 0.0;
            for (std::size_t k = 0; k < t; ++k) s += gyrow[k];
            (*g[2])[i] += s;
          }
          for (std::size_t j = 0; j < l; ++j) {
            const double w = weight.value().at(i, j);
            const double* xrow = x.data().data() + (i * l + j) * t;
            double s = 0.0;
            for (std::size_t k = 0; k < t; ++k) {
              s += gyrow[k] * xrow[k];
              if (g[0]) (*g[0])[(i * l + j) * t + k] += w * gyrow[k];
            }
            if (g[1]) g[1]->at(i, j) += s;
          }
        }
      });
}

Var ParamScope::bind(const Tensor& parameter) {
  auto it = bound_.find(&parameter);
  if (it != bound_.end()) return it->second;
  Var v = graph_->leaf(parameter, track_);
  bound_.emplace(&parameter, v);
  return v;
}

const Var* ParamScope::find(const Tensor& parameter) const {
  auto it = bound_.find(&parameter);
  return it == bound_.end() ? nullptr : &it->second;
}

}  // namespace rfamoe::ad
