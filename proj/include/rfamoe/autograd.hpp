#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rfamoe/ops.hpp"
#include "rfamoe/tensor.hpp"

// Define-by-run reverse-mode autodiff. Every operation appends a node to the
// graph; node ids are therefore topologically ordered and backward() replays
// the tape in reverse.
namespace rfamoe::ad {

using NodeId = std::size_t;

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  /// Copy, since node storage moves as the graph grows.
  Shape shape() const { return value().shape(); }
};

/// Adjoint of one node. `grad_in[i]` is null when input i needs no gradient;
/// otherwise the function must accumulate (+=) into it.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

struct Node {
  std::string op;
  std::vector<NodeId> inputs;
  Tensor value;
  BackwardFn backward;
  bool requires_grad = false;
  bool leaf = false;
};

class Graph {
 public:
  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(std::string op, std::span<const Var> inputs, Tensor value, BackwardFn backward);
  Var record(std::string op, std::initializer_list<Var> inputs, Tensor value,
             BackwardFn backward) {
    return record(std::move(op), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(value), std::move(backward));
  }

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

/// Gradients of a scalar loss with respect to every leaf created with
/// requires_grad. Leaves the loss does not depend on get zero tensors.
std::map<NodeId, Tensor> backward(const Graph& graph, NodeId loss);

// ---- operations ----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);
/// Mean of squared differences, shape [1].
Var mse(Var a, Var b);
Var reshape(Var a, Shape shape);

Var conv1d(Var input, Var weight, Var bias, ops::Padding padding = ops::Padding::same);
/// Row n of the [N, Cin, T] input is convolved with expert index[n] only.
/// All experts share Cout; kernels may differ in size and use same padding.
Var routed_conv1d(Var input, std::span<const Var> weights, std::span<const Var> biases,
                  std::span<const std::size_t> index);
Var instance_norm(Var input, Var gamma, Var beta, double eps = 1e-5);
Var gelu(Var a);
Var softmax(Var a);
Var linear(Var input, Var weight, Var bias);
Var matmul(Var a, Var b);
Var mean_last_axis(Var a);

/// Channels [begin, end) of a [N, C, T] tensor.
Var channel_slice(Var a, std::size_t begin, std::size_t end);
/// x[n, ...] * s[n] for s of shape [N].
Var scale_rows(Var a, Var s);
/// probs[n, index[n]] -> [N].
Var gather_rows(Var probs, std::span<const std::size_t> index);
/// Stack equally shaped tensors along a new leading axis.
Var stack(std::span<const Var> parts);
/// Feature-wise affine map. h is [N, L, T]; film is [G, 2L] holding (gamma,
/// beta) per group, where row n uses group n / (N / G).
Var film(Var h, Var film_params);
/// Per-sample pointwise convolution: y[n, 0, t] = b[n] + sum_l w[n, l] x[n, l, t].
Var per_sample_conv1x1(Var input, Var weight, Var bias);

/// Binds parameter tensors to graph leaves, once per tensor, so gradients can
/// be looked up by the parameter afterwards.
class ParamScope {
 public:
  ParamScope(Graph& graph, bool track_gradients)
      : graph_(&graph), track_(track_gradients) {}

  Var bind(const Tensor& parameter);
  /// Makes later binds of `parameter` resolve to `node` (used by gradient checks).
  void alias(const Tensor& parameter, Var node) { bound_.insert_or_assign(&parameter, node); }
  Var constant(Tensor value) { return graph_->constant(std::move(value)); }
  Graph& graph() noexcept { return *graph_; }
  bool tracking() const noexcept { return track_; }
  /// Node of a bound parameter, if it was used.
  const Var* find(const Tensor& parameter) const;

 private:
  Graph* graph_;
  bool track_;
  std::map<const Tensor*, Var> bound_;
};

}  // namespace rfamoe::ad
