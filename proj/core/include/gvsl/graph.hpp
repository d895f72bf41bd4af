#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gvsl/tensor.hpp"

namespace gvsl::ad {

enum class OpKind {
  Input,
  Parameter,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Square,
  Sqrt,
  Negate,
  Scale,
  AddScalar,
  Sum,
  Mean,
  Concat,
  Conv3d,
  Upsample2x,
  Linear,
  LeakyRelu,
  Sigmoid,
  Tanh,
  GroupNorm,
  GlobalAvgPool,
  BoxSum,
  ForwardDiff,
  SoftmaxCrossEntropy,
  Warp,
  AffineMatrix,
  AffineField,
};

std::string_view op_name(OpKind kind);

/// A differentiable operation. Implementations are stateless apart from
/// construction-time attributes, so one instance may be evaluated repeatedly.
class Op {
 public:
  virtual ~Op() = default;
  virtual OpKind kind() const = 0;
  /// Throws ShapeError when the inputs are incompatible.
  virtual Shape output_shape(std::span<const Shape> inputs) const = 0;
  virtual Tensor forward(std::span<const Tensor* const> inputs) const = 0;
  /// Adds d(loss)/d(input_i) into grads[i]; null entries need no gradient.
  virtual void backward(std::span<const Tensor* const> inputs, const Tensor& output,
                        const Tensor& grad_output, std::span<Tensor* const> grads) const = 0;
};

/// Handle to a node of a Graph.
struct Var {
  std::uint32_t index = 0;
  friend bool operator==(Var, Var) = default;
};

using Bindings = std::unordered_map<std::string, Tensor>;
using TensorMap = std::map<std::string, Tensor>;

/// Define-then-run computation graph with reverse-mode differentiation.
///
/// Nodes are appended in topological order. `evaluate` binds named inputs and
/// parameters, runs every node once in insertion order and returns the marked
/// outputs. `backpropagate` then walks the nodes in reverse from a scalar loss.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var input(std::string name, Shape shape, bool requires_grad = false);
  Var parameter(std::string name, Shape shape);
  Var constant(Tensor value);
  Var apply(std::unique_ptr<Op> op, std::vector<Var> inputs);

  void mark_output(std::string name, Var var);

  std::size_t size() const { return nodes_.size(); }
  const Shape& shape(Var var) const { return node(var).shape; }
  OpKind kind(Var var) const { return node(var).kind; }
  const std::string& name(Var var) const { return node(var).name; }
  std::span<const Var> parents(Var var) const { return node(var).parents; }
  bool requires_grad(Var var) const { return node(var).requires_grad; }
  std::optional<Var> find(std::string_view name) const;

  /// Names of all parameter nodes, in insertion order.
  std::vector<std::string> parameter_names() const;

  /// Runs the forward pass. Every Input and Parameter must be bound; extra
  /// bindings are ignored. Throws NumericalError naming the node when an
  /// intermediate value is not finite.
  TensorMap evaluate(const Bindings& bindings);
  bool evaluated() const { return evaluated_; }

  const Tensor& value(Var var) const;

  /// Reverse pass from a scalar node. Returns gradients for every named leaf
  /// that requires a gradient (zero tensors for leaves the loss ignores).
  TensorMap backpropagate(Var loss, double seed = 1.0);

  /// Gradient of a node after backpropagate; null when the node carries
  /// none (constants, nodes independent of any differentiable leaf, or
  /// intermediates whose gradient was released).
  const Tensor* gradient(Var var) const;

 private:
  struct Node {
    OpKind kind = OpKind::Constant;
    std::string name;
    std::vector<Var> parents;
    std::unique_ptr<Op> op;
    Shape shape;
    bool requires_grad = false;
    Tensor value;
    std::optional<Tensor> grad;
  };

  const Node& node(Var var) const;
  Var push(Node n);

  std::vector<Node> nodes_;
  std::unordered_map<std::string, Var> names_;
  std::vector<std::pair<std::string, Var>> outputs_;
  bool evaluated_ = false;
};

}  // namespace gvsl::ad
