#include "gvsl/graph.hpp"

#include <algorithm>

#include "gvsl/errors.hpp"

namespace gvsl::ad {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Parameter: return "parameter";
    case OpKind::Constant: return "constant";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Square: return "square";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Negate: return "negate";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Concat: return "concat";
    case OpKind::Conv3d: return "conv3d";
    case OpKind::Upsample2x: return "upsample2x";
    case OpKind::Linear: return "linear";
    case OpKind::LeakyRelu: return "leaky_relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Tanh: return "tanh";
    case OpKind::GroupNorm: return "group_norm";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::BoxSum: return "box_sum";
    case OpKind::ForwardDiff: return "forward_diff";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::Warp: return "trilinear_warp";
    case OpKind::AffineMatrix: return "affine_matrix";
    case OpKind::AffineField: return "affine_field";
  }
  return "unknown";
}

const Graph::Node& Graph::node(Var var) const {
  if (var.index >= nodes_.size()) throw ShapeError("unknown graph node " + std::to_string(var.index));
  return nodes_[var.index];
}

Var Graph::push(Node n) {
  if (!n.name.empty()) {
    if (names_.contains(n.name)) throw ConfigError("duplicate graph node name '" + n.name + "'");
    names_.emplace(n.name, Var{static_cast<std::uint32_t>(nodes_.size())});
  }
  nodes_.push_back(std::move(n));
  evaluated_ = false;
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::input(std::string name, Shape shape, bool requires_grad) {
  numel(shape);
  Node n;
  n.kind = OpKind::Input;
  n.name = std::move(name);
  n.shape = std::move(shape);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

Var Graph::parameter(std::string name, Shape shape) {
  numel(shape);
  Node n;
  n.kind = OpKind::Parameter;
  n.name = std::move(name);
  n.shape = std::move(shape);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Graph::constant(Tensor value) {
  Node n;
  n.kind = OpKind::Constant;
  n.shape = value.shape();
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::apply(std::unique_ptr<Op> op, std::vector<Var> inputs) {
  std::vector<Shape> shapes;
  shapes.reserve(inputs.size());
  bool needs_grad = false;
  for (Var v : inputs) {
    const Node& p = node(v);
    shapes.push_back(p.shape);
    needs_grad = needs_grad || p.requires_grad;
  }
  Node n;
  n.kind = op->kind();
  n.shape = op->output_shape(shapes);
  n.parents = std::move(inputs);
  n.op = std::move(op);
  n.requires_grad = needs_grad;
  return push(std::move(n));
}

void Graph::mark_output(std::string name, Var var) {
  node(var);
  outputs_.emplace_back(std::move(name), var);
}

std::optional<Var> Graph::find(std::string_view name) const {
  auto it = names_.find(std::string(name));
  if (it == names_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> Graph::parameter_names() const {
  std::vector<std::string> out;
  for (const auto& n : nodes_) {
    if (n.kind == OpKind::Parameter) out.push_back(n.name);
  }
  return out;
}

TensorMap Graph::evaluate(const Bindings& bindings) {
  std::vector<const Tensor*> args;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    n.grad.reset();
    if (n.kind == OpKind::Input || n.kind == OpKind::Parameter) {
      auto it = bindings.find(n.name);
      if (it == bindings.end()) {
        evaluated_ = false;
        throw ConfigError("unbound graph input '" + n.name + "'");
      }
      if (it->second.shape() != n.shape) {
        evaluated_ = false;
        throw ShapeError("binding '" + n.name + "' has shape " + to_string(it->second.shape()) + ", expected " +
                         to_string(n.shape));
      }
      n.value = it->second;
    } else if (n.op) {
      args.clear();
      for (Var p : n.parents) args.push_back(&nodes_[p.index].value);
      n.value = n.op->forward(args);
    }
    if (!n.value.all_finite()) {
      evaluated_ = false;
      throw NumericalError("non-finite value at node " + std::to_string(i) + " (" +
                           std::string(op_name(n.kind)) + (n.name.empty() ? "" : " '" + n.name + "'") + ")");
    }
  }
  evaluated_ = true;
  TensorMap out;
  for (const auto& [name, var] : outputs_) out[name] = nodes_[var.index].value;
  return out;
}

const Tensor& Graph::value(Var var) const {
  if (!evaluated_) throw ConfigError("graph has not been evaluated");
  return node(var).value;
}

TensorMap Graph::backpropagate(Var loss, double seed) {
  if (!evaluated_) throw ConfigError("backpropagate called before evaluate");
  const Node& ln = node(loss);
  if (numel(ln.shape) != 1) throw ShapeError("loss must be scalar, got " + to_string(ln.shape));

  for (auto& n : nodes_) n.grad.reset();

  // Only nodes the loss depends on take part in the reverse pass.
  std::vector<char> live(nodes_.size(), 0);
  live[loss.index] = 1;
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    if (!live[i] || !nodes_[i].requires_grad) continue;
    for (Var p : nodes_[i].parents) live[p.index] = 1;
  }

  if (ln.requires_grad) nodes_[loss.index].grad = Tensor(ln.shape, seed);

  std::vector<const Tensor*> args;
  std::vector<Tensor*> grads;
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.op || !n.grad) continue;
    args.clear();
    grads.clear();
    bool any = false;
    for (Var p : n.parents) {
      Node& pn = nodes_[p.index];
      args.push_back(&pn.value);
      if (pn.requires_grad && live[p.index]) {
        if (!pn.grad) pn.grad = Tensor(pn.shape, 0.0);
        grads.push_back(&*pn.grad);
        any = true;
      } else {
        grads.push_back(nullptr);
      }
    }
    if (any) n.op->backward(args, n.value, *n.grad, grads);
    if (i != loss.index) n.grad.reset();
  }

  TensorMap out;
  for (auto& n : nodes_) {
    if ((n.kind == OpKind::Input || n.kind == OpKind::Parameter) && n.requires_grad) {
      if (!n.grad) n.grad = Tensor(n.shape, 0.0);
      out[n.name] = *n.grad;
    }
  }
  return out;
}

const Tensor* Graph::gradient(Var var) const {
  const Node& n = node(var);
  return n.grad ? &*n.grad : nullptr;
}

}  // namespace gvsl::ad
