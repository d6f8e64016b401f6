#include "asen/autodiff.hpp"

#include <algorithm>

#include "asen/error.hpp"

namespace asen {

Parameter& ParameterSet::add(std::string name, Tensor value, bool trainable) {
  if (find(name) != nullptr) throw ContractError("duplicate parameter name '" + name + "'");
  Parameter& p = params_.emplace_back();
  p.name = std::move(name);
  p.value = std::move(value);
  p.trainable = trainable;
  p.index = params_.size() - 1;
  return p;
}

Parameter* ParameterSet::find(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

const Parameter* ParameterSet::find(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

Parameter& ParameterSet::at(std::string_view name) {
  if (auto* p = find(name)) return *p;
  throw ContractError("unknown parameter '" + std::string(name) + "'");
}

const Parameter& ParameterSet::at(std::string_view name) const {
  if (const auto* p = find(name)) return *p;
  throw ContractError("unknown parameter '" + std::string(name) + "'");
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw ContractError("value() on an unbound Var");
  return tape_->value(*this);
}

void Tape::validate(Var v) const {
  if (v.tape_ != this || v.generation_ != generation_ || v.id_ >= nodes_.size()) {
    throw ContractError("detached tensor: Var does not belong to the active tape");
  }
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1), generation_);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::variable(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::parameter(const Parameter& param) {
  for (const auto& [p, id] : param_leaves_) {
    if (p == &param) return Var(this, id, generation_);
  }
  Node n;
  n.value = param.value;
  n.param = &param;
  n.requires_grad = param.trainable;
  Var v = push(std::move(n));
  param_leaves_.emplace_back(&param, v.id_);
  return v;
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward,
                 std::string_view op) {
  if (check_finite_ && !value.all_finite()) {
    throw NumericalError("non-finite value produced by " + std::string(op));
  }
  Node n;
  n.value = std::move(value);
  n.parents.reserve(parents.size());
  for (Var p : parents) {
    validate(p);
    n.parents.push_back(p.id_);
    n.requires_grad = n.requires_grad || nodes_[p.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

const Tensor& Tape::value(Var v) const {
  validate(v);
  return nodes_[v.id_].value;
}

const Tensor& Tape::grad(Var v) const {
  validate(v);
  return nodes_[v.id_].grad;
}

bool Tape::requires_grad(Var v) const {
  validate(v);
  return nodes_[v.id_].requires_grad;
}

void Tape::backward(Var loss) {
  validate(loss);
  if (nodes_[loss.id_].value.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_string(nodes_[loss.id_].value.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  Node& root = nodes_[loss.id_];
  root.grad = Tensor(root.value.shape(), 1.0);

  std::vector<Tensor*> parent_grads;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    parent_grads.clear();
    for (std::uint32_t pid : n.parents) {
      Node& p = nodes_[pid];
      if (!p.requires_grad) {
        parent_grads.push_back(nullptr);
        continue;
      }
      if (p.grad.empty()) p.grad = Tensor::zeros_like(p.value);
      parent_grads.push_back(&p.grad);
    }
    n.backward(n.grad, parent_grads);
  }
  for (const auto& [p, id] : param_leaves_) {
    Node& leaf = nodes_[id];
    if (leaf.requires_grad && leaf.grad.empty()) leaf.grad = Tensor::zeros_like(leaf.value);
  }
}

std::vector<std::pair<const Parameter*, const Tensor*>> Tape::parameter_gradients() const {
  std::vector<std::pair<const Parameter*, const Tensor*>> out;
  for (const auto& [p, id] : param_leaves_) {
    const Node& n = nodes_[id];
    if (n.requires_grad && !n.grad.empty()) out.emplace_back(n.param, &n.grad);
  }
  return out;
}

void Tape::accumulate_parameter_grads(ParameterSet& params) const {
  for (auto [param, g] : parameter_gradients()) {
    if (param->index >= params.size() || &params[param->index] != param) {
      throw ContractError("parameter '" + param->name + "' is not a member of the given set");
    }
    Parameter& target = params[param->index];
    if (target.grad.shape() != target.value.shape()) target.zero_grad();
    target.grad.add_(*g);
  }
}

void Tape::clear() {
  nodes_.clear();
  param_leaves_.clear();
  ++generation_;
}

void backward(Tape& tape, Var loss, ParameterSet& params) {
  tape.backward(loss);
  tape.accumulate_parameter_grads(params);
}

}  // namespace asen
