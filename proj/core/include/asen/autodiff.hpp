#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "asen/tensor.hpp"

namespace asen {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // empty until the first backward pass touches it
  bool trainable = true;
  std::size_t index = 0;  // position inside the owning ParameterSet

  void zero_grad() { grad = Tensor::zeros_like(value); }
};

/// Ordered, name-unique collection of parameters with stable addresses.
class ParameterSet {
 public:
  Parameter& add(std::string name, Tensor value, bool trainable = true);

  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;

  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t scalar_count() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();

 private:
  std::deque<Parameter> params_;
};

class Tape;

/// Handle to a value recorded on a tape. Cheap to copy; invalid after the tape is cleared.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Real item() const { return value().item(); }
  Tape* tape() const noexcept { return tape_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id, std::uint64_t generation)
      : tape_(tape), id_(id), generation_(generation) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
  std::uint64_t generation_ = 0;
};

/// Receives the upstream gradient of an op's output and adds the contribution of each
/// parent into parent_grads[i]; entries are null for parents that need no gradient.
using BackwardFn =
    std::function<void(const Tensor& out_grad, std::span<Tensor* const> parent_grads)>;

/// Records executed operations in topological order for reverse-mode differentiation.
/// A tape is confined to one thread; independent tapes may run concurrently.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf that receives a gradient but is not bound to a Parameter.
  Var variable(Tensor value);
  // Repeated calls with the same parameter return the same leaf.
  Var parameter(const Parameter& param);

  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward,
             std::string_view op);

  const Tensor& value(Var v) const;
  // Gradient of the last backward pass w.r.t. v; zero-shaped if v was unreachable.
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const;

  void backward(Var loss);
  // Adds leaf gradients of the last backward pass into the matching Parameter::grad.
  void accumulate_parameter_grads(ParameterSet& params) const;
  std::vector<std::pair<const Parameter*, const Tensor*>> parameter_gradients() const;

  void clear();
  std::size_t size() const noexcept { return nodes_.size(); }

  // Fail fast on NaN/Inf after every recorded op (on by default).
  void set_check_finite(bool on) noexcept { check_finite_ = on; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::uint32_t> parents;
    BackwardFn backward;
    const Parameter* param = nullptr;
    bool requires_grad = false;
  };

  void validate(Var v) const;
  Var push(Node node);

  std::deque<Node> nodes_;  // deque: Var::value() references stay valid while recording
  std::vector<std::pair<const Parameter*, std::uint32_t>> param_leaves_;
  std::uint64_t generation_ = 1;
  bool check_finite_ = true;
};

/// Backpropagates from a scalar loss and accumulates into Parameter::grad of every
/// trainable member of `params` that appears on the tape.
void backward(Tape& tape, Var loss, ParameterSet& params);

}  // namespace asen
