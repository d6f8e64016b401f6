#include "asen/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "asen/error.hpp"

namespace asen {

Real relative_error(Real a, Real b) {
  return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
}

namespace {

Real evaluate(const LossFn& loss) {
  Tape tape;
  return loss(tape).item();
}

}  // namespace

std::vector<Tensor> analytic_gradients(const LossFn& loss, std::span<Parameter* const> params) {
  Tape tape;
  Var out = loss(tape);
  tape.backward(out);
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (Parameter* p : params) grads.push_back(Tensor::zeros_like(p->value));
  for (auto [param, g] : tape.parameter_gradients()) {
    auto it = std::find(params.begin(), params.end(), param);
    if (it != params.end()) grads[static_cast<std::size_t>(it - params.begin())] = *g;
  }
  return grads;
}

GradCheckReport compare_gradients(const LossFn& loss, std::span<Parameter* const> params,
                                  const std::vector<Tensor>& analytic, Real tolerance,
                                  Real step) {
  if (analytic.size() != params.size()) {
    throw ContractError("compare_gradients: one analytic gradient per parameter required");
  }
  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    if (analytic[pi].shape() != p.value.shape()) {
      throw DimensionError("gradient of '" + p.name + "' has shape " +
                           shape_string(analytic[pi].shape()) + ", parameter has " +
                           shape_string(p.value.shape()));
    }
    ParamGradStats stats{p.name, 0.0, 0};
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const Real original = p.value[i];
      p.value[i] = original + step;
      const Real up = evaluate(loss);
      p.value[i] = original - step;
      const Real down = evaluate(loss);
      p.value[i] = original;

      const Real numeric = (up - down) / (2 * step);
      const Real err = relative_error(analytic[pi][i], numeric);
      ++report.coordinates;
      if (err > stats.max_rel_error) {
        stats.max_rel_error = err;
        stats.worst_coordinate = i;
      }
      if (err > tolerance) report.failures.push_back({p.name, i, analytic[pi][i], numeric, err});
    }
    report.max_rel_error = std::max(report.max_rel_error, stats.max_rel_error);
    report.params.push_back(std::move(stats));
  }
  return report;
}

GradCheckReport grad_check(const LossFn& loss, std::span<Parameter* const> params,
                           Real tolerance, Real step) {
  return compare_gradients(loss, params, analytic_gradients(loss, params), tolerance, step);
}

}  // namespace asen
