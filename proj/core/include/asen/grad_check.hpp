#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "asen/autodiff.hpp"

namespace asen {

/// Builds a scalar loss on the given tape, reading parameters through Tape::parameter.
using LossFn = std::function<Var(Tape&)>;

struct GradCheckFailure {
  std::string param;
  std::size_t coordinate = 0;
  Real analytic = 0;
  Real numeric = 0;
  Real rel_error = 0;
};

struct ParamGradStats {
  std::string name;
  Real max_rel_error = 0;
  std::size_t worst_coordinate = 0;
};

struct GradCheckReport {
  std::vector<ParamGradStats> params;
  std::vector<GradCheckFailure> failures;
  Real max_rel_error = 0;
  std::size_t coordinates = 0;

  bool passed() const noexcept { return failures.empty(); }
};

inline constexpr Real kFiniteDifferenceStep = 1e-5;

/// |a - b| / max(1e-8, |a| + |b|)
Real relative_error(Real a, Real b);

/// Reverse-mode gradients of the loss, one tensor per parameter.
std::vector<Tensor> analytic_gradients(const LossFn& loss, std::span<Parameter* const> params);

/// Compares supplied gradients against central finite differences.
GradCheckReport compare_gradients(const LossFn& loss, std::span<Parameter* const> params,
                                  const std::vector<Tensor>& analytic, Real tolerance,
                                  Real step = kFiniteDifferenceStep);

GradCheckReport grad_check(const LossFn& loss, std::span<Parameter* const> params,
                           Real tolerance, Real step = kFiniteDifferenceStep);

}  // namespace asen
