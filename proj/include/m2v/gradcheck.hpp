#pragma once

#include "m2v/autodiff.hpp"
#include "m2v/params.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace m2v {

/// Builds the loss on `tape` from the current parameter values.
using LossBuilder = std::function<Var(Tape& tape, ParamStore& params)>;

struct GradCheckOptions {
  std::size_t probes = 32;  // 0 checks every scalar
  double step = 1e-5;
  double rel_tol = 1e-4;
  double abs_floor = 1e-8;
  std::uint64_t seed = 0;
};

struct GradProbe {
  std::string param;
  Eigen::Index row = 0;
  Eigen::Index col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradProbe> probes;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  /// max over parameter tensors of ‖a − n‖₂ / max(‖a‖₂, ‖n‖₂) across that tensor's probes.
  double max_tensor_rel_err = 0.0;
  bool passed = true;
};

/// Compares backward() against central differences at randomly chosen scalars.
/// A probe passes when |a - n| <= abs_floor or |a - n| / max(|a|, |n|) <= rel_tol.
/// `max_rel_err` is taken over probes whose gradient magnitude exceeds abs_floor.
GradCheckReport grad_check(const LossBuilder& loss, ParamStore& params,
                           const GradCheckOptions& opts);

}  // namespace m2v
