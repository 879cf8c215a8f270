#include "m2v/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace m2v {

GradCheckReport grad_check(const LossBuilder& loss, ParamStore& params,
                           const GradCheckOptions& opts) {
  params.zero_grad();
  {
    Tape tape;
    Var l = loss(tape, params);
    tape.backward(l);
  }

  const std::size_t total = params.scalar_count();
  if (total == 0) return {};

  auto evaluate = [&]() {
    Tape tape;
    return loss(tape, params).scalar();
  };

  Rng rng(derive_seed(opts.seed, 0x9c4e));
  GradCheckReport report;
  const std::size_t count = opts.probes == 0 ? total : opts.probes;
  for (std::size_t k = 0; k < count; ++k) {
    // Pick a flat scalar index, then map it back to (parameter, row, col).
    std::size_t flat = opts.probes == 0 ? k : static_cast<std::size_t>(rng.below(total));
    const std::string* name = nullptr;
    for (const auto& n : params.names()) {
      const auto sz = static_cast<std::size_t>(params.value(n).size());
      if (flat < sz) {
        name = &n;
        break;
      }
      flat -= sz;
    }
    Matrix& value = params.value(*name);
    const Eigen::Index row = static_cast<Eigen::Index>(flat) / value.cols();
    const Eigen::Index col = static_cast<Eigen::Index>(flat) % value.cols();

    const double saved = value(row, col);
    value(row, col) = saved + opts.step;
    const double up = evaluate();
    value(row, col) = saved - opts.step;
    const double down = evaluate();
    value(row, col) = saved;

    GradProbe p;
    p.param = *name;
    p.row = row;
    p.col = col;
    p.analytic = params.grad(*name)(row, col);
    p.numeric = (up - down) / (2.0 * opts.step);
    const double abs_err = std::abs(p.analytic - p.numeric);
    const double scale = std::max(std::abs(p.analytic), std::abs(p.numeric));
    p.rel_err = scale > 0.0 ? abs_err / scale : 0.0;
    p.passed = abs_err <= opts.abs_floor || p.rel_err <= opts.rel_tol;
    report.max_abs_err = std::max(report.max_abs_err, abs_err);
    if (scale > opts.abs_floor) report.max_rel_err = std::max(report.max_rel_err, p.rel_err);
    report.passed = report.passed && p.passed;
    report.probes.push_back(p);
  }
  for (const auto& name : params.names()) {
    double diff = 0.0, an = 0.0, nu = 0.0;
    for (const GradProbe& p : report.probes) {
      if (p.param != name) continue;
      diff += (p.analytic - p.numeric) * (p.analytic - p.numeric);
      an += p.analytic * p.analytic;
      nu += p.numeric * p.numeric;
    }
    const double scale = std::sqrt(std::max(an, nu));
    if (scale > 0.0) report.max_tensor_rel_err = std::max(report.max_tensor_rel_err, std::sqrt(diff) / scale);
  }
  params.zero_grad();
  return report;
}

}  // namespace m2v
