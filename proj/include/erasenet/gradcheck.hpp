#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "erasenet/ops.hpp"
#include "erasenet/rng.hpp"
#include "erasenet/tensor.hpp"

namespace erasenet {

struct InputGradReport {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t compared = 0;
  std::size_t excluded = 0;
};

/// Analytic-vs-numeric gradient comparison for one op.
struct GradReport {
  std::vector<InputGradReport> inputs;
  double max_rel_error = 0.0;
  bool pass = true;
};

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-4;
  double eps_div = 1e-8;
  std::uint64_t seed = 1234;
  // Elements within one step of a kink are skipped. Kinks are detected from
  // the branch decisions relu, leaky_relu and maxpool2d record; an op with a
  // kink that records nothing would show up as a failure, not a skip.
  /// Additional caller-side exclusion: (input index, element index) -> skip.
  std::function<bool(std::size_t, std::size_t)> exclude;
};

inline double relative_error(double analytic, double numeric, double eps_div = 1e-8) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), eps_div});
}

using GradCheckFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Core probe over existing leaf tensors that `fn` reads directly (for
/// example the parameters of a model). Leaves are perturbed in place and
/// restored. `fn` must be deterministic across calls (stochastic ops reseed
/// internally).
inline GradReport finite_difference_check_leaves(const std::function<Tensor<double>()>& fn,
                                                 std::vector<Tensor<double>> leaves,
                                                 const GradCheckOptions& opt = {},
                                                 const std::vector<std::string>& names = {}) {
  for (auto& t : leaves) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor<double> out = fn();
  Rng rng(opt.seed);
  std::vector<double> proj(out.size());
  for (auto& v : proj) v = rng.uniform(-1.0, 1.0);
  const Tensor<double> weights(out.shape(), proj);
  sum(mul(out, weights)).backward();
  out = Tensor<double>();

  std::vector<std::vector<double>> analytic;
  for (const auto& t : leaves) {
    analytic.emplace_back(t.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.back().begin());
  }

  NoGradGuard guard;
  auto& monitor = detail::kink_monitor();
  struct MonitorScope {
    detail::KinkMonitor& m;
    explicit MonitorScope(detail::KinkMonitor& mon) : m(mon) { m.active = true; }
    ~MonitorScope() { m.active = false; }
  } scope(monitor);
  std::uint64_t signature = 0;
  auto evaluate = [&] {
    monitor.reset();
    const Tensor<double> y = fn();
    signature = monitor.signature;
    auto yd = y.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < yd.size(); ++i) acc += yd[i] * proj[i];
    return acc;
  };
  evaluate();
  const std::uint64_t sig0 = signature;

  GradReport report;
  const double h = opt.step;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    InputGradReport ir;
    ir.name = k < names.size() ? names[k] : "input" + std::to_string(k);
    auto values = leaves[k].mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      if (opt.exclude && opt.exclude(k, j)) {
        ++ir.excluded;
        continue;
      }
      const double orig = values[j];
      values[j] = orig + h;
      const double fp = evaluate();
      const bool flip_up = signature != sig0;
      values[j] = orig - h;
      const double fm = evaluate();
      const bool flip_down = signature != sig0;
      values[j] = orig;
      if (flip_up || flip_down) {
        // a branch decision changes within one step: kink adjacent
        ++ir.excluded;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      ir.max_rel_error = std::max(ir.max_rel_error, relative_error(analytic[k][j], numeric, opt.eps_div));
      ++ir.compared;
    }
    report.max_rel_error = std::max(report.max_rel_error, ir.max_rel_error);
    report.inputs.push_back(ir);
  }
  for (auto& t : leaves) t.zero_grad();
  report.pass = report.max_rel_error <= opt.tolerance;
  return report;
}

/// Probes every input element with central differences of a fixed random
/// projection <op(inputs), R> and compares against the analytic gradient
/// of the same projection.
inline GradReport finite_difference_check(const GradCheckFn& op, const std::vector<Tensor<double>>& inputs,
                                          const GradCheckOptions& opt = {},
                                          const std::vector<std::string>& names = {}) {
  std::vector<Tensor<double>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(t.detach(true));
  return finite_difference_check_leaves([&] { return op(leaves); }, leaves, opt, names);
}

}  // namespace erasenet
