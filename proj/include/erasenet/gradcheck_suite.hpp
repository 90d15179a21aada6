#pragma once

// The gradient-check battery: every differentiable op plus a miniature
// two-stage EraseNet, all in double precision.

#include <string>
#include <vector>

#include "erasenet/gradcheck.hpp"
#include "erasenet/model.hpp"
#include "erasenet/nn.hpp"
#include "erasenet/ops.hpp"

namespace erasenet {

struct SuiteResult {
  std::string name;
  GradReport report;

  std::size_t compared() const {
    std::size_t n = 0;
    for (const auto& in : report.inputs) n += in.compared;
    return n;
  }
  std::size_t excluded() const {
    std::size_t n = 0;
    for (const auto& in : report.inputs) n += in.excluded;
    return n;
  }
  // a case that compares nothing proves nothing
  bool pass() const { return report.pass && compared() > 0; }
};

namespace detail {

inline Tensor<double> seeded_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<double> v(s.size());
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(s, std::move(v));
}

// scale by 3 whose backward claims 6: used to prove the battery can fail
inline Tensor<double> faulty_scale(const Tensor<double>& x) {
  std::vector<double> v(x.data().begin(), x.data().end());
  for (auto& e : v) e *= 3.0;
  return Tensor<double>::make_result(x.shape(), std::move(v), "faulty_scale", {x}, [](auto& self) {
    auto g = input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 6.0 * self.grad[i];
  });
}

}  // namespace detail

/// For leaves whose true gradient is identically zero (a conv bias feeding
/// train-mode batch norm) the relative error only measures rounding noise.
/// Here both the analytic and the central-difference gradient must sit below
/// the division floor instead; max_rel_error holds the largest magnitude seen.
inline GradReport structural_zero_check(const std::function<Tensor<double>()>& fn, std::vector<Tensor<double>> leaves,
                                        const GradCheckOptions& opt, const std::vector<std::string>& names) {
  for (auto& t : leaves) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor<double> out = fn();
  Rng rng(opt.seed);
  std::vector<double> proj(out.size());
  for (auto& v : proj) v = rng.uniform(-1.0, 1.0);
  sum(mul(out, Tensor<double>(out.shape(), proj))).backward();
  out = Tensor<double>();

  GradReport report;
  NoGradGuard guard;
  auto evaluate = [&] {
    const auto y = fn();
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += y.data()[i] * proj[i];
    return acc;
  };
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    InputGradReport ir;
    ir.name = k < names.size() ? names[k] : "leaf" + std::to_string(k);
    auto values = leaves[k].mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double a = leaves[k].has_grad() ? leaves[k].grad()[j] : 0.0;
      const double orig = values[j];
      values[j] = orig + opt.step;
      const double fp = evaluate();
      values[j] = orig - opt.step;
      const double fm = evaluate();
      values[j] = orig;
      const double n = (fp - fm) / (2.0 * opt.step);
      ir.max_rel_error = std::max({ir.max_rel_error, std::abs(a), std::abs(n)});
      ++ir.compared;
    }
    report.max_rel_error = std::max(report.max_rel_error, ir.max_rel_error);
    report.inputs.push_back(std::move(ir));
  }
  for (auto& t : leaves) t.zero_grad();
  report.pass = report.max_rel_error <= opt.eps_div;
  return report;
}

/// Two encoder stages, a bottleneck and two decoder stages at toy widths.
inline ArchitectureSpec mini_erasenet_architecture() {
  ArchitectureSpec a;
  a.encoder = {{2, 2, 3}, {2, 3, 3}};
  a.bottleneck = {2, 4, 3};
  a.decoder = {{3, {2, 3, 3}}, {2, {2, 2, 3}}};
  return a;
}

/// Runs the battery. With `inject_fault` an op with a deliberately wrong
/// backward is appended, so the battery must report a failure.
inline std::vector<SuiteResult> run_gradcheck_suite(bool inject_fault = false, const GradCheckOptions& opt = {}) {
  using detail::seeded_tensor;
  using V = std::vector<Tensor<double>>;
  std::vector<SuiteResult> out;
  auto run = [&](std::string name, const GradCheckFn& fn, const V& inputs) {
    out.push_back({std::move(name), finite_difference_check(fn, inputs, opt)});
  };
  const Shape s{2, 3, 4, 4};

  run("add", [](const V& in) { return add(in[0], in[1]); }, {seeded_tensor(s, 1), seeded_tensor(s, 2)});
  run("sub", [](const V& in) { return sub(in[0], in[1]); }, {seeded_tensor(s, 3), seeded_tensor(s, 4)});
  run("mul", [](const V& in) { return mul(in[0], in[1]); }, {seeded_tensor(s, 5), seeded_tensor(s, 6)});
  run("scale", [](const V& in) { return scale(in[0], -1.7); }, {seeded_tensor(s, 7)});
  run("add_scalar", [](const V& in) { return add_scalar(in[0], 0.3); }, {seeded_tensor(s, 8)});
  run("add_n", [](const V& in) { return add_n(V{in[0], in[1], in[0]}); }, {seeded_tensor(s, 9), seeded_tensor(s, 10)});
  run("sum", [](const V& in) { return sum(in[0]); }, {seeded_tensor(s, 11)});
  run("mean", [](const V& in) { return mean(in[0]); }, {seeded_tensor(s, 12)});
  run("sum_channels", [](const V& in) { return sum_channels(in[0]); }, {seeded_tensor(s, 13)});

  for (std::size_t k : {1, 3, 5}) {
    run("conv2d k" + std::to_string(k),
        [](const V& in) { return conv2d(in[0], ConvWeights<double>{in[1], in[2]}); },
        {seeded_tensor({2, 3, 6, 6}, 20 + k), seeded_tensor({4, 3, k, k}, 30 + k), seeded_tensor({1, 4, 1, 1}, 40 + k)});
  }
  run("conv2d stride2", [](const V& in) { return conv2d(in[0], ConvWeights<double>{in[1], in[2]}, {Padding::Same, 2}); },
      {seeded_tensor({1, 2, 8, 8}, 50), seeded_tensor({3, 2, 3, 3}, 51), seeded_tensor({1, 3, 1, 1}, 52)});
  run("conv_transpose2d", [](const V& in) { return conv_transpose2d(in[0], ConvWeights<double>{in[1], in[2]}); },
      {seeded_tensor({2, 3, 4, 4}, 53), seeded_tensor({3, 2, 3, 3}, 54), seeded_tensor({1, 2, 1, 1}, 55)});
  for (Mode mode : {Mode::Train, Mode::Infer}) {
    run(mode == Mode::Train ? "batchnorm2d train" : "batchnorm2d infer",
        [mode](const V& in) {
          auto st = BatchNormState<double>::make(3);
          st.gamma = in[1];
          st.beta = in[2];
          st.running_mean = {0.1, -0.2, 0.3};
          st.running_var = {0.5, 1.5, 2.0};
          st.updates = 1;
          return batchnorm2d(in[0], st, mode);
        },
        {seeded_tensor(s, 60, -2, 2), seeded_tensor({1, 3, 1, 1}, 61, 0.5, 1.5), seeded_tensor({1, 3, 1, 1}, 62)});
  }
  run("leaky_relu", [](const V& in) { return leaky_relu(in[0], 0.2); }, {seeded_tensor(s, 70)});
  run("relu", [](const V& in) { return relu(in[0]); }, {seeded_tensor(s, 71)});
  run("sigmoid", [](const V& in) { return sigmoid(in[0]); }, {seeded_tensor(s, 72, -4, 4)});
  run("maxpool2d", [](const V& in) { return maxpool2d(in[0]); }, {seeded_tensor(s, 73)});
  run("dropout",
      [](const V& in) {
        Rng rng(99);
        return dropout(in[0], 0.3, Mode::Train, rng);
      },
      {seeded_tensor(s, 74)});
  run("concat_channels", [](const V& in) { return concat_channels(in[0], in[1]); },
      {seeded_tensor({2, 2, 3, 3}, 75), seeded_tensor({2, 3, 3, 3}, 76)});
  run("mse_loss", [](const V& in) { return mse_loss(in[0], in[1]); },
      {seeded_tensor({1, 1, 4, 4}, 77), seeded_tensor({1, 1, 4, 4}, 78)});

  {
    // infer mode: train-mode batch norm over a few pixels per channel is
    // curved enough that the 1e-3 step's truncation error alone exceeds 1e-4
    ModelGraph<double> net(Variant::EraseNet4, mini_erasenet_architecture(), 1.0, 5);
    Tensor<double> x = seeded_tensor({2, 1, 8, 8}, 80, 0.0, 1.0);
    {
      // one train pass so the running statistics are not the initial ones
      NoGradGuard guard;
      Rng rng(81);
      net.forward(x, Mode::Train, &rng);
    }
    std::vector<Tensor<double>> leaves{x};
    std::vector<std::string> names{"x"};
    for (const auto& [name, p] : net.parameters()) {
      leaves.push_back(p);
      names.push_back(name);
    }
    auto fn = [&] { return net.forward(x, Mode::Infer); };
    out.push_back({"mini erasenet (2-stage)", finite_difference_check_leaves(fn, leaves, opt, names)});
  }

  if (inject_fault) {
    run("faulty_scale (injected)", [](const V& in) { return detail::faulty_scale(in[0]); }, {seeded_tensor(s, 90)});
  }
  return out;
}

}  // namespace erasenet
