#pragma once

// Adam with bias correction and the reduce-on-plateau learning-rate rule.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "erasenet/tensor.hpp"

namespace erasenet {

/// A non-finite loss or gradient; training stops without applying the step.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  std::uint64_t t = 0;
  std::vector<std::vector<T>> m;  // aligned with the parameter list
  std::vector<std::vector<T>> v;

  void init(const NamedParams<T>& params) {
    m.clear();
    v.clear();
    for (const auto& [name, p] : params) {
      m.emplace_back(p.size(), T(0));
      v.emplace_back(p.size(), T(0));
    }
    t = 0;
  }
};

/// One Adam update over every parameter. A parameter without a populated
/// gradient is treated as having a zero gradient. Any non-finite gradient
/// aborts before anything is modified.
template <class T>
void adam_step(NamedParams<T>& params, AdamState<T>& s) {
  if (s.m.size() != params.size()) s.init(params);
  for (const auto& [name, p] : params) {
    if (p.has_grad() && !all_finite(p.grad())) throw NumericalError("adam_step: non-finite gradient in " + name);
  }
  if (!(s.lr > 0.0)) throw std::invalid_argument("adam_step: learning rate must be positive");
  ++s.t;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].second;
    auto& m = s.m[k];
    auto& v = s.v[k];
    if (m.size() != p.size()) throw ShapeError("adam_step: moment size mismatch for " + params[k].first);
    const bool has = p.has_grad();
    auto g = has ? p.grad() : std::span<const T>{};
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has ? static_cast<double>(g[i]) : 0.0;
      const double mi = s.beta1 * m[i] + (1.0 - s.beta1) * gi;
      const double vi = s.beta2 * v[i] + (1.0 - s.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = s.lr * (mi / c1) / (std::sqrt(vi / c2) + s.epsilon);
      w[i] = static_cast<T>(w[i] - update);
    }
  }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without relative improvement of the validation loss.
struct PlateauState {
  double best = std::numeric_limits<double>::infinity();
  std::size_t counter = 0;
  std::size_t patience = 10;
  double factor = 0.1;
  double min_lr = 1e-7;
  double threshold = 1e-4;  // relative

  bool improves(double loss) const { return loss < best * (1.0 - threshold); }
};

/// Feeds one epoch's validation loss; returns the (possibly reduced) lr.
inline double plateau_update(PlateauState& p, double val_loss, double lr) {
  if (!std::isfinite(val_loss)) throw NumericalError("plateau_update: non-finite validation loss");
  if (std::isinf(p.best) || p.improves(val_loss)) {
    p.best = val_loss;
    p.counter = 0;
    return lr;
  }
  if (++p.counter >= p.patience) {
    p.counter = 0;
    return std::max(lr * p.factor, p.min_lr);
  }
  return lr;
}

}  // namespace erasenet
