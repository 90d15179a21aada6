#pragma once

// Elementwise and reduction ops. Reductions sum sequentially in row-major
// (n, c, h, w) order with a double accumulator; results are reproducible
// bit-for-bit on one platform.

#include <span>
#include <string>
#include <vector>

#include "erasenet/tensor.hpp"

namespace erasenet {

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), "add", {a, b}, [](auto& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto g = input_grad(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), "sub", {a, b}, [](auto& self) {
    auto ga = input_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    auto gb = input_grad(self, 1);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
  });
}

/// Elementwise (Hadamard) product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), "mul", {a, b}, [](auto& self) {
    auto xa = std::span<const T>(self.inputs[0]->value);
    auto xb = std::span<const T>(self.inputs[1]->value);
    auto ga = input_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * xb[i];
    auto gb = input_grad(self, 1);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * xa[i];
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), "scale", {a}, [s](auto& self) {
    auto g = input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + s;
  return Tensor<T>::make_result(a.shape(), std::move(out), "add_scalar", {a}, [](auto& self) {
    auto g = input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Sum of equally shaped tensors, added left to right.
template <class T>
Tensor<T> add_n(const std::vector<Tensor<T>>& terms) {
  if (terms.empty()) throw std::invalid_argument("add_n: no terms");
  if (terms.size() == 1) return terms.front();
  for (const auto& t : terms) require_same_shape(terms.front().shape(), t.shape(), "add_n");
  std::vector<T> out(terms.front().data().begin(), terms.front().data().end());
  for (std::size_t k = 1; k < terms.size(); ++k) {
    auto x = terms[k].data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x[i];
  }
  return Tensor<T>::make_result(terms.front().shape(), std::move(out), "add_n", terms, [](auto& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto g = input_grad(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  return Tensor<T>::make_result(Shape{}, {static_cast<T>(acc)}, "sum", {a}, [](auto& self) {
    auto g = input_grad(self, 0);
    const T seed = self.grad[0];
    for (auto& v : g) v += seed;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  const double count = static_cast<double>(a.size());
  return Tensor<T>::make_result(Shape{}, {static_cast<T>(acc / count)}, "mean", {a},
                                [count](auto& self) {
                                  auto g = input_grad(self, 0);
                                  const T d = static_cast<T>(self.grad[0] / count);
                                  for (auto& v : g) v += d;
                                });
}

/// Sums over the channel axis: (n, c, h, w) -> (n, 1, h, w).
template <class T>
Tensor<T> sum_channels(const Tensor<T>& a) {
  const Shape s = a.shape();
  const Shape os{s.n, 1, s.h, s.w};
  auto x = a.data();
  std::vector<T> out(os.size(), T(0));
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* src = x.data() + (n * s.c + c) * s.plane();
      T* dst = out.data() + n * s.plane();
      for (std::size_t i = 0; i < s.plane(); ++i) dst[i] += src[i];
    }
  return Tensor<T>::make_result(os, std::move(out), "sum_channels", {a}, [s](auto& self) {
    auto g = input_grad(self, 0);
    if (g.empty()) return;
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c) {
        T* dst = g.data() + (n * s.c + c) * s.plane();
        const T* src = self.grad.data() + n * s.plane();
        for (std::size_t i = 0; i < s.plane(); ++i) dst[i] += src[i];
      }
  });
}

}  // namespace erasenet
