#pragma once

// Layer vocabulary: convolution, transposed convolution, batch norm,
// activations, pooling, dropout, channel concatenation and MSE loss.
// Convolutions are cross-correlations lowered to GEMM through im2col.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "erasenet/gemm.hpp"
#include "erasenet/log.hpp"
#include "erasenet/rng.hpp"
#include "erasenet/tensor.hpp"

namespace erasenet {

enum class Mode { Train, Infer };

enum class Padding { Same, Valid };

namespace detail {

struct ConvGeometry {
  std::size_t channels, height, width;  // image being unfolded
  std::size_t kernel, stride, pad;
  std::size_t out_h, out_w;

  std::size_t rows() const { return channels * kernel * kernel; }
  std::size_t cols() const { return out_h * out_w; }
};

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) throw ShapeError("convolution: kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

// Unfolds output rows [r0, r1) of the convolution:
// col[(c*k + i)*k + j][(oh - r0)*out_w + ow] = img[c][oh*s - pad + i][ow*s - pad + j]
template <class T>
void im2col(const T* img, const ConvGeometry& g, std::size_t r0, std::size_t r1, T* col) {
  const auto k = g.kernel;
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  const std::size_t band = (r1 - r0) * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        T* dst = col + ((c * k + i) * k + j) * band;
        const T* plane = img + c * g.height * g.width;
        const auto shift = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(g.pad);
        for (std::size_t oh = r0; oh < r1; ++oh) {
          const auto r = static_cast<std::ptrdiff_t>(oh * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          T* row = dst + (oh - r0) * g.out_w;
          if (r < 0 || r >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(row, row + g.out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(r) * g.width;
          if (g.stride == 1) {
            // in-range outputs: 0 <= ow + shift < width
            const auto lo = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(-shift, 0, g.out_w));
            const auto hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(W - shift, lo, g.out_w));
            std::fill(row, row + lo, T(0));
            std::copy(src + lo + shift, src + hi + shift, row + lo);
            std::fill(row + hi, row + g.out_w, T(0));
          } else {
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const auto q = static_cast<std::ptrdiff_t>(ow * g.stride) + shift;
              row[ow] = (q >= 0 && q < W) ? src[q] : T(0);
            }
          }
        }
      }
}

// Adjoint of im2col over the same band: scatters-and-adds into the image.
template <class T>
void col2im(const T* col, const ConvGeometry& g, std::size_t r0, std::size_t r1, T* img) {
  const auto k = g.kernel;
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  const std::size_t band = (r1 - r0) * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const T* srccol = col + ((c * k + i) * k + j) * band;
        T* plane = img + c * g.height * g.width;
        const auto shift = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(g.pad);
        for (std::size_t oh = r0; oh < r1; ++oh) {
          const auto r = static_cast<std::ptrdiff_t>(oh * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          if (r < 0 || r >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dst = plane + static_cast<std::size_t>(r) * g.width;
          const T* row = srccol + (oh - r0) * g.out_w;
          if (g.stride == 1) {
            const auto lo = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(-shift, 0, g.out_w));
            const auto hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(W - shift, lo, g.out_w));
            T* d = dst + shift;
            for (std::size_t ow = lo; ow < hi; ++ow) d[ow] += row[ow];
          } else {
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const auto q = static_cast<std::ptrdiff_t>(ow * g.stride) + shift;
              if (q >= 0 && q < W) dst[q] += row[ow];
            }
          }
        }
      }
}

// Whole-image forms.
template <class T>
void im2col(const T* img, const ConvGeometry& g, T* col) { im2col(img, g, 0, g.out_h, col); }
template <class T>
void col2im(const T* col, const ConvGeometry& g, T* img) { col2im(col, g, 0, g.out_h, img); }

// Output rows per band, sized so one unfolded band stays cache resident.
inline std::size_t band_rows(const ConvGeometry& g) {
  constexpr std::size_t target = std::size_t{1} << 17;
  return std::clamp<std::size_t>(target / std::max<std::size_t>(1, g.rows() * g.out_w), 1, g.out_h);
}

// Per-thread scratch; slot separates buffers that are live together.
template <class T>
T* scratch(int slot, std::size_t n) {
  thread_local std::vector<T> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

template <class T>
void add_bias_grad(std::span<T> gb, const std::vector<T>& gy, const Shape& s) {
  if (gb.empty()) return;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = gy.data() + (n * s.c + c) * s.plane();
      double acc = 0.0;
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
      gb[c] += static_cast<T>(acc);
    }
}

}  // namespace detail

/// Kernel and bias of one convolution. For conv2d the kernel is
/// (out_channels, in_channels, k, k); for conv_transpose2d it is
/// (in_channels, out_channels, k, k), i.e. the kernel of the convolution
/// whose adjoint is taken. Bias is (1, out_channels, 1, 1).
template <class T>
struct ConvWeights {
  Tensor<T> kernel;
  Tensor<T> bias;
};

struct Conv2dOptions {
  Padding padding = Padding::Same;
  std::size_t stride = 1;
};

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvWeights<T>& w, Conv2dOptions opt = {}) {
  const Shape xs = x.shape();
  const Shape ks = w.kernel.shape();
  if (ks.c != xs.c) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(ks.c) + " input channels, input " +
                     xs.str() + " has " + std::to_string(xs.c));
  }
  if (ks.h != ks.w) throw ShapeError("conv2d: kernel must be square, got " + ks.str());
  if (w.bias.shape() != Shape{1, ks.n, 1, 1}) {
    throw ShapeError("conv2d: bias shape " + w.bias.shape().str() + " does not match kernel " + ks.str());
  }
  if (opt.stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const std::size_t k = ks.h;
  const std::size_t pad = opt.padding == Padding::Same ? k / 2 : 0;
  const detail::ConvGeometry g{xs.c, xs.h, xs.w, k, opt.stride, pad,
                               detail::conv_out(xs.h, k, opt.stride, pad),
                               detail::conv_out(xs.w, k, opt.stride, pad)};
  const Shape os{xs.n, ks.n, g.out_h, g.out_w};
  const bool pointwise = k == 1 && opt.stride == 1;

  std::vector<T> out(os.size());
  const std::size_t step = detail::band_rows(g);
  T* col = pointwise ? nullptr : detail::scratch<T>(0, g.rows() * step * g.out_w);
  auto xd = x.data();
  auto kd = w.kernel.data();
  auto bd = w.bias.data();
  for (std::size_t n = 0; n < xs.n; ++n) {
    const T* src = xd.data() + n * xs.sample();
    T* dst = out.data() + n * os.sample();
    for (std::size_t o = 0; o < os.c; ++o) std::fill(dst + o * os.plane(), dst + (o + 1) * os.plane(), bd[o]);
    if (pointwise) {
      blas::gemm<T>(false, false, os.c, g.cols(), g.rows(), T(1), kd.data(), src, T(1), dst);
      continue;
    }
    for (std::size_t r0 = 0; r0 < g.out_h; r0 += step) {
      const std::size_t r1 = std::min(g.out_h, r0 + step), cols = (r1 - r0) * g.out_w;
      detail::im2col(src, g, r0, r1, col);
      blas::gemm<T>(false, false, os.c, cols, g.rows(), T(1), kd.data(), col, T(1), dst + r0 * g.out_w,
                    {0, 0, os.plane()});
    }
  }

  return Tensor<T>::make_result(os, std::move(out), "conv2d", {x, w.kernel, w.bias},
                                [g, xs, os, pointwise](auto& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& kv = self.inputs[1]->value;
    auto gx = input_grad(self, 0);
    auto gk = input_grad(self, 1);
    auto gb = input_grad(self, 2);
    const std::size_t step = detail::band_rows(g);
    T* col = pointwise ? nullptr : detail::scratch<T>(0, g.rows() * step * g.out_w);
    T* dcol = pointwise ? nullptr : detail::scratch<T>(1, g.rows() * step * g.out_w);
    for (std::size_t n = 0; n < xs.n; ++n) {
      const T* gy = self.grad.data() + n * os.sample();
      const T* src = xv.data() + n * xs.sample();
      if (pointwise) {
        if (!gk.empty()) blas::gemm<T>(false, true, os.c, g.rows(), g.cols(), T(1), gy, src, T(1), gk.data());
        if (!gx.empty()) {
          blas::gemm<T>(true, false, g.rows(), g.cols(), os.c, T(1), kv.data(), gy, T(1),
                        gx.data() + n * xs.sample());
        }
        continue;
      }
      for (std::size_t r0 = 0; r0 < g.out_h; r0 += step) {
        const std::size_t r1 = std::min(g.out_h, r0 + step), cols = (r1 - r0) * g.out_w;
        const T* gyb = gy + r0 * g.out_w;
        if (!gk.empty()) {
          detail::im2col(src, g, r0, r1, col);
          blas::gemm<T>(false, true, os.c, g.rows(), cols, T(1), gyb, col, T(1), gk.data(), {os.plane(), 0, 0});
        }
        if (!gx.empty()) {
          blas::gemm<T>(true, false, g.rows(), cols, os.c, T(1), kv.data(), gyb, T(0), dcol, {0, os.plane(), 0});
          detail::col2im(dcol, g, r0, r1, gx.data() + n * xs.sample());
        }
      }
    }
    detail::add_bias_grad(gb, self.grad, os);
  });
}

/// Transposed convolution with stride 2, kernel 3, input padding 1 and output
/// offset 1: doubles rows and cols. Exactly the adjoint (bias aside) of a
/// stride-2 conv2d with Padding::Same on a (2h, 2w) image.
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const ConvWeights<T>& w, std::size_t stride = 2) {
  const Shape xs = x.shape();
  const Shape ks = w.kernel.shape();
  if (ks.n != xs.c) {
    throw ShapeError("conv_transpose2d: kernel expects " + std::to_string(ks.n) + " input channels, input " +
                     xs.str() + " has " + std::to_string(xs.c));
  }
  if (stride != 2 || ks.h != 3 || ks.w != 3) {
    throw std::invalid_argument("conv_transpose2d: only stride 2 with a 3x3 kernel is supported");
  }
  if (w.bias.shape() != Shape{1, ks.c, 1, 1}) {
    throw ShapeError("conv_transpose2d: bias shape " + w.bias.shape().str() + " does not match kernel " + ks.str());
  }
  const std::size_t k = 3, pad = 1;
  const Shape os{xs.n, ks.c, 2 * xs.h, 2 * xs.w};
  // geometry of the forward convolution this op is the adjoint of
  const detail::ConvGeometry g{os.c, os.h, os.w, k, stride, pad, xs.h, xs.w};

  std::vector<T> out(os.size(), T(0));
  const std::size_t step = detail::band_rows(g);
  T* col = detail::scratch<T>(0, g.rows() * step * g.out_w);
  auto xd = x.data();
  auto kd = w.kernel.data();
  auto bd = w.bias.data();
  for (std::size_t n = 0; n < xs.n; ++n) {
    T* dst = out.data() + n * os.sample();
    for (std::size_t r0 = 0; r0 < g.out_h; r0 += step) {
      const std::size_t r1 = std::min(g.out_h, r0 + step), cols = (r1 - r0) * g.out_w;
      blas::gemm<T>(true, false, g.rows(), cols, xs.c, T(1), kd.data(), xd.data() + n * xs.sample() + r0 * xs.w,
                    T(0), col, {0, xs.plane(), 0});
      detail::col2im(col, g, r0, r1, dst);
    }
    for (std::size_t o = 0; o < os.c; ++o) {
      T* p = dst + o * os.plane();
      for (std::size_t i = 0; i < os.plane(); ++i) p[i] += bd[o];
    }
  }

  return Tensor<T>::make_result(os, std::move(out), "conv_transpose2d", {x, w.kernel, w.bias},
                                [g, xs, os](auto& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& kv = self.inputs[1]->value;
    auto gx = input_grad(self, 0);
    auto gk = input_grad(self, 1);
    auto gb = input_grad(self, 2);
    const std::size_t step = detail::band_rows(g);
    T* col = detail::scratch<T>(0, g.rows() * step * g.out_w);
    for (std::size_t n = 0; n < xs.n; ++n) {
      if (gx.empty() && gk.empty()) break;
      for (std::size_t r0 = 0; r0 < g.out_h; r0 += step) {
        const std::size_t r1 = std::min(g.out_h, r0 + step), cols = (r1 - r0) * g.out_w;
        const std::size_t off = n * xs.sample() + r0 * xs.w;
        detail::im2col(self.grad.data() + n * os.sample(), g, r0, r1, col);
        if (!gx.empty()) {
          blas::gemm<T>(false, false, xs.c, cols, g.rows(), T(1), kv.data(), col, T(1), gx.data() + off,
                        {0, 0, xs.plane()});
        }
        if (!gk.empty()) {
          blas::gemm<T>(false, true, xs.c, g.rows(), cols, T(1), xv.data() + off, col, T(1), gk.data(),
                        {xs.plane(), 0, 0});
        }
      }
    }
    detail::add_bias_grad(gb, self.grad, os);
  });
}

/// Learnable affine parameters and running statistics of one batch-norm layer.
template <class T>
struct BatchNormState {
  Tensor<T> gamma;  // (1, C, 1, 1)
  Tensor<T> beta;   // (1, C, 1, 1)
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T epsilon = T(1e-3);
  T momentum = T(0.99);
  std::uint64_t updates = 0;
  bool warned_stale = false;

  static BatchNormState make(std::size_t channels) {
    BatchNormState s;
    s.gamma = Tensor<T>::full({1, channels, 1, 1}, T(1), true);
    s.beta = Tensor<T>::zeros({1, channels, 1, 1}, true);
    s.running_mean.assign(channels, T(0));
    s.running_var.assign(channels, T(1));
    return s;
  }

  std::size_t channels() const { return running_mean.size(); }
};

/// Train mode normalizes with per-channel batch statistics over (n, h, w)
/// and folds them into the running averages; infer mode uses the running
/// averages and leaves the state untouched apart from the stale warning.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, BatchNormState<T>& s, Mode mode) {
  const Shape xs = x.shape();
  if (s.channels() != xs.c || s.gamma.shape() != Shape{1, xs.c, 1, 1} || s.beta.shape() != Shape{1, xs.c, 1, 1}) {
    throw ShapeError("batchnorm2d: state has " + std::to_string(s.channels()) + " channels, input " + xs.str());
  }
  if (!(s.epsilon > T(0))) throw std::invalid_argument("batchnorm2d: epsilon must be positive");
  const std::size_t m = xs.n * xs.plane();
  auto xd = x.data();
  auto gd = s.gamma.data();
  auto bd = s.beta.data();
  std::vector<T> mean_c(xs.c), inv_c(xs.c);

  if (mode == Mode::Train) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      double acc = 0.0;
      for (std::size_t n = 0; n < xs.n; ++n) {
        const T* p = xd.data() + (n * xs.c + c) * xs.plane();
        for (std::size_t i = 0; i < xs.plane(); ++i) acc += p[i];
      }
      const double mu = acc / static_cast<double>(m);
      double sq = 0.0;
      for (std::size_t n = 0; n < xs.n; ++n) {
        const T* p = xd.data() + (n * xs.c + c) * xs.plane();
        for (std::size_t i = 0; i < xs.plane(); ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(m);
      mean_c[c] = static_cast<T>(mu);
      inv_c[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(s.epsilon)));
      s.running_mean[c] = s.momentum * s.running_mean[c] + (T(1) - s.momentum) * static_cast<T>(mu);
      s.running_var[c] = s.momentum * s.running_var[c] + (T(1) - s.momentum) * static_cast<T>(var);
    }
    ++s.updates;
  } else {
    if (s.updates == 0 && !s.warned_stale) {
      s.warned_stale = true;
      log_warning("batchnorm2d: inference with never-updated running statistics (mean 0, var 1)");
    }
    for (std::size_t c = 0; c < xs.c; ++c) {
      mean_c[c] = s.running_mean[c];
      inv_c[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(s.running_var[c]) + s.epsilon));
    }
  }

  std::vector<T> out(xs.size());
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t c = 0; c < xs.c; ++c) {
      const std::size_t off = (n * xs.c + c) * xs.plane();
      const T mu = mean_c[c], inv = inv_c[c], ga = gd[c], be = bd[c];
      for (std::size_t i = 0; i < xs.plane(); ++i) out[off + i] = ga * (xd[off + i] - mu) * inv + be;
    }

  const bool batch_stats = mode == Mode::Train;
  return Tensor<T>::make_result(xs, std::move(out), "batchnorm2d", {x, s.gamma, s.beta},
                                [xs, m, batch_stats, mean_c = std::move(mean_c), inv_c = std::move(inv_c)](auto& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& gam = self.inputs[1]->value;
    auto gx = input_grad(self, 0);
    auto gg = input_grad(self, 1);
    auto gbeta = input_grad(self, 2);
    for (std::size_t c = 0; c < xs.c; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t n = 0; n < xs.n; ++n) {
        const std::size_t off = (n * xs.c + c) * xs.plane();
        for (std::size_t i = 0; i < xs.plane(); ++i) {
          const double dy = self.grad[off + i];
          sum_dy += dy;
          sum_dy_xhat += dy * (xv[off + i] - mean_c[c]) * inv_c[c];
        }
      }
      if (!gg.empty()) gg[c] += static_cast<T>(sum_dy_xhat);
      if (!gbeta.empty()) gbeta[c] += static_cast<T>(sum_dy);
      if (gx.empty()) continue;
      const double scale = static_cast<double>(gam[c]) * inv_c[c];
      const double md = static_cast<double>(m);
      for (std::size_t n = 0; n < xs.n; ++n) {
        const std::size_t off = (n * xs.c + c) * xs.plane();
        for (std::size_t i = 0; i < xs.plane(); ++i) {
          const double dy = self.grad[off + i];
          if (batch_stats) {
            const double xhat = (xv[off + i] - mean_c[c]) * inv_c[c];
            gx[off + i] += static_cast<T>(scale * (dy - sum_dy / md - xhat * sum_dy_xhat / md));
          } else {
            gx[off + i] += static_cast<T>(scale * dy);
          }
        }
      }
    }
  });
}

/// y = x for x >= 0, y = slope * x otherwise. The slope is the negative-side
/// multiplier (0.2), the reciprocal of the divisor form alpha = 5 in the
/// y = x / alpha notation. Gradient at exactly 0 is taken from the x >= 0
/// branch.
template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.2)) {
  auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] >= T(0) ? xd[i] : slope * xd[i];
  if (auto& km = detail::kink_monitor(); km.active)
    for (std::size_t i = 0; i < out.size(); ++i) km.fold(xd[i] >= T(0));
  return Tensor<T>::make_result(x.shape(), std::move(out), "leaky_relu", {x}, [slope](auto& self) {
    const auto& xv = self.inputs[0]->value;
    auto g = input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += xv[i] >= T(0) ? self.grad[i] : slope * self.grad[i];
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
  if (auto& km = detail::kink_monitor(); km.active)
    for (std::size_t i = 0; i < out.size(); ++i) km.fold(xd[i] > T(0));
  return Tensor<T>::make_result(x.shape(), std::move(out), "relu", {x}, [](auto& self) {
    const auto& xv = self.inputs[0]->value;
    auto g = input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T(0)) g[i] += self.grad[i];
  });
}

/// Logistic sigmoid; results are kept strictly inside (0, 1) even where the
/// exact value rounds to an endpoint.
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  constexpr T lo = std::numeric_limits<T>::min();
  constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / 2;
  auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xd[i] >= T(0) ? T(1) / (T(1) + std::exp(-xd[i])) : std::exp(xd[i]) / (T(1) + std::exp(xd[i]));
    out[i] = std::clamp(v, lo, hi);
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), "sigmoid", {x}, [](auto& self) {
    auto g = input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = self.value[i];
      g[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

/// Non-overlapping 2x2 max pooling. Ties go to the first element in
/// row-major scan order, which also receives the whole gradient.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t window = 2) {
  const Shape xs = x.shape();
  if (window != 2) throw std::invalid_argument("maxpool2d: only a 2x2 window is supported");
  if (xs.h % 2 != 0 || xs.w % 2 != 0) {
    throw ShapeError("maxpool2d: rows and cols must be even, got " + xs.str());
  }
  const Shape os{xs.n, xs.c, xs.h / 2, xs.w / 2};
  auto xd = x.data();
  std::vector<T> out(os.size());
  std::vector<std::uint32_t> argmax(os.size());
  for (std::size_t p = 0; p < xs.n * xs.c; ++p) {
    const T* src = xd.data() + p * xs.plane();
    for (std::size_t oh = 0; oh < os.h; ++oh)
      for (std::size_t ow = 0; ow < os.w; ++ow) {
        const std::size_t base = 2 * oh * xs.w + 2 * ow;
        const std::size_t cand[4] = {base, base + 1, base + xs.w, base + xs.w + 1};
        std::size_t best = cand[0];
        for (int q = 1; q < 4; ++q)
          if (src[cand[q]] > src[best]) best = cand[q];
        const std::size_t o = p * os.plane() + oh * os.w + ow;
        out[o] = src[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
  }
  if (auto& km = detail::kink_monitor(); km.active)
    for (auto a : argmax) km.fold(a);
  return Tensor<T>::make_result(os, std::move(out), "maxpool2d", {x},
                                [xs, os, argmax = std::move(argmax)](auto& self) {
    auto g = input_grad(self, 0);
    if (g.empty()) return;
    for (std::size_t p = 0; p < xs.n * xs.c; ++p)
      for (std::size_t i = 0; i < os.plane(); ++i) {
        const std::size_t o = p * os.plane() + i;
        g[p * xs.plane() + argmax[o]] += self.grad[o];
      }
  });
}

/// Inverted dropout: train mode zeroes each element with probability `rate`
/// and scales survivors by 1 / (1 - rate); infer mode is the identity.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (mode == Mode::Infer || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  auto xd = x.data();
  std::vector<T> mask(xd.size());
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() >= rate ? keep_scale : T(0);
    out[i] = xd[i] * mask[i];
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), "dropout", {x}, [mask = std::move(mask)](auto& self) {
    auto g = input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

/// Stacks channels: a's channels first, then b's.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.defined() || !b.defined()) throw std::invalid_argument("concat_channels: undefined operand");
  const Shape as = a.shape(), bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
    throw ShapeError("concat_channels: spatial mismatch " + as.str() + " vs " + bs.str());
  }
  const Shape os{as.n, as.c + bs.c, as.h, as.w};
  auto ad = a.data();
  auto bd = b.data();
  std::vector<T> out(os.size());
  for (std::size_t n = 0; n < os.n; ++n) {
    std::copy_n(ad.data() + n * as.sample(), as.sample(), out.data() + n * os.sample());
    std::copy_n(bd.data() + n * bs.sample(), bs.sample(), out.data() + n * os.sample() + as.sample());
  }
  return Tensor<T>::make_result(os, std::move(out), "concat_channels", {a, b}, [as, bs, os](auto& self) {
    auto ga = input_grad(self, 0);
    auto gb = input_grad(self, 1);
    for (std::size_t n = 0; n < os.n; ++n) {
      const T* src = self.grad.data() + n * os.sample();
      if (!ga.empty())
        for (std::size_t i = 0; i < as.sample(); ++i) ga[n * as.sample() + i] += src[i];
      if (!gb.empty())
        for (std::size_t i = 0; i < bs.sample(); ++i) gb[n * bs.sample() + i] += src[as.sample() + i];
    }
  });
}

/// Per-element mean of squared differences.
template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred.shape(), target.shape(), "mse_loss");
  auto p = pred.data();
  auto t = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = static_cast<double>(p[i]) - static_cast<double>(t[i]);
    acc += d * d;
  }
  const double count = static_cast<double>(p.size());
  return Tensor<T>::make_result(Shape{}, {static_cast<T>(acc / count)}, "mse_loss", {pred, target},
                                [count](auto& self) {
    const auto& pv = self.inputs[0]->value;
    const auto& tv = self.inputs[1]->value;
    const T k = static_cast<T>(2.0 * self.grad[0] / count);
    auto gp = input_grad(self, 0);
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += k * (pv[i] - tv[i]);
    auto gt = input_grad(self, 1);
    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] -= k * (pv[i] - tv[i]);
  });
}

}  // namespace erasenet
