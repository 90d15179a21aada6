#pragma once

// Image quality metrics (MSE, PSNR, SSIM) and post-processing filters.

#include <array>
#include <cmath>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "erasenet/image.hpp"

namespace erasenet {

/// Pixel scale a metric is computed in: [0, 1] or [0, 255].
enum class Range { Unit, EightBit };

inline const char* to_string(Range r) { return r == Range::Unit ? "unit" : "8bit"; }

inline double range_max(Range r) { return r == Range::Unit ? 1.0 : 255.0; }

inline void require_same_dims(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
  if (a.h != b.h || a.w != b.w) {
    throw ImageError(std::string(what) + ": dims differ " + std::to_string(a.h) + "x" + std::to_string(a.w) + " vs " +
                     std::to_string(b.h) + "x" + std::to_string(b.w));
  }
}

inline double mse_metric(const ImageBuffer& a, const ImageBuffer& b, Range range = Range::Unit) {
  require_same_dims(a, b, "mse");
  const double s = range_max(range);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = (static_cast<double>(a.pixels[i]) - b.pixels[i]) * s;
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

/// 20 log10(max / sqrt(mse)) in dB; nullopt when mse is 0 (identical images).
inline std::optional<double> psnr(double mse, double max_i) {
  if (!(max_i > 0.0)) throw std::invalid_argument("psnr: max must be positive");
  if (!(mse >= 0.0)) throw std::invalid_argument("psnr: mse must be non-negative");
  if (mse == 0.0) return std::nullopt;
  return 20.0 * std::log10(max_i / std::sqrt(mse));
}

struct SsimParams {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
};

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
inline std::vector<double> gaussian_taps(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double mid = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - mid;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

namespace detail {

// Separable Gaussian filter over valid positions only.
inline std::vector<double> filter_valid(const std::vector<double>& img, std::size_t h, std::size_t w,
                                        const std::vector<double>& taps) {
  const std::size_t k = taps.size(), oh = h - k + 1, ow = w - k + 1;
  std::vector<double> rows(h * ow, 0.0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) acc += taps[j] * img[r * w + c + j];
      rows[r * ow + c] = acc;
    }
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t r = 0; r < oh; ++r)
    for (std::size_t c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += taps[i] * rows[(r + i) * ow + c];
      out[r * ow + c] = acc;
    }
  return out;
}

inline std::vector<double> scaled(const ImageBuffer& img, double s) {
  std::vector<double> v(img.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = img.pixels[i] * s;
  return v;
}

}  // namespace detail

/// Mean SSIM over all window positions that fit inside the image. Pixels are
/// taken in [0, 1] and scaled by the dynamic range.
inline double ssim(const ImageBuffer& a, const ImageBuffer& b, const SsimParams& p = {}) {
  require_same_dims(a, b, "ssim");
  if (a.h < p.window || a.w < p.window) {
    throw ImageError("ssim: image " + std::to_string(a.h) + "x" + std::to_string(a.w) + " smaller than the " +
                     std::to_string(p.window) + "x" + std::to_string(p.window) + " window");
  }
  const auto taps = gaussian_taps(p.window, p.sigma);
  const auto x = detail::scaled(a, p.dynamic_range), y = detail::scaled(b, p.dynamic_range);
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = detail::filter_valid(x, a.h, a.w, taps), my = detail::filter_valid(y, a.h, a.w, taps);
  const auto sxx = detail::filter_valid(xx, a.h, a.w, taps), syy = detail::filter_valid(yy, a.h, a.w, taps);
  const auto sxy = detail::filter_valid(xy, a.h, a.w, taps);
  const double c1 = p.c1(), c2 = p.c2();
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

/// The SSIM formula evaluated once over the whole image.
inline double ssim_global(const ImageBuffer& a, const ImageBuffer& b, const SsimParams& p = {}) {
  require_same_dims(a, b, "ssim_global");
  const auto x = detail::scaled(a, p.dynamic_range), y = detail::scaled(b, p.dynamic_range);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double vx = 0, vy = 0, cxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
    cxy += (x[i] - mx) * (y[i] - my);
  }
  vx /= n;
  vy /= n;
  cxy /= n;
  return ((2 * mx * my + p.c1()) * (2 * cxy + p.c2())) / ((mx * mx + my * my + p.c1()) * (vx + vy + p.c2()));
}

// ---- post-processing ---------------------------------------------------------

inline constexpr std::array<std::array<int, 3>, 3> kSharpenKernel{{{0, -1, 0}, {-1, 5, -1}, {0, -1, 0}}};

/// 3x3 sharpening with replicated edges, clamped to [0, 1].
inline ImageBuffer sharpen(const ImageBuffer& img) {
  ImageBuffer out(img.h, img.w);
  const auto H = static_cast<std::ptrdiff_t>(img.h), W = static_cast<std::ptrdiff_t>(img.w);
  for (std::ptrdiff_t r = 0; r < H; ++r)
    for (std::ptrdiff_t c = 0; c < W; ++c) {
      double acc = 0.0;
      for (int i = -1; i <= 1; ++i)
        for (int j = -1; j <= 1; ++j) {
          const int k = kSharpenKernel[i + 1][j + 1];
          if (k == 0) continue;
          const auto rr = std::clamp<std::ptrdiff_t>(r + i, 0, H - 1), cc = std::clamp<std::ptrdiff_t>(c + j, 0, W - 1);
          acc += k * static_cast<double>(img.at(rr, cc));
        }
      out.at(r, c) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
    }
  return out;
}

using DenoiseFn = std::function<ImageBuffer(const ImageBuffer&)>;

/// Runs `denoise` on the four quarter-turn rotations, turns each result back
/// and averages.
inline ImageBuffer multi_orientation(const ImageBuffer& img, const DenoiseFn& denoise) {
  std::vector<double> acc(img.size(), 0.0);
  for (int q = 0; q < 4; ++q) {
    const ImageBuffer back = rotate90(denoise(rotate90(img, q)), -q);
    require_same_dims(back, img, "multi_orientation");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += back.pixels[i];
  }
  ImageBuffer out(img.h, img.w);
  for (std::size_t i = 0; i < acc.size(); ++i) out.pixels[i] = static_cast<float>(acc[i] / 4.0);
  return out;
}

// ---- reports -----------------------------------------------------------------

struct MetricRow {
  std::string name;
  double mse = 0.0;
  std::optional<double> psnr_db;  // nullopt: identical images
  double ssim = 1.0;
};

struct MetricReport {
  Range range = Range::Unit;
  std::vector<MetricRow> rows;

  void add(std::string name, const ImageBuffer& pred, const ImageBuffer& truth) {
    MetricRow r;
    r.name = std::move(name);
    r.mse = mse_metric(pred, truth, range);
    r.psnr_db = psnr(r.mse, range_max(range));
    SsimParams p;
    p.dynamic_range = range_max(range);
    r.ssim = ssim(pred, truth, p);
    rows.push_back(std::move(r));
  }

  std::size_t count() const { return rows.size(); }

  /// Averages over images; the PSNR mean skips identical pairs and is
  /// itself nullopt when every pair is identical.
  MetricRow mean() const {
    MetricRow m;
    m.name = "mean";
    if (rows.empty()) return m;
    double mse = 0, ps = 0, ss = 0;
    std::size_t finite = 0;
    for (const auto& r : rows) {
      mse += r.mse;
      ss += r.ssim;
      if (r.psnr_db) {
        ps += *r.psnr_db;
        ++finite;
      }
    }
    const double n = static_cast<double>(rows.size());
    m.mse = mse / n;
    m.ssim = ss / n;
    if (finite) m.psnr_db = ps / static_cast<double>(finite);
    return m;
  }

  static std::string format(const MetricRow& r) {
    std::ostringstream os;
    os << std::setprecision(10) << r.name << ',' << r.mse << ',';
    if (r.psnr_db) {
      os << *r.psnr_db;
    } else {
      os << "identical";
    }
    os << ',' << r.ssim;
    return os.str();
  }

  /// `image,mse,psnr_db,ssim` lines, one per image, then the mean footer.
  std::string to_csv() const {
    std::string out;
    for (const auto& r : rows) out += format(r) + '\n';
    out += format(mean()) + '\n';
    return out;
  }
};

}  // namespace erasenet
