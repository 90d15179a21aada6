#pragma once

// Grayscale image buffers, PGM/PNG file IO, resizing, tiling into patches,
// edge padding and noisy/clean pair discovery.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "erasenet/log.hpp"
#include "erasenet/rng.hpp"
#include "erasenet/tensor.hpp"

namespace erasenet {

namespace fs = std::filesystem;

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row-major grayscale image with pixels in [0, 1].
struct ImageBuffer {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<float> pixels;

  ImageBuffer() = default;
  ImageBuffer(std::size_t rows, std::size_t cols, float fill = 0.0f) : h(rows), w(cols), pixels(rows * cols, fill) {
    if (rows < 1 || cols < 1) throw ImageError("image dims must be >= 1");
  }
  ImageBuffer(std::size_t rows, std::size_t cols, std::vector<float> values) : h(rows), w(cols), pixels(std::move(values)) {
    if (rows < 1 || cols < 1) throw ImageError("image dims must be >= 1");
    if (pixels.size() != rows * cols) throw ImageError("image: pixel count does not match dims");
  }

  float& at(std::size_t r, std::size_t c) { return pixels[r * w + c]; }
  float at(std::size_t r, std::size_t c) const { return pixels[r * w + c]; }
  std::size_t size() const { return pixels.size(); }
  bool in_unit_range() const {
    return std::all_of(pixels.begin(), pixels.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
  }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;
};

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline float luma(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return static_cast<float>((0.299 * r + 0.587 * g + 0.114 * b) / 255.0);
}

// ---- PGM (binary P5, maxval <= 255) ---------------------------------------

namespace detail {

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// next whitespace-delimited header token, skipping '#' comments
inline std::string pgm_token(const std::string& s, std::size_t& pos) {
  for (;;) {
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (pos < s.size() && s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const std::size_t start = pos;
  while (pos < s.size() && !std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
  return s.substr(start, pos - start);
}

}  // namespace detail

inline ImageBuffer decode_pgm(const std::string& bytes, const std::string& name) {
  std::size_t pos = 0;
  if (detail::pgm_token(bytes, pos) != "P5") throw ImageError(name + ": not a binary PGM (P5) file");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(detail::pgm_token(bytes, pos));
    h = std::stoul(detail::pgm_token(bytes, pos));
    maxval = std::stoul(detail::pgm_token(bytes, pos));
  } catch (const std::exception&) {
    throw ImageError(name + ": malformed PGM header");
  }
  if (w == 0 || h == 0) throw ImageError(name + ": PGM has zero dims");
  if (maxval == 0 || maxval > 255) throw ImageError(name + ": PGM maxval " + std::to_string(maxval) + " unsupported (8-bit only)");
  ++pos;  // single whitespace byte ends the header
  if (bytes.size() < pos + w * h) throw ImageError(name + ": PGM payload truncated");
  ImageBuffer img(h, w);
  for (std::size_t i = 0; i < w * h; ++i) {
    const auto b = static_cast<std::uint8_t>(bytes[pos + i]);
    img.pixels[i] = maxval == 255 ? static_cast<float>(b) / 255.0f
                                  : static_cast<float>(std::min<double>(1.0, static_cast<double>(b) / maxval));
  }
  return img;
}

inline void save_pgm(const ImageBuffer& img, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write " + path.string());
  out << "P5\n" << img.w << ' ' << img.h << "\n255\n";
  std::string payload(img.size(), '\0');
  for (std::size_t i = 0; i < img.size(); ++i) payload[i] = static_cast<char>(to_byte(img.pixels[i]));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw ImageError("write failed for " + path.string());
}

// ---- PNG (libpng simplified API) -------------------------------------------

inline ImageBuffer load_png(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw ImageError(path.string() + ": unreadable PNG (" + image.message + ")");
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw ImageError(path.string() + ": PNG decode failed (" + msg + ")");
  }
  ImageBuffer img(image.height, image.width);
  for (std::size_t i = 0; i < img.size(); ++i) {
    img.pixels[i] = color ? luma(buf[3 * i], buf[3 * i + 1], buf[3 * i + 2]) : static_cast<float>(buf[i]) / 255.0f;
  }
  return img;
}

inline void save_png(const ImageBuffer& img, const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.w);
  image.height = static_cast<png_uint_32>(img.h);
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) buf[i] = to_byte(img.pixels[i]);
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    throw ImageError("cannot write PNG " + path.string() + " (" + image.message + ")");
  }
}

inline bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".pgm";
}

/// Loads an 8-bit grayscale or RGB raster (PGM P5 or PNG) into [0, 1];
/// RGB collapses through the 0.299 / 0.587 / 0.114 luma weights.
inline ImageBuffer load_grayscale(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path.string());
  char magic[8] = {};
  in.read(magic, 8);
  in.close();
  if (magic[0] == 'P' && magic[1] == '5') return decode_pgm(detail::read_file(path), path.string());
  if (static_cast<unsigned char>(magic[0]) == 0x89 && magic[1] == 'P' && magic[2] == 'N' && magic[3] == 'G') {
    return load_png(path);
  }
  throw ImageError(path.string() + ": unsupported format (expected PNG or binary PGM)");
}

/// Writes 8-bit grayscale; the format follows the extension (.png, else PGM).
inline void save_grayscale(const ImageBuffer& img, const fs::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") {
    save_png(img, path);
  } else {
    save_pgm(img, path);
  }
}

// ---- geometry --------------------------------------------------------------

/// Bilinear resampling, half-pixel centers (align corners off), edge clamped.
inline ImageBuffer resize_bilinear(const ImageBuffer& img, std::size_t out_h, std::size_t out_w) {
  if (out_h < 1 || out_w < 1) throw ImageError("resize: output dims must be >= 1");
  if (out_h == img.h && out_w == img.w) return img;
  ImageBuffer out(out_h, out_w);
  const double sy = static_cast<double>(img.h) / out_h, sx = static_cast<double>(img.w) / out_w;
  for (std::size_t r = 0; r < out_h; ++r) {
    const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.h - 1);
    const double ty = fy - y0;
    for (std::size_t c = 0; c < out_w; ++c) {
      const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.w - 1);
      const double tx = fx - x0;
      const double top = img.at(y0, x0) * (1 - tx) + img.at(y0, x1) * tx;
      const double bot = img.at(y1, x0) * (1 - tx) + img.at(y1, x1) * tx;
      out.at(r, c) = static_cast<float>(std::clamp(top * (1 - ty) + bot * ty, 0.0, 1.0));
    }
  }
  return out;
}

constexpr std::size_t kPatchSize = 256;
constexpr std::size_t kPageRows = 1024;
constexpr std::size_t kPageCols = 768;

struct Origin {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const Origin&, const Origin&) = default;
};

/// Square tiles of a source image plus where each one came from.
struct PatchSet {
  std::vector<ImageBuffer> patches;
  std::vector<Origin> origins;
  std::size_t source_h = 0;
  std::size_t source_w = 0;
  std::size_t tile = kPatchSize;
};

/// Non-overlapping tiling, row-major from the top-left corner.
inline PatchSet tile_image(const ImageBuffer& img, std::size_t tile = kPatchSize) {
  if (tile < 1 || img.h % tile != 0 || img.w % tile != 0) {
    throw ImageError("tile_image: " + std::to_string(img.h) + "x" + std::to_string(img.w) +
                     " is not a multiple of the tile size " + std::to_string(tile));
  }
  PatchSet ps;
  ps.source_h = img.h;
  ps.source_w = img.w;
  ps.tile = tile;
  for (std::size_t r = 0; r < img.h; r += tile)
    for (std::size_t c = 0; c < img.w; c += tile) {
      ImageBuffer p(tile, tile);
      for (std::size_t i = 0; i < tile; ++i)
        std::copy_n(img.pixels.begin() + static_cast<std::ptrdiff_t>((r + i) * img.w + c), tile,
                    p.pixels.begin() + static_cast<std::ptrdiff_t>(i * tile));
      ps.patches.push_back(std::move(p));
      ps.origins.push_back({r, c});
    }
  return ps;
}

/// The canonical page decomposition: 1024 rows x 768 cols into 12 tiles.
inline PatchSet extract_patches(const ImageBuffer& page) {
  if (page.h != kPageRows || page.w != kPageCols) {
    throw ImageError("extract_patches: page must be 1024 rows x 768 cols, got " + std::to_string(page.h) + "x" +
                     std::to_string(page.w) + " (resize first)");
  }
  return tile_image(page, kPatchSize);
}

/// Places every patch at its origin. The origins must cover the source
/// exactly once.
inline ImageBuffer stitch_patches(const PatchSet& ps) {
  const std::size_t t = ps.tile;
  if (t < 1 || ps.source_h % t != 0 || ps.source_w % t != 0) throw ImageError("stitch: source dims not tile aligned");
  if (ps.patches.size() != ps.origins.size()) throw ImageError("stitch: patch and origin counts differ");
  const std::size_t gr = ps.source_h / t, gc = ps.source_w / t;
  std::vector<int> hits(gr * gc, 0);
  ImageBuffer out(ps.source_h, ps.source_w);
  for (std::size_t k = 0; k < ps.patches.size(); ++k) {
    const auto& o = ps.origins[k];
    const auto& p = ps.patches[k];
    if (p.h != t || p.w != t) throw ImageError("stitch: patch " + std::to_string(k) + " has wrong dims");
    if (o.row % t != 0 || o.col % t != 0 || o.row >= ps.source_h || o.col >= ps.source_w) {
      throw ImageError("stitch: origin (" + std::to_string(o.row) + "," + std::to_string(o.col) + ") off the grid");
    }
    if (++hits[(o.row / t) * gc + o.col / t] > 1) {
      throw ImageError("stitch: overlapping origin (" + std::to_string(o.row) + "," + std::to_string(o.col) + ")");
    }
    for (std::size_t i = 0; i < t; ++i)
      std::copy_n(p.pixels.begin() + static_cast<std::ptrdiff_t>(i * t), t,
                  out.pixels.begin() + static_cast<std::ptrdiff_t>((o.row + i) * out.w + o.col));
  }
  for (std::size_t i = 0; i < hits.size(); ++i) {
    if (hits[i] == 0) {
      throw ImageError("stitch: missing tile at (" + std::to_string(i / gc * t) + "," + std::to_string(i % gc * t) + ")");
    }
  }
  return out;
}

struct PaddedImage {
  ImageBuffer image;
  std::size_t orig_h = 0;
  std::size_t orig_w = 0;
};

/// Replicates the last row/col until both dims are multiples of m.
inline PaddedImage pad_to_multiple(const ImageBuffer& img, std::size_t m) {
  if (m < 1) throw ImageError("pad_to_multiple: multiple must be >= 1");
  const std::size_t H = (img.h + m - 1) / m * m, W = (img.w + m - 1) / m * m;
  PaddedImage out{ImageBuffer(H, W), img.h, img.w};
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) out.image.at(r, c) = img.at(std::min(r, img.h - 1), std::min(c, img.w - 1));
  return out;
}

inline ImageBuffer crop(const ImageBuffer& img, std::size_t rows, std::size_t cols) {
  if (rows > img.h || cols > img.w) throw ImageError("crop: target larger than image");
  ImageBuffer out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(img.pixels.begin() + static_cast<std::ptrdiff_t>(r * img.w), cols,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(r * cols));
  return out;
}

/// Quarter turns counter-clockwise.
inline ImageBuffer rotate90(const ImageBuffer& img, int quarter_turns) {
  const int q = ((quarter_turns % 4) + 4) % 4;
  if (q == 0) return img;
  const bool swap = q % 2 == 1;
  ImageBuffer out(swap ? img.w : img.h, swap ? img.h : img.w);
  for (std::size_t r = 0; r < img.h; ++r)
    for (std::size_t c = 0; c < img.w; ++c) {
      const float v = img.at(r, c);
      if (q == 1) {
        out.at(img.w - 1 - c, r) = v;
      } else if (q == 2) {
        out.at(img.h - 1 - r, img.w - 1 - c) = v;
      } else {
        out.at(c, img.h - 1 - r) = v;
      }
    }
  return out;
}

// ---- tensor conversion -------------------------------------------------------

template <class T = float>
Tensor<T> to_tensor(const std::vector<const ImageBuffer*>& batch) {
  if (batch.empty()) throw ImageError("to_tensor: empty batch");
  const std::size_t h = batch.front()->h, w = batch.front()->w;
  std::vector<T> v;
  v.reserve(batch.size() * h * w);
  for (const auto* img : batch) {
    if (img->h != h || img->w != w) throw ImageError("to_tensor: images in a batch must share dims");
    v.insert(v.end(), img->pixels.begin(), img->pixels.end());
  }
  return Tensor<T>(Shape{batch.size(), 1, h, w}, std::move(v));
}

template <class T = float>
Tensor<T> to_tensor(const ImageBuffer& img) {
  return to_tensor<T>(std::vector<const ImageBuffer*>{&img});
}

template <class T>
ImageBuffer to_image(const Tensor<T>& t, std::size_t index = 0) {
  const Shape s = t.shape();
  if (s.c != 1 || index >= s.n) throw ImageError("to_image: expected a single-channel sample, got " + s.str());
  ImageBuffer img(s.h, s.w);
  auto d = t.data();
  for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = std::clamp(static_cast<float>(d[index * s.plane() + i]), 0.0f, 1.0f);
  return img;
}

// ---- pair discovery ----------------------------------------------------------

enum class Split { Train, Val, Test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    default: return "test";
  }
}

struct ImagePair {
  fs::path noisy;
  fs::path clean;
  Split split = Split::Train;
};

struct PairManifest {
  std::vector<ImagePair> pairs;
  std::vector<std::string> warnings;

  std::vector<ImagePair> subset(Split s) const {
    std::vector<ImagePair> out;
    for (const auto& p : pairs)
      if (p.split == s) out.push_back(p);
    return out;
  }
};

struct SplitSpec {
  double train_fraction = 0.9;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::map<std::string, fs::path> images_by_stem(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) throw ImageError("not a directory: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) out.emplace(e.path().stem().string(), e.path());
  }
  return out;
}

}  // namespace detail

/// Matches files by stem, orders pairs lexicographically and assigns the
/// train/val split through a seeded shuffle. With at least two pairs and a
/// fraction below 1, one pair is always held out.
inline PairManifest scan_pairs(const fs::path& noisy_dir, const fs::path& clean_dir, SplitSpec split = {}) {
  if (!(split.train_fraction > 0.0 && split.train_fraction <= 1.0)) {
    throw std::invalid_argument("scan_pairs: train fraction must be in (0, 1]");
  }
  const auto noisy = detail::images_by_stem(noisy_dir);
  const auto clean = detail::images_by_stem(clean_dir);
  PairManifest m;
  for (const auto& [stem, path] : noisy) {
    auto it = clean.find(stem);
    if (it == clean.end()) {
      m.warnings.push_back("no clean match for " + path.string());
      continue;
    }
    m.pairs.push_back({path, it->second, Split::Train});
  }
  for (const auto& [stem, path] : clean)
    if (!noisy.contains(stem)) m.warnings.push_back("no noisy match for " + path.string());
  for (const auto& w : m.warnings) log_warning("scan_pairs: " + w);

  const std::size_t n = m.pairs.size();
  auto n_train = static_cast<std::size_t>(std::llround(split.train_fraction * static_cast<double>(n)));
  if (split.train_fraction < 1.0 && n >= 2) n_train = std::min(n_train, n - 1);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(split.seed);
  rng.shuffle(order.begin(), order.end());
  for (std::size_t i = n_train; i < n; ++i) m.pairs[order[i]].split = Split::Val;
  return m;
}

}  // namespace erasenet
