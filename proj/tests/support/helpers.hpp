#pragma once

#include <cstdint>
#include <vector>

#include "erasenet/rng.hpp"
#include "erasenet/tensor.hpp"

namespace erasenet::testing {

template <class T = double>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  Rng rng(seed);
  std::vector<T> v(s.size());
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(s, std::move(v), requires_grad);
}

/// Values bounded away from zero by at least `gap`, random sign.
template <class T = double>
Tensor<T> random_away_from_zero(Shape s, std::uint64_t seed, double gap) {
  Rng rng(seed);
  std::vector<T> v(s.size());
  for (auto& x : v) {
    const double mag = gap + rng.uniform(0.0, 1.0);
    x = static_cast<T>(rng.uniform() < 0.5 ? -mag : mag);
  }
  return Tensor<T>(s, std::move(v));
}

template <class T>
double inner(const Tensor<T>& a, const Tensor<T>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a.data()[i]) * b.data()[i];
  return acc;
}

}  // namespace erasenet::testing

#include <filesystem>
#include <random>
#include <string>

namespace erasenet::testing {

/// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("erasenet_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace erasenet::testing
