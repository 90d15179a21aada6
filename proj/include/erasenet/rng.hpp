#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace erasenet {

/// Seeded random source shared by dropout, shuffling and initialization.
///
/// Uniform variates are produced from raw 64-bit draws with a fixed
/// bit-to-double conversion, so sequences do not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: empty range");
    // rejection sampling keeps the result unbiased
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via Box-Muller (one variate per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  /// Full engine state as 64-bit words.
  std::vector<std::uint64_t> state() const {
    std::ostringstream os;
    os << engine_;
    std::istringstream is(os.str());
    std::vector<std::uint64_t> words;
    std::uint64_t w;
    while (is >> w) words.push_back(w);
    return words;
  }

  void set_state(const std::vector<std::uint64_t>& words) {
    std::ostringstream os;
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (i) os << ' ';
      os << words[i];
    }
    std::istringstream is(os.str());
    std::mt19937_64 e;
    is >> e;
    if (is.fail()) throw std::invalid_argument("Rng::set_state: malformed engine state");
    engine_ = e;
  }

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace erasenet
