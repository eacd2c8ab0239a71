#pragma once

// mt19937_64 with portable draws; std distributions differ across standard libraries.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

namespace gapd {

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

  std::uint64_t next() { return eng_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Uniform in [0, n).
  std::size_t below(std::size_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below(0)");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }

  // Uniform in [lo, hi].
  long long between(long long lo, long long hi) { return lo + static_cast<long long>(below(static_cast<std::size_t>(hi - lo + 1))); }

  bool chance(double p) { return uniform() < p; }

  template <class T>
  const T& pick(const std::vector<T>& v) {
    return v[below(v.size())];
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

  // Independent child stream derived from this one.
  Rng fork() { return Rng(next() ^ 0x9E3779B97F4A7C15ULL); }

 private:
  std::mt19937_64 eng_;
};

}  // namespace gapd
