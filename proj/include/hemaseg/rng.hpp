#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <utility>
#include <vector>

namespace hemaseg {

/// 64-bit FNV-1a; used to turn stream names into stream ids.
constexpr std::uint64_t stream_id(std::string_view name) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Counter-based generator ("splitmix64-ctr"). Output i of stream (seed, stream)
/// is a pure function of (seed, stream, i), so any draw can be reproduced from
/// the triple alone and substreams never depend on evaluation order.
class CounterRng {
 public:
  static constexpr std::string_view kName = "splitmix64-ctr";

  CounterRng(std::uint64_t seed, std::uint64_t stream) noexcept
      : seed_(seed), stream_(stream), key_(splitmix64(seed ^ splitmix64(stream))) {}

  [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
  [[nodiscard]] std::uint64_t stream() const noexcept { return stream_; }
  [[nodiscard]] std::uint64_t counter() const noexcept { return counter_; }
  void set_counter(std::uint64_t c) noexcept { counter_ = c; }

  /// Child stream keyed by this stream and `id`; the parent's counter is untouched.
  [[nodiscard]] CounterRng fork(std::uint64_t id) const noexcept {
    return CounterRng(seed_, splitmix64(stream_ ^ splitmix64(id + 0x632be59bd9b4e019ULL)));
  }
  template <typename... Ids>
  [[nodiscard]] CounterRng fork(std::uint64_t id, Ids... rest) const noexcept {
    return fork(id).fork(static_cast<std::uint64_t>(rest)...);
  }

  std::uint64_t next_u64() noexcept {
    return splitmix64(key_ + 0x9e3779b97f4a7c15ULL * counter_++);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Rejection sampling keeps it exactly unbiased.
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Standard normal via Box-Muller; consumes exactly two draws.
  double normal() noexcept {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Normal(0, std) truncated to [-2 std, 2 std] by resampling.
  double truncated_normal(double std) noexcept {
    for (;;) {
      const double z = normal();
      if (z >= -2.0 && z <= 2.0) return z * std;
    }
  }

  template <typename It>
  void shuffle(It first, It last) noexcept {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      using std::swap;
      swap(first[i - 1], first[j]);
    }
  }

  /// Uniformly random permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    shuffle(p.begin(), p.end());
    return p;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace hemaseg
