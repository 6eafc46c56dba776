#pragma once

#include <cstdint>

namespace canet {

// Counter-based generator: draw i of a stream is a pure function of (seed, i),
// so sequences are identical on every platform and streams split cheaply.
class RngState {
 public:
  RngState() = default;
  explicit RngState(std::uint64_t seed, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept { return mix(seed_ ^ mix(counter_++ + 0x9E3779B97F4A7C15ULL)); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n); n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept;

  bool bernoulli(double p) noexcept { return uniform() < p; }

  // Standard normal via Box-Muller (one value per call).
  double normal() noexcept;

  // Independent child stream keyed by `stream`; does not advance this state.
  RngState split(std::uint64_t stream) const noexcept {
    return RngState(mix(seed_ + mix(stream ^ 0xD1B54A32D192ED03ULL)), 0);
  }

  bool operator==(const RngState&) const = default;

  static std::uint64_t mix(std::uint64_t z) noexcept {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace canet
