#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace bfm {

// FNV-1a, 64-bit. Stable across platforms and runs.
std::uint64_t stable_hash(std::string_view text) noexcept;

std::uint64_t mix64(std::uint64_t z) noexcept;

// Counter-based generator: the i-th output is mix64(key + i * golden).
// Streams are addressed by (seed, ids...) so that independent consumers
// never share state and draw order in one stream does not perturb another.
//
// All distributions are implemented here rather than through <random> so
// the sampled values are identical across standard libraries (the golden
// fixtures under tests/data depend on this).
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) noexcept : key_(key) {}

  static CounterRng stream(std::uint64_t seed,
                           std::initializer_list<std::uint64_t> ids) noexcept;

  std::uint64_t next_u64() noexcept;

  // [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) noexcept { return uniform() < p; }
  // Box-Muller, one output per two uniforms; no cached spare.
  double normal() noexcept;
  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }
  // floor(u * n), n > 0.
  std::uint64_t below(std::uint64_t n) noexcept;

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace bfm
