#pragma once

#include <cstdint>
#include <random>

namespace nxgpt {

// Seeded generator whose output is identical on every platform:
// mt19937_64 is fully specified by the standard, and the distributions
// below are implemented here instead of using the implementation-defined
// <random> distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform in the open interval (0, 1).
  double uniform_open() { return (static_cast<double>(engine_() >> 12) + 0.5) * 0x1.0p-52; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  int below(int n);
  double normal();

  // Deterministic child generator; does not advance this one.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace nxgpt
