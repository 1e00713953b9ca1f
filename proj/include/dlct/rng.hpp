#pragma once

#include <cstdint>
#include <string>

namespace dlct {

// xoshiro256** with splitmix64 seeding. Self-contained so that streams are
// reproducible byte-for-byte regardless of the standard library in use.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  // Uniform in [0, 1), 53-bit resolution.
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, n), n > 0.
  int64_t uniform_int(int64_t n);
  // Standard normal via Box-Muller.
  double gaussian();
  double gaussian(double mean, double stddev);

  // Independent child stream; deterministic in (parent seed, stream_id) and
  // does not advance this generator.
  Rng derive(uint64_t stream_id) const;

  std::string serialize() const;
  static Rng deserialize(const std::string& text);

 private:
  Rng() = default;
  uint64_t s_[4] = {0, 0, 0, 0};
};

}  // namespace dlct
