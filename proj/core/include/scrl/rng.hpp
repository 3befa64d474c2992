#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace scrl {

// Deterministic random source. The engine is std::mt19937_64; the
// distributions are implemented here because the std:: distributions are
// implementation-defined, and datasets/batches must be identical across
// standard libraries for a given seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  int uniform_int(int lo, int hi_inclusive) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi_inclusive - lo) + 1));
  }
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

  // Independent stream derived from this seed and a tag.
  static Rng derive(std::uint64_t seed, std::uint64_t tag);

  std::string serialize() const;
  void deserialize(const std::string& state);

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace scrl
