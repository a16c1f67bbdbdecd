#pragma once

#include <cstdint>
#include <vector>

namespace wf {

// Deterministic counter-based generator: SplitMix64 (Steele, Lea, Flood 2014).
// The state advances by a fixed odd constant per draw and the output is a
// bijective mix of the state, so identical seeds give identical streams on
// every platform. Normal deviates use the Marsaglia polar method on top of
// the uniform stream; both algorithms are pinned here so corpora and
// parameter initializations are reproducible across implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();

  // Uniform in [0, 1), 53-bit resolution.
  double uniform();

  // Unbiased integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n);

  // Standard normal via the polar method (uses log/sqrt only).
  double normal();

  // Normal(0, std_dev^2) rejected outside +/- clip * std_dev.
  double trunc_normal(double std_dev, double clip = 2.0);

  // Independent sub-stream k of this generator's seed.
  Rng fork(std::uint64_t k) const;

 private:
  std::uint64_t state_;
  std::uint64_t seed0_ = state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// k distinct indices drawn uniformly from [0, n), ascending order.
std::vector<std::int64_t> sample_without_replacement(Rng& rng, std::int64_t n,
                                                     std::int64_t k);

}  // namespace wf
