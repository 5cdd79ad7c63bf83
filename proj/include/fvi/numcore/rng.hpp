#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>

#include <boost/random/normal_distribution.hpp>

namespace fvi {

/// Counter-based 64-bit generator (SplitMix64 finalizer applied to a Weyl
/// sequence). Every output is a pure function of (seed, stream, counter), so
/// reruns are bit-exact across platforms. Satisfies UniformRandomBitGenerator.
class Rng {
 public:
  using result_type = std::uint64_t;
  static constexpr const char* kAlgorithm = "splitmix64";

  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream), key_(mix(seed ^ mix(stream + 0x632BE59BD9B4E019ULL))) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix(key_ + kGolden * ++counter_); }

  /// Independent stream derived from this generator's seed.
  Rng fork(std::uint64_t stream) const { return Rng(seed_, mix(stream_ + 1) ^ stream); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal (ziggurat).
  double normal() { return boost::random::normal_distribution<double>()(*this); }

  void fill_normal(std::span<double> out) {
    boost::random::normal_distribution<double> nd;
    for (double& v : out) v = nd(*this);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace fvi
