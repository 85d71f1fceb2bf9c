#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace natgrad {

/// Named sub-streams derived from a single run seed. Each consumer draws from
/// its own stream so that, for example, adding evaluation episodes never
/// perturbs the training trajectory.
enum class Stream : std::uint64_t {
  init = 1,
  env = 2,
  policy = 3,
  eval = 4,
  ratio = 5,
  fixture = 6,
};

/// Seedable 64-bit generator. Distribution helpers are written out by hand so
/// draws are bit-identical across standard library implementations.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0);
  Rng(std::uint64_t seed, Stream stream);

  /// Independent child generator; `key` selects the child deterministically.
  Rng split(std::uint64_t key) const;

  result_type operator()() { return engine_(); }
  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();
  /// Index drawn with probability proportional to `weights` (must be >= 0).
  int categorical(std::span<const double> weights);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// SplitMix64 finaliser; used to derive stream seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace natgrad
