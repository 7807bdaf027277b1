#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace cbnn {

/// Seeded random stream. All stochastic code in the library draws from an
/// Rng passed in by the caller, so a run is a pure function of its seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }
  std::vector<double> normals(std::size_t n);

  /// Independent child stream; successive calls give different children.
  Rng split();

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Deterministic seed derivation (splitmix64 finalizer) for sub-experiments.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace cbnn
