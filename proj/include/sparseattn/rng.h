#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "sparseattn/tensor.h"

namespace sparseattn {

// xoshiro256** (Blackman & Vigna) seeded by expanding a 64-bit seed with
// SplitMix64 (increment 0x9e3779b97f4a7c15, finalizer multipliers
// 0xbf58476d1ce4e5b9 / 0x94d049bb133111eb). The raw 64-bit stream is
// bit-identical on every platform. Derived real-valued draws go through libm
// (log, cos, sqrt) and are reproducible wherever libm is correctly rounded.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer on [0, n); unbiased (rejection on the top range).
  std::size_t uniform_index(std::size_t n);
  // Standard normal via Box-Muller; the second variate is cached.
  double normal();
  // Gamma(shape, 1) via Marsaglia-Tsang; shape < 1 uses the boosting trick.
  double gamma(double shape);
  // Symmetric Dirichlet(alpha) of length n.
  std::vector<double> dirichlet(std::size_t n, double alpha);

  Tensor normal_tensor(std::size_t rows, std::size_t cols, double stddev = 1.0);

  // Independent generator for a numbered sub-stream.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> s_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace sparseattn
