#pragma once

#include "oslsel/types.hpp"

#include <cstdint>
#include <random>

namespace oslsel {

/// Deterministic random stream identified by (seed, stream). Two streams with
/// different ids are independent for practical purposes, and a stream yields
/// the same draws no matter which thread consumes it.
///
/// Uniforms use the top 53 bits of a 64-bit Mersenne twister; normals use
/// Box-Muller. Neither depends on the standard library's distribution
/// implementations, so draws are identical across toolchains.
class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint64_t stream);

  /// Uniform on [0, 1).
  double uniform();
  /// Uniform on (0, 1].
  double uniform_open_low();
  double normal();
  /// Index drawn with probabilities proportional to `weights`.
  int categorical(const Eigen::Ref<const Vector>& weights);
  Vector normal_vector(Eigen::Index size);

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace oslsel
