#include "oslsel/rng.hpp"

#include "oslsel/errors.hpp"

#include <cmath>
#include <numbers>

namespace oslsel {

RandomStream::RandomStream(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    0x6f736c73u};
  engine_.seed(seq);
}

double RandomStream::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double RandomStream::uniform_open_low() { return 1.0 - uniform(); }

double RandomStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform_open_low();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

int RandomStream::categorical(const Eigen::Ref<const Vector>& weights) {
  const double total = weights.sum();
  if (!(total > 0.0) || (weights.array() < 0.0).any()) {
    throw ValidationError("categorical weights must be nonnegative with a positive sum");
  }
  const double u = uniform() * total;
  double acc = 0.0;
  for (Eigen::Index k = 0; k < weights.size(); ++k) {
    acc += weights(k);
    if (u < acc) return static_cast<int>(k);
  }
  for (Eigen::Index k = weights.size() - 1; k >= 0; --k) {
    if (weights(k) > 0.0) return static_cast<int>(k);
  }
  return 0;
}

Vector RandomStream::normal_vector(Eigen::Index size) {
  Vector out(size);
  for (Eigen::Index i = 0; i < size; ++i) out(i) = normal();
  return out;
}

}  // namespace oslsel
