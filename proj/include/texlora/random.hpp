#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "texlora/tensor.hpp"

namespace texlora {

/// Seeded generator with distribution code that does not depend on the
/// standard library implementation, so streams are reproducible everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  Tensor uniform_tensor(Shape shape, double lo, double hi) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
  }

  Tensor normal_tensor(Shape shape, double stddev = 1.0) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = stddev * normal();
    return Tensor(std::move(shape), std::move(v));
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace texlora
