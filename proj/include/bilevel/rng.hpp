#ifndef BILEVEL_RNG_HPP
#define BILEVEL_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>

#include <Eigen/Dense>

#include "bilevel/common.hpp"

namespace bilevel {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seedable generator; split(k) derives an independent child stream so that
/// per-iteration and per-sample draws do not depend on evaluation order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t st = seed;
    engine_.seed(splitmix64(st));
  }

  Rng split(std::uint64_t key) const {
    std::uint64_t st = seed_ ^ (0xd1b54a32d192ed03ULL * (key + 1));
    return Rng(splitmix64(st));
  }

  std::uint64_t seed() const { return seed_; }
  std::mt19937_64& engine() { return engine_; }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }

  Vec normal_vec(Eigen::Index n) {
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal();
    return v;
  }

  /// Uniform point in the closed Euclidean ball B(center, radius).
  Vec ball(const Vec& center, double radius) {
    const auto n = center.size();
    Vec d = normal_vec(n);
    double nd = d.norm();
    while (nd == 0.0) {
      d = normal_vec(n);
      nd = d.norm();
    }
    const double r = radius * std::pow(uniform(), 1.0 / static_cast<double>(n));
    return center + (r / nd) * d;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace bilevel

#endif  // BILEVEL_RNG_HPP
