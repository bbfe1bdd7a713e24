#ifndef SDEINFER_RNG_HPP
#define SDEINFER_RNG_HPP

#include <cstdint>
#include <initializer_list>
#include <random>

#include "sdeinfer/linalg.hpp"

namespace sdeinfer {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Random stream with explicit seeding. Sub-streams are derived by hashing a
// key path, so a consumer's draws never depend on how many numbers another
// consumer used (accept/reject decisions, worker scheduling).
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  RngStream derive(std::initializer_list<std::uint64_t> keys) const {
    std::uint64_t h = splitmix64(seed_ ^ 0x5bd1e9955bd1e995ULL);
    for (std::uint64_t k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
    return RngStream(h);
  }

  std::uint64_t seed() const { return seed_; }

  double gaussian() { return normal_(engine_); }

  // Uniform on the open interval (0, 1).
  double uniform() {
    double u;
    do {
      u = std::generate_canonical<double, 53>(engine_);
    } while (u <= 0.0);
    return u;
  }

  Vector gaussian_vector(Eigen::Index n) {
    Vector out(n);
    for (Eigen::Index i = 0; i < n; ++i) out(i) = gaussian();
    return out;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace sdeinfer

#endif  // SDEINFER_RNG_HPP
