#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stochnorm {

// Seeded random stream with self-contained distribution transforms.
//
// std::mt19937_64 output is fully specified by the standard; the transforms
// below avoid std::*_distribution, whose algorithms differ across standard
// libraries. Two streams with the same seed therefore produce identical
// draws on every platform, which is what makes experiment runs replayable
// byte for byte. Each experiment owns its streams; a stream must not be
// shared across threads.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased uniform integer on [0, n).
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<int64_t>(x % un);
  }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * kPi * uniform();
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Gamma(shape, 1) via the Marsaglia-Tsang squeeze; shape > 0.
  double gamma(double shape) {
    if (!(shape > 0.0)) throw std::invalid_argument("gamma: shape must be > 0");
    if (shape < 1.0) {
      // Boost: Gamma(a) = Gamma(a+1) * U^{1/a}.
      const double g = gamma(shape + 1.0);
      double u;
      do {
        u = uniform();
      } while (u <= 0.0);
      return g * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  // Chi-squared with k degrees of freedom. Small k sums k squared normals
  // exactly; larger k uses 2*Gamma(k/2).
  double chi_squared(int k) {
    if (k < 1) throw std::invalid_argument("chi_squared: k must be >= 1");
    if (k <= kExactChiSquaredTerms) {
      double acc = 0.0;
      for (int i = 0; i < k; ++i) {
        const double z = normal();
        acc += z * z;
      }
      return acc;
    }
    return 2.0 * gamma(0.5 * k);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[uniform_int(i + 1)]);
    }
  }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
    os.precision(17);
    os << spare_;
    return os.str();
  }

  static Rng deserialize(const std::string& s) {
    Rng r(0);
    std::istringstream is(s);
    int spare_flag = 0;
    is >> r.engine_ >> spare_flag >> r.spare_;
    if (!is) throw std::runtime_error("Rng::deserialize: malformed state string");
    r.has_spare_ = spare_flag != 0;
    return r;
  }

  static constexpr int kExactChiSquaredTerms = 64;

 private:
  static constexpr double kPi = 3.14159265358979323846;

  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent child seed, so one experiment seed can fan out to
// streams for data generation, initialization, training and evaluation.
inline uint64_t derive_seed(uint64_t seed, uint64_t stream_tag) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream_tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace stochnorm
