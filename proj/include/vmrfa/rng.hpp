#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace vmrfa {

namespace detail {

inline std::uint64_t fnv1a(const char* s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (; *s != '\0'; ++s) {
    h ^= static_cast<unsigned char>(*s);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

// Deterministic counter-free generator (xoshiro256**). Distribution sampling
// is implemented here rather than with std:: distributions so that sequences
// are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = detail::splitmix64(sm);
  }

  // Derives an independent stream from a seed and an arbitrary list of salts,
  // e.g. Rng::stream(seed, epoch, sample_index).
  template <typename... Salts>
  static Rng stream(std::uint64_t seed, Salts... salts) {
    std::uint64_t state = seed;
    (void)detail::splitmix64(state);
    ((state ^= detail::splitmix64(state) + static_cast<std::uint64_t>(salts)), ...);
    return Rng(detail::splitmix64(state));
  }

  std::uint64_t u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  std::uint32_t u32() { return static_cast<std::uint32_t>(u64() >> 32); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  float uniform_f() { return static_cast<float>(uniform()); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) { return n ? u64() % n : 0; }

  bool coin() { return (u64() & 1u) != 0; }

  // Box-Muller; one spare value cached between calls.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  float normal_f(float mean = 0.0f, float stddev = 1.0f) {
    return static_cast<float>(normal(mean, stddev));
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t s_[4] = {};
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace vmrfa
