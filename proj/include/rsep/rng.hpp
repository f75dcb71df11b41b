#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>

namespace rsep {

using Rng = std::mt19937_64;

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent 64-bit seed from a base seed and a path of stream
// labels, e.g. derive_seed(seed, {kEnvStream, env_index}).
inline constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(base);
  for (auto p : path) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> path = {}) {
  const std::uint64_t s = derive_seed(base, path);
  std::seed_seq seq{static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32)};
  return Rng(seq);
}

// Cheap counter-based generator; used where a fresh stream per (episode,
// aircraft, time) key is needed and seeding a Mersenne twister would dominate.
class CounterRng {
 public:
  using result_type = std::uint64_t;
  explicit constexpr CounterRng(std::uint64_t key) : state_(key) {}
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  constexpr result_type operator()() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return splitmix64(state_);
  }

 private:
  std::uint64_t state_;
};

// Uniform double in [0, 1) with 53 random bits; identical across standard
// library implementations, unlike std::uniform_real_distribution.
template <class Urbg>
double uniform01(Urbg& rng) {
  const std::uint64_t bits = static_cast<std::uint64_t>(rng()) >> 11;
  return static_cast<double>(bits) * 0x1.0p-53;
}

// Stream labels.
enum Stream : std::uint64_t {
  kInitStream = 1,
  kEnvStream,
  kTrafficStream,
  kActionStream,
  kCorruptionStream,
  kUpdateStream,
  kCurriculumStream,
  kEvalStream,
  kProbeStream,
  kTrialStream,
};

}  // namespace rsep
