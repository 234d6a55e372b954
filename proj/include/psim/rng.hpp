#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace psim {

// Seeded RNG with named sub-streams. Every component that needs randomness
// derives its own stream from the master seed and a label ("data", "init",
// "sgld-chain-3", ...), so adding a consumer never shifts another one's draws.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(mix(seed)) {}

  static uint64_t substream_seed(uint64_t master, std::string_view name) {
    // FNV-1a over the label, folded into the master seed.
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : name) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return mix(master ^ h);
  }

  static Rng substream(uint64_t master, std::string_view name) {
    return Rng(substream_seed(master, name));
  }

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    // Fresh distribution per call: no hidden pair cache, so interleaved
    // consumers stay reproducible.
    return mean + stddev * std::normal_distribution<double>(0.0, 1.0)(engine_);
  }

  uint64_t next_u64() { return engine_(); }

  // Uniform integer in [0, n), n >= 1.
  uint64_t below(uint64_t n) {
    return std::uniform_int_distribution<uint64_t>(0, n - 1)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  static uint64_t mix(uint64_t x) {
    // splitmix64 finalizer; spreads low-entropy seeds over the whole state.
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace psim
