#ifndef RFION_RNG_HPP
#define RFION_RNG_HPP

#include <cstdint>
#include <random>

namespace rfion {

using Rng = std::mt19937_64;

/// Stage identifiers used when splitting a master seed.
enum class Stage : std::uint32_t {
  dynamics = 1,
  noise = 2,
  transient = 3,
  control = 4,
  sampling = 5,
  calibration = 6,
  bootstrap = 7,
  resolution = 8,
  fidelity = 9,
};

/// splitmix64 finalizer; a bijection on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Per-cycle seed from (master, stage, cycle).
///
/// For a fixed master seed the map is injective over stage < 2^24 and
/// cycle < 2^40: the key is packed without overlap, offset by a master-derived
/// constant (mod 2^64), then passed through the mix64 bijection.
constexpr std::uint64_t seed_fanout(std::uint64_t master, std::uint64_t stage,
                                    std::uint64_t cycle) noexcept {
  const std::uint64_t key = (stage << 40) ^ (cycle & ((std::uint64_t{1} << 40) - 1));
  return mix64(mix64(master) + key);
}

constexpr std::uint64_t seed_fanout(std::uint64_t master, Stage stage,
                                    std::uint64_t cycle) noexcept {
  return seed_fanout(master, static_cast<std::uint64_t>(stage), cycle);
}

inline double exponential_draw(Rng& rng, double rate) {
  return std::exponential_distribution<double>(rate)(rng);
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace rfion

#endif  // RFION_RNG_HPP
