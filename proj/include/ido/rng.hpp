#pragma once

// Counter-based random numbers. Every Gaussian in a path batch is a pure
// function of (seed, path, step, component), so results do not depend on how
// paths are split across chunks or workers.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace ido::rng {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Derives an independent seed for a sub-stream (iteration, repetition, ...).
inline std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
}

/// Philox4x32-10 (Salmon et al., SC'11).
class Philox {
 public:
  using Counter = std::array<std::uint32_t, 4>;

  explicit Philox(std::uint64_t seed)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)} {}

  Counter operator()(Counter ctr) const {
    std::array<std::uint32_t, 2> key = key_;
    for (int round = 0; round < 10; ++round) {
      ctr = single_round(ctr, key);
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    return ctr;
  }

 private:
  static constexpr std::uint32_t kMul0 = 0xD2511F53;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85;

  static Counter single_round(const Counter& c, const std::array<std::uint32_t, 2>& k) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * c[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * c[2];
    return {static_cast<std::uint32_t>(p1 >> 32) ^ c[1] ^ k[0], static_cast<std::uint32_t>(p1),
            static_cast<std::uint32_t>(p0 >> 32) ^ c[3] ^ k[1], static_cast<std::uint32_t>(p0)};
  }

  std::array<std::uint32_t, 2> key_;
};

// 53-bit uniform in (0, 1].
inline double to_unit_open0(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t bits = ((static_cast<std::uint64_t>(hi) << 32) | lo) >> 11;
  return (static_cast<double>(bits) + 1.0) * 0x1.0p-53;
}

/// Stream tags keep noise, initial conditions and parameter init apart.
enum class Stream : std::uint32_t { brownian = 0, initial = 1, init_weights = 2, uniform = 3 };

/// Two standard normals for (path, step, pair) by Box-Muller.
inline std::array<double, 2> normal_pair(const Philox& gen, std::uint64_t path, std::uint32_t step,
                                         std::uint32_t pair, Stream stream = Stream::brownian) {
  const auto out = gen({static_cast<std::uint32_t>(path),
                        static_cast<std::uint32_t>(path >> 32) ^ (static_cast<std::uint32_t>(stream) << 24),
                        step, pair});
  const double u1 = to_unit_open0(out[0], out[1]);
  const double u2 = to_unit_open0(out[2], out[3]);
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  return {r * std::cos(angle), r * std::sin(angle)};
}

/// Uniform in (0, 1] for (index, step) on the given stream.
inline double uniform(const Philox& gen, std::uint64_t index, std::uint32_t step,
                      Stream stream = Stream::uniform) {
  const auto out = gen({static_cast<std::uint32_t>(index),
                        static_cast<std::uint32_t>(index >> 32) ^ (static_cast<std::uint32_t>(stream) << 24),
                        step, 0});
  return to_unit_open0(out[0], out[1]);
}

}  // namespace ido::rng
