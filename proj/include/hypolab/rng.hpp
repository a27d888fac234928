#pragma once

// Philox4x32-10 counter-based generator and a keyed normal stream on top of it.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace hypolab::rng {

using Counter = std::array<std::uint32_t, 4>;
using Key = std::array<std::uint32_t, 2>;

inline Counter philox4x32_10(Counter ctr, Key key) noexcept {
  constexpr std::uint64_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
  constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = M0 * ctr[0];
    const std::uint64_t p1 = M1 * ctr[2];
    ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
           static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
    key[0] += W0;
    key[1] += W1;
  }
  return ctr;
}

/// Uniform in (0, 1) from 64 random bits; never returns 0 or 1.
inline double to_unit(std::uint32_t hi, std::uint32_t lo) noexcept {
  const std::uint64_t bits = (static_cast<std::uint64_t>(hi) << 32) | lo;
  return (static_cast<double>(bits >> 12) + 0.5) * 0x1.0p-52;
}

/// Stateless map (seed, stream, index) -> N(0, 1). One Philox block yields two
/// normals by Box-Muller, so index i reads block i / 2.
class NormalStream {
public:
  NormalStream(std::uint64_t seed, std::uint64_t stream) noexcept
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)}, stream_(stream) {}

  double operator()(std::uint64_t index) const noexcept {
    const auto pair = block(index >> 1);
    return (index & 1u) ? pair[1] : pair[0];
  }

  /// Both normals of block b (indices 2b and 2b+1).
  std::array<double, 2> block(std::uint64_t b) const noexcept {
    const Counter out = philox4x32_10(
        {static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32), static_cast<std::uint32_t>(stream_),
         static_cast<std::uint32_t>(stream_ >> 32)},
        key_);
    const double u1 = to_unit(out[0], out[1]);
    const double u2 = to_unit(out[2], out[3]);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    return {r * std::cos(a), r * std::sin(a)};
  }

  /// Fills n consecutive normals starting at index `first` (first must be even).
  template <class Out>
  void fill(std::uint64_t first, std::uint64_t n, Out out) const noexcept {
    for (std::uint64_t i = 0; i < n; i += 2) {
      const auto pair = block((first + i) >> 1);
      out[i] = pair[0];
      if (i + 1 < n) out[i + 1] = pair[1];
    }
  }

private:
  Key key_;
  std::uint64_t stream_;
};

/// Stateless map (seed, stream, index) -> U(0, 1), two uniforms per block.
class UniformStream {
public:
  UniformStream(std::uint64_t seed, std::uint64_t stream) noexcept
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)}, stream_(stream) {}

  double operator()(std::uint64_t index) const noexcept {
    const std::uint64_t b = index >> 1;
    const Counter out = philox4x32_10(
        {static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32), static_cast<std::uint32_t>(stream_),
         static_cast<std::uint32_t>(stream_ >> 32)},
        key_);
    return (index & 1u) ? to_unit(out[2], out[3]) : to_unit(out[0], out[1]);
  }

private:
  Key key_;
  std::uint64_t stream_;
};

}  // namespace hypolab::rng
