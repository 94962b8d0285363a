#pragma once

#include <cstdint>
#include <string_view>

namespace ovam::prng {

// Counter-based generator used by the toy backend. Every value is a pure
// function of (seed, stream name, step, index) so that any consumer can
// reproduce an array element without replaying a sequential generator:
//
//   key   = mix(mix(mix(seed) ^ fnv1a64(stream)) ^ uint64(step))
//   value = mix(key ^ mix(index))
//   unit  = 2 * (value >> 11) * 2^-53 - 1            in [-1, 1)
//
// where mix is the SplitMix64 finalizer (including its golden-ratio increment).

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

constexpr std::uint64_t stream_key(std::uint64_t seed, std::string_view stream,
                                   std::int64_t step) noexcept {
  std::uint64_t k = splitmix64(seed);
  k = splitmix64(k ^ fnv1a64(stream));
  return splitmix64(k ^ static_cast<std::uint64_t>(step));
}

constexpr std::uint64_t draw_bits(std::uint64_t key, std::uint64_t index) noexcept {
  return splitmix64(key ^ splitmix64(index));
}

/// Uniform double in [-1, 1).
constexpr double draw_signed(std::uint64_t key, std::uint64_t index) noexcept {
  return 2.0 * static_cast<double>(draw_bits(key, index) >> 11) * 0x1.0p-53 - 1.0;
}

/// Uniform double in [0, 1).
constexpr double draw_unit(std::uint64_t key, std::uint64_t index) noexcept {
  return static_cast<double>(draw_bits(key, index) >> 11) * 0x1.0p-53;
}

class CounterStream {
 public:
  constexpr CounterStream(std::uint64_t seed, std::string_view stream, std::int64_t step = 0)
      : key_(stream_key(seed, stream, step)) {}

  constexpr double signed_at(std::uint64_t index) const noexcept { return draw_signed(key_, index); }
  constexpr double unit_at(std::uint64_t index) const noexcept { return draw_unit(key_, index); }
  constexpr std::uint64_t bits_at(std::uint64_t index) const noexcept { return draw_bits(key_, index); }

 private:
  std::uint64_t key_;
};

}  // namespace ovam::prng
