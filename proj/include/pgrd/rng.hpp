// Counter-based random streams (Philox4x32-10).
//
// A stream is identified by (seed, chain of substream names). Draws depend
// only on that identity and the draw index, never on program order, so
// M-trajectory sampling and re-runs are bit-reproducible. Substreams are
// derived by hashing the name into the key, e.g.
//   Rng root(seed, "train");
//   Rng eps = root.substream("eps/" + std::to_string(step));
#pragma once

#include "pgrd/tensor.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace pgrd {

namespace detail {

inline std::uint64_t fnv1a64(std::string_view text, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// splitmix64 finalizer; decorrelates derived keys.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace detail

class Rng {
 public:
  Rng(std::uint64_t seed, std::string_view stream) {
    const std::uint64_t h = detail::fnv1a64(stream);
    key_[0] = static_cast<std::uint32_t>(detail::mix64(seed ^ h));
    key_[1] = static_cast<std::uint32_t>(detail::mix64(seed ^ h) >> 32);
    key64_hi_ = detail::mix64(h + seed * 0x9e3779b97f4a7c15ull);
  }

  // Independent stream derived from this one; draw position resets to zero.
  Rng substream(std::string_view name) const {
    Rng child = *this;
    const std::uint64_t h = detail::fnv1a64(name, key64_hi_);
    child.key_[0] = static_cast<std::uint32_t>(detail::mix64(h ^ key_[0]));
    child.key_[1] = static_cast<std::uint32_t>(detail::mix64(h ^ key_[1]) >> 32);
    child.key64_hi_ = detail::mix64(h);
    child.counter_ = {0, 0, 0, 0};
    child.block_pos_ = 4;
    child.have_spare_normal_ = false;
    return child;
  }

  std::uint32_t next_u32() {
    if (block_pos_ == 4) {
      block_ = philox_block(counter_, key_);
      increment_counter();
      block_pos_ = 0;
    }
    return block_[block_pos_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t lo = next_u32();
    const std::uint64_t hi = next_u32();
    return (hi << 32) | lo;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Standard normal via Box-Muller; second value of each pair is cached.
  double normal() {
    if (have_spare_normal_) {
      have_spare_normal_ = false;
      return spare_normal_;
    }
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0,1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_normal_ = r * std::sin(a);
    have_spare_normal_ = true;
    return r * std::cos(a);
  }

  template <typename S>
  void fill_normal(Tensor<S>& t) {
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(normal());
  }

  template <typename S>
  Tensor<S> normal_tensor(Shape shape) {
    Tensor<S> t(std::move(shape));
    fill_normal(t);
    return t;
  }

  template <typename S>
  void fill_uniform(Tensor<S>& t, double lo, double hi) {
    for (std::int64_t i = 0; i < t.size(); ++i) {
      t[i] = static_cast<S>(lo + (hi - lo) * uniform());
    }
  }

 private:
  static std::array<std::uint32_t, 4> philox_block(std::array<std::uint32_t, 4> ctr,
                                                   std::array<std::uint32_t, 2> key) {
    constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
    constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * ctr[0];
      const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * ctr[2];
      const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
      const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
      const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
      const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
      key[0] += kW0;
      key[1] += kW1;
    }
    return ctr;
  }

  void increment_counter() {
    if (++counter_[0] == 0 && ++counter_[1] == 0 && ++counter_[2] == 0) ++counter_[3];
  }

  std::array<std::uint32_t, 2> key_{};
  std::uint64_t key64_hi_ = 0;  // extra key entropy folded into substream derivation
  std::array<std::uint32_t, 4> counter_{};
  std::array<std::uint32_t, 4> block_{};
  int block_pos_ = 4;
  bool have_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

}  // namespace pgrd
