#pragma once

#include <array>
#include <cstdint>

namespace fen {

/// Philox4x32-10 counter-based generator.
///
/// A stream is identified by (seed, stream id); draw k of a stream is a pure
/// function of (seed, stream id, k), so results do not depend on platform,
/// thread count or on how many other streams were consumed.
class Rng {
 public:
  Rng() : Rng(0, 0) {}
  Rng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  /// Number of 32-bit words consumed so far.
  std::uint64_t position() const { return block_ * 4 + lane_; }

  /// Independent substream; deterministic in (seed, stream, sub).
  Rng split(std::uint64_t sub) const;

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [lo, hi], unbiased.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  /// Standard normal via Box-Muller (no cached second value).
  double normal();
  /// Both outputs of one Box-Muller transform (two independent normals).
  std::array<double, 2> normal_pair();
  bool bernoulli(double p) { return uniform() < p; }

  /// Raw Philox block for a given counter and key.
  static std::array<std::uint32_t, 4> philox(std::array<std::uint32_t, 4> ctr,
                                             std::array<std::uint32_t, 2> key);

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  unsigned lane_ = 4;
  std::array<std::uint32_t, 4> buf_{};
};

/// SplitMix64 finalizer, used to derive stream ids.
std::uint64_t mix64(std::uint64_t x);

}  // namespace fen
