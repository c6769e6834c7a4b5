// rng.hpp — counter-based random numbers (Philox4x64-10) with per-trajectory
// substreams. Counter-based generation makes ensembles order-independent:
// trajectory i always sees the stream keyed by child_seed(master, i), no
// matter how many workers run or in which order they pick up work.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace qsr {

/// splitmix64 finalizer — the published mixing function behind substreams.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Child-stream key for one trajectory: mix(master_seed, trajectory_index).
inline std::uint64_t child_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(master ^ splitmix64(index + 0x9E3779B97F4A7C15ull));
}

/// Philox4x64-10 block cipher driven as a counter-based generator.
/// Output word order matches numpy.random.Philox (verified in tests).
class philox4x64 {
 public:
  explicit philox4x64(std::uint64_t key0, std::uint64_t key1 = 0)
      : key_{key0, key1} {}

  static std::array<std::uint64_t, 4> block(std::array<std::uint64_t, 4> x,
                                            std::array<std::uint64_t, 2> k) {
    for (int round = 0; round < 10; ++round) {
      const auto hi_lo0 = mulhilo(kMul0, x[0]);
      const auto hi_lo1 = mulhilo(kMul1, x[2]);
      x = {hi_lo1[0] ^ x[1] ^ k[0], hi_lo1[1], hi_lo0[0] ^ x[3] ^ k[1],
           hi_lo0[1]};
      k[0] += kWeyl0;
      k[1] += kWeyl1;
    }
    return x;
  }

  std::uint64_t next_u64() {
    if (have_ == 0) {
      // the counter advances before each block, so block k is generated at
      // counter value k + 1 — the same convention numpy drives this cipher
      // with, keeping whole streams comparable across implementations
      advance_counter();
      buf_ = block(ctr_, key_);
      have_ = 4;
    }
    return buf_[4 - have_--];
  }

  /// Uniform in the open interval (0, 1); safe as a log() argument.
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal via Box–Muller (second member of each pair cached).
  double gaussian() {
    if (cached_) {
      cached_ = false;
      return cache_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * kPi * u2;
    cache_ = r * std::sin(theta);
    cached_ = true;
    return r * std::cos(theta);
  }

  /// Wiener increment over a step of length dt: N(0, dt).
  double wiener_increment(double dt) { return gaussian() * std::sqrt(dt); }

 private:
  static constexpr std::uint64_t kMul0 = 0xD2E7470EE14C6C93ull;
  static constexpr std::uint64_t kMul1 = 0xCA5A826395121157ull;
  static constexpr std::uint64_t kWeyl0 = 0x9E3779B97F4A7C15ull;
  static constexpr std::uint64_t kWeyl1 = 0xBB67AE8584CAA73Bull;
  static constexpr double kPi = 3.141592653589793238462643383279502884;

  static std::array<std::uint64_t, 2> mulhilo(std::uint64_t a,
                                              std::uint64_t b) {
    const unsigned __int128 p =
        static_cast<unsigned __int128>(a) * static_cast<unsigned __int128>(b);
    return {static_cast<std::uint64_t>(p >> 64),
            static_cast<std::uint64_t>(p)};
  }

  void advance_counter() {
    if (++ctr_[0] == 0)
      if (++ctr_[1] == 0)
        if (++ctr_[2] == 0) ++ctr_[3];
  }

  std::array<std::uint64_t, 4> ctr_{0, 0, 0, 0};
  std::array<std::uint64_t, 2> key_;
  std::array<std::uint64_t, 4> buf_{};
  int have_ = 0;
  bool cached_ = false;
  double cache_ = 0.0;
};

}  // namespace qsr
