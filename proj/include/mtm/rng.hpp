#pragma once

#include <cstdint>
#include <optional>
#include <string_view>

#include "mtm/tensor.hpp"

namespace mtm {

/// SplitMix64 generator with Box-Muller normals.
///
/// The raw word stream and the word-to-real conversion are bit-exact on every
/// platform. Normals come in pairs; the second of each pair is cached.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1): (word >> 11) * 2^-53.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, bound). Uses rejection so every value is equally likely.
  std::uint64_t below(std::uint64_t bound);

  double normal();

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
  std::optional<double> cached_normal_;
};

/// 64-bit FNV-1a, used to derive per-name seeds.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// I.i.d. standard normal tensor, filled in storage order.
Tensor4 randn(Shape4 shape, Rng& rng);

}  // namespace mtm
