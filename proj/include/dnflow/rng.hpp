#pragma once

// Counter-based random streams. A stream is a pure function of its key and a
// draw index, so sampling results do not depend on scheduling, batch
// partitioning or iteration order. Substreams are derived by hashing in a
// purpose tag and indices (example, layer, step).

#include <cstdint>
#include <string_view>

namespace dnflow {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace detail

class RngStream {
 public:
  RngStream() = default;
  explicit RngStream(std::uint64_t key) : key_(key) {}

  static RngStream seeded(std::uint64_t master_seed) {
    return RngStream(detail::splitmix64(master_seed ^ 0x6a09e667f3bcc908ULL));
  }

  RngStream derive(std::uint64_t index) const {
    return RngStream(detail::splitmix64(key_ ^ detail::splitmix64(index + 1)));
  }

  RngStream derive(std::string_view tag) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : tag) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return RngStream(detail::splitmix64(key_ ^ h));
  }

  // Pure draws, addressable by index.
  std::uint64_t bits_at(std::uint64_t index) const {
    return detail::splitmix64(key_ + 0x9e3779b97f4a7c15ULL * (index + 1));
  }
  double uniform_at(std::uint64_t index) const {
    return static_cast<double>(bits_at(index) >> 11) * 0x1.0p-53;
  }
  bool bernoulli_at(std::uint64_t index, double p) const {
    return uniform_at(index) < p;
  }

  // Sequential convenience over the same address space.
  std::uint64_t next_bits() { return bits_at(counter_++); }
  double next_uniform() { return uniform_at(counter_++); }
  bool next_bernoulli(double p) { return next_uniform() < p; }
  double next_symmetric(double scale) {
    return (2.0 * next_uniform() - 1.0) * scale;
  }

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace dnflow
