#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "dnflow/common.hpp"

namespace dnflow {

// A point in {0,1}^D. Used for observations x, base samples y and per-layer
// transform parameters u.
struct BitVector {
  std::vector<std::uint8_t> bits;

  BitVector() = default;
  explicit BitVector(int d) : bits(static_cast<std::size_t>(d), 0) {}
  BitVector(std::initializer_list<int> init) {
    bits.reserve(init.size());
    for (int b : init) {
      require(b == 0 || b == 1, "BitVector: entry not in {0,1}");
      bits.push_back(static_cast<std::uint8_t>(b));
    }
  }

  int size() const { return static_cast<int>(bits.size()); }
  std::uint8_t operator[](int i) const { return bits[static_cast<std::size_t>(i)]; }
  std::uint8_t& operator[](int i) { return bits[static_cast<std::size_t>(i)]; }
  bool operator==(const BitVector& o) const { return bits == o.bits; }

  // Real-valued view for feeding networks.
  std::vector<double> to_real() const {
    return std::vector<double>(bits.begin(), bits.end());
  }

  static BitVector from_index(std::uint64_t index, int d) {
    BitVector v(d);
    for (int i = 0; i < d; ++i) v[i] = static_cast<std::uint8_t>((index >> i) & 1u);
    return v;
  }
  std::uint64_t to_index() const {
    std::uint64_t idx = 0;
    for (int i = 0; i < size(); ++i)
      idx |= static_cast<std::uint64_t>(bits[static_cast<std::size_t>(i)]) << i;
    return idx;
  }
};

}  // namespace dnflow
