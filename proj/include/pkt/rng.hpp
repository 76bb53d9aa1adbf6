// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace pkt {

// Deterministic random source. The engine output is fixed by the standard;
// the distributions are implemented here so results do not depend on the
// standard library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t seed, std::string_view stream);

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform();

  // Uniform integer in [0, n). n must be positive.
  std::size_t below(std::size_t n);

  double normal(double mean = 0.0, double stddev = 1.0);

  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(values[i - 1], values[j]);
    }
  }

  // k distinct indices from [0, n), ascending.
  std::vector<std::size_t> sample_sorted(std::size_t n, std::size_t k);

 private:
  std::mt19937_64 engine_;
};

// Stable 64-bit FNV-1a, used for seed streams and config fingerprints.
std::uint64_t fnv1a64(std::string_view data);

}  // namespace pkt
