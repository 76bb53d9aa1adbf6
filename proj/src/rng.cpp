// SPDX-License-Identifier: Apache-2.0
#include "pkt/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "pkt/error.hpp"

namespace pkt {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidInput: return "invalid-input";
    case ErrorKind::kRank: return "rank";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kData: return "data";
    case ErrorKind::kState: return "state";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kTraining: return "training";
    case ErrorKind::kSize: return "size";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kStage: return "stage";
  }
  return "unknown";
}

std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Rng::Rng(std::uint64_t seed, std::string_view stream)
    : engine_(seed ^ fnv1a64(stream)) {}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::size_t Rng::below(std::size_t n) {
  require(n > 0, ErrorKind::kInvalidInput, "Rng::below requires n > 0");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  // Rejection sampling over the largest multiple of n.
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<std::size_t>(x % bound);
}

double Rng::normal(double mean, double stddev) {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  return mean + stddev * z;
}

std::vector<std::size_t> Rng::sample_sorted(std::size_t n, std::size_t k) {
  require(k <= n, ErrorKind::kInvalidInput, "cannot sample more items than available");
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  // Partial Fisher-Yates: the first k slots become the sample.
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + below(n - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace pkt
