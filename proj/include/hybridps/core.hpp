// Copyright 2026 The HybridPS Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hybridps/errors.hpp"

namespace hybridps {

// 64->64 bit avalanche mixer (splitmix64 finalizer). The constants below are
// part of the checkpoint and wire compatibility contract: a checkpointed PS
// must re-serve identical shards after restart, so they must never change.
// See docs/wire.md.
inline constexpr uint64_t kMixGamma = 0x9e3779b97f4a7c15ULL;
inline constexpr uint64_t kMixMul1 = 0xbf58476d1ce4e5b9ULL;
inline constexpr uint64_t kMixMul2 = 0x94d049bb133111ebULL;

constexpr uint64_t mix64(uint64_t x) noexcept {
  x += kMixGamma;
  x ^= x >> 30;
  x *= kMixMul1;
  x ^= x >> 27;
  x *= kMixMul2;
  x ^= x >> 31;
  return x;
}

// Deterministic pseudo-random stream built on the same mixer. std::
// distributions are implementation-defined, so everything that must be
// byte-reproducible (datasets, lazy embedding init) draws from this instead.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t r = mix64(state_);
    state_ += kMixGamma;
    return r;
  }

  // Uniform in [0, 1), 53 bits of precision.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n). Modulo bias is negligible for n << 2^64.
  uint64_t uniform_u64(uint64_t n) {
    if (n == 0) throw PreconditionError("uniform_u64: n must be positive");
    return next_u64() % n;
  }

  bool bernoulli(double p) { return uniform01() < p; }

  // Box-Muller; the spare is cached so the stream stays deterministic.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform01();  // (0, 1], keeps log() finite
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Sample identity: embedding-worker rank in the top byte, per-worker
// monotonic counter in the low 56 bits. The rank byte is what lets a NN
// worker route a pull or gradient back to the worker that buffered the
// sample's ID features.
struct SampleId {
  uint64_t raw = 0;

  static constexpr int kRankBits = 8;
  static constexpr int kCounterBits = 56;
  static constexpr uint64_t kCounterMask = (uint64_t(1) << kCounterBits) - 1;

  friend auto operator<=>(const SampleId&, const SampleId&) = default;
};

inline SampleId encode_sample_id(uint32_t rank, uint64_t counter) {
  if (rank > 0xff) {
    throw PreconditionError("encode_sample_id: rank " + std::to_string(rank) +
                            " does not fit in 8 bits");
  }
  if (counter > SampleId::kCounterMask) {
    throw PreconditionError("encode_sample_id: counter overflows 56 bits");
  }
  return SampleId{(static_cast<uint64_t>(rank) << SampleId::kCounterBits) | counter};
}

constexpr uint32_t decode_rank(SampleId id) noexcept {
  return static_cast<uint32_t>(id.raw >> SampleId::kCounterBits);
}

constexpr uint64_t decode_counter(SampleId id) noexcept {
  return id.raw & SampleId::kCounterMask;
}

// One sample's sparse side: per feature group, a list of 64-bit IDs.
// Groups may be empty; duplicates are legal and preserved.
struct IdFeatures {
  std::vector<std::vector<uint64_t>> groups;
};

// One sample's dense side.
struct NonIdFeatures {
  std::vector<float> dense;
};

struct Label {
  float y = 0.0f;  // binary: 0.0 or 1.0
};

// Deterministic feature-id -> shard routing. A fixed avalanche mixer modulo
// shard_count stands in for the shuffled-uniform partition: equivalent load
// behavior, O(1) memory, stable across process restarts.
inline uint32_t route_shard(uint64_t id, uint32_t shard_count) {
  if (shard_count == 0) {
    throw PreconditionError("route_shard: shard_count must be positive");
  }
  return static_cast<uint32_t>(mix64(id) % shard_count);
}

class ShardRouter {
 public:
  explicit ShardRouter(uint32_t shard_count) : shard_count_(shard_count) {
    if (shard_count == 0) {
      throw PreconditionError("ShardRouter: shard_count must be positive");
    }
  }

  uint32_t route(uint64_t id) const noexcept {
    return static_cast<uint32_t>(mix64(id) % shard_count_);
  }

  uint32_t shard_count() const noexcept { return shard_count_; }

 private:
  uint32_t shard_count_;
};

// Shape of the model shared by data generation, workers, and the dense net.
struct ModelConfig {
  uint32_t feature_group_count = 5;
  uint32_t embedding_dim = 16;
  uint32_t non_id_dim = 8;
  std::vector<uint32_t> hidden_dims = {64, 32};

  // Forward aggregation over a feature group's ids.
  enum class Aggregation : uint8_t { kMean = 0, kSum = 1 };
  Aggregation aggregation = Aggregation::kMean;

  uint32_t dense_input_dim() const {
    return feature_group_count * embedding_dim + non_id_dim;
  }
};

// FNV-1a 64. Used for replica-identity hashes and checkpoint checksums.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace hybridps

template <>
struct std::hash<hybridps::SampleId> {
  size_t operator()(hybridps::SampleId id) const noexcept {
    return std::hash<uint64_t>{}(id.raw);
  }
};
