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
#include <cstdint>
#include <cstring>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "hybridps/core.hpp"
#include "hybridps/errors.hpp"

namespace hybridps {

// ---------------------------------------------------------------------------
// IEEE-754 binary16 conversion, round-to-nearest-even. Bit manipulation so the
// wire format is identical on every host regardless of FP16 hardware support.
// ---------------------------------------------------------------------------

inline uint16_t float_to_half_bits(float f) {
  uint32_t x;
  std::memcpy(&x, &f, sizeof(x));

  uint32_t sign = (x >> 16) & 0x8000u;
  uint32_t exp = (x >> 23) & 0xffu;
  uint32_t mant = x & 0x7fffffu;

  if (exp == 0xff) {  // inf or nan
    return static_cast<uint16_t>(sign | 0x7c00u | (mant ? 0x0200u : 0));
  }

  // Re-bias 127 -> 15.
  int32_t e = static_cast<int32_t>(exp) - 127 + 15;

  if (e >= 0x1f) {  // overflow -> inf
    return static_cast<uint16_t>(sign | 0x7c00u);
  }

  if (e <= 0) {
    // Subnormal half (or zero). Shift the full 24-bit significand right so
    // that rounding happens once, at the final bit position.
    if (e < -10) return static_cast<uint16_t>(sign);  // underflow -> +-0
    uint32_t full = mant | 0x800000u;                 // implicit leading 1
    uint32_t shift = static_cast<uint32_t>(14 - e);   // 14..24
    uint32_t half_mant = full >> shift;
    uint32_t rem = full & ((1u << shift) - 1);
    uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half_mant & 1u))) half_mant++;
    return static_cast<uint16_t>(sign | half_mant);  // carry into exp=1 is correct
  }

  // Normal half: 23-bit mantissa -> 10 bits, round to nearest even.
  uint32_t half_mant = mant >> 13;
  uint32_t rem = mant & 0x1fffu;
  uint16_t h = static_cast<uint16_t>(sign | (static_cast<uint32_t>(e) << 10) | half_mant);
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) h++;  // carry may bump exponent: correct
  return h;
}

inline float half_bits_to_float(uint16_t h) {
  uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
  uint32_t exp = (h >> 10) & 0x1fu;
  uint32_t mant = h & 0x3ffu;
  uint32_t x;

  if (exp == 0) {
    if (mant == 0) {
      x = sign;  // +-0
    } else {
      // Subnormal half: renormalize into a float.
      int e = -1;
      uint32_t m = mant;
      do {
        e++;
        m <<= 1;
      } while ((m & 0x400u) == 0);
      x = sign | (static_cast<uint32_t>(127 - 15 - e) << 23) | ((m & 0x3ffu) << 13);
    }
  } else if (exp == 0x1f) {
    x = sign | 0x7f800000u | (mant << 13);
  } else {
    x = sign | ((exp - 15 + 127) << 23) | (mant << 13);
  }

  float f;
  std::memcpy(&f, &x, sizeof(f));
  return f;
}

// ---------------------------------------------------------------------------
// Lossless batch-index compression. A batch of per-sample ID sets becomes one
// postings list per feature group keyed by unique id; sample indices fit in
// uint16 because the batch size is capped at 65535. Per-sample id lists are
// sets: membership survives the roundtrip, duplicates within a sample do not
// exist upstream.
// ---------------------------------------------------------------------------

struct GroupPostings {
  std::vector<uint64_t> unique_ids;             // ascending
  std::vector<std::vector<uint16_t>> postings;  // parallel to unique_ids, each ascending
};

struct CompressedIndices {
  uint16_t batch_size = 0;
  std::vector<GroupPostings> groups;
};

inline CompressedIndices compress_indices(const std::vector<IdFeatures>& batch) {
  if (batch.size() > 65535) {
    throw PreconditionError("compress_indices: batch size " + std::to_string(batch.size()) +
                            " overflows uint16 sample indices");
  }
  CompressedIndices out;
  out.batch_size = static_cast<uint16_t>(batch.size());
  if (batch.empty()) return out;

  size_t group_count = batch.front().groups.size();
  out.groups.resize(group_count);
  for (size_t g = 0; g < group_count; ++g) {
    // id -> sample indices; std::map keeps ids ascending, sample loop keeps
    // postings ascending, the set collapses within-sample duplicates.
    std::map<uint64_t, std::vector<uint16_t>> acc;
    for (size_t s = 0; s < batch.size(); ++s) {
      if (batch[s].groups.size() != group_count) {
        throw PreconditionError("compress_indices: ragged group count within batch");
      }
      std::set<uint64_t> uniq(batch[s].groups[g].begin(), batch[s].groups[g].end());
      for (uint64_t id : uniq) {
        acc[id].push_back(static_cast<uint16_t>(s));
      }
    }
    GroupPostings& gp = out.groups[g];
    gp.unique_ids.reserve(acc.size());
    gp.postings.reserve(acc.size());
    for (auto& [id, samples] : acc) {
      gp.unique_ids.push_back(id);
      gp.postings.push_back(std::move(samples));
    }
  }
  return out;
}

// Inverse of compress_indices. Per-sample id lists come back in canonical
// ascending order.
inline std::vector<IdFeatures> decompress_indices(const CompressedIndices& c,
                                                  uint16_t batch_size) {
  if (c.batch_size != batch_size) {
    throw ProtocolError("decompress_indices: batch size mismatch");
  }
  std::vector<IdFeatures> out(batch_size);
  for (auto& s : out) s.groups.resize(c.groups.size());
  for (size_t g = 0; g < c.groups.size(); ++g) {
    const GroupPostings& gp = c.groups[g];
    for (size_t u = 0; u < gp.unique_ids.size(); ++u) {
      for (uint16_t s : gp.postings[u]) {
        if (s >= batch_size) {
          throw ProtocolError("decompress_indices: posting index " + std::to_string(s) +
                              " >= batch size " + std::to_string(batch_size));
        }
        out[s].groups[g].push_back(gp.unique_ids[u]);
      }
    }
  }
  // unique_ids ascend and postings append in id order, so every per-sample
  // list lands already sorted ascending.
  return out;
}

// Serialized footprint in bytes: ids as u64, postings as u16, plus one u64
// unique count per group and one u32 length per postings list.
inline size_t compressed_indices_bytes(const CompressedIndices& c) {
  size_t n = sizeof(uint16_t);
  for (const auto& gp : c.groups) {
    n += sizeof(uint64_t);
    n += gp.unique_ids.size() * sizeof(uint64_t);
    for (const auto& p : gp.postings) {
      n += sizeof(uint32_t);
      n += p.size() * sizeof(uint16_t);
    }
  }
  return n;
}

inline size_t raw_indices_bytes(const std::vector<IdFeatures>& batch) {
  size_t n = 0;
  for (const auto& s : batch) {
    for (const auto& grp : s.groups) n += grp.size() * sizeof(uint64_t);
  }
  return n;
}

// ---------------------------------------------------------------------------
// Lossy value compression: scale a block by kappa / ||v||_inf, convert to
// binary16. Scaled magnitudes never exceed kappa, so with kappa <= 32768 the
// conversion cannot overflow and the roundtrip error is bounded by
// ||v||_inf * 2^-11.
// ---------------------------------------------------------------------------

inline constexpr float kDefaultKappa = 1024.0f;

struct CompressedBlock {
  float scale = 1.0f;  // kappa / ||v||_inf; 1.0 for the all-zero block
  uint32_t block_len = 0;
  std::vector<uint16_t> payload;
};

inline CompressedBlock compress_values(const std::vector<float>& v,
                                       float kappa = kDefaultKappa) {
  if (kappa <= 0.0f) throw PreconditionError("compress_values: kappa must be positive");
  float max_abs = 0.0f;
  for (float x : v) {
    if (!std::isfinite(x)) throw PreconditionError("compress_values: non-finite input");
    max_abs = std::max(max_abs, std::fabs(x));
  }
  CompressedBlock out;
  out.block_len = static_cast<uint32_t>(v.size());
  out.payload.resize(v.size());
  if (max_abs == 0.0f) {
    out.scale = 1.0f;
    for (size_t i = 0; i < v.size(); ++i) out.payload[i] = float_to_half_bits(0.0f);
    return out;
  }
  out.scale = kappa / max_abs;
  for (size_t i = 0; i < v.size(); ++i) {
    out.payload[i] = float_to_half_bits(v[i] * out.scale);
  }
  return out;
}

inline std::vector<float> decompress_values(const CompressedBlock& c) {
  if (c.payload.size() != c.block_len) {
    throw ProtocolError("decompress_values: payload length does not match block_len");
  }
  if (!(c.scale > 0.0f) || !std::isfinite(c.scale)) {
    throw ProtocolError("decompress_values: bad scale");
  }
  std::vector<float> out(c.block_len);
  for (size_t i = 0; i < c.block_len; ++i) {
    float widened = half_bits_to_float(c.payload[i]);
    if (!std::isfinite(widened)) {
      throw ProtocolError("decompress_values: non-finite payload value");
    }
    out[i] = widened / c.scale;
  }
  return out;
}

}  // namespace hybridps
