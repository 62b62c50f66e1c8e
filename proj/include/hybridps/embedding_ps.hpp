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

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "hybridps/core.hpp"
#include "hybridps/errors.hpp"
#include "hybridps/lru_store.hpp"

namespace hybridps {

static_assert(std::endian::native == std::endian::little,
              "checkpoint and wire layouts are little-endian and rely on host order");

enum class EmbOptimizer : uint8_t { kAdagrad = 0, kSgd = 1 };

inline constexpr float kAdagradEps = 1e-10f;

struct PsShardConfig {
  uint32_t capacity = 1 << 16;
  uint32_t embedding_dim = 16;
  EmbOptimizer optimizer = EmbOptimizer::kAdagrad;
  uint64_t rng_salt = 0;
};

// One embedding shard: id -> (vector, optimizer state) rows behind an LRU
// store, plus per-id version clocks for staleness accounting.
//
// Versions count training iterations, not raw writes: the first gradient a
// given step applies to an id bumps its version, further same-step gradients
// do not. A short ring of recent bump step-tags per id lets the apply path
// count exactly how many distinct earlier-step updates landed between a read
// and its gradient write-back.
class PsShard {
 public:
  // Step tags are recorded per version bump; the ring depth bounds how far
  // back a write-back can look. Staleness caps are far below this.
  static constexpr uint32_t kTagRing = 16;
  static constexpr uint32_t kNoStep = 0xffffffffu;

  explicit PsShard(const PsShardConfig& cfg)
      : cfg_(cfg), store_(cfg.capacity, cfg.embedding_dim * 2) {
    if (cfg.embedding_dim == 0) throw ConfigError("PsShard: embedding_dim must be positive");
    versions_.resize(cfg.capacity, 0);
    tag_ring_.resize(static_cast<size_t>(cfg.capacity) * kTagRing, kNoStep);
  }

  uint32_t embedding_dim() const { return cfg_.embedding_dim; }
  uint32_t capacity() const { return cfg_.capacity; }
  EmbOptimizer optimizer() const { return cfg_.optimizer; }
  uint64_t rng_salt() const { return cfg_.rng_salt; }

  uint64_t eviction_count() const {
    std::lock_guard<std::mutex> g(mu_);
    return eviction_count_;
  }
  uint64_t miss_count() const {
    std::lock_guard<std::mutex> g(mu_);
    return miss_count_;
  }
  uint64_t clock_reset_count() const {
    std::lock_guard<std::mutex> g(mu_);
    return clock_reset_count_;
  }
  uint64_t stale_epoch_drops() const {
    std::lock_guard<std::mutex> g(mu_);
    return stale_epoch_drops_;
  }
  uint32_t epoch() const {
    std::lock_guard<std::mutex> g(mu_);
    return epoch_;
  }
  uint32_t size() const {
    std::lock_guard<std::mutex> g(mu_);
    return store_.size();
  }

  // Resolves every id: hit returns the stored vector, miss initializes the
  // entry deterministically (uniform in +-1/sqrt(dim), seeded from the id and
  // the shard salt) and returns that. Every touched id becomes most-recent.
  // out_values receives ids.size()*dim floats; out_versions, when non-null,
  // the per-id version at read time.
  void lookup(const std::vector<uint64_t>& ids, float* out_values,
              uint64_t* out_versions = nullptr) {
    std::lock_guard<std::mutex> g(mu_);
    for (size_t i = 0; i < ids.size(); ++i) {
      uint32_t slot = find_or_init(ids[i]);
      std::memcpy(out_values + i * cfg_.embedding_dim, store_.row(slot),
                  cfg_.embedding_dim * sizeof(float));
      if (out_versions) out_versions[i] = versions_[slot];
    }
  }

  // Map-shaped lookup for direct use and tests.
  std::map<uint64_t, std::vector<float>> lookup_map(const std::vector<uint64_t>& ids) {
    std::vector<float> buf(ids.size() * cfg_.embedding_dim);
    lookup(ids, buf.data());
    std::map<uint64_t, std::vector<float>> out;
    for (size_t i = 0; i < ids.size(); ++i) {
      out[ids[i]] = std::vector<float>(buf.begin() + i * cfg_.embedding_dim,
                                       buf.begin() + (i + 1) * cfg_.embedding_dim);
    }
    return out;
  }

  struct VersionedGrad {
    uint64_t id = 0;
    const float* grad = nullptr;  // embedding_dim floats
    uint64_t read_version = 0;
  };

  // Applies one step's gradients. Validates every vector before mutating
  // anything so a rejected call leaves the shard untouched. When delays_out
  // is non-null it receives, per entry, the number of distinct earlier-step
  // updates that landed on the id between the recorded read and this write.
  // Returns false (dropping the whole call) when the caller's epoch is stale.
  bool apply_gradients(const std::vector<VersionedGrad>& grads, float lr, uint32_t step_tag,
                       uint32_t caller_epoch, std::vector<uint32_t>* delays_out) {
    std::lock_guard<std::mutex> g(mu_);
    if (caller_epoch != epoch_) {
      stale_epoch_drops_ += grads.size();
      return false;
    }
    for (const auto& e : grads) {
      for (uint32_t d = 0; d < cfg_.embedding_dim; ++d) {
        if (!std::isfinite(e.grad[d])) {
          throw DivergenceError("PsShard::apply_gradients: non-finite gradient for id " +
                                std::to_string(e.id));
        }
      }
    }
    if (delays_out) delays_out->clear();
    for (const auto& e : grads) {
      uint32_t slot = find_or_init(e.id);
      if (delays_out) delays_out->push_back(count_delay(slot, e.read_version, step_tag));
      bump_version(slot, step_tag);
      apply_one(slot, e.grad, lr);
    }
    return true;
  }

  // Untracked apply (map-shaped spec surface): no step accounting.
  void apply_gradients_map(const std::map<uint64_t, std::vector<float>>& grads, float lr) {
    std::vector<VersionedGrad> entries;
    entries.reserve(grads.size());
    for (const auto& [id, vec] : grads) {
      if (vec.size() != cfg_.embedding_dim) {
        throw PreconditionError("apply_gradients: gradient width mismatch for id " +
                                std::to_string(id));
      }
      entries.push_back({id, vec.data(), 0});
    }
    std::lock_guard<std::mutex> g(mu_);
    for (const auto& e : entries) {
      for (uint32_t d = 0; d < cfg_.embedding_dim; ++d) {
        if (!std::isfinite(e.grad[d])) {
          throw DivergenceError("PsShard::apply_gradients: non-finite gradient for id " +
                                std::to_string(e.id));
        }
      }
    }
    for (const auto& e : entries) {
      uint32_t slot = find_or_init(e.id);
      versions_[slot]++;  // untracked writes count individually
      apply_one(slot, e.grad, lr);
    }
  }

  // Discards all state and begins a new recovery epoch; in-flight gradients
  // carrying the old epoch will be dropped on arrival.
  void reset_for_recovery() {
    std::lock_guard<std::mutex> g(mu_);
    store_.clear();
    std::fill(versions_.begin(), versions_.end(), 0);
    std::fill(tag_ring_.begin(), tag_ring_.end(), kNoStep);
    epoch_++;
  }

  // Advances the stale-write guard without touching stored state. Workers
  // carry one epoch for the whole shard set, so recovering any sibling shard
  // realigns every shard to a common new epoch through this.
  uint32_t advance_epoch() {
    std::lock_guard<std::mutex> g(mu_);
    return ++epoch_;
  }

  // --- checkpointing -------------------------------------------------------

  static constexpr char kMagic[4] = {'H', 'P', 'S', '1'};
  static constexpr uint8_t kFormatVersion = 1;
  // magic(4) version(1) opt(1) pad(2) dim(4) capacity(4) salt(8) hwm(4)
  // head(4) tail(4) free_head(4) live(4) epoch(4) evictions(8) misses(8)
  // checksum(8)
  static constexpr size_t kHeaderBytes = 64;
  static constexpr size_t kChecksumOffset = 56;

  // Serializes the shard as flat little-endian arrays behind a fixed header.
  // The byte image is a pure function of shard state, so identical states
  // produce identical files. Returns the byte count written.
  size_t save_checkpoint(std::vector<uint8_t>& out) const {
    std::lock_guard<std::mutex> g(mu_);
    auto raw = store_.raw_state();
    size_t body = static_cast<size_t>(raw.hwm) * (sizeof(uint64_t) + 2 * sizeof(uint32_t) +
                                                  sizeof(uint64_t)) +
                  static_cast<size_t>(raw.hwm) * cfg_.embedding_dim * 2 * sizeof(float);
    out.assign(kHeaderBytes + body, 0);
    uint8_t* p = out.data();
    std::memcpy(p, kMagic, 4);
    p[4] = kFormatVersion;
    p[5] = static_cast<uint8_t>(cfg_.optimizer);
    write_u32(p + 8, cfg_.embedding_dim);
    write_u32(p + 12, cfg_.capacity);
    write_u64(p + 16, cfg_.rng_salt);
    write_u32(p + 24, raw.hwm);
    write_u32(p + 28, raw.head);
    write_u32(p + 32, raw.tail);
    write_u32(p + 36, raw.free_head);
    write_u32(p + 40, raw.live_count);
    write_u32(p + 44, epoch_);
    write_u64(p + 48, eviction_count_);
    // Counter block ends at the checksum field; miss/reset counters are
    // derived statistics and intentionally not persisted.
    uint8_t* q = p + kHeaderBytes;
    std::memcpy(q, raw.ids, raw.hwm * sizeof(uint64_t));
    q += raw.hwm * sizeof(uint64_t);
    std::memcpy(q, raw.prev, raw.hwm * sizeof(uint32_t));
    q += raw.hwm * sizeof(uint32_t);
    std::memcpy(q, raw.next, raw.hwm * sizeof(uint32_t));
    q += raw.hwm * sizeof(uint32_t);
    std::memcpy(q, versions_.data(), raw.hwm * sizeof(uint64_t));
    q += raw.hwm * sizeof(uint64_t);
    std::memcpy(q, raw.rows, static_cast<size_t>(raw.hwm) * cfg_.embedding_dim * 2 * sizeof(float));
    // Checksum spans the whole image with its own field zeroed, so any
    // single-byte corruption anywhere is detected (FNV-1a over a fixed-length
    // stream changes under any one-byte change).
    write_u64(p + kChecksumOffset, fnv1a64(out.data(), out.size()));
    return out.size();
  }

  size_t save_checkpoint_file(const std::string& path) const {
    std::vector<uint8_t> buf;
    save_checkpoint(buf);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("save_checkpoint: cannot open " + path);
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw Error("save_checkpoint: write failed for " + path);
    return buf.size();
  }

  static std::unique_ptr<PsShard> load_checkpoint(const std::vector<uint8_t>& buf) {
    Parsed ps = parse(buf);
    auto shard = std::make_unique<PsShard>(ps.cfg);
    shard->adopt(ps);
    shard->epoch_ = ps.epoch;
    return shard;
  }

  static std::unique_ptr<PsShard> load_checkpoint_file(const std::string& path) {
    return load_checkpoint(read_file(path));
  }

  // In-place recovery after a simulated crash: state reverts to the
  // checkpoint, but the epoch advances past the live one so in-flight
  // gradients from before the crash are dropped on arrival.
  void recover_from_checkpoint(const std::vector<uint8_t>& buf) {
    Parsed ps = parse(buf);
    if (ps.cfg.embedding_dim != cfg_.embedding_dim || ps.cfg.capacity != cfg_.capacity ||
        ps.cfg.optimizer != cfg_.optimizer || ps.cfg.rng_salt != cfg_.rng_salt) {
      throw CheckpointCorruptError("recover_from_checkpoint: configuration mismatch");
    }
    std::lock_guard<std::mutex> g(mu_);
    uint32_t live_epoch = epoch_;
    adopt_locked(ps);
    epoch_ = std::max(live_epoch, ps.epoch) + 1;
  }

  void recover_from_checkpoint_file(const std::string& path) {
    recover_from_checkpoint(read_file(path));
  }

  // Test hook: recency order as ids, most-recent first.
  std::vector<uint64_t> recency_ids() const {
    std::lock_guard<std::mutex> g(mu_);
    std::vector<uint64_t> out;
    store_.for_each_mru_to_lru([&](uint32_t s) { out.push_back(store_.id_at(s)); });
    return out;
  }

  // Test hook: allocation witnesses of the underlying store.
  const float* row_buffer() const { return store_.row_buffer(); }
  size_t bucket_count() const { return store_.bucket_count(); }

 private:
  struct Parsed {
    PsShardConfig cfg;
    uint32_t hwm, head, tail, free_head, live, epoch;
    uint64_t eviction_count;
    const uint64_t* ids;
    const uint32_t* prev;
    const uint32_t* next;
    const uint64_t* versions;
    const float* rows;
    std::vector<uint8_t> owned;  // keeps the pointers above alive
  };

  static std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointCorruptError("load_checkpoint: cannot open " + path);
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  }

  static Parsed parse(const std::vector<uint8_t>& buf) {
    if (buf.size() < kHeaderBytes) {
      throw CheckpointCorruptError("load_checkpoint: truncated header");
    }
    Parsed out;
    out.owned = buf;
    const uint8_t* p = out.owned.data();
    if (std::memcmp(p, kMagic, 4) != 0) {
      throw CheckpointCorruptError("load_checkpoint: bad magic");
    }
    if (p[4] != kFormatVersion) {
      throw CheckpointCorruptError("load_checkpoint: unsupported format version " +
                                   std::to_string(p[4]));
    }
    uint64_t stored_sum = read_u64(p + kChecksumOffset);
    std::vector<uint8_t> image(buf);
    write_u64(image.data() + kChecksumOffset, 0);
    if (fnv1a64(image.data(), image.size()) != stored_sum) {
      throw CheckpointCorruptError("load_checkpoint: checksum mismatch");
    }
    uint8_t opt = p[5];
    if (opt > 1) throw CheckpointCorruptError("load_checkpoint: unknown optimizer kind");
    out.cfg.optimizer = static_cast<EmbOptimizer>(opt);
    out.cfg.embedding_dim = read_u32(p + 8);
    out.cfg.capacity = read_u32(p + 12);
    out.cfg.rng_salt = read_u64(p + 16);
    out.hwm = read_u32(p + 24);
    out.head = read_u32(p + 28);
    out.tail = read_u32(p + 32);
    out.free_head = read_u32(p + 36);
    out.live = read_u32(p + 40);
    out.epoch = read_u32(p + 44);
    out.eviction_count = read_u64(p + 48);
    if (out.cfg.embedding_dim == 0 || out.cfg.capacity == 0) {
      throw CheckpointCorruptError("load_checkpoint: degenerate dimensions");
    }
    size_t row_bytes = static_cast<size_t>(out.cfg.embedding_dim) * 2 * sizeof(float);
    size_t body = static_cast<size_t>(out.hwm) * (2 * sizeof(uint64_t) + 2 * sizeof(uint32_t)) +
                  static_cast<size_t>(out.hwm) * row_bytes;
    if (buf.size() != kHeaderBytes + body) {
      throw CheckpointCorruptError("load_checkpoint: length mismatch");
    }
    const uint8_t* q = p + kHeaderBytes;
    out.ids = reinterpret_cast<const uint64_t*>(q);
    q += out.hwm * sizeof(uint64_t);
    out.prev = reinterpret_cast<const uint32_t*>(q);
    q += out.hwm * sizeof(uint32_t);
    out.next = reinterpret_cast<const uint32_t*>(q);
    q += out.hwm * sizeof(uint32_t);
    out.versions = reinterpret_cast<const uint64_t*>(q);
    q += out.hwm * sizeof(uint64_t);
    out.rows = reinterpret_cast<const float*>(q);
    return out;
  }

  void adopt(const Parsed& ps) {
    std::lock_guard<std::mutex> g(mu_);
    adopt_locked(ps);
  }

  void adopt_locked(const Parsed& ps) {
    store_.restore(ps.hwm, ps.head, ps.tail, ps.free_head, ps.live, ps.ids, ps.prev, ps.next,
                   ps.rows);
    std::fill(versions_.begin(), versions_.end(), 0);
    std::memcpy(versions_.data(), ps.versions, ps.hwm * sizeof(uint64_t));
    std::fill(tag_ring_.begin(), tag_ring_.end(), kNoStep);
    eviction_count_ = ps.eviction_count;
  }

  static void write_u32(uint8_t* p, uint32_t v) { std::memcpy(p, &v, 4); }
  static void write_u64(uint8_t* p, uint64_t v) { std::memcpy(p, &v, 8); }
  static uint32_t read_u32(const uint8_t* p) {
    uint32_t v;
    std::memcpy(&v, p, 4);
    return v;
  }
  static uint64_t read_u64(const uint8_t* p) {
    uint64_t v;
    std::memcpy(&v, p, 8);
    return v;
  }

  uint32_t find_or_init(uint64_t id) {
    uint32_t slot = store_.find(id);
    if (slot != LruStore::kNil) return slot;
    miss_count_++;
    auto put = store_.put(id);
    if (put.evicted) eviction_count_++;
    float* row = store_.row(put.slot);
    Rng rng(mix64(id ^ mix64(cfg_.rng_salt)));
    double limit = 1.0 / std::sqrt(static_cast<double>(cfg_.embedding_dim));
    for (uint32_t d = 0; d < cfg_.embedding_dim; ++d) {
      row[d] = static_cast<float>(rng.uniform(-limit, limit));
    }
    std::memset(row + cfg_.embedding_dim, 0, cfg_.embedding_dim * sizeof(float));
    versions_[put.slot] = 0;
    uint32_t* ring = tag_ring_.data() + static_cast<size_t>(put.slot) * kTagRing;
    std::fill(ring, ring + kTagRing, kNoStep);
    return put.slot;
  }

  void apply_one(uint32_t slot, const float* g, float lr) {
    float* row = store_.row(slot);
    float* acc = row + cfg_.embedding_dim;
    if (cfg_.optimizer == EmbOptimizer::kAdagrad) {
      for (uint32_t d = 0; d < cfg_.embedding_dim; ++d) {
        acc[d] += g[d] * g[d];
        row[d] -= lr * g[d] / (std::sqrt(acc[d]) + kAdagradEps);
      }
    } else {
      for (uint32_t d = 0; d < cfg_.embedding_dim; ++d) {
        row[d] -= lr * g[d];
      }
    }
  }

  // Distinct step tags below step_tag among version bumps in (read_version,
  // current]. Entries older than the ring's reach are treated as unknown and
  // not counted; the pull window keeps the relevant span far inside the ring.
  uint32_t count_delay(uint32_t slot, uint64_t read_version, uint32_t step_tag) {
    uint64_t v = versions_[slot];
    if (read_version > v) {
      // The entry was evicted and re-initialized after the read; its clock
      // restarted, so the gap is unmeasurable rather than negative.
      clock_reset_count_++;
      return 0;
    }
    const uint32_t* ring = tag_ring_.data() + static_cast<size_t>(slot) * kTagRing;
    uint32_t distinct[kTagRing];
    uint32_t n = 0;
    uint64_t lo = read_version + 1;
    if (v >= kTagRing && lo < v - kTagRing + 1) lo = v - kTagRing + 1;
    for (uint64_t k = lo; k <= v; ++k) {
      uint32_t tag = ring[(k - 1) % kTagRing];
      if (tag == kNoStep || tag >= step_tag) continue;
      bool dup = false;
      for (uint32_t j = 0; j < n; ++j) {
        if (distinct[j] == tag) {
          dup = true;
          break;
        }
      }
      if (!dup) distinct[n++] = tag;
    }
    return n;
  }

  void bump_version(uint32_t slot, uint32_t step_tag) {
    uint64_t v = versions_[slot];
    uint32_t* ring = tag_ring_.data() + static_cast<size_t>(slot) * kTagRing;
    if (v > 0 && ring[(v - 1) % kTagRing] == step_tag) return;  // same-step writes share a bump
    versions_[slot] = v + 1;
    ring[v % kTagRing] = step_tag;
  }

  PsShardConfig cfg_;
  mutable std::mutex mu_;
  LruStore store_;
  std::vector<uint64_t> versions_;  // per slot; iteration count reflected
  std::vector<uint32_t> tag_ring_;  // per slot, kTagRing recent bump tags
  uint64_t eviction_count_ = 0;
  uint64_t miss_count_ = 0;
  uint64_t clock_reset_count_ = 0;
  uint64_t stale_epoch_drops_ = 0;
  uint32_t epoch_ = 0;
};

// Routes ids across shards with the fixed avalanche mixer. Shard-level ops
// touch one shard guard at a time.
class ShardSet {
 public:
  ShardSet(uint32_t shard_count, const PsShardConfig& base) {
    if (shard_count == 0) throw ConfigError("ShardSet: shard_count must be positive");
    shards_.reserve(shard_count);
    for (uint32_t i = 0; i < shard_count; ++i) {
      PsShardConfig cfg = base;
      // Distinct per-shard salts keep init streams independent while staying
      // a pure function of the base salt.
      cfg.rng_salt = mix64(base.rng_salt + i);
      shards_.push_back(std::make_unique<PsShard>(cfg));
    }
  }

  uint32_t shard_count() const { return static_cast<uint32_t>(shards_.size()); }
  PsShard& shard(uint32_t i) { return *shards_[i]; }
  const PsShard& shard(uint32_t i) const { return *shards_[i]; }
  uint32_t shard_of(uint64_t id) const {
    return route_shard(id, static_cast<uint32_t>(shards_.size()));
  }

  uint64_t eviction_count() const {
    uint64_t n = 0;
    for (const auto& s : shards_) n += s->eviction_count();
    return n;
  }

  std::map<uint64_t, std::vector<float>> lookup(const std::vector<uint64_t>& ids) {
    std::vector<std::vector<uint64_t>> by_shard(shards_.size());
    for (uint64_t id : ids) by_shard[shard_of(id)].push_back(id);
    std::map<uint64_t, std::vector<float>> out;
    for (size_t s = 0; s < shards_.size(); ++s) {
      if (by_shard[s].empty()) continue;
      auto part = shards_[s]->lookup_map(by_shard[s]);
      out.merge(part);
    }
    return out;
  }

  void apply_gradients(const std::map<uint64_t, std::vector<float>>& grads, float lr) {
    std::vector<std::map<uint64_t, std::vector<float>>> by_shard(shards_.size());
    for (const auto& [id, g] : grads) by_shard[shard_of(id)][id] = g;
    for (size_t s = 0; s < shards_.size(); ++s) {
      if (!by_shard[s].empty()) shards_[s]->apply_gradients_map(by_shard[s], lr);
    }
  }

 private:
  std::vector<std::unique_ptr<PsShard>> shards_;
};

// Spec-shaped free functions over the shard set.
inline std::map<uint64_t, std::vector<float>> ps_lookup(ShardSet& set,
                                                        const std::vector<uint64_t>& ids) {
  return set.lookup(ids);
}

inline void ps_apply_gradients(ShardSet& set,
                               const std::map<uint64_t, std::vector<float>>& grads, float lr) {
  set.apply_gradients(grads, lr);
}

}  // namespace hybridps
