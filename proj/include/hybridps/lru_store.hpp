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

#include <cstdint>
#include <cstring>
#include <unordered_map>
#include <vector>

#include "hybridps/errors.hpp"

namespace hybridps {

// Bounded id -> row store with least-recently-used eviction.
//
// Layout is structure-of-arrays: one flat float buffer for rows, parallel
// index arrays for the recency chain. The chain links slot indices instead of
// pointers so all buffers can be preallocated once; after construction no
// operation allocates. Slots are handed out sequentially up to a high-water
// mark; erased slots recycle through a free list threaded inside next_, so
// free slots and live slots always partition [0, high_water_mark).
class LruStore {
 public:
  static constexpr uint32_t kNil = 0xffffffffu;

  LruStore(uint32_t capacity, uint32_t row_floats)
      : capacity_(capacity), row_floats_(row_floats) {
    if (capacity == 0 || capacity >= kNil) {
      throw ConfigError("LruStore: capacity must be in [1, 2^32-2]");
    }
    if (row_floats == 0) {
      throw ConfigError("LruStore: row width must be positive");
    }
    rows_.resize(static_cast<size_t>(capacity) * row_floats, 0.0f);
    ids_.resize(capacity, 0);
    prev_.resize(capacity, kNil);
    next_.resize(capacity, kNil);
    // Load factor pinned below the default so reserve() covers the worst case
    // and the table never rehashes.
    map_.max_load_factor(0.5f);
    map_.reserve(capacity);
  }

  uint32_t capacity() const { return capacity_; }
  uint32_t row_floats() const { return row_floats_; }
  uint32_t size() const { return size_; }
  uint32_t high_water_mark() const { return hwm_; }

  // Slot of id, promoting it to most-recent. kNil on miss.
  uint32_t find(uint64_t id) {
    auto it = map_.find(id);
    if (it == map_.end()) return kNil;
    touch(it->second);
    return it->second;
  }

  // Slot of id without promotion. kNil on miss.
  uint32_t peek(uint64_t id) const {
    auto it = map_.find(id);
    return it == map_.end() ? kNil : it->second;
  }

  struct PutResult {
    uint32_t slot = kNil;
    bool overwrote = false;  // id was already present; promoted, row reused
    bool evicted = false;
    uint64_t evicted_id = 0;
  };

  // Makes id most-recent, allocating a slot if absent: recycled free slot
  // first, then a fresh slot below capacity, else the least-recent entry is
  // evicted and its slot reused. A reused row keeps the previous bytes;
  // callers that need a clean row must overwrite it.
  PutResult put(uint64_t id) {
    PutResult r;
    auto it = map_.find(id);
    if (it != map_.end()) {
      r.slot = it->second;
      r.overwrote = true;
      touch(r.slot);
      return r;
    }
    if (free_head_ != kNil) {
      r.slot = free_head_;
      free_head_ = next_[free_head_];
    } else if (hwm_ < capacity_) {
      r.slot = hwm_++;
    } else {
      r.slot = tail_;
      r.evicted = true;
      r.evicted_id = ids_[tail_];
      unlink(tail_);
      map_.erase(r.evicted_id);
      size_--;
    }
    ids_[r.slot] = id;
    link_front(r.slot);
    map_.emplace(id, r.slot);
    size_++;
    return r;
  }

  // Removes id, recycling its slot through the free list.
  bool erase(uint64_t id) {
    auto it = map_.find(id);
    if (it == map_.end()) return false;
    uint32_t slot = it->second;
    unlink(slot);
    next_[slot] = free_head_;
    free_head_ = slot;
    map_.erase(it);
    size_--;
    return true;
  }

  float* row(uint32_t slot) { return rows_.data() + static_cast<size_t>(slot) * row_floats_; }
  const float* row(uint32_t slot) const {
    return rows_.data() + static_cast<size_t>(slot) * row_floats_;
  }
  uint64_t id_at(uint32_t slot) const { return ids_[slot]; }

  // Visits live entries most-recent first (the order following next-links
  // from the head).
  template <typename Fn>
  void for_each_mru_to_lru(Fn&& fn) const {
    for (uint32_t s = head_; s != kNil; s = next_[s]) fn(s);
  }

  void clear() {
    map_.clear();
    size_ = 0;
    hwm_ = 0;
    head_ = kNil;
    tail_ = kNil;
    free_head_ = kNil;
  }

  // Raw state access for flat checkpointing. Arrays are meaningful on
  // [0, high_water_mark); the free list is threaded inside next_.
  struct RawState {
    uint32_t hwm;
    uint32_t head;
    uint32_t tail;
    uint32_t free_head;
    uint32_t live_count;
    const uint64_t* ids;
    const uint32_t* prev;
    const uint32_t* next;
    const float* rows;
  };

  RawState raw_state() const {
    return {hwm_, head_, tail_, free_head_, size_, ids_.data(), prev_.data(), next_.data(),
            rows_.data()};
  }

  // Rebuilds the store from checkpointed arrays, re-deriving the hash index
  // by walking the recency chain. Every structural invariant is revalidated;
  // violations raise the checkpoint-corrupt error.
  void restore(uint32_t hwm, uint32_t head, uint32_t tail, uint32_t free_head,
               uint32_t live_count, const uint64_t* ids, const uint32_t* prev,
               const uint32_t* next, const float* rows) {
    if (hwm > capacity_) {
      throw CheckpointCorruptError("LruStore::restore: high-water mark exceeds capacity");
    }
    clear();
    hwm_ = hwm;
    head_ = head;
    tail_ = tail;
    free_head_ = free_head;
    std::memcpy(ids_.data(), ids, static_cast<size_t>(hwm) * sizeof(uint64_t));
    std::memcpy(prev_.data(), prev, static_cast<size_t>(hwm) * sizeof(uint32_t));
    std::memcpy(next_.data(), next, static_cast<size_t>(hwm) * sizeof(uint32_t));
    std::memcpy(rows_.data(), rows, static_cast<size_t>(hwm) * row_floats_ * sizeof(float));

    auto check_slot = [&](uint32_t s) {
      if (s >= hwm_) throw CheckpointCorruptError("LruStore::restore: slot index out of range");
    };
    std::vector<uint8_t> seen(hwm_, 0);
    uint32_t n = 0;
    uint32_t expect_prev = kNil;
    for (uint32_t s = head_; s != kNil; s = next_[s]) {
      check_slot(s);
      if (seen[s]) throw CheckpointCorruptError("LruStore::restore: recency chain has a cycle");
      seen[s] = 1;
      if (prev_[s] != expect_prev) {
        throw CheckpointCorruptError("LruStore::restore: prev/next links inconsistent");
      }
      if (!map_.emplace(ids_[s], s).second) {
        throw CheckpointCorruptError("LruStore::restore: duplicate id in chain");
      }
      expect_prev = s;
      if (++n > hwm_) throw CheckpointCorruptError("LruStore::restore: chain longer than slots");
    }
    if (expect_prev != tail_) {
      throw CheckpointCorruptError("LruStore::restore: tail does not terminate the chain");
    }
    if (n != live_count) {
      throw CheckpointCorruptError("LruStore::restore: live count mismatch");
    }
    uint32_t f = 0;
    for (uint32_t s = free_head_; s != kNil; s = next_[s]) {
      check_slot(s);
      if (seen[s]) {
        throw CheckpointCorruptError("LruStore::restore: slot both live and free");
      }
      seen[s] = 1;
      if (++f > hwm_) throw CheckpointCorruptError("LruStore::restore: free list cycle");
    }
    if (n + f != hwm_) {
      throw CheckpointCorruptError(
          "LruStore::restore: live and free slots do not partition the slot range");
    }
    size_ = n;
  }

  // Allocation witnesses: both must be stable across any operation sequence
  // after construction.
  const float* row_buffer() const { return rows_.data(); }
  size_t bucket_count() const { return map_.bucket_count(); }

 private:
  void link_front(uint32_t slot) {
    prev_[slot] = kNil;
    next_[slot] = head_;
    if (head_ != kNil) prev_[head_] = slot;
    head_ = slot;
    if (tail_ == kNil) tail_ = slot;
  }

  void unlink(uint32_t slot) {
    if (prev_[slot] != kNil) next_[prev_[slot]] = next_[slot];
    if (next_[slot] != kNil) prev_[next_[slot]] = prev_[slot];
    if (head_ == slot) head_ = next_[slot];
    if (tail_ == slot) tail_ = prev_[slot];
    prev_[slot] = kNil;
    next_[slot] = kNil;
  }

  void touch(uint32_t slot) {
    if (head_ == slot) return;
    unlink(slot);
    link_front(slot);
  }

  uint32_t capacity_;
  uint32_t row_floats_;
  uint32_t size_ = 0;
  uint32_t hwm_ = 0;      // slots ever allocated; fresh slots come from here
  uint32_t head_ = kNil;  // most recent
  uint32_t tail_ = kNil;  // least recent
  uint32_t free_head_ = kNil;
  std::vector<float> rows_;
  std::vector<uint64_t> ids_;
  std::vector<uint32_t> prev_;
  std::vector<uint32_t> next_;
  std::unordered_map<uint64_t, uint32_t> map_;
};

}  // namespace hybridps
