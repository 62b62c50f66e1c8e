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

#include <algorithm>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "hybridps/errors.hpp"

namespace hybridps {

// Aggregates per-parameter staleness observations across threads. A delay of
// d means the applied gradient was computed from a value d completed updates
// behind the one it modified.
class StalenessStats {
 public:
  void record(uint64_t read_version, uint64_t current_version) {
    if (current_version < read_version) {
      throw ClockError("staleness: current version " + std::to_string(current_version) +
                       " precedes read version " + std::to_string(read_version));
    }
    record_delay(current_version - read_version);
  }

  void record_delay(uint64_t delay) {
    std::lock_guard<std::mutex> lk(mu_);
    if (delay >= hist_.size()) hist_.resize(delay + 1, 0);
    hist_[delay]++;
    max_ = std::max(max_, delay);
    count_++;
    sum_ += delay;
  }

  uint64_t max_delay() const {
    std::lock_guard<std::mutex> lk(mu_);
    return max_;
  }
  uint64_t count() const {
    std::lock_guard<std::mutex> lk(mu_);
    return count_;
  }
  double mean_delay() const {
    std::lock_guard<std::mutex> lk(mu_);
    return count_ == 0 ? 0.0 : static_cast<double>(sum_) / static_cast<double>(count_);
  }
  // hist()[d] is the number of observations with delay exactly d.
  std::vector<uint64_t> hist() const {
    std::lock_guard<std::mutex> lk(mu_);
    return hist_;
  }
  void reset() {
    std::lock_guard<std::mutex> lk(mu_);
    hist_.clear();
    max_ = 0;
    count_ = 0;
    sum_ = 0;
  }

 private:
  mutable std::mutex mu_;
  std::vector<uint64_t> hist_;
  uint64_t max_ = 0;
  uint64_t count_ = 0;
  uint64_t sum_ = 0;
};

inline void record_staleness(StalenessStats& stats, uint64_t read_version,
                             uint64_t current_version) {
  stats.record(read_version, current_version);
}

// Tracks global step completion. A step is complete once every trainer has
// registered a batch for it and every registered sample was either applied at
// the parameter server or dropped. frontier() is the largest step c such that
// all steps <= c are complete; pulls for step s block until
// frontier() >= s - 1 - cap, which bounds the number of incomplete earlier
// steps a read can miss.
class StepClock {
 public:
  explicit StepClock(uint32_t trainer_count) : trainer_count_(trainer_count) {
    if (trainer_count == 0) throw PreconditionError("StepClock: trainer_count must be positive");
  }

  // One trainer announces the minibatch it assembled for `step`.
  void register_batch(uint64_t step, uint32_t sample_count) {
    std::lock_guard<std::mutex> lk(mu_);
    check_not_completed_locked(step, "register_batch");
    Entry& e = entries_[step];
    if (e.registrations >= trainer_count_) {
      throw ClockError("StepClock: step " + std::to_string(step) + " registered more than " +
                       std::to_string(trainer_count_) + " times");
    }
    e.registrations++;
    e.expected += sample_count;
    advance_locked();
    cv_.notify_all();
  }

  // One sample of `step` finished: its gradients were applied or it was
  // dropped. Valid only after the owning trainer registered the batch.
  void mark_done(uint64_t step, uint32_t sample_count = 1) {
    std::lock_guard<std::mutex> lk(mu_);
    check_not_completed_locked(step, "mark_done");
    Entry& e = entries_[step];
    e.done += sample_count;
    if (e.registrations == trainer_count_ && e.done > e.expected) {
      throw ClockError("StepClock: step " + std::to_string(step) + " overcompleted");
    }
    advance_locked();
    cv_.notify_all();
  }

  // Largest step c with every step <= c complete; -1 when step 0 is not done.
  int64_t frontier() const {
    std::lock_guard<std::mutex> lk(mu_);
    return frontier_;
  }

  // Blocks until frontier() >= target. `target < 0` returns immediately.
  void wait_frontier(int64_t target) {
    if (target < 0) return;
    std::unique_lock<std::mutex> lk(mu_);
    cv_.wait(lk, [&] { return frontier_ >= target || shutdown_; });
    if (shutdown_ && frontier_ < target) {
      throw ClockError("StepClock: shut down while waiting for frontier " +
                       std::to_string(target));
    }
  }

  // Releases all waiters; further waits that cannot be satisfied throw.
  void shutdown() {
    std::lock_guard<std::mutex> lk(mu_);
    shutdown_ = true;
    cv_.notify_all();
  }

  // Declares every step <= `step` abandoned and moves the frontier past
  // them, discarding their entries. For crash recovery, where a failed
  // barrier leaves steps that will never collect all registrations; callers
  // must guarantee no further register or mark for those steps is in flight.
  void force_complete_through(int64_t step) {
    std::lock_guard<std::mutex> lk(mu_);
    if (step <= frontier_) return;
    entries_.erase(entries_.begin(), entries_.upper_bound(static_cast<uint64_t>(step)));
    frontier_ = step;
    advance_locked();
    cv_.notify_all();
  }

 private:
  struct Entry {
    uint32_t registrations = 0;
    uint64_t expected = 0;
    uint64_t done = 0;
  };

  // Completed entries are erased, so a late arrival for a step at or below
  // the frontier would otherwise re-open it as a fresh entry.
  void check_not_completed_locked(uint64_t step, const char* op) const {
    if (static_cast<int64_t>(step) <= frontier_) {
      throw ClockError(std::string("StepClock: ") + op + " on completed step " +
                       std::to_string(step));
    }
  }

  void advance_locked() {
    for (;;) {
      auto it = entries_.find(static_cast<uint64_t>(frontier_ + 1));
      if (it == entries_.end()) return;
      const Entry& e = it->second;
      if (e.registrations < trainer_count_ || e.done < e.expected) return;
      entries_.erase(it);
      frontier_++;
    }
  }

  uint32_t trainer_count_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<uint64_t, Entry> entries_;
  int64_t frontier_ = -1;
  bool shutdown_ = false;
};

}  // namespace hybridps
