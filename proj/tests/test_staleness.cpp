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

#include "hybridps/staleness.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <thread>
#include <vector>

#include "hybridps/core.hpp"
#include "hybridps/errors.hpp"

namespace hybridps {
namespace {

TEST(StalenessStatsTest, ReadAfterWriteIsZeroDelay) {
  StalenessStats stats;
  stats.record(7, 7);
  EXPECT_EQ(stats.count(), 1u);
  EXPECT_EQ(stats.max_delay(), 0u);
  EXPECT_DOUBLE_EQ(stats.mean_delay(), 0.0);
}

TEST(StalenessStatsTest, TwoInterveningWritesGiveDelayTwo) {
  StalenessStats stats;
  stats.record(5, 7);
  EXPECT_EQ(stats.max_delay(), 2u);
  EXPECT_EQ(stats.hist().at(2), 1u);
}

TEST(StalenessStatsTest, BackwardClockRejected) {
  StalenessStats stats;
  EXPECT_THROW(stats.record(8, 7), ClockError);
  EXPECT_EQ(stats.count(), 0u);
}

TEST(StalenessStatsTest, HistogramMatchesBruteForceRecount) {
  StalenessStats stats;
  Rng rng(300);
  std::vector<uint64_t> delays;
  for (int i = 0; i < 20000; ++i) {
    uint64_t read = rng.uniform_u64(1000);
    uint64_t current = read + rng.uniform_u64(12);
    delays.push_back(current - read);
    record_staleness(stats, read, current);
  }

  std::vector<uint64_t> expect;
  uint64_t max = 0;
  uint64_t sum = 0;
  for (uint64_t d : delays) {
    if (d >= expect.size()) expect.resize(d + 1, 0);
    expect[d]++;
    max = std::max(max, d);
    sum += d;
  }
  EXPECT_EQ(stats.hist(), expect);
  EXPECT_EQ(stats.max_delay(), max);
  EXPECT_EQ(stats.count(), delays.size());
  EXPECT_DOUBLE_EQ(stats.mean_delay(),
                   static_cast<double>(sum) / static_cast<double>(delays.size()));
}

TEST(StalenessStatsTest, ResetClearsEverything) {
  StalenessStats stats;
  stats.record_delay(3);
  stats.record_delay(1);
  stats.reset();
  EXPECT_EQ(stats.count(), 0u);
  EXPECT_EQ(stats.max_delay(), 0u);
  EXPECT_DOUBLE_EQ(stats.mean_delay(), 0.0);
  EXPECT_TRUE(stats.hist().empty());
}

TEST(StalenessStatsTest, ConcurrentRecordsAllLand) {
  StalenessStats stats;
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < 5000; ++i) stats.record_delay(t % 4);
    });
  }
  for (auto& th : threads) th.join();
  EXPECT_EQ(stats.count(), 40000u);
  uint64_t total = 0;
  for (uint64_t c : stats.hist()) total += c;
  EXPECT_EQ(total, 40000u);
}

TEST(StepClockTest, StartsAtMinusOne) {
  StepClock clock(1);
  EXPECT_EQ(clock.frontier(), -1);
}

TEST(StepClockTest, ZeroTrainersRejected) {
  EXPECT_THROW(StepClock clock(0), PreconditionError);
}

TEST(StepClockTest, SingleTrainerProgression) {
  StepClock clock(1);
  clock.register_batch(0, 3);
  EXPECT_EQ(clock.frontier(), -1);
  clock.mark_done(0);
  clock.mark_done(0);
  EXPECT_EQ(clock.frontier(), -1);
  clock.mark_done(0);
  EXPECT_EQ(clock.frontier(), 0);
}

TEST(StepClockTest, FrontierWaitsForEarliestStep) {
  StepClock clock(1);
  clock.register_batch(0, 1);
  clock.register_batch(1, 1);
  clock.mark_done(1);
  // Step 1 is complete but step 0 is not, so the frontier cannot move.
  EXPECT_EQ(clock.frontier(), -1);
  clock.mark_done(0);
  EXPECT_EQ(clock.frontier(), 1);
}

TEST(StepClockTest, AllTrainersMustRegister) {
  StepClock clock(2);
  clock.register_batch(0, 1);
  clock.mark_done(0);
  EXPECT_EQ(clock.frontier(), -1);
  clock.register_batch(0, 0);
  EXPECT_EQ(clock.frontier(), 0);
}

TEST(StepClockTest, EmptyBatchesCompleteOnRegistration) {
  StepClock clock(2);
  clock.register_batch(0, 0);
  clock.register_batch(0, 0);
  EXPECT_EQ(clock.frontier(), 0);
}

TEST(StepClockTest, OverRegistrationRejected) {
  StepClock clock(1);
  clock.register_batch(5, 2);
  EXPECT_THROW(clock.register_batch(5, 2), ClockError);
}

TEST(StepClockTest, OvercompletionRejected) {
  StepClock clock(1);
  clock.register_batch(0, 1);
  clock.mark_done(0);
  EXPECT_THROW(clock.mark_done(0), ClockError);
}

TEST(StepClockTest, NegativeTargetReturnsImmediately) {
  StepClock clock(1);
  clock.wait_frontier(-1);
  EXPECT_EQ(clock.frontier(), -1);
}

TEST(StepClockTest, WaitBlocksUntilFrontierReached) {
  StepClock clock(1);
  clock.register_batch(0, 1);
  std::atomic<bool> released{false};
  std::thread waiter([&] {
    clock.wait_frontier(0);
    released.store(true);
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  EXPECT_FALSE(released.load());
  clock.mark_done(0);
  waiter.join();
  EXPECT_TRUE(released.load());
}

TEST(StepClockTest, ShutdownWakesWaiterWithError) {
  StepClock clock(1);
  std::atomic<bool> threw{false};
  std::thread waiter([&] {
    try {
      clock.wait_frontier(3);
    } catch (const ClockError&) {
      threw.store(true);
    }
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  clock.shutdown();
  waiter.join();
  EXPECT_TRUE(threw.load());
}

TEST(StepClockTest, SatisfiedWaitSurvivesShutdown) {
  StepClock clock(1);
  clock.register_batch(0, 1);
  clock.mark_done(0);
  clock.shutdown();
  clock.wait_frontier(0);
  EXPECT_EQ(clock.frontier(), 0);
}

TEST(StepClockTest, ConcurrentTrainersReachFinalFrontier) {
  constexpr int kTrainers = 4;
  constexpr uint64_t kSteps = 200;
  StepClock clock(kTrainers);
  std::vector<std::thread> trainers;
  for (int t = 0; t < kTrainers; ++t) {
    trainers.emplace_back([&] {
      for (uint64_t s = 0; s < kSteps; ++s) {
        clock.register_batch(s, 2);
        clock.mark_done(s);
        clock.mark_done(s);
      }
    });
  }
  for (auto& th : trainers) th.join();
  EXPECT_EQ(clock.frontier(), static_cast<int64_t>(kSteps) - 1);
}

TEST(StepClockTest, ForceCompleteSkipsAbandonedSteps) {
  StepClock clock(2);
  clock.register_batch(0, 4);
  clock.mark_done(0, 4);
  // The second trainer never registers step 0; the frontier cannot move.
  EXPECT_EQ(clock.frontier(), -1);
  clock.force_complete_through(1);
  EXPECT_EQ(clock.frontier(), 1);
  // Abandoned steps reject late traffic like any completed step.
  EXPECT_THROW(clock.register_batch(1, 4), ClockError);
  EXPECT_THROW(clock.mark_done(0, 1), ClockError);
  // At or below the frontier it is a no-op.
  clock.force_complete_through(0);
  EXPECT_EQ(clock.frontier(), 1);
}

TEST(StepClockTest, ForceCompleteReleasesWaiters) {
  StepClock clock(2);
  clock.register_batch(0, 1);
  std::atomic<bool> released{false};
  std::thread waiter([&] {
    clock.wait_frontier(2);
    released.store(true);
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  EXPECT_FALSE(released.load());
  clock.force_complete_through(2);
  waiter.join();
  EXPECT_TRUE(released.load());
  EXPECT_EQ(clock.frontier(), 2);
}

}  // namespace
}  // namespace hybridps
