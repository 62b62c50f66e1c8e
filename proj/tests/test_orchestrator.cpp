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

#include "hybridps/orchestrator.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace hybridps {
namespace {

SynthConfig tiny_synth(uint64_t samples = 600) {
  SynthConfig sc;
  sc.vocab_per_group = {40, 40};
  sc.min_ids_per_group = 1;
  sc.max_ids_per_group = 2;
  sc.non_id_dim = 3;
  sc.latent_dim = 4;
  sc.teacher_scale = 6.0;
  sc.label_noise = 0.05;
  sc.sample_count = samples;
  return sc;
}

TrainConfig tiny_cfg(TrainMode mode) {
  TrainConfig c;
  c.mode = mode;
  c.dense_lr = 0.1f;
  c.embedding_lr = 0.1f;
  c.total_steps = 20;
  c.batch_size = 8;
  c.nn_workers = 2;
  c.embedding_workers = 2;
  c.ps_shards = 2;
  c.ps_capacity = 512;
  c.embedding_dim = 4;
  c.hidden = {6};
  c.staleness_cap = 2;
  c.eval_every = 5;
  c.checkpoint_every = 10;
  c.average_every = 5;
  c.pull_concurrency = 4;
  c.allreduce_timeout_ms = 5000;
  c.holdout_fraction = 0.25;
  c.eval_max_samples = 200;
  return c;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// --- hybrid_lr --------------------------------------------------------------

TEST(HybridLrTest, MatchesClosedFormAnchors) {
  EXPECT_DOUBLE_EQ(hybrid_lr(2.0, 0.0, 1, 0.0, 0.0), 0.5);
  EXPECT_DOUBLE_EQ(hybrid_lr(8.0, 0.0, 1000, 5.0, 1.0), 1.0 / 168.0);
  EXPECT_DOUBLE_EQ(hybrid_lr(1.0, 1.0, 100, 5.0, 0.1), 1.0 / 13.0);
}

TEST(HybridLrTest, RejectsDegenerateInputs) {
  EXPECT_THROW(hybrid_lr(0.0, 1.0, 10, 1.0, 1.0), PreconditionError);
  EXPECT_THROW(hybrid_lr(-1.0, 1.0, 10, 1.0, 1.0), PreconditionError);
  EXPECT_THROW(hybrid_lr(1.0, 1.0, 0, 1.0, 1.0), PreconditionError);
  EXPECT_THROW(hybrid_lr(1.0, -0.5, 10, 1.0, 1.0), PreconditionError);
  EXPECT_THROW(hybrid_lr(1.0, 1.0, 10, -2.0, 1.0), PreconditionError);
  EXPECT_THROW(hybrid_lr(1.0, 1.0, 10, 1.0, -0.1), PreconditionError);
}

TEST(HybridLrTest, DecreasesInEveryArgument) {
  const double grid[] = {0.5, 1.0, 2.0, 4.0, 8.0};
  double prev = hybrid_lr(0.25, 1.0, 100, 2.0, 0.5);
  for (double L : grid) {
    double v = hybrid_lr(L, 1.0, 100, 2.0, 0.5);
    EXPECT_LT(v, prev) << "L=" << L;
    prev = v;
  }
  prev = hybrid_lr(2.0, 0.0, 100, 2.0, 0.5);
  for (double s : grid) {
    double v = hybrid_lr(2.0, s, 100, 2.0, 0.5);
    EXPECT_LT(v, prev) << "sigma=" << s;
    prev = v;
  }
  prev = hybrid_lr(2.0, 1.0, 1, 2.0, 0.5);
  for (uint64_t T : {10, 100, 1000, 10000}) {
    double v = hybrid_lr(2.0, 1.0, T, 2.0, 0.5);
    EXPECT_LT(v, prev) << "T=" << T;
    prev = v;
  }
  prev = hybrid_lr(2.0, 1.0, 100, 0.0, 0.5);
  for (double tau : grid) {
    double v = hybrid_lr(2.0, 1.0, 100, tau, 0.5);
    EXPECT_LT(v, prev) << "tau=" << tau;
    prev = v;
  }
  prev = hybrid_lr(2.0, 1.0, 100, 2.0, 0.0);
  for (double a : grid) {
    double v = hybrid_lr(2.0, 1.0, 100, 2.0, a);
    EXPECT_LT(v, prev) << "alpha=" << a;
    prev = v;
  }
}

// --- config -----------------------------------------------------------------

TEST(TrainModeTest, NamesRoundTrip) {
  for (TrainMode m : {TrainMode::kSync, TrainMode::kHybridRaw, TrainMode::kHybridOpt,
                      TrainMode::kAsync}) {
    EXPECT_EQ(parse_train_mode(train_mode_name(m)), m);
  }
  EXPECT_THROW(parse_train_mode("eventual"), ConfigError);
}

TEST(TrainConfigTest, RejectsDegenerateShapes) {
  TrainConfig c = tiny_cfg(TrainMode::kHybridRaw);
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_cfg(TrainMode::kHybridRaw);
  c.batch_size = 70000;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_cfg(TrainMode::kHybridRaw);
  c.nn_workers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_cfg(TrainMode::kHybridRaw);
  c.holdout_fraction = 0.95;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_cfg(TrainMode::kHybridRaw);
  c.staleness_cap = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainConfigTest, FaultDrillsAreHybridOnly) {
  FaultEvent f;
  f.target = FaultEvent::Target::kEmbeddingWorker;
  f.at_step = 1;

  TrainConfig c = tiny_cfg(TrainMode::kSync);
  c.faults = {f};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_cfg(TrainMode::kAsync);
  c.faults = {f};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_cfg(TrainMode::kHybridOpt);
  c.faults = {f};
  EXPECT_NO_THROW(c.validate());

  f.index = 99;  // only two embedding workers exist
  c.faults = {f};
  EXPECT_THROW(c.validate(), ConfigError);
}

// --- plumbing ---------------------------------------------------------------

TEST(BlockingQueueTest, FifoAndTimeout) {
  BlockingQueue<int> q;
  q.push(1);
  q.push(2);
  EXPECT_EQ(q.pop(std::chrono::milliseconds(10)).value(), 1);
  EXPECT_EQ(q.pop(std::chrono::milliseconds(10)).value(), 2);
  auto t0 = std::chrono::steady_clock::now();
  EXPECT_FALSE(q.pop(std::chrono::milliseconds(30)).has_value());
  EXPECT_GE(std::chrono::steady_clock::now() - t0, std::chrono::milliseconds(25));
}

TEST(BlockingQueueTest, CloseDrainsThenReportsEmpty) {
  BlockingQueue<int> q;
  q.push(7);
  q.close();
  EXPECT_FALSE(q.closed_and_empty());
  EXPECT_EQ(q.pop(std::chrono::milliseconds(10)).value(), 7);
  EXPECT_TRUE(q.closed_and_empty());
  EXPECT_FALSE(q.pop(std::chrono::milliseconds(10)).has_value());
}

TEST(HashBoardTest, AgreementPassesDisagreementThrows) {
  HashBoard board(3);
  EXPECT_NO_THROW(board.post(0, 42));
  EXPECT_NO_THROW(board.post(0, 42));
  EXPECT_NO_THROW(board.post(0, 42));
  board.post(1, 7);
  EXPECT_THROW(board.post(1, 8), ConsistencyError);
}

TEST(RecoveryGateTest, RendezvousRunsRepairExactlyOnce) {
  RecoveryGate gate(3);
  std::atomic<int> repairs{0};
  std::vector<std::thread> ts;
  for (int i = 0; i < 3; ++i) {
    ts.emplace_back([&] { gate.arrive_and_recover([&] { repairs.fetch_add(1); }); });
  }
  for (auto& t : ts) t.join();
  EXPECT_EQ(repairs.load(), 1);
}

TEST(RecoveryGateTest, IncompleteRendezvousTimesOut) {
  RecoveryGate gate(2);
  EXPECT_THROW(gate.arrive_and_recover([] {}, 50), UnrecoverableRunError);
}

TEST(CheckpointStoreTest, KeepsLatestPerTier) {
  CheckpointStore store;
  EXPECT_FALSE(store.has_dense());
  EXPECT_THROW(store.dense(), UnrecoverableRunError);
  EXPECT_THROW(store.ps(0), UnrecoverableRunError);
  store.put_dense({1, 2, 3}, 10);
  store.put_ps(1, {9});
  EXPECT_EQ(store.dense(), (std::vector<uint8_t>{1, 2, 3}));
  EXPECT_EQ(store.dense_step(), 10u);
  EXPECT_FALSE(store.has_ps(0));
  EXPECT_TRUE(store.has_ps(1));
  store.put_dense({4}, 20);
  EXPECT_EQ(store.dense(), std::vector<uint8_t>{4});
}

// --- full runs --------------------------------------------------------------

TEST(RunTest, SyncRunConservesAndSeesNoStaleness) {
  Dataset data = generate_synthetic(tiny_synth(), 3);
  RunMetrics m = run_training(tiny_cfg(TrainMode::kSync), data);
  EXPECT_FALSE(m.aborted) << m.abort_reason;
  EXPECT_TRUE(m.conservation_ok);
  EXPECT_EQ(m.steps_run, 20u);
  EXPECT_EQ(m.dispatched, 320u);  // 20 steps x 2 trainers x batch 8
  EXPECT_EQ(m.registered, m.dispatched);
  EXPECT_EQ(m.trained, 320u);
  EXPECT_EQ(m.pull_drops, 0u);
  EXPECT_EQ(m.grad_drops, 0u);
  EXPECT_EQ(m.max_staleness, 0u);
  EXPECT_EQ(m.loss_trace.size(), 20u);
  EXPECT_EQ(m.trace.size(), 4u);  // eval every 5 steps
  EXPECT_GT(m.final_auc, 0.0);
  EXPECT_LE(m.final_auc, 1.0);
  EXPECT_GT(m.samples_per_sec, 0.0);
}

TEST(RunTest, SyncRunsAreReproducible) {
  Dataset data = generate_synthetic(tiny_synth(), 4);
  TrainConfig c = tiny_cfg(TrainMode::kSync);
  RunMetrics a = run_training(c, data);
  RunMetrics b = run_training(c, data);
  ASSERT_FALSE(a.aborted) << a.abort_reason;
  ASSERT_FALSE(b.aborted) << b.abort_reason;
  ASSERT_EQ(a.loss_trace.size(), b.loss_trace.size());
  for (size_t i = 0; i < a.loss_trace.size(); ++i) {
    EXPECT_EQ(a.loss_trace[i].first, b.loss_trace[i].first);
    EXPECT_EQ(a.loss_trace[i].second, b.loss_trace[i].second) << "step " << i;
  }
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (size_t i = 0; i < a.trace.size(); ++i) {
    EXPECT_EQ(a.trace[i].auc, b.trace[i].auc) << "eval row " << i;
  }
}

TEST(RunTest, HybridRawHonorsStalenessCap) {
  Dataset data = generate_synthetic(tiny_synth(), 5);
  TrainConfig c = tiny_cfg(TrainMode::kHybridRaw);
  c.staleness_cap = 2;
  RunMetrics m = run_training(c, data);
  EXPECT_FALSE(m.aborted) << m.abort_reason;
  EXPECT_TRUE(m.conservation_ok);
  EXPECT_LE(m.max_staleness, 2u);
  EXPECT_EQ(m.trained, 320u);
}

TEST(RunTest, HybridOptCompletesWithChunkedBarrier) {
  Dataset data = generate_synthetic(tiny_synth(), 6);
  RunMetrics m = run_training(tiny_cfg(TrainMode::kHybridOpt), data);
  EXPECT_FALSE(m.aborted) << m.abort_reason;
  EXPECT_TRUE(m.conservation_ok);
  EXPECT_EQ(m.steps_run, 20u);
  EXPECT_GT(m.final_auc, 0.0);
}

TEST(RunTest, AsyncCompletesWithPeriodicAveraging) {
  Dataset data = generate_synthetic(tiny_synth(), 7);
  TrainConfig c = tiny_cfg(TrainMode::kAsync);
  c.average_every = 5;
  RunMetrics m = run_training(c, data);
  EXPECT_FALSE(m.aborted) << m.abort_reason;
  EXPECT_TRUE(m.conservation_ok);
  EXPECT_EQ(m.steps_run, 20u);
}

TEST(RunTest, CompressedValuesRoundTheFullLoop) {
  Dataset data = generate_synthetic(tiny_synth(), 8);
  TrainConfig c = tiny_cfg(TrainMode::kHybridOpt);
  c.compress_values = true;
  RunMetrics m = run_training(c, data);
  EXPECT_FALSE(m.aborted) << m.abort_reason;
  EXPECT_TRUE(m.conservation_ok);
  EXPECT_GT(m.final_auc, 0.0);
}

TEST(RunTest, TraceRowsAscendWithThroughput) {
  Dataset data = generate_synthetic(tiny_synth(), 9);
  RunMetrics m = run_training(tiny_cfg(TrainMode::kHybridRaw), data);
  ASSERT_FALSE(m.trace.empty());
  uint64_t prev = 0;
  for (const TraceRow& r : m.trace) {
    EXPECT_GE(r.step, prev);
    prev = r.step;
    EXPECT_GE(r.samples_per_sec, 0.0);
  }
}

// --- fault drills -----------------------------------------------------------

TEST(DrillTest, EmbeddingWorkerKillDropsButConserves) {
  Dataset data = generate_synthetic(tiny_synth(), 10);
  TrainConfig c = tiny_cfg(TrainMode::kHybridOpt);
  c.sim_fetch_latency_ms = 1;  // stretch the run so the drill lands mid-flight
  FaultEvent f;
  f.target = FaultEvent::Target::kEmbeddingWorker;
  f.index = 0;
  f.at_step = 2;
  f.window_ms = 40;
  c.faults = {f};
  RunMetrics m = run_training(c, data);
  EXPECT_FALSE(m.aborted) << m.abort_reason;
  EXPECT_TRUE(m.conservation_ok)
      << "dispatched " << m.dispatched << " trained " << m.trained << " pull_drops "
      << m.pull_drops << " drained " << m.drained;
  EXPECT_GT(m.pull_drops + m.ew_dropped_entries, 0u);
}

TEST(DrillTest, PsKillRestoresCheckpointImage) {
  Dataset data = generate_synthetic(tiny_synth(), 11);
  TrainConfig c = tiny_cfg(TrainMode::kHybridRaw);
  c.sim_fetch_latency_ms = 1;
  c.checkpoint_every = 5;  // the probed image must hold trained rows
  FaultEvent f;
  f.target = FaultEvent::Target::kEmbeddingPs;
  f.index = 0;
  f.at_step = 7;
  f.window_ms = 30;
  c.faults = {f};
  RunMetrics m = run_training(c, data);
  EXPECT_FALSE(m.aborted) << m.abort_reason;
  EXPECT_TRUE(m.conservation_ok);
  EXPECT_GT(m.ps_probe_rows, 0u);
  EXPECT_EQ(m.ps_probe_mismatches, 0u);
}

TEST(DrillTest, PsKillWithoutCheckpointIsUnrecoverable) {
  Dataset data = generate_synthetic(tiny_synth(), 12);
  TrainConfig c = tiny_cfg(TrainMode::kHybridRaw);
  c.sim_fetch_latency_ms = 1;
  c.initial_checkpoint = false;
  c.checkpoint_every = 1000;  // never reached in 20 steps
  FaultEvent f;
  f.target = FaultEvent::Target::kEmbeddingPs;
  f.index = 0;
  f.at_step = 2;
  c.faults = {f};
  RunMetrics m = run_training(c, data);
  EXPECT_TRUE(m.aborted);
  EXPECT_NE(m.abort_reason.find("checkpoint"), std::string::npos) << m.abort_reason;
}

TEST(DrillTest, NnKillRecoversEveryReplicaFromCheckpoint) {
  Dataset data = generate_synthetic(tiny_synth(), 13);
  TrainConfig c = tiny_cfg(TrainMode::kHybridOpt);
  c.sim_fetch_latency_ms = 1;
  c.allreduce_timeout_ms = 300;
  FaultEvent f;
  f.target = FaultEvent::Target::kNnWorker;
  f.index = 1;
  f.at_step = 3;
  c.faults = {f};
  RunMetrics m = run_training(c, data);
  EXPECT_FALSE(m.aborted) << m.abort_reason;
  EXPECT_TRUE(m.conservation_ok);
  ASSERT_GE(m.recoveries, 1u);
  ASSERT_EQ(m.recovery_hashes.size(), size_t(2) * m.recoveries);
  for (uint64_t h : m.recovery_hashes) {
    EXPECT_EQ(h, m.recovery_checkpoint_hash);
  }
}

// --- divergence -------------------------------------------------------------

TEST(DivergenceTest, SyncRunAbortsOnNonFiniteLoss) {
  Dataset data = generate_synthetic(tiny_synth(), 14);
  TrainConfig c = tiny_cfg(TrainMode::kSync);
  c.dense_lr = 1e30f;  // first update overflows the parameters
  RunMetrics m = run_training(c, data);
  EXPECT_TRUE(m.aborted);
  EXPECT_NE(m.abort_reason.find("trainer"), std::string::npos) << m.abort_reason;
}

TEST(DivergenceTest, AsyncRunMeasuresDivergenceAndFinishes) {
  Dataset data = generate_synthetic(tiny_synth(), 15);
  TrainConfig c = tiny_cfg(TrainMode::kAsync);
  c.dense_lr = 1e30f;
  RunMetrics m = run_training(c, data);
  EXPECT_FALSE(m.aborted) << m.abort_reason;
  EXPECT_GT(m.diverged_batches, 0u);
  EXPECT_EQ(m.steps_run, 20u);
  EXPECT_TRUE(m.conservation_ok);
}

// --- comparison and reports ---------------------------------------------------

TEST(CompareTest, ThreeModeComparisonComputesGapsAndSpeedups) {
  Dataset data = generate_synthetic(tiny_synth(), 16);
  TrainConfig c = tiny_cfg(TrainMode::kSync);
  c.total_steps = 10;
  ModeComparison cmp = compare_modes(c, data);
  EXPECT_FALSE(cmp.partial);
  EXPECT_EQ(cmp.sync.mode, TrainMode::kSync);
  EXPECT_EQ(cmp.hybrid.mode, TrainMode::kHybridOpt);
  EXPECT_EQ(cmp.async.mode, TrainMode::kAsync);
  EXPECT_GE(cmp.auc_gap_hybrid, 0.0);
  EXPECT_GE(cmp.auc_gap_async, 0.0);
  EXPECT_GT(cmp.speedup_hybrid, 0.0);
  EXPECT_GT(cmp.speedup_async, 0.0);

  std::string path = testing::TempDir() + "cmp_modes.csv";
  write_comparison_csv(cmp, path);
  std::string text = slurp(path);
  EXPECT_NE(text.find("hybrid_opt"), std::string::npos);
  EXPECT_NE(text.find("async"), std::string::npos);
  std::remove(path.c_str());
}

TEST(ReportTest, CsvAndJsonArtifactsAreWellFormed) {
  Dataset data = generate_synthetic(tiny_synth(), 17);
  RunMetrics m = run_training(tiny_cfg(TrainMode::kSync), data);
  ASSERT_FALSE(m.aborted) << m.abort_reason;

  std::string csv_path = testing::TempDir() + "metrics.csv";
  std::string json_path = testing::TempDir() + "report.json";
  write_metrics_csv(m, csv_path);
  write_report_json(m, json_path);

  std::string csv = slurp(csv_path);
  EXPECT_EQ(csv.rfind("step,loss,auc,samples_per_sec,max_staleness,drops\n", 0), 0u);
  size_t rows = static_cast<size_t>(std::count(csv.begin(), csv.end(), '\n'));
  EXPECT_EQ(rows, m.trace.size() + 1);

  std::string json = slurp(json_path);
  EXPECT_NE(json.find("\"mode\": \"sync\""), std::string::npos);
  EXPECT_NE(json.find("\"conservation_ok\": true"), std::string::npos);
  EXPECT_NE(json.find("\"aborted\": false"), std::string::npos);
  EXPECT_EQ(std::count(json.begin(), json.end(), '{'), 1);
  EXPECT_EQ(std::count(json.begin(), json.end(), '}'), 1);
  std::remove(csv_path.c_str());
  std::remove(json_path.c_str());
}

}  // namespace
}  // namespace hybridps
