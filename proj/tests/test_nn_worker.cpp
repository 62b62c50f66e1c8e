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

#include "hybridps/nn_worker.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <future>
#include <limits>
#include <memory>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "hybridps/core.hpp"
#include "hybridps/dense_nn.hpp"
#include "hybridps/embedding_ps.hpp"
#include "hybridps/embedding_worker.hpp"
#include "hybridps/errors.hpp"
#include "hybridps/staleness.hpp"
#include "hybridps/transport.hpp"
#include "hybridps/wire.hpp"

namespace hybridps {
namespace {

NnWorkerConfig nn_cfg(uint32_t groups, uint32_t dim, uint32_t non_id, uint32_t batch = 4,
                      size_t capacity = 64) {
  NnWorkerConfig c;
  c.group_count = groups;
  c.embedding_dim = dim;
  c.non_id_dim = non_id;
  c.batch_size = batch;
  c.hidden = {3};
  c.init_seed = 11;
  c.buffer_capacity = capacity;
  return c;
}

NonIdFeatures dense(std::vector<float> v) {
  NonIdFeatures f;
  f.dense = std::move(v);
  return f;
}

IdFeatures features(std::vector<std::vector<uint64_t>> groups) {
  IdFeatures f;
  f.groups = std::move(groups);
  return f;
}

// A worker with an inert endpoint, for tests that never touch the wire.
struct Bench {
  LocalHub hub;
  std::vector<std::shared_ptr<Endpoint>> eps;

  Bench() {
    hub.serve("void", [](const Frame&) {
      Frame f;
      f.type = MsgType::kAck;
      return f;
    });
    eps.push_back(hub.endpoint("void"));
  }
};

Minibatch manual_batch(std::vector<std::vector<float>> emb, std::vector<std::vector<float>> nid,
                       std::vector<float> labels) {
  Minibatch m;
  for (size_t i = 0; i < labels.size(); ++i) {
    m.sample_ids.push_back(encode_sample_id(0, i));
    m.read_versions.push_back({});
  }
  m.embeddings = std::move(emb);
  m.non_id = std::move(nid);
  m.labels = std::move(labels);
  return m;
}

// Parameter-server shards plus embedding workers behind one LocalHub, the
// full substrate an NN worker trains against.
struct Cluster {
  uint32_t shard_count;
  LocalHub hub;
  std::vector<std::unique_ptr<PsShard>> shards;
  std::vector<std::shared_ptr<Endpoint>> ps_eps;
  std::vector<std::unique_ptr<EmbeddingWorker>> ews;
  std::vector<std::shared_ptr<Endpoint>> ew_eps;
  StepClock clock;

  Cluster(uint32_t ps_count, uint32_t ew_count, uint32_t groups, uint32_t dim,
          uint32_t trainer_count = 1, size_t ew_capacity = 256)
      : shard_count(ps_count), clock(trainer_count) {
    for (uint32_t s = 0; s < ps_count; ++s) {
      PsShardConfig c;
      c.capacity = 1 << 10;
      c.embedding_dim = dim;
      c.optimizer = EmbOptimizer::kSgd;
      c.rng_salt = mix64(7 + s);
      shards.push_back(std::make_unique<PsShard>(c));
      std::string name = "ps" + std::to_string(s);
      hub.serve(name, PsShardService(*shards[s], false));
      ps_eps.push_back(hub.endpoint(name));
    }
    for (uint32_t w = 0; w < ew_count; ++w) {
      EmbeddingWorkerConfig c;
      c.rank = w;
      c.group_count = groups;
      c.embedding_dim = dim;
      c.buffer_capacity = ew_capacity;
      ews.push_back(std::make_unique<EmbeddingWorker>(c, ps_eps, &clock));
      std::string name = "ew" + std::to_string(w);
      EmbeddingWorker* ewp = ews[w].get();
      hub.serve(name, [ewp](const Frame& f) { return ewp->handle(f); });
      ew_eps.push_back(hub.endpoint(name));
    }
  }

  std::vector<float> row(uint64_t id) {
    return shards[route_shard(id, shard_count)]->lookup_map({id}).at(id);
  }
};

// ---------------------------------------------------------------------------
// Construction.
// ---------------------------------------------------------------------------

TEST(NnWorkerConfigTest, RejectsDegenerateConfigs) {
  Bench b;
  auto ok = nn_cfg(2, 4, 1);
  EXPECT_NO_THROW(NnWorker(ok, b.eps));

  auto bad = ok;
  bad.group_count = 0;
  EXPECT_THROW(NnWorker(bad, b.eps), ConfigError);
  bad = ok;
  bad.embedding_dim = 0;
  EXPECT_THROW(NnWorker(bad, b.eps), ConfigError);
  bad = ok;
  bad.batch_size = 0;
  EXPECT_THROW(NnWorker(bad, b.eps), ConfigError);
  bad = ok;
  bad.batch_size = 70000;
  EXPECT_THROW(NnWorker(bad, b.eps), ConfigError);
  bad = ok;
  bad.buffer_capacity = 0;
  EXPECT_THROW(NnWorker(bad, b.eps), ConfigError);
  EXPECT_THROW(NnWorker(ok, {}), ConfigError);
}

TEST(NnWorkerConfigTest, SameSeedGivesIdenticalReplicas) {
  Bench b;
  NnWorker a(nn_cfg(2, 4, 1), b.eps);
  NnWorker c(nn_cfg(2, 4, 1), b.eps);
  EXPECT_EQ(a.param_hash(), c.param_hash());

  auto other = nn_cfg(2, 4, 1);
  other.init_seed = 12;
  NnWorker d(other, b.eps);
  EXPECT_NE(a.param_hash(), d.param_hash());
}

// ---------------------------------------------------------------------------
// Input buffering.
// ---------------------------------------------------------------------------

TEST(BufferTest, PullMakesSampleEligible) {
  Cluster cl(2, 1, 1, 4);
  SampleId sid = cl.ews[0]->register_sample(features({{42}}));
  std::vector<float> row = cl.row(42);

  NnWorker nn(nn_cfg(1, 4, 2), cl.ew_eps);
  nn.buffer_input(sid, dense({0.5f, -0.25f}), Label{1.0f});
  EXPECT_EQ(nn.eligible_count(), 1u);
  EXPECT_EQ(nn.pull_drops(), 0u);

  auto batch = nn.try_assemble(1);
  ASSERT_TRUE(batch.has_value());
  ASSERT_EQ(batch->sample_ids.size(), 1u);
  EXPECT_EQ(batch->sample_ids[0], sid);
  EXPECT_EQ(batch->embeddings[0], row);  // single listing: mean is the row
  EXPECT_EQ(batch->non_id[0], (std::vector<float>{0.5f, -0.25f}));
  EXPECT_EQ(batch->labels[0], 1.0f);
  EXPECT_EQ(batch->read_versions[0], (std::vector<uint64_t>{0}));
  EXPECT_EQ(nn.eligible_count(), 0u);
}

TEST(BufferTest, DuplicateSampleRejected) {
  Cluster cl(1, 1, 1, 4);
  SampleId sid = cl.ews[0]->register_sample(features({{1}}));
  NnWorker nn(nn_cfg(1, 4, 0), cl.ew_eps);
  nn.buffer_input(sid, dense({}), Label{0.0f});
  EXPECT_THROW(nn.buffer_input(sid, dense({}), Label{0.0f}), ProtocolError);
  EXPECT_EQ(nn.eligible_count(), 1u);
}

TEST(BufferTest, RoutesPullToIssuingWorker) {
  Cluster cl(2, 2, 1, 4);
  SampleId s0 = cl.ews[0]->register_sample(features({{100}}));
  SampleId s1 = cl.ews[1]->register_sample(features({{200}}));
  ASSERT_EQ(decode_rank(s0), 0u);
  ASSERT_EQ(decode_rank(s1), 1u);

  NnWorker nn(nn_cfg(1, 4, 0, 2), cl.ew_eps);
  nn.buffer_input(s1, dense({}), Label{1.0f});
  nn.buffer_input(s0, dense({}), Label{0.0f});

  auto batch = nn.try_assemble(2);
  ASSERT_TRUE(batch.has_value());
  // FIFO preserves arrival order; each sample carries its own worker's row.
  EXPECT_EQ(batch->sample_ids[0], s1);
  EXPECT_EQ(batch->embeddings[0], cl.row(200));
  EXPECT_EQ(batch->sample_ids[1], s0);
  EXPECT_EQ(batch->embeddings[1], cl.row(100));
}

TEST(BufferTest, FailedPullCountsDropAndSkipsSample) {
  Cluster cl(1, 1, 1, 4);
  NnWorker nn(nn_cfg(1, 4, 0), cl.ew_eps);

  // Never registered: the worker rejects the pull and the sample is dropped.
  nn.buffer_input(encode_sample_id(0, 999), dense({}), Label{0.0f});
  EXPECT_EQ(nn.pull_drops(), 1u);
  EXPECT_EQ(nn.eligible_count(), 0u);

  // No such worker rank.
  nn.buffer_input(encode_sample_id(5, 0), dense({}), Label{0.0f});
  EXPECT_EQ(nn.pull_drops(), 2u);
  EXPECT_EQ(nn.eligible_count(), 0u);

  // A dropped id is not poisoned; it can be buffered again once it exists.
  SampleId sid = cl.ews[0]->register_sample(features({{3}}));
  ASSERT_EQ(sid, encode_sample_id(0, 0));
  nn.buffer_input(sid, dense({}), Label{0.0f});
  EXPECT_EQ(nn.eligible_count(), 1u);
}

TEST(BufferTest, CapacityBackpressureCountsEligibleSamples) {
  Cluster cl(1, 1, 1, 4);
  auto cfg = nn_cfg(1, 4, 0, 2, /*capacity=*/2);
  NnWorker nn(cfg, cl.ew_eps);
  SampleId a = cl.ews[0]->register_sample(features({{1}}));
  SampleId b = cl.ews[0]->register_sample(features({{2}}));
  SampleId c = cl.ews[0]->register_sample(features({{3}}));

  nn.buffer_input(a, dense({}), Label{0.0f});
  nn.buffer_input(b, dense({}), Label{0.0f});
  EXPECT_THROW(nn.buffer_input(c, dense({}), Label{0.0f}), BackpressureError);

  // Assembly frees the slots.
  ASSERT_TRUE(nn.try_assemble(2).has_value());
  nn.buffer_input(c, dense({}), Label{0.0f});
  EXPECT_EQ(nn.eligible_count(), 1u);
}

TEST(BufferTest, OutOfOrderCompletionPreservesReservationOrder) {
  Cluster cl(1, 1, 1, 4);
  NnWorker nn(nn_cfg(1, 4, 0, 4, 16), cl.ew_eps);
  SampleId a = cl.ews[0]->register_sample(features({{1}}));
  SampleId b = cl.ews[0]->register_sample(features({{2}}));
  SampleId c = cl.ews[0]->register_sample(features({{3}}));
  nn.reserve_slot(a, dense({}), Label{0.0f});
  nn.reserve_slot(b, dense({}), Label{0.0f});
  nn.reserve_slot(c, dense({}), Label{0.0f});

  nn.complete_slot(c);
  nn.complete_slot(b);
  EXPECT_EQ(nn.eligible_count(), 0u);  // head of the order still pending
  nn.complete_slot(a);
  EXPECT_EQ(nn.eligible_count(), 3u);

  auto batch = nn.try_assemble(3);
  ASSERT_TRUE(batch.has_value());
  EXPECT_EQ(batch->sample_ids, (std::vector<SampleId>{a, b, c}));
}

TEST(BufferTest, DroppedSlotLeavesNoHoleInEligibility) {
  Cluster cl(1, 1, 1, 4);
  NnWorker nn(nn_cfg(1, 4, 0, 4, 16), cl.ew_eps);
  SampleId a = cl.ews[0]->register_sample(features({{1}}));
  SampleId ghost = encode_sample_id(0, 999);  // never registered
  SampleId c = cl.ews[0]->register_sample(features({{3}}));
  nn.reserve_slot(a, dense({}), Label{0.0f});
  nn.reserve_slot(ghost, dense({}), Label{0.0f});
  nn.reserve_slot(c, dense({}), Label{0.0f});

  nn.complete_slot(ghost);  // failed pull becomes a skipped slot
  nn.complete_slot(c);
  EXPECT_EQ(nn.eligible_count(), 0u);
  nn.complete_slot(a);
  EXPECT_EQ(nn.pull_drops(), 1u);

  auto batch = nn.try_assemble(2);
  ASSERT_TRUE(batch.has_value());
  EXPECT_EQ(batch->sample_ids, (std::vector<SampleId>{a, c}));
}

// ---------------------------------------------------------------------------
// Minibatch assembly.
// ---------------------------------------------------------------------------

TEST(AssembleTest, FifoOrderAndWouldBlock) {
  Cluster cl(1, 1, 1, 4);
  NnWorker nn(nn_cfg(1, 4, 0, 4, 16), cl.ew_eps);

  std::vector<SampleId> sids;
  for (int i = 0; i < 3; ++i) {
    sids.push_back(cl.ews[0]->register_sample(features({{uint64_t(10 + i)}})));
    nn.buffer_input(sids.back(), dense({}), Label{0.0f});
  }
  EXPECT_FALSE(nn.try_assemble().has_value());  // three eligible, batch is four

  sids.push_back(cl.ews[0]->register_sample(features({{13}})));
  nn.buffer_input(sids.back(), dense({}), Label{0.0f});
  auto batch = nn.try_assemble();
  ASSERT_TRUE(batch.has_value());
  EXPECT_EQ(batch->sample_ids, sids);
  EXPECT_EQ(nn.trained_count(), 4u);

  EXPECT_THROW(nn.try_assemble(5), PreconditionError);  // above configured size
}

TEST(AssembleTest, SeededShuffleIsDeterministicAndConserving) {
  Cluster cl(1, 1, 1, 4);
  auto cfg = nn_cfg(1, 4, 0, 4, 16);
  cfg.shuffle = true;
  cfg.shuffle_seed = 99;
  NnWorker a(cfg, cl.ew_eps);
  NnWorker b(cfg, cl.ew_eps);

  std::vector<SampleId> sids;
  for (int i = 0; i < 8; ++i) {
    sids.push_back(cl.ews[0]->register_sample(features({{uint64_t(i)}})));
    a.buffer_input(sids.back(), dense({}), Label{0.0f});
    b.buffer_input(sids.back(), dense({}), Label{0.0f});
  }

  auto a1 = a.try_assemble(4);
  auto a2 = a.try_assemble(4);
  auto b1 = b.try_assemble(4);
  auto b2 = b.try_assemble(4);
  ASSERT_TRUE(a1 && a2 && b1 && b2);
  EXPECT_EQ(a1->sample_ids, b1->sample_ids);  // same seed, same order
  EXPECT_EQ(a2->sample_ids, b2->sample_ids);

  std::multiset<uint64_t> seen;
  for (auto s : a1->sample_ids) seen.insert(s.raw);
  for (auto s : a2->sample_ids) seen.insert(s.raw);
  std::multiset<uint64_t> all;
  for (auto s : sids) all.insert(s.raw);
  EXPECT_EQ(seen, all);  // every sample exactly once
}

TEST(AssembleTest, EligibleExactlyOnceUnderInterleaving) {
  Cluster cl(2, 1, 1, 2, 1, /*ew_capacity=*/1024);
  NnWorker nn(nn_cfg(1, 2, 0, 1, 1024), cl.ew_eps);

  constexpr int kSamples = 600;
  std::vector<SampleId> sids;
  for (int i = 0; i < kSamples; ++i) {
    sids.push_back(cl.ews[0]->register_sample(features({{uint64_t(i % 37)}})));
  }

  std::thread producer([&] {
    for (SampleId sid : sids) nn.buffer_input(sid, dense({}), Label{0.0f});
  });
  std::multiset<uint64_t> seen;
  while (seen.size() < size_t(kSamples)) {
    auto batch = nn.try_assemble(1);
    if (batch) seen.insert(batch->sample_ids[0].raw);
  }
  producer.join();

  std::multiset<uint64_t> all;
  for (auto s : sids) all.insert(s.raw);
  EXPECT_EQ(seen, all);
  EXPECT_FALSE(nn.try_assemble(1).has_value());
  EXPECT_EQ(nn.trained_count(), uint64_t(kSamples));
}

// ---------------------------------------------------------------------------
// Dense training math.
// ---------------------------------------------------------------------------

TEST(TrainStepTest, MatchesDirectComposition) {
  Bench bench;
  NnWorker nn(nn_cfg(2, 2, 1, 2), bench.eps);

  Minibatch m = manual_batch({{0.5f, -1.0f, 0.25f, 2.0f}, {1.5f, 0.0f, -0.5f, 1.0f}},
                             {{0.75f}, {-0.125f}}, {1.0f, 0.0f});
  GradientBundle g = nn.train_step(m);

  // Same dims, same seed, same inputs: the composed pipeline must agree
  // bit for bit with calling the net directly.
  Rng rng(mix64(11));
  DenseNet<float> ref({5, 3}, rng);
  std::vector<std::vector<float>> inputs = {{0.5f, -1.0f, 0.25f, 2.0f, 0.75f},
                                            {1.5f, 0.0f, -0.5f, 1.0f, -0.125f}};
  BatchResult<float> res = batch_forward_backward(ref, inputs, {1.0f, 0.0f});

  EXPECT_EQ(g.mean_loss, res.mean_loss);
  EXPECT_EQ(g.probs, res.probs);
  EXPECT_EQ(g.dense_grad, res.dense_grad);
  ASSERT_EQ(g.embedding_grads.size(), 2u);
  for (size_t i = 0; i < 2; ++i) {
    ASSERT_EQ(g.embedding_grads[i].size(), 4u);
    for (size_t d = 0; d < 4; ++d) EXPECT_EQ(g.embedding_grads[i][d], res.input_grads[i][d]);
  }
}

TEST(TrainStepTest, DuplicatedSampleBatchMatchesSingle) {
  Bench bench;
  NnWorker nn(nn_cfg(1, 2, 1, 2), bench.eps);

  std::vector<float> emb = {0.5f, -0.75f};
  std::vector<float> nid = {0.25f};
  Minibatch one = manual_batch({emb}, {nid}, {1.0f});
  Minibatch two = manual_batch({emb, emb}, {nid, nid}, {1.0f, 1.0f});

  GradientBundle g1 = nn.train_step(one);
  GradientBundle g2 = nn.train_step(two);
  // (g + g) / 2 is exact in binary floating point, so the dense gradient of
  // the mean is unchanged by duplication.
  EXPECT_EQ(g1.mean_loss, g2.mean_loss);
  EXPECT_EQ(g1.dense_grad, g2.dense_grad);
  // Per-sample embedding gradients are gradients of the mean: each copy
  // carries half, and together they write back exactly the single-sample
  // gradient.
  EXPECT_EQ(g2.embedding_grads[0], g2.embedding_grads[1]);
  for (size_t d = 0; d < g1.embedding_grads[0].size(); ++d) {
    EXPECT_EQ(g2.embedding_grads[0][d] + g2.embedding_grads[1][d], g1.embedding_grads[0][d]);
  }
}

TEST(TrainStepTest, HalfPredictionGivesHalfOutputBiasGrad) {
  Bench bench;
  auto cfg = nn_cfg(1, 2, 1, 1);
  cfg.hidden = {};  // single linear layer
  NnWorker nn(cfg, bench.eps);
  std::fill(nn.net().params().begin(), nn.net().params().end(), 0.0f);

  Minibatch m = manual_batch({{0.3f, -0.6f}}, {{0.9f}}, {0.0f});
  GradientBundle g = nn.train_step(m);
  EXPECT_EQ(g.probs[0], 0.5f);  // zero logits

  size_t bias_idx = static_cast<size_t>(nn.net().biases(0) - nn.net().params().data());
  EXPECT_EQ(g.dense_grad[bias_idx], 0.5f);  // dL/dz = p - y
}

TEST(TrainStepTest, NonFiniteLossThrowsDivergence) {
  Bench bench;
  NnWorker nn(nn_cfg(1, 2, 0, 1), bench.eps);
  Minibatch m = manual_batch({{0.5f, 0.5f}}, {{}}, {std::numeric_limits<float>::quiet_NaN()});
  EXPECT_THROW(nn.train_step(m), DivergenceError);
}

TEST(TrainStepTest, MalformedSampleRejected) {
  Bench bench;
  NnWorker nn(nn_cfg(1, 2, 1, 2), bench.eps);
  Minibatch empty;
  EXPECT_THROW(nn.train_step(empty), PreconditionError);
  Minibatch bad = manual_batch({{0.5f}}, {{0.0f}}, {1.0f});  // short embedding
  EXPECT_THROW(nn.train_step(bad), PreconditionError);
}

// ---------------------------------------------------------------------------
// AllReduce.
// ---------------------------------------------------------------------------

TEST(AllReduceTest, SingleWorkerIsIdentity) {
  AllReduceHub hub(1);
  std::vector<float> g = {1.5f, -2.25f, 0.0f};
  EXPECT_EQ(hub.reduce(0, 0, g), g);
}

TEST(AllReduceTest, EqualContributionsReturnTheMean) {
  AllReduceHub hub(4);
  std::vector<float> g = {0.5f, -1.25f, 3.0f};
  std::vector<std::future<std::vector<float>>> outs;
  for (uint32_t r = 0; r < 4; ++r) {
    outs.push_back(std::async(std::launch::async, [&, r] { return hub.reduce(r, 7, g); }));
  }
  // 4g/4 sums and divides exactly.
  for (auto& f : outs) EXPECT_EQ(f.get(), g);
}

TEST(AllReduceTest, MatchesWideAccumulatorReference) {
  constexpr uint32_t kWorkers = 4;
  constexpr size_t kDim = 1000;
  Rng rng(314);
  std::vector<std::vector<float>> grads(kWorkers, std::vector<float>(kDim));
  for (auto& g : grads) {
    for (auto& x : g) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  }

  AllReduceHub hub(kWorkers);
  std::vector<std::future<std::vector<float>>> outs;
  for (uint32_t r = 0; r < kWorkers; ++r) {
    outs.push_back(
        std::async(std::launch::async, [&, r] { return hub.reduce(r, 0, grads[r]); }));
  }
  std::vector<std::vector<float>> results;
  for (auto& f : outs) results.push_back(f.get());

  // Replicas agree bit for bit.
  for (uint32_t r = 1; r < kWorkers; ++r) EXPECT_EQ(results[r], results[0]);

  // And track a 64-bit sequential mean closely.
  for (size_t i = 0; i < kDim; ++i) {
    double ref = 0.0;
    for (uint32_t r = 0; r < kWorkers; ++r) ref += grads[r][i];
    ref /= kWorkers;
    double tol = 1e-6 * std::max(1.0, std::abs(ref));
    EXPECT_NEAR(results[0][i], ref, tol) << "element " << i;
  }
}

TEST(AllReduceTest, ChunkedMatchesWhole) {
  constexpr uint32_t kWorkers = 4;
  constexpr size_t kDim = 10;  // chunks of 4, 4, 2
  Rng rng(159);
  std::vector<std::vector<float>> grads(kWorkers, std::vector<float>(kDim));
  for (auto& g : grads) {
    for (auto& x : g) x = static_cast<float>(rng.uniform(-2.0, 2.0));
  }

  AllReduceHub hub(kWorkers);
  auto run = [&](uint64_t round, bool chunked) {
    std::vector<std::future<std::vector<float>>> outs;
    for (uint32_t r = 0; r < kWorkers; ++r) {
      outs.push_back(std::async(std::launch::async, [&, r] {
        return chunked ? hub.reduce_chunked(r, round, grads[r], 3)
                       : hub.reduce(r, round, grads[r]);
      }));
    }
    std::vector<std::vector<float>> results;
    for (auto& f : outs) results.push_back(f.get());
    return results;
  };

  auto whole = run(1, false);
  auto chunked = run(2, true);
  for (uint32_t r = 0; r < kWorkers; ++r) {
    EXPECT_EQ(chunked[r], whole[0]);  // chunk boundaries cannot move the tree
  }
}

TEST(AllReduceTest, MissingWorkerPoisonsRound) {
  AllReduceHub hub(2, /*timeout_ms=*/100);
  auto start = std::chrono::steady_clock::now();
  EXPECT_THROW(hub.reduce(0, 0, {1.0f}), SyncFailureError);
  auto elapsed = std::chrono::steady_clock::now() - start;
  EXPECT_LT(elapsed, std::chrono::seconds(2));

  // The late worker hits the poisoned round, never a silent partial mean.
  EXPECT_THROW(hub.reduce(1, 0, {1.0f}), SyncFailureError);
}

TEST(AllReduceTest, ShapeMismatchFailsEveryone) {
  AllReduceHub hub(2, /*timeout_ms=*/5000);
  auto waiter = std::async(std::launch::async,
                           [&] { return hub.reduce(0, 3, std::vector<float>{1.0f, 2.0f}); });
  // Give the waiter time to park before contributing the bad shape.
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  EXPECT_THROW(hub.reduce(1, 3, {1.0f, 2.0f, 3.0f}), PreconditionError);
  EXPECT_THROW(waiter.get(), SyncFailureError);
}

TEST(AllReduceTest, DuplicateRankFailsRound) {
  AllReduceHub hub(2, /*timeout_ms=*/5000);
  auto waiter = std::async(std::launch::async,
                           [&] { return hub.reduce(0, 4, std::vector<float>{1.0f}); });
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  EXPECT_THROW(hub.reduce(0, 4, {2.0f}), ProtocolError);
  EXPECT_THROW(waiter.get(), SyncFailureError);

  AllReduceHub strict(2);
  EXPECT_THROW(strict.reduce(9, 0, {1.0f}), PreconditionError);  // rank out of range
}

TEST(AllReduceTest, ResetAbandonsWaitersAndAllowsRestart) {
  AllReduceHub hub(2, /*timeout_ms=*/5000);
  auto waiter = std::async(std::launch::async,
                           [&] { return hub.reduce(0, 5, std::vector<float>{1.0f}); });
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  hub.reset();
  EXPECT_THROW(waiter.get(), SyncFailureError);

  // A fresh round on the same hub completes normally.
  auto a = std::async(std::launch::async,
                      [&] { return hub.reduce(0, 6, std::vector<float>{2.0f}); });
  auto b = hub.reduce(1, 6, {4.0f});
  EXPECT_EQ(b, (std::vector<float>{3.0f}));
  EXPECT_EQ(a.get(), b);
}

TEST(AllReduceTest, FrameBindingRoundTrips) {
  AllReduceHub ar(2);
  LocalHub hub;
  hub.serve("ar", [&ar](const Frame& f) { return ar.handle(f); });
  auto e0 = hub.endpoint("ar");
  auto e1 = hub.endpoint("ar");

  std::vector<float> g0 = {1.0f, -2.0f};
  std::vector<float> g1 = {3.0f, 5.0f};
  auto remote = std::async(std::launch::async, [&] {
    return parse_allreduce_reply(e0->request_ok(make_allreduce_frame(0, 0, 0, g0)));
  });
  std::vector<float> r1 = parse_allreduce_reply(e1->request_ok(make_allreduce_frame(1, 0, 0, g1)));
  std::vector<float> r0 = remote.get();

  std::vector<float> expect(2);
  for (size_t i = 0; i < 2; ++i) expect[i] = (g0[i] + g1[i]) / 2.0f;
  EXPECT_EQ(r0, expect);
  EXPECT_EQ(r1, expect);
}

// ---------------------------------------------------------------------------
// Replica consistency.
// ---------------------------------------------------------------------------

TEST(DenseSyncTest, ReplicasStayBitIdenticalThroughSyncedUpdates) {
  Bench bench;
  NnWorker a(nn_cfg(1, 2, 1, 2), bench.eps);
  NnWorker b(nn_cfg(1, 2, 1, 2), bench.eps);
  ASSERT_EQ(a.param_hash(), b.param_hash());

  // Different local batches, shared averaged gradient.
  Minibatch ma = manual_batch({{0.5f, -0.5f}}, {{1.0f}}, {1.0f});
  Minibatch mb = manual_batch({{-1.0f, 0.25f}}, {{0.0f}}, {0.0f});
  AllReduceHub hub(2);
  for (uint64_t round = 0; round < 3; ++round) {
    GradientBundle ga = a.train_step(ma);
    GradientBundle gb = b.train_step(mb);
    auto ra = std::async(std::launch::async,
                         [&] { return hub.reduce(0, round, ga.dense_grad); });
    std::vector<float> rb = hub.reduce(1, round, gb.dense_grad);
    a.apply_dense_update(ra.get(), 0.1f);
    b.apply_dense_update(rb, 0.1f);
    EXPECT_EQ(a.param_hash(), b.param_hash()) << "round " << round;
  }
  EXPECT_NO_THROW(verify_replica_hashes({a.param_hash(), b.param_hash()}));

  a.net().params()[0] += 1e-6f;
  EXPECT_THROW(verify_replica_hashes({a.param_hash(), b.param_hash()}), ConsistencyError);
  EXPECT_THROW(verify_replica_hashes({}), PreconditionError);
}

// ---------------------------------------------------------------------------
// Gradient return path.
// ---------------------------------------------------------------------------

TEST(EmitTest, PushReachesIssuingWorkerAndCompletesStep) {
  Cluster cl(2, 1, 1, 4);
  SampleId sid = cl.ews[0]->register_sample(features({{5}}));
  std::vector<float> before = cl.row(5);

  NnWorker nn(nn_cfg(1, 4, 1, 1), cl.ew_eps, &cl.clock);
  cl.clock.register_batch(0, 1);
  nn.buffer_input(sid, dense({0.5f}), Label{1.0f});
  auto batch = nn.try_assemble(1);
  ASSERT_TRUE(batch.has_value());
  GradientBundle g = nn.train_step(*batch);
  nn.emit_embedding_grads(*batch, g, 0.5f, 0, true);

  EXPECT_EQ(nn.grad_drops(), 0u);
  EXPECT_EQ(cl.clock.frontier(), 0);  // worker applied and marked done
  std::vector<float> after = cl.row(5);
  for (size_t d = 0; d < 4; ++d) {
    // Single listing, mean aggregation: the pushed row gradient is the
    // sample gradient itself, applied by plain SGD.
    EXPECT_EQ(after[d], before[d] - 0.5f * g.embedding_grads[0][d]);
  }
}

TEST(EmitTest, MixedRankBatchPartitionsPushes) {
  Cluster cl(2, 2, 1, 4);
  SampleId s0 = cl.ews[0]->register_sample(features({{7}}));
  SampleId s1 = cl.ews[1]->register_sample(features({{9}}));
  std::vector<float> b7 = cl.row(7);
  std::vector<float> b9 = cl.row(9);

  NnWorker nn(nn_cfg(1, 4, 0, 2), cl.ew_eps);
  nn.buffer_input(s0, dense({}), Label{1.0f});
  nn.buffer_input(s1, dense({}), Label{0.0f});
  auto batch = nn.try_assemble(2);
  ASSERT_TRUE(batch.has_value());
  GradientBundle g = nn.train_step(*batch);
  nn.emit_embedding_grads(*batch, g, 1.0f, 0, false);

  EXPECT_EQ(nn.grad_drops(), 0u);
  // Each worker consumed its own sample and applied it to the store.
  EXPECT_EQ(cl.ews[0]->buffered_count(), 0u);
  EXPECT_EQ(cl.ews[1]->buffered_count(), 0u);
  EXPECT_NE(cl.row(7), b7);
  EXPECT_NE(cl.row(9), b9);
}

TEST(EmitTest, DeadWorkerCountsDropAndCompletesStep) {
  Cluster cl(1, 1, 1, 4);
  SampleId sid = cl.ews[0]->register_sample(features({{1}}));

  NnWorker nn(nn_cfg(1, 4, 0, 1), cl.ew_eps, &cl.clock);
  cl.clock.register_batch(0, 1);
  nn.buffer_input(sid, dense({}), Label{1.0f});
  auto batch = nn.try_assemble(1);
  ASSERT_TRUE(batch.has_value());
  GradientBundle g = nn.train_step(*batch);

  cl.hub.kill("ew0");
  nn.emit_embedding_grads(*batch, g, 0.5f, 0, true);  // logged drop, no throw
  EXPECT_EQ(nn.grad_drops(), 1u);
  EXPECT_EQ(cl.clock.frontier(), 0);  // this side completes the lost sample
}

TEST(EmitTest, FlushBroadcastFailureIsFatal) {
  Cluster cl(1, 2, 1, 4);
  NnWorker nn(nn_cfg(1, 4, 0, 1), cl.ew_eps);
  EXPECT_NO_THROW(nn.broadcast_flush(0));

  cl.hub.kill("ew1");
  EXPECT_THROW(nn.broadcast_flush(1), SyncFailureError);
}

// ---------------------------------------------------------------------------
// Cross-tier pipeline.
// ---------------------------------------------------------------------------

TEST(PipelineTest, ConservationAcrossSteps) {
  Cluster cl(2, 1, 2, 4);
  NnWorker nn(nn_cfg(2, 4, 1, 4, 32), cl.ew_eps, &cl.clock);

  constexpr uint64_t kSteps = 3;
  uint64_t registered = 0;
  for (uint64_t step = 0; step < kSteps; ++step) {
    cl.clock.register_batch(step, 4);
    for (int i = 0; i < 4; ++i) {
      SampleId sid = cl.ews[0]->register_sample(
          features({{uint64_t(step * 4 + i)}, {uint64_t(100 + i), uint64_t(100 + i)}}));
      ++registered;
      nn.buffer_input(sid, dense({float(i) * 0.25f}), Label{i % 2 ? 1.0f : 0.0f});
    }
    auto batch = nn.try_assemble();
    ASSERT_TRUE(batch.has_value());
    GradientBundle g = nn.train_step(*batch);
    nn.apply_dense_update(g.dense_grad, 0.05f);
    nn.emit_embedding_grads(*batch, g, 0.05f, step, true);
    EXPECT_EQ(cl.clock.frontier(), int64_t(step));
  }

  EXPECT_EQ(registered, nn.trained_count() + nn.pull_drops() + nn.grad_drops());
  EXPECT_EQ(cl.ews[0]->registered_count(), registered);
  EXPECT_EQ(cl.ews[0]->buffered_count(), 0u);  // every sample consumed
}

TEST(PipelineTest, StalenessGateBlocksReadUntilFrontierCatchesUp) {
  Cluster cl(1, 1, 1, 4);
  auto cfg = nn_cfg(1, 4, 0, 1, 16);
  cfg.staleness_cap = 0;
  NnWorker nn(cfg, cl.ew_eps, &cl.clock);

  SampleId a = cl.ews[0]->register_sample(features({{1}}));
  SampleId b = cl.ews[0]->register_sample(features({{2}}));
  cl.clock.register_batch(0, 1);
  cl.clock.register_batch(1, 1);

  nn.buffer_input(a, dense({}), Label{0.0f});  // step 0: no older step to wait on
  auto batch = nn.try_assemble(1);
  ASSERT_TRUE(batch.has_value());
  GradientBundle g = nn.train_step(*batch);

  // Step 1's read must wait for step 0 to finish its write-back.
  auto blocked = std::async(std::launch::async,
                            [&] { nn.buffer_input(b, dense({}), Label{1.0f}); });
  EXPECT_EQ(blocked.wait_for(std::chrono::milliseconds(100)), std::future_status::timeout);

  nn.emit_embedding_grads(*batch, g, 0.5f, 0, true);
  blocked.get();
  EXPECT_EQ(nn.eligible_count(), 1u);
  EXPECT_EQ(cl.clock.frontier(), 0);
}

TEST(PipelineTest, ClockShutdownAbortsGatedRead) {
  Cluster cl(1, 1, 1, 4);
  auto cfg = nn_cfg(1, 4, 0, 1, 16);
  cfg.staleness_cap = 0;
  NnWorker nn(cfg, cl.ew_eps, &cl.clock);

  SampleId a = cl.ews[0]->register_sample(features({{1}}));
  SampleId b = cl.ews[0]->register_sample(features({{2}}));
  cl.clock.register_batch(0, 1);
  nn.buffer_input(a, dense({}), Label{0.0f});

  auto blocked = std::async(std::launch::async,
                            [&] { nn.buffer_input(b, dense({}), Label{1.0f}); });
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  cl.clock.shutdown();
  EXPECT_THROW(blocked.get(), ClockError);
  EXPECT_EQ(nn.eligible_count(), 1u);  // only the unblocked sample
}

TEST(PipelineTest, DrainDropsClearsEligibleSamples) {
  Cluster cl(1, 1, 1, 4);
  NnWorker nn(nn_cfg(1, 4, 0, 4, 16), cl.ew_eps);
  for (int i = 0; i < 3; ++i) {
    SampleId sid = cl.ews[0]->register_sample(features({{uint64_t(i)}}));
    nn.buffer_input(sid, dense({}), Label{0.0f});
  }
  EXPECT_EQ(nn.drain_drops(), 3u);
  EXPECT_EQ(nn.eligible_count(), 0u);
  EXPECT_FALSE(nn.try_assemble(1).has_value());
}

}  // namespace
}  // namespace hybridps
