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
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hybridps/core.hpp"
#include "hybridps/data.hpp"
#include "hybridps/dense_nn.hpp"
#include "hybridps/embedding_ps.hpp"
#include "hybridps/embedding_worker.hpp"
#include "hybridps/errors.hpp"
#include "hybridps/nn_worker.hpp"
#include "hybridps/staleness.hpp"
#include "hybridps/transport.hpp"
#include "hybridps/wire.hpp"

namespace hybridps {

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

enum class TrainMode : uint8_t { kSync = 0, kHybridRaw = 1, kHybridOpt = 2, kAsync = 3 };

inline const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::kSync: return "sync";
    case TrainMode::kHybridRaw: return "hybrid_raw";
    case TrainMode::kHybridOpt: return "hybrid_opt";
    case TrainMode::kAsync: return "async";
  }
  return "unknown";
}

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "sync") return TrainMode::kSync;
  if (s == "hybrid_raw") return TrainMode::kHybridRaw;
  if (s == "hybrid_opt") return TrainMode::kHybridOpt;
  if (s == "async") return TrainMode::kAsync;
  throw ConfigError("unknown training mode '" + s + "'");
}

struct FaultEvent {
  enum class Target : uint8_t { kEmbeddingWorker = 0, kEmbeddingPs = 1, kNnWorker = 2 };
  Target target = Target::kEmbeddingWorker;
  uint64_t at_step = 0;   // fires once the completion frontier reaches this step
  uint32_t index = 0;     // which worker or shard
  uint32_t window_ms = 60;  // how long the victim stays dark
};

struct TrainConfig {
  TrainMode mode = TrainMode::kHybridRaw;
  float dense_lr = 0.05f;
  float embedding_lr = 0.05f;
  uint64_t total_steps = 500;
  uint32_t batch_size = 64;
  uint32_t nn_workers = 4;
  uint32_t embedding_workers = 2;
  uint32_t ps_shards = 4;
  uint32_t ps_capacity = 1 << 16;
  uint32_t embedding_dim = 16;
  std::vector<size_t> hidden = {64, 32};
  EmbOptimizer embedding_optimizer = EmbOptimizer::kAdagrad;
  int32_t staleness_cap = 5;
  bool compress_values = false;
  uint64_t init_seed = 1;
  uint32_t eval_every = 50;
  uint32_t checkpoint_every = 200;
  uint32_t average_every = 50;        // async: model-averaging cadence
  uint32_t pull_concurrency = 8;      // embedding-read threads per trainer
  uint32_t sim_fetch_latency_ms = 0;  // simulated embedding-fetch latency
  uint32_t allreduce_timeout_ms = 10000;
  double holdout_fraction = 0.2;
  size_t eval_max_samples = 4000;
  bool initial_checkpoint = true;     // snapshot both tiers before step 0
  std::vector<FaultEvent> faults;

  void validate() const {
    if (batch_size == 0 || batch_size > 65535) {
      throw ConfigError("batch_size must be in [1, 65535]");
    }
    if (nn_workers == 0) throw ConfigError("nn_workers must be positive");
    if (embedding_workers == 0 || embedding_workers > 256) {
      throw ConfigError("embedding_workers must be in [1, 256]");
    }
    if (ps_shards == 0) throw ConfigError("ps_shards must be positive");
    if (embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
    if (total_steps == 0) throw ConfigError("total_steps must be positive");
    if (staleness_cap < 0) throw ConfigError("staleness_cap must be >= 0");
    if (eval_every == 0 || checkpoint_every == 0 || average_every == 0) {
      throw ConfigError("cadence values must be positive");
    }
    if (pull_concurrency == 0) throw ConfigError("pull_concurrency must be positive");
    if (!(holdout_fraction >= 0.0 && holdout_fraction <= 0.9)) {
      throw ConfigError("holdout_fraction must be in [0, 0.9]");
    }
    if (!(dense_lr > 0.0f) || !(embedding_lr > 0.0f)) {
      throw ConfigError("learning rates must be positive");
    }
    if (!faults.empty() && mode != TrainMode::kHybridRaw && mode != TrainMode::kHybridOpt) {
      // Killing a worker under the sync barrier stalls the flush ladder by
      // design (a lost marker is a liveness failure, not a drop), and async
      // has no shared dense state to recover; drills run in hybrid modes.
      throw ConfigError("fault injection is supported in hybrid modes only");
    }
    for (const FaultEvent& f : faults) {
      uint32_t limit = f.target == FaultEvent::Target::kEmbeddingWorker ? embedding_workers
                       : f.target == FaultEvent::Target::kEmbeddingPs   ? ps_shards
                                                                        : nn_workers;
      if (f.index >= limit) throw ConfigError("fault index out of range");
    }
  }
};

// Learning rate for the hybrid algorithm under smoothness L, gradient noise
// sigma, horizon T, staleness bound tau, and per-id containment bound alpha:
// 1 / (L + sqrt(T*L)*sigma + 4*tau*L*alpha). The noise, staleness, and
// containment terms may be zero (their degenerate limits); L and T may not.
inline double hybrid_lr(double L, double sigma, uint64_t T, double tau, double alpha) {
  if (!(L > 0.0)) throw PreconditionError("hybrid_lr: L must be positive");
  if (T < 1) throw PreconditionError("hybrid_lr: T must be at least 1");
  if (!(sigma >= 0.0) || !(tau >= 0.0) || !(alpha >= 0.0)) {
    throw PreconditionError("hybrid_lr: sigma, tau, alpha must be nonnegative");
  }
  return 1.0 / (L + std::sqrt(static_cast<double>(T) * L) * sigma + 4.0 * tau * L * alpha);
}

// ---------------------------------------------------------------------------
// Run plumbing.
// ---------------------------------------------------------------------------

template <typename T>
class BlockingQueue {
 public:
  void push(T v) {
    {
      std::lock_guard<std::mutex> lk(mu_);
      q_.push_back(std::move(v));
    }
    cv_.notify_one();
  }

  // Empty optional means timeout, or closed with nothing left.
  std::optional<T> pop(std::chrono::milliseconds timeout) {
    std::unique_lock<std::mutex> lk(mu_);
    cv_.wait_for(lk, timeout, [&] { return !q_.empty() || closed_; });
    if (q_.empty()) return std::nullopt;
    T v = std::move(q_.front());
    q_.pop_front();
    return v;
  }

  void close() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  bool closed_and_empty() const {
    std::lock_guard<std::mutex> lk(mu_);
    return closed_ && q_.empty();
  }

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> q_;
  bool closed_ = false;
};

// Cross-replica parameter-hash audit: every trainer posts its hash per step,
// and any disagreement is a consistency error at the step that diverged.
class HashBoard {
 public:
  explicit HashBoard(uint32_t worker_count) : worker_count_(worker_count) {}

  void post(uint64_t step, uint64_t hash) {
    std::lock_guard<std::mutex> lk(mu_);
    auto& e = pending_[step];
    if (e.count == 0) {
      e.hash = hash;
    } else if (e.hash != hash) {
      throw ConsistencyError("replica parameter hashes diverged at step " +
                             std::to_string(step));
    }
    if (++e.count == worker_count_) pending_.erase(step);
  }

 private:
  struct Entry {
    uint64_t hash = 0;
    uint32_t count = 0;
  };
  uint32_t worker_count_;
  std::mutex mu_;
  std::map<uint64_t, Entry> pending_;
};

// Rendezvous for checkpoint recovery: all K trainers arrive, the last one
// runs the repair action, and everyone resumes together. Failing to assemble
// within the timeout means some replica is beyond recovery.
class RecoveryGate {
 public:
  explicit RecoveryGate(uint32_t worker_count) : worker_count_(worker_count) {}

  void arrive_and_recover(const std::function<void()>& repair, uint32_t timeout_ms = 20000) {
    std::unique_lock<std::mutex> lk(mu_);
    if (shutdown_) throw UnrecoverableRunError("recovery rendezvous shut down");
    uint64_t gen = generation_;
    if (++arrived_ == worker_count_) {
      repair();
      arrived_ = 0;
      generation_++;
      cv_.notify_all();
      return;
    }
    bool ok = cv_.wait_for(lk, std::chrono::milliseconds(timeout_ms),
                           [&] { return generation_ != gen || shutdown_; });
    if (shutdown_ && generation_ == gen) {
      throw UnrecoverableRunError("recovery rendezvous shut down");
    }
    if (!ok) {
      throw UnrecoverableRunError("recovery rendezvous timed out");
    }
  }

  // Releases current waiters and fails future arrivals; for teardown when a
  // full rendezvous can no longer form.
  void shutdown() {
    std::lock_guard<std::mutex> lk(mu_);
    shutdown_ = true;
    cv_.notify_all();
  }

 private:
  uint32_t worker_count_;
  std::mutex mu_;
  std::condition_variable cv_;
  uint64_t generation_ = 0;
  uint32_t arrived_ = 0;
  bool shutdown_ = false;
};

// Latest checkpoint per tier, kept in memory for crash drills.
class CheckpointStore {
 public:
  void put_dense(std::vector<uint8_t> buf, uint64_t step) {
    std::lock_guard<std::mutex> lk(mu_);
    dense_ = std::move(buf);
    dense_step_ = step;
  }
  void put_ps(uint32_t shard, std::vector<uint8_t> buf) {
    std::lock_guard<std::mutex> lk(mu_);
    if (ps_.size() <= shard) ps_.resize(shard + 1);
    ps_[shard] = std::move(buf);
  }
  bool has_dense() const {
    std::lock_guard<std::mutex> lk(mu_);
    return !dense_.empty();
  }
  std::vector<uint8_t> dense() const {
    std::lock_guard<std::mutex> lk(mu_);
    if (dense_.empty()) throw UnrecoverableRunError("no dense checkpoint exists");
    return dense_;
  }
  uint64_t dense_step() const {
    std::lock_guard<std::mutex> lk(mu_);
    return dense_step_;
  }
  std::vector<uint8_t> ps(uint32_t shard) const {
    std::lock_guard<std::mutex> lk(mu_);
    if (ps_.size() <= shard || ps_[shard].empty()) {
      throw UnrecoverableRunError("no checkpoint exists for shard " + std::to_string(shard));
    }
    return ps_[shard];
  }
  bool has_ps(uint32_t shard) const {
    std::lock_guard<std::mutex> lk(mu_);
    return ps_.size() > shard && !ps_[shard].empty();
  }

 private:
  mutable std::mutex mu_;
  std::vector<uint8_t> dense_;
  uint64_t dense_step_ = 0;
  std::vector<std::vector<uint8_t>> ps_;
};

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

struct TraceRow {
  uint64_t step = 0;
  float loss = 0.0f;
  double auc = 0.0;
  double samples_per_sec = 0.0;
  uint64_t max_staleness = 0;
  uint64_t drops = 0;
};

struct RunMetrics {
  TrainMode mode = TrainMode::kHybridRaw;
  uint64_t steps_run = 0;  // completed by every trainer
  uint64_t dispatched = 0;
  uint64_t trained = 0;
  uint64_t pull_drops = 0;
  uint64_t grad_drops = 0;
  uint64_t backward_drops = 0;
  uint64_t drained = 0;
  uint64_t stale_epoch_drops = 0;
  uint64_t evictions = 0;
  uint64_t backpressure_retries = 0;
  uint64_t recoveries = 0;
  uint64_t lost_writebacks = 0;   // batches consumed by a failed barrier
  uint64_t diverged_batches = 0;  // async: non-finite losses tolerated
  uint64_t registered = 0;        // samples accepted by embedding workers
  uint64_t ew_dropped_entries = 0;  // buffered features lost to a crash drill
  // A replica recovery appends each trainer's post-reload parameter hash;
  // all entries must equal recovery_checkpoint_hash.
  std::vector<uint64_t> recovery_hashes;
  uint64_t recovery_checkpoint_hash = 0;
  uint64_t ps_probe_rows = 0;        // rows compared after a PS recovery
  uint64_t ps_probe_mismatches = 0;  // rows that differed from the checkpoint
  std::vector<std::pair<uint64_t, float>> loss_trace;  // rank 0, every step
  std::vector<TraceRow> trace;                         // eval-cadence rows
  double final_auc = 0.0;
  std::vector<uint64_t> staleness_hist;
  uint64_t max_staleness = 0;
  double mean_staleness = 0.0;
  double wall_seconds = 0.0;
  double samples_per_sec = 0.0;
  bool aborted = false;
  std::string abort_reason;
  bool conservation_ok = false;
};

// ---------------------------------------------------------------------------
// Cluster: every tier of one training job behind a single in-process hub.
// All cross-tier traffic uses wire frames, so the topology is the same one
// the TCP transport carries.
// ---------------------------------------------------------------------------

class Cluster {
 public:
  Cluster(const TrainConfig& cfg, uint32_t group_count, uint32_t non_id_dim)
      : cfg_(cfg),
        clock(cfg.nn_workers),
        ladder(cfg.mode == TrainMode::kSync ? new GatedFlushCoordinator(cfg.embedding_workers)
                                            : nullptr),
        arhub(cfg.nn_workers, cfg.allreduce_timeout_ms),
        hashes(cfg.nn_workers),
        gate(cfg.nn_workers) {
    bool gated = cfg.mode == TrainMode::kSync;
    int32_t cap = gated ? 0 : cfg.staleness_cap;

    for (uint32_t s = 0; s < cfg.ps_shards; ++s) {
      PsShardConfig pc;
      pc.capacity = cfg.ps_capacity;
      pc.embedding_dim = cfg.embedding_dim;
      pc.optimizer = cfg.embedding_optimizer;
      pc.rng_salt = mix64(cfg.init_seed ^ (0x70730000ull + s));
      shards.push_back(std::make_unique<PsShard>(pc));
      std::string name = "ps" + std::to_string(s);
      hub.serve(name, PsShardService(*shards[s], cfg.compress_values));
      ps_eps.push_back(hub.endpoint(name));
    }

    size_t nn_capacity = std::max<size_t>(4, size_t(cap) + 4) * cfg.batch_size;
    size_t ew_capacity = size_t(cfg.nn_workers) * nn_capacity + 1024;
    for (uint32_t w = 0; w < cfg.embedding_workers; ++w) {
      EmbeddingWorkerConfig ec;
      ec.rank = w;
      ec.group_count = group_count;
      ec.embedding_dim = cfg.embedding_dim;
      ec.buffer_capacity = ew_capacity;
      ec.compress_values = cfg.compress_values;
      ec.nn_worker_count = cfg.nn_workers;
      ec.gated = gated;
      ews.push_back(
          std::make_unique<EmbeddingWorker>(ec, ps_eps, &clock, ladder.get(), &staleness));
      std::string name = "ew" + std::to_string(w);
      EmbeddingWorker* ewp = ews[w].get();
      uint32_t latency = cfg.sim_fetch_latency_ms;
      hub.serve(name, [ewp, latency](const Frame& f) {
        if (latency > 0 && f.type == MsgType::kPullEmbedding) {
          std::this_thread::sleep_for(std::chrono::milliseconds(latency));
        }
        return ewp->handle(f);
      });
      ew_eps.push_back(hub.endpoint(name));
    }

    for (uint32_t r = 0; r < cfg.nn_workers; ++r) {
      NnWorkerConfig nc;
      nc.rank = r;
      nc.group_count = group_count;
      nc.embedding_dim = cfg.embedding_dim;
      nc.non_id_dim = non_id_dim;
      nc.batch_size = cfg.batch_size;
      nc.hidden = cfg.hidden;
      nc.init_seed = cfg.init_seed;
      nc.buffer_capacity = nn_capacity;
      nc.staleness_cap = cap;
      nc.compress_values = cfg.compress_values;
      nns.push_back(std::make_unique<NnWorker>(nc, ew_eps, &clock));
    }
  }

  // Snapshot both tiers; every trainer holds identical dense parameters at a
  // checkpoint boundary, so rank 0's copy represents all of them.
  void checkpoint(uint64_t step) {
    store.put_dense(save_dense_checkpoint(nns[0]->net()), step);
    for (uint32_t s = 0; s < shards.size(); ++s) {
      std::vector<uint8_t> buf;
      shards[s]->save_checkpoint(buf);
      store.put_ps(s, std::move(buf));
    }
  }

  // Revert one shard to its last checkpoint and realign the stale-write
  // guard across the whole shard set so pre-crash gradients are rejected
  // everywhere consistently.
  void recover_ps(uint32_t shard) {
    shards[shard]->recover_from_checkpoint(store.ps(shard));
    uint32_t epoch = shards[shard]->epoch();
    for (uint32_t s = 0; s < shards.size(); ++s) {
      if (s == shard) continue;
      uint32_t e = shards[s]->advance_epoch();
      if (e != epoch) {
        throw ConsistencyError("shard epochs diverged during recovery");
      }
    }
    for (auto& ew : ews) ew->set_ps_epoch(epoch);
  }

  const TrainConfig cfg_;
  LocalHub hub;
  std::vector<std::unique_ptr<PsShard>> shards;
  std::vector<std::shared_ptr<Endpoint>> ps_eps;
  std::vector<std::unique_ptr<EmbeddingWorker>> ews;
  std::vector<std::shared_ptr<Endpoint>> ew_eps;
  std::vector<std::unique_ptr<NnWorker>> nns;
  StepClock clock;
  std::unique_ptr<GatedFlushCoordinator> ladder;
  AllReduceHub arhub;
  HashBoard hashes;
  RecoveryGate gate;
  CheckpointStore store;
  StalenessStats staleness;
};

// ---------------------------------------------------------------------------
// Held-out evaluation: scores the eval split against live embedding state
// (pulled straight from the shards) and a given dense model.
// ---------------------------------------------------------------------------

class Evaluator {
 public:
  Evaluator(const Dataset& eval_split, size_t max_samples, uint32_t embedding_dim,
            uint32_t shard_count)
      : dim_(embedding_dim) {
    size_t n = eval_split.size();
    size_t take = max_samples == 0 ? n : std::min(n, max_samples);
    size_t stride = take == 0 ? 1 : std::max<size_t>(1, n / take);
    for (size_t i = 0; i < n && samples_.size() < take; i += stride) {
      samples_.push_back(&eval_split[i]);
    }
    by_shard_.resize(shard_count);
    std::set<uint64_t> seen;
    for (const Sample* s : samples_) {
      for (const auto& group : s->ids.groups) {
        for (uint64_t id : group) {
          if (seen.insert(id).second) by_shard_[route_shard(id, shard_count)].push_back(id);
        }
      }
    }
  }

  size_t sample_count() const { return samples_.size(); }

  double evaluate(const DenseNet<float>& net,
                  const std::vector<std::shared_ptr<Endpoint>>& ps_eps) const {
    std::unordered_map<uint64_t, std::vector<float>> rows;
    for (uint32_t s = 0; s < by_shard_.size(); ++s) {
      if (by_shard_[s].empty()) continue;
      Frame reply = ps_eps[s]->request_ok(make_ps_pull_frame(dim_, by_shard_[s]));
      PsPullReply pulled = parse_ps_pull_reply(reply, dim_);
      for (size_t i = 0; i < by_shard_[s].size(); ++i) {
        rows[by_shard_[s][i]] =
            std::vector<float>(pulled.values.begin() + static_cast<ptrdiff_t>(i * dim_),
                               pulled.values.begin() + static_cast<ptrdiff_t>((i + 1) * dim_));
      }
    }

    std::vector<float> scores;
    std::vector<float> labels;
    scores.reserve(samples_.size());
    labels.reserve(samples_.size());
    std::vector<float> input;
    for (const Sample* s : samples_) {
      input.clear();
      for (const auto& group : s->ids.groups) {
        std::vector<double> acc(dim_, 0.0);
        for (uint64_t id : group) {
          const std::vector<float>& row = rows.at(id);
          for (uint32_t d = 0; d < dim_; ++d) acc[d] += row[d];
        }
        double scale = group.empty() ? 0.0 : 1.0 / static_cast<double>(group.size());
        for (uint32_t d = 0; d < dim_; ++d) {
          input.push_back(static_cast<float>(acc[d] * scale));
        }
      }
      input.insert(input.end(), s->non_id.dense.begin(), s->non_id.dense.end());
      scores.push_back(net.forward(input));
      labels.push_back(s->label.y);
    }
    try {
      return auc_score(scores, labels);
    } catch (const UndefinedMetricError&) {
      return 0.5;  // single-class split carries no ranking signal
    }
  }

 private:
  uint32_t dim_;
  std::vector<const Sample*> samples_;
  std::vector<std::vector<uint64_t>> by_shard_;
};

// ---------------------------------------------------------------------------
// run_training.
// ---------------------------------------------------------------------------

namespace detail {

struct DispatchItem {
  SampleId sid;
  NonIdFeatures non_id;
  Label label;
};

// Drives one full training job: dispatcher -> per-trainer feeders and pull
// pools -> trainer loops, with a monitor thread firing fault drills.
class Runner {
 public:
  Runner(const TrainConfig& cfg, const Dataset& data) : cfg_(cfg) {
    cfg_.validate();
    if (data.empty()) throw PreconditionError("run_training: dataset is empty");
    group_count_ = static_cast<uint32_t>(data.front().ids.groups.size());
    non_id_dim_ = static_cast<uint32_t>(data.front().non_id.dense.size());

    size_t holdout = static_cast<size_t>(static_cast<double>(data.size()) * cfg_.holdout_fraction);
    size_t train_size = data.size() - holdout;
    uint64_t stream = static_cast<uint64_t>(cfg_.batch_size) * cfg_.nn_workers;
    steps_ = std::min<uint64_t>(cfg_.total_steps, train_size / stream);
    if (steps_ == 0) {
      throw ConfigError("dataset too small for one step per trainer");
    }
    train_count_ = steps_ * stream;
    data_ = &data;
    eval_ = std::make_unique<Evaluator>(Dataset(), 0, cfg_.embedding_dim, cfg_.ps_shards);
    if (holdout > 0) {
      eval_split_.assign(data.begin() + static_cast<ptrdiff_t>(train_size), data.end());
      eval_ = std::make_unique<Evaluator>(eval_split_, cfg_.eval_max_samples, cfg_.embedding_dim,
                                          cfg_.ps_shards);
    }
  }

  RunMetrics run(const std::function<void(Cluster&)>& post_run) {
    cluster_ = std::make_unique<Cluster>(cfg_, group_count_, non_id_dim_);
    Cluster& cl = *cluster_;
    if (cfg_.initial_checkpoint) cl.checkpoint(0);

    auto t0 = std::chrono::steady_clock::now();
    window_start_ = t0;
    uint32_t k = cfg_.nn_workers;
    sample_qs_ = std::vector<BlockingQueue<DispatchItem>>(k);
    job_qs_ = std::vector<BlockingQueue<SampleId>>(k);
    feeder_done_.assign(k, false);
    fault_requests_ = std::vector<std::atomic<bool>>(k);
    for (auto& f : fault_requests_) f.store(false);
    trainer_steps_.assign(k, 0);

    std::vector<std::thread> threads;
    threads.emplace_back([&] { dispatch_loop(cl); });
    for (uint32_t r = 0; r < k; ++r) {
      threads.emplace_back([&, r] { feed_loop(cl, r); });
      for (uint32_t p = 0; p < cfg_.pull_concurrency; ++p) {
        threads.emplace_back([&, r] { pull_loop(cl, r); });
      }
    }
    std::vector<std::thread> trainers;
    for (uint32_t r = 0; r < k; ++r) {
      trainers.emplace_back([&, r] { train_loop(cl, r); });
    }
    std::thread monitor([&] { monitor_loop(cl); });

    for (auto& t : trainers) t.join();
    run_done_.store(true);
    cl.clock.shutdown();  // releases any reads still gated on dead steps
    cl.arhub.shutdown();
    for (auto& q : sample_qs_) q.close();
    for (auto& q : job_qs_) q.close();
    monitor.join();
    for (auto& t : threads) t.join();
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    RunMetrics m = collect(cl, wall);
    if (post_run) post_run(cl);
    if (cl.ladder) cl.ladder->shutdown();
    return m;
  }

 private:
  // --- dispatch ------------------------------------------------------------

  void dispatch_loop(Cluster& cl) {
    DispatchHooks hooks;
    hooks.register_sample = [&](uint32_t ew, const IdFeatures& ids) {
      // A worker being revived mid-drill looks like a transport failure;
      // retry briefly before treating it as fatal.
      for (int attempt = 0;; ++attempt) {
        if (stop_.load()) throw TransportError("dispatch aborted");
        try {
          Frame reply = cl.ew_eps[ew]->request(make_register_frame(ids), /*idempotent=*/false);
          return parse_register_reply(reply);
        } catch (const BackpressureError&) {
          throw;  // dispatch() owns this retry
        } catch (const TransportError&) {
          if (stop_.load() || attempt > 100) throw;
          std::this_thread::sleep_for(std::chrono::milliseconds(20));
        }
      }
    };
    hooks.dispatch_sample = [&](uint32_t nn, SampleId sid, const NonIdFeatures& non_id,
                                const Label& label) {
      sample_qs_[nn].push(DispatchItem{sid, non_id, label});
    };
    Dataset truncated(data_->begin(), data_->begin() + static_cast<ptrdiff_t>(train_count_));
    try {
      DispatchResult res = dispatch(truncated, cfg_.embedding_workers, cfg_.nn_workers, hooks);
      dispatched_.store(res.dispatched);
      retries_.store(res.backpressure_retries);
    } catch (const Error& e) {
      abort_run(std::string("dispatch failed: ") + e.what());
    }
    for (auto& q : sample_qs_) q.close();
  }

  void feed_loop(Cluster& cl, uint32_t r) {
    NnWorker& nn = *cl.nns[r];
    for (;;) {
      auto item = sample_qs_[r].pop(std::chrono::milliseconds(50));
      if (!item) {
        if (sample_qs_[r].closed_and_empty()) break;
        continue;
      }
      if (stop_.load() || run_done_.load() || ragged_stop_.load()) {
        aborted_feed_.fetch_add(1);
        continue;
      }
      bool reserved = false;
      while (!reserved) {
        try {
          nn.reserve_slot(item->sid, item->non_id, item->label);
          reserved = true;
        } catch (const BackpressureError&) {
          // The trainer may already be gone (drops starved it out); without
          // this check a full buffer would pin the feeder forever.
          if (stop_.load() || run_done_.load() || ragged_stop_.load()) break;
          std::this_thread::sleep_for(std::chrono::microseconds(200));
        } catch (const Error& e) {
          abort_run(std::string("feeder: ") + e.what());
          break;
        }
      }
      if (reserved) {
        job_qs_[r].push(item->sid);
      } else {
        aborted_feed_.fetch_add(1);
      }
    }
    {
      std::lock_guard<std::mutex> lk(done_mu_);
      feeder_done_[r] = true;
    }
    job_qs_[r].close();
  }

  void pull_loop(Cluster& cl, uint32_t r) {
    NnWorker& nn = *cl.nns[r];
    for (;;) {
      auto sid = job_qs_[r].pop(std::chrono::milliseconds(50));
      if (!sid) {
        if (job_qs_[r].closed_and_empty()) break;
        continue;
      }
      try {
        nn.complete_slot(*sid);
      } catch (const ClockError&) {
        // Shutdown mid-gate; the slot was recorded as a drop. Keep draining
        // so every reserved slot resolves and conservation stays exact.
      } catch (const Error& e) {
        abort_run(std::string("pull pool: ") + e.what());
      }
    }
  }

  // --- training ------------------------------------------------------------

  bool starved(Cluster& cl, uint32_t r) {
    {
      std::lock_guard<std::mutex> lk(done_mu_);
      if (!feeder_done_[r]) return false;
    }
    if (!job_qs_[r].closed_and_empty()) return false;
    NnWorker& nn = *cl.nns[r];
    size_t eligible = nn.eligible_count();
    return nn.tracked_count() == eligible && eligible < cfg_.batch_size;
  }

  void train_loop(Cluster& cl, uint32_t r) {
    NnWorker& nn = *cl.nns[r];
    bool barriered = cfg_.mode != TrainMode::kAsync;
    try {
      for (uint64_t step = 0; step < steps_ && !stop_.load(); ++step) {
        if (fault_requests_[r].exchange(false)) {
          // Simulated crash: this replica vanishes from the barrier and
          // rejoins through checkpoint recovery alongside everyone else.
          uint64_t resume = 0;
          if (!recover_replicas(cl, r, step + 1, 0, &resume)) return;
          step = resume - 1;
          continue;
        }

        std::optional<Minibatch> batch;
        while (!stop_.load() && !ragged_stop_.load() && !(batch = nn.try_assemble())) {
          if (starved(cl, r)) {
            trainer_steps_[r] = step;
            ragged_exit(cl, barriered);
            return;
          }
          std::this_thread::sleep_for(std::chrono::microseconds(50));
        }
        if (!batch) break;
        cl.clock.register_batch(step, cfg_.batch_size);

        GradientBundle bundle;
        try {
          bundle = nn.train_step(*batch);
        } catch (const DivergenceError&) {
          if (cfg_.mode != TrainMode::kAsync) throw;
          // Async replicas may genuinely diverge; measure, complete the
          // batch on the clock, and keep going.
          diverged_.fetch_add(1);
          cl.clock.mark_done(step, cfg_.batch_size);
          trainer_steps_[r] = step + 1;
          continue;
        }

        bool emitted = false;
        bool flushing = false;
        try {
          switch (cfg_.mode) {
            case TrainMode::kSync:
            case TrainMode::kHybridRaw: {
              std::vector<float> mean = cl.arhub.reduce(r, step, bundle.dense_grad);
              nn.apply_dense_update(mean, cfg_.dense_lr);
              nn.emit_embedding_grads(*batch, bundle, cfg_.embedding_lr, step, true);
              emitted = true;
              if (cfg_.mode == TrainMode::kSync) {
                flushing = true;
                nn.broadcast_flush(step);
              }
              break;
            }
            case TrainMode::kHybridOpt: {
              // Write-back first: the put overlaps the gradient sync window.
              nn.emit_embedding_grads(*batch, bundle, cfg_.embedding_lr, step, true);
              emitted = true;
              std::vector<float> mean = cl.arhub.reduce_chunked(r, step, bundle.dense_grad, 4);
              nn.apply_dense_update(mean, cfg_.dense_lr);
              break;
            }
            case TrainMode::kAsync: {
              nn.apply_dense_update(bundle.dense_grad, cfg_.dense_lr);
              nn.emit_embedding_grads(*batch, bundle, cfg_.embedding_lr, step, true);
              emitted = true;
              if ((step + 1) % cfg_.average_every == 0) {
                std::vector<float> avg = cl.arhub.reduce(r, step, nn.net().params());
                nn.net().params() = avg;
              }
              break;
            }
          }
        } catch (const SyncFailureError& e) {
          if (stop_.load() || ragged_stop_.load()) break;
          if (flushing) {
            // A lost flush marker poisons the gated ladder for every later
            // step; there is no local repair for that.
            abort_run(std::string("flush barrier failed: ") + e.what());
            break;
          }
          // Barrier failure: the batch was consumed and its dense update is
          // lost. If the write-back never ran, its samples never reach the
          // clock either; the recovery repair force-completes the step.
          uint32_t lost = emitted ? 0 : cfg_.batch_size;
          uint64_t resume = 0;
          if (!recover_replicas(cl, r, step + 1, lost, &resume)) return;
          step = resume - 1;
          trainer_steps_[r] = resume;
          continue;
        }

        if (barriered) cl.hashes.post(step, nn.param_hash());
        trainer_steps_[r] = step + 1;

        if (r == 0) {
          {
            std::lock_guard<std::mutex> lk(trace_mu_);
            loss_trace_.emplace_back(step, bundle.mean_loss);
          }
          if ((step + 1) % cfg_.checkpoint_every == 0) cl.checkpoint(step + 1);
          if ((step + 1) % cfg_.eval_every == 0 || step + 1 == steps_) {
            bool settled = true;
            if (barriered) {
              // Peer write-backs for this step can still be in flight; the
              // snapshot is only reproducible at the step boundary. Peers
              // cannot write past it: their next push follows the next
              // barrier, which waits for this trainer.
              try {
                cl.clock.wait_frontier(static_cast<int64_t>(step));
              } catch (const ClockError&) {
                settled = false;  // teardown mid-wait; the boundary never formed
              }
            }
            if (settled) record_trace_row(cl, step);
          }
        }
      }
    } catch (const Error& e) {
      abort_run(std::string(train_mode_name(cfg_.mode)) + " trainer " + std::to_string(r) +
                ": " + e.what());
    }
  }

  // All K trainers rendezvous, reload the latest dense checkpoint, and
  // resume at a common step. Trainers fail at different rounds (a crash
  // victim never even joins its round), so each one bids step + 1 and the
  // repair resumes everyone at the maximum bid; steps below it are
  // force-completed on the clock, since their barriers are lost and some
  // trainers never registered them. `lost` counts samples whose trained
  // batch never reached the write-back path.
  bool recover_replicas(Cluster& cl, uint32_t r, uint64_t want, uint32_t lost,
                        uint64_t* resume_out) {
    uint64_t cur = resume_step_.load();
    while (cur < want && !resume_step_.compare_exchange_weak(cur, want)) {
    }
    try {
      cl.gate.arrive_and_recover([&] {
        if (!cl.store.has_dense()) {
          abort_run("replica recovery requested with no checkpoint saved");
          return;
        }
        cl.arhub.reset();
        cl.clock.force_complete_through(static_cast<int64_t>(resume_step_.load()) - 1);
        recoveries_.fetch_add(1);
        std::lock_guard<std::mutex> lk(trace_mu_);
        recovery_checkpoint_hash_ = load_dense_checkpoint(cl.store.dense()).param_hash();
      });
    } catch (const UnrecoverableRunError& e) {
      if (stop_.load() || ragged_stop_.load()) return false;
      abort_run(e.what());
      return false;
    }
    if (stop_.load()) return false;
    cl.nns[r]->net() = load_dense_checkpoint(cl.store.dense());
    {
      std::lock_guard<std::mutex> lk(trace_mu_);
      recovery_hashes_.push_back(cl.nns[r]->param_hash());
    }
    if (lost > 0) lost_writebacks_.fetch_add(lost);
    *resume_out = resume_step_.load();
    return true;
  }

  void record_trace_row(Cluster& cl, uint64_t step) {
    uint64_t trained = 0;
    for (auto& nn : cl.nns) trained += nn->trained_count();
    auto now = std::chrono::steady_clock::now();
    double window = std::chrono::duration<double>(now - window_start_).count();
    uint64_t delta = trained - window_trained_;
    window_start_ = now;
    window_trained_ = trained;

    TraceRow row;
    row.step = step;
    {
      std::lock_guard<std::mutex> lk(trace_mu_);
      row.loss = loss_trace_.empty() ? 0.0f : loss_trace_.back().second;
    }
    try {
      row.auc = eval_->sample_count() > 0 ? eval_->evaluate(cl.nns[0]->net(), cl.ps_eps) : 0.5;
      last_auc_ = row.auc;
    } catch (const Error&) {
      row.auc = last_auc_;  // a shard is mid-drill; keep the last good point
    }
    row.samples_per_sec = window > 0 ? static_cast<double>(delta) / window : 0.0;
    row.max_staleness = cl.staleness.max_delay();
    row.drops = current_drops(cl);
    std::lock_guard<std::mutex> lk(trace_mu_);
    trace_.push_back(row);
  }

  uint64_t current_drops(Cluster& cl) const {
    uint64_t d = 0;
    for (auto& nn : cl.nns) d += nn->pull_drops() + nn->grad_drops();
    for (auto& ew : cl.ews) d += ew->backward_drops();
    return d;
  }

  // --- fault monitor ---------------------------------------------------------

  void monitor_loop(Cluster& cl) {
    std::vector<bool> fired(cfg_.faults.size(), false);
    while (!run_done_.load() && !stop_.load()) {
      int64_t frontier = cl.clock.frontier();
      for (size_t i = 0; i < cfg_.faults.size(); ++i) {
        if (fired[i] || frontier < static_cast<int64_t>(cfg_.faults[i].at_step)) continue;
        fired[i] = true;
        fire_fault(cl, cfg_.faults[i]);
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(1));
    }
  }

  void fire_fault(Cluster& cl, const FaultEvent& f) {
    try {
      switch (f.target) {
        case FaultEvent::Target::kEmbeddingWorker: {
          std::string name = "ew" + std::to_string(f.index);
          cl.hub.kill(name);
          std::this_thread::sleep_for(std::chrono::milliseconds(f.window_ms));
          ew_dropped_.fetch_add(cl.ews[f.index]->drop_buffer());
          cl.hub.revive(name);
          break;
        }
        case FaultEvent::Target::kEmbeddingPs: {
          std::string name = "ps" + std::to_string(f.index);
          cl.hub.kill(name);
          std::this_thread::sleep_for(std::chrono::milliseconds(f.window_ms));
          if (!cl.store.has_ps(f.index)) {
            throw UnrecoverableRunError("ps recovery requested with no checkpoint saved");
          }
          std::vector<uint8_t> image = cl.store.ps(f.index);
          cl.recover_ps(f.index);
          probe_ps(cl, f.index, image);  // the shard is still fenced off
          cl.hub.revive(name);
          break;
        }
        case FaultEvent::Target::kNnWorker:
          fault_requests_[f.index].store(true);
          break;
      }
    } catch (const Error& e) {
      abort_run(std::string("fault injection: ") + e.what());
    }
  }

  // Compares every recovered row against the checkpoint image it was
  // restored from, before any new traffic can touch the shard.
  void probe_ps(Cluster& cl, uint32_t shard, const std::vector<uint8_t>& image) {
    std::unique_ptr<PsShard> ref = PsShard::load_checkpoint(image);
    std::vector<uint64_t> ids = ref->recency_ids();
    auto want = ref->lookup_map(ids);
    auto got = cl.shards[shard]->lookup_map(ids);
    uint64_t bad = 0;
    for (const auto& [id, row] : want) {
      if (got.at(id) != row) bad++;
    }
    ps_probe_rows_.fetch_add(ids.size());
    ps_probe_mismatches_.fetch_add(bad);
  }

  // --- teardown --------------------------------------------------------------

  // One trainer ran out of stream. No further reduce can complete at full
  // width, so release the barriers and let the survivors wind down; their
  // unread samples drain as drops rather than a timeout.
  void ragged_exit(Cluster& cl, bool barriered) {
    ragged_stop_.store(true);
    cl.arhub.shutdown();
    cl.gate.shutdown();
    if (barriered) cl.clock.shutdown();
  }

  void abort_run(std::string reason) {
    bool expected = false;
    if (stop_.compare_exchange_strong(expected, true)) {
      std::lock_guard<std::mutex> lk(trace_mu_);
      abort_reason_ = std::move(reason);
    }
    cluster_->clock.shutdown();
    cluster_->arhub.shutdown();
    cluster_->gate.shutdown();
    if (cluster_->ladder) cluster_->ladder->shutdown();
  }

  RunMetrics collect(Cluster& cl, double wall) {
    RunMetrics m;
    m.mode = cfg_.mode;
    m.steps_run = steps_;
    for (uint64_t s : trainer_steps_) m.steps_run = std::min(m.steps_run, s);
    m.dispatched = dispatched_.load();
    for (auto& nn : cl.nns) {
      m.trained += nn->trained_count();
      m.pull_drops += nn->pull_drops();
      m.grad_drops += nn->grad_drops();
      m.drained += nn->drain_drops();
    }
    m.drained += aborted_feed_.load();
    for (auto& ew : cl.ews) {
      m.backward_drops += ew->backward_drops();
      m.registered += ew->registered_count();
    }
    for (auto& sh : cl.shards) {
      m.evictions += sh->eviction_count();
      m.stale_epoch_drops += sh->stale_epoch_drops();
    }
    m.backpressure_retries = retries_.load();
    m.recoveries = recoveries_.load();
    m.lost_writebacks = lost_writebacks_.load();
    m.diverged_batches = diverged_.load();
    m.ew_dropped_entries = ew_dropped_.load();
    m.ps_probe_rows = ps_probe_rows_.load();
    m.ps_probe_mismatches = ps_probe_mismatches_.load();
    {
      std::lock_guard<std::mutex> lk(trace_mu_);
      m.loss_trace = loss_trace_;
      m.trace = trace_;
      m.aborted = stop_.load();
      m.abort_reason = abort_reason_;
      m.recovery_hashes = recovery_hashes_;
      m.recovery_checkpoint_hash = recovery_checkpoint_hash_;
    }
    m.final_auc = m.trace.empty() ? 0.5 : m.trace.back().auc;
    m.staleness_hist = cl.staleness.hist();
    m.max_staleness = cl.staleness.max_delay();
    m.mean_staleness = cl.staleness.mean_delay();
    m.wall_seconds = wall;
    m.samples_per_sec = wall > 0 ? static_cast<double>(m.trained) / wall : 0.0;
    m.conservation_ok = m.dispatched == m.trained + m.pull_drops + m.drained;
    return m;
  }

  TrainConfig cfg_;
  const Dataset* data_ = nullptr;
  Dataset eval_split_;
  std::unique_ptr<Evaluator> eval_;
  std::unique_ptr<Cluster> cluster_;
  uint32_t group_count_ = 0;
  uint32_t non_id_dim_ = 0;
  uint64_t steps_ = 0;
  uint64_t train_count_ = 0;

  std::vector<BlockingQueue<DispatchItem>> sample_qs_;
  std::vector<BlockingQueue<SampleId>> job_qs_;
  std::mutex done_mu_;
  std::vector<bool> feeder_done_;
  std::vector<std::atomic<bool>> fault_requests_;
  std::vector<uint64_t> trainer_steps_;

  std::atomic<bool> stop_{false};
  std::atomic<bool> run_done_{false};
  std::atomic<bool> ragged_stop_{false};
  std::atomic<uint64_t> resume_step_{0};
  std::atomic<uint64_t> dispatched_{0};
  std::atomic<uint64_t> retries_{0};
  std::atomic<uint64_t> aborted_feed_{0};
  std::atomic<uint64_t> ew_dropped_{0};
  std::atomic<uint64_t> recoveries_{0};
  std::atomic<uint64_t> lost_writebacks_{0};
  std::atomic<uint64_t> diverged_{0};
  std::atomic<uint64_t> ps_probe_rows_{0};
  std::atomic<uint64_t> ps_probe_mismatches_{0};

  std::mutex trace_mu_;
  std::vector<std::pair<uint64_t, float>> loss_trace_;
  std::vector<TraceRow> trace_;
  std::string abort_reason_;
  std::vector<uint64_t> recovery_hashes_;
  uint64_t recovery_checkpoint_hash_ = 0;
  std::chrono::steady_clock::time_point window_start_ = std::chrono::steady_clock::now();
  uint64_t window_trained_ = 0;
  double last_auc_ = 0.5;  // rank-0 trainer only
};

}  // namespace detail

// Runs one training job over the given dataset. The optional post_run hook
// receives the live cluster before teardown, for state probes.
inline RunMetrics run_training(const TrainConfig& cfg, const Dataset& data,
                               const std::function<void(Cluster&)>& post_run = {}) {
  detail::Runner runner(cfg, data);
  return runner.run(post_run);
}

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------

inline void write_metrics_csv(const RunMetrics& m, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("write_metrics_csv: cannot open " + path);
  f << "step,loss,auc,samples_per_sec,max_staleness,drops\n";
  for (const TraceRow& r : m.trace) {
    f << r.step << ',' << r.loss << ',' << r.auc << ',' << r.samples_per_sec << ','
      << r.max_staleness << ',' << r.drops << '\n';
  }
  if (!f) throw Error("write_metrics_csv: write failed for " + path);
}

namespace detail {
inline std::string json_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') {
      out.push_back('\\');
      out.push_back(c);
    } else if (static_cast<unsigned char>(c) < 0x20) {
      out.push_back(' ');
    } else {
      out.push_back(c);
    }
  }
  return out;
}
}  // namespace detail

inline void write_report_json(const RunMetrics& m, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("write_report_json: cannot open " + path);
  f << "{\n";
  f << "  \"mode\": \"" << train_mode_name(m.mode) << "\",\n";
  f << "  \"steps_run\": " << m.steps_run << ",\n";
  f << "  \"dispatched\": " << m.dispatched << ",\n";
  f << "  \"registered\": " << m.registered << ",\n";
  f << "  \"trained\": " << m.trained << ",\n";
  f << "  \"pull_drops\": " << m.pull_drops << ",\n";
  f << "  \"grad_drops\": " << m.grad_drops << ",\n";
  f << "  \"backward_drops\": " << m.backward_drops << ",\n";
  f << "  \"drained\": " << m.drained << ",\n";
  f << "  \"stale_epoch_drops\": " << m.stale_epoch_drops << ",\n";
  f << "  \"evictions\": " << m.evictions << ",\n";
  f << "  \"backpressure_retries\": " << m.backpressure_retries << ",\n";
  f << "  \"recoveries\": " << m.recoveries << ",\n";
  f << "  \"lost_writebacks\": " << m.lost_writebacks << ",\n";
  f << "  \"diverged_batches\": " << m.diverged_batches << ",\n";
  f << "  \"ew_dropped_entries\": " << m.ew_dropped_entries << ",\n";
  f << "  \"ps_probe_rows\": " << m.ps_probe_rows << ",\n";
  f << "  \"ps_probe_mismatches\": " << m.ps_probe_mismatches << ",\n";
  f << "  \"final_auc\": " << m.final_auc << ",\n";
  f << "  \"max_staleness\": " << m.max_staleness << ",\n";
  f << "  \"mean_staleness\": " << m.mean_staleness << ",\n";
  f << "  \"staleness_hist\": [";
  for (size_t i = 0; i < m.staleness_hist.size(); ++i) {
    f << (i ? "," : "") << m.staleness_hist[i];
  }
  f << "],\n";
  f << "  \"wall_seconds\": " << m.wall_seconds << ",\n";
  f << "  \"samples_per_sec\": " << m.samples_per_sec << ",\n";
  f << "  \"conservation_ok\": " << (m.conservation_ok ? "true" : "false") << ",\n";
  f << "  \"aborted\": " << (m.aborted ? "true" : "false") << ",\n";
  f << "  \"abort_reason\": \"" << detail::json_escape(m.abort_reason) << "\"\n";
  f << "}\n";
  if (!f) throw Error("write_report_json: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Mode comparison on one dataset and seed set.
// ---------------------------------------------------------------------------

struct ModeComparison {
  RunMetrics sync;
  RunMetrics hybrid;
  RunMetrics async;
  double auc_gap_hybrid = 0.0;  // |auc(hybrid) - auc(sync)|
  double auc_gap_async = 0.0;
  double speedup_hybrid = 0.0;  // samples/sec relative to sync
  double speedup_async = 0.0;
  bool partial = false;  // some sub-run aborted
};

inline ModeComparison compare_modes(TrainConfig base, const Dataset& data) {
  ModeComparison cmp;
  TrainConfig c = base;
  // Drills ride the hybrid leg only (fault injection is hybrid-only); the
  // sync and async legs always run fault-free.
  c.faults.clear();
  c.mode = TrainMode::kSync;
  cmp.sync = run_training(c, data);
  c.faults = base.faults;
  c.mode = TrainMode::kHybridOpt;
  cmp.hybrid = run_training(c, data);
  c.faults.clear();
  c.mode = TrainMode::kAsync;
  cmp.async = run_training(c, data);
  cmp.partial = cmp.sync.aborted || cmp.hybrid.aborted || cmp.async.aborted;
  cmp.auc_gap_hybrid = std::abs(cmp.hybrid.final_auc - cmp.sync.final_auc);
  cmp.auc_gap_async = std::abs(cmp.async.final_auc - cmp.sync.final_auc);
  if (cmp.sync.samples_per_sec > 0) {
    cmp.speedup_hybrid = cmp.hybrid.samples_per_sec / cmp.sync.samples_per_sec;
    cmp.speedup_async = cmp.async.samples_per_sec / cmp.sync.samples_per_sec;
  }
  return cmp;
}

inline void write_comparison_csv(const ModeComparison& cmp, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("write_comparison_csv: cannot open " + path);
  f << "mode,final_auc,auc_gap_vs_sync,samples_per_sec,speedup_vs_sync,max_staleness,drops,"
       "aborted\n";
  auto row = [&](const RunMetrics& m, double gap, double speedup) {
    f << train_mode_name(m.mode) << ',' << m.final_auc << ',' << gap << ',' << m.samples_per_sec
      << ',' << speedup << ',' << m.max_staleness << ','
      << (m.pull_drops + m.grad_drops + m.backward_drops) << ','
      << (m.aborted ? "true" : "false") << '\n';
  };
  row(cmp.sync, 0.0, 1.0);
  row(cmp.hybrid, cmp.auc_gap_hybrid, cmp.speedup_hybrid);
  row(cmp.async, cmp.auc_gap_async, cmp.speedup_async);
  if (!f) throw Error("write_comparison_csv: write failed for " + path);
}

}  // namespace hybridps
