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
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hybridps/core.hpp"
#include "hybridps/dense_nn.hpp"
#include "hybridps/embedding_worker.hpp"
#include "hybridps/errors.hpp"
#include "hybridps/staleness.hpp"
#include "hybridps/transport.hpp"
#include "hybridps/wire.hpp"

namespace hybridps {

// One assembled training batch: aggregated embeddings joined with the dense
// features and labels that arrived separately. All lists share one length.
struct Minibatch {
  std::vector<SampleId> sample_ids;
  std::vector<std::vector<float>> embeddings;        // per sample, groups*dim
  std::vector<std::vector<float>> non_id;            // per sample
  std::vector<float> labels;
  std::vector<std::vector<uint64_t>> read_versions;  // per sample, per listed id
};

// Gradients of one batch's mean loss: the dense parameters plus the
// embedding-input slice per sample (the piece relayed back to its worker).
struct GradientBundle {
  float mean_loss = 0.0f;
  std::vector<float> probs;
  std::vector<float> dense_grad;                     // layout of net.params()
  std::vector<std::vector<float>> embedding_grads;   // per sample, groups*dim
};

// ---------------------------------------------------------------------------
// Gradient averaging across K replicas.
//
// All K workers contribute a same-shaped vector per (round, chunk) key; the
// last arrival computes the canonical mean once: pairwise tree over ascending
// rank, then a single division by K. Every participant receives that exact
// vector, so replicas stay bit-identical by construction. The element order
// of the tree does not depend on chunk boundaries, so a chunked reduction
// (used to overlap communication with the backward pass) returns bits equal
// to the whole-vector one.
// ---------------------------------------------------------------------------

class AllReduceHub {
 public:
  explicit AllReduceHub(uint32_t worker_count, uint32_t timeout_ms = 5000)
      : worker_count_(worker_count), timeout_ms_(timeout_ms) {
    if (worker_count == 0) {
      throw PreconditionError("AllReduceHub: worker_count must be positive");
    }
  }

  // Blocks until every rank has contributed to this round, then returns the
  // canonical mean. A worker missing past the timeout poisons the round for
  // every participant.
  std::vector<float> reduce(uint32_t rank, uint64_t round, const std::vector<float>& grad) {
    return reduce_part(rank, round, 0, grad);
  }

  // Splits the vector into chunk_count contiguous pieces and reduces them as
  // separate barriers, mimicking overlap of sync with backward computation.
  // Never mix chunk counts within one round.
  std::vector<float> reduce_chunked(uint32_t rank, uint64_t round, const std::vector<float>& grad,
                                    uint32_t chunk_count) {
    if (chunk_count == 0) throw PreconditionError("reduce_chunked: chunk_count must be positive");
    size_t per = (grad.size() + chunk_count - 1) / chunk_count;
    std::vector<float> out;
    out.reserve(grad.size());
    for (uint32_t c = 0; c < chunk_count; ++c) {
      size_t lo = std::min(static_cast<size_t>(c) * per, grad.size());
      size_t hi = std::min(lo + per, grad.size());
      std::vector<float> part(grad.begin() + static_cast<ptrdiff_t>(lo),
                              grad.begin() + static_cast<ptrdiff_t>(hi));
      std::vector<float> reduced = reduce_part(rank, round, c, part);
      out.insert(out.end(), reduced.begin(), reduced.end());
    }
    return out;
  }

  // Frame binding so the barrier works across any transport.
  // Request kAllReduce s0: u32 rank, u64 round, u32 chunk; s1: f32 values.
  // Reply   kAllReduce s0: u64 n; s1: f32 values.
  Frame handle(const Frame& req) {
    if (req.type != MsgType::kAllReduce || req.sections.size() != 2) {
      throw ProtocolError("allreduce: unexpected frame shape");
    }
    SectionReader r0(req.sections[0]);
    uint32_t rank = r0.u32();
    uint64_t round = r0.u64();
    uint32_t chunk = r0.u32();
    r0.expect_end();
    SectionReader r1(req.sections[1]);
    std::vector<float> grad(r1.remaining() / sizeof(float));
    r1.f32_array(grad.data(), grad.size());
    r1.expect_end();

    std::vector<float> result = reduce_part(rank, round, chunk, grad);
    SectionWriter s0;
    s0.u64(result.size());
    SectionWriter s1;
    s1.f32_array(result.data(), result.size());
    Frame reply;
    reply.type = MsgType::kAllReduce;
    reply.sections.push_back(s0.take());
    reply.sections.push_back(s1.take());
    return reply;
  }

  // Abandons all in-flight rounds (recovery restart); waiters get errors.
  void reset() {
    std::lock_guard<std::mutex> lk(mu_);
    for (auto& [key, r] : rounds_) {
      if (!r.done) {
        r.failed = true;
        r.error = "allreduce round abandoned by reset";
      }
    }
    cv_.notify_all();
    gc_locked();
  }

  void shutdown() {
    std::lock_guard<std::mutex> lk(mu_);
    shutdown_ = true;
    cv_.notify_all();
  }

  uint32_t worker_count() const { return worker_count_; }

 private:
  struct Round {
    std::map<uint32_t, std::vector<float>> parts;
    std::vector<float> result;
    bool done = false;
    bool failed = false;
    std::string error;
    uint32_t fetched = 0;
  };

  std::vector<float> reduce_part(uint32_t rank, uint64_t round, uint32_t chunk,
                                 const std::vector<float>& grad) {
    if (rank >= worker_count_) {
      throw PreconditionError("allreduce: rank " + std::to_string(rank) + " out of range");
    }
    std::unique_lock<std::mutex> lk(mu_);
    if (shutdown_) throw SyncFailureError("allreduce: hub shut down");
    Round& r = rounds_[{round, chunk}];
    if (r.failed) throw SyncFailureError(r.error);
    if (r.parts.count(rank)) {
      poison_locked(r, "allreduce: duplicate contribution from rank " + std::to_string(rank));
      throw ProtocolError(r.error);
    }
    if (!r.parts.empty() && r.parts.begin()->second.size() != grad.size()) {
      poison_locked(r, "allreduce: gradient shape mismatch at rank " + std::to_string(rank));
      throw PreconditionError(r.error);
    }
    r.parts.emplace(rank, grad);
    if (r.parts.size() == worker_count_) {
      r.result = canonical_mean(r.parts);
      r.done = true;
      cv_.notify_all();
    } else {
      bool ok = cv_.wait_for(lk, std::chrono::milliseconds(timeout_ms_),
                             [&] { return r.done || r.failed || shutdown_; });
      if (shutdown_ && !r.done) throw SyncFailureError("allreduce: hub shut down");
      if (r.failed) throw SyncFailureError(r.error);
      if (!ok || !r.done) {
        poison_locked(r, "allreduce: barrier timed out waiting for " +
                             std::to_string(worker_count_ - r.parts.size()) + " worker(s)");
        throw SyncFailureError(r.error);
      }
    }
    std::vector<float> out = r.result;
    if (++r.fetched == worker_count_) rounds_.erase({round, chunk});
    return out;
  }

  // Ranks are distinct and < K, so a full map holds exactly 0..K-1. The sum
  // runs stride-doubling over rank order; every element sees the same
  // reduction tree regardless of which worker triggered the computation.
  std::vector<float> canonical_mean(const std::map<uint32_t, std::vector<float>>& parts) const {
    std::vector<std::vector<float>> acc;
    acc.reserve(worker_count_);
    for (const auto& [rank, g] : parts) acc.push_back(g);
    size_t n = acc[0].size();
    for (uint32_t stride = 1; stride < worker_count_; stride *= 2) {
      for (uint32_t lo = 0; lo + stride < worker_count_; lo += 2 * stride) {
        for (size_t i = 0; i < n; ++i) acc[lo][i] += acc[lo + stride][i];
      }
    }
    std::vector<float> mean = std::move(acc[0]);
    float k = static_cast<float>(worker_count_);
    for (size_t i = 0; i < n; ++i) mean[i] /= k;
    return mean;
  }

  void poison_locked(Round& r, std::string why) {
    r.failed = true;
    r.error = std::move(why);
    cv_.notify_all();
  }

  void gc_locked() {
    for (auto it = rounds_.begin(); it != rounds_.end();) {
      it = it->second.failed ? rounds_.erase(it) : std::next(it);
    }
  }

  uint32_t worker_count_;
  uint32_t timeout_ms_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::pair<uint64_t, uint32_t>, Round> rounds_;
  bool shutdown_ = false;
};

inline Frame make_allreduce_frame(uint32_t rank, uint64_t round, uint32_t chunk,
                                  const std::vector<float>& grad) {
  SectionWriter s0;
  s0.u32(rank);
  s0.u64(round);
  s0.u32(chunk);
  SectionWriter s1;
  s1.f32_array(grad.data(), grad.size());
  Frame f;
  f.type = MsgType::kAllReduce;
  f.sections.push_back(s0.take());
  f.sections.push_back(s1.take());
  return f;
}

inline std::vector<float> parse_allreduce_reply(const Frame& f) {
  if (f.type != MsgType::kAllReduce || f.sections.size() != 2) {
    throw ProtocolError("allreduce reply: unexpected shape");
  }
  SectionReader r0(f.sections[0]);
  uint64_t n = r0.u64();
  r0.expect_end();
  SectionReader r1(f.sections[1]);
  std::vector<float> out(n);
  r1.f32_array(out.data(), n);
  r1.expect_end();
  return out;
}

// Throws unless every replica reports the same parameter hash.
inline void verify_replica_hashes(const std::vector<uint64_t>& hashes) {
  if (hashes.empty()) throw PreconditionError("verify_replica_hashes: no replicas");
  for (size_t i = 1; i < hashes.size(); ++i) {
    if (hashes[i] != hashes[0]) {
      throw ConsistencyError("replica " + std::to_string(i) +
                             " parameter hash diverged from replica 0");
    }
  }
}

struct NnWorkerConfig {
  uint32_t rank = 0;
  uint32_t group_count = 0;
  uint32_t embedding_dim = 0;
  uint32_t non_id_dim = 0;
  uint32_t batch_size = 64;            // hard protocol ceiling 65535
  std::vector<size_t> hidden = {64, 32};
  uint64_t init_seed = 1;              // identical across replicas
  size_t buffer_capacity = 0;          // required > 0
  bool shuffle = false;                // batch assembly policy; FIFO otherwise
  uint64_t shuffle_seed = 0;
  int32_t staleness_cap = -1;          // negative disables the read gate
  bool compress_values = false;
};

// The dense-side trainer replica: buffers dispatched inputs, pulls their
// aggregated embeddings from the owning embedding worker, assembles
// minibatches, and runs forward/backward. Gradient returns are
// fire-and-forget: a failed push is a counted drop, never a retry.
//
// Intake is two-phase so reads can run wide without disturbing training
// order: reserve_slot pins the sample's position (and therefore its
// scheduled step) on the caller's thread, complete_slot performs the
// blocking embedding read on any thread, and eligibility follows reservation
// order exactly, skipping dropped slots. buffer_input is the one-call form.
//
// Staleness gate: a sample whose batch will train as step s has its
// embedding read blocked until the completion frontier reaches s-1-cap.
// Every earlier step can bump an id at most once, so the per-id delay of the
// eventual write-back is bounded by cap (drops only shift samples to earlier
// steps, which tightens the bound).
class NnWorker {
 public:
  NnWorker(NnWorkerConfig cfg, std::vector<std::shared_ptr<Endpoint>> embedding_workers,
           StepClock* clock = nullptr)
      : cfg_(std::move(cfg)),
        ews_(std::move(embedding_workers)),
        clock_(clock),
        shuffle_rng_(mix64(cfg_.shuffle_seed ^ (0x6173e300ull + cfg_.rank))) {
    if (cfg_.group_count == 0) throw ConfigError("NnWorker: group_count must be positive");
    if (cfg_.embedding_dim == 0) throw ConfigError("NnWorker: embedding_dim must be positive");
    if (cfg_.batch_size == 0 || cfg_.batch_size > 65535) {
      throw ConfigError("NnWorker: batch_size must be in [1, 65535]");
    }
    if (cfg_.buffer_capacity == 0) throw ConfigError("NnWorker: buffer_capacity must be positive");
    if (ews_.empty()) throw ConfigError("NnWorker: need at least one embedding worker");
    std::vector<size_t> dims;  // the net appends its own output unit
    dims.push_back(static_cast<size_t>(cfg_.group_count) * cfg_.embedding_dim + cfg_.non_id_dim);
    dims.insert(dims.end(), cfg_.hidden.begin(), cfg_.hidden.end());
    Rng rng(mix64(cfg_.init_seed));
    net_ = DenseNet<float>(dims, rng);
  }

  uint32_t rank() const { return cfg_.rank; }
  DenseNet<float>& net() { return net_; }
  const DenseNet<float>& net() const { return net_; }
  uint64_t param_hash() const { return net_.param_hash(); }

  // Reserves the sample's position in the training order and stores its
  // dense half. Returns the slot index; index / batch_size is the step the
  // sample is scheduled to train in.
  uint64_t reserve_slot(SampleId sid, const NonIdFeatures& non_id, Label label) {
    std::lock_guard<std::mutex> lk(mu_);
    if (index_of_.count(sid)) {
      throw ProtocolError("reserve_slot: duplicate sample id " + std::to_string(sid.raw));
    }
    if (index_of_.size() >= cfg_.buffer_capacity) {
      throw BackpressureError("input buffer full at capacity " +
                              std::to_string(cfg_.buffer_capacity));
    }
    uint64_t index = next_index_++;
    index_of_.emplace(sid, index);
    Slot& s = slots_[index];
    s.sid = sid;
    s.non_id = non_id.dense;
    s.label = label.y;
    return index;
  }

  // Pulls the reserved sample's embeddings from the worker that issued its
  // id. A failed pull drops the sample (counted); it never becomes
  // batch-eligible, and its slot is skipped in eligibility order.
  void complete_slot(SampleId sid) {
    uint64_t index;
    uint64_t position;
    {
      std::lock_guard<std::mutex> lk(mu_);
      auto it = index_of_.find(sid);
      if (it == index_of_.end() || slots_.count(it->second) == 0) {
        throw PreconditionError("complete_slot: sample has no pending slot");
      }
      index = it->second;
      // Training position: reservation order compacted by drops ahead of
      // this slot. Drops behind it cannot matter, and later drops ahead only
      // move the sample to an earlier batch, so the step derived here is an
      // upper bound and the gate below stays conservative.
      uint64_t holes = compacted_drops_ +
                       static_cast<uint64_t>(std::distance(
                           dropped_.begin(), dropped_.lower_bound(index)));
      position = index - holes;
    }

    PullResult pulled;
    try {
      if (clock_ && cfg_.staleness_cap >= 0) {
        clock_->wait_frontier(static_cast<int64_t>(position / cfg_.batch_size) - 1 -
                              cfg_.staleness_cap);
      }
      uint32_t ew = decode_rank(sid);
      if (ew >= ews_.size()) {
        throw ProtocolError("complete_slot: no embedding worker for rank " + std::to_string(ew));
      }
      Frame reply = ews_[ew]->request_ok(make_sample_pull_frame(sid));
      pulled = parse_sample_pull_reply(reply);
      if (pulled.group_count != cfg_.group_count || pulled.dim != cfg_.embedding_dim) {
        throw ProtocolError("complete_slot: pull reply shape mismatch");
      }
    } catch (const ClockError&) {
      drop_slot(sid, index);
      throw;  // clock shutdown aborts the run, not a sample drop
    } catch (const Error&) {
      drop_slot(sid, index);
      return;
    }

    std::lock_guard<std::mutex> lk(mu_);
    Slot& s = slots_.at(index);
    s.state = Slot::State::kReady;
    s.embeddings = std::move(pulled.values);
    s.read_versions = std::move(pulled.read_versions);
    emit_in_order();
  }

  // One-call intake: reserve, then complete on the same thread.
  void buffer_input(SampleId sid, const NonIdFeatures& non_id, Label label) {
    reserve_slot(sid, non_id, label);
    complete_slot(sid);
  }

  // Pops b eligible samples (FIFO, or a seeded partial shuffle) into a batch;
  // nullopt when fewer than b are eligible (the caller waits).
  std::optional<Minibatch> try_assemble(uint32_t b = 0) {
    if (b == 0) b = cfg_.batch_size;
    if (b > cfg_.batch_size) {
      throw PreconditionError("try_assemble: batch " + std::to_string(b) +
                              " exceeds configured size");
    }
    std::lock_guard<std::mutex> lk(mu_);
    if (queue_.size() < b) return std::nullopt;
    if (cfg_.shuffle) {
      for (uint32_t i = 0; i < b; ++i) {
        size_t j = i + static_cast<size_t>(shuffle_rng_.uniform_u64(queue_.size() - i));
        std::swap(queue_[i], queue_[j]);
      }
    }
    Minibatch m;
    for (uint32_t i = 0; i < b; ++i) {
      SampleId sid = queue_.front();
      queue_.pop_front();
      auto it = ready_.find(sid);
      Ready r = std::move(it->second);
      ready_.erase(it);
      index_of_.erase(sid);
      m.sample_ids.push_back(sid);
      m.embeddings.push_back(std::move(r.embeddings));
      m.non_id.push_back(std::move(r.non_id));
      m.labels.push_back(r.label);
      m.read_versions.push_back(std::move(r.read_versions));
    }
    trained_count_.fetch_add(b);
    return m;
  }

  // Mean-loss forward/backward. Produces the dense gradient and the
  // embedding-input gradient slice per sample; applies nothing.
  GradientBundle train_step(const Minibatch& batch) const {
    size_t b = batch.sample_ids.size();
    if (b == 0) throw PreconditionError("train_step: empty batch");
    size_t emb_width = static_cast<size_t>(cfg_.group_count) * cfg_.embedding_dim;
    std::vector<std::vector<float>> inputs(b);
    for (size_t i = 0; i < b; ++i) {
      if (batch.embeddings[i].size() != emb_width ||
          batch.non_id[i].size() != cfg_.non_id_dim) {
        throw PreconditionError("train_step: sample " + std::to_string(i) + " malformed");
      }
      inputs[i].reserve(emb_width + cfg_.non_id_dim);
      inputs[i].insert(inputs[i].end(), batch.embeddings[i].begin(), batch.embeddings[i].end());
      inputs[i].insert(inputs[i].end(), batch.non_id[i].begin(), batch.non_id[i].end());
    }
    BatchResult<float> res = batch_forward_backward(net_, inputs, batch.labels);
    GradientBundle out;
    out.mean_loss = res.mean_loss;
    out.probs = std::move(res.probs);
    out.dense_grad = std::move(res.dense_grad);
    out.embedding_grads.resize(b);
    for (size_t i = 0; i < b; ++i) {
      out.embedding_grads[i].assign(res.input_grads[i].begin(),
                                    res.input_grads[i].begin() +
                                        static_cast<ptrdiff_t>(emb_width));
    }
    return out;
  }

  void apply_dense_update(const std::vector<float>& grad, float lr) {
    sgd_step(net_.params(), grad, lr);
  }

  // Pushes each sample's embedding gradient back to its issuing worker.
  // Fire-and-forget: failures count as drops, and this side then completes
  // the sample on the clock (the worker never saw the push, so it cannot).
  void emit_embedding_grads(const Minibatch& batch, const GradientBundle& bundle, float lr,
                            uint64_t step, bool has_step) {
    if (bundle.embedding_grads.size() != batch.sample_ids.size()) {
      throw PreconditionError("emit_embedding_grads: bundle does not match batch");
    }
    for (size_t i = 0; i < batch.sample_ids.size(); ++i) {
      SampleId sid = batch.sample_ids[i];
      uint32_t ew = decode_rank(sid);
      bool delivered = false;
      if (ew < ews_.size()) {
        try {
          Frame reply = ews_[ew]->request(
              make_sample_push_frame(sid, bundle.embedding_grads[i], lr, step, has_step,
                                     cfg_.embedding_dim, cfg_.compress_values),
              /*idempotent=*/false);
          delivered = reply.type == MsgType::kAck;
        } catch (const Error&) {
          delivered = false;
        }
      }
      if (!delivered) {
        grad_drops_.fetch_add(1);
        if (clock_ && has_step) clock_->mark_done(step);
      }
    }
  }

  // Gated mode: announces this trainer's end of step to every embedding
  // worker, in ascending worker order. The order is a deadlock-freedom
  // contract: flushes are serialized by worker rank, so the completing
  // marker for worker r must never be sent after the one for r+1 was
  // triggered elsewhere. A lost marker would stall the barrier, so it is a
  // synchronization failure, not a tolerated drop.
  void broadcast_flush(uint64_t step) {
    for (size_t ew = 0; ew < ews_.size(); ++ew) {
      bool delivered = false;
      try {
        Frame reply = ews_[ew]->request(make_flush_frame(step, cfg_.rank), /*idempotent=*/false);
        delivered = reply.type == MsgType::kAck;
      } catch (const Error&) {
        delivered = false;
      }
      if (!delivered) {
        throw SyncFailureError("flush marker for step " + std::to_string(step) +
                               " lost to embedding worker " + std::to_string(ew));
      }
    }
  }

  // Abandons all eligible samples (worker restart or end-of-run drain).
  size_t drain_drops() {
    std::lock_guard<std::mutex> lk(mu_);
    size_t n = queue_.size();
    for (SampleId sid : queue_) index_of_.erase(sid);
    queue_.clear();
    ready_.clear();
    return n;
  }

  size_t eligible_count() const {
    std::lock_guard<std::mutex> lk(mu_);
    return queue_.size();
  }
  // Samples reserved and not yet assembled (pending pulls plus eligible).
  size_t tracked_count() const {
    std::lock_guard<std::mutex> lk(mu_);
    return index_of_.size();
  }
  uint64_t pull_drops() const { return pull_drops_.load(); }
  uint64_t grad_drops() const { return grad_drops_.load(); }
  uint64_t trained_count() const { return trained_count_.load(); }

 private:
  struct Slot {
    enum class State : uint8_t { kPending, kReady };
    State state = State::kPending;
    SampleId sid;
    std::vector<float> embeddings;
    std::vector<uint64_t> read_versions;
    std::vector<float> non_id;
    float label = 0.0f;
  };

  struct Ready {
    std::vector<float> embeddings;
    std::vector<uint64_t> read_versions;
    std::vector<float> non_id;
    float label = 0.0f;
  };

  void drop_slot(SampleId sid, uint64_t index) {
    std::lock_guard<std::mutex> lk(mu_);
    pull_drops_.fetch_add(1);
    index_of_.erase(sid);
    slots_.erase(index);
    dropped_.insert(index);
    emit_in_order();
  }

  // Moves consecutively resolved slots into the eligibility queue; dropped
  // indices are skipped so later samples shift to earlier batches.
  void emit_in_order() {
    for (;;) {
      if (dropped_.count(next_emit_)) {
        dropped_.erase(next_emit_);
        ++compacted_drops_;
        ++next_emit_;
        continue;
      }
      auto it = slots_.find(next_emit_);
      if (it == slots_.end() || it->second.state != Slot::State::kReady) return;
      Slot s = std::move(it->second);
      slots_.erase(it);
      Ready& r = ready_[s.sid];
      r.embeddings = std::move(s.embeddings);
      r.read_versions = std::move(s.read_versions);
      r.non_id = std::move(s.non_id);
      r.label = s.label;
      queue_.push_back(s.sid);
      ++next_emit_;
    }
  }

  NnWorkerConfig cfg_;
  std::vector<std::shared_ptr<Endpoint>> ews_;
  StepClock* clock_;
  Rng shuffle_rng_;
  DenseNet<float> net_;

  mutable std::mutex mu_;
  std::unordered_map<SampleId, uint64_t> index_of_;  // reserved through assembled
  std::map<uint64_t, Slot> slots_;                   // reserved, not yet eligible
  std::set<uint64_t> dropped_;                       // holes awaiting the emit scan
  uint64_t compacted_drops_ = 0;                     // holes behind next_emit_
  std::unordered_map<SampleId, Ready> ready_;
  std::deque<SampleId> queue_;                       // eligibility in slot order
  uint64_t next_index_ = 0;
  uint64_t next_emit_ = 0;
  std::atomic<uint64_t> pull_drops_{0};
  std::atomic<uint64_t> grad_drops_{0};
  std::atomic<uint64_t> trained_count_{0};
};

}  // namespace hybridps
