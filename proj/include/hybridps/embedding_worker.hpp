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
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hybridps/codec.hpp"
#include "hybridps/core.hpp"
#include "hybridps/embedding_ps.hpp"
#include "hybridps/errors.hpp"
#include "hybridps/staleness.hpp"
#include "hybridps/transport.hpp"
#include "hybridps/wire.hpp"

namespace hybridps {

// ---------------------------------------------------------------------------
// Value payload sections. A raw section is the flat f32 array; a compressed
// section (frame flags bit 0) carries one block per `block_len` floats:
// f32 scale, u32 length, u16 payload. Compression is applied per embedding
// row so each row keeps its own scale.
// ---------------------------------------------------------------------------

inline void write_values_section(SectionWriter& w, const float* v, size_t count,
                                 size_t block_len, bool compress) {
  if (!compress) {
    w.f32_array(v, count);
    return;
  }
  for (size_t off = 0; off < count; off += block_len) {
    size_t n = std::min(block_len, count - off);
    CompressedBlock b = compress_values(std::vector<float>(v + off, v + off + n));
    w.f32(b.scale);
    w.u32(b.block_len);
    w.u16_array(b.payload.data(), b.payload.size());
  }
}

inline std::vector<float> read_values_section(SectionReader& r, size_t count, size_t block_len,
                                              bool compressed) {
  std::vector<float> out(count);
  if (!compressed) {
    r.f32_array(out.data(), count);
    return out;
  }
  for (size_t off = 0; off < count; off += block_len) {
    size_t n = std::min(block_len, count - off);
    CompressedBlock b;
    b.scale = r.f32();
    b.block_len = r.u32();
    if (b.block_len != n) {
      throw ProtocolError("value section: block length " + std::to_string(b.block_len) +
                          " does not match expected " + std::to_string(n));
    }
    b.payload.resize(n);
    r.u16_array(b.payload.data(), n);
    std::vector<float> vals = decompress_values(b);
    std::copy(vals.begin(), vals.end(), out.begin() + static_cast<ptrdiff_t>(off));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter-server frame protocol. One service per shard; the caller routes
// ids with route_shard before building a request.
//
// get:  kPullEmbedding  s0: u32 dim, u64 n, u64[n] ids
//       reply kEmbeddingReply  s0: u64 n, u64[n] versions; s1: values n*dim
// put:  kPushGradient   s0: u32 dim, f32 lr, u32 step_tag, u32 epoch,
//                           u8 tracked, u64 n, u64[n] ids,
//                           u64[n] read_versions (tracked only)
//                       s1: values n*dim
//       reply kAck      s0: u8 accepted, u64 n, u32[n] delays
//                           (present only when tracked and accepted)
// ---------------------------------------------------------------------------

inline Frame make_ps_pull_frame(uint32_t dim, const std::vector<uint64_t>& ids) {
  SectionWriter w;
  w.u32(dim);
  w.u64(ids.size());
  w.u64_array(ids.data(), ids.size());
  Frame f;
  f.type = MsgType::kPullEmbedding;
  f.sections.push_back(w.take());
  return f;
}

struct PsPullReply {
  std::vector<uint64_t> versions;
  std::vector<float> values;  // n * dim
};

inline PsPullReply parse_ps_pull_reply(const Frame& f, uint32_t dim) {
  if (f.type != MsgType::kEmbeddingReply || f.sections.size() != 2) {
    throw ProtocolError("ps pull reply: unexpected shape");
  }
  SectionReader r0(f.sections[0]);
  uint64_t n = r0.u64();
  PsPullReply out;
  out.versions.resize(n);
  r0.u64_array(out.versions.data(), n);
  r0.expect_end();
  SectionReader r1(f.sections[1]);
  out.values = read_values_section(r1, n * dim, dim, f.flags & kFlagValuesCompressed);
  r1.expect_end();
  return out;
}

struct PsPushRequest {
  uint32_t dim = 0;
  float lr = 0.0f;
  uint32_t step_tag = 0;
  uint32_t epoch = 0;
  bool tracked = false;
  std::vector<uint64_t> ids;
  std::vector<uint64_t> read_versions;  // aligned with ids when tracked
  std::vector<float> values;            // ids.size() * dim
};

inline Frame make_ps_push_frame(const PsPushRequest& req, bool compress) {
  SectionWriter w;
  w.u32(req.dim);
  w.f32(req.lr);
  w.u32(req.step_tag);
  w.u32(req.epoch);
  w.u8(req.tracked ? 1 : 0);
  w.u64(req.ids.size());
  w.u64_array(req.ids.data(), req.ids.size());
  if (req.tracked) w.u64_array(req.read_versions.data(), req.read_versions.size());
  SectionWriter vals;
  write_values_section(vals, req.values.data(), req.values.size(), req.dim, compress);
  Frame f;
  f.type = MsgType::kPushGradient;
  if (compress) f.flags |= kFlagValuesCompressed;
  f.sections.push_back(w.take());
  f.sections.push_back(vals.take());
  return f;
}

struct PsPushReply {
  bool accepted = false;
  std::vector<uint32_t> delays;
};

inline PsPushReply parse_ps_push_reply(const Frame& f) {
  if (f.type != MsgType::kAck || f.sections.size() != 1) {
    throw ProtocolError("ps push reply: unexpected shape");
  }
  SectionReader r(f.sections[0]);
  PsPushReply out;
  out.accepted = r.u8() != 0;
  uint64_t n = r.u64();
  out.delays.resize(n);
  for (uint64_t i = 0; i < n; ++i) out.delays[i] = r.u32();
  r.expect_end();
  return out;
}

// Serves one PsShard over the frame protocol. Replies carry compressed
// values when constructed with compress = true.
class PsShardService {
 public:
  explicit PsShardService(PsShard& shard, bool compress = false)
      : shard_(shard), compress_(compress) {}

  Frame operator()(const Frame& req) {
    switch (req.type) {
      case MsgType::kPullEmbedding:
        return handle_pull(req);
      case MsgType::kPushGradient:
        return handle_push(req);
      default:
        throw ProtocolError("ps service: unsupported message type");
    }
  }

 private:
  Frame handle_pull(const Frame& req) {
    if (req.sections.size() != 1) throw ProtocolError("ps pull: unexpected shape");
    SectionReader r(req.sections[0]);
    uint32_t dim = r.u32();
    if (dim != shard_.embedding_dim()) {
      throw ProtocolError("ps pull: dimension mismatch");
    }
    uint64_t n = r.u64();
    std::vector<uint64_t> ids(n);
    r.u64_array(ids.data(), n);
    r.expect_end();

    std::vector<float> values(n * dim);
    std::vector<uint64_t> versions(n);
    shard_.lookup(ids, values.data(), versions.data());

    SectionWriter s0;
    s0.u64(n);
    s0.u64_array(versions.data(), n);
    SectionWriter s1;
    write_values_section(s1, values.data(), values.size(), dim, compress_);
    Frame reply;
    reply.type = MsgType::kEmbeddingReply;
    if (compress_) reply.flags |= kFlagValuesCompressed;
    reply.sections.push_back(s0.take());
    reply.sections.push_back(s1.take());
    return reply;
  }

  Frame handle_push(const Frame& req) {
    if (req.sections.size() != 2) throw ProtocolError("ps push: unexpected shape");
    SectionReader r(req.sections[0]);
    PsPushRequest p;
    p.dim = r.u32();
    if (p.dim != shard_.embedding_dim()) {
      throw ProtocolError("ps push: dimension mismatch");
    }
    p.lr = r.f32();
    p.step_tag = r.u32();
    p.epoch = r.u32();
    p.tracked = r.u8() != 0;
    uint64_t n = r.u64();
    p.ids.resize(n);
    r.u64_array(p.ids.data(), n);
    if (p.tracked) {
      p.read_versions.resize(n);
      r.u64_array(p.read_versions.data(), n);
    }
    r.expect_end();
    SectionReader rv(req.sections[1]);
    std::vector<float> values =
        read_values_section(rv, n * p.dim, p.dim, req.flags & kFlagValuesCompressed);
    rv.expect_end();

    bool accepted;
    std::vector<uint32_t> delays;
    if (p.tracked) {
      std::vector<PsShard::VersionedGrad> grads(n);
      for (uint64_t i = 0; i < n; ++i) {
        grads[i] = {p.ids[i], values.data() + i * p.dim, p.read_versions[i]};
      }
      accepted = shard_.apply_gradients(grads, p.lr, p.step_tag, p.epoch, &delays);
    } else {
      std::map<uint64_t, std::vector<float>> grads;
      for (uint64_t i = 0; i < n; ++i) {
        grads[p.ids[i]] = std::vector<float>(values.begin() + static_cast<ptrdiff_t>(i * p.dim),
                                             values.begin() + static_cast<ptrdiff_t>((i + 1) * p.dim));
      }
      shard_.apply_gradients_map(grads, p.lr);
      accepted = true;
    }

    SectionWriter s0;
    s0.u8(accepted ? 1 : 0);
    if (p.tracked && accepted) {
      s0.u64(delays.size());
      for (uint32_t d : delays) s0.u32(d);
    } else {
      s0.u64(0);
    }
    Frame reply;
    reply.type = MsgType::kAck;
    reply.sections.push_back(s0.take());
    return reply;
  }

  PsShard& shard_;
  bool compress_;
};

// ---------------------------------------------------------------------------
// Deterministic apply gate. In gated mode every worker stages its gradient
// applies per step and flushes them in ascending worker-rank order, making
// the parameter-server update sequence a pure function of the sample stream.
// ---------------------------------------------------------------------------

class GatedFlushCoordinator {
 public:
  explicit GatedFlushCoordinator(uint32_t worker_count) : worker_count_(worker_count) {
    if (worker_count == 0) {
      throw PreconditionError("GatedFlushCoordinator: worker_count must be positive");
    }
  }

  // Blocks until every lower rank has finished flushing `step`.
  void begin_flush(uint64_t step, uint32_t rank) {
    std::unique_lock<std::mutex> lk(mu_);
    cv_.wait(lk, [&] { return next_rank_locked(step) == rank || shutdown_; });
    if (shutdown_) throw ClockError("flush coordinator shut down");
  }

  void end_flush(uint64_t step, uint32_t rank) {
    std::lock_guard<std::mutex> lk(mu_);
    uint32_t& next = turns_[step];
    if (next != rank) {
      throw ClockError("flush ladder: rank " + std::to_string(rank) +
                       " ended flush out of turn for step " + std::to_string(step));
    }
    if (++next == worker_count_) turns_.erase(step);
    cv_.notify_all();
  }

  void shutdown() {
    std::lock_guard<std::mutex> lk(mu_);
    shutdown_ = true;
    cv_.notify_all();
  }

 private:
  uint32_t next_rank_locked(uint64_t step) {
    auto it = turns_.find(step);
    return it == turns_.end() ? 0 : it->second;
  }

  uint32_t worker_count_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::map<uint64_t, uint32_t> turns_;
  bool shutdown_ = false;
};

// ---------------------------------------------------------------------------
// Embedding worker frame protocol.
//
// register: kRegisterSample s0: u32 groups, per group (u64 c, u64[c] ids)
//           reply kAck      s0: u8 ok (0 = backpressure, retry), u64 sample_id
// pull:     kPullEmbedding  s0: u64 sample_id
//           reply kEmbeddingReply s0: u32 groups, u32 dim,
//                                     u64 m, u64[m] read_versions (per listed id)
//                                 s1: values groups*dim
// push:     kPushGradient   s0: u64 sample_id, f32 lr, u64 step, u8 has_step
//                           s1: values groups*dim
//           reply kAck      (empty)
// flush:    kFlushStep      s0: u64 step, u32 nn_rank; reply kAck (empty)
// ---------------------------------------------------------------------------

inline Frame make_register_frame(const IdFeatures& ids) {
  SectionWriter w;
  w.u32(static_cast<uint32_t>(ids.groups.size()));
  for (const auto& g : ids.groups) {
    w.u64(g.size());
    w.u64_array(g.data(), g.size());
  }
  Frame f;
  f.type = MsgType::kRegisterSample;
  f.sections.push_back(w.take());
  return f;
}

// Returns the issued SampleId; throws BackpressureError when the worker's
// buffer was full (the caller retries).
inline SampleId parse_register_reply(const Frame& f) {
  if (f.type != MsgType::kAck || f.sections.size() != 1) {
    throw ProtocolError("register reply: unexpected shape");
  }
  SectionReader r(f.sections[0]);
  uint8_t ok = r.u8();
  SampleId sid{r.u64()};
  r.expect_end();
  if (!ok) throw BackpressureError("embedding worker buffer full");
  return sid;
}

inline Frame make_sample_pull_frame(SampleId sid) {
  SectionWriter w;
  w.u64(sid.raw);
  Frame f;
  f.type = MsgType::kPullEmbedding;
  f.sections.push_back(w.take());
  return f;
}

// Aggregated per-group embedding for one sample: group_count*dim values plus
// one read-version stamp per listed id (group-major, duplicates repeated).
struct PullResult {
  uint32_t group_count = 0;
  uint32_t dim = 0;
  std::vector<float> values;
  std::vector<uint64_t> read_versions;
};

inline PullResult parse_sample_pull_reply(const Frame& f) {
  if (f.type != MsgType::kEmbeddingReply || f.sections.size() != 2) {
    throw ProtocolError("pull reply: unexpected shape");
  }
  SectionReader r0(f.sections[0]);
  PullResult out;
  out.group_count = r0.u32();
  out.dim = r0.u32();
  uint64_t m = r0.u64();
  out.read_versions.resize(m);
  r0.u64_array(out.read_versions.data(), m);
  r0.expect_end();
  SectionReader r1(f.sections[1]);
  out.values = read_values_section(r1, static_cast<size_t>(out.group_count) * out.dim, out.dim,
                                   f.flags & kFlagValuesCompressed);
  r1.expect_end();
  return out;
}

inline Frame make_sample_push_frame(SampleId sid, const std::vector<float>& grads, float lr,
                                    uint64_t step, bool has_step, uint32_t dim, bool compress) {
  SectionWriter w;
  w.u64(sid.raw);
  w.f32(lr);
  w.u64(step);
  w.u8(has_step ? 1 : 0);
  SectionWriter vals;
  write_values_section(vals, grads.data(), grads.size(), dim, compress);
  Frame f;
  f.type = MsgType::kPushGradient;
  if (compress) f.flags |= kFlagValuesCompressed;
  f.sections.push_back(w.take());
  f.sections.push_back(vals.take());
  return f;
}

inline Frame make_flush_frame(uint64_t step, uint32_t nn_rank) {
  SectionWriter w;
  w.u64(step);
  w.u32(nn_rank);
  Frame f;
  f.type = MsgType::kFlushStep;
  f.sections.push_back(w.take());
  return f;
}

struct EmbeddingWorkerConfig {
  uint32_t rank = 0;
  uint32_t group_count = 0;
  uint32_t embedding_dim = 0;
  ModelConfig::Aggregation aggregation = ModelConfig::Aggregation::kMean;
  size_t buffer_capacity = 0;  // recommended 4 * batch_size * nn_worker_count
  bool compress_values = false;
  uint32_t nn_worker_count = 1;  // end-of-step markers expected in gated mode
  bool gated = false;            // stage applies, flush on the marker barrier
};

// The asynchronous embedding service: buffers id features per sample, serves
// aggregated embedding pulls, and relays per-sample gradients to the
// parameter-server shards with the chain-rule fan-out. The buffer lock is
// never held across parameter-server I/O; concurrent pulls proceed freely.
//
// Completion accounting: for a push carrying a step, this worker marks the
// sample done on the shared clock after its write-back lands (immediately,
// or at the gated flush), including the unknown-sample drop path. The sender
// marks done only when delivery itself fails, so each sample completes
// exactly once on the supported transports.
class EmbeddingWorker {
 public:
  EmbeddingWorker(EmbeddingWorkerConfig cfg, std::vector<std::shared_ptr<Endpoint>> ps_shards,
                  StepClock* clock = nullptr, GatedFlushCoordinator* ladder = nullptr,
                  StalenessStats* staleness = nullptr)
      : cfg_(cfg),
        ps_(std::move(ps_shards)),
        clock_(clock),
        ladder_(ladder),
        staleness_(staleness) {
    if (cfg_.group_count == 0) throw ConfigError("EmbeddingWorker: group_count must be positive");
    if (cfg_.embedding_dim == 0) {
      throw ConfigError("EmbeddingWorker: embedding_dim must be positive");
    }
    if (cfg_.buffer_capacity == 0) {
      throw ConfigError("EmbeddingWorker: buffer_capacity must be positive");
    }
    if (ps_.empty()) throw ConfigError("EmbeddingWorker: need at least one PS shard");
  }

  uint32_t rank() const { return cfg_.rank; }

  // Buffers one sample's id features under a fresh SampleId.
  SampleId register_sample(const IdFeatures& ids) {
    if (ids.groups.size() != cfg_.group_count) {
      throw PreconditionError("register_sample: expected " + std::to_string(cfg_.group_count) +
                              " feature groups, got " + std::to_string(ids.groups.size()));
    }
    std::lock_guard<std::mutex> lk(mu_);
    if (buffer_.size() >= cfg_.buffer_capacity) {
      throw BackpressureError("feature buffer full at capacity " +
                              std::to_string(cfg_.buffer_capacity));
    }
    SampleId sid = encode_sample_id(cfg_.rank, counter_++);
    Entry& e = buffer_[sid];
    e.ids = ids;
    e.insert_seq = insert_seq_++;
    registered_++;
    return sid;
  }

  // Test/diagnostic access to a buffered sample's features.
  bool find_features(SampleId sid, IdFeatures* out) const {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = buffer_.find(sid);
    if (it == buffer_.end()) return false;
    if (out) *out = it->second.ids;
    return true;
  }

  // Looks up every id of the sample (batched per shard), aggregates each
  // group, and stashes the read versions for the backward pass. No lock is
  // held across the shard round-trips.
  PullResult serve_pull(SampleId sid) {
    IdFeatures ids;
    {
      std::lock_guard<std::mutex> lk(mu_);
      auto it = buffer_.find(sid);
      if (it == buffer_.end()) {
        throw StaleSampleError("serve_pull: unknown sample id " + std::to_string(sid.raw));
      }
      ids = it->second.ids;
    }

    std::map<uint64_t, RowRead> rows = fetch_rows(ids);

    PullResult out;
    out.group_count = cfg_.group_count;
    out.dim = cfg_.embedding_dim;
    out.values.assign(static_cast<size_t>(cfg_.group_count) * cfg_.embedding_dim, 0.0f);
    std::vector<uint64_t> versions;
    for (uint32_t g = 0; g < cfg_.group_count; ++g) {
      const auto& list = ids.groups[g];
      if (list.empty()) continue;
      std::vector<double> acc(cfg_.embedding_dim, 0.0);
      for (uint64_t id : list) {
        const RowRead& row = rows.at(id);
        for (uint32_t d = 0; d < cfg_.embedding_dim; ++d) acc[d] += row.values[d];
        versions.push_back(row.version);
      }
      double scale = cfg_.aggregation == ModelConfig::Aggregation::kMean
                         ? 1.0 / static_cast<double>(list.size())
                         : 1.0;
      for (uint32_t d = 0; d < cfg_.embedding_dim; ++d) {
        out.values[static_cast<size_t>(g) * cfg_.embedding_dim + d] =
            static_cast<float>(acc[d] * scale);
      }
    }
    out.read_versions = versions;

    {
      std::lock_guard<std::mutex> lk(mu_);
      auto it = buffer_.find(sid);
      if (it != buffer_.end()) {
        it->second.read_versions.clear();
        for (uint64_t id : all_ids_in_order(ids)) {
          it->second.read_versions.emplace_back(id, rows.at(id).version);
        }
      }
    }
    return out;
  }

  // Relays one sample's per-group gradients to the shards (or stages them in
  // gated mode). Unknown sample ids are counted drops, not errors.
  void apply_backward(SampleId sid, const std::vector<float>& grads, float lr, uint64_t step = 0,
                      bool has_step = false) {
    if (grads.size() != static_cast<size_t>(cfg_.group_count) * cfg_.embedding_dim) {
      throw ProtocolError("apply_backward: gradient shape " + std::to_string(grads.size()) +
                          " does not match " + std::to_string(cfg_.group_count) + "x" +
                          std::to_string(cfg_.embedding_dim));
    }
    if (cfg_.gated) {
      std::lock_guard<std::mutex> lk(stage_mu_);
      staged_[step].push_back(Staged{sid, grads, lr, has_step});
      return;
    }
    Entry entry;
    if (!extract_entry(sid, &entry)) {
      drop_and_mark(step, has_step);
      return;
    }
    push_to_shards(entry, grads, lr, step, has_step);
    if (clock_ && has_step) clock_->mark_done(step);
  }

  // Records one trainer's end-of-step marker. The marker completing the
  // barrier runs the flush on the caller's thread: staged applies land in
  // ascending-sample-id order, serialized across workers by the ladder.
  void flush_step_marker(uint64_t step, uint32_t nn_rank) {
    {
      std::lock_guard<std::mutex> lk(stage_mu_);
      auto& marks = markers_[step];
      marks.insert(nn_rank);
      if (marks.size() < cfg_.nn_worker_count) return;
    }
    flush_step(step);
  }

  // Abandons the buffer (worker restart). Staged gradients stay queued; the
  // flush resolves them as drops once their entries are gone.
  size_t drop_buffer() {
    std::lock_guard<std::mutex> lk(mu_);
    size_t n = buffer_.size();
    buffer_.clear();
    return n;
  }

  // Epoch stamped on pushes; updated by the orchestrator after PS recovery.
  void set_ps_epoch(uint32_t e) { ps_epoch_.store(e); }
  uint32_t ps_epoch() const { return ps_epoch_.load(); }

  uint64_t registered_count() const {
    std::lock_guard<std::mutex> lk(mu_);
    return registered_;
  }
  uint64_t backward_drops() const {
    std::lock_guard<std::mutex> lk(mu_);
    return backward_drops_;
  }
  size_t buffered_count() const {
    std::lock_guard<std::mutex> lk(mu_);
    return buffer_.size();
  }

  // Frame-protocol surface; bind this to a transport endpoint.
  Frame handle(const Frame& req) {
    switch (req.type) {
      case MsgType::kRegisterSample:
        return handle_register(req);
      case MsgType::kPullEmbedding:
        return handle_pull(req);
      case MsgType::kPushGradient:
        return handle_push(req);
      case MsgType::kFlushStep:
        return handle_flush(req);
      default:
        throw ProtocolError("embedding worker: unsupported message type");
    }
  }

 private:
  struct Entry {
    IdFeatures ids;
    uint64_t insert_seq = 0;
    std::vector<std::pair<uint64_t, uint64_t>> read_versions;  // (id, version) per listing
  };

  struct RowRead {
    std::vector<float> values;
    uint64_t version = 0;
  };

  struct Staged {
    SampleId sid;
    std::vector<float> grads;
    float lr;
    bool has_step;
  };

  std::vector<uint64_t> all_ids_in_order(const IdFeatures& ids) const {
    std::vector<uint64_t> out;
    for (const auto& g : ids.groups) out.insert(out.end(), g.begin(), g.end());
    return out;
  }

  // Batched per-shard lookup of every id the sample lists (deduplicated).
  std::map<uint64_t, RowRead> fetch_rows(const IdFeatures& ids) {
    std::vector<std::vector<uint64_t>> by_shard(ps_.size());
    std::set<uint64_t> seen;
    for (const auto& g : ids.groups) {
      for (uint64_t id : g) {
        if (seen.insert(id).second) {
          by_shard[route_shard(id, static_cast<uint32_t>(ps_.size()))].push_back(id);
        }
      }
    }
    std::map<uint64_t, RowRead> rows;
    for (size_t s = 0; s < ps_.size(); ++s) {
      if (by_shard[s].empty()) continue;
      Frame reply = ps_[s]->request_ok(make_ps_pull_frame(cfg_.embedding_dim, by_shard[s]));
      PsPullReply parsed = parse_ps_pull_reply(reply, cfg_.embedding_dim);
      if (parsed.versions.size() != by_shard[s].size()) {
        throw ProtocolError("ps pull reply: id count mismatch");
      }
      for (size_t i = 0; i < by_shard[s].size(); ++i) {
        RowRead& row = rows[by_shard[s][i]];
        row.values.assign(parsed.values.begin() + static_cast<ptrdiff_t>(i * cfg_.embedding_dim),
                          parsed.values.begin() +
                              static_cast<ptrdiff_t>((i + 1) * cfg_.embedding_dim));
        row.version = parsed.versions[i];
      }
    }
    return rows;
  }

  bool extract_entry(SampleId sid, Entry* out) {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = buffer_.find(sid);
    if (it == buffer_.end()) return false;
    *out = std::move(it->second);
    buffer_.erase(it);
    return true;
  }

  void drop_and_mark(uint64_t step, bool has_step) {
    {
      std::lock_guard<std::mutex> lk(mu_);
      backward_drops_++;
    }
    if (clock_ && has_step) clock_->mark_done(step);
  }

  // Chain rule through the group aggregation: each listing of an id receives
  // grad/n (mean) or grad (sum); listings of the same id accumulate before a
  // single per-id shard apply.
  void push_to_shards(const Entry& entry, const std::vector<float>& grads, float lr,
                      uint64_t step, bool has_step) {
    std::map<uint64_t, std::vector<double>> per_id;
    for (uint32_t g = 0; g < cfg_.group_count; ++g) {
      const auto& list = entry.ids.groups[g];
      if (list.empty()) continue;
      double scale = cfg_.aggregation == ModelConfig::Aggregation::kMean
                         ? 1.0 / static_cast<double>(list.size())
                         : 1.0;
      for (uint64_t id : list) {
        auto& acc = per_id[id];
        if (acc.empty()) acc.assign(cfg_.embedding_dim, 0.0);
        for (uint32_t d = 0; d < cfg_.embedding_dim; ++d) {
          acc[d] += static_cast<double>(grads[static_cast<size_t>(g) * cfg_.embedding_dim + d]) *
                    scale;
        }
      }
    }
    if (per_id.empty()) return;

    std::map<uint64_t, uint64_t> version_of;
    for (const auto& [id, v] : entry.read_versions) {
      version_of.emplace(id, v);
    }
    bool tracked = version_of.size() == per_id.size();

    std::vector<PsPushRequest> by_shard(ps_.size());
    for (const auto& [id, acc] : per_id) {
      PsPushRequest& req = by_shard[route_shard(id, static_cast<uint32_t>(ps_.size()))];
      req.ids.push_back(id);
      if (tracked) req.read_versions.push_back(version_of.at(id));
      for (uint32_t d = 0; d < cfg_.embedding_dim; ++d) {
        req.values.push_back(static_cast<float>(acc[d]));
      }
    }
    for (size_t s = 0; s < ps_.size(); ++s) {
      PsPushRequest& req = by_shard[s];
      if (req.ids.empty()) continue;
      req.dim = cfg_.embedding_dim;
      req.lr = lr;
      req.step_tag = has_step ? static_cast<uint32_t>(step) : 0;
      req.epoch = ps_epoch_.load();
      req.tracked = tracked;
      Frame reply = ps_[s]->request_ok(make_ps_push_frame(req, cfg_.compress_values));
      PsPushReply parsed = parse_ps_push_reply(reply);
      if (parsed.accepted && staleness_) {
        for (uint32_t d : parsed.delays) staleness_->record_delay(d);
      }
    }
  }

  void flush_step(uint64_t step) {
    std::vector<Staged> work;
    {
      std::lock_guard<std::mutex> lk(stage_mu_);
      auto it = staged_.find(step);
      if (it != staged_.end()) {
        work = std::move(it->second);
        staged_.erase(it);
      }
      markers_.erase(step);
    }
    std::sort(work.begin(), work.end(),
              [](const Staged& a, const Staged& b) { return a.sid < b.sid; });
    if (ladder_) ladder_->begin_flush(step, cfg_.rank);
    for (const Staged& st : work) {
      Entry entry;
      if (!extract_entry(st.sid, &entry)) {
        drop_and_mark(step, st.has_step);
        continue;
      }
      push_to_shards(entry, st.grads, st.lr, step, st.has_step);
      if (clock_ && st.has_step) clock_->mark_done(step);
    }
    if (ladder_) ladder_->end_flush(step, cfg_.rank);
  }

  Frame handle_register(const Frame& req) {
    if (req.sections.size() != 1) throw ProtocolError("register: unexpected shape");
    SectionReader r(req.sections[0]);
    IdFeatures ids;
    uint32_t groups = r.u32();
    if (groups != cfg_.group_count) {
      throw ProtocolError("register: group count mismatch");
    }
    ids.groups.resize(groups);
    for (uint32_t g = 0; g < groups; ++g) {
      uint64_t c = r.u64();
      ids.groups[g].resize(c);
      r.u64_array(ids.groups[g].data(), c);
    }
    r.expect_end();

    SectionWriter w;
    try {
      SampleId sid = register_sample(ids);
      w.u8(1);
      w.u64(sid.raw);
    } catch (const BackpressureError&) {
      w.u8(0);
      w.u64(0);
    }
    Frame reply;
    reply.type = MsgType::kAck;
    reply.sections.push_back(w.take());
    return reply;
  }

  Frame handle_pull(const Frame& req) {
    if (req.sections.size() != 1) throw ProtocolError("pull: unexpected shape");
    SectionReader r(req.sections[0]);
    SampleId sid{r.u64()};
    r.expect_end();
    PullResult res = serve_pull(sid);

    SectionWriter s0;
    s0.u32(res.group_count);
    s0.u32(res.dim);
    s0.u64(res.read_versions.size());
    s0.u64_array(res.read_versions.data(), res.read_versions.size());
    SectionWriter s1;
    write_values_section(s1, res.values.data(), res.values.size(), res.dim,
                         cfg_.compress_values);
    Frame reply;
    reply.type = MsgType::kEmbeddingReply;
    if (cfg_.compress_values) reply.flags |= kFlagValuesCompressed;
    reply.sections.push_back(s0.take());
    reply.sections.push_back(s1.take());
    return reply;
  }

  Frame handle_push(const Frame& req) {
    if (req.sections.size() != 2) throw ProtocolError("push: unexpected shape");
    SectionReader r(req.sections[0]);
    SampleId sid{r.u64()};
    float lr = r.f32();
    uint64_t step = r.u64();
    bool has_step = r.u8() != 0;
    r.expect_end();
    SectionReader rv(req.sections[1]);
    std::vector<float> grads =
        read_values_section(rv, static_cast<size_t>(cfg_.group_count) * cfg_.embedding_dim,
                            cfg_.embedding_dim, req.flags & kFlagValuesCompressed);
    rv.expect_end();
    apply_backward(sid, grads, lr, step, has_step);
    Frame reply;
    reply.type = MsgType::kAck;
    return reply;
  }

  Frame handle_flush(const Frame& req) {
    if (req.sections.size() != 1) throw ProtocolError("flush: unexpected shape");
    SectionReader r(req.sections[0]);
    uint64_t step = r.u64();
    uint32_t nn_rank = r.u32();
    r.expect_end();
    flush_step_marker(step, nn_rank);
    Frame reply;
    reply.type = MsgType::kAck;
    return reply;
  }

  EmbeddingWorkerConfig cfg_;
  std::vector<std::shared_ptr<Endpoint>> ps_;
  StepClock* clock_;
  GatedFlushCoordinator* ladder_;
  StalenessStats* staleness_;

  mutable std::mutex mu_;
  std::unordered_map<SampleId, Entry> buffer_;
  uint64_t counter_ = 0;
  uint64_t insert_seq_ = 0;
  uint64_t registered_ = 0;
  uint64_t backward_drops_ = 0;
  std::atomic<uint32_t> ps_epoch_{0};

  std::mutex stage_mu_;
  std::map<uint64_t, std::vector<Staged>> staged_;
  std::map<uint64_t, std::set<uint32_t>> markers_;
};

}  // namespace hybridps
