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
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "hybridps/core.hpp"
#include "hybridps/errors.hpp"

namespace hybridps {

struct SynthConfig {
  std::vector<uint64_t> vocab_per_group = {20000, 20000, 20000, 20000, 20000};
  uint32_t min_ids_per_group = 1;
  uint32_t max_ids_per_group = 3;
  double zipf_s = 1.2;            // frequency skew knob
  uint32_t non_id_dim = 8;
  uint32_t latent_dim = 16;       // per-id latent width; matches embedding_dim
  uint64_t teacher_seed = 17;
  double teacher_scale = 8.0;     // logit spread of the labeling model
  double label_noise = 0.02;      // post-hoc flip probability, < 0.5
  uint64_t sample_count = 200000;

  void validate() const {
    if (vocab_per_group.empty()) throw ConfigError("SynthConfig: need at least one group");
    for (uint64_t v : vocab_per_group) {
      if (v == 0) throw ConfigError("SynthConfig: vocab must be >= 1 per group");
    }
    if (!(label_noise >= 0.0 && label_noise < 0.5)) {
      throw ConfigError("SynthConfig: label_noise must be in [0, 0.5)");
    }
    if (min_ids_per_group == 0 || min_ids_per_group > max_ids_per_group) {
      throw ConfigError("SynthConfig: ids-per-group bounds invalid");
    }
    if (latent_dim == 0) throw ConfigError("SynthConfig: latent_dim must be positive");
  }

  // Groups draw from disjoint id ranges so an id names one embedding row.
  uint64_t group_offset(size_t g) const {
    uint64_t off = 0;
    for (size_t h = 0; h < g; ++h) off += vocab_per_group[h];
    return off;
  }
  uint64_t total_vocab() const { return group_offset(vocab_per_group.size()); }
};

struct Sample {
  IdFeatures ids;
  NonIdFeatures non_id;
  Label label;
};

using Dataset = std::vector<Sample>;

// Rank-frequency sampler: P(rank k) proportional to k^-s over [1, vocab].
// Sampling is a binary search over the precomputed CDF.
class ZipfSampler {
 public:
  ZipfSampler(uint64_t vocab, double s) {
    if (vocab == 0) throw PreconditionError("ZipfSampler: vocab must be positive");
    cdf_.resize(vocab);
    double acc = 0.0;
    for (uint64_t k = 1; k <= vocab; ++k) {
      acc += std::pow(static_cast<double>(k), -s);
      cdf_[k - 1] = acc;
    }
    for (double& c : cdf_) c /= acc;
    cdf_.back() = 1.0;
  }

  // Zero-based rank; rank 0 is the most frequent.
  uint64_t sample(Rng& rng) const {
    double u = rng.uniform01();
    auto it = std::lower_bound(cdf_.begin(), cdf_.end(), u);
    return static_cast<uint64_t>(it - cdf_.begin());
  }

 private:
  std::vector<double> cdf_;
};

// Deterministic per-id latent vector, the labeling model's ground truth.
inline std::vector<float> teacher_latent(uint64_t id, uint64_t teacher_seed, uint32_t dim) {
  Rng rng(mix64(id ^ mix64(teacher_seed)));
  double limit = 1.0 / std::sqrt(static_cast<double>(dim));
  std::vector<float> v(dim);
  for (uint32_t i = 0; i < dim; ++i) v[i] = static_cast<float>(rng.uniform(-limit, limit));
  return v;
}

// The fixed linear map the teacher applies over [group latent means, non-id].
inline std::vector<double> teacher_weights(const SynthConfig& cfg) {
  size_t width = cfg.vocab_per_group.size() * cfg.latent_dim + cfg.non_id_dim;
  Rng rng(mix64(cfg.teacher_seed) ^ 0x7465616368657200ULL);
  double w_scale = cfg.teacher_scale / std::sqrt(static_cast<double>(width));
  std::vector<double> w(width);
  for (double& x : w) x = rng.uniform(-w_scale, w_scale);
  return w;
}

inline double teacher_logit(const SynthConfig& cfg, const std::vector<double>& weights,
                            const Sample& s) {
  size_t gcount = cfg.vocab_per_group.size();
  std::vector<double> feat(gcount * cfg.latent_dim + cfg.non_id_dim, 0.0);
  for (size_t g = 0; g < gcount; ++g) {
    const auto& ids = s.ids.groups[g];
    if (ids.empty()) continue;
    for (uint64_t id : ids) {
      auto lat = teacher_latent(id, cfg.teacher_seed, cfg.latent_dim);
      for (uint32_t d = 0; d < cfg.latent_dim; ++d) {
        feat[g * cfg.latent_dim + d] += lat[d];
      }
    }
    for (uint32_t d = 0; d < cfg.latent_dim; ++d) {
      feat[g * cfg.latent_dim + d] /= static_cast<double>(ids.size());
    }
  }
  for (uint32_t d = 0; d < cfg.non_id_dim; ++d) {
    feat[gcount * cfg.latent_dim + d] = s.non_id.dense[d];
  }
  double z = 0.0;
  for (size_t i = 0; i < feat.size(); ++i) z += weights[i] * feat[i];
  return z;
}

// Fully deterministic given (cfg, seed): ids per group are zipf draws without
// within-sample duplicates, labels are Bernoulli draws under the teacher's
// logistic score, then flipped with the configured noise probability.
inline Dataset generate_synthetic(const SynthConfig& cfg, uint64_t seed) {
  cfg.validate();
  std::vector<ZipfSampler> samplers;
  samplers.reserve(cfg.vocab_per_group.size());
  for (uint64_t v : cfg.vocab_per_group) samplers.emplace_back(v, cfg.zipf_s);
  std::vector<double> weights = teacher_weights(cfg);
  Rng rng(mix64(seed ^ 0x6461746167656e31ULL));

  Dataset out;
  out.reserve(cfg.sample_count);
  for (uint64_t i = 0; i < cfg.sample_count; ++i) {
    Sample s;
    s.ids.groups.resize(cfg.vocab_per_group.size());
    for (size_t g = 0; g < cfg.vocab_per_group.size(); ++g) {
      uint64_t span = cfg.max_ids_per_group - cfg.min_ids_per_group + 1;
      uint32_t want = cfg.min_ids_per_group + static_cast<uint32_t>(rng.uniform_u64(span));
      want = static_cast<uint32_t>(
          std::min<uint64_t>(want, cfg.vocab_per_group[g]));
      auto& ids = s.ids.groups[g];
      uint64_t off = cfg.group_offset(g);
      while (ids.size() < want) {
        uint64_t id = off + samplers[g].sample(rng);
        if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
      }
      std::sort(ids.begin(), ids.end());
    }
    s.non_id.dense.resize(cfg.non_id_dim);
    for (uint32_t d = 0; d < cfg.non_id_dim; ++d) {
      s.non_id.dense[d] = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    double p = 1.0 / (1.0 + std::exp(-teacher_logit(cfg, weights, s)));
    bool y = rng.bernoulli(p);
    if (cfg.label_noise > 0.0 && rng.bernoulli(cfg.label_noise)) y = !y;
    s.label.y = y ? 1.0f : 0.0f;
    out.push_back(std::move(s));
  }
  return out;
}

struct AlphaEstimate {
  double alpha_hat = 0.0;               // max containment frequency over all ids
  std::vector<double> per_group_max;    // same statistic restricted to each group
};

// Empirical containment frequency: per id, the fraction of samples whose
// feature lists contain it; alpha_hat is the maximum.
inline AlphaEstimate estimate_alpha(const Dataset& data) {
  if (data.empty()) throw PreconditionError("estimate_alpha: dataset is empty");
  size_t gcount = data.front().ids.groups.size();
  std::vector<std::unordered_map<uint64_t, uint64_t>> counts(gcount);
  for (const auto& s : data) {
    for (size_t g = 0; g < gcount; ++g) {
      // Guard against duplicate ids in hand-built samples; a sample contains
      // an id once no matter how often it lists it.
      std::unordered_set<uint64_t> uniq(s.ids.groups[g].begin(), s.ids.groups[g].end());
      for (uint64_t id : uniq) counts[g][id]++;
    }
  }
  AlphaEstimate est;
  est.per_group_max.resize(gcount, 0.0);
  double n = static_cast<double>(data.size());
  for (size_t g = 0; g < gcount; ++g) {
    for (const auto& [id, c] : counts[g]) {
      est.per_group_max[g] = std::max(est.per_group_max[g], static_cast<double>(c) / n);
    }
    est.alpha_hat = std::max(est.alpha_hat, est.per_group_max[g]);
  }
  return est;
}

// ---------------------------------------------------------------------------
// Dataset file: flat little-endian layout for cross-run reuse.
//   magic "HDS1", format u8, pad u8[3], group_count u32, non_id_dim u32,
//   sample_count u64, vocab u64 per group, checksum u64 (image with this
//   field zeroed), then per sample per group (count u16, ids u64[count]),
//   non-id floats, label u8.
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[4] = {'H', 'D', 'S', '1'};
inline constexpr uint8_t kDatasetFormatVersion = 1;

inline std::vector<uint8_t> serialize_dataset(const Dataset& data,
                                              const std::vector<uint64_t>& vocab_per_group,
                                              uint32_t non_id_dim) {
  std::vector<uint8_t> out;
  auto push = [&](const void* p, size_t n) {
    size_t off = out.size();
    out.resize(off + n);
    std::memcpy(out.data() + off, p, n);
  };
  push(kDatasetMagic, 4);
  uint8_t ver[4] = {kDatasetFormatVersion, 0, 0, 0};
  push(ver, 4);
  uint32_t gcount = static_cast<uint32_t>(vocab_per_group.size());
  push(&gcount, 4);
  push(&non_id_dim, 4);
  uint64_t n = data.size();
  push(&n, 8);
  for (uint64_t v : vocab_per_group) push(&v, 8);
  size_t checksum_off = out.size();
  uint64_t zero = 0;
  push(&zero, 8);
  for (const auto& s : data) {
    if (s.ids.groups.size() != gcount) {
      throw PreconditionError("serialize_dataset: group count mismatch");
    }
    for (const auto& grp : s.ids.groups) {
      if (grp.size() > 0xffff) throw PreconditionError("serialize_dataset: group too large");
      uint16_t c = static_cast<uint16_t>(grp.size());
      push(&c, 2);
      push(grp.data(), grp.size() * 8);
    }
    if (s.non_id.dense.size() != non_id_dim) {
      throw PreconditionError("serialize_dataset: non-id width mismatch");
    }
    push(s.non_id.dense.data(), non_id_dim * 4);
    uint8_t y = s.label.y == 1.0f ? 1 : 0;
    push(&y, 1);
  }
  uint64_t sum = fnv1a64(out.data(), out.size());
  std::memcpy(out.data() + checksum_off, &sum, 8);
  return out;
}

inline Dataset deserialize_dataset(const std::vector<uint8_t>& buf,
                                   std::vector<uint64_t>* vocab_out = nullptr,
                                   uint32_t* non_id_dim_out = nullptr) {
  size_t off = 0;
  auto need = [&](size_t n) {
    if (off + n > buf.size()) {
      throw CheckpointCorruptError("dataset file truncated at offset " + std::to_string(off));
    }
  };
  auto pull = [&](void* p, size_t n) {
    need(n);
    std::memcpy(p, buf.data() + off, n);
    off += n;
  };
  char magic[4];
  pull(magic, 4);
  if (std::memcmp(magic, kDatasetMagic, 4) != 0) {
    throw CheckpointCorruptError("dataset file: bad magic");
  }
  uint8_t ver[4];
  pull(ver, 4);
  if (ver[0] != kDatasetFormatVersion) {
    throw CheckpointCorruptError("dataset file: unsupported format version");
  }
  uint32_t gcount, non_id_dim;
  pull(&gcount, 4);
  pull(&non_id_dim, 4);
  uint64_t n;
  pull(&n, 8);
  if (gcount == 0 || gcount > 4096) throw CheckpointCorruptError("dataset file: bad group count");
  std::vector<uint64_t> vocab(gcount);
  pull(vocab.data(), gcount * 8);
  need(8);
  uint64_t stored;
  std::memcpy(&stored, buf.data() + off, 8);
  std::vector<uint8_t> image(buf);
  std::memset(image.data() + off, 0, 8);
  if (fnv1a64(image.data(), image.size()) != stored) {
    throw CheckpointCorruptError("dataset file: checksum mismatch");
  }
  off += 8;
  Dataset out;
  out.reserve(n);
  for (uint64_t i = 0; i < n; ++i) {
    Sample s;
    s.ids.groups.resize(gcount);
    for (uint32_t g = 0; g < gcount; ++g) {
      uint16_t c;
      pull(&c, 2);
      s.ids.groups[g].resize(c);
      pull(s.ids.groups[g].data(), static_cast<size_t>(c) * 8);
    }
    s.non_id.dense.resize(non_id_dim);
    pull(s.non_id.dense.data(), static_cast<size_t>(non_id_dim) * 4);
    uint8_t y;
    pull(&y, 1);
    if (y > 1) throw CheckpointCorruptError("dataset file: label out of range");
    s.label.y = static_cast<float>(y);
    out.push_back(std::move(s));
  }
  if (off != buf.size()) {
    throw CheckpointCorruptError("dataset file: trailing bytes");
  }
  if (vocab_out) *vocab_out = std::move(vocab);
  if (non_id_dim_out) *non_id_dim_out = non_id_dim;
  return out;
}

inline void save_dataset_file(const std::string& path, const Dataset& data,
                              const std::vector<uint64_t>& vocab_per_group,
                              uint32_t non_id_dim) {
  auto buf = serialize_dataset(data, vocab_per_group, non_id_dim);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("save_dataset_file: cannot open " + path);
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw Error("save_dataset_file: write failed");
}

inline Dataset load_dataset_file(const std::string& path,
                                 std::vector<uint64_t>* vocab_out = nullptr,
                                 uint32_t* non_id_dim_out = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("load_dataset_file: cannot open " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_dataset(buf, vocab_out, non_id_dim_out);
}

// ---------------------------------------------------------------------------
// Loader dispatch: round-robin register with an embedding worker, then
// round-robin hand the (sample id, dense features, label) tuple to a trainer.
// Stream order is preserved per worker; there is no shuffling.
// ---------------------------------------------------------------------------

struct DispatchHooks {
  // Registers one sample's id features with the given embedding worker and
  // returns the issued SampleId. Throws BackpressureError when that worker's
  // buffer is full.
  std::function<SampleId(uint32_t ew_rank, const IdFeatures&)> register_sample;
  // Delivers the joined tuple to the given trainer.
  std::function<void(uint32_t nn_rank, SampleId, const NonIdFeatures&, const Label&)>
      dispatch_sample;
};

struct DispatchResult {
  uint64_t dispatched = 0;
  uint64_t backpressure_retries = 0;
};

inline DispatchResult dispatch(const Dataset& data, uint32_t embedding_worker_count,
                               uint32_t nn_worker_count, const DispatchHooks& hooks,
                               int retry_delay_us = 200, int max_retries_per_sample = 50000) {
  if (embedding_worker_count == 0 || nn_worker_count == 0) {
    throw PreconditionError("dispatch: need at least one worker of each kind");
  }
  DispatchResult res;
  for (size_t i = 0; i < data.size(); ++i) {
    uint32_t ew = static_cast<uint32_t>(i % embedding_worker_count);
    uint32_t nn = static_cast<uint32_t>(i % nn_worker_count);
    SampleId sid{};
    int attempts = 0;
    for (;;) {
      try {
        sid = hooks.register_sample(ew, data[i].ids);
        break;
      } catch (const BackpressureError&) {
        if (++attempts > max_retries_per_sample) {
          throw UnrecoverableRunError("dispatch: persistent backpressure from worker " +
                                      std::to_string(ew));
        }
        res.backpressure_retries++;
        std::this_thread::sleep_for(std::chrono::microseconds(retry_delay_us));
      }
    }
    hooks.dispatch_sample(nn, sid, data[i].non_id, data[i].label);
    res.dispatched++;
  }
  return res;
}

}  // namespace hybridps
