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
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "hybridps/core.hpp"
#include "hybridps/errors.hpp"

namespace hybridps {

inline constexpr double kBceClamp = 1e-7;

// Feed-forward net for CTR prediction: ReLU hidden layers, single logistic
// output. Templated on the scalar so gradient checks can run the exact same
// code path in double precision.
template <typename T>
class DenseNet {
 public:
  DenseNet() = default;

  // dims: input width followed by hidden widths. The logistic output unit is
  // appended internally.
  DenseNet(std::vector<size_t> dims, Rng& rng) {
    if (dims.empty() || dims.front() == 0) {
      throw PreconditionError("DenseNet: input width must be positive");
    }
    dims_ = std::move(dims);
    dims_.push_back(1);
    layer_offsets_.resize(dims_.size() - 1);
    size_t total = 0;
    for (size_t l = 0; l + 1 < dims_.size(); ++l) {
      layer_offsets_[l] = total;
      total += dims_[l] * dims_[l + 1] + dims_[l + 1];
    }
    params_.resize(total);
    // Glorot-uniform init keeps early logits in a trainable range at every
    // width used here.
    for (size_t l = 0; l + 1 < dims_.size(); ++l) {
      size_t fan_in = dims_[l];
      size_t fan_out = dims_[l + 1];
      double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      T* w = weights(l);
      for (size_t i = 0; i < fan_in * fan_out; ++i) {
        w[i] = static_cast<T>(rng.uniform(-limit, limit));
      }
      T* b = biases(l);
      for (size_t i = 0; i < fan_out; ++i) b[i] = T(0);
    }
  }

  size_t input_dim() const { return dims_.front(); }
  size_t layer_count() const { return dims_.size() - 1; }
  size_t param_count() const { return params_.size(); }
  std::vector<T>& params() { return params_; }
  const std::vector<T>& params() const { return params_; }

  // Per-sample activations captured by forward, consumed by backward.
  struct Cache {
    std::vector<std::vector<T>> pre;   // pre-activation per layer
    std::vector<std::vector<T>> post;  // post-activation per layer (input at index 0)
    T prob = T(0);
  };

  T forward(const std::vector<T>& x, Cache* cache = nullptr) const {
    if (x.size() != dims_.front()) {
      throw PreconditionError("DenseNet::forward: input width mismatch");
    }
    std::vector<T> cur = x;
    if (cache) {
      cache->pre.assign(layer_count(), {});
      cache->post.assign(layer_count() + 1, {});
      cache->post[0] = cur;
    }
    for (size_t l = 0; l < layer_count(); ++l) {
      size_t in = dims_[l];
      size_t out = dims_[l + 1];
      const T* w = weights(l);
      const T* b = biases(l);
      std::vector<T> next(out);
      for (size_t o = 0; o < out; ++o) {
        T acc = b[o];
        const T* row = w + o * in;
        for (size_t i = 0; i < in; ++i) acc += row[i] * cur[i];
        next[o] = acc;
      }
      if (cache) cache->pre[l] = next;
      bool last = (l + 1 == layer_count());
      if (!last) {
        for (T& v : next) v = v > T(0) ? v : T(0);
      }
      cur = std::move(next);
      if (cache) cache->post[l + 1] = cur;
    }
    T prob = sigmoid(cur[0]);
    if (cache) cache->prob = prob;
    return prob;
  }

  // Backprop of BCE loss for one sample. Adds parameter gradients into
  // param_grad (layout identical to params()) and, when input_grad is given,
  // writes d(loss)/d(input) there. The loss derivative at the logit is
  // (p - y): exact for the unclamped loss, and the clamp only binds where the
  // loss itself is saturated.
  void backward(const Cache& cache, T label, std::vector<T>* param_grad,
                std::vector<T>* input_grad = nullptr) const {
    if (param_grad->size() != params_.size()) {
      throw PreconditionError("DenseNet::backward: gradient buffer size mismatch");
    }
    std::vector<T> delta(1, cache.prob - label);
    for (size_t l = layer_count(); l-- > 0;) {
      size_t in = dims_[l];
      size_t out = dims_[l + 1];
      const T* w = weights(l);
      T* gw = param_grad->data() + layer_offsets_[l];
      T* gb = gw + in * out;
      const std::vector<T>& a_in = cache.post[l];
      for (size_t o = 0; o < out; ++o) {
        T d = delta[o];
        T* grow = gw + o * in;
        for (size_t i = 0; i < in; ++i) grow[i] += d * a_in[i];
        gb[o] += d;
      }
      if (l == 0 && input_grad == nullptr) break;
      std::vector<T> prev(in, T(0));
      for (size_t o = 0; o < out; ++o) {
        T d = delta[o];
        const T* row = w + o * in;
        for (size_t i = 0; i < in; ++i) prev[i] += d * row[i];
      }
      if (l > 0) {
        const std::vector<T>& z = cache.pre[l - 1];
        for (size_t i = 0; i < in; ++i) {
          if (z[i] <= T(0)) prev[i] = T(0);
        }
      } else {
        *input_grad = std::move(prev);
        break;
      }
      delta = std::move(prev);
    }
  }

  static T sigmoid(T z) {
    // Split on sign so exp never overflows.
    if (z >= T(0)) {
      T e = std::exp(-z);
      return T(1) / (T(1) + e);
    }
    T e = std::exp(z);
    return e / (T(1) + e);
  }

  static T bce_loss(T prob, T label) {
    T p = std::clamp(prob, static_cast<T>(kBceClamp), static_cast<T>(1.0 - kBceClamp));
    return -(label * std::log(p) + (T(1) - label) * std::log(T(1) - p));
  }

  uint64_t param_hash() const {
    return fnv1a64(params_.data(), params_.size() * sizeof(T));
  }

  T* weights(size_t layer) { return params_.data() + layer_offsets_[layer]; }
  const T* weights(size_t layer) const { return params_.data() + layer_offsets_[layer]; }
  T* biases(size_t layer) {
    return params_.data() + layer_offsets_[layer] + dims_[layer] * dims_[layer + 1];
  }
  const T* biases(size_t layer) const {
    return params_.data() + layer_offsets_[layer] + dims_[layer] * dims_[layer + 1];
  }
  const std::vector<size_t>& dims() const { return dims_; }

 private:
  std::vector<size_t> dims_;           // input, hidden..., 1
  std::vector<size_t> layer_offsets_;  // offset of each layer's block in params_
  std::vector<T> params_;
};

// Minibatch forward/backward under mean BCE loss. dense_grad and the
// per-sample input gradients are gradients of the mean, so their scale is
// independent of batch size.
template <typename T>
struct BatchResult {
  T mean_loss = T(0);
  std::vector<T> probs;                     // one per sample
  std::vector<T> dense_grad;                // layout identical to net.params()
  std::vector<std::vector<T>> input_grads;  // one per sample
};

template <typename T>
inline BatchResult<T> batch_forward_backward(const DenseNet<T>& net,
                                             const std::vector<std::vector<T>>& inputs,
                                             const std::vector<T>& labels) {
  if (inputs.empty()) {
    throw PreconditionError("batch_forward_backward: empty batch");
  }
  if (inputs.size() != labels.size()) {
    throw PreconditionError("batch_forward_backward: inputs/labels size mismatch");
  }
  BatchResult<T> r;
  r.dense_grad.assign(net.param_count(), T(0));
  r.probs.resize(inputs.size());
  r.input_grads.resize(inputs.size());
  T loss_sum = T(0);
  typename DenseNet<T>::Cache cache;
  for (size_t i = 0; i < inputs.size(); ++i) {
    T p = net.forward(inputs[i], &cache);
    r.probs[i] = p;
    loss_sum += DenseNet<T>::bce_loss(p, labels[i]);
    net.backward(cache, labels[i], &r.dense_grad, &r.input_grads[i]);
  }
  T inv = T(1) / static_cast<T>(inputs.size());
  r.mean_loss = loss_sum * inv;
  if (!std::isfinite(static_cast<double>(r.mean_loss))) {
    throw DivergenceError("batch_forward_backward: non-finite loss");
  }
  for (T& g : r.dense_grad) g *= inv;
  for (auto& ig : r.input_grads) {
    for (T& g : ig) g *= inv;
  }
  return r;
}

// The dense input is [group 0 vector | ... | group G-1 vector | non-id].
// Slices out the per-group pieces; the non-id tail has no parameters behind
// it, so its gradient is dropped.
template <typename T>
inline std::vector<std::vector<T>> split_group_grads(const std::vector<T>& input_grad,
                                                     size_t group_count, size_t embedding_dim) {
  if (input_grad.size() < group_count * embedding_dim) {
    throw PreconditionError("split_group_grads: input gradient too short");
  }
  std::vector<std::vector<T>> out(group_count);
  for (size_t g = 0; g < group_count; ++g) {
    auto first = input_grad.begin() + static_cast<ptrdiff_t>(g * embedding_dim);
    out[g].assign(first, first + static_cast<ptrdiff_t>(embedding_dim));
  }
  return out;
}

// Plain SGD on a flat parameter vector. Non-finite gradients indicate an
// upstream blowup; refusing them keeps the parameters inspectable.
template <typename T>
inline void sgd_step(std::vector<T>& params, const std::vector<T>& grad, T lr) {
  if (params.size() != grad.size()) {
    throw PreconditionError("sgd_step: size mismatch");
  }
  for (size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(static_cast<double>(grad[i]))) {
      throw DivergenceError("sgd_step: non-finite gradient at index " + std::to_string(i));
    }
  }
  for (size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
}

// Adam with bias correction. State lives with the caller so one optimizer can
// serve several parameter vectors.
template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  uint64_t t = 0;
};

template <typename T>
inline void adam_step(std::vector<T>& params, const std::vector<T>& grad, AdamState<T>& state,
                      T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8)) {
  if (params.size() != grad.size()) {
    throw PreconditionError("adam_step: size mismatch");
  }
  if (state.m.empty()) {
    state.m.assign(params.size(), T(0));
    state.v.assign(params.size(), T(0));
  }
  state.t++;
  T bc1 = T(1) - std::pow(beta1, static_cast<T>(state.t));
  T bc2 = T(1) - std::pow(beta2, static_cast<T>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (T(1) - beta1) * grad[i];
    state.v[i] = beta2 * state.v[i] + (T(1) - beta2) * grad[i] * grad[i];
    T mhat = state.m[i] / bc1;
    T vhat = state.v[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

// Mean BCE over a batch of predictions.
template <typename T>
inline T mean_bce_loss(const std::vector<T>& probs, const std::vector<T>& labels) {
  if (probs.empty()) throw PreconditionError("mean_bce_loss: empty batch");
  if (probs.size() != labels.size()) {
    throw PreconditionError("mean_bce_loss: probs/labels size mismatch");
  }
  T sum = T(0);
  for (size_t i = 0; i < probs.size(); ++i) sum += DenseNet<T>::bce_loss(probs[i], labels[i]);
  return sum / static_cast<T>(probs.size());
}

// Central-difference check of backward against the mean batch loss, in double
// precision, sweeping every parameter and every input coordinate of every
// sample. Returns the worst relative error |analytic - numeric| / max(1, |analytic|).
inline double grad_check(DenseNet<double>& net, const std::vector<std::vector<double>>& inputs,
                         const std::vector<double>& labels, double eps = 1e-6) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) {
    throw PreconditionError("grad_check: eps must be in [1e-6, 1e-3]");
  }
  auto batch_loss = [&](const std::vector<std::vector<double>>& xs) {
    double sum = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
      sum += DenseNet<double>::bce_loss(net.forward(xs[i]), labels[i]);
    }
    return sum / static_cast<double>(xs.size());
  };
  BatchResult<double> analytic = batch_forward_backward(net, inputs, labels);

  double worst = 0.0;
  auto check = [&](double a, double plus, double minus) {
    double numeric = (plus - minus) / (2.0 * eps);
    double err = std::fabs(a - numeric) / std::max(1.0, std::fabs(a));
    worst = std::max(worst, err);
  };
  std::vector<double>& params = net.params();
  for (size_t i = 0; i < params.size(); ++i) {
    double keep = params[i];
    params[i] = keep + eps;
    double lp = batch_loss(inputs);
    params[i] = keep - eps;
    double lm = batch_loss(inputs);
    params[i] = keep;
    check(analytic.dense_grad[i], lp, lm);
  }
  std::vector<std::vector<double>> xs = inputs;
  for (size_t s = 0; s < xs.size(); ++s) {
    for (size_t i = 0; i < xs[s].size(); ++i) {
      double keep = xs[s][i];
      xs[s][i] = keep + eps;
      double lp = batch_loss(xs);
      xs[s][i] = keep - eps;
      double lm = batch_loss(xs);
      xs[s][i] = keep;
      check(analytic.input_grads[s][i], lp, lm);
    }
  }
  return worst;
}

// Area under the ROC curve via the rank statistic. Ties contribute half, which
// the midrank assignment below produces exactly. Throws when only one class is
// present because the metric is undefined there.
inline double auc_score(const std::vector<float>& scores, const std::vector<float>& labels) {
  if (scores.size() != labels.size()) {
    throw PreconditionError("auc_score: size mismatch");
  }
  size_t n = scores.size();
  size_t pos = 0;
  for (float y : labels) {
    if (y != 0.0f && y != 1.0f) throw PreconditionError("auc_score: labels must be 0 or 1");
    if (y == 1.0f) pos++;
  }
  size_t neg = n - pos;
  if (pos == 0 || neg == 0) {
    throw UndefinedMetricError("auc_score: needs both classes present");
  }
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) j++;
    // Midrank over the tie run [i, j); ranks are 1-based.
    double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1.0f) rank_sum_pos += midrank;
    }
    i = j;
  }
  double pos_d = static_cast<double>(pos);
  double neg_d = static_cast<double>(neg);
  return (rank_sum_pos - pos_d * (pos_d + 1.0) / 2.0) / (pos_d * neg_d);
}

// ---------------------------------------------------------------------------
// Dense model checkpoints. The byte image is a pure function of the net, so
// identical states serialize identically. A trailing FNV-1a checksum over the
// preceding bytes turns any single-byte corruption into a detected error.
//
// Layout: magic(4) version(1) pad(3) dim_count(u32) dims(u64 each)
//         params(f32 each) checksum(u64).
// ---------------------------------------------------------------------------

inline constexpr char kDenseCheckpointMagic[4] = {'H', 'D', 'M', '1'};
inline constexpr uint8_t kDenseCheckpointVersion = 1;

inline std::vector<uint8_t> save_dense_checkpoint(const DenseNet<float>& net) {
  const std::vector<size_t>& dims = net.dims();
  std::vector<uint8_t> out;
  out.reserve(16 + dims.size() * 8 + net.param_count() * 4 + 8);
  auto push = [&](const void* p, size_t n) {
    const uint8_t* b = static_cast<const uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  };
  push(kDenseCheckpointMagic, 4);
  uint8_t ver[4] = {kDenseCheckpointVersion, 0, 0, 0};
  push(ver, 4);
  uint32_t dc = static_cast<uint32_t>(dims.size());
  push(&dc, 4);
  for (size_t d : dims) {
    uint64_t v = d;
    push(&v, 8);
  }
  push(net.params().data(), net.param_count() * sizeof(float));
  uint64_t sum = fnv1a64(out.data(), out.size());
  push(&sum, 8);
  return out;
}

inline DenseNet<float> load_dense_checkpoint(const std::vector<uint8_t>& buf) {
  auto corrupt = [](const std::string& why) -> CheckpointCorruptError {
    return CheckpointCorruptError("dense checkpoint: " + why);
  };
  if (buf.size() < 12 + 8 || std::memcmp(buf.data(), kDenseCheckpointMagic, 4) != 0) {
    throw corrupt("bad magic");
  }
  if (buf[4] != kDenseCheckpointVersion) throw corrupt("unsupported version");
  uint64_t stored_sum;
  std::memcpy(&stored_sum, buf.data() + buf.size() - 8, 8);
  if (stored_sum != fnv1a64(buf.data(), buf.size() - 8)) throw corrupt("checksum mismatch");

  uint32_t dc;
  std::memcpy(&dc, buf.data() + 8, 4);
  if (dc < 2 || buf.size() < 12 + size_t(dc) * 8 + 8) throw corrupt("truncated dims");
  std::vector<size_t> dims(dc);
  for (uint32_t i = 0; i < dc; ++i) {
    uint64_t v;
    std::memcpy(&v, buf.data() + 12 + size_t(i) * 8, 8);
    dims[i] = static_cast<size_t>(v);
  }
  // The constructor appends the output unit; the saved dims already carry it.
  std::vector<size_t> ctor_dims(dims.begin(), dims.end() - 1);
  Rng rng(1);
  DenseNet<float> net(ctor_dims, rng);
  if (net.dims() != dims) throw corrupt("inconsistent dims");
  size_t off = 12 + size_t(dc) * 8;
  if (buf.size() != off + net.param_count() * 4 + 8) throw corrupt("parameter count mismatch");
  std::memcpy(net.params().data(), buf.data() + off, net.param_count() * sizeof(float));
  return net;
}

inline void save_dense_checkpoint_file(const std::string& path, const DenseNet<float>& net) {
  std::vector<uint8_t> buf = save_dense_checkpoint(net);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("save_dense_checkpoint: cannot open " + path);
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw Error("save_dense_checkpoint: write failed for " + path);
}

inline DenseNet<float> load_dense_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("load_dense_checkpoint: cannot open " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return load_dense_checkpoint(buf);
}

}  // namespace hybridps
