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

#include <stdexcept>
#include <string>

namespace hybridps {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller violated a documented precondition (bad rank, zero shard count, ...).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration (shape mismatch, zero capacity,
// unknown config key, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed bytes on the wire: bad magic, truncation, unknown message type,
// out-of-range posting index.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Endpoint unreachable, timeout, connection lost. Retriable for idempotent
// requests.
class TransportError : public Error {
 public:
  using Error::Error;
};

// Checkpoint buffer fails validation (version mismatch, truncation, checksum
// or invariant failure).
class CheckpointCorruptError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient reached a state-mutating operation.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// Replicas that must be bit-identical are not.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

// Metric has no defined value on this input (e.g. single-class AUC).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// Sample id not present in the worker buffer (worker restarted or bogus id).
class StaleSampleError : public Error {
 public:
  using Error::Error;
};

// Bounded buffer full; caller should retry after backoff.
class BackpressureError : public Error {
 public:
  using Error::Error;
};

// Version stamps from incompatible clocks (negative staleness delay).
class ClockError : public Error {
 public:
  using Error::Error;
};

// Barrier failed: a synchronous participant went missing.
class SyncFailureError : public Error {
 public:
  using Error::Error;
};

// Recovery was required but no checkpoint exists.
class UnrecoverableRunError : public Error {
 public:
  using Error::Error;
};

}  // namespace hybridps
