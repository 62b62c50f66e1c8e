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

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "hybridps/errors.hpp"

namespace hybridps {

static_assert(std::endian::native == std::endian::little,
              "frame layout is little-endian and copies host memory verbatim");

// Message kinds carried in the one-byte frame type field. Values are part of
// the wire contract; unknown values are rejected at decode.
enum class MsgType : uint8_t {
  kRegisterSample = 0,
  kPullEmbedding = 1,
  kEmbeddingReply = 2,
  kPushGradient = 3,
  kAck = 4,
  kError = 5,
  kDispatchSample = 6,
  kAllReduce = 7,
  kFlushStep = 8,
};

inline constexpr uint8_t kMaxMsgType = 8;
inline constexpr uint8_t kFlagValuesCompressed = 0x01;  // flags bit 0
inline constexpr size_t kFrameHeaderBytes = 14;         // magic + type + flags + payload_len
inline constexpr char kFrameMagic[4] = {'H', 'R', 'F', '1'};
// Upper bound on a single frame; anything larger is treated as corruption.
inline constexpr uint64_t kMaxFramePayload = 1ull << 30;

struct Frame {
  MsgType type = MsgType::kAck;
  uint8_t flags = 0;
  std::vector<std::vector<uint8_t>> sections;
};

// Builds one length-prefixed payload section from flat values.
class SectionWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v) { append(&v, 2); }
  void u32(uint32_t v) { append(&v, 4); }
  void u64(uint64_t v) { append(&v, 8); }
  void f32(float v) { append(&v, 4); }
  void f32_array(const float* p, size_t n) { append(p, n * 4); }
  void u64_array(const uint64_t* p, size_t n) { append(p, n * 8); }
  void u16_array(const uint16_t* p, size_t n) { append(p, n * 2); }
  void bytes(const void* p, size_t n) { append(p, n); }

  std::vector<uint8_t> take() { return std::move(buf_); }

 private:
  void append(const void* p, size_t n) {
    size_t off = buf_.size();
    buf_.resize(off + n);
    std::memcpy(buf_.data() + off, p, n);
  }
  std::vector<uint8_t> buf_;
};

// Bounds-checked cursor over one payload section.
class SectionReader {
 public:
  explicit SectionReader(const std::vector<uint8_t>& buf) : p_(buf.data()), n_(buf.size()) {}

  uint8_t u8() { return *take(1); }
  uint16_t u16() { return read<uint16_t>(); }
  uint32_t u32() { return read<uint32_t>(); }
  uint64_t u64() { return read<uint64_t>(); }
  float f32() { return read<float>(); }

  void f32_array(float* out, size_t n) { std::memcpy(out, take(n * 4), n * 4); }
  void u64_array(uint64_t* out, size_t n) { std::memcpy(out, take(n * 8), n * 8); }
  void u16_array(uint16_t* out, size_t n) { std::memcpy(out, take(n * 2), n * 2); }

  size_t remaining() const { return n_ - off_; }
  void expect_end() const {
    if (off_ != n_) {
      throw ProtocolError("section has " + std::to_string(n_ - off_) + " unconsumed bytes");
    }
  }

 private:
  template <typename T>
  T read() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const uint8_t* take(size_t n) {
    if (off_ + n > n_) {
      throw ProtocolError("section truncated at offset " + std::to_string(off_) + ": need " +
                          std::to_string(n) + " bytes, have " + std::to_string(n_ - off_));
    }
    const uint8_t* p = p_ + off_;
    off_ += n;
    return p;
  }
  const uint8_t* p_;
  size_t n_;
  size_t off_ = 0;
};

// Frame layout: magic(4) type(1) flags(1) payload_len(8, little-endian),
// then the payload: each section as a 64-bit length followed by its bytes.
// Numeric arrays inside sections are verbatim little-endian memory copies.
inline std::vector<uint8_t> encode_frame(MsgType type, uint8_t flags,
                                         const std::vector<std::vector<uint8_t>>& sections) {
  uint64_t payload_len = 0;
  for (const auto& s : sections) payload_len += 8 + s.size();
  if (payload_len > kMaxFramePayload) {
    throw PreconditionError("encode_frame: payload exceeds frame limit");
  }
  std::vector<uint8_t> out(kFrameHeaderBytes + payload_len);
  uint8_t* p = out.data();
  std::memcpy(p, kFrameMagic, 4);
  p[4] = static_cast<uint8_t>(type);
  p[5] = flags;
  std::memcpy(p + 6, &payload_len, 8);
  uint8_t* q = p + kFrameHeaderBytes;
  for (const auto& s : sections) {
    uint64_t len = s.size();
    std::memcpy(q, &len, 8);
    q += 8;
    std::memcpy(q, s.data(), s.size());
    q += s.size();
  }
  return out;
}

inline std::vector<uint8_t> encode_frame(const Frame& f) {
  return encode_frame(f.type, f.flags, f.sections);
}

// Exact inverse of encode_frame. Errors name the byte offset that failed.
inline Frame decode_frame(const uint8_t* data, size_t size) {
  if (size < kFrameHeaderBytes) {
    throw ProtocolError("frame truncated at offset 0: header needs " +
                        std::to_string(kFrameHeaderBytes) + " bytes, have " +
                        std::to_string(size));
  }
  if (std::memcmp(data, kFrameMagic, 4) != 0) {
    throw ProtocolError("bad frame magic at offset 0");
  }
  if (data[4] > kMaxMsgType) {
    throw ProtocolError("unknown message type " + std::to_string(data[4]) + " at offset 4");
  }
  Frame f;
  f.type = static_cast<MsgType>(data[4]);
  f.flags = data[5];
  uint64_t payload_len;
  std::memcpy(&payload_len, data + 6, 8);
  if (payload_len > kMaxFramePayload) {
    throw ProtocolError("payload length " + std::to_string(payload_len) +
                        " exceeds frame limit at offset 6");
  }
  if (size != kFrameHeaderBytes + payload_len) {
    throw ProtocolError("payload length mismatch at offset 6: header says " +
                        std::to_string(payload_len) + ", frame carries " +
                        std::to_string(size - kFrameHeaderBytes));
  }
  size_t off = kFrameHeaderBytes;
  while (off < size) {
    if (off + 8 > size) {
      throw ProtocolError("section length truncated at offset " + std::to_string(off));
    }
    uint64_t len;
    std::memcpy(&len, data + off, 8);
    off += 8;
    if (len > size - off) {
      throw ProtocolError("section of " + std::to_string(len) + " bytes at offset " +
                          std::to_string(off) + " overruns the frame");
    }
    f.sections.emplace_back(data + off, data + off + len);
    off += len;
  }
  return f;
}

inline Frame decode_frame(const std::vector<uint8_t>& bytes) {
  return decode_frame(bytes.data(), bytes.size());
}

// Error frame payload: one section holding a UTF-8 message.
inline Frame make_error_frame(const std::string& message) {
  Frame f;
  f.type = MsgType::kError;
  SectionWriter w;
  w.bytes(message.data(), message.size());
  f.sections.push_back(w.take());
  return f;
}

inline std::string error_frame_message(const Frame& f) {
  if (f.sections.empty()) return "(no message)";
  return std::string(f.sections[0].begin(), f.sections[0].end());
}

}  // namespace hybridps
