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

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstring>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "hybridps/errors.hpp"
#include "hybridps/wire.hpp"

namespace hybridps {

inline constexpr int kDefaultTimeoutMs = 5000;
inline constexpr int kDefaultRetries = 3;

using FrameHandler = std::function<Frame(const Frame&)>;

// One request/response peer. Calls are thread-safe; a reply of type kError is
// surfaced as a ProtocolError carrying the peer's message. Retries (for
// transports that have them) are attempted only when the caller marks the
// request idempotent: a lost non-idempotent message is an accepted loss, not
// a resend.
class Endpoint {
 public:
  virtual ~Endpoint() = default;
  virtual Frame request(const Frame& f, bool idempotent = true) = 0;

  Frame request_ok(const Frame& f, bool idempotent = true) {
    Frame r = request(f, idempotent);
    if (r.type == MsgType::kError) {
      throw ProtocolError("peer error: " + error_frame_message(r));
    }
    return r;
  }
};

// ---------------------------------------------------------------------------
// In-process transport: named handlers invoked directly on the caller's
// thread. Deterministic and allocation-light; the frame still round-trips
// through encode/decode so both transports exercise identical bytes.
// ---------------------------------------------------------------------------

class LocalHub {
 public:
  struct Node {
    FrameHandler handler;
    std::atomic<bool> killed{false};
  };

  void serve(const std::string& name, FrameHandler handler) {
    std::lock_guard<std::mutex> g(mu_);
    auto node = std::make_shared<Node>();
    node->handler = std::move(handler);
    nodes_[name] = node;
  }

  void kill(const std::string& name) { find(name)->killed.store(true); }
  void revive(const std::string& name) { find(name)->killed.store(false); }

  class LocalEndpoint : public Endpoint {
   public:
    explicit LocalEndpoint(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    Frame request(const Frame& f, bool) override {
      if (node_->killed.load()) {
        throw TransportError("endpoint is down");
      }
      // Encode/decode on both legs keeps the local path byte-equivalent to
      // the TCP path, including the server-side conversion of handler
      // exceptions into kError frames.
      std::vector<uint8_t> wire = encode_frame(f);
      Frame delivered = decode_frame(wire);
      Frame reply;
      try {
        reply = node_->handler(delivered);
      } catch (const std::exception& e) {
        reply = make_error_frame(e.what());
      }
      std::vector<uint8_t> reply_wire = encode_frame(reply);
      return decode_frame(reply_wire);
    }

   private:
    std::shared_ptr<Node> node_;
  };

  std::unique_ptr<Endpoint> endpoint(const std::string& name) {
    return std::make_unique<LocalEndpoint>(find(name));
  }

 private:
  std::shared_ptr<Node> find(const std::string& name) {
    std::lock_guard<std::mutex> g(mu_);
    auto it = nodes_.find(name);
    if (it == nodes_.end()) {
      throw TransportError("no endpoint named " + name);
    }
    return it->second;
  }

  std::mutex mu_;
  std::unordered_map<std::string, std::shared_ptr<Node>> nodes_;
};

// ---------------------------------------------------------------------------
// TCP transport over loopback/LAN. Each frame on the stream is preceded by a
// 64-bit request id (the correlation field); replies echo the id. Streams are
// FIFO: one connection carries one request at a time.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_all(int fd, const void* data, size_t n) {
  const char* p = static_cast<const char*>(data);
  while (n > 0) {
    ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw TransportError(std::string("send failed: ") + std::strerror(errno));
    }
    p += w;
    n -= static_cast<size_t>(w);
  }
}

// Reads exactly n bytes. Returns false on clean EOF at a message boundary
// (start == true and zero bytes read); mid-message EOF is a protocol error.
inline bool read_exact(int fd, void* data, size_t n, int timeout_ms, bool start) {
  char* p = static_cast<char*>(data);
  size_t got = 0;
  while (got < n) {
    pollfd pfd{fd, POLLIN, 0};
    int pr = ::poll(&pfd, 1, timeout_ms);
    if (pr == 0) {
      throw TransportError("receive timed out");
    }
    if (pr < 0) {
      if (errno == EINTR) continue;
      throw TransportError(std::string("poll failed: ") + std::strerror(errno));
    }
    ssize_t r = ::recv(fd, p + got, n - got, 0);
    if (r == 0) {
      if (start && got == 0) return false;
      throw ProtocolError("connection closed mid-frame");
    }
    if (r < 0) {
      if (errno == EINTR) continue;
      throw TransportError(std::string("recv failed: ") + std::strerror(errno));
    }
    got += static_cast<size_t>(r);
  }
  return true;
}

// Wire unit on a TCP stream: request id, then a full frame.
inline void send_message(int fd, uint64_t request_id, const std::vector<uint8_t>& frame) {
  std::vector<uint8_t> buf(8 + frame.size());
  std::memcpy(buf.data(), &request_id, 8);
  std::memcpy(buf.data() + 8, frame.data(), frame.size());
  write_all(fd, buf.data(), buf.size());
}

inline bool recv_message(int fd, uint64_t* request_id, Frame* out, int timeout_ms, bool start) {
  uint8_t idbuf[8];
  if (!read_exact(fd, idbuf, 8, timeout_ms, start)) return false;
  std::memcpy(request_id, idbuf, 8);
  uint8_t header[kFrameHeaderBytes];
  read_exact(fd, header, kFrameHeaderBytes, timeout_ms, false);
  uint64_t payload_len;
  std::memcpy(&payload_len, header + 6, 8);
  if (payload_len > kMaxFramePayload) {
    throw ProtocolError("payload length exceeds frame limit");
  }
  std::vector<uint8_t> whole(kFrameHeaderBytes + payload_len);
  std::memcpy(whole.data(), header, kFrameHeaderBytes);
  if (payload_len > 0) {
    read_exact(fd, whole.data() + kFrameHeaderBytes, payload_len, timeout_ms, false);
  }
  *out = decode_frame(whole);
  return true;
}

}  // namespace detail

// Serves a FrameHandler on a TCP port; one thread per connection. Handler
// exceptions become kError reply frames, so a bad request never kills the
// connection. stop() closes the listener and joins all threads.
class TcpServer {
 public:
  TcpServer(uint16_t port, FrameHandler handler) : handler_(std::move(handler)) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw TransportError("socket() failed");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(listen_fd_);
      throw TransportError("bind failed on port " + std::to_string(port));
    }
    socklen_t len = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    if (::listen(listen_fd_, 64) != 0) {
      ::close(listen_fd_);
      throw TransportError("listen failed");
    }
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  ~TcpServer() { stop(); }

  uint16_t port() const { return port_; }

  void stop() {
    bool expected = false;
    if (!stopped_.compare_exchange_strong(expected, true)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (accept_thread_.joinable()) accept_thread_.join();
    std::vector<std::thread> conns;
    {
      std::lock_guard<std::mutex> g(mu_);
      conns.swap(conn_threads_);
      for (int fd : conn_fds_) ::shutdown(fd, SHUT_RDWR);
    }
    for (auto& t : conns) {
      if (t.joinable()) t.join();
    }
  }

 private:
  void accept_loop() {
    while (!stopped_.load()) {
      int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (stopped_.load()) return;
        continue;
      }
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      std::lock_guard<std::mutex> g(mu_);
      conn_fds_.push_back(fd);
      conn_threads_.emplace_back([this, fd] { serve_conn(fd); });
    }
  }

  void serve_conn(int fd) {
    // Requests on one connection are handled strictly in order.
    for (;;) {
      uint64_t request_id = 0;
      Frame req;
      try {
        if (!detail::recv_message(fd, &request_id, &req, /*timeout_ms=*/-1, /*start=*/true)) {
          break;
        }
      } catch (const Error&) {
        break;
      }
      Frame reply;
      try {
        reply = handler_(req);
      } catch (const std::exception& e) {
        reply = make_error_frame(e.what());
      }
      try {
        detail::send_message(fd, request_id, encode_frame(reply));
      } catch (const Error&) {
        break;
      }
    }
    ::close(fd);
  }

  FrameHandler handler_;
  int listen_fd_ = -1;
  uint16_t port_ = 0;
  std::atomic<bool> stopped_{false};
  std::thread accept_thread_;
  std::mutex mu_;
  std::vector<std::thread> conn_threads_;
  std::vector<int> conn_fds_;
};

// Client endpoint: lazily connects, sends one request at a time per
// connection (stream FIFO), reconnects between attempts. Idempotent requests
// are retried up to retry_count times on timeout or connection failure;
// non-idempotent requests surface the first transport error.
class TcpEndpoint : public Endpoint {
 public:
  TcpEndpoint(std::string host, uint16_t port, int timeout_ms = kDefaultTimeoutMs,
              int retry_count = kDefaultRetries)
      : host_(std::move(host)), port_(port), timeout_ms_(timeout_ms), retries_(retry_count) {}

  ~TcpEndpoint() override {
    if (fd_ >= 0) ::close(fd_);
  }

  Frame request(const Frame& f, bool idempotent = true) override {
    std::lock_guard<std::mutex> g(mu_);
    std::vector<uint8_t> wire = encode_frame(f);
    int attempts = idempotent ? retries_ + 1 : 1;
    std::string last_error;
    for (int a = 0; a < attempts; ++a) {
      try {
        ensure_connected();
        uint64_t id = next_request_id_++;
        detail::send_message(fd_, id, wire);
        uint64_t reply_id = 0;
        Frame reply;
        if (!detail::recv_message(fd_, &reply_id, &reply, timeout_ms_, false)) {
          throw ProtocolError("connection closed before reply");
        }
        if (reply_id != id) {
          throw ProtocolError("reply id mismatch");
        }
        return reply;
      } catch (const TransportError& e) {
        last_error = e.what();
        drop_connection();
      } catch (const ProtocolError& e) {
        last_error = e.what();
        drop_connection();
        // A torn stream is retriable only when the request is idempotent;
        // fall through to the next attempt like a transport fault.
      }
    }
    throw TransportError("request failed after " + std::to_string(attempts) +
                         " attempt(s): " + last_error);
  }

 private:
  void ensure_connected() {
    if (fd_ >= 0) return;
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw TransportError("socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port_);
    if (::inet_pton(AF_INET, host_.c_str(), &addr.sin_addr) != 1) {
      ::close(fd);
      throw TransportError("bad address " + host_);
    }
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd);
      throw TransportError("connect to " + host_ + ":" + std::to_string(port_) +
                           " failed: " + std::strerror(errno));
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    fd_ = fd;
  }

  void drop_connection() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

  std::string host_;
  uint16_t port_;
  int timeout_ms_;
  int retries_;
  std::mutex mu_;
  int fd_ = -1;
  uint64_t next_request_id_ = 1;
};

}  // namespace hybridps
