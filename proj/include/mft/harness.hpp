// Copyright 2026 The mft Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
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
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mft/api.hpp"
#include "mft/client.hpp"
#include "mft/controller.hpp"
#include "mft/core.hpp"
#include "mft/crypto.hpp"
#include "mft/fsio.hpp"
#include "mft/logging.hpp"
#include "mft/object_store.hpp"
#include "mft/token.hpp"

namespace mft::harness {

// Deterministic integration scenario runner: boots the controller + N agent
// subprocesses + an in-process object store on loopback, generates seeded
// payloads, injects faults at exact byte/time points via interposed TCP
// relays, and evaluates named assertions into a JSON report.

// ---------------------------------------------------------------------------
// Deterministic payloads
// ---------------------------------------------------------------------------

/// Counter-based SHA-256 stream: incompressible and reproducible, so offset
/// bugs that zero-fill would hide show up as digest mismatches.
class PayloadGenerator {
 public:
  PayloadGenerator(uint64_t seed, uint64_t stream) : seed_(seed), stream_(stream) {}

  std::string generate(uint64_t size) const {
    std::string out;
    out.reserve(size);
    uint64_t counter = 0;
    while (out.size() < size) {
      Sha256 h;
      uint64_t le[3] = {seed_, stream_, counter};
      h.update(reinterpret_cast<const char*>(le), sizeof(le));
      auto block = h.finish();
      size_t take = std::min<size_t>(block.size(), size - out.size());
      out.append(reinterpret_cast<const char*>(block.data()), take);
      ++counter;
    }
    return out;
  }

 private:
  uint64_t seed_;
  uint64_t stream_;
};

// ---------------------------------------------------------------------------
// Byte-counting TCP relay with HTTP-aware fault triggers
// ---------------------------------------------------------------------------

namespace net {

inline int listen_loopback(int& port_out) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) return -1;
  int one = 1;
  setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<uint16_t>(port_out));
  if (bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || listen(fd, 64) != 0) {
    ::close(fd);
    return -1;
  }
  socklen_t len = sizeof(addr);
  getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  port_out = ntohs(addr.sin_port);
  return fd;
}

inline int connect_loopback(int port) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) return -1;
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<uint16_t>(port));
  if (connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    return -1;
  }
  int one = 1;
  setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return fd;
}

/// Pick a currently-free loopback port (bind 0, read, close). Subject to the
/// usual reuse race, which is negligible on a quiet loopback test host.
inline int free_port() {
  int port = 0;
  int fd = listen_loopback(port);
  if (fd >= 0) ::close(fd);
  return port;
}

}  // namespace net

/// Interposed TCP relay. Counts every byte in both directions; in HTTP-aware
/// mode it parses upstream request heads, attributes PATCH bodies to
/// transfers (via the bearer token subject), and can cut the stream at an
/// exact payload byte or fire a callback when a byte threshold is reached.
class TcpRelay {
 public:
  TcpRelay(int target_port, bool http_aware)
      : target_port_(target_port), http_aware_(http_aware) {}

  ~TcpRelay() { stop(); }

  int start() {
    listen_fd_ = net::listen_loopback(port_);
    if (listen_fd_ < 0) return -1;
    running_.store(true);
    accept_thread_ = std::thread([this] { accept_loop(); });
    return port_;
  }

  void stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    close_all_connections();
    if (accept_thread_.joinable()) accept_thread_.join();
    for (auto& t : pumps_) {
      if (t.joinable()) t.join();
    }
  }

  int port() const { return port_; }
  std::string url() const { return strcat("http://127.0.0.1:", port_); }

  // ---- fault controls ----

  /// Park new upstream requests until released (closes the arm race between
  /// submitting a transfer and arming its byte trigger).
  void set_hold(bool hold) {
    {
      std::lock_guard<std::mutex> lk(mu_);
      hold_ = hold;
    }
    hold_cv_.notify_all();
  }

  /// Cut the TCP stream when the targeted transfer's cumulative payload
  /// bytes reach the trigger. Empty transfer id matches any transfer.
  void arm_sever(const std::string& transfer_id, uint64_t at_payload_bytes) {
    std::lock_guard<std::mutex> lk(mu_);
    sever_target_ = transfer_id;
    sever_at_ = at_payload_bytes;
    sever_armed_ = true;
    sever_fired_ = false;
  }

  /// Invoke a callback (once) when cumulative payload bytes reach the
  /// trigger; the stream continues.
  void arm_callback(const std::string& transfer_id, uint64_t at_payload_bytes,
                    std::function<void()> fn) {
    std::lock_guard<std::mutex> lk(mu_);
    cb_target_ = transfer_id;
    cb_at_ = at_payload_bytes;
    cb_ = std::move(fn);
    cb_fired_ = false;
  }

  /// Reject new connections and cut existing ones until cleared.
  void set_blackhole(bool on) {
    blackhole_.store(on);
    if (on) close_all_connections();
  }

  // ---- counters ----

  uint64_t total_bytes() const { return total_bytes_.load(); }
  uint64_t payload_bytes() const { return payload_total_.load(); }
  int64_t last_payload_ms() const { return last_payload_ms_.load(); }
  bool sever_fired() const {
    std::lock_guard<std::mutex> lk(mu_);
    return sever_fired_;
  }

  uint64_t payload_bytes_for(const std::string& transfer_id) const {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = payload_by_transfer_.find(transfer_id);
    return it == payload_by_transfer_.end() ? 0 : it->second;
  }

  /// (millis, Upload-Offset) of every PATCH request head observed.
  std::vector<std::pair<int64_t, uint64_t>> patch_offsets() const {
    std::lock_guard<std::mutex> lk(mu_);
    return patch_offsets_;
  }

 private:
  struct Conn {
    int client_fd = -1;
    int upstream_fd = -1;
  };

  void accept_loop() {
    while (running_.load()) {
      int client = ::accept(listen_fd_, nullptr, nullptr);
      if (client < 0) {
        if (!running_.load()) return;
        continue;
      }
      if (blackhole_.load()) {
        ::close(client);
        continue;
      }
      int upstream = net::connect_loopback(target_port_);
      if (upstream < 0) {
        ::close(client);
        continue;
      }
      int one = 1;
      setsockopt(client, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      auto conn = std::make_shared<Conn>();
      conn->client_fd = client;
      conn->upstream_fd = upstream;
      {
        std::lock_guard<std::mutex> lk(conns_mu_);
        conns_.push_back(conn);
      }
      std::lock_guard<std::mutex> lk(pumps_mu_);
      pumps_.emplace_back([this, conn] { pump_upstream(conn); });
      pumps_.emplace_back([this, conn] { pump_downstream(conn); });
    }
  }

  void close_conn(const std::shared_ptr<Conn>& conn) {
    ::shutdown(conn->client_fd, SHUT_RDWR);
    ::shutdown(conn->upstream_fd, SHUT_RDWR);
  }

  void close_all_connections() {
    std::lock_guard<std::mutex> lk(conns_mu_);
    for (auto& c : conns_) close_conn(c);
  }

  bool send_all(int fd, const char* data, size_t n) {
    size_t off = 0;
    while (off < n) {
      ssize_t w = ::send(fd, data + off, n - off, MSG_NOSIGNAL);
      if (w <= 0) return false;
      off += static_cast<size_t>(w);
    }
    total_bytes_.fetch_add(n);
    return true;
  }

  // Upstream direction (client -> server): HTTP-aware when configured.
  void pump_upstream(std::shared_ptr<Conn> conn) {
    std::string head_buf;
    char buf[64 * 1024];
    // Per-request parse state.
    bool in_body = false;
    uint64_t body_remaining = 0;
    bool payload_request = false;  // PATCH body counts as transfer payload
    std::string body_transfer_id;

    while (running_.load()) {
      ssize_t n = ::recv(conn->client_fd, buf, sizeof(buf), 0);
      if (n <= 0) break;
      size_t off = 0;
      while (off < static_cast<size_t>(n)) {
        if (!http_aware_) {
          if (!send_all(conn->upstream_fd, buf + off, n - off)) goto done;
          off = n;
          break;
        }
        if (!in_body) {
          head_buf.append(buf + off, n - off);
          off = n;
          auto end = head_buf.find("\r\n\r\n");
          if (end == std::string::npos) {
            if (head_buf.size() > 256 * 1024) goto done;  // not HTTP; bail out
            break;
          }
          std::string head = head_buf.substr(0, end + 4);
          std::string rest = head_buf.substr(end + 4);
          head_buf.clear();

          auto info = parse_head(head);
          wait_if_held();
          if (!send_all(conn->upstream_fd, head.data(), head.size())) goto done;

          in_body = info.content_length > 0;
          body_remaining = info.content_length;
          payload_request = info.is_tus_patch;
          body_transfer_id = info.transfer_id;

          // Re-process any bytes that arrived after the head.
          if (!rest.empty()) {
            size_t consumed = consume_body(conn, rest.data(), rest.size(), in_body,
                                           body_remaining, payload_request, body_transfer_id);
            if (consumed == SIZE_MAX) goto done;
          }
          continue;
        }
        size_t chunk = std::min<size_t>(n - off, body_remaining);
        size_t consumed = consume_body(conn, buf + off, chunk, in_body, body_remaining,
                                       payload_request, body_transfer_id);
        if (consumed == SIZE_MAX) goto done;
        off += consumed;
      }
    }
  done:
    close_conn(conn);
  }

  /// Forward body bytes, counting payload and honoring an armed sever.
  /// Returns bytes consumed or SIZE_MAX when the stream was cut.
  size_t consume_body(const std::shared_ptr<Conn>& conn, const char* data, size_t n,
                      bool& in_body, uint64_t& body_remaining, bool payload_request,
                      const std::string& transfer_id) {
    size_t take = static_cast<size_t>(std::min<uint64_t>(n, body_remaining));
    size_t allowed = take;
    bool cut_after = false;
    std::function<void()> fire;

    if (payload_request) {
      std::lock_guard<std::mutex> lk(mu_);
      if (sever_armed_ && !sever_fired_ &&
          (sever_target_.empty() || sever_target_ == transfer_id)) {
        uint64_t counted = payload_by_transfer_[sever_target_.empty() ? transfer_id
                                                                      : sever_target_];
        if (counted + take >= sever_at_) {
          allowed = static_cast<size_t>(sever_at_ > counted ? sever_at_ - counted : 0);
          cut_after = true;
          sever_fired_ = true;
        }
      }
    }

    if (allowed > 0) {
      if (!send_all(conn->upstream_fd, data, allowed)) return SIZE_MAX;
      if (payload_request) {
        payload_total_.fetch_add(allowed);
        last_payload_ms_.store(steady_millis());
        std::lock_guard<std::mutex> lk(mu_);
        payload_by_transfer_[transfer_id] += allowed;
        if (cb_ && !cb_fired_ && (cb_target_.empty() || cb_target_ == transfer_id)) {
          uint64_t counted = payload_by_transfer_[cb_target_.empty() ? transfer_id : cb_target_];
          if (counted >= cb_at_) {
            cb_fired_ = true;
            fire = cb_;
          }
        }
      }
    }
    if (fire) fire();
    if (cut_after) {
      close_conn(conn);
      return SIZE_MAX;
    }
    body_remaining -= allowed;
    if (body_remaining == 0) in_body = false;
    return allowed;
  }

  // Downstream direction (server -> client): raw counted copy.
  void pump_downstream(std::shared_ptr<Conn> conn) {
    char buf[64 * 1024];
    while (running_.load()) {
      ssize_t n = ::recv(conn->upstream_fd, buf, sizeof(buf), 0);
      if (n <= 0) break;
      if (!send_all(conn->client_fd, buf, static_cast<size_t>(n))) break;
    }
    close_conn(conn);
  }

  struct HeadInfo {
    std::string method;
    std::string path;
    uint64_t content_length = 0;
    bool is_tus_patch = false;
    std::string transfer_id;
  };

  HeadInfo parse_head(const std::string& head) {
    HeadInfo info;
    auto line_end = head.find("\r\n");
    auto request_line = head.substr(0, line_end);
    auto sp1 = request_line.find(' ');
    auto sp2 = request_line.find(' ', sp1 + 1);
    if (sp1 != std::string::npos && sp2 != std::string::npos) {
      info.method = request_line.substr(0, sp1);
      info.path = request_line.substr(sp1 + 1, sp2 - sp1 - 1);
    }
    std::string authorization;
    size_t pos = line_end + 2;
    while (pos < head.size()) {
      auto eol = head.find("\r\n", pos);
      if (eol == std::string::npos || eol == pos) break;
      auto line = head.substr(pos, eol - pos);
      pos = eol + 2;
      auto colon = line.find(':');
      if (colon == std::string::npos) continue;
      std::string key = line.substr(0, colon);
      for (auto& c : key) c = static_cast<char>(tolower(c));
      auto value_start = line.find_first_not_of(' ', colon + 1);
      std::string value = value_start == std::string::npos ? "" : line.substr(value_start);
      if (key == "content-length") {
        try {
          info.content_length = std::stoull(value);
        } catch (...) {
        }
      } else if (key == "authorization") {
        authorization = value;
      } else if (key == "upload-offset" && info.method == "PATCH") {
        try {
          std::lock_guard<std::mutex> lk(mu_);
          patch_offsets_.emplace_back(steady_millis(), std::stoull(value));
        } catch (...) {
        }
      }
    }
    info.is_tus_patch = info.method == "PATCH" && starts_with(info.path, "/tus/");
    if (info.is_tus_patch && starts_with(authorization, "Bearer ")) {
      // The token canonical's second field is the subject (= transfer id for
      // data-channel tokens).
      auto wire = authorization.substr(7);
      auto dot = wire.find('.');
      if (dot != std::string::npos) {
        auto canonical = b64url_decode(wire.substr(0, dot));
        if (canonical) {
          auto fields = split(*canonical, '\n');
          if (fields.size() == 6) info.transfer_id = fields[1];
        }
      }
    }
    return info;
  }

  void wait_if_held() {
    std::unique_lock<std::mutex> lk(mu_);
    hold_cv_.wait(lk, [this] { return !hold_ || !running_.load(); });
  }

  int target_port_;
  bool http_aware_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> running_{false};
  std::atomic<bool> blackhole_{false};
  std::thread accept_thread_;
  std::mutex pumps_mu_;
  std::vector<std::thread> pumps_;
  std::mutex conns_mu_;
  std::vector<std::shared_ptr<Conn>> conns_;

  std::atomic<uint64_t> total_bytes_{0};
  std::atomic<uint64_t> payload_total_{0};
  std::atomic<int64_t> last_payload_ms_{0};

  mutable std::mutex mu_;
  bool hold_ = false;
  std::condition_variable hold_cv_;
  bool sever_armed_ = false;
  bool sever_fired_ = false;
  std::string sever_target_;
  uint64_t sever_at_ = 0;
  std::string cb_target_;
  uint64_t cb_at_ = 0;
  bool cb_fired_ = false;
  std::function<void()> cb_;
  std::map<std::string, uint64_t> payload_by_transfer_;
  std::vector<std::pair<int64_t, uint64_t>> patch_offsets_;
};

// ---------------------------------------------------------------------------
// Subprocess supervision
// ---------------------------------------------------------------------------

class Subprocess {
 public:
  Subprocess() = default;
  Subprocess(const Subprocess&) = delete;
  Subprocess& operator=(const Subprocess&) = delete;

  /// Spawn argv[0] with stdout/stderr appended to a log file.
  static Result<std::unique_ptr<Subprocess>> spawn(const std::vector<std::string>& argv,
                                                   const fs::path& log_file) {
    auto proc = std::make_unique<Subprocess>();
    pid_t pid = fork();
    if (pid < 0) return make_error("SpawnFailed", strerror(errno));
    if (pid == 0) {
      int log_fd = ::open(log_file.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
      if (log_fd >= 0) {
        dup2(log_fd, STDOUT_FILENO);
        dup2(log_fd, STDERR_FILENO);
        ::close(log_fd);
      }
      std::vector<char*> cargv;
      for (const auto& a : argv) cargv.push_back(const_cast<char*>(a.c_str()));
      cargv.push_back(nullptr);
      execv(cargv[0], cargv.data());
      _exit(127);
    }
    proc->pid_ = pid;
    return proc;
  }

  ~Subprocess() {
    if (alive()) kill_hard();
    reap();
  }

  /// Abrupt termination, no cleanup: honest crash semantics.
  void kill_hard() {
    if (pid_ > 0) ::kill(pid_, SIGKILL);
    reap();
  }

  void terminate() {
    if (pid_ > 0) ::kill(pid_, SIGTERM);
  }

  bool alive() {
    if (pid_ <= 0) return false;
    int status = 0;
    pid_t r = waitpid(pid_, &status, WNOHANG);
    if (r == pid_) {
      pid_ = -1;
      return false;
    }
    return r == 0;
  }

  void reap() {
    if (pid_ > 0) {
      int status = 0;
      waitpid(pid_, &status, 0);
      pid_ = -1;
    }
  }

  pid_t pid() const { return pid_; }

 private:
  pid_t pid_ = -1;
};

// ---------------------------------------------------------------------------
// Scenario model
// ---------------------------------------------------------------------------

struct ScenarioEndpoint {
  std::string endpoint_id;
  EndpointKind kind = EndpointKind::LocalPosix;
  std::string bucket;        // OBJECT_STORE only
  bool credentialed = false; // OBJECT_STORE endpoints reached via grants
};

struct ScenarioAgent {
  std::string agent_id;
  std::vector<std::string> serves;
};

struct ScenarioTransfer {
  EndpointRef source;
  EndpointRef destination;
  uint64_t size_bytes = 0;
  std::optional<uint64_t> chunk_bytes;
  bool verify_digest = true;
};

struct ScenarioFault {
  std::string kind;  // KILL_AGENT | SEVER_DATA_CHANNEL | CONNECTOR_ERROR | DELAY_CONTROLLER
  std::string target;
  std::optional<uint64_t> at_bytes;
  std::optional<double> at_seconds;
  json params = json::object();
};

struct ScenarioAssertion {
  std::string check;
  json params = json::object();
};

struct Scenario {
  std::string name = "scenario";
  uint64_t seed = 1;
  int64_t tick_ms = 100;
  int64_t liveness_window_s = 3;
  int64_t stall_timeout_s = 15;
  RetryPolicy retry{500, 2, 10000, 3};
  std::vector<ScenarioEndpoint> endpoints;
  std::vector<ScenarioAgent> agents;
  std::vector<ScenarioTransfer> workload;
  std::vector<ScenarioFault> faults;
  std::vector<ScenarioAssertion> assertions;
  double timeout_s = 300;

  json to_json() const {
    json eps = json::array();
    for (const auto& e : endpoints) {
      json one{{"endpoint_id", e.endpoint_id}, {"kind", to_string(e.kind)}};
      if (!e.bucket.empty()) one["bucket"] = e.bucket;
      if (e.credentialed) one["credentialed"] = true;
      eps.push_back(std::move(one));
    }
    json ags = json::array();
    for (const auto& a : agents) {
      ags.push_back(json{{"agent_id", a.agent_id}, {"serves", a.serves}});
    }
    json work = json::array();
    for (const auto& t : workload) {
      json one{{"source", mft::to_json(t.source)},
               {"destination", mft::to_json(t.destination)},
               {"size_bytes", t.size_bytes},
               {"verify_digest", t.verify_digest}};
      if (t.chunk_bytes) one["chunk_bytes"] = *t.chunk_bytes;
      work.push_back(std::move(one));
    }
    json faults_arr = json::array();
    for (const auto& f : faults) {
      json trigger = json::object();
      if (f.at_bytes) trigger["at_bytes"] = *f.at_bytes;
      if (f.at_seconds) trigger["at_seconds"] = *f.at_seconds;
      faults_arr.push_back(json{{"kind", f.kind},
                                {"target", f.target},
                                {"trigger", std::move(trigger)},
                                {"params", f.params}});
    }
    json asserts = json::array();
    for (const auto& a : assertions) {
      asserts.push_back(json{{"check", a.check}, {"params", a.params}});
    }
    return json{{"name", name},
                {"seed", seed},
                {"controller",
                 json{{"tick_ms", tick_ms},
                      {"liveness_window_s", liveness_window_s},
                      {"stall_timeout_s", stall_timeout_s},
                      {"retry", json{{"base_delay_ms", retry.base_delay_ms},
                                     {"multiplier", retry.multiplier},
                                     {"max_delay_ms", retry.max_delay_ms},
                                     {"max_attempts", retry.max_attempts}}}}},
                {"topology", json{{"endpoints", std::move(eps)}, {"agents", std::move(ags)}}},
                {"workload", std::move(work)},
                {"faults", std::move(faults_arr)},
                {"assertions", std::move(asserts)},
                {"timeout_s", timeout_s}};
  }

  static Result<Scenario> from_json(const json& j) {
    Scenario s;
    try {
      s.name = j.value("name", "scenario");
      s.seed = j.value("seed", 1ull);
      if (j.contains("controller")) {
        const auto& c = j["controller"];
        s.tick_ms = c.value("tick_ms", s.tick_ms);
        s.liveness_window_s = c.value("liveness_window_s", s.liveness_window_s);
        s.stall_timeout_s = c.value("stall_timeout_s", s.stall_timeout_s);
        if (c.contains("retry")) {
          const auto& r = c["retry"];
          s.retry.base_delay_ms = r.value("base_delay_ms", s.retry.base_delay_ms);
          s.retry.multiplier = r.value("multiplier", s.retry.multiplier);
          s.retry.max_delay_ms = r.value("max_delay_ms", s.retry.max_delay_ms);
          s.retry.max_attempts = r.value("max_attempts", s.retry.max_attempts);
        }
      }
      for (const auto& e : j.at("topology").value("endpoints", json::array())) {
        ScenarioEndpoint ep;
        ep.endpoint_id = e.at("endpoint_id").get<std::string>();
        auto kind = endpoint_kind_from_string(e.value("kind", "LOCAL_POSIX"));
        if (!kind) return make_error("ScenarioInvalid", "unknown endpoint kind");
        ep.kind = *kind;
        ep.bucket = e.value("bucket", "");
        ep.credentialed = e.value("credentialed", false);
        s.endpoints.push_back(std::move(ep));
      }
      for (const auto& a : j.at("topology").value("agents", json::array())) {
        ScenarioAgent agent;
        agent.agent_id = a.at("agent_id").get<std::string>();
        for (const auto& sv : a.value("serves", json::array())) {
          agent.serves.push_back(sv.get<std::string>());
        }
        s.agents.push_back(std::move(agent));
      }
      for (const auto& t : j.value("workload", json::array())) {
        ScenarioTransfer transfer;
        transfer.source = endpoint_ref_from_json(t.at("source"));
        transfer.destination = endpoint_ref_from_json(t.at("destination"));
        transfer.size_bytes = t.at("size_bytes").get<uint64_t>();
        if (t.contains("chunk_bytes")) transfer.chunk_bytes = t["chunk_bytes"].get<uint64_t>();
        transfer.verify_digest = t.value("verify_digest", true);
        s.workload.push_back(std::move(transfer));
      }
      for (const auto& f : j.value("faults", json::array())) {
        ScenarioFault fault;
        fault.kind = f.at("kind").get<std::string>();
        fault.target = f.value("target", "");
        if (f.contains("trigger")) {
          if (f["trigger"].contains("at_bytes")) {
            fault.at_bytes = f["trigger"]["at_bytes"].get<uint64_t>();
          }
          if (f["trigger"].contains("at_seconds")) {
            fault.at_seconds = f["trigger"]["at_seconds"].get<double>();
          }
        }
        fault.params = f.value("params", json::object());
        s.faults.push_back(std::move(fault));
      }
      for (const auto& a : j.value("assertions", json::array())) {
        s.assertions.push_back(ScenarioAssertion{a.at("check").get<std::string>(),
                                                 a.value("params", json::object())});
      }
      s.timeout_s = j.value("timeout_s", 300.0);
    } catch (const json::exception& e) {
      return make_error("ScenarioInvalid", strcat("scenario malformed: ", e.what()));
    }
    auto valid = s.validate();
    if (!valid.ok()) return valid.error();
    return s;
  }

  Status validate() const {
    std::set<std::string> endpoint_ids;
    for (const auto& e : endpoints) endpoint_ids.insert(e.endpoint_id);
    std::set<std::string> agent_ids;
    for (const auto& a : agents) {
      agent_ids.insert(a.agent_id);
      for (const auto& sv : a.serves) {
        if (!endpoint_ids.count(sv)) {
          return make_error("ScenarioInvalid", strcat("agent ", a.agent_id,
                                                      " serves unknown endpoint ", sv));
        }
      }
    }
    for (size_t i = 0; i < workload.size(); ++i) {
      if (!endpoint_ids.count(workload[i].source.endpoint_id) ||
          !endpoint_ids.count(workload[i].destination.endpoint_id)) {
        return make_error("ScenarioInvalid", strcat("workload ", i, " names unknown endpoints"));
      }
    }
    for (const auto& f : faults) {
      if (f.kind == "KILL_AGENT") {
        if (!agent_ids.count(f.target)) {
          return make_error("ScenarioInvalid", strcat("KILL_AGENT targets unknown agent ",
                                                      f.target));
        }
      } else if (f.kind == "SEVER_DATA_CHANNEL") {
        size_t idx = 0;
        try {
          idx = std::stoul(f.target);
        } catch (...) {
          return make_error("ScenarioInvalid", "SEVER_DATA_CHANNEL target must be a workload index");
        }
        if (idx >= workload.size()) {
          return make_error("ScenarioInvalid", "SEVER_DATA_CHANNEL workload index out of range");
        }
        if (f.at_bytes && *f.at_bytes > workload[idx].size_bytes) {
          return make_error("ScenarioInvalid", "sever trigger beyond the payload size");
        }
      } else if (f.kind == "CONNECTOR_ERROR") {
        if (!endpoint_ids.count(f.target)) {
          return make_error("ScenarioInvalid", "CONNECTOR_ERROR targets unknown endpoint");
        }
      } else if (f.kind != "DELAY_CONTROLLER") {
        return make_error("ScenarioInvalid", strcat("unknown fault kind ", f.kind));
      }
    }
    return ok_status();
  }
};

// ---------------------------------------------------------------------------
// Scenario runner
// ---------------------------------------------------------------------------

struct RunnerOptions {
  fs::path workdir;        // all scenario state lives under here
  std::string mft_binary;  // path to the mft CLI for agent subprocesses
  double poll_interval_s = 0.25;
};

class ScenarioRunner {
 public:
  ScenarioRunner(Scenario scenario, RunnerOptions options)
      : scenario_(std::move(scenario)), options_(std::move(options)) {}

  /// Boot the topology, run the workload with faults, evaluate assertions.
  /// Returns the report document; "pass" reflects the assertion conjunction.
  Result<json> run() {
    auto valid = scenario_.validate();
    if (!valid.ok()) return valid.error();
    mkdirs(options_.workdir / "logs");

    int64_t t_start = steady_millis();
    auto setup = boot_topology();
    if (!setup.ok()) {
      teardown();
      return setup.error();
    }

    generate_payloads();
    submit_and_run();
    auto report = build_report(t_start);
    teardown();
    return report;
  }

 private:
  struct AgentProc {
    ScenarioAgent config;
    int listen_port = 0;
    std::unique_ptr<TcpRelay> data_relay;
    std::unique_ptr<Subprocess> process;
    fs::path config_path;
    fs::path staging_dir;
  };

  struct TransferRun {
    ScenarioTransfer spec;
    std::string transfer_id;
    std::string expected_digest;
    TransferRecord final_record;
    bool terminal = false;
  };

  Status boot_topology() {
    secret_ = ClusterSecret::generate();
    admin_token_ = rand_id();
    cluster_token_ = rand_id();

    // Object store + credentials for credentialed endpoints.
    bool needs_store = false;
    for (const auto& e : scenario_.endpoints) {
      if (e.kind == EndpointKind::ObjectStore) needs_store = true;
    }
    if (needs_store) {
      store_ = std::make_unique<ObjectStoreService>();
      store_->add_account("AK-harness", store_secret_);
      store_->start();
    }

    ControllerConfig config;
    config.tick_ms = scenario_.tick_ms;
    config.liveness_window_s = scenario_.liveness_window_s;
    config.stall_timeout_s = scenario_.stall_timeout_s;
    config.retry = scenario_.retry;
    config.journal_dir = options_.workdir / "journal";
    controller_ = std::make_unique<Controller>(config, backends_, backends_, secret_);

    ApiConfig api_config;
    api_config.admin_token = admin_token_;
    api_config.cluster_token = cluster_token_;
    api_ = std::make_unique<ApiServer>(api_config, *controller_, backends_, backends_);
    int api_port = api_->start();
    controller_->start();

    // Everything (agents and the harness client) reaches the controller
    // through the counting relay: all controller socket bytes are observed.
    control_relay_ = std::make_unique<TcpRelay>(api_port, /*http_aware=*/false);
    if (control_relay_->start() < 0) return make_error("HarnessError", "relay bind failed");
    controller_url_ = control_relay_->url();

    client_ = std::make_unique<ApiClient>(controller_url_, admin_token_);
    client_->set_capture([this](const std::string& method, const std::string& path, int status,
                                const std::string& body) {
      AppendFile f;
      if (f.open(options_.workdir / "logs" / "api_transcript.log", false).ok()) {
        auto line = strcat(method, " ", path, " -> ", status, " ", body, "\n");
        f.write(line.data(), line.size());
      }
    });

    // Register endpoints and credentials through the public API.
    for (const auto& e : scenario_.endpoints) {
      StorageEndpoint ep;
      ep.endpoint_id = e.endpoint_id;
      ep.kind = e.kind;
      ep.capabilities = default_capabilities(e.kind);
      if (e.kind == EndpointKind::LocalPosix) {
        auto root = options_.workdir / "data" / e.endpoint_id;
        mkdirs(root);
        ep.base_locator = root.string();
      } else if (e.kind == EndpointKind::ObjectStore) {
        ep.base_locator = store_->url(e.bucket.empty() ? e.endpoint_id : e.bucket);
        if (e.credentialed) {
          auto cred = client_->add_credential(
              CredentialPayload{CredentialKind::AccessKeyPair, "AK-harness", store_secret_, ""});
          if (!cred.ok()) return cred.error();
          ep.credential_ref = cred.value();
        }
      }
      auto added = client_->add_endpoint(ep);
      if (!added.ok()) return added.error();
      endpoint_records_[e.endpoint_id] = ep;
    }

    // Agents: one subprocess each, data channel advertised through a
    // per-agent relay so byte triggers see the real stream.
    for (const auto& a : scenario_.agents) {
      auto proc = std::make_unique<AgentProc>();
      proc->config = a;
      proc->listen_port = net::free_port();
      proc->data_relay = std::make_unique<TcpRelay>(proc->listen_port, /*http_aware=*/true);
      if (proc->data_relay->start() < 0) return make_error("HarnessError", "relay bind failed");
      proc->staging_dir = options_.workdir / strcat(a.agent_id, "-staging");

      AgentConfig config;
      config.agent_id = a.agent_id;
      config.controller_url = controller_url_;
      config.cluster_token = cluster_token_;
      config.cluster_secret = secret_;
      for (const auto& served_id : a.serves) {
        ServedEndpoint served;
        served.endpoint = endpoint_records_[served_id];
        if (served.endpoint.credential_ref) {
          served.credential =
              CredentialPayload{CredentialKind::AccessKeyPair, "AK-harness", store_secret_, ""};
        }
        config.served.push_back(std::move(served));
      }
      config.listen_port = proc->listen_port;
      config.advertised_data_channel_url = proc->data_relay->url();
      config.advertised_user_http_url = strcat("http://127.0.0.1:", proc->listen_port);
      config.staging_dir = proc->staging_dir;
      config.poll_wait_s = 5;

      proc->config_path = options_.workdir / strcat(a.agent_id, ".json");
      auto written = write_file_atomic(proc->config_path, config.to_json().dump(2));
      if (!written.ok()) return written.error();

      auto spawned = spawn_agent(*proc);
      if (!spawned.ok()) return spawned.error();
      agents_.push_back(std::move(proc));
    }

    // Wait for every agent to go live.
    int64_t deadline = steady_millis() + 20000;
    while (steady_millis() < deadline) {
      auto live = client_->list_agents();
      size_t count = 0;
      if (live.ok()) {
        for (const auto& a : live.value()) {
          if (a.value("live", false)) ++count;
        }
      }
      if (count == scenario_.agents.size()) return ok_status();
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    return make_error("HarnessTimeout", "agents failed to register");
  }

  Status spawn_agent(AgentProc& proc) {
    auto log = options_.workdir / "logs" / strcat(proc.config.agent_id, ".log");
    auto spawned = Subprocess::spawn(
        {options_.mft_binary, "serve-agent", "--config", proc.config_path.string()}, log);
    if (!spawned.ok()) return spawned.error();
    proc.process = spawned.take();
    return ok_status();
  }

  void generate_payloads() {
    for (size_t i = 0; i < scenario_.workload.size(); ++i) {
      auto& t = scenario_.workload[i];
      PayloadGenerator gen(scenario_.seed, i);
      auto payload = gen.generate(t.size_bytes);
      TransferRun run;
      run.spec = t;
      run.expected_digest = Sha256::hex(payload);

      const auto& src = endpoint_records_[t.source.endpoint_id];
      if (src.kind == EndpointKind::LocalPosix) {
        auto path = fs::path(src.base_locator) / t.source.path;
        mkdirs(path.parent_path());
        std::ofstream out(path, std::ios::binary);
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
      } else if (src.kind == EndpointKind::ObjectStore) {
        auto parsed = mft::detail::parse_http_url(src.base_locator);
        store_->put_direct(parsed.value().path.substr(1), t.source.path, payload);
      }
      runs_.push_back(std::move(run));
    }
  }

  TcpRelay* relay_for_agent(const std::string& agent_id) {
    for (auto& a : agents_) {
      if (a->config.agent_id == agent_id) return a->data_relay.get();
    }
    return nullptr;
  }

  AgentProc* agent_proc(const std::string& agent_id) {
    for (auto& a : agents_) {
      if (a->config.agent_id == agent_id) return a.get();
    }
    return nullptr;
  }

  /// The relay carrying a transfer's payload is the one in front of the
  /// destination-serving agent.
  TcpRelay* relay_for_transfer(size_t workload_index) {
    const auto& dest_ep = scenario_.workload[workload_index].destination.endpoint_id;
    for (auto& a : agents_) {
      for (const auto& served : a->config.serves) {
        if (served == dest_ep) return a->data_relay.get();
      }
    }
    return nullptr;
  }

  void submit_and_run() {
    // Hold data relays while byte-triggered faults are armed, so no payload
    // byte can slip through before arming.
    bool has_byte_faults = false;
    for (const auto& f : scenario_.faults) {
      if (f.at_bytes) has_byte_faults = true;
    }
    if (has_byte_faults) {
      for (auto& a : agents_) a->data_relay->set_hold(true);
    }

    run_started_ms_ = steady_millis();
    for (size_t i = 0; i < runs_.size(); ++i) {
      TransferRequest req;
      req.source = runs_[i].spec.source;
      req.destination = runs_[i].spec.destination;
      req.verify_digest = runs_[i].spec.verify_digest;
      req.requested_chunk_bytes = runs_[i].spec.chunk_bytes;
      auto submitted = client_->submit(req);
      if (submitted.ok()) {
        runs_[i].transfer_id = submitted.value().transfer_id;
        runs_[i].final_record = submitted.take();
        runs_[i].terminal = is_terminal(runs_[i].final_record.state);
      }
    }

    // Arm byte-triggered faults now that transfer ids are known.
    for (const auto& f : scenario_.faults) {
      if (!f.at_bytes) continue;
      if (f.kind == "SEVER_DATA_CHANNEL") {
        size_t idx = std::stoul(f.target);
        if (auto* relay = relay_for_transfer(idx)) {
          relay->arm_sever(runs_[idx].transfer_id, *f.at_bytes);
          fire_log_.push_back(json{{"kind", f.kind},
                                   {"target", runs_[idx].transfer_id},
                                   {"at_bytes", *f.at_bytes}});
        }
      } else if (f.kind == "KILL_AGENT") {
        // Count payload on the relay of the transfer named in params (default
        // workload 0) and kill the target agent at the trigger.
        size_t idx = f.params.value("transfer", 0);
        double restart_after = f.params.value("restart_after_s", -1.0);
        std::string target = f.target;
        if (auto* relay = relay_for_transfer(idx)) {
          relay->arm_callback(runs_[idx].transfer_id, *f.at_bytes,
                              [this, target, restart_after, idx] {
                                kill_agent(target, restart_after, static_cast<int>(idx));
                              });
        }
      }
    }
    if (has_byte_faults) {
      for (auto& a : agents_) a->data_relay->set_hold(false);
    }

    // Time-triggered faults run off a scheduler thread.
    std::vector<std::thread> timers;
    for (const auto& f : scenario_.faults) {
      if (!f.at_seconds) continue;
      timers.emplace_back([this, f] {
        std::this_thread::sleep_for(std::chrono::duration<double>(*f.at_seconds));
        fire_timed_fault(f);
      });
    }

    // Watch until every transfer is terminal or the scenario times out.
    int64_t deadline = run_started_ms_ + static_cast<int64_t>(scenario_.timeout_s * 1000);
    while (steady_millis() < deadline) {
      bool all_done = true;
      for (auto& run : runs_) {
        if (run.terminal || run.transfer_id.empty()) continue;
        auto rec = client_->get_transfer(run.transfer_id);
        if (rec.ok()) {
          run.final_record = rec.take();
          run.terminal = is_terminal(run.final_record.state);
        }
        if (!run.terminal) all_done = false;
      }
      if (all_done) break;
      std::this_thread::sleep_for(
          std::chrono::milliseconds(static_cast<int64_t>(options_.poll_interval_s * 1000)));
    }
    run_finished_ms_ = steady_millis();
    timed_out_ = steady_millis() >= deadline;

    for (auto& t : timers) t.join();
  }

  void kill_agent(const std::string& agent_id, double restart_after_s, int transfer_idx = -1) {
    auto* proc = agent_proc(agent_id);
    if (!proc || !proc->process) return;
    log_info("harness", strcat("KILL_AGENT ", agent_id, " (pid ", proc->process->pid(), ")"));
    {
      std::lock_guard<std::mutex> lk(fire_mu_);
      fire_log_.push_back(json{{"kind", "KILL_AGENT"},
                               {"target", agent_id},
                               {"at_ms", steady_millis() - run_started_ms_}});
    }
    proc->process->kill_hard();

    // With the process dead, the destination staging file is frozen; its size
    // is the durable byte count a restarted server may report.
    if (transfer_idx >= 0 && static_cast<size_t>(transfer_idx) < runs_.size()) {
      const auto& run = runs_[transfer_idx];
      const auto& ep = endpoint_records_[run.spec.destination.endpoint_id];
      if (ep.kind == EndpointKind::LocalPosix) {
        fs::path staging = fs::path(ep.base_locator) / run.spec.destination.path;
        staging += strcat(".part-", run.transfer_id);
        staged_size_after_kill_ = file_size_or_zero(staging);
      }
    }

    if (restart_after_s >= 0) {
      std::thread([this, agent_id, restart_after_s] {
        std::this_thread::sleep_for(std::chrono::duration<double>(restart_after_s));
        auto* proc = agent_proc(agent_id);
        if (!proc) return;
        log_info("harness", strcat("restarting agent ", agent_id));
        restart_observed_ms_ = steady_millis();
        spawn_agent(*proc);
        std::lock_guard<std::mutex> lk(fire_mu_);
        fire_log_.push_back(json{{"kind", "RESTART_AGENT"}, {"target", agent_id}});
      }).detach();
    }
  }

  void fire_timed_fault(const ScenarioFault& f) {
    std::string detail;
    if (f.kind == "KILL_AGENT") {
      kill_agent(f.target, f.params.value("restart_after_s", -1.0),
                 f.params.value("transfer", -1));
      return;
    }
    if (f.kind == "DELAY_CONTROLLER") {
      double duration = f.params.value("duration_s", 10.0);
      blackhole_started_ms_ = steady_millis();
      control_relay_->set_blackhole(true);
      log_info("harness", strcat("controller blackholed for ", duration, "s"));
      std::this_thread::sleep_for(std::chrono::duration<double>(duration));
      control_relay_->set_blackhole(false);
      blackhole_ended_ms_ = steady_millis();
      detail = strcat("duration_s=", duration);
    } else if (f.kind == "CONNECTOR_ERROR") {
      if (store_) {
        std::string op = f.params.value("op", "write");
        int count = f.params.value("count", 1);
        store_->fail_next(op == "write" ? "PUT" : "GET", count);
        detail = strcat("op=", op, " count=", count);
      }
    } else if (f.kind == "SEVER_DATA_CHANNEL") {
      size_t idx = std::stoul(f.target);
      if (auto* relay = relay_for_transfer(idx)) {
        relay->arm_sever(runs_[idx].transfer_id, 0);
        detail = "armed immediate sever";
      }
    }
    std::lock_guard<std::mutex> lk(fire_mu_);
    fire_log_.push_back(json{{"kind", f.kind},
                             {"target", f.target},
                             {"at_ms", steady_millis() - run_started_ms_},
                             {"detail", detail}});
  }

  // ---- assertions ----

  json evaluate_assertion(const ScenarioAssertion& a) {
    bool pass = true;
    std::string detail;

    auto fail = [&](std::string why) {
      pass = false;
      detail = std::move(why);
    };

    if (a.check == "all_completed") {
      for (size_t i = 0; i < runs_.size(); ++i) {
        if (runs_[i].final_record.state != TransferState::Completed) {
          fail(strcat("transfer ", i, " is ", to_string(runs_[i].final_record.state),
                      runs_[i].final_record.last_error
                          ? strcat(" (", runs_[i].final_record.last_error->code, ": ",
                                   runs_[i].final_record.last_error->message, ")")
                          : ""));
        }
      }
    } else if (a.check == "digests_match") {
      for (size_t i = 0; i < runs_.size(); ++i) {
        const auto& rec = runs_[i].final_record;
        if (rec.state != TransferState::Completed) continue;
        if (!rec.digest_source || *rec.digest_source != runs_[i].expected_digest) {
          fail(strcat("transfer ", i, " source digest mismatch"));
        }
        auto actual = destination_digest(runs_[i]);
        if (!actual || *actual != runs_[i].expected_digest) {
          fail(strcat("transfer ", i, " destination bytes do not match the payload"));
        }
      }
    } else if (a.check == "mode_is") {
      size_t idx = a.params.value("transfer", 0);
      auto expected = transfer_mode_from_string(a.params.value("mode", ""));
      if (idx >= runs_.size() || !expected || runs_[idx].final_record.mode != *expected) {
        fail(strcat("transfer ", idx, " mode is ",
                    runs_[idx].final_record.mode ? to_string(*runs_[idx].final_record.mode)
                                                 : "unset"));
      }
    } else if (a.check == "failed_with") {
      size_t idx = a.params.value("transfer", 0);
      auto code = a.params.value("code", "");
      const auto& rec = runs_[idx].final_record;
      if (rec.state != TransferState::Failed || !rec.last_error ||
          rec.last_error->code != code) {
        fail(strcat("transfer ", idx, " expected FAILED(", code, "), got ",
                    to_string(rec.state)));
      }
    } else if (a.check == "retransmit_bounded") {
      // Payload bytes observed on the wire minus the object size must not
      // exceed the slack (default: one chunk).
      size_t idx = a.params.value("transfer", 0);
      uint64_t chunk = runs_[idx].spec.chunk_bytes.value_or(kDefaultChunkBytes);
      uint64_t slack = a.params.value("slack_chunks", 1) * chunk;
      auto* relay = relay_for_transfer(idx);
      uint64_t seen = relay ? relay->payload_bytes_for(runs_[idx].transfer_id) : 0;
      uint64_t size = runs_[idx].spec.size_bytes;
      if (seen < size || seen > size + slack) {
        fail(strcat("payload bytes on wire ", seen, ", object size ", size, ", slack ", slack));
      }
      detail = strcat("wire=", seen, " size=", size, " retransmitted=", seen - std::min(seen, size));
    } else if (a.check == "control_bytes_bounded") {
      uint64_t base = a.params.value("base_kib", 64) * 1024ull;
      uint64_t rate = a.params.value("per_second_kib", 1) * 1024ull;
      double elapsed_s = (run_finished_ms_ - run_started_ms_) / 1000.0;
      uint64_t bound = base + static_cast<uint64_t>(rate * (elapsed_s + 1));
      uint64_t actual = control_relay_->total_bytes();
      if (actual > bound) {
        fail(strcat("control bytes ", actual, " exceed bound ", bound, " (elapsed ", elapsed_s,
                    "s)"));
      }
      detail = strcat("control_bytes=", actual, " bound=", bound);
    } else if (a.check == "staging_clean") {
      // No stray staging for COMPLETED or CANCELED transfers.
      for (const auto& run : runs_) {
        auto state = run.final_record.state;
        if (state != TransferState::Completed && state != TransferState::Canceled) continue;
        auto needle = strcat(".part-", run.transfer_id);
        for (const auto& [id, ep] : endpoint_records_) {
          if (ep.kind != EndpointKind::LocalPosix) continue;
          std::error_code ec;
          for (fs::recursive_directory_iterator it(ep.base_locator, ec), end;
               it != end && !ec; it.increment(ec)) {
            if (it->path().filename().string().find(needle) != std::string::npos) {
              fail(strcat("stray staging ", it->path().string()));
            }
          }
        }
        for (const auto& agent : agents_) {
          std::error_code ec;
          auto spool = agent->staging_dir / "spool";
          for (fs::directory_iterator it(spool, ec), end; it != end && !ec; it.increment(ec)) {
            if (it->path().filename().string().find(needle) != std::string::npos) {
              fail(strcat("stray spool ", it->path().string()));
            }
          }
        }
      }
    } else if (a.check == "data_progress_during_blackhole") {
      // The data channel must have kept moving while the controller was dark.
      if (blackhole_started_ms_ == 0 || blackhole_ended_ms_ == 0) {
        fail("no blackhole window recorded");
      } else {
        size_t idx = a.params.value("transfer", 0);
        auto* relay = relay_for_transfer(idx);
        int64_t last = relay ? relay->last_payload_ms() : 0;
        uint64_t seen = relay ? relay->payload_bytes_for(runs_[idx].transfer_id) : 0;
        if (seen < runs_[idx].spec.size_bytes) {
          fail(strcat("data channel moved only ", seen, " of ", runs_[idx].spec.size_bytes,
                      " bytes"));
        } else if (last > blackhole_ended_ms_) {
          fail("payload still flowing after the blackhole lifted");
        }
        detail = strcat("last_payload_at_ms=", last - run_started_ms_, " blackhole=[",
                        blackhole_started_ms_ - run_started_ms_, ",",
                        blackhole_ended_ms_ - run_started_ms_, "]");
      }
    } else if (a.check == "resume_offset_durable") {
      // After a receiving-agent restart, the first PATCH offset equals the
      // staged byte count (HEAD never over-reports).
      size_t idx = a.params.value("transfer", 0);
      uint64_t staged = staged_size_after_kill_;
      auto* relay = relay_for_transfer(idx);
      bool found = false;
      if (relay) {
        for (const auto& [ms, offset] : relay->patch_offsets()) {
          if (ms >= restart_observed_ms_) {
            found = true;
            if (offset > staged) {
              fail(strcat("first post-restart offset ", offset, " exceeds staged ", staged));
            }
            detail = strcat("resume_offset=", offset, " staged_at_kill=", staged);
            break;
          }
        }
      }
      if (!found && pass) fail("no PATCH observed after the restart");
    } else if (a.check == "min_attempts") {
      size_t idx = a.params.value("transfer", 0);
      uint32_t expected = a.params.value("at_least", 1);
      if (runs_[idx].final_record.attempt < expected) {
        fail(strcat("attempt ", runs_[idx].final_record.attempt, " < ", expected));
      }
    } else {
      fail(strcat("unknown assertion ", a.check));
    }

    return json{{"check", a.check}, {"params", a.params}, {"pass", pass}, {"detail", detail}};
  }

  std::optional<std::string> destination_digest(const TransferRun& run) {
    const auto& ep = endpoint_records_[run.spec.destination.endpoint_id];
    if (ep.kind == EndpointKind::LocalPosix) {
      auto path = fs::path(ep.base_locator) / run.spec.destination.path;
      auto content = read_file(path);
      if (!content) return std::nullopt;
      return Sha256::hex(*content);
    }
    if (ep.kind == EndpointKind::ObjectStore && store_) {
      auto parsed = mft::detail::parse_http_url(ep.base_locator);
      auto content = store_->peek(parsed.value().path.substr(1), run.spec.destination.path);
      if (!content) return std::nullopt;
      return Sha256::hex(*content);
    }
    return std::nullopt;
  }

  json build_report(int64_t t_start) {
    json transfers = json::array();
    for (size_t i = 0; i < runs_.size(); ++i) {
      const auto& run = runs_[i];
      json one{{"index", i},
               {"transfer_id", run.transfer_id},
               {"state", to_string(run.final_record.state)},
               {"attempt", run.final_record.attempt},
               {"bytes_transferred", run.final_record.bytes_transferred},
               {"expected_digest", run.expected_digest}};
      if (run.final_record.mode) one["mode"] = to_string(*run.final_record.mode);
      if (run.final_record.digest_source) one["digest_source"] = *run.final_record.digest_source;
      if (run.final_record.digest_destination) {
        one["digest_destination"] = *run.final_record.digest_destination;
      }
      if (run.final_record.last_error) one["last_error"] = to_json(*run.final_record.last_error);
      transfers.push_back(std::move(one));
    }

    json data_relays = json::object();
    for (const auto& a : agents_) {
      data_relays[a->config.agent_id] = json{{"total_bytes", a->data_relay->total_bytes()},
                                             {"payload_bytes", a->data_relay->payload_bytes()}};
    }

    json assertions = json::array();
    bool all_pass = !timed_out_;
    for (const auto& a : scenario_.assertions) {
      auto result = evaluate_assertion(a);
      all_pass = all_pass && result["pass"].get<bool>();
      assertions.push_back(std::move(result));
    }

    return json{{"scenario", scenario_.name},
                {"seed", scenario_.seed},
                {"duration_s", (steady_millis() - t_start) / 1000.0},
                {"timed_out", timed_out_},
                {"transfers", std::move(transfers)},
                {"counters", json{{"control_bytes", control_relay_->total_bytes()},
                                  {"data_relays", std::move(data_relays)}}},
                {"faults_fired", fire_log_},
                {"assertions", std::move(assertions)},
                {"pass", all_pass}};
  }

  void teardown() {
    for (auto& a : agents_) {
      if (a->process) a->process->kill_hard();
    }
    if (controller_) controller_->stop();
    if (api_) api_->stop();
    if (store_) store_->stop();
    if (control_relay_) control_relay_->stop();
    for (auto& a : agents_) {
      if (a->data_relay) a->data_relay->stop();
    }
  }

 public:
  Scenario scenario_;
  RunnerOptions options_;

  ClusterSecret secret_;
  std::string admin_token_;
  std::string cluster_token_;
  std::string store_secret_ = rand_id();
  InMemoryBackends backends_;
  std::unique_ptr<Controller> controller_;
  std::unique_ptr<ApiServer> api_;
  std::unique_ptr<ObjectStoreService> store_;
  std::unique_ptr<TcpRelay> control_relay_;
  std::string controller_url_;
  std::unique_ptr<ApiClient> client_;
  std::vector<std::unique_ptr<AgentProc>> agents_;
  std::vector<TransferRun> runs_;
  std::vector<json> fire_log_;
  std::mutex fire_mu_;
  int64_t run_started_ms_ = 0;
  int64_t run_finished_ms_ = 0;
  bool timed_out_ = false;
  std::atomic<int64_t> blackhole_started_ms_{0};
  std::atomic<int64_t> blackhole_ended_ms_{0};
  std::atomic<uint64_t> staged_size_after_kill_{0};
  std::atomic<int64_t> restart_observed_ms_{0};
};

inline Result<json> run_scenario(const Scenario& scenario, const RunnerOptions& options) {
  ScenarioRunner runner(scenario, options);
  return runner.run();
}

}  // namespace mft::harness
