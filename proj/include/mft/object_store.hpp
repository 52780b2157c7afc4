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

#include <httplib.h>

#include <map>
#include <mutex>
#include <string>
#include <thread>

#include "mft/core.hpp"
#include "mft/crypto.hpp"
#include "mft/logging.hpp"

namespace mft {

/// In-process object store speaking a minimal S3-like REST dialect:
/// PUT/GET/HEAD/DELETE on /{bucket}/{key}, GET honors Range, HEAD returns
/// Content-Length, auth via
///   X-MFT-Access: <access_key_id>:<hex HMAC-SHA256(secret_key, method "\n" path)>.
/// Objects live in memory; a PUT swaps the value atomically, so readers
/// never observe a partial object.
class ObjectStoreService {
 public:
  ObjectStoreService() { configure_routes(); }

  ~ObjectStoreService() { stop(); }

  void add_account(const std::string& access_key_id, const std::string& secret_key) {
    std::lock_guard<std::mutex> lk(mu_);
    accounts_[access_key_id] = secret_key;
  }

  /// Bind to an ephemeral loopback port and serve in a background thread.
  /// Returns the bound port.
  int start(const std::string& host = "127.0.0.1") {
    port_ = server_.bind_to_any_port(host);
    server_thread_ = std::thread([this, host] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    log_info("objectstore", strcat("listening on ", host, ":", port_));
    return port_;
  }

  void stop() {
    if (server_thread_.joinable()) {
      server_.stop();
      server_thread_.join();
    }
  }

  int port() const { return port_; }

  std::string url(const std::string& bucket) const {
    return strcat("http://127.0.0.1:", port_, "/", bucket);
  }

  /// Fault hook: the next `count` requests of `method` fail with 503, which
  /// connectors surface as Unreachable.
  void fail_next(const std::string& method, int count) {
    std::lock_guard<std::mutex> lk(mu_);
    fail_counts_[method] = count;
  }

  /// Direct (bypass-HTTP) accessors for test assertions.
  std::optional<std::string> peek(const std::string& bucket, const std::string& key) {
    std::lock_guard<std::mutex> lk(mu_);
    auto b = objects_.find(bucket);
    if (b == objects_.end()) return std::nullopt;
    auto k = b->second.find(key);
    if (k == b->second.end()) return std::nullopt;
    return k->second;
  }

  void put_direct(const std::string& bucket, const std::string& key, std::string data) {
    std::lock_guard<std::mutex> lk(mu_);
    objects_[bucket][key] = std::move(data);
  }

 private:
  bool fault_fired(const std::string& method, httplib::Response& res) {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = fail_counts_.find(method);
    if (it != fail_counts_.end() && it->second > 0) {
      --it->second;
      res.status = 503;
      return true;
    }
    return false;
  }

  bool authorized(const httplib::Request& req, const std::string& method) {
    auto header = req.get_header_value("X-MFT-Access");
    auto pos = header.find(':');
    if (pos == std::string::npos) return false;
    std::string akid = header.substr(0, pos);
    std::string presented = header.substr(pos + 1);
    std::string secret;
    {
      std::lock_guard<std::mutex> lk(mu_);
      auto it = accounts_.find(akid);
      if (it == accounts_.end()) return false;
      secret = it->second;
    }
    std::string expected = hmac_sha256_hex(secret, strcat(method, "\n", req.path));
    return ct_equal(expected, presented);
  }

  void configure_routes() {
    server_.set_read_timeout(120, 0);
    server_.set_payload_max_length(1ull << 34);

    const std::string pattern = R"(/([^/]+)/(.+))";

    server_.Put(pattern, [this](const httplib::Request& req, httplib::Response& res,
                                const httplib::ContentReader& reader) {
      if (fault_fired("PUT", res)) {
        reader([](const char*, size_t) { return true; });
        return;
      }
      if (!authorized(req, "PUT")) {
        reader([](const char*, size_t) { return true; });
        res.status = 401;
        return;
      }
      std::string body;
      reader([&](const char* data, size_t n) {
        body.append(data, n);
        return true;
      });
      std::string etag = Sha256::hex(body);
      {
        std::lock_guard<std::mutex> lk(mu_);
        objects_[req.matches[1]][req.matches[2]] = std::move(body);
        etags_[req.matches[1]][req.matches[2]] = etag;
      }
      res.status = 200;
      res.set_header("ETag", etag);
    });

    // httplib routes HEAD to Get handlers and suppresses the body itself.
    server_.Get(pattern, [this](const httplib::Request& req, httplib::Response& res) {
      bool is_head = req.method == "HEAD";
      if (fault_fired(is_head ? "HEAD" : "GET", res)) return;
      if (!authorized(req, is_head ? "HEAD" : "GET")) {
        res.status = 401;
        return;
      }
      std::string data, etag;
      {
        std::lock_guard<std::mutex> lk(mu_);
        auto b = objects_.find(req.matches[1]);
        if (b == objects_.end() || !b->second.count(req.matches[2])) {
          res.status = 404;
          return;
        }
        data = b->second[req.matches[2]];
        etag = etags_[req.matches[1]][req.matches[2]];
      }
      res.set_header("ETag", etag);
      if (is_head) {
        res.status = 200;
        res.set_header("Content-Length", strcat(data.size()));
        return;
      }
      // Leave the status untouched: httplib applies Range slicing itself
      // (206/416 with Content-Range) when the handler does not set one.
      res.set_content(data, "application/octet-stream");
    });

    server_.Delete(pattern, [this](const httplib::Request& req, httplib::Response& res) {
      if (!authorized(req, "DELETE")) {
        res.status = 401;
        return;
      }
      std::lock_guard<std::mutex> lk(mu_);
      auto b = objects_.find(req.matches[1]);
      if (b != objects_.end()) {
        b->second.erase(req.matches[2]);
        etags_[req.matches[1]].erase(req.matches[2]);
      }
      res.status = 204;
    });
  }

  httplib::Server server_;
  std::thread server_thread_;
  int port_ = 0;
  std::mutex mu_;
  std::map<std::string, std::string> accounts_;
  std::map<std::string, int> fail_counts_;
  std::map<std::string, std::map<std::string, std::string>> objects_;
  std::map<std::string, std::map<std::string, std::string>> etags_;
};

}  // namespace mft
