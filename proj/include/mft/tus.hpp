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

#include <atomic>
#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <json.hpp>

#include "mft/connector.hpp"
#include "mft/core.hpp"
#include "mft/crypto.hpp"
#include "mft/fsio.hpp"
#include "mft/logging.hpp"
#include "mft/model.hpp"
#include "mft/token.hpp"

namespace mft::tus {

// Resumable agent-to-agent byte channel: a TUS-core subset over HTTP.
//   POST  /tus          create (idempotent per transfer-id + path)
//   HEAD  /tus/{id}     offset query
//   PATCH /tus/{id}     sequential append, finalizes at declared length
// Every request requires "Tus-Resumable: 1.0.0" (else 412 + Tus-Version)
// and a scoped bearer token. Completed uploads expose the committed digest
// via the X-MFT-Sha256 response header.

constexpr const char* kTusVersion = "1.0.0";
constexpr const char* kPatchContentType = "application/offset+octet-stream";
constexpr uint64_t kDefaultMaxUploadBytes = 16ull * 1024 * 1024 * 1024;
constexpr int64_t kDefaultSessionTtlSeconds = 3600;
inline const std::string kEmptySha256Hex =
    "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

struct UploadSession {
  std::string upload_id;
  std::string transfer_id;
  std::string endpoint_id;
  std::string path;
  uint64_t declared_length = 0;
  uint64_t committed_offset = 0;
  std::optional<std::string> expected_sha256;
  bool completed = false;
  std::string committed_sha256;
  int64_t created_at = 0;
  std::atomic<int64_t> last_activity{0};

  std::unique_ptr<Sha256> rolling = std::make_unique<Sha256>();
  std::shared_ptr<Connector> connector;
  std::mutex mu;  // serializes offset check + append per session

  std::string staging_tag() const { return transfer_id; }
};

struct TusConfig {
  fs::path session_dir;  // durable session metadata
  ClusterSecret secret;
  int64_t skew_grace_s = kDefaultClockSkewGraceSeconds;
  uint64_t max_upload_bytes = kDefaultMaxUploadBytes;
  int64_t session_ttl_s = kDefaultSessionTtlSeconds;
  // Resolve a served endpoint id to a connector; nullptr when not served.
  std::function<std::shared_ptr<Connector>(const std::string&)> resolve_connector;
};

class TusService {
 public:
  explicit TusService(TusConfig config) : config_(std::move(config)) {
    mkdirs(config_.session_dir);
  }

  /// Rebuild sessions from durable metadata + staged bytes after a restart.
  /// The recovered offset is exactly the staged byte count.
  void recover() {
    std::error_code ec;
    for (const auto& entry : fs::directory_iterator(config_.session_dir, ec)) {
      if (entry.path().extension() != ".json") continue;
      auto content = read_file(entry.path());
      if (!content) continue;
      json meta;
      try {
        meta = json::parse(*content);
      } catch (...) {
        continue;
      }
      auto s = std::make_shared<UploadSession>();
      s->upload_id = meta.value("upload_id", "");
      s->transfer_id = meta.value("transfer_id", "");
      s->endpoint_id = meta.value("endpoint_id", "");
      s->path = meta.value("path", "");
      s->declared_length = meta.value("declared_length", 0ull);
      if (meta.contains("expected_sha256")) s->expected_sha256 = meta["expected_sha256"];
      s->completed = meta.value("completed", false);
      s->committed_sha256 = meta.value("committed_sha256", "");
      s->created_at = meta.value("created_at", int64_t{0});
      s->last_activity.store(unix_seconds());
      s->connector = config_.resolve_connector(s->endpoint_id);
      if (!s->connector) continue;
      if (!s->completed) {
        auto staged = s->connector->staged_size(s->path, s->staging_tag());
        s->committed_offset = staged.ok() ? staged.value() : 0;
        if (s->committed_offset > 0) {
          auto reader = s->connector->open_staged(s->path, s->staging_tag());
          if (reader.ok()) {
            char buf[64 * 1024];
            while (true) {
              auto got = reader.value()->read(buf, sizeof(buf));
              if (!got.ok() || got.value() == 0) break;
              s->rolling->update(buf, got.value());
            }
          }
        }
      } else {
        s->committed_offset = s->declared_length;
      }
      std::lock_guard<std::mutex> lk(registry_mu_);
      by_key_[session_key(s->transfer_id, s->path)] = s->upload_id;
      sessions_[s->upload_id] = std::move(s);
    }
    log_info("tus", strcat("recovered ", sessions_.size(), " upload session(s)"));
  }

  /// Register routes on the shared agent listener.
  void attach(httplib::Server& server) {
    server.Post("/tus", [this](const httplib::Request& req, httplib::Response& res) {
      handle_create(req, res);
    });
    server.Post("/tus/", [this](const httplib::Request& req, httplib::Response& res) {
      handle_create(req, res);
    });

    // Anything under /tus/ outside the protocol subset gets 412.
    auto reject = [](const httplib::Request&, httplib::Response& res) {
      res.status = 412;
      res.set_header("Tus-Version", kTusVersion);
    };

    const std::string id_pattern = R"(/tus/([0-9a-f]{32}))";
    // httplib dispatches HEAD requests through Get handlers.
    server.Get(id_pattern, [this, reject](const httplib::Request& req, httplib::Response& res) {
      if (req.method == "HEAD") {
        handle_head(req, res);
      } else {
        reject(req, res);
      }
    });
    server.Patch(id_pattern, [this](const httplib::Request& req, httplib::Response& res,
                                    const httplib::ContentReader& reader) {
      handle_patch(req, res, reader);
    });

    server.Get(R"(/tus(/.*)?)", reject);
    server.Put(R"(/tus(/.*)?)", reject);
    server.Delete(R"(/tus(/.*)?)", reject);
    server.Options(R"(/tus(/.*)?)", reject);
  }

  /// Drop sessions idle past the ttl, removing their staging. Returns the
  /// number collected.
  int gc(int64_t now_s) {
    std::vector<std::shared_ptr<UploadSession>> expired;
    {
      std::lock_guard<std::mutex> lk(registry_mu_);
      for (auto it = sessions_.begin(); it != sessions_.end();) {
        if (now_s - it->second->last_activity.load() > config_.session_ttl_s) {
          expired.push_back(it->second);
          by_key_.erase(session_key(it->second->transfer_id, it->second->path));
          it = sessions_.erase(it);
        } else {
          ++it;
        }
      }
    }
    for (auto& s : expired) {
      std::lock_guard<std::mutex> lk(s->mu);
      if (!s->completed && s->connector) s->connector->abort_staged(s->path, s->staging_tag());
      remove_quiet(meta_path(s->upload_id));
    }
    return static_cast<int>(expired.size());
  }

  /// Best-effort cancel hook: drop every session of one transfer.
  void abort_transfer(const std::string& transfer_id) {
    std::vector<std::shared_ptr<UploadSession>> victims;
    {
      std::lock_guard<std::mutex> lk(registry_mu_);
      for (auto it = sessions_.begin(); it != sessions_.end();) {
        if (it->second->transfer_id == transfer_id) {
          victims.push_back(it->second);
          by_key_.erase(session_key(it->second->transfer_id, it->second->path));
          it = sessions_.erase(it);
        } else {
          ++it;
        }
      }
    }
    for (auto& s : victims) {
      std::lock_guard<std::mutex> lk(s->mu);
      if (!s->completed && s->connector) s->connector->abort_staged(s->path, s->staging_tag());
      remove_quiet(meta_path(s->upload_id));
    }
  }

  size_t session_count() {
    std::lock_guard<std::mutex> lk(registry_mu_);
    return sessions_.size();
  }

  std::shared_ptr<UploadSession> find_session(const std::string& upload_id) {
    std::lock_guard<std::mutex> lk(registry_mu_);
    auto it = sessions_.find(upload_id);
    return it == sessions_.end() ? nullptr : it->second;
  }

 private:
  static std::string session_key(const std::string& transfer_id, const std::string& path) {
    return strcat(transfer_id, "|", path);
  }

  fs::path meta_path(const std::string& upload_id) const {
    return config_.session_dir / strcat(upload_id, ".json");
  }

  void persist(const UploadSession& s) {
    json meta{{"upload_id", s.upload_id},
              {"transfer_id", s.transfer_id},
              {"endpoint_id", s.endpoint_id},
              {"path", s.path},
              {"declared_length", s.declared_length},
              {"completed", s.completed},
              {"created_at", s.created_at}};
    if (s.expected_sha256) meta["expected_sha256"] = *s.expected_sha256;
    if (!s.committed_sha256.empty()) meta["committed_sha256"] = s.committed_sha256;
    write_file_atomic(meta_path(s.upload_id), meta.dump());
  }

  static void set_tus_headers(httplib::Response& res) {
    res.set_header("Tus-Resumable", kTusVersion);
  }

  static bool precondition_ok(const httplib::Request& req, httplib::Response& res) {
    if (req.get_header_value("Tus-Resumable") != kTusVersion) {
      res.status = 412;
      res.set_header("Tus-Version", kTusVersion);
      return false;
    }
    set_tus_headers(res);
    return true;
  }

  static std::string bearer_token(const httplib::Request& req) {
    auto auth = req.get_header_value("Authorization");
    if (starts_with(auth, "Bearer ")) return auth.substr(7);
    return "";
  }

  static void drain(const httplib::ContentReader& reader) {
    reader([](const char*, size_t) { return true; });
  }

  /// Verify a token against an expected verb/path; returns false after
  /// filling the 401 response.
  bool check_token(const httplib::Request& req, httplib::Response& res, TokenVerb verb,
                   const std::string& endpoint_id, const std::string& path) {
    auto v = verify_token(config_.secret, bearer_token(req), verb, endpoint_id, path,
                          unix_seconds(), config_.skew_grace_s);
    if (!v.ok()) {
      res.status = 401;
      res.set_content(json{{"code", v.error().code}, {"message", v.error().message}}.dump(),
                      "application/json");
      return false;
    }
    return true;
  }

  static std::map<std::string, std::string> parse_upload_metadata(const std::string& header) {
    std::map<std::string, std::string> out;
    for (auto& pair : split(header, ',')) {
      size_t begin = pair.find_first_not_of(' ');
      if (begin == std::string::npos) continue;
      auto item = pair.substr(begin);
      auto space = item.find(' ');
      if (space == std::string::npos) {
        out[item] = "";
        continue;
      }
      auto key = item.substr(0, space);
      auto value = b64_decode(item.substr(space + 1));
      if (value) out[key] = *value;
    }
    return out;
  }

  void handle_create(const httplib::Request& req, httplib::Response& res) {
    if (!precondition_ok(req, res)) return;

    auto length_header = req.get_header_value("Upload-Length");
    if (length_header.empty()) {
      res.status = 400;
      res.set_content(json{{"code", "MissingLength"}}.dump(), "application/json");
      return;
    }
    uint64_t declared = 0;
    try {
      declared = std::stoull(length_header);
    } catch (...) {
      res.status = 400;
      res.set_content(json{{"code", "MissingLength"}}.dump(), "application/json");
      return;
    }
    if (declared > config_.max_upload_bytes) {
      res.status = 413;
      res.set_content(json{{"code", "LengthOverLimit"}}.dump(), "application/json");
      return;
    }

    auto meta = parse_upload_metadata(req.get_header_value("Upload-Metadata"));
    auto transfer_id = meta.count("transfer-id") ? meta["transfer-id"] : "";
    auto path = meta.count("path") ? meta["path"] : "";
    std::optional<std::string> expected;
    if (meta.count("sha256")) expected = meta["sha256"];
    if (transfer_id.empty() || path.empty()) {
      res.status = 400;
      res.set_content(json{{"code", "MissingMetadata"}}.dump(), "application/json");
      return;
    }

    // The create token pins the destination endpoint and path.
    auto parsed = parse_token(config_.secret, bearer_token(req), unix_seconds(),
                              config_.skew_grace_s);
    if (!parsed.ok() || parsed.value().verb != TokenVerb::DataCreate ||
        parsed.value().path != path) {
      res.status = 401;
      res.set_content(json{{"code", "Unauthorized"}}.dump(), "application/json");
      return;
    }
    auto endpoint_id = parsed.value().endpoint_id;
    auto connector = config_.resolve_connector(endpoint_id);
    if (!connector) {
      res.status = 401;
      res.set_content(json{{"code", "UnknownEndpoint"}}.dump(), "application/json");
      return;
    }

    std::shared_ptr<UploadSession> session;
    {
      std::lock_guard<std::mutex> lk(registry_mu_);
      auto key = session_key(transfer_id, path);
      auto it = by_key_.find(key);
      if (it != by_key_.end()) session = sessions_[it->second];
    }

    if (session) {
      std::lock_guard<std::mutex> lk(session->mu);
      bool param_change = session->declared_length != declared ||
                          session->expected_sha256 != expected;
      if (!param_change) {
        session->last_activity.store(unix_seconds());
        res.status = 201;
        res.set_header("Location", strcat("/tus/", session->upload_id));
        if (session->completed) res.set_header("X-MFT-Sha256", session->committed_sha256);
        return;
      }
      // Source changed between attempts; restart the session with the new
      // parameters.
      session->connector->abort_staged(session->path, session->staging_tag());
      session->declared_length = declared;
      session->expected_sha256 = expected;
      session->committed_offset = 0;
      session->completed = false;
      session->committed_sha256.clear();
      session->rolling = std::make_unique<Sha256>();
      session->last_activity.store(unix_seconds());
      if (declared == 0) {
        auto st = finalize_locked(*session);
        if (!st.ok()) {
          res.status = 500;
          res.set_content(json{{"code", st.error().code}}.dump(), "application/json");
          return;
        }
      }
      persist(*session);
      res.status = 201;
      res.set_header("Location", strcat("/tus/", session->upload_id));
      if (session->completed) res.set_header("X-MFT-Sha256", session->committed_sha256);
      return;
    }

    session = std::make_shared<UploadSession>();
    session->upload_id = rand_id();
    session->transfer_id = transfer_id;
    session->endpoint_id = endpoint_id;
    session->path = path;
    session->declared_length = declared;
    session->expected_sha256 = expected;
    session->created_at = unix_seconds();
    session->last_activity.store(session->created_at);
    session->connector = connector;

    if (declared == 0) {
      std::lock_guard<std::mutex> lk(session->mu);
      auto st = finalize_locked(*session);
      if (!st.ok()) {
        res.status = st.error().code == "DigestMismatch" ? 412 : 500;
        res.set_content(json{{"code", st.error().code}}.dump(), "application/json");
        return;
      }
    }

    {
      std::lock_guard<std::mutex> lk(registry_mu_);
      by_key_[session_key(transfer_id, path)] = session->upload_id;
      sessions_[session->upload_id] = session;
    }
    persist(*session);
    log_info("tus", strcat("created upload ", session->upload_id, " transfer=", transfer_id,
                           " path=", path, " length=", declared));
    res.status = 201;
    res.set_header("Location", strcat("/tus/", session->upload_id));
    if (session->completed) res.set_header("X-MFT-Sha256", session->committed_sha256);
  }

  void handle_head(const httplib::Request& req, httplib::Response& res) {
    if (!precondition_ok(req, res)) return;
    auto session = find_session(req.matches[1]);
    if (!session) {
      res.status = 404;
      return;
    }
    if (!check_token(req, res, TokenVerb::DataPatch, session->endpoint_id, session->path)) return;
    std::lock_guard<std::mutex> lk(session->mu);
    session->last_activity.store(unix_seconds());
    res.status = 200;
    res.set_header("Upload-Offset", strcat(session->committed_offset));
    res.set_header("Upload-Length", strcat(session->declared_length));
    res.set_header("Cache-Control", "no-store");
    if (session->completed) res.set_header("X-MFT-Sha256", session->committed_sha256);
  }

  void handle_patch(const httplib::Request& req, httplib::Response& res,
                    const httplib::ContentReader& reader) {
    if (!precondition_ok(req, res)) {
      drain(reader);
      return;
    }
    auto session = find_session(req.matches[1]);
    if (!session) {
      drain(reader);
      res.status = 404;
      return;
    }
    if (req.get_header_value("Content-Type") != kPatchContentType) {
      drain(reader);
      res.status = 400;
      res.set_content(json{{"code", "BadContentType"}}.dump(), "application/json");
      return;
    }
    if (!check_token(req, res, TokenVerb::DataPatch, session->endpoint_id, session->path)) {
      drain(reader);
      return;
    }
    uint64_t claimed = 0;
    try {
      claimed = std::stoull(req.get_header_value("Upload-Offset"));
    } catch (...) {
      drain(reader);
      res.status = 400;
      res.set_content(json{{"code", "MissingOffset"}}.dump(), "application/json");
      return;
    }

    std::lock_guard<std::mutex> lk(session->mu);
    session->last_activity.store(unix_seconds());

    if (session->completed || claimed != session->committed_offset) {
      drain(reader);
      res.status = 409;
      res.set_header("Upload-Offset", strcat(session->committed_offset));
      return;
    }

    auto sink = session->connector->write_at(session->path, session->committed_offset,
                                             session->staging_tag());
    if (!sink.ok()) {
      drain(reader);
      res.status = 500;
      res.set_content(json{{"code", sink.error().code}}.dump(), "application/json");
      return;
    }

    // Append slices as they arrive; every slice written is durable payload,
    // so the committed offset advances with the staging file.
    bool write_failed = false;
    bool overflow = false;
    reader([&](const char* data, size_t n) {
      if (session->committed_offset + n > session->declared_length) {
        overflow = true;
        return false;
      }
      auto st = sink.value()->write(data, n);
      if (!st.ok()) {
        write_failed = true;
        return false;
      }
      session->rolling->update(data, n);
      session->committed_offset += n;
      return true;
    });
    auto close_st = sink.value()->close(/*durable=*/true);

    if (overflow) {
      res.status = 400;
      res.set_content(json{{"code", "LengthOverLimit"}}.dump(), "application/json");
      return;
    }
    if (write_failed || !close_st.ok()) {
      res.status = 500;
      res.set_content(json{{"code", "StagingWriteFailed"}}.dump(), "application/json");
      return;
    }

    if (session->committed_offset == session->declared_length) {
      auto st = finalize_locked(*session);
      if (!st.ok()) {
        if (st.error().code == "DigestMismatch") {
          // Discard and reset so the controller's retry can reuse the session.
          res.status = 412;
          res.set_header("Upload-Offset", "0");
          res.set_content(json{{"code", "DigestMismatch"}}.dump(), "application/json");
          persist(*session);
          return;
        }
        res.status = 500;
        res.set_content(json{{"code", st.error().code}}.dump(), "application/json");
        return;
      }
      persist(*session);
      res.set_header("X-MFT-Sha256", session->committed_sha256);
    }

    res.status = 204;
    res.set_header("Upload-Offset", strcat(session->committed_offset));
  }

  /// Finalize with the session mutex held: check the expected digest, then
  /// commit through the destination connector.
  Status finalize_locked(UploadSession& s) {
    std::string digest = s.committed_offset == 0 ? kEmptySha256Hex : s.rolling->finish_hex();
    if (s.expected_sha256 && *s.expected_sha256 != digest) {
      s.connector->abort_staged(s.path, s.staging_tag());
      s.committed_offset = 0;
      s.rolling = std::make_unique<Sha256>();
      return make_error("DigestMismatch",
                        strcat("received digest ", digest, " != expected ", *s.expected_sha256));
    }
    if (s.committed_offset == 0) {
      // Ensure an (empty) staging area exists so commit has something to
      // promote.
      auto sink = s.connector->write_at(s.path, 0, s.staging_tag());
      if (!sink.ok()) return sink.error();
      auto st = sink.value()->close(true);
      if (!st.ok()) return st;
    }
    auto committed = s.connector->commit(s.path, digest, s.staging_tag());
    if (!committed.ok()) return committed.error();
    s.completed = true;
    s.committed_sha256 = digest;
    log_info("tus", strcat("upload ", s.upload_id, " committed ", s.declared_length,
                           " byte(s) to ", s.path, " sha256=", digest));
    return ok_status();
  }

  TusConfig config_;
  std::mutex registry_mu_;
  std::map<std::string, std::shared_ptr<UploadSession>> sessions_;
  std::map<std::string, std::string> by_key_;
};

// ---------------------------------------------------------------------------
// Client side
// ---------------------------------------------------------------------------

struct PushOutcome {
  std::string source_sha256;
  std::string destination_sha256;
  uint64_t bytes_sent = 0;  // payload bytes acknowledged, including resends
};

using ProgressFn = std::function<void(uint64_t bytes_confirmed)>;

struct TusClientOptions {
  size_t chunk_bytes = kDefaultChunkBytes;
  int channel_retries = 5;  // consecutive no-progress failures per attempt
  ProgressFn on_progress;
  std::atomic<bool>* cancel = nullptr;
  int64_t progress_interval_ms = 1000;
};

namespace detail {

struct UrlParts {
  std::string origin;
  std::string path;
};

inline Result<UrlParts> split_url(const std::string& url) {
  auto parsed = mft::detail::parse_http_url(url);
  if (!parsed.ok()) return parsed.error();
  return UrlParts{parsed.value().origin, parsed.value().path};
}

}  // namespace detail

/// TUS creation (idempotent server-side). Returns the absolute upload URL.
inline Result<std::string> create_upload(const std::string& data_channel_url,
                                         const std::string& create_token,
                                         const std::string& transfer_id, const std::string& path,
                                         uint64_t declared_length,
                                         const std::optional<std::string>& expected_sha256,
                                         int transport_retries = 5) {
  auto parts = detail::split_url(data_channel_url);
  if (!parts.ok()) return parts.error();

  httplib::Client client(parts.value().origin);
  client.set_connection_timeout(5, 0);
  client.set_read_timeout(60, 0);

  std::string metadata = strcat("transfer-id ", b64_encode(transfer_id), ",path ",
                                b64_encode(path));
  if (expected_sha256) metadata += strcat(",sha256 ", b64_encode(*expected_sha256));

  httplib::Headers headers{{"Tus-Resumable", kTusVersion},
                           {"Upload-Length", strcat(declared_length)},
                           {"Upload-Metadata", metadata},
                           {"Authorization", strcat("Bearer ", create_token)}};

  int backoff_ms = 100;
  for (int attempt = 0;; ++attempt) {
    auto res = client.Post(strcat(parts.value().path, "/tus"), headers, "", "text/plain");
    if (res && res->status == 201) {
      auto location = res->get_header_value("Location");
      if (location.empty()) return make_error("RemoteRejected", "create returned no Location");
      if (starts_with(location, "http")) return location;
      return strcat(parts.value().origin, location);
    }
    if (res) {
      return make_error("RemoteRejected",
                        strcat("upload creation rejected with status ", res->status));
    }
    if (attempt + 1 >= transport_retries) {
      return make_error("RetriesExhausted", "data channel unreachable for create", true);
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(backoff_ms));
    backoff_ms = std::min(backoff_ms * 2, 2000);
  }
}

/// Stream a source object to a remote upload session: HEAD to learn the
/// remote offset, then sequential PATCHes; on failure re-HEAD and continue.
/// Returns the source digest (over confirmed bytes) and the destination's
/// committed digest.
inline Result<PushOutcome> push_file(Connector& source, const std::string& source_path,
                                     const std::string& upload_url,
                                     const std::string& patch_token,
                                     const TusClientOptions& options = {}) {
  auto parts = detail::split_url(upload_url);
  if (!parts.ok()) return parts.error();

  auto source_stat = source.stat(source_path);
  if (!source_stat.ok() || !source_stat.value().exists) {
    return make_error("SourceVanished", strcat("source object missing: ", source_path));
  }
  const uint64_t total = source_stat.value().size_bytes.value_or(0);

  httplib::Client client(parts.value().origin);
  client.set_connection_timeout(5, 0);
  client.set_read_timeout(120, 0);
  client.set_keep_alive(true);

  httplib::Headers base_headers{{"Tus-Resumable", kTusVersion},
                                {"Authorization", strcat("Bearer ", patch_token)}};

  PushOutcome outcome;
  uint64_t confirmed = 0;   // remote committed offset
  Sha256 hash;              // covers exactly [0, confirmed) as acknowledged
  std::unique_ptr<ByteReader> reader;
  uint64_t reader_pos = 0;
  int failures = 0;
  int64_t last_progress_ms = 0;

  auto head_offset = [&]() -> Result<std::pair<uint64_t, std::string>> {
    auto res = client.Head(parts.value().path, base_headers);
    if (!res) return make_error("Unreachable", "HEAD failed", true);
    if (res->status != 200) {
      return make_error("RemoteRejected", strcat("HEAD returned ", res->status));
    }
    uint64_t off = std::stoull(res->get_header_value("Upload-Offset"));
    return std::make_pair(off, res->get_header_value("X-MFT-Sha256"));
  };

  // Resync local position to the server's committed offset. The server can
  // be ahead of the last acknowledged offset (a prefix of an in-flight chunk
  // landed durably), behind it (412 reset), or equal; rebuilding the prefix
  // hash from the source covers every case.
  auto resync = [&](uint64_t server_offset) -> Status {
    if (server_offset > total) {
      return make_error("RemoteRejected",
                        strcat("server offset ", server_offset, " beyond length ", total));
    }
    hash.reset();
    uint64_t hashed = 0;
    if (server_offset > 0) {
      auto prefix = source.read_range(source_path, 0, server_offset);
      if (!prefix.ok()) return make_error("SourceVanished", prefix.error().message);
      char buf[256 * 1024];
      while (hashed < server_offset) {
        auto got = prefix.value()->read(buf, sizeof(buf));
        if (!got.ok() || got.value() == 0) {
          return make_error("SourceVanished", "source shrank during transfer");
        }
        hash.update(buf, got.value());
        hashed += got.value();
      }
    }
    confirmed = server_offset;
    reader.reset();
    reader_pos = server_offset;
    return ok_status();
  };

  auto initial = head_offset();
  if (!initial.ok()) return initial.error();
  {
    auto st = resync(initial.value().first);
    if (!st.ok()) return st.error();
  }
  outcome.destination_sha256 = initial.value().second;

  std::string chunk;
  while (confirmed < total) {
    if (options.cancel && options.cancel->load()) {
      return make_error("Canceled", "push canceled");
    }
    if (!reader) {
      auto r = source.read_range(source_path, reader_pos, total - reader_pos);
      if (!r.ok()) return make_error("SourceVanished", r.error().message);
      reader = r.take();
    }
    size_t want = static_cast<size_t>(
        std::min<uint64_t>(options.chunk_bytes ? options.chunk_bytes : kDefaultChunkBytes,
                           total - confirmed));
    chunk.resize(want);
    size_t filled = 0;
    while (filled < want) {
      auto got = reader->read(chunk.data() + filled, want - filled);
      if (!got.ok()) return make_error("SourceVanished", got.error().message);
      if (got.value() == 0) return make_error("SourceVanished", "source shrank during transfer");
      filled += got.value();
    }
    reader_pos += want;

    httplib::Headers headers = base_headers;
    headers.emplace("Upload-Offset", strcat(confirmed));
    auto res = client.Patch(parts.value().path, headers, chunk, kPatchContentType);

    if (res && res->status == 204) {
      uint64_t new_offset = std::stoull(res->get_header_value("Upload-Offset"));
      if (new_offset != confirmed + want) {
        auto st = resync(new_offset);
        if (!st.ok()) return st.error();
        continue;
      }
      hash.update(chunk.data(), want);
      confirmed = new_offset;
      outcome.bytes_sent += want;
      failures = 0;
      if (!res->get_header_value("X-MFT-Sha256").empty()) {
        outcome.destination_sha256 = res->get_header_value("X-MFT-Sha256");
      }
      if (options.on_progress) {
        int64_t now_ms = steady_millis();
        if (now_ms - last_progress_ms >= options.progress_interval_ms || confirmed == total) {
          last_progress_ms = now_ms;
          options.on_progress(confirmed);
        }
      }
      continue;
    }

    if (res && res->status == 409) {
      uint64_t server_offset = std::stoull(res->get_header_value("Upload-Offset"));
      outcome.bytes_sent += want;  // the body crossed the wire even if refused
      auto st = resync(server_offset);
      if (!st.ok()) return st.error();
      if (++failures > options.channel_retries) {
        return make_error("RetriesExhausted", "offset conflicts kept recurring", true);
      }
      continue;
    }

    if (res && res->status == 412) {
      return make_error("RemoteRejected", "destination digest mismatch (session reset)", true);
    }
    if (res) {
      return make_error("RemoteRejected", strcat("PATCH returned ", res->status));
    }

    // Transport failure: some prefix of the chunk may have landed. Re-HEAD
    // and continue from the server's durable offset.
    if (++failures > options.channel_retries) {
      return make_error("RetriesExhausted", "data channel kept failing", true);
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(std::min(100 * (1 << failures), 2000)));
    uint64_t sent_guess = outcome.bytes_sent + want;
    auto head = head_offset();
    if (!head.ok()) continue;  // next loop iteration retries
    outcome.bytes_sent = std::max(outcome.bytes_sent, std::min(sent_guess, head.value().first));
    auto st = resync(head.value().first);
    if (!st.ok()) return st.error();
  }

  outcome.source_sha256 = total == 0 ? kEmptySha256Hex : hash.finish_hex();

  if (outcome.destination_sha256.empty()) {
    auto head = head_offset();
    if (head.ok()) outcome.destination_sha256 = head.value().second;
  }
  if (options.on_progress) options.on_progress(confirmed);
  return outcome;
}

}  // namespace mft::tus
