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

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mft/core.hpp"
#include "mft/crypto.hpp"
#include "mft/fsio.hpp"

namespace mft {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Storage endpoint metadata
// ---------------------------------------------------------------------------

enum class EndpointKind { LocalPosix, ObjectStore, Http };

inline const char* to_string(EndpointKind k) {
  switch (k) {
    case EndpointKind::LocalPosix: return "LOCAL_POSIX";
    case EndpointKind::ObjectStore: return "OBJECT_STORE";
    case EndpointKind::Http: return "HTTP";
  }
  return "?";
}

inline std::optional<EndpointKind> endpoint_kind_from_string(std::string_view s) {
  if (s == "LOCAL_POSIX") return EndpointKind::LocalPosix;
  if (s == "OBJECT_STORE") return EndpointKind::ObjectStore;
  if (s == "HTTP") return EndpointKind::Http;
  return std::nullopt;
}

enum class Capability { RandomWrite, ByteRangeRead, ResumableWrite, List };

inline const char* to_string(Capability c) {
  switch (c) {
    case Capability::RandomWrite: return "RANDOM_WRITE";
    case Capability::ByteRangeRead: return "BYTE_RANGE_READ";
    case Capability::ResumableWrite: return "RESUMABLE_WRITE";
    case Capability::List: return "LIST";
  }
  return "?";
}

inline std::optional<Capability> capability_from_string(std::string_view s) {
  if (s == "RANDOM_WRITE") return Capability::RandomWrite;
  if (s == "BYTE_RANGE_READ") return Capability::ByteRangeRead;
  if (s == "RESUMABLE_WRITE") return Capability::ResumableWrite;
  if (s == "LIST") return Capability::List;
  return std::nullopt;
}

struct StorageEndpoint {
  std::string endpoint_id;
  EndpointKind kind = EndpointKind::LocalPosix;
  std::string base_locator;  // dir path | "http://host:port/bucket" | base URL
  std::set<Capability> capabilities;
  std::optional<std::string> credential_ref;
  std::vector<std::string> agent_affinity;

  bool has(Capability c) const { return capabilities.count(c) > 0; }
};

/// Default capability set per kind; LOCAL_POSIX is forced to the full set.
inline std::set<Capability> default_capabilities(EndpointKind kind) {
  switch (kind) {
    case EndpointKind::LocalPosix:
      return {Capability::RandomWrite, Capability::ByteRangeRead, Capability::ResumableWrite,
              Capability::List};
    case EndpointKind::ObjectStore:
      return {Capability::RandomWrite, Capability::ByteRangeRead, Capability::ResumableWrite};
    case EndpointKind::Http:
      return {Capability::ByteRangeRead};
  }
  return {};
}

inline Status validate_endpoint(const StorageEndpoint& e) {
  if (e.endpoint_id.empty()) return make_error("BadBaseLocator", "endpoint_id must be non-empty");
  if (e.base_locator.empty()) return make_error("BadBaseLocator", "base_locator must be non-empty");
  if (e.kind == EndpointKind::LocalPosix) {
    for (auto c : {Capability::RandomWrite, Capability::ByteRangeRead, Capability::ResumableWrite,
                   Capability::List}) {
      if (!e.has(c)) {
        return make_error("BadBaseLocator",
                          strcat("LOCAL_POSIX endpoints must advertise ", to_string(c)));
      }
    }
  }
  if (e.kind == EndpointKind::Http && e.has(Capability::RandomWrite)) {
    return make_error("BadBaseLocator", "HTTP endpoints cannot advertise RANDOM_WRITE");
  }
  return ok_status();
}

inline nlohmann::json to_json(const StorageEndpoint& e) {
  nlohmann::json caps = nlohmann::json::array();
  for (auto c : e.capabilities) caps.push_back(to_string(c));
  nlohmann::json j{{"endpoint_id", e.endpoint_id},
                   {"kind", to_string(e.kind)},
                   {"base_locator", e.base_locator},
                   {"capabilities", std::move(caps)}};
  if (e.credential_ref) j["credential_ref"] = *e.credential_ref;
  if (!e.agent_affinity.empty()) j["agent_affinity"] = e.agent_affinity;
  return j;
}

inline Result<StorageEndpoint> storage_endpoint_from_json(const nlohmann::json& j) {
  StorageEndpoint e;
  e.endpoint_id = j.value("endpoint_id", "");
  auto kind = endpoint_kind_from_string(j.value("kind", ""));
  if (!kind) return make_error("UnknownKind", strcat("unknown endpoint kind: ", j.value("kind", "")));
  e.kind = *kind;
  e.base_locator = j.value("base_locator", "");
  if (j.contains("capabilities")) {
    for (const auto& c : j["capabilities"]) {
      auto cap = capability_from_string(c.get<std::string>());
      if (!cap) return make_error("BadBaseLocator", strcat("unknown capability: ", c.get<std::string>()));
      e.capabilities.insert(*cap);
    }
  } else {
    e.capabilities = default_capabilities(e.kind);
  }
  if (j.contains("credential_ref") && !j["credential_ref"].is_null()) {
    e.credential_ref = j["credential_ref"].get<std::string>();
  }
  for (const auto& a : j.value("agent_affinity", nlohmann::json::array())) {
    e.agent_affinity.push_back(a.get<std::string>());
  }
  auto st = validate_endpoint(e);
  if (!st.ok()) return st.error();
  return e;
}

// ---------------------------------------------------------------------------
// Credentials (plaintext payloads as resolved by agents)
// ---------------------------------------------------------------------------

enum class CredentialKind { AccessKeyPair, BearerToken, None };

inline const char* to_string(CredentialKind k) {
  switch (k) {
    case CredentialKind::AccessKeyPair: return "ACCESS_KEY_PAIR";
    case CredentialKind::BearerToken: return "BEARER_TOKEN";
    case CredentialKind::None: return "NONE";
  }
  return "?";
}

inline std::optional<CredentialKind> credential_kind_from_string(std::string_view s) {
  if (s == "ACCESS_KEY_PAIR") return CredentialKind::AccessKeyPair;
  if (s == "BEARER_TOKEN") return CredentialKind::BearerToken;
  if (s == "NONE") return CredentialKind::None;
  return std::nullopt;
}

struct CredentialPayload {
  CredentialKind kind = CredentialKind::None;
  std::string access_key_id;
  std::string secret_key;
  std::string token;

  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", to_string(kind)}};
    if (kind == CredentialKind::AccessKeyPair) {
      j["access_key_id"] = access_key_id;
      j["secret_key"] = secret_key;
    } else if (kind == CredentialKind::BearerToken) {
      j["token"] = token;
    }
    return j;
  }

  static Result<CredentialPayload> from_json(const nlohmann::json& j) {
    CredentialPayload p;
    auto kind = credential_kind_from_string(j.value("kind", ""));
    if (!kind) return make_error("UnknownKind", "unknown credential kind");
    p.kind = *kind;
    p.access_key_id = j.value("access_key_id", "");
    p.secret_key = j.value("secret_key", "");
    p.token = j.value("token", "");
    return p;
  }
};

// ---------------------------------------------------------------------------
// Connector interface
// ---------------------------------------------------------------------------

struct ObjectStat {
  bool exists = false;
  std::optional<uint64_t> size_bytes;
  std::optional<std::string> etag_or_digest;
};

/// Pull-style byte stream; read() fills the buffer and returns the count,
/// 0 at end of stream.
class ByteReader {
 public:
  virtual ~ByteReader() = default;
  virtual Result<size_t> read(char* buf, size_t cap) = 0;
};

/// Staged byte sink returned by write_at. close(durable) flushes (and
/// fsyncs for durable staging) before the caller acknowledges anything.
class WriteSink {
 public:
  virtual ~WriteSink() = default;
  virtual Status write(const char* data, size_t n) = 0;
  virtual Status close(bool durable) = 0;
};

/// Uniform storage adapter over one (StorageEndpoint, credential) pair.
/// All operations are confined to the endpoint's base_locator subtree.
/// Staged data is invisible at `path` until commit; the staging tag keeps
/// concurrent transfers to distinct destinations from colliding.
class Connector {
 public:
  virtual ~Connector() = default;

  virtual const StorageEndpoint& endpoint() const = 0;

  virtual Result<ObjectStat> stat(const std::string& path) = 0;

  virtual Result<std::unique_ptr<ByteReader>> read_range(const std::string& path, uint64_t offset,
                                                         std::optional<uint64_t> length) = 0;

  virtual Result<std::unique_ptr<WriteSink>> write_at(const std::string& path, uint64_t offset,
                                                      const std::string& staging_tag) = 0;

  virtual Result<ObjectStat> commit(const std::string& path,
                                    const std::optional<std::string>& expected_sha256,
                                    const std::string& staging_tag) = 0;

  virtual Status abort_staged(const std::string& path, const std::string& staging_tag) = 0;

  /// Durable staged byte count for (path, tag); 0 when nothing is staged.
  virtual Result<uint64_t> staged_size(const std::string& path,
                                       const std::string& staging_tag) = 0;

  /// Read back staged bytes (used to rebuild rolling digests after restart).
  virtual Result<std::unique_ptr<ByteReader>> open_staged(const std::string& path,
                                                          const std::string& staging_tag) = 0;
};

// ---------------------------------------------------------------------------
// Shared reader/sink implementations
// ---------------------------------------------------------------------------

namespace detail {

class FileRangeReader : public ByteReader {
 public:
  FileRangeReader(const fs::path& path, uint64_t offset, std::optional<uint64_t> length)
      : in_(path, std::ios::binary) {
    if (!in_) {
      failed_ = true;
      return;
    }
    in_.seekg(static_cast<std::streamoff>(offset));
    remaining_ = length;
  }

  bool valid() const { return !failed_; }

  Result<size_t> read(char* buf, size_t cap) override {
    if (failed_) return make_error("Unreachable", "reader in failed state");
    if (remaining_ && *remaining_ == 0) return size_t{0};
    size_t want = cap;
    if (remaining_) want = static_cast<size_t>(std::min<uint64_t>(want, *remaining_));
    in_.read(buf, static_cast<std::streamsize>(want));
    auto got = static_cast<size_t>(in_.gcount());
    if (remaining_) *remaining_ -= got;
    return got;
  }

 private:
  std::ifstream in_;
  std::optional<uint64_t> remaining_;
  bool failed_ = false;
};

class FileSink : public WriteSink {
 public:
  ~FileSink() override { file_.close(); }

  Status open(const fs::path& path, bool truncate) { return file_.open(path, truncate); }

  Status write(const char* data, size_t n) override { return file_.write(data, n); }

  Status close(bool durable) override {
    if (durable) {
      auto st = file_.sync();
      if (!st.ok()) return st;
    }
    file_.close();
    return ok_status();
  }

 private:
  AppendFile file_;
};

inline Result<std::string> hash_staged_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return make_error("NoStagedData", strcat("no staged data at ", path.string()));
  Sha256 h;
  char buf[64 * 1024];
  while (in) {
    in.read(buf, sizeof(buf));
    h.update(buf, static_cast<size_t>(in.gcount()));
  }
  return h.finish_hex();
}

// Split "http://host:port/some/prefix" into client base and path prefix.
struct ParsedUrl {
  std::string origin;  // scheme://host:port
  std::string path;    // leading-slash prefix, possibly empty
};

inline Result<ParsedUrl> parse_http_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    return make_error("BadBaseLocator", strcat("not an http(s) URL: ", url));
  }
  auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return ParsedUrl{url, ""};
  std::string path = url.substr(path_start);
  while (!path.empty() && path.back() == '/') path.pop_back();
  return ParsedUrl{url.substr(0, path_start), path};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// LOCAL_POSIX connector
// ---------------------------------------------------------------------------

class LocalPosixConnector : public Connector {
 public:
  explicit LocalPosixConnector(StorageEndpoint endpoint) : endpoint_(std::move(endpoint)) {}

  const StorageEndpoint& endpoint() const override { return endpoint_; }

  Result<ObjectStat> stat(const std::string& path) override {
    auto full = resolve(path);
    if (!full.ok()) return full.error();
    std::error_code ec;
    if (!fs::exists(full.value(), ec) || fs::is_directory(full.value(), ec)) {
      return ObjectStat{false, std::nullopt, std::nullopt};
    }
    auto size = fs::file_size(full.value(), ec);
    if (ec) return make_error("Unreachable", ec.message());
    return ObjectStat{true, static_cast<uint64_t>(size), std::nullopt};
  }

  Result<std::unique_ptr<ByteReader>> read_range(const std::string& path, uint64_t offset,
                                                 std::optional<uint64_t> length) override {
    auto full = resolve(path);
    if (!full.ok()) return full.error();
    auto st = stat(path);
    if (!st.ok()) return st.error();
    if (!st.value().exists) return make_error("NotFound", strcat("no object at ", path));
    uint64_t size = *st.value().size_bytes;
    if (offset > size) {
      return make_error("RangeBeyondEnd", strcat("offset ", offset, " > size ", size));
    }
    auto reader = std::make_unique<detail::FileRangeReader>(full.value(), offset, length);
    if (!reader->valid()) return make_error("Unreachable", strcat("cannot open ", path));
    return std::unique_ptr<ByteReader>(std::move(reader));
  }

  Result<std::unique_ptr<WriteSink>> write_at(const std::string& path, uint64_t offset,
                                              const std::string& staging_tag) override {
    auto staging = staging_path(path, staging_tag);
    if (!staging.ok()) return staging.error();
    if (offset > 0) {
      uint64_t staged = file_size_or_zero(staging.value());
      if (offset != staged) {
        return make_error("OffsetMismatch",
                          strcat("offset ", offset, " != staged size ", staged));
      }
    }
    auto st = mkdirs(staging.value().parent_path());
    if (!st.ok()) return st.error();
    auto sink = std::make_unique<detail::FileSink>();
    auto open_st = sink->open(staging.value(), /*truncate=*/offset == 0);
    if (!open_st.ok()) return open_st.error();
    return std::unique_ptr<WriteSink>(std::move(sink));
  }

  Result<ObjectStat> commit(const std::string& path,
                            const std::optional<std::string>& expected_sha256,
                            const std::string& staging_tag) override {
    auto staging = staging_path(path, staging_tag);
    if (!staging.ok()) return staging.error();
    auto full = resolve(path);
    if (!full.ok()) return full.error();
    if (!file_exists(staging.value())) {
      return make_error("NoStagedData", strcat("nothing staged for ", path));
    }
    auto digest = detail::hash_staged_file(staging.value());
    if (!digest.ok()) return digest.error();
    if (expected_sha256 && *expected_sha256 != digest.value()) {
      remove_quiet(staging.value());
      return make_error("DigestMismatch", strcat("staged digest ", digest.value(),
                                                 " != expected ", *expected_sha256));
    }
    std::error_code ec;
    fs::rename(staging.value(), full.value(), ec);
    if (ec) return make_error("Unreachable", strcat("commit rename failed: ", ec.message()));
    return ObjectStat{true, file_size_or_zero(full.value()), digest.value()};
  }

  Status abort_staged(const std::string& path, const std::string& staging_tag) override {
    auto staging = staging_path(path, staging_tag);
    if (!staging.ok()) return staging.error();
    remove_quiet(staging.value());
    return ok_status();
  }

  Result<uint64_t> staged_size(const std::string& path, const std::string& staging_tag) override {
    auto staging = staging_path(path, staging_tag);
    if (!staging.ok()) return staging.error();
    return file_size_or_zero(staging.value());
  }

  Result<std::unique_ptr<ByteReader>> open_staged(const std::string& path,
                                                  const std::string& staging_tag) override {
    auto staging = staging_path(path, staging_tag);
    if (!staging.ok()) return staging.error();
    if (!file_exists(staging.value())) {
      return make_error("NoStagedData", strcat("nothing staged for ", path));
    }
    auto reader = std::make_unique<detail::FileRangeReader>(staging.value(), 0, std::nullopt);
    if (!reader->valid()) return make_error("Unreachable", "cannot open staging");
    return std::unique_ptr<ByteReader>(std::move(reader));
  }

 private:
  Result<fs::path> resolve(const std::string& path) const {
    auto normalized = normalize_path(path);
    if (!normalized.ok()) return normalized.error();
    fs::path full = fs::path(endpoint_.base_locator) / normalized.value();
    // Confinement belt: the normalized path has no parent segments, so the
    // join cannot escape the root, but verify anyway.
    auto root_str = fs::path(endpoint_.base_locator).lexically_normal().string();
    auto full_str = full.lexically_normal().string();
    if (full_str.compare(0, root_str.size(), root_str) != 0) {
      return make_error("PathEscapesRoot", strcat(path, " escapes base locator"));
    }
    return full;
  }

  Result<fs::path> staging_path(const std::string& path, const std::string& tag) const {
    auto full = resolve(path);
    if (!full.ok()) return full.error();
    fs::path staging = full.value();
    staging += strcat(".part-", tag);
    return staging;
  }

  StorageEndpoint endpoint_;
};

// ---------------------------------------------------------------------------
// Spool-backed staging shared by the HTTP-flavored connectors
// ---------------------------------------------------------------------------

namespace detail {

/// Local disk staging for connectors whose remote protocol commits in one
/// shot (object store PUT, HTTP PUT). The spool file is the durable staging
/// area; commit uploads it and deletes it.
class SpoolStaging {
 public:
  SpoolStaging(fs::path staging_dir, std::string name_seed)
      : staging_dir_(std::move(staging_dir)), name_seed_(std::move(name_seed)) {}

  fs::path spool_path(const std::string& path, const std::string& tag) const {
    return staging_dir_ / strcat("spool-", Sha256::hex(strcat(name_seed_, "|", path)).substr(0, 24),
                                 ".part-", tag);
  }

  Result<std::unique_ptr<WriteSink>> write_at(const std::string& path, uint64_t offset,
                                              const std::string& tag, bool allow_resume) {
    if (offset > 0 && !allow_resume) {
      return make_error("CapabilityMissing", "endpoint does not support RANDOM_WRITE");
    }
    auto spool = spool_path(path, tag);
    if (offset > 0) {
      uint64_t staged = file_size_or_zero(spool);
      if (offset != staged) {
        return make_error("OffsetMismatch", strcat("offset ", offset, " != staged size ", staged));
      }
    }
    auto st = mkdirs(staging_dir_);
    if (!st.ok()) return st.error();
    auto sink = std::make_unique<FileSink>();
    auto open_st = sink->open(spool, offset == 0);
    if (!open_st.ok()) return open_st.error();
    return std::unique_ptr<WriteSink>(std::move(sink));
  }

  Result<uint64_t> staged_size(const std::string& path, const std::string& tag) const {
    return file_size_or_zero(spool_path(path, tag));
  }

  Status abort(const std::string& path, const std::string& tag) const {
    remove_quiet(spool_path(path, tag));
    return ok_status();
  }

  Result<std::unique_ptr<ByteReader>> open_staged(const std::string& path,
                                                  const std::string& tag) const {
    auto spool = spool_path(path, tag);
    if (!file_exists(spool)) return make_error("NoStagedData", "nothing staged");
    auto reader = std::make_unique<FileRangeReader>(spool, 0, std::nullopt);
    if (!reader->valid()) return make_error("Unreachable", "cannot open spool");
    return std::unique_ptr<ByteReader>(std::move(reader));
  }

 private:
  fs::path staging_dir_;
  std::string name_seed_;
};

/// Pull reader over sequential ranged GETs (bounded memory per window).
class HttpWindowReader : public ByteReader {
 public:
  using FetchWindow = std::function<Result<std::string>(uint64_t offset, uint64_t length)>;

  HttpWindowReader(FetchWindow fetch, uint64_t offset, uint64_t end, uint64_t window_bytes)
      : fetch_(std::move(fetch)), pos_(offset), end_(end), window_(window_bytes) {}

  Result<size_t> read(char* buf, size_t cap) override {
    if (buf_off_ == buf_.size()) {
      if (pos_ >= end_) return size_t{0};
      uint64_t want = std::min<uint64_t>(window_, end_ - pos_);
      auto got = fetch_(pos_, want);
      if (!got.ok()) return got.error();
      buf_ = got.take();
      buf_off_ = 0;
      if (buf_.empty()) return make_error("Unreachable", "empty range response mid-stream");
      pos_ += buf_.size();
    }
    size_t n = std::min(cap, buf_.size() - buf_off_);
    memcpy(buf, buf_.data() + buf_off_, n);
    buf_off_ += n;
    return n;
  }

 private:
  FetchWindow fetch_;
  uint64_t pos_;
  uint64_t end_;
  uint64_t window_;
  std::string buf_;
  size_t buf_off_ = 0;
};

constexpr uint64_t kHttpReadWindowBytes = 4ull * 1024 * 1024;

inline Status drain_reader_to_sink(ByteReader& reader, WriteSink& sink, Sha256* hash) {
  std::vector<char> buf(256 * 1024);
  while (true) {
    auto got = reader.read(buf.data(), buf.size());
    if (!got.ok()) return got.error();
    if (got.value() == 0) break;
    if (hash) hash->update(buf.data(), got.value());
    auto st = sink.write(buf.data(), got.value());
    if (!st.ok()) return st;
  }
  return ok_status();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// OBJECT_STORE connector (client of the S3-like dialect)
// ---------------------------------------------------------------------------

/// Speaks the in-process S3-like REST dialect: PUT/GET/HEAD/DELETE on
/// /{bucket}/{key}, auth via X-MFT-Access: <akid>:<hex HMAC-SHA256(secret,
/// method "\n" path)>. base_locator is "http://host:port/bucket".
class ObjectStoreConnector : public Connector {
 public:
  ObjectStoreConnector(StorageEndpoint endpoint, CredentialPayload credential,
                       detail::ParsedUrl parsed, fs::path staging_dir)
      : endpoint_(std::move(endpoint)),
        credential_(std::move(credential)),
        origin_(parsed.origin),
        bucket_path_(parsed.path),
        staging_(std::move(staging_dir), strcat(origin_, bucket_path_)),
        client_(origin_) {
    client_.set_connection_timeout(5, 0);
    client_.set_read_timeout(60, 0);
    client_.set_keep_alive(true);
  }

  const StorageEndpoint& endpoint() const override { return endpoint_; }

  Result<ObjectStat> stat(const std::string& path) override {
    auto res = client_.Head(object_path(path), auth_headers("HEAD", object_path(path)));
    if (!res) return unreachable(res);
    if (res->status == 404) return ObjectStat{false, std::nullopt, std::nullopt};
    if (res->status != 200) return http_error(res->status);
    ObjectStat st;
    st.exists = true;
    if (res->has_header("Content-Length")) {
      st.size_bytes = std::stoull(res->get_header_value("Content-Length"));
    }
    if (res->has_header("ETag")) st.etag_or_digest = res->get_header_value("ETag");
    return st;
  }

  Result<std::unique_ptr<ByteReader>> read_range(const std::string& path, uint64_t offset,
                                                 std::optional<uint64_t> length) override {
    auto st = stat(path);
    if (!st.ok()) return st.error();
    if (!st.value().exists) return make_error("NotFound", strcat("no object at ", path));
    uint64_t size = st.value().size_bytes.value_or(0);
    if (offset > size) {
      return make_error("RangeBeyondEnd", strcat("offset ", offset, " > size ", size));
    }
    uint64_t end = length ? std::min<uint64_t>(size, offset + *length) : size;
    auto target = object_path(path);
    auto fetch = [this, target](uint64_t off, uint64_t len) -> Result<std::string> {
      httplib::Headers headers = auth_headers("GET", target);
      headers.emplace("Range", strcat("bytes=", off, "-", off + len - 1));
      auto res = client_.Get(target, headers);
      if (!res) return unreachable(res);
      if (res->status != 206 && res->status != 200) return http_error(res->status);
      return std::string(res->body);
    };
    return std::unique_ptr<ByteReader>(std::make_unique<detail::HttpWindowReader>(
        fetch, offset, end, detail::kHttpReadWindowBytes));
  }

  Result<std::unique_ptr<WriteSink>> write_at(const std::string& path, uint64_t offset,
                                              const std::string& staging_tag) override {
    return staging_.write_at(path, offset, staging_tag,
                             endpoint_.has(Capability::RandomWrite));
  }

  Result<ObjectStat> commit(const std::string& path,
                            const std::optional<std::string>& expected_sha256,
                            const std::string& staging_tag) override {
    auto spool = staging_.spool_path(path, staging_tag);
    if (!file_exists(spool)) return make_error("NoStagedData", strcat("nothing staged for ", path));
    auto digest = detail::hash_staged_file(spool);
    if (!digest.ok()) return digest.error();
    if (expected_sha256 && *expected_sha256 != digest.value()) {
      remove_quiet(spool);
      return make_error("DigestMismatch", strcat("staged digest ", digest.value(), " != expected ",
                                                 *expected_sha256));
    }
    uint64_t size = file_size_or_zero(spool);
    auto target = object_path(path);
    std::ifstream in(spool, std::ios::binary);
    if (!in) return make_error("Unreachable", "cannot reopen spool");
    auto res = client_.Put(
        target, auth_headers("PUT", target), size,
        [&in](size_t /*off*/, size_t len, httplib::DataSink& sink) {
          std::vector<char> buf(std::min<size_t>(len, 256 * 1024));
          in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
          auto got = static_cast<size_t>(in.gcount());
          if (got == 0) return false;
          sink.write(buf.data(), got);
          return true;
        },
        "application/octet-stream");
    if (!res) return unreachable(res);
    if (res->status != 200 && res->status != 201) return http_error(res->status);
    remove_quiet(spool);
    return ObjectStat{true, size, digest.value()};
  }

  Status abort_staged(const std::string& path, const std::string& staging_tag) override {
    return staging_.abort(path, staging_tag);
  }

  Result<uint64_t> staged_size(const std::string& path, const std::string& staging_tag) override {
    return staging_.staged_size(path, staging_tag);
  }

  Result<std::unique_ptr<ByteReader>> open_staged(const std::string& path,
                                                  const std::string& staging_tag) override {
    return staging_.open_staged(path, staging_tag);
  }

 private:
  std::string object_path(const std::string& path) const {
    return strcat(bucket_path_, "/", path);
  }

  httplib::Headers auth_headers(const std::string& method, const std::string& target) const {
    std::string mac = hmac_sha256_hex(credential_.secret_key, strcat(method, "\n", target));
    return {{"X-MFT-Access", strcat(credential_.access_key_id, ":", mac)}};
  }

  template <typename Res>
  Error unreachable(const Res& res) const {
    return make_error("Unreachable",
                      strcat("object store ", origin_, " unreachable: ",
                             httplib::to_string(res.error())),
                      /*retryable=*/true);
  }

  Error http_error(int status) const {
    if (status == 401 || status == 403) {
      return make_error("PermissionDenied", strcat("object store returned ", status));
    }
    if (status == 416) return make_error("RangeBeyondEnd", "range not satisfiable");
    return make_error("Unreachable", strcat("object store returned ", status), true);
  }

  StorageEndpoint endpoint_;
  CredentialPayload credential_;
  std::string origin_;
  std::string bucket_path_;
  detail::SpoolStaging staging_;
  httplib::Client client_;
};

// ---------------------------------------------------------------------------
// HTTP connector (dumb remote HTTP endpoints)
// ---------------------------------------------------------------------------

/// Read via GET (with Range when offset > 0), write via a single PUT at
/// commit. No random write; staged locally until commit. The destination
/// cannot report a digest, so commit returns one computed from the staged
/// bytes only.
class HttpConnector : public Connector {
 public:
  HttpConnector(StorageEndpoint endpoint, CredentialPayload credential, detail::ParsedUrl parsed,
                fs::path staging_dir)
      : endpoint_(std::move(endpoint)),
        credential_(std::move(credential)),
        origin_(parsed.origin),
        prefix_(parsed.path),
        staging_(std::move(staging_dir), strcat(origin_, prefix_)),
        client_(origin_) {
    client_.set_connection_timeout(5, 0);
    client_.set_read_timeout(60, 0);
    client_.set_keep_alive(true);
  }

  const StorageEndpoint& endpoint() const override { return endpoint_; }

  Result<ObjectStat> stat(const std::string& path) override {
    auto res = client_.Head(object_path(path), base_headers());
    if (!res) return unreachable(res);
    if (res->status == 404) return ObjectStat{false, std::nullopt, std::nullopt};
    if (res->status != 200) return http_error(res->status);
    ObjectStat st;
    st.exists = true;
    if (res->has_header("Content-Length")) {
      st.size_bytes = std::stoull(res->get_header_value("Content-Length"));
    }
    if (res->has_header("ETag")) st.etag_or_digest = res->get_header_value("ETag");
    return st;
  }

  Result<std::unique_ptr<ByteReader>> read_range(const std::string& path, uint64_t offset,
                                                 std::optional<uint64_t> length) override {
    if (offset > 0 && !endpoint_.has(Capability::ByteRangeRead)) {
      return make_error("CapabilityMissing", "endpoint does not support BYTE_RANGE_READ");
    }
    auto st = stat(path);
    if (!st.ok()) return st.error();
    if (!st.value().exists) return make_error("NotFound", strcat("no object at ", path));
    uint64_t size = st.value().size_bytes.value_or(0);
    if (offset > size) {
      return make_error("RangeBeyondEnd", strcat("offset ", offset, " > size ", size));
    }
    uint64_t end = length ? std::min<uint64_t>(size, offset + *length) : size;
    auto target = object_path(path);
    auto fetch = [this, target](uint64_t off, uint64_t len) -> Result<std::string> {
      httplib::Headers headers = base_headers();
      headers.emplace("Range", strcat("bytes=", off, "-", off + len - 1));
      auto res = client_.Get(target, headers);
      if (!res) return unreachable(res);
      if (res->status == 206) return std::string(res->body);
      if (res->status == 200) {
        // Server ignored the Range header; trim the full body client-side.
        if (off >= res->body.size()) return std::string();
        return res->body.substr(off, len);
      }
      return http_error(res->status);
    };
    return std::unique_ptr<ByteReader>(std::make_unique<detail::HttpWindowReader>(
        fetch, offset, end, detail::kHttpReadWindowBytes));
  }

  Result<std::unique_ptr<WriteSink>> write_at(const std::string& path, uint64_t offset,
                                              const std::string& staging_tag) override {
    return staging_.write_at(path, offset, staging_tag, /*allow_resume=*/false);
  }

  Result<ObjectStat> commit(const std::string& path,
                            const std::optional<std::string>& expected_sha256,
                            const std::string& staging_tag) override {
    auto spool = staging_.spool_path(path, staging_tag);
    if (!file_exists(spool)) return make_error("NoStagedData", strcat("nothing staged for ", path));
    auto digest = detail::hash_staged_file(spool);
    if (!digest.ok()) return digest.error();
    if (expected_sha256 && *expected_sha256 != digest.value()) {
      remove_quiet(spool);
      return make_error("DigestMismatch", strcat("staged digest ", digest.value(), " != expected ",
                                                 *expected_sha256));
    }
    auto body = read_file(spool);
    if (!body) return make_error("NoStagedData", "spool vanished");
    auto res = client_.Put(object_path(path), base_headers(), *body, "application/octet-stream");
    if (!res) return unreachable(res);
    if (res->status / 100 != 2) return http_error(res->status);
    remove_quiet(spool);
    // Destination digest intentionally absent: a plain HTTP endpoint gives us
    // no integrity confirmation.
    return ObjectStat{true, body->size(), std::nullopt};
  }

  Status abort_staged(const std::string& path, const std::string& staging_tag) override {
    return staging_.abort(path, staging_tag);
  }

  Result<uint64_t> staged_size(const std::string& path, const std::string& staging_tag) override {
    return staging_.staged_size(path, staging_tag);
  }

  Result<std::unique_ptr<ByteReader>> open_staged(const std::string& path,
                                                  const std::string& staging_tag) override {
    return staging_.open_staged(path, staging_tag);
  }

 private:
  std::string object_path(const std::string& path) const { return strcat(prefix_, "/", path); }

  httplib::Headers base_headers() const {
    httplib::Headers headers;
    if (credential_.kind == CredentialKind::BearerToken) {
      headers.emplace("Authorization", strcat("Bearer ", credential_.token));
    }
    return headers;
  }

  template <typename Res>
  Error unreachable(const Res& res) const {
    return make_error("Unreachable",
                      strcat("http endpoint ", origin_, " unreachable: ",
                             httplib::to_string(res.error())),
                      true);
  }

  Error http_error(int status) const {
    if (status == 401 || status == 403) {
      return make_error("PermissionDenied", strcat("http endpoint returned ", status));
    }
    return make_error("Unreachable", strcat("http endpoint returned ", status), true);
  }

  StorageEndpoint endpoint_;
  CredentialPayload credential_;
  std::string origin_;
  std::string prefix_;
  detail::SpoolStaging staging_;
  httplib::Client client_;
};

// ---------------------------------------------------------------------------
// Factory
// ---------------------------------------------------------------------------

/// Context shared by connectors that stage locally before a one-shot commit.
struct ConnectorContext {
  fs::path staging_dir = fs::temp_directory_path() / "mft-staging";
};

inline Result<std::unique_ptr<Connector>> make_connector(
    const StorageEndpoint& endpoint, const std::optional<CredentialPayload>& credential,
    const ConnectorContext& ctx = {}) {
  auto valid = validate_endpoint(endpoint);
  if (!valid.ok()) return valid.error();
  switch (endpoint.kind) {
    case EndpointKind::LocalPosix:
      return std::unique_ptr<Connector>(std::make_unique<LocalPosixConnector>(endpoint));
    case EndpointKind::ObjectStore: {
      if (!credential || credential->kind != CredentialKind::AccessKeyPair) {
        return make_error("MissingCredential",
                          "OBJECT_STORE endpoints require an ACCESS_KEY_PAIR credential");
      }
      auto parsed = detail::parse_http_url(endpoint.base_locator);
      if (!parsed.ok()) return parsed.error();
      if (parsed.value().path.empty() || parsed.value().path.find('/', 1) != std::string::npos) {
        return make_error("BadBaseLocator",
                          "object store base_locator must be http://host:port/bucket");
      }
      return std::unique_ptr<Connector>(std::make_unique<ObjectStoreConnector>(
          endpoint, *credential, parsed.value(), ctx.staging_dir));
    }
    case EndpointKind::Http: {
      auto parsed = detail::parse_http_url(endpoint.base_locator);
      if (!parsed.ok()) return parsed.error();
      return std::unique_ptr<Connector>(std::make_unique<HttpConnector>(
          endpoint, credential.value_or(CredentialPayload{}), parsed.value(), ctx.staging_dir));
    }
  }
  return make_error("UnknownKind", "no connector registered for endpoint kind");
}

}  // namespace mft
