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

#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mft/connector.hpp"
#include "mft/core.hpp"
#include "mft/crypto.hpp"
#include "mft/fsio.hpp"

namespace mft {

// Resource backend: the storage endpoint registry. Credential backend: the
// sealed secret store plus transfer-scoped grant issue/redeem. Both are
// replaceable interfaces with an in-memory implementation and an
// encrypted-file implementation layered on top of it.

struct CredentialMeta {
  std::string credential_id;
  CredentialKind kind = CredentialKind::None;
  int64_t created_at = 0;
};

struct CredentialGrant {
  std::string grant_id;
  std::string credential_id;
  std::string transfer_id;
  int64_t expires_at = 0;
};

struct AuditEntry {
  std::string grant_id;
  std::string agent_id;
  int64_t timestamp = 0;
};

class ResourceBackend {
 public:
  virtual ~ResourceBackend() = default;
  virtual Result<std::string> register_endpoint(const StorageEndpoint& endpoint) = 0;
  virtual Result<StorageEndpoint> get_endpoint(const std::string& endpoint_id) = 0;
  virtual std::vector<StorageEndpoint> list_endpoints() = 0;
  virtual Status remove_endpoint(const std::string& endpoint_id) = 0;
};

class CredentialBackend {
 public:
  virtual ~CredentialBackend() = default;
  virtual Result<std::string> store_credential(const CredentialPayload& payload) = 0;
  virtual Result<CredentialMeta> credential_meta(const std::string& credential_id) = 0;
  virtual std::vector<CredentialMeta> list_credentials() = 0;
  virtual Result<CredentialGrant> issue_grant(const std::string& credential_id,
                                              const std::string& transfer_id,
                                              int64_t ttl_seconds, int64_t now_s) = 0;
  /// Payload lookup for a grant whose CRED_REDEEM token has already been
  /// verified by the caller. Grants stay redeemable until expiry.
  virtual Result<CredentialPayload> redeem_grant(const std::string& grant_id,
                                                 const std::string& agent_id, int64_t now_s) = 0;
  virtual std::vector<AuditEntry> audit_log() = 0;
};

// ---------------------------------------------------------------------------
// In-memory implementation
// ---------------------------------------------------------------------------

class InMemoryBackends : public ResourceBackend, public CredentialBackend {
 public:
  Result<std::string> register_endpoint(const StorageEndpoint& endpoint) override {
    auto valid = validate_endpoint(endpoint);
    if (!valid.ok()) return valid.error();
    std::lock_guard<std::mutex> lk(mu_);
    if (endpoints_.count(endpoint.endpoint_id)) {
      return make_error("DuplicateEndpointId",
                        strcat("endpoint ", endpoint.endpoint_id, " already registered"));
    }
    endpoints_[endpoint.endpoint_id] = endpoint;
    on_mutation();
    return endpoint.endpoint_id;
  }

  Result<StorageEndpoint> get_endpoint(const std::string& endpoint_id) override {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = endpoints_.find(endpoint_id);
    if (it == endpoints_.end()) {
      return make_error("UnknownEndpoint", strcat("no endpoint ", endpoint_id));
    }
    return it->second;
  }

  std::vector<StorageEndpoint> list_endpoints() override {
    std::lock_guard<std::mutex> lk(mu_);
    std::vector<StorageEndpoint> out;
    for (auto& [_, e] : endpoints_) out.push_back(e);
    return out;
  }

  Status remove_endpoint(const std::string& endpoint_id) override {
    std::lock_guard<std::mutex> lk(mu_);
    if (!endpoints_.erase(endpoint_id)) {
      return make_error("UnknownEndpoint", strcat("no endpoint ", endpoint_id));
    }
    on_mutation();
    return ok_status();
  }

  Result<std::string> store_credential(const CredentialPayload& payload) override {
    std::lock_guard<std::mutex> lk(mu_);
    std::string id = strcat("cred-", rand_id());
    credentials_[id] = payload;
    created_at_[id] = unix_seconds();
    on_mutation();
    return id;
  }

  Result<CredentialMeta> credential_meta(const std::string& credential_id) override {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = credentials_.find(credential_id);
    if (it == credentials_.end()) {
      return make_error("UnknownCredential", strcat("no credential ", credential_id));
    }
    return CredentialMeta{credential_id, it->second.kind, created_at_[credential_id]};
  }

  std::vector<CredentialMeta> list_credentials() override {
    std::lock_guard<std::mutex> lk(mu_);
    std::vector<CredentialMeta> out;
    for (auto& [id, p] : credentials_) out.push_back({id, p.kind, created_at_[id]});
    return out;
  }

  Result<CredentialGrant> issue_grant(const std::string& credential_id,
                                      const std::string& transfer_id, int64_t ttl_seconds,
                                      int64_t now_s) override {
    std::lock_guard<std::mutex> lk(mu_);
    if (!credentials_.count(credential_id)) {
      return make_error("UnknownCredential", strcat("no credential ", credential_id));
    }
    CredentialGrant grant{strcat("grant-", rand_id()), credential_id, transfer_id,
                          now_s + ttl_seconds};
    grants_[grant.grant_id] = grant;
    return grant;
  }

  Result<CredentialPayload> redeem_grant(const std::string& grant_id,
                                         const std::string& agent_id, int64_t now_s) override {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = grants_.find(grant_id);
    if (it == grants_.end()) return make_error("UnknownGrant", strcat("no grant ", grant_id));
    if (now_s > it->second.expires_at) {
      return make_error("GrantExpired", strcat("grant ", grant_id, " expired"));
    }
    auto cred = credentials_.find(it->second.credential_id);
    if (cred == credentials_.end()) {
      return make_error("UnknownCredential", "credential vanished under grant");
    }
    audit_.push_back(AuditEntry{grant_id, agent_id, now_s});
    on_mutation();
    return cred->second;
  }

  std::vector<AuditEntry> audit_log() override {
    std::lock_guard<std::mutex> lk(mu_);
    return audit_;
  }

 protected:
  /// Hook for the encrypted-file subclass; called with mu_ held.
  virtual void on_mutation() {}

  std::mutex mu_;
  std::map<std::string, StorageEndpoint> endpoints_;
  std::map<std::string, CredentialPayload> credentials_;
  std::map<std::string, int64_t> created_at_;
  std::map<std::string, CredentialGrant> grants_;  // ephemeral, never persisted
  std::vector<AuditEntry> audit_;
};

// ---------------------------------------------------------------------------
// Encrypted-file implementation
// ---------------------------------------------------------------------------

/// Store file format (version 1), one JSON document:
///   {version:1, endpoints:[...],
///    credentials:[{credential_id, kind, created_at, sealed}], audit:[...]}
/// where sealed = base64(nonce || AES-256-GCM ciphertext || tag) of the
/// payload JSON under the 32-byte master key.
class EncryptedFileStore : public InMemoryBackends {
 public:
  static constexpr int kFormatVersion = 1;

  EncryptedFileStore(fs::path store_path, std::string master_key)
      : store_path_(std::move(store_path)), master_key_(std::move(master_key)) {}

  /// Master key from MFT_MASTER_KEY (base64, 32 bytes).
  static Result<std::string> master_key_from_env() {
    const char* raw = std::getenv("MFT_MASTER_KEY");
    if (!raw) return make_error("WrongMasterKey", "MFT_MASTER_KEY is not set");
    auto key = b64_decode(raw);
    if (!key || key->size() != 32) {
      return make_error("WrongMasterKey", "MFT_MASTER_KEY must be base64 of 32 bytes");
    }
    return *key;
  }

  Status save_state() {
    std::lock_guard<std::mutex> lk(mu_);
    return save_locked();
  }

  /// Load the store file, replacing all state. Fails closed: either the
  /// whole file loads or nothing changes.
  Status load_state() {
    auto content = read_file(store_path_);
    if (!content) {
      return make_error("CorruptStore", strcat("cannot read ", store_path_.string()));
    }
    json doc;
    try {
      doc = json::parse(*content);
    } catch (...) {
      return make_error("CorruptStore", "store file is not valid JSON");
    }
    if (!doc.contains("version") || !doc["version"].is_number_integer()) {
      return make_error("CorruptStore", "store file has no version");
    }
    if (doc["version"].get<int>() != kFormatVersion) {
      return make_error("UnsupportedVersion",
                        strcat("store version ", doc["version"].get<int>(), " unsupported"));
    }

    std::map<std::string, StorageEndpoint> endpoints;
    std::map<std::string, CredentialPayload> credentials;
    std::map<std::string, int64_t> created_at;
    std::vector<AuditEntry> audit;
    try {
      for (const auto& e : doc.value("endpoints", json::array())) {
        auto ep = storage_endpoint_from_json(e);
        if (!ep.ok()) return make_error("CorruptStore", ep.error().message);
        endpoints[ep.value().endpoint_id] = ep.take();
      }
      for (const auto& c : doc.value("credentials", json::array())) {
        auto sealed = b64_decode(c.at("sealed").get<std::string>());
        if (!sealed) return make_error("CorruptStore", "sealed field is not base64");
        auto opened = aes_gcm_open(master_key_, *sealed);
        if (!opened.ok()) return opened.error();  // WrongMasterKey
        auto payload = CredentialPayload::from_json(json::parse(opened.value()));
        if (!payload.ok()) return make_error("CorruptStore", payload.error().message);
        auto id = c.at("credential_id").get<std::string>();
        credentials[id] = payload.take();
        created_at[id] = c.value("created_at", int64_t{0});
      }
      for (const auto& a : doc.value("audit", json::array())) {
        audit.push_back(AuditEntry{a.at("grant_id").get<std::string>(),
                                   a.at("agent_id").get<std::string>(),
                                   a.at("timestamp").get<int64_t>()});
      }
    } catch (const json::exception& e) {
      return make_error("CorruptStore", strcat("store file malformed: ", e.what()));
    }

    std::lock_guard<std::mutex> lk(mu_);
    endpoints_ = std::move(endpoints);
    credentials_ = std::move(credentials);
    created_at_ = std::move(created_at);
    audit_ = std::move(audit);
    return ok_status();
  }

  bool store_file_exists() const { return file_exists(store_path_); }

 protected:
  void on_mutation() override { save_locked(); }

 private:
  Status save_locked() {
    json creds = json::array();
    for (auto& [id, payload] : credentials_) {
      auto sealed = aes_gcm_seal(master_key_, payload.to_json().dump());
      if (!sealed.ok()) return sealed.error();
      creds.push_back(json{{"credential_id", id},
                           {"kind", to_string(payload.kind)},
                           {"created_at", created_at_[id]},
                           {"sealed", b64_encode(sealed.value())}});
    }
    json eps = json::array();
    for (auto& [_, e] : endpoints_) eps.push_back(to_json(e));
    json audit = json::array();
    for (auto& a : audit_) {
      audit.push_back(
          json{{"grant_id", a.grant_id}, {"agent_id", a.agent_id}, {"timestamp", a.timestamp}});
    }
    json doc{{"version", kFormatVersion},
             {"endpoints", std::move(eps)},
             {"credentials", std::move(creds)},
             {"audit", std::move(audit)}};
    return write_file_atomic(store_path_, doc.dump(2));
  }

  fs::path store_path_;
  std::string master_key_;
};

}  // namespace mft
