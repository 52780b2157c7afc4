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

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "mft/core.hpp"
#include "mft/crypto.hpp"

namespace mft {

// HMAC-scoped capability tokens. Wire form:
//   base64url(canonical) "." base64url(HMAC-SHA256(key, canonical))
// where canonical = key_id \n subject \n verb \n endpoint_id \n path \n expires_at.

constexpr int64_t kMinTokenTtlSeconds = 1;
constexpr int64_t kMaxTokenTtlSeconds = 86400;
constexpr int64_t kDefaultClockSkewGraceSeconds = 30;

enum class TokenVerb { DataPatch, DataCreate, UserUpload, UserDownload, CredRedeem };

inline const char* to_string(TokenVerb v) {
  switch (v) {
    case TokenVerb::DataPatch: return "DATA_PATCH";
    case TokenVerb::DataCreate: return "DATA_CREATE";
    case TokenVerb::UserUpload: return "USER_UPLOAD";
    case TokenVerb::UserDownload: return "USER_DOWNLOAD";
    case TokenVerb::CredRedeem: return "CRED_REDEEM";
  }
  return "?";
}

inline std::optional<TokenVerb> token_verb_from_string(std::string_view s) {
  if (s == "DATA_PATCH") return TokenVerb::DataPatch;
  if (s == "DATA_CREATE") return TokenVerb::DataCreate;
  if (s == "USER_UPLOAD") return TokenVerb::UserUpload;
  if (s == "USER_DOWNLOAD") return TokenVerb::UserDownload;
  if (s == "CRED_REDEEM") return TokenVerb::CredRedeem;
  return std::nullopt;
}

/// Shared deployment secret. Never serialized into commands or logs.
struct ClusterSecret {
  std::string key_id;
  std::string key_bytes;  // >= 32 random bytes

  /// Parse the "key_id:base64(key_bytes)" form used in config/env.
  static Result<ClusterSecret> parse(std::string_view text) {
    auto pos = text.find(':');
    if (pos == std::string_view::npos || pos == 0) {
      return make_error("Malformed", "cluster secret must be <key_id>:<base64 bytes>");
    }
    auto bytes = b64_decode(text.substr(pos + 1));
    if (!bytes || bytes->size() < 32) {
      return make_error("Malformed", "cluster secret key must decode to >= 32 bytes");
    }
    return ClusterSecret{std::string(text.substr(0, pos)), *bytes};
  }

  std::string serialize() const { return strcat(key_id, ":", b64_encode(key_bytes)); }

  static ClusterSecret generate(std::string key_id = "k1") {
    return ClusterSecret{std::move(key_id), rand_bytes(32)};
  }
};

struct ScopedToken {
  std::string subject;
  TokenVerb verb = TokenVerb::DataPatch;
  std::string endpoint_id;
  std::string path;
  int64_t expires_at = 0;
};

namespace detail {

inline bool field_ok(std::string_view s) {
  return s.find('\n') == std::string_view::npos && s.find('\0') == std::string_view::npos;
}

inline std::string canonical_string(const std::string& key_id, const ScopedToken& t) {
  return strcat(key_id, "\n", t.subject, "\n", to_string(t.verb), "\n", t.endpoint_id, "\n",
                t.path, "\n", t.expires_at);
}

}  // namespace detail

/// Mint a scoped token in wire form. `expires_at = now + ttl`.
inline Result<std::string> mint_token(const ClusterSecret& secret, const std::string& subject,
                                      TokenVerb verb, const std::string& endpoint_id,
                                      const std::string& path, int64_t ttl_seconds,
                                      int64_t now_s) {
  if (ttl_seconds < kMinTokenTtlSeconds || ttl_seconds > kMaxTokenTtlSeconds) {
    return make_error("TtlOutOfRange",
                      strcat("ttl must be in [", kMinTokenTtlSeconds, ", ", kMaxTokenTtlSeconds,
                             "] seconds, got ", ttl_seconds));
  }
  if (!detail::field_ok(subject) || !detail::field_ok(endpoint_id) || !detail::field_ok(path) ||
      !detail::field_ok(secret.key_id)) {
    return make_error("Malformed", "token fields must not contain newlines");
  }
  ScopedToken t{subject, verb, endpoint_id, path, now_s + ttl_seconds};
  std::string canonical = detail::canonical_string(secret.key_id, t);
  std::string mac = hmac_sha256(secret.key_bytes, canonical);
  return strcat(b64url_encode(canonical), ".", b64url_encode(mac));
}

inline Result<std::string> mint_token(const ClusterSecret& secret, const std::string& subject,
                                      TokenVerb verb, const std::string& endpoint_id,
                                      const std::string& path, int64_t ttl_seconds) {
  return mint_token(secret, subject, verb, endpoint_id, path, ttl_seconds, unix_seconds());
}

/// Check signature and expiry only; scope checks are the caller's job.
/// Useful where the expected endpoint/path come from the token itself
/// (e.g. user upload URLs).
inline Result<ScopedToken> parse_token(const ClusterSecret& secret, std::string_view wire,
                                       int64_t now_s,
                                       int64_t skew_grace_s = kDefaultClockSkewGraceSeconds) {
  auto dot = wire.find('.');
  if (dot == std::string_view::npos) return make_error("Malformed", "token has no signature part");
  auto canonical = b64url_decode(wire.substr(0, dot));
  auto mac = b64url_decode(wire.substr(dot + 1));
  if (!canonical || !mac) return make_error("Malformed", "token is not valid base64url");

  auto fields = split(*canonical, '\n');
  if (fields.size() != 6) return make_error("Malformed", "token canonical must have 6 fields");
  if (fields[0] != secret.key_id) return make_error("BadSignature", "unknown key id");

  std::string expected_mac = hmac_sha256(secret.key_bytes, *canonical);
  if (!ct_equal(expected_mac, *mac)) return make_error("BadSignature", "HMAC mismatch");

  ScopedToken t;
  t.subject = fields[1];
  auto verb = token_verb_from_string(fields[2]);
  if (!verb) return make_error("Malformed", "unknown token verb");
  t.verb = *verb;
  t.endpoint_id = fields[3];
  t.path = fields[4];
  try {
    t.expires_at = std::stoll(fields[5]);
  } catch (...) {
    return make_error("Malformed", "bad expiry field");
  }
  if (now_s > t.expires_at + skew_grace_s) {
    return make_error("Expired", strcat("token expired at ", t.expires_at));
  }
  return t;
}

/// Full verification: signature valid, unexpired, and verb/endpoint/path all
/// equal to the guarded action. Returns the token subject on acceptance.
inline Result<std::string> verify_token(const ClusterSecret& secret, std::string_view wire,
                                        TokenVerb expected_verb,
                                        const std::string& expected_endpoint_id,
                                        const std::string& expected_path, int64_t now_s,
                                        int64_t skew_grace_s = kDefaultClockSkewGraceSeconds) {
  auto parsed = parse_token(secret, wire, now_s, skew_grace_s);
  if (!parsed.ok()) return parsed.error();
  const ScopedToken& t = parsed.value();
  if (t.verb != expected_verb || t.endpoint_id != expected_endpoint_id ||
      t.path != expected_path) {
    return make_error("ScopeMismatch", "token scope does not match the guarded action");
  }
  return t.subject;
}

}  // namespace mft
