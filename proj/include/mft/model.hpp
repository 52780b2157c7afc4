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

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mft/core.hpp"

namespace mft {

using json = nlohmann::json;

constexpr uint64_t kMinChunkBytes = 64ull * 1024;          // 64 KiB
constexpr uint64_t kMaxChunkBytes = 64ull * 1024 * 1024;   // 64 MiB
constexpr uint64_t kDefaultChunkBytes = 8ull * 1024 * 1024;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct EndpointRef {
  std::string endpoint_id;
  std::string path;  // normalized, "/"-separated, relative

  bool operator==(const EndpointRef& o) const {
    return endpoint_id == o.endpoint_id && path == o.path;
  }
};

struct TransferRequest {
  EndpointRef source;
  EndpointRef destination;
  bool verify_digest = true;
  std::optional<uint64_t> requested_chunk_bytes;
};

enum class TransferState {
  Created,
  Planned,
  Dispatched,
  Running,
  RetryWait,
  Completed,
  Failed,
  Canceled,
};

inline const char* to_string(TransferState s) {
  switch (s) {
    case TransferState::Created: return "CREATED";
    case TransferState::Planned: return "PLANNED";
    case TransferState::Dispatched: return "DISPATCHED";
    case TransferState::Running: return "RUNNING";
    case TransferState::RetryWait: return "RETRY_WAIT";
    case TransferState::Completed: return "COMPLETED";
    case TransferState::Failed: return "FAILED";
    case TransferState::Canceled: return "CANCELED";
  }
  return "?";
}

inline std::optional<TransferState> transfer_state_from_string(std::string_view s) {
  if (s == "CREATED") return TransferState::Created;
  if (s == "PLANNED") return TransferState::Planned;
  if (s == "DISPATCHED") return TransferState::Dispatched;
  if (s == "RUNNING") return TransferState::Running;
  if (s == "RETRY_WAIT") return TransferState::RetryWait;
  if (s == "COMPLETED") return TransferState::Completed;
  if (s == "FAILED") return TransferState::Failed;
  if (s == "CANCELED") return TransferState::Canceled;
  return std::nullopt;
}

inline bool is_terminal(TransferState s) {
  return s == TransferState::Completed || s == TransferState::Failed ||
         s == TransferState::Canceled;
}

enum class TransferMode {
  AgentToAgent,
  AgentToStoragePush,  // source-side agent writes to destination storage
  AgentToStoragePull,  // destination-side agent reads from source storage
};

inline const char* to_string(TransferMode m) {
  switch (m) {
    case TransferMode::AgentToAgent: return "AGENT_TO_AGENT";
    case TransferMode::AgentToStoragePush: return "AGENT_TO_STORAGE_PUSH";
    case TransferMode::AgentToStoragePull: return "AGENT_TO_STORAGE_PULL";
  }
  return "?";
}

inline std::optional<TransferMode> transfer_mode_from_string(std::string_view s) {
  if (s == "AGENT_TO_AGENT") return TransferMode::AgentToAgent;
  if (s == "AGENT_TO_STORAGE_PUSH") return TransferMode::AgentToStoragePush;
  if (s == "AGENT_TO_STORAGE_PULL") return TransferMode::AgentToStoragePull;
  return std::nullopt;
}

enum class TransferEvent {
  Planned,
  Dispatched,
  ProgressStarted,
  Completed,
  AttemptFailed,
  BackoffElapsed,
  AttemptsExhausted,
  Cancel,
};

inline const char* to_string(TransferEvent e) {
  switch (e) {
    case TransferEvent::Planned: return "Planned";
    case TransferEvent::Dispatched: return "Dispatched";
    case TransferEvent::ProgressStarted: return "ProgressStarted";
    case TransferEvent::Completed: return "Completed";
    case TransferEvent::AttemptFailed: return "AttemptFailed";
    case TransferEvent::BackoffElapsed: return "BackoffElapsed";
    case TransferEvent::AttemptsExhausted: return "AttemptsExhausted";
    case TransferEvent::Cancel: return "Cancel";
  }
  return "?";
}

struct HistoryEntry {
  int64_t timestamp_s = 0;
  TransferState state = TransferState::Created;
  std::string reason;
};

struct TransferRecord {
  std::string transfer_id;
  TransferRequest request;
  TransferState state = TransferState::Created;
  std::optional<TransferMode> mode;
  std::optional<std::string> executor_agent_id;
  uint32_t attempt = 0;  // number of failed attempts so far; current attempt index
  uint64_t bytes_transferred = 0;
  std::optional<uint64_t> total_bytes;
  std::optional<std::string> digest_source;
  std::optional<std::string> digest_destination;
  std::vector<HistoryEntry> history;
  std::optional<Error> last_error;
  int64_t created_at_s = 0;
};

struct AgentDescriptor {
  std::string agent_id;
  std::set<std::string> served_endpoint_ids;
  std::string data_channel_url;
  std::string user_http_url;
  int64_t last_heartbeat_s = 0;
  std::set<std::string> running_transfer_ids;

  bool is_live(int64_t now_s, int64_t liveness_window_s) const {
    return now_s - last_heartbeat_s <= liveness_window_s;
  }
};

struct RetryPolicy {
  uint64_t base_delay_ms = 1000;
  uint64_t multiplier = 2;
  uint64_t max_delay_ms = 60000;
  uint32_t max_attempts = 3;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Validate and normalize a transfer request. Returns the request with path
/// normalization applied or an error naming the first violated field.
inline Result<TransferRequest> validate_request(const TransferRequest& request) {
  if (request.source.endpoint_id.empty() || request.destination.endpoint_id.empty()) {
    return make_error("EmptyPath", "endpoint_id must be non-empty");
  }
  auto src_path = normalize_path(request.source.path);
  if (!src_path.ok()) return src_path.error();
  auto dst_path = normalize_path(request.destination.path);
  if (!dst_path.ok()) return dst_path.error();

  TransferRequest out = request;
  out.source.path = src_path.take();
  out.destination.path = dst_path.take();
  if (out.source == out.destination) {
    return make_error("SameSourceAndDestination",
                      "source and destination refer to the same object");
  }
  if (out.requested_chunk_bytes &&
      (*out.requested_chunk_bytes < kMinChunkBytes ||
       *out.requested_chunk_bytes > kMaxChunkBytes)) {
    return make_error("ChunkSizeOutOfRange",
                      strcat("requested_chunk_bytes must be in [", kMinChunkBytes, ", ",
                             kMaxChunkBytes, "]"));
  }
  return out;
}

struct TransferPlan {
  TransferMode mode;
  std::string executor_agent_id;
};

/// Pick the transfer mode and executor from agent liveness. The caller has
/// already evaluated liveness: a present descriptor means "live". The sender
/// pushes in agent-to-agent mode, so the source agent executes it.
inline Result<TransferPlan> plan_transfer(const TransferRequest& /*request*/,
                                          const std::optional<AgentDescriptor>& source_agent,
                                          const std::optional<AgentDescriptor>& dest_agent) {
  if (source_agent && dest_agent) {
    return TransferPlan{TransferMode::AgentToAgent, source_agent->agent_id};
  }
  if (source_agent) {
    return TransferPlan{TransferMode::AgentToStoragePush, source_agent->agent_id};
  }
  if (dest_agent) {
    return TransferPlan{TransferMode::AgentToStoragePull, dest_agent->agent_id};
  }
  return make_error("NoAgentPath", "no live agent serves either endpoint", /*retryable=*/false);
}

/// Apply one lifecycle event to a record, appending to history. Rejects
/// events outside the transition table; terminal states are immutable.
inline Result<TransferRecord> apply_transition(const TransferRecord& record, TransferEvent event,
                                               int64_t now_s, const std::string& reason = "") {
  if (is_terminal(record.state)) {
    return make_error("TerminalStateImmutable",
                      strcat("record ", record.transfer_id, " is terminal in state ",
                             to_string(record.state)));
  }
  std::optional<TransferState> next;
  bool bump_attempt = false;
  switch (record.state) {
    case TransferState::Created:
      if (event == TransferEvent::Planned) next = TransferState::Planned;
      if (event == TransferEvent::AttemptsExhausted) next = TransferState::Failed;
      break;
    case TransferState::Planned:
      if (event == TransferEvent::Dispatched) next = TransferState::Dispatched;
      break;
    case TransferState::Dispatched:
      if (event == TransferEvent::ProgressStarted) next = TransferState::Running;
      if (event == TransferEvent::AttemptFailed) {
        next = TransferState::RetryWait;
        bump_attempt = true;
      }
      break;
    case TransferState::Running:
      if (event == TransferEvent::Completed) next = TransferState::Completed;
      if (event == TransferEvent::AttemptFailed) {
        next = TransferState::RetryWait;
        bump_attempt = true;
      }
      break;
    case TransferState::RetryWait:
      if (event == TransferEvent::BackoffElapsed) next = TransferState::Planned;
      if (event == TransferEvent::AttemptsExhausted) next = TransferState::Failed;
      break;
    default:
      break;
  }
  if (event == TransferEvent::Cancel) next = TransferState::Canceled;
  if (!next) {
    return make_error("IllegalTransition",
                      strcat("event ", to_string(event), " not legal in state ",
                             to_string(record.state)));
  }
  TransferRecord out = record;
  out.state = *next;
  if (bump_attempt) out.attempt += 1;
  out.history.push_back(HistoryEntry{now_s, *next, reason.empty() ? to_string(event) : reason});
  return out;
}

/// Exponential backoff: min(base * multiplier^(attempt-1), max). Deterministic.
inline uint64_t compute_backoff(const RetryPolicy& policy, uint32_t attempt) {
  uint64_t delay = policy.base_delay_ms;
  for (uint32_t i = 1; i < attempt; ++i) {
    if (delay > policy.max_delay_ms / policy.multiplier) return policy.max_delay_ms;
    delay *= policy.multiplier;
  }
  return std::min(delay, policy.max_delay_ms);
}

// ---------------------------------------------------------------------------
// JSON serialization
// ---------------------------------------------------------------------------

inline json to_json(const Error& e) {
  return json{{"code", e.code}, {"message", e.message}, {"retryable", e.retryable}};
}

inline Error error_from_json(const json& j) {
  Error e;
  e.code = j.value("code", "");
  e.message = j.value("message", "");
  e.retryable = j.value("retryable", false);
  return e;
}

inline json to_json(const EndpointRef& r) {
  return json{{"endpoint_id", r.endpoint_id}, {"path", r.path}};
}

inline EndpointRef endpoint_ref_from_json(const json& j) {
  return EndpointRef{j.at("endpoint_id").get<std::string>(), j.at("path").get<std::string>()};
}

inline json to_json(const TransferRequest& r) {
  json j{{"source", to_json(r.source)},
         {"destination", to_json(r.destination)},
         {"verify_digest", r.verify_digest}};
  if (r.requested_chunk_bytes) j["requested_chunk_bytes"] = *r.requested_chunk_bytes;
  return j;
}

inline TransferRequest transfer_request_from_json(const json& j) {
  TransferRequest r;
  r.source = endpoint_ref_from_json(j.at("source"));
  r.destination = endpoint_ref_from_json(j.at("destination"));
  r.verify_digest = j.value("verify_digest", true);
  if (j.contains("requested_chunk_bytes") && !j["requested_chunk_bytes"].is_null()) {
    r.requested_chunk_bytes = j["requested_chunk_bytes"].get<uint64_t>();
  }
  return r;
}

inline json to_json(const TransferRecord& r) {
  json history = json::array();
  for (const auto& h : r.history) {
    history.push_back(json{{"timestamp", h.timestamp_s},
                           {"state", to_string(h.state)},
                           {"reason", h.reason}});
  }
  json j{{"transfer_id", r.transfer_id},
         {"request", to_json(r.request)},
         {"state", to_string(r.state)},
         {"attempt", r.attempt},
         {"bytes_transferred", r.bytes_transferred},
         {"history", std::move(history)},
         {"created_at", r.created_at_s}};
  if (r.mode) j["mode"] = to_string(*r.mode);
  if (r.executor_agent_id) j["executor_agent_id"] = *r.executor_agent_id;
  if (r.total_bytes) j["total_bytes"] = *r.total_bytes;
  if (r.digest_source) j["digest_source"] = *r.digest_source;
  if (r.digest_destination) j["digest_destination"] = *r.digest_destination;
  if (r.last_error) j["last_error"] = to_json(*r.last_error);
  return j;
}

inline TransferRecord transfer_record_from_json(const json& j) {
  TransferRecord r;
  r.transfer_id = j.at("transfer_id").get<std::string>();
  r.request = transfer_request_from_json(j.at("request"));
  r.state = *transfer_state_from_string(j.at("state").get<std::string>());
  r.attempt = j.value("attempt", 0u);
  r.bytes_transferred = j.value("bytes_transferred", 0ull);
  r.created_at_s = j.value("created_at", int64_t{0});
  if (j.contains("mode")) r.mode = transfer_mode_from_string(j["mode"].get<std::string>());
  if (j.contains("executor_agent_id")) r.executor_agent_id = j["executor_agent_id"];
  if (j.contains("total_bytes")) r.total_bytes = j["total_bytes"].get<uint64_t>();
  if (j.contains("digest_source")) r.digest_source = j["digest_source"];
  if (j.contains("digest_destination")) r.digest_destination = j["digest_destination"];
  if (j.contains("last_error")) r.last_error = error_from_json(j["last_error"]);
  for (const auto& h : j.value("history", json::array())) {
    r.history.push_back(HistoryEntry{h.at("timestamp").get<int64_t>(),
                                     *transfer_state_from_string(h.at("state").get<std::string>()),
                                     h.value("reason", "")});
  }
  return r;
}

inline json to_json(const AgentDescriptor& a, int64_t now_s, int64_t liveness_window_s) {
  return json{{"agent_id", a.agent_id},
              {"served_endpoint_ids", a.served_endpoint_ids},
              {"data_channel_url", a.data_channel_url},
              {"user_http_url", a.user_http_url},
              {"last_heartbeat", a.last_heartbeat_s},
              {"live", a.is_live(now_s, liveness_window_s)},
              {"running_transfer_ids", a.running_transfer_ids}};
}

}  // namespace mft
