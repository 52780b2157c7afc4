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

#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mft/backends.hpp"
#include "mft/connector.hpp"
#include "mft/core.hpp"
#include "mft/crypto.hpp"
#include "mft/fsio.hpp"
#include "mft/logging.hpp"
#include "mft/model.hpp"
#include "mft/token.hpp"

namespace mft {

// ---------------------------------------------------------------------------
// Controller <-> agent wire types
// ---------------------------------------------------------------------------

/// One side of a transfer command: either a connector spec (endpoint copy +
/// optional grant token) or data-channel coordinates. Never raw secrets,
/// never file bytes.
struct CommandSide {
  std::string role;  // "connector" | "data_channel"
  std::string path;
  std::optional<StorageEndpoint> endpoint;   // connector role
  std::optional<std::string> grant_token;    // connector role, credentialed
  std::string endpoint_id;                   // data_channel role
  std::string data_channel_url;              // data_channel role
  std::optional<std::string> create_token;   // data_channel role
  std::optional<std::string> patch_token;    // data_channel role

  json to_json() const {
    json j{{"role", role}, {"path", path}};
    if (endpoint) j["endpoint"] = mft::to_json(*endpoint);
    if (grant_token) j["grant_token"] = *grant_token;
    if (!endpoint_id.empty()) j["endpoint_id"] = endpoint_id;
    if (!data_channel_url.empty()) j["data_channel_url"] = data_channel_url;
    if (create_token) j["create_token"] = *create_token;
    if (patch_token) j["patch_token"] = *patch_token;
    return j;
  }

  static Result<CommandSide> from_json(const json& j) {
    CommandSide s;
    s.role = j.value("role", "");
    s.path = j.value("path", "");
    if (j.contains("endpoint")) {
      auto ep = storage_endpoint_from_json(j["endpoint"]);
      if (!ep.ok()) return ep.error();
      s.endpoint = ep.take();
    }
    if (j.contains("grant_token")) s.grant_token = j["grant_token"];
    s.endpoint_id = j.value("endpoint_id", "");
    s.data_channel_url = j.value("data_channel_url", "");
    if (j.contains("create_token")) s.create_token = j["create_token"];
    if (j.contains("patch_token")) s.patch_token = j["patch_token"];
    return s;
  }
};

struct TransferCommand {
  std::string type = "transfer";  // "transfer" | "cancel"
  std::string command_id;
  std::string transfer_id;
  uint32_t attempt = 0;
  std::optional<TransferMode> mode;
  uint64_t chunk_bytes = kDefaultChunkBytes;
  bool verify_digest = true;
  CommandSide source;
  CommandSide destination;

  json to_json() const {
    json j{{"type", type},
           {"command_id", command_id},
           {"transfer_id", transfer_id},
           {"attempt", attempt}};
    if (type == "transfer") {
      j["mode"] = mode ? to_string(*mode) : "";
      j["chunk_bytes"] = chunk_bytes;
      j["verify_digest"] = verify_digest;
      j["source"] = source.to_json();
      j["destination"] = destination.to_json();
    }
    return j;
  }

  static Result<TransferCommand> from_json(const json& j) {
    TransferCommand c;
    c.type = j.value("type", "transfer");
    c.command_id = j.value("command_id", "");
    c.transfer_id = j.value("transfer_id", "");
    c.attempt = j.value("attempt", 0u);
    if (c.type == "transfer") {
      c.mode = transfer_mode_from_string(j.value("mode", ""));
      c.chunk_bytes = j.value("chunk_bytes", kDefaultChunkBytes);
      c.verify_digest = j.value("verify_digest", true);
      auto src = CommandSide::from_json(j.at("source"));
      if (!src.ok()) return src.error();
      c.source = src.take();
      auto dst = CommandSide::from_json(j.at("destination"));
      if (!dst.ok()) return dst.error();
      c.destination = dst.take();
    }
    return c;
  }
};

enum class AgentEventKind { Progress, Completed, Error, UserUpload };

inline const char* to_string(AgentEventKind k) {
  switch (k) {
    case AgentEventKind::Progress: return "PROGRESS";
    case AgentEventKind::Completed: return "COMPLETED";
    case AgentEventKind::Error: return "ERROR";
    case AgentEventKind::UserUpload: return "USER_UPLOAD";
  }
  return "?";
}

inline std::optional<AgentEventKind> agent_event_kind_from_string(std::string_view s) {
  if (s == "PROGRESS") return AgentEventKind::Progress;
  if (s == "COMPLETED") return AgentEventKind::Completed;
  if (s == "ERROR") return AgentEventKind::Error;
  if (s == "USER_UPLOAD") return AgentEventKind::UserUpload;
  return std::nullopt;
}

struct AgentEvent {
  std::string agent_id;
  std::string transfer_id;
  uint32_t attempt = 0;
  uint64_t seq = 0;  // strictly increasing per (transfer_id, attempt)
  AgentEventKind kind = AgentEventKind::Progress;
  uint64_t bytes_transferred = 0;
  std::optional<uint64_t> total_bytes;
  std::optional<std::string> digest_source;
  std::optional<std::string> digest_destination;
  std::optional<Error> error;
  std::string detail;

  json to_json() const {
    json j{{"agent_id", agent_id},
           {"transfer_id", transfer_id},
           {"attempt", attempt},
           {"seq", seq},
           {"kind", to_string(kind)},
           {"bytes_transferred", bytes_transferred}};
    if (total_bytes) j["total_bytes"] = *total_bytes;
    if (digest_source) j["digest_source"] = *digest_source;
    if (digest_destination) j["digest_destination"] = *digest_destination;
    if (error) j["error"] = mft::to_json(*error);
    if (!detail.empty()) j["detail"] = detail;
    return j;
  }

  static Result<AgentEvent> from_json(const json& j) {
    AgentEvent e;
    e.agent_id = j.value("agent_id", "");
    e.transfer_id = j.value("transfer_id", "");
    e.attempt = j.value("attempt", 0u);
    e.seq = j.value("seq", 0ull);
    auto kind = agent_event_kind_from_string(j.value("kind", ""));
    if (!kind) return make_error("Malformed", "unknown event kind");
    e.kind = *kind;
    e.bytes_transferred = j.value("bytes_transferred", 0ull);
    if (j.contains("total_bytes")) e.total_bytes = j["total_bytes"].get<uint64_t>();
    if (j.contains("digest_source")) e.digest_source = j["digest_source"];
    if (j.contains("digest_destination")) e.digest_destination = j["digest_destination"];
    if (j.contains("error")) e.error = error_from_json(j["error"]);
    e.detail = j.value("detail", "");
    return e;
  }
};

struct RegisterReply {
  int64_t poll_interval_ms = 0;
  int64_t liveness_window_s = 0;
  int64_t heartbeat_interval_s = 0;
};

// ---------------------------------------------------------------------------
// Controller
// ---------------------------------------------------------------------------

struct ControllerConfig {
  int64_t tick_ms = 500;            // dispatch scheduler period
  int64_t liveness_window_s = 30;   // 3 missed 10 s heartbeats = dead
  int64_t stall_timeout_s = 120;    // no events on a live executor
  RetryPolicy retry;
  uint64_t default_chunk_bytes = kDefaultChunkBytes;
  int64_t command_token_ttl_s = 3600;
  int64_t grant_ttl_s = 900;  // grants are multi-redeemable until expiry
  int64_t max_poll_wait_s = 30;
  fs::path journal_dir;  // empty disables persistence
  int snapshot_every = 256;
  // Injectable clock (milliseconds since epoch) so tests can drive liveness
  // windows and backoff deterministically.
  std::function<int64_t()> clock_ms = unix_millis;
};

/// Orchestration brain: admits requests, plans modes, dispatches commands to
/// agents over their long-poll queues, tracks progress events, detects
/// stalls, retries with backoff, and persists records through an append-only
/// journal with periodic snapshots. All record mutations are serialized
/// behind one lock; the control plane never carries file bytes.
class Controller {
 public:
  Controller(ControllerConfig config, ResourceBackend& resources, CredentialBackend& credentials,
             ClusterSecret secret)
      : config_(std::move(config)),
        resources_(resources),
        credentials_(credentials),
        secret_(std::move(secret)) {
    if (!config_.journal_dir.empty()) {
      mkdirs(config_.journal_dir);
      replay_journal();
    }
  }

  ~Controller() { stop(); }

  void start() {
    bool expected = false;
    if (!running_.compare_exchange_strong(expected, true)) return;
    scheduler_ = std::thread([this] {
      while (running_.load()) {
        run_scheduler_once(now_s());
        std::unique_lock<std::mutex> lk(wake_mu_);
        wake_cv_.wait_for(lk, std::chrono::milliseconds(config_.tick_ms),
                          [this] { return !running_.load(); });
      }
    });
  }

  void stop() {
    if (running_.exchange(false)) {
      wake_cv_.notify_all();
      if (scheduler_.joinable()) scheduler_.join();
      queue_cv_.notify_all();
    }
  }

  // ---- public API surface -------------------------------------------------

  /// Admit a validated request: resolve endpoints, evaluate liveness, plan,
  /// issue grants, persist. Returns the record even when planning fails
  /// terminally (FAILED with NoAgentPath).
  Result<TransferRecord> admit(const TransferRequest& request) {
    auto validated = validate_request(request);
    if (!validated.ok()) return validated.error();
    const auto& req = validated.value();

    auto src_ep = resources_.get_endpoint(req.source.endpoint_id);
    if (!src_ep.ok()) return src_ep.error();
    auto dst_ep = resources_.get_endpoint(req.destination.endpoint_id);
    if (!dst_ep.ok()) return dst_ep.error();

    std::lock_guard<std::mutex> lk(mu_);
    int64_t now = now_s();

    TransferRecord rec;
    rec.transfer_id = rand_id();
    rec.request = req;
    rec.created_at_s = now;

    auto plan = plan_transfer(req, pick_live_agent_locked(src_ep.value(), now),
                              pick_live_agent_locked(dst_ep.value(), now));
    if (plan.ok()) {
      rec.mode = plan.value().mode;
      rec.executor_agent_id = plan.value().executor_agent_id;
      rec = apply_transition(rec, TransferEvent::Planned, now,
                             strcat("mode=", to_string(plan.value().mode), " executor=",
                                    plan.value().executor_agent_id))
                .take();
      auto grants = ensure_grants_locked(rec, src_ep.value(), dst_ep.value(), now);
      if (!grants.ok()) return grants.error();
    } else {
      rec.last_error = plan.error();
      rec = apply_transition(rec, TransferEvent::AttemptsExhausted, now, "NoAgentPath").take();
    }

    records_[rec.transfer_id] = rec;
    order_.push_back(rec.transfer_id);
    journal_append_locked(rec);
    log_info("ctrl", strcat("admitted transfer ", rec.transfer_id, " state ",
                            to_string(rec.state)));
    return rec;
  }

  Result<TransferRecord> get_record(const std::string& transfer_id) {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = records_.find(transfer_id);
    if (it == records_.end()) {
      return make_error("UnknownTransfer", strcat("no transfer ", transfer_id));
    }
    return it->second;
  }

  /// Newest first; `after` is an exclusive cursor by transfer id.
  std::vector<TransferRecord> list_records(const std::optional<TransferState>& state,
                                           size_t limit, const std::string& after) {
    std::lock_guard<std::mutex> lk(mu_);
    std::vector<TransferRecord> out;
    bool cursor_seen = after.empty();
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      const auto& rec = records_[*it];
      if (!cursor_seen) {
        if (rec.transfer_id == after) cursor_seen = true;
        continue;
      }
      if (state && rec.state != *state) continue;
      out.push_back(rec);
      if (out.size() >= limit) break;
    }
    return out;
  }

  Result<TransferRecord> cancel(const std::string& transfer_id) {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = records_.find(transfer_id);
    if (it == records_.end()) {
      return make_error("UnknownTransfer", strcat("no transfer ", transfer_id));
    }
    if (is_terminal(it->second.state)) {
      return make_error("AlreadyTerminal", strcat("transfer already ",
                                                  to_string(it->second.state)));
    }
    auto out = apply_transition(it->second, TransferEvent::Cancel, now_s(), "Cancel");
    it->second = out.take();
    journal_append_locked(it->second);

    // Best-effort cleanup on every agent that may hold state for this
    // transfer: the executor plus any agent serving either endpoint.
    TransferCommand cancel_cmd;
    cancel_cmd.type = "cancel";
    cancel_cmd.transfer_id = transfer_id;
    std::set<std::string> targets;
    if (it->second.executor_agent_id) targets.insert(*it->second.executor_agent_id);
    for (auto& [agent_id, agent] : agents_) {
      if (agent.served_endpoint_ids.count(it->second.request.source.endpoint_id) ||
          agent.served_endpoint_ids.count(it->second.request.destination.endpoint_id)) {
        targets.insert(agent_id);
      }
    }
    for (const auto& target : targets) {
      cancel_cmd.command_id = rand_id();
      queues_[target].push_back(cancel_cmd.to_json());
    }
    queue_cv_.notify_all();
    return it->second;
  }

  // ---- control plane (agents) ---------------------------------------------

  RegisterReply register_agent(const std::string& agent_id,
                               const std::set<std::string>& served_endpoint_ids,
                               const std::string& data_channel_url,
                               const std::string& user_http_url) {
    std::lock_guard<std::mutex> lk(mu_);
    AgentDescriptor& agent = agents_[agent_id];
    agent.agent_id = agent_id;
    agent.served_endpoint_ids = served_endpoint_ids;
    agent.data_channel_url = data_channel_url;
    agent.user_http_url = user_http_url;
    agent.last_heartbeat_s = now_s();
    log_info("ctrl", strcat("agent ", agent_id, " registered, serving ",
                            served_endpoint_ids.size(), " endpoint(s)"));
    RegisterReply reply;
    reply.poll_interval_ms = config_.tick_ms;
    reply.liveness_window_s = config_.liveness_window_s;
    reply.heartbeat_interval_s = std::max<int64_t>(1, config_.liveness_window_s / 3);
    return reply;
  }

  Status heartbeat(const std::string& agent_id,
                   const std::set<std::string>& running_transfer_ids) {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = agents_.find(agent_id);
    if (it == agents_.end()) {
      return make_error("UnknownAgent", strcat("agent ", agent_id, " not registered"));
    }
    it->second.last_heartbeat_s = now_s();
    it->second.running_transfer_ids = running_transfer_ids;
    return ok_status();
  }

  /// Long-poll: blocks up to wait_s for commands, drains the queue.
  Result<std::vector<json>> poll_commands(const std::string& agent_id, int64_t wait_s) {
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (!agents_.count(agent_id)) {
        return make_error("UnknownAgent", strcat("agent ", agent_id, " not registered"));
      }
    }
    wait_s = std::clamp<int64_t>(wait_s, 0, config_.max_poll_wait_s);
    std::unique_lock<std::mutex> lk(mu_);
    queue_cv_.wait_for(lk, std::chrono::seconds(wait_s),
                       [&] { return !queues_[agent_id].empty() || !running_.load(); });
    std::vector<json> out;
    auto& queue = queues_[agent_id];
    while (!queue.empty()) {
      out.push_back(std::move(queue.front()));
      queue.pop_front();
    }
    return out;
  }

  Status ingest_events(const std::string& agent_id, const std::vector<AgentEvent>& events) {
    std::lock_guard<std::mutex> lk(mu_);
    for (const auto& ev : events) ingest_one_locked(agent_id, ev);
    return ok_status();
  }

  std::vector<json> list_agents() {
    std::lock_guard<std::mutex> lk(mu_);
    int64_t now = now_s();
    std::vector<json> out;
    for (auto& [_, agent] : agents_) {
      out.push_back(to_json(agent, now, config_.liveness_window_s));
    }
    return out;
  }

  /// Agent-side credential delegation: verify the CRED_REDEEM token, then
  /// look the grant up. Every redemption is audited.
  Result<CredentialPayload> redeem_grant(const std::string& wire_token,
                                         const std::string& agent_id) {
    int64_t now = now_s();
    auto parsed = parse_token(secret_, wire_token, now, kDefaultClockSkewGraceSeconds);
    if (!parsed.ok()) return make_error("Unauthorized", parsed.error().message);
    if (parsed.value().verb != TokenVerb::CredRedeem) {
      return make_error("Unauthorized", "token verb is not CRED_REDEEM");
    }
    return credentials_.redeem_grant(parsed.value().subject, agent_id, now);
  }

  /// Mint a user-facing upload or download URL against a live agent serving
  /// the endpoint.
  Result<std::pair<std::string, int64_t>> make_user_url(TokenVerb verb,
                                                        const std::string& endpoint_id,
                                                        const std::string& path,
                                                        int64_t ttl_s) {
    auto ep = resources_.get_endpoint(endpoint_id);
    if (!ep.ok()) return ep.error();
    auto normalized = normalize_path(path);
    if (!normalized.ok()) return normalized.error();

    std::lock_guard<std::mutex> lk(mu_);
    int64_t now = now_s();
    auto agent = pick_live_agent_locked(ep.value(), now);
    if (!agent || agent->user_http_url.empty()) {
      return make_error("NoLiveAgent", strcat("no live agent serves ", endpoint_id));
    }
    auto token = mint_token(secret_, strcat("user-", rand_id()), verb, endpoint_id,
                            normalized.value(), ttl_s, now);
    if (!token.ok()) return token.error();
    return std::make_pair(strcat(agent->user_http_url, "/user/files?token=", token.value()),
                          now + ttl_s);
  }

  bool endpoint_in_use(const std::string& endpoint_id) {
    std::lock_guard<std::mutex> lk(mu_);
    for (auto& [_, rec] : records_) {
      if (is_terminal(rec.state)) continue;
      if (rec.request.source.endpoint_id == endpoint_id ||
          rec.request.destination.endpoint_id == endpoint_id) {
        return true;
      }
    }
    return false;
  }

  // ---- scheduler ------------------------------------------------------------

  /// One scheduler pass: elapse backoffs, dispatch PLANNED records, detect
  /// stalls and dead executors. Public so tests can drive time explicitly.
  void run_scheduler_once(int64_t now_s) {
    std::lock_guard<std::mutex> lk(mu_);
    scan_liveness_locked(now_s);
    dispatch_pending_locked(now_s);
  }

  const ControllerConfig& config() const { return config_; }

  int64_t now_ms() const { return config_.clock_ms(); }
  int64_t now_s() const { return config_.clock_ms() / 1000; }

  /// Serialize all records to the snapshot file and truncate the journal.
  void snapshot_now() {
    std::lock_guard<std::mutex> lk(mu_);
    snapshot_locked();
  }

 private:
  // ---- helpers (mu_ held) --------------------------------------------------

  std::optional<AgentDescriptor> pick_live_agent_locked(const StorageEndpoint& ep,
                                                        int64_t now_s) {
    // Endpoint-declared affinity wins, then agent-declared serving, in id
    // order for determinism.
    for (const auto& preferred : ep.agent_affinity) {
      auto it = agents_.find(preferred);
      if (it != agents_.end() && it->second.is_live(now_s, config_.liveness_window_s) &&
          it->second.served_endpoint_ids.count(ep.endpoint_id)) {
        return it->second;
      }
    }
    for (auto& [_, agent] : agents_) {
      if (agent.is_live(now_s, config_.liveness_window_s) &&
          agent.served_endpoint_ids.count(ep.endpoint_id)) {
        return agent;
      }
    }
    return std::nullopt;
  }

  /// Issue (or refresh) grants for any credentialed endpoint of the
  /// transfer; the wire token is cached for command construction.
  Status ensure_grants_locked(const TransferRecord& rec, const StorageEndpoint& src,
                              const StorageEndpoint& dst, int64_t now_s) {
    for (const auto* ep : {&src, &dst}) {
      if (!ep->credential_ref) continue;
      auto key = strcat(rec.transfer_id, "|", ep->endpoint_id);
      auto cached = grant_tokens_.find(key);
      if (cached != grant_tokens_.end() && cached->second.second > now_s + 60) continue;
      auto grant = credentials_.issue_grant(*ep->credential_ref, rec.transfer_id,
                                            config_.grant_ttl_s, now_s);
      if (!grant.ok()) return grant.error();
      auto token = mint_token(secret_, grant.value().grant_id, TokenVerb::CredRedeem,
                              ep->endpoint_id, "-", config_.grant_ttl_s, now_s);
      if (!token.ok()) return token.error();
      grant_tokens_[key] = {token.value(), grant.value().expires_at};
    }
    return ok_status();
  }

  std::optional<std::string> grant_token_locked(const std::string& transfer_id,
                                                const StorageEndpoint& ep) {
    if (!ep.credential_ref) return std::nullopt;
    auto it = grant_tokens_.find(strcat(transfer_id, "|", ep.endpoint_id));
    if (it == grant_tokens_.end()) return std::nullopt;
    return it->second.first;
  }

  int dispatch_pending_locked(int64_t now_s) {
    int dispatched = 0;
    for (auto& [tid, rec] : records_) {
      if (rec.state != TransferState::Planned) continue;

      auto src_ep = resources_.get_endpoint(rec.request.source.endpoint_id);
      auto dst_ep = resources_.get_endpoint(rec.request.destination.endpoint_id);
      if (!src_ep.ok() || !dst_ep.ok()) {
        fail_attempt_locked(rec, make_error("UnknownEndpoint", "endpoint removed"), now_s);
        continue;
      }

      // Re-plan when the chosen executor is no longer live; liveness may
      // have changed since planning (or since a retry).
      auto executor = rec.executor_agent_id ? agents_.find(*rec.executor_agent_id)
                                            : agents_.end();
      bool executor_live = executor != agents_.end() &&
                           executor->second.is_live(now_s, config_.liveness_window_s);
      if (!executor_live) {
        auto plan = plan_transfer(rec.request, pick_live_agent_locked(src_ep.value(), now_s),
                                  pick_live_agent_locked(dst_ep.value(), now_s));
        if (!plan.ok()) {
          // Keep waiting in PLANNED: an agent may come back. Terminal
          // NoAgentPath only applies at admission.
          continue;
        }
        if (rec.mode != plan.value().mode ||
            rec.executor_agent_id != plan.value().executor_agent_id) {
          log_info("ctrl", strcat("re-planned ", tid, " to mode ",
                                  to_string(plan.value().mode), " executor ",
                                  plan.value().executor_agent_id));
        }
        rec.mode = plan.value().mode;
        rec.executor_agent_id = plan.value().executor_agent_id;
      }

      auto grants = ensure_grants_locked(rec, src_ep.value(), dst_ep.value(), now_s);
      if (!grants.ok()) {
        fail_attempt_locked(rec, grants.error(), now_s);
        continue;
      }

      auto cmd = build_command_locked(rec, src_ep.value(), dst_ep.value(), now_s);
      if (!cmd.ok()) {
        fail_attempt_locked(rec, cmd.error(), now_s);
        continue;
      }

      rec = apply_transition(rec, TransferEvent::Dispatched, now_s,
                             strcat("command ", cmd.value().command_id, " to ",
                                    *rec.executor_agent_id))
                .take();
      queues_[*rec.executor_agent_id].push_back(cmd.value().to_json());
      last_event_ms_[tid] = now_s * 1000;
      journal_append_locked(rec);
      ++dispatched;
    }
    if (dispatched) queue_cv_.notify_all();
    return dispatched;
  }

  Result<TransferCommand> build_command_locked(const TransferRecord& rec,
                                               const StorageEndpoint& src_ep,
                                               const StorageEndpoint& dst_ep, int64_t now_s) {
    TransferCommand cmd;
    cmd.command_id = rand_id();
    cmd.transfer_id = rec.transfer_id;
    cmd.attempt = rec.attempt;
    cmd.mode = rec.mode;
    cmd.chunk_bytes = rec.request.requested_chunk_bytes.value_or(config_.default_chunk_bytes);
    cmd.verify_digest = rec.request.verify_digest;

    cmd.source.role = "connector";
    cmd.source.path = rec.request.source.path;
    cmd.source.endpoint = src_ep;
    cmd.source.grant_token = grant_token_locked(rec.transfer_id, src_ep);

    if (rec.mode == TransferMode::AgentToAgent) {
      auto dest_agent = pick_live_agent_locked(dst_ep, now_s);
      if (!dest_agent) return make_error("NoAgentPath", "destination agent vanished", true);
      cmd.destination.role = "data_channel";
      cmd.destination.endpoint_id = dst_ep.endpoint_id;
      cmd.destination.path = rec.request.destination.path;
      cmd.destination.data_channel_url = dest_agent->data_channel_url;
      auto create = mint_token(secret_, rec.transfer_id, TokenVerb::DataCreate,
                               dst_ep.endpoint_id, rec.request.destination.path,
                               config_.command_token_ttl_s, now_s);
      auto patch = mint_token(secret_, rec.transfer_id, TokenVerb::DataPatch, dst_ep.endpoint_id,
                              rec.request.destination.path, config_.command_token_ttl_s, now_s);
      if (!create.ok()) return create.error();
      if (!patch.ok()) return patch.error();
      cmd.destination.create_token = create.value();
      cmd.destination.patch_token = patch.value();
    } else {
      cmd.destination.role = "connector";
      cmd.destination.path = rec.request.destination.path;
      cmd.destination.endpoint = dst_ep;
      cmd.destination.grant_token = grant_token_locked(rec.transfer_id, dst_ep);
    }
    return cmd;
  }

  void fail_attempt_locked(TransferRecord& rec, const Error& err, int64_t now_s) {
    rec.last_error = err;
    auto failed = apply_transition(rec, TransferEvent::AttemptFailed, now_s, err.code);
    if (!failed.ok()) return;  // terminal already; nothing to do
    rec = failed.take();
    if (rec.attempt >= config_.retry.max_attempts) {
      rec = apply_transition(rec, TransferEvent::AttemptsExhausted, now_s,
                             strcat("attempts exhausted after ", rec.attempt))
                .take();
      retry_at_ms_.erase(rec.transfer_id);
    } else {
      retry_at_ms_[rec.transfer_id] =
          now_s * 1000 + static_cast<int64_t>(compute_backoff(config_.retry, rec.attempt));
    }
    journal_append_locked(rec);
    log_warn("ctrl", strcat("attempt ", rec.attempt, " of ", rec.transfer_id, " failed: ",
                            err.code, " (", err.message, ") state ", to_string(rec.state)));
  }

  int scan_liveness_locked(int64_t now_s) {
    int actions = 0;
    for (auto& [tid, rec] : records_) {
      if (rec.state == TransferState::RetryWait) {
        auto it = retry_at_ms_.find(tid);
        int64_t due = it == retry_at_ms_.end() ? 0 : it->second;
        if (now_s * 1000 >= due) {
          rec = apply_transition(rec, TransferEvent::BackoffElapsed, now_s, "BackoffElapsed")
                    .take();
          retry_at_ms_.erase(tid);
          journal_append_locked(rec);
          ++actions;
        }
        continue;
      }
      if (rec.state != TransferState::Dispatched && rec.state != TransferState::Running) {
        continue;
      }
      auto agent = rec.executor_agent_id ? agents_.find(*rec.executor_agent_id) : agents_.end();
      bool live = agent != agents_.end() &&
                  agent->second.is_live(now_s, config_.liveness_window_s);
      if (!live) {
        fail_attempt_locked(rec, make_error("AgentLost", "executor missed liveness window",
                                            true),
                            now_s);
        ++actions;
        continue;
      }
      auto last = last_event_ms_.find(tid);
      int64_t last_ms = last == last_event_ms_.end() ? 0 : last->second;
      if (now_s * 1000 - last_ms > config_.stall_timeout_s * 1000) {
        fail_attempt_locked(rec, make_error("Stalled", "no agent events within stall timeout",
                                            true),
                            now_s);
        ++actions;
      }
    }
    return actions;
  }

  void ingest_one_locked(const std::string& agent_id, const AgentEvent& ev) {
    if (ev.kind == AgentEventKind::UserUpload) {
      log_info("ctrl", strcat("user upload completed via agent ", agent_id, ": ", ev.detail));
      return;
    }
    auto it = records_.find(ev.transfer_id);
    if (it == records_.end()) {
      log_warn("ctrl", strcat("event for unknown transfer ", ev.transfer_id, " discarded"));
      return;
    }
    TransferRecord& rec = it->second;
    if (is_terminal(rec.state)) {
      log_info("ctrl", strcat("event for terminal transfer ", ev.transfer_id, " discarded"));
      return;
    }
    if (ev.attempt != rec.attempt) {
      log_info("ctrl", strcat("stale event (attempt ", ev.attempt, " != ", rec.attempt,
                              ") for ", ev.transfer_id, " discarded"));
      return;
    }
    auto seq_key = strcat(ev.transfer_id, "|", ev.attempt);
    if (ev.seq <= last_seq_[seq_key]) return;  // duplicate delivery
    last_seq_[seq_key] = ev.seq;
    last_event_ms_[ev.transfer_id] = now_ms();
    int64_t now = now_s();

    switch (ev.kind) {
      case AgentEventKind::Progress: {
        if (rec.state == TransferState::Dispatched) {
          rec = apply_transition(rec, TransferEvent::ProgressStarted, now, "ProgressStarted")
                    .take();
          journal_append_locked(rec);
        }
        rec.bytes_transferred = std::max(rec.bytes_transferred, ev.bytes_transferred);
        if (ev.total_bytes) rec.total_bytes = ev.total_bytes;
        break;
      }
      case AgentEventKind::Completed: {
        if (rec.state == TransferState::Dispatched) {
          rec = apply_transition(rec, TransferEvent::ProgressStarted, now, "ProgressStarted")
                    .take();
        }
        rec.digest_source = ev.digest_source;
        rec.digest_destination = ev.digest_destination;
        if (ev.total_bytes) rec.total_bytes = ev.total_bytes;
        rec.bytes_transferred = std::max(rec.bytes_transferred, ev.bytes_transferred);
        if (rec.request.verify_digest) {
          if (!ev.digest_source) {
            fail_attempt_locked(rec, make_error("DigestMissing",
                                                "completion lacked a source digest", true),
                                now);
            break;
          }
          // A destination that cannot report a digest (plain HTTP) yields an
          // absent value; equality is enforced whenever both sides exist.
          if (ev.digest_destination && *ev.digest_source != *ev.digest_destination) {
            fail_attempt_locked(rec,
                                make_error("DigestMismatch",
                                           strcat("source ", *ev.digest_source, " != destination ",
                                                  *ev.digest_destination),
                                           true),
                                now);
            break;
          }
        }
        rec = apply_transition(rec, TransferEvent::Completed, now, "Completed").take();
        journal_append_locked(rec);
        log_info("ctrl", strcat("transfer ", rec.transfer_id, " COMPLETED, ",
                                rec.bytes_transferred, " byte(s)"));
        break;
      }
      case AgentEventKind::Error: {
        fail_attempt_locked(rec, ev.error.value_or(make_error("AgentError", "unspecified", true)),
                            now);
        break;
      }
      case AgentEventKind::UserUpload:
        break;  // handled above
    }
  }

  // ---- persistence (mu_ held) ----------------------------------------------

  void journal_append_locked(const TransferRecord& rec) {
    if (config_.journal_dir.empty()) return;
    if (!journal_.is_open()) {
      journal_.open(config_.journal_dir / "journal.ndjson", /*truncate=*/false);
    }
    if (journal_.is_open()) {
      auto line = strcat(json{{"record", to_json(rec)}}.dump(), "\n");
      journal_.write(line.data(), line.size());
      journal_.sync();
    }
    if (++journal_appends_ >= config_.snapshot_every) snapshot_locked();
  }

  void snapshot_locked() {
    if (config_.journal_dir.empty()) return;
    json records = json::array();
    for (const auto& tid : order_) records.push_back(to_json(records_[tid]));
    json doc{{"version", 1}, {"records", std::move(records)}};
    write_file_atomic(config_.journal_dir / "snapshot.json", doc.dump());
    journal_.close();
    std::ofstream truncate_out(config_.journal_dir / "journal.ndjson", std::ios::trunc);
    journal_appends_ = 0;
  }

  void replay_journal() {
    auto snapshot = read_file(config_.journal_dir / "snapshot.json");
    if (snapshot) {
      try {
        auto doc = json::parse(*snapshot);
        for (const auto& r : doc.value("records", json::array())) {
          auto rec = transfer_record_from_json(r);
          records_[rec.transfer_id] = rec;
          order_.push_back(rec.transfer_id);
        }
      } catch (...) {
        log_error("ctrl", "snapshot unreadable; starting from journal only");
      }
    }
    auto journal = read_file(config_.journal_dir / "journal.ndjson");
    if (journal) {
      for (const auto& line : split(*journal, '\n')) {
        if (line.empty()) continue;
        try {
          auto doc = json::parse(line);
          auto rec = transfer_record_from_json(doc.at("record"));
          if (!records_.count(rec.transfer_id)) order_.push_back(rec.transfer_id);
          records_[rec.transfer_id] = rec;
        } catch (...) {
          log_error("ctrl", "skipping malformed journal line");
        }
      }
    }
    // Give survivors a fresh stall budget; agents re-report after restart.
    for (auto& [tid, rec] : records_) {
      if (rec.state == TransferState::Dispatched || rec.state == TransferState::Running) {
        last_event_ms_[tid] = now_ms();
      }
    }
    if (!records_.empty()) {
      log_info("ctrl", strcat("recovered ", records_.size(), " record(s) from journal"));
    }
  }

  ControllerConfig config_;
  ResourceBackend& resources_;
  CredentialBackend& credentials_;
  ClusterSecret secret_;

  std::mutex mu_;  // single-writer domain for records, agents, queues
  std::map<std::string, TransferRecord> records_;
  std::vector<std::string> order_;
  std::map<std::string, AgentDescriptor> agents_;
  std::map<std::string, std::deque<json>> queues_;
  std::condition_variable queue_cv_;
  std::map<std::string, uint64_t> last_seq_;
  std::map<std::string, int64_t> last_event_ms_;
  std::map<std::string, int64_t> retry_at_ms_;
  std::map<std::string, std::pair<std::string, int64_t>> grant_tokens_;

  AppendFile journal_;
  int journal_appends_ = 0;

  std::atomic<bool> running_{false};
  std::thread scheduler_;
  std::mutex wake_mu_;
  std::condition_variable wake_cv_;
};

}  // namespace mft
