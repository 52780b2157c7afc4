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

#include <atomic>
#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "mft/client.hpp"
#include "mft/connector.hpp"
#include "mft/controller.hpp"
#include "mft/core.hpp"
#include "mft/fsio.hpp"
#include "mft/logging.hpp"
#include "mft/token.hpp"
#include "mft/tus.hpp"

namespace mft {

// The transfer-executing daemon deployed near storage: registers with the
// controller, heartbeats, long-polls commands, runs transfers through
// connectors and the TUS data channel, and serves the data-channel plus
// user upload/download endpoints on one listener (/tus/* and /user/*).

struct ServedEndpoint {
  StorageEndpoint endpoint;
  std::optional<CredentialPayload> credential;  // local credential, never sent anywhere
};

struct AgentConfig {
  std::string agent_id;
  std::string controller_url;
  std::string cluster_token;
  ClusterSecret cluster_secret;
  std::vector<ServedEndpoint> served;
  std::string listen_host = "127.0.0.1";
  int listen_port = 0;  // 0 = ephemeral
  std::string advertised_data_channel_url;  // defaults to the bound listener
  std::string advertised_user_http_url;     // defaults to the bound listener
  fs::path staging_dir;
  uint64_t chunk_bytes = kDefaultChunkBytes;
  int transfer_slots = 4;
  int64_t poll_wait_s = 25;
  int64_t skew_grace_s = kDefaultClockSkewGraceSeconds;
  uint64_t max_upload_bytes = tus::kDefaultMaxUploadBytes;
  int64_t session_ttl_s = tus::kDefaultSessionTtlSeconds;
  std::string log_file;

  json to_json() const {
    json served_arr = json::array();
    for (const auto& s : served) {
      json one{{"endpoint", mft::to_json(s.endpoint)}};
      if (s.credential) one["credential"] = s.credential->to_json();
      served_arr.push_back(std::move(one));
    }
    return json{{"agent_id", agent_id},
                {"controller_url", controller_url},
                {"cluster_token", cluster_token},
                {"cluster_hmac", cluster_secret.serialize()},
                {"served_endpoints", std::move(served_arr)},
                {"listen_host", listen_host},
                {"listen_port", listen_port},
                {"data_channel_url", advertised_data_channel_url},
                {"user_http_url", advertised_user_http_url},
                {"staging_dir", staging_dir.string()},
                {"chunk_bytes", chunk_bytes},
                {"transfer_slots", transfer_slots},
                {"poll_wait_s", poll_wait_s},
                {"session_ttl_s", session_ttl_s},
                {"log_file", log_file}};
  }

  static Result<AgentConfig> from_json(const json& j) {
    AgentConfig c;
    c.agent_id = j.value("agent_id", "");
    c.controller_url = j.value("controller_url", "");
    c.cluster_token = j.value("cluster_token", "");
    auto secret = ClusterSecret::parse(j.value("cluster_hmac", ""));
    if (!secret.ok()) return secret.error();
    c.cluster_secret = secret.take();
    for (const auto& s : j.value("served_endpoints", json::array())) {
      ServedEndpoint served;
      auto ep = storage_endpoint_from_json(s.at("endpoint"));
      if (!ep.ok()) return ep.error();
      served.endpoint = ep.take();
      if (s.contains("credential")) {
        auto cred = CredentialPayload::from_json(s["credential"]);
        if (!cred.ok()) return cred.error();
        served.credential = cred.take();
      }
      c.served.push_back(std::move(served));
    }
    c.listen_host = j.value("listen_host", "127.0.0.1");
    c.listen_port = j.value("listen_port", 0);
    c.advertised_data_channel_url = j.value("data_channel_url", "");
    c.advertised_user_http_url = j.value("user_http_url", "");
    c.staging_dir = j.value("staging_dir", "");
    c.chunk_bytes = j.value("chunk_bytes", kDefaultChunkBytes);
    c.transfer_slots = j.value("transfer_slots", 4);
    c.poll_wait_s = j.value("poll_wait_s", int64_t{25});
    c.session_ttl_s = j.value("session_ttl_s", tus::kDefaultSessionTtlSeconds);
    c.log_file = j.value("log_file", "");
    if (c.agent_id.empty()) return make_error("BadConfig", "agent_id is required");
    if (c.staging_dir.empty()) return make_error("BadConfig", "staging_dir is required");
    return c;
  }

  /// Load from a config file, applying the documented environment overrides
  /// MFT_CONTROLLER_URL, MFT_CLUSTER_TOKEN, MFT_CLUSTER_HMAC.
  static Result<AgentConfig> load(const fs::path& path) {
    auto content = read_file(path);
    if (!content) return make_error("BadConfig", strcat("cannot read config ", path.string()));
    json doc;
    try {
      doc = json::parse(*content);
    } catch (...) {
      return make_error("BadConfig", "config file is not valid JSON");
    }
    if (const char* url = std::getenv("MFT_CONTROLLER_URL")) doc["controller_url"] = url;
    if (const char* tok = std::getenv("MFT_CLUSTER_TOKEN")) doc["cluster_token"] = tok;
    if (const char* hmac = std::getenv("MFT_CLUSTER_HMAC")) doc["cluster_hmac"] = hmac;
    return from_json(doc);
  }
};

class AgentRuntime {
 public:
  explicit AgentRuntime(AgentConfig config) : config_(std::move(config)) {
    mkdirs(config_.staging_dir);
    load_dedupe();
  }

  ~AgentRuntime() { stop(); }

  /// Bind the listener, start every loop, and return once registration has
  /// been handed to the background registrar (which retries forever).
  Status start() {
    for (const auto& s : config_.served) {
      auto valid = validate_endpoint(s.endpoint);
      if (!valid.ok()) return valid.error();
    }

    tus::TusConfig tus_config;
    tus_config.session_dir = config_.staging_dir / "tus";
    tus_config.secret = config_.cluster_secret;
    tus_config.skew_grace_s = config_.skew_grace_s;
    tus_config.max_upload_bytes = config_.max_upload_bytes;
    tus_config.session_ttl_s = config_.session_ttl_s;
    tus_config.resolve_connector = [this](const std::string& id) {
      return make_served_connector(id);
    };
    tus_ = std::make_unique<tus::TusService>(std::move(tus_config));
    tus_->recover();
    tus_->attach(server_);
    configure_user_routes();
    server_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("{\"ok\":true}", "application/json");
    });

    server_.new_task_queue = [] { return new httplib::ThreadPool(16); };
    server_.set_read_timeout(120, 0);
    server_.set_payload_max_length(config_.max_upload_bytes);
    if (config_.listen_port == 0) {
      port_ = server_.bind_to_any_port(config_.listen_host);
    } else {
      if (!server_.bind_to_port(config_.listen_host, config_.listen_port)) {
        return make_error("BadConfig", strcat("cannot bind ", config_.listen_host, ":",
                                              config_.listen_port));
      }
      port_ = config_.listen_port;
    }
    server_thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();

    if (config_.advertised_data_channel_url.empty()) {
      config_.advertised_data_channel_url = strcat("http://", config_.listen_host, ":", port_);
    }
    if (config_.advertised_user_http_url.empty()) {
      config_.advertised_user_http_url = strcat("http://", config_.listen_host, ":", port_);
    }
    log_info("agent", strcat(config_.agent_id, " listening on ", config_.listen_host, ":",
                             port_, ", data channel ", config_.advertised_data_channel_url));

    // httplib clients are not thread-safe; every loop owns its own link.
    link_ctl_ = std::make_unique<AgentLink>(config_.controller_url, config_.cluster_token,
                                            config_.agent_id);
    link_hb_ = std::make_unique<AgentLink>(config_.controller_url, config_.cluster_token,
                                           config_.agent_id);
    link_ev_ = std::make_unique<AgentLink>(config_.controller_url, config_.cluster_token,
                                           config_.agent_id);
    running_.store(true);

    control_thread_ = std::thread([this] { control_loop(); });
    event_thread_ = std::thread([this] { event_loop(); });
    for (int i = 0; i < config_.transfer_slots; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
    return ok_status();
  }

  void stop() {
    if (!running_.exchange(false)) return;
    work_cv_.notify_all();
    outbox_cv_.notify_all();
    sleep_cv_.notify_all();
    if (link_ctl_) link_ctl_->stop();
    if (link_hb_) link_hb_->stop();
    if (link_ev_) link_ev_->stop();
    server_.stop();
    if (server_thread_.joinable()) server_thread_.join();
    if (control_thread_.joinable()) control_thread_.join();
    if (event_thread_.joinable()) event_thread_.join();
    for (auto& w : workers_) {
      if (w.joinable()) w.join();
    }
    workers_.clear();
    log_info("agent", strcat(config_.agent_id, " stopped; staging remains durable"));
  }

  int port() const { return port_; }
  const AgentConfig& config() const { return config_; }
  tus::TusService* tus() { return tus_.get(); }
  bool registered() const { return registered_.load(); }

 private:
  // ---- connectors ------------------------------------------------------------

  std::shared_ptr<Connector> make_served_connector(const std::string& endpoint_id) {
    for (const auto& s : config_.served) {
      if (s.endpoint.endpoint_id != endpoint_id) continue;
      ConnectorContext ctx{config_.staging_dir / "spool"};
      auto conn = make_connector(s.endpoint, s.credential, ctx);
      if (!conn.ok()) {
        log_error("agent", strcat("connector for served endpoint ", endpoint_id, " failed: ",
                                  conn.error().message));
        return nullptr;
      }
      return std::shared_ptr<Connector>(conn.take());
    }
    return nullptr;
  }

  /// Resolve one side of a command: served endpoints use local config, remote
  /// ones use the command's endpoint copy plus a redeemed grant.
  Result<std::shared_ptr<Connector>> resolve_side(const CommandSide& side) {
    if (side.endpoint && side.role == "connector") {
      if (auto local = make_served_connector(side.endpoint->endpoint_id)) return local;
      std::optional<CredentialPayload> credential;
      if (side.grant_token) {
        AgentLink link(config_.controller_url, config_.cluster_token, config_.agent_id);
        auto redeemed = link.redeem(*side.grant_token);
        if (!redeemed.ok()) {
          return make_error("GrantRedemptionFailed", redeemed.error().message, true);
        }
        credential = redeemed.take();
      }
      ConnectorContext ctx{config_.staging_dir / "spool"};
      auto conn = make_connector(*side.endpoint, credential, ctx);
      if (!conn.ok()) return make_error("ConnectorError", conn.error().message, true);
      return std::shared_ptr<Connector>(conn.take());
    }
    return make_error("ConnectorError", "command side has no connector spec");
  }

  // ---- control loop -----------------------------------------------------------

  void control_loop() {
    int64_t backoff_ms = 250;
    RegisterReply reply;
    while (running_.load()) {
      std::set<std::string> served_ids;
      for (const auto& s : config_.served) served_ids.insert(s.endpoint.endpoint_id);
      auto r = link_ctl_->register_agent(served_ids, config_.advertised_data_channel_url,
                                         config_.advertised_user_http_url);
      if (r.ok()) {
        reply = r.value();
        registered_.store(true);
        log_info("agent", strcat(config_.agent_id, " registered; heartbeat every ",
                                 reply.heartbeat_interval_s, "s"));
        break;
      }
      log_warn("agent", strcat("registration failed (", r.error().message, "), retrying"));
      interruptible_sleep(backoff_ms);
      backoff_ms = std::min<int64_t>(backoff_ms * 2, 5000);
    }

    heartbeat_thread_ = std::thread([this, reply] { heartbeat_loop(reply); });

    // Long-poll commands; on failure, retry forever with modest backoff.
    while (running_.load()) {
      auto commands = link_ctl_->poll_commands(config_.poll_wait_s);
      if (!commands.ok()) {
        if (commands.error().code == "UnknownAgent") {
          // Controller restarted and lost the registry: re-register.
          std::set<std::string> served_ids;
          for (const auto& s : config_.served) served_ids.insert(s.endpoint.endpoint_id);
          link_ctl_->register_agent(served_ids, config_.advertised_data_channel_url,
                                    config_.advertised_user_http_url);
        }
        interruptible_sleep(500);
        continue;
      }
      for (auto& cmd : commands.value()) enqueue_command(std::move(cmd));
      maybe_gc();
    }
    if (heartbeat_thread_.joinable()) heartbeat_thread_.join();
  }

  void heartbeat_loop(RegisterReply reply) {
    int64_t interval_ms = std::max<int64_t>(1, reply.heartbeat_interval_s) * 1000;
    while (running_.load()) {
      std::set<std::string> running_ids;
      {
        std::lock_guard<std::mutex> lk(mu_);
        for (auto& [tid, _] : running_transfers_) running_ids.insert(tid);
      }
      auto st = link_hb_->heartbeat(running_ids);
      if (!st.ok() && st.error().code == "UnknownAgent") {
        std::set<std::string> served_ids;
        for (const auto& s : config_.served) served_ids.insert(s.endpoint.endpoint_id);
        link_hb_->register_agent(served_ids, config_.advertised_data_channel_url,
                                 config_.advertised_user_http_url);
      }
      interruptible_sleep(interval_ms);
    }
  }

  void maybe_gc() {
    int64_t now = unix_seconds();
    if (now - last_gc_s_ >= 60) {
      last_gc_s_ = now;
      tus_->gc(now);
    }
  }

  void interruptible_sleep(int64_t ms) {
    std::unique_lock<std::mutex> lk(sleep_mu_);
    sleep_cv_.wait_for(lk, std::chrono::milliseconds(ms), [this] { return !running_.load(); });
  }

  // ---- command execution -----------------------------------------------------

  void enqueue_command(TransferCommand cmd) {
    if (cmd.type == "cancel") {
      handle_cancel(cmd);
      return;
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (auto it = completed_commands_.find(cmd.command_id); it != completed_commands_.end()) {
        // Replay: re-emit the terminal event with its original seq; the
        // controller deduplicates if it already saw it.
        log_info("agent", strcat("duplicate command ", cmd.command_id, ", re-emitting result"));
        enqueue_event_locked(it->second);
        return;
      }
      work_.push_back(std::move(cmd));
    }
    work_cv_.notify_one();
  }

  void handle_cancel(const TransferCommand& cmd) {
    log_info("agent", strcat("cancel for transfer ", cmd.transfer_id));
    std::shared_ptr<std::atomic<bool>> flag;
    {
      std::lock_guard<std::mutex> lk(mu_);
      auto it = running_transfers_.find(cmd.transfer_id);
      if (it != running_transfers_.end()) flag = it->second.cancel;
      canceled_transfers_.insert(cmd.transfer_id);
    }
    if (flag) flag->store(true);
    tus_->abort_transfer(cmd.transfer_id);
  }

  void worker_loop() {
    while (running_.load()) {
      TransferCommand cmd;
      {
        std::unique_lock<std::mutex> lk(mu_);
        work_cv_.wait(lk, [this] { return !work_.empty() || !running_.load(); });
        if (!running_.load()) return;
        cmd = std::move(work_.front());
        work_.pop_front();
        if (canceled_transfers_.count(cmd.transfer_id)) {
          log_info("agent", strcat("skipping canceled transfer ", cmd.transfer_id));
          continue;
        }
      }
      execute(cmd);
    }
  }

  struct RunningTransfer {
    uint32_t attempt = 0;
    std::shared_ptr<std::atomic<bool>> cancel;
  };

  void execute(const TransferCommand& cmd) {
    auto cancel_flag = std::make_shared<std::atomic<bool>>(false);
    {
      std::unique_lock<std::mutex> lk(mu_);
      // A newer attempt supersedes any execution still running for this
      // transfer: cancel it and wait for the slot to clear.
      auto it = running_transfers_.find(cmd.transfer_id);
      if (it != running_transfers_.end()) {
        it->second.cancel->store(true);
        running_gone_cv_.wait(lk, [&] {
          return !running_transfers_.count(cmd.transfer_id) || !running_.load();
        });
        if (!running_.load()) return;
      }
      running_transfers_[cmd.transfer_id] = {cmd.attempt, cancel_flag};
    }

    log_info("agent", strcat("executing ", cmd.transfer_id, " attempt ", cmd.attempt, " mode ",
                             cmd.mode ? to_string(*cmd.mode) : "?"));
    uint64_t seq = 0;
    auto emit = [&](AgentEvent ev) {
      ev.agent_id = config_.agent_id;
      ev.transfer_id = cmd.transfer_id;
      ev.attempt = cmd.attempt;
      ev.seq = ++seq;
      bool terminal = ev.kind == AgentEventKind::Completed || ev.kind == AgentEventKind::Error;
      std::lock_guard<std::mutex> lk(mu_);
      if (terminal) remember_command_locked(cmd.command_id, ev);
      enqueue_event_locked(ev);
    };

    auto outcome = run_transfer(cmd, *cancel_flag, emit);
    if (!outcome.ok() && !cancel_flag->load()) {
      AgentEvent err;
      err.kind = AgentEventKind::Error;
      err.error = outcome.error();
      emit(err);
      log_warn("agent", strcat(cmd.transfer_id, " attempt ", cmd.attempt, " failed: ",
                               outcome.error().code, " ", outcome.error().message));
    }

    {
      std::lock_guard<std::mutex> lk(mu_);
      running_transfers_.erase(cmd.transfer_id);
    }
    running_gone_cv_.notify_all();
  }

  /// The transfer body; returns an error for the ERROR event path. Emits
  /// PROGRESS events (rate-limited) and the COMPLETED event itself.
  Status run_transfer(const TransferCommand& cmd, std::atomic<bool>& cancel,
                      const std::function<void(AgentEvent)>& emit) {
    auto source = resolve_side(cmd.source);
    if (!source.ok()) return source.error();

    auto source_stat = source.value()->stat(cmd.source.path);
    if (!source_stat.ok() || !source_stat.value().exists) {
      return make_error("SourceVanished", strcat("source object missing: ", cmd.source.path),
                        true);
    }
    uint64_t total = source_stat.value().size_bytes.value_or(0);

    AgentEvent start;
    start.kind = AgentEventKind::Progress;
    start.bytes_transferred = 0;
    start.total_bytes = total;
    emit(start);

    if (cmd.mode == TransferMode::AgentToAgent) {
      auto url = tus::create_upload(cmd.destination.data_channel_url,
                                    cmd.destination.create_token.value_or(""), cmd.transfer_id,
                                    cmd.destination.path, total, std::nullopt);
      if (!url.ok()) return url.error();

      tus::TusClientOptions options;
      options.chunk_bytes = cmd.chunk_bytes;
      options.cancel = &cancel;
      options.on_progress = [&](uint64_t bytes) {
        AgentEvent ev;
        ev.kind = AgentEventKind::Progress;
        ev.bytes_transferred = bytes;
        ev.total_bytes = total;
        emit(ev);
      };
      auto outcome = tus::push_file(*source.value(), cmd.source.path, url.value(),
                                    cmd.destination.patch_token.value_or(""), options);
      if (!outcome.ok()) return outcome.error();

      AgentEvent done;
      done.kind = AgentEventKind::Completed;
      done.bytes_transferred = total;
      done.total_bytes = total;
      done.digest_source = outcome.value().source_sha256;
      if (!outcome.value().destination_sha256.empty()) {
        done.digest_destination = outcome.value().destination_sha256;
      }
      emit(done);
      return ok_status();
    }

    // Agent-to-storage (push or pull): stream source -> destination through
    // connectors with an incremental digest. Attempts start from scratch.
    auto dest = resolve_side(cmd.destination);
    if (!dest.ok()) return dest.error();

    const std::string& dest_path = cmd.destination.path;
    const std::string tag = cmd.transfer_id;
    dest.value()->abort_staged(dest_path, tag);

    auto reader = source.value()->read_range(cmd.source.path, 0, std::nullopt);
    if (!reader.ok()) return make_error("SourceVanished", reader.error().message, true);
    auto sink = dest.value()->write_at(dest_path, 0, tag);
    if (!sink.ok()) return make_error("ConnectorError", sink.error().message, true);

    Sha256 hash;
    uint64_t moved = 0;
    int64_t last_progress_ms = steady_millis();
    std::vector<char> buf(256 * 1024);
    while (true) {
      if (cancel.load()) {
        sink.value()->close(false);
        dest.value()->abort_staged(dest_path, tag);
        return make_error("Canceled", "transfer canceled", false);
      }
      auto got = reader.value()->read(buf.data(), buf.size());
      if (!got.ok()) return make_error("SourceVanished", got.error().message, true);
      if (got.value() == 0) break;
      auto wrote = sink.value()->write(buf.data(), got.value());
      if (!wrote.ok()) return make_error("ConnectorError", wrote.error().message, true);
      hash.update(buf.data(), got.value());
      moved += got.value();
      int64_t now_ms = steady_millis();
      if (now_ms - last_progress_ms >= 1000) {
        last_progress_ms = now_ms;
        AgentEvent ev;
        ev.kind = AgentEventKind::Progress;
        ev.bytes_transferred = moved;
        ev.total_bytes = total;
        emit(ev);
      }
    }
    auto closed = sink.value()->close(true);
    if (!closed.ok()) return make_error("ConnectorError", closed.error().message, true);

    std::string digest = moved == 0 ? tus::kEmptySha256Hex : hash.finish_hex();
    auto committed = dest.value()->commit(dest_path, digest, tag);
    if (!committed.ok()) {
      return make_error(committed.error().code == "DigestMismatch" ? "DigestMismatch"
                                                                   : "ConnectorError",
                        committed.error().message, true);
    }

    AgentEvent done;
    done.kind = AgentEventKind::Completed;
    done.bytes_transferred = moved;
    done.total_bytes = total;
    done.digest_source = digest;
    if (committed.value().etag_or_digest) {
      done.digest_destination = committed.value().etag_or_digest;
    }
    emit(done);
    return ok_status();
  }

  // ---- event outbox -----------------------------------------------------------

  void enqueue_event_locked(const AgentEvent& ev) {
    outbox_.push_back(ev);
    outbox_cv_.notify_one();
  }

  /// Ordered, at-least-once delivery: batches retry forever, order preserved;
  /// the controller dedupes by (attempt, seq).
  void event_loop() {
    while (running_.load()) {
      std::vector<AgentEvent> batch;
      {
        std::unique_lock<std::mutex> lk(mu_);
        outbox_cv_.wait(lk, [this] { return !outbox_.empty() || !running_.load(); });
        if (!running_.load() && outbox_.empty()) return;
        batch.assign(outbox_.begin(), outbox_.end());
        outbox_.clear();
      }
      int64_t backoff_ms = 200;
      while (running_.load()) {
        auto st = link_ev_->send_events(batch);
        if (st.ok()) break;
        log_warn("agent", strcat("event delivery failed (", st.error().message, "), retrying"));
        interruptible_sleep(backoff_ms);
        backoff_ms = std::min<int64_t>(backoff_ms * 2, 3000);
      }
    }
  }

  // ---- command dedupe ----------------------------------------------------------

  static constexpr size_t kDedupeCapacity = 10000;

  void remember_command_locked(const std::string& command_id, const AgentEvent& terminal) {
    completed_commands_[command_id] = terminal;
    dedupe_order_.push_back(command_id);
    while (dedupe_order_.size() > kDedupeCapacity) {
      completed_commands_.erase(dedupe_order_.front());
      dedupe_order_.pop_front();
    }
    AppendFile f;
    if (f.open(dedupe_path(), false).ok()) {
      auto line = strcat(json{{"command_id", command_id}, {"event", terminal.to_json()}}.dump(),
                         "\n");
      f.write(line.data(), line.size());
    }
  }

  fs::path dedupe_path() const { return config_.staging_dir / "dedupe.ndjson"; }

  void load_dedupe() {
    auto content = read_file(dedupe_path());
    if (!content) return;
    for (const auto& line : split(*content, '\n')) {
      if (line.empty()) continue;
      try {
        auto doc = json::parse(line);
        auto ev = AgentEvent::from_json(doc.at("event"));
        if (!ev.ok()) continue;
        auto id = doc.value("command_id", "");
        if (!completed_commands_.count(id)) dedupe_order_.push_back(id);
        completed_commands_[id] = ev.take();
      } catch (...) {
        continue;
      }
    }
    while (dedupe_order_.size() > kDedupeCapacity) {
      completed_commands_.erase(dedupe_order_.front());
      dedupe_order_.pop_front();
    }
    if (!completed_commands_.empty()) {
      log_info("agent", strcat("loaded ", completed_commands_.size(), " command dedupe entries"));
    }
  }

  // ---- user upload / download ---------------------------------------------------

  void configure_user_routes() {
    server_.Put("/user/files", [this](const httplib::Request& req, httplib::Response& res,
                                      const httplib::ContentReader& reader) {
      handle_user_upload(req, res, reader);
    });
    server_.Get("/user/files", [this](const httplib::Request& req, httplib::Response& res) {
      handle_user_download(req, res);
    });
  }

  Result<ScopedToken> user_token(const httplib::Request& req, TokenVerb verb) {
    auto wire = req.get_param_value("token");
    if (wire.empty()) {
      auto auth = req.get_header_value("Authorization");
      if (starts_with(auth, "Bearer ")) wire = auth.substr(7);
    }
    auto parsed = parse_token(config_.cluster_secret, wire, unix_seconds(),
                              config_.skew_grace_s);
    if (!parsed.ok()) return parsed.error();
    if (parsed.value().verb != verb) {
      return make_error("ScopeMismatch", "token verb does not authorize this action");
    }
    return parsed;
  }

  void handle_user_upload(const httplib::Request& req, httplib::Response& res,
                          const httplib::ContentReader& reader) {
    auto token = user_token(req, TokenVerb::UserUpload);
    if (!token.ok()) {
      reader([](const char*, size_t) { return true; });
      res.status = 401;
      res.set_content(to_json(Error{token.error().code, token.error().message, false}).dump(),
                      "application/json");
      return;
    }
    auto connector = make_served_connector(token.value().endpoint_id);
    if (!connector) {
      reader([](const char*, size_t) { return true; });
      res.status = 401;
      res.set_content(to_json(Error{"UnknownEndpoint", "endpoint not served here", false}).dump(),
                      "application/json");
      return;
    }
    const std::string& path = token.value().path;
    bool overwrite = req.get_param_value("overwrite") == "true";
    auto existing = connector->stat(path);
    if (existing.ok() && existing.value().exists && !overwrite) {
      reader([](const char*, size_t) { return true; });
      res.status = 409;
      res.set_content(to_json(Error{"ObjectExists", strcat(path, " already exists"), false})
                          .dump(),
                      "application/json");
      return;
    }

    std::string tag = strcat("user-", token.value().subject);
    auto sink = connector->write_at(path, 0, tag);
    if (!sink.ok()) {
      reader([](const char*, size_t) { return true; });
      res.status = sink.error().code == "StorageFull" ? 507 : 500;
      res.set_content(to_json(sink.error()).dump(), "application/json");
      return;
    }
    Sha256 hash;
    uint64_t received = 0;
    bool write_failed = false;
    bool storage_full = false;
    reader([&](const char* data, size_t n) {
      auto st = sink.value()->write(data, n);
      if (!st.ok()) {
        write_failed = true;
        storage_full = st.error().code == "StorageFull";
        return false;
      }
      hash.update(data, n);
      received += n;
      return true;
    });
    auto closed = sink.value()->close(true);
    if (write_failed || !closed.ok()) {
      connector->abort_staged(path, tag);
      res.status = storage_full ? 507 : 500;
      res.set_content(to_json(Error{storage_full ? "StorageFull" : "UploadFailed",
                                    "failed to stage upload", true})
                          .dump(),
                      "application/json");
      return;
    }
    std::string digest = received == 0 ? tus::kEmptySha256Hex : hash.finish_hex();
    auto committed = connector->commit(path, digest, tag);
    if (!committed.ok()) {
      res.status = 500;
      res.set_content(to_json(committed.error()).dump(), "application/json");
      return;
    }
    res.status = 201;
    res.set_content(json{{"path", path}, {"size_bytes", received}, {"sha256", digest}}.dump(),
                    "application/json");

    AgentEvent ev;
    ev.agent_id = config_.agent_id;
    ev.kind = AgentEventKind::UserUpload;
    ev.transfer_id = token.value().subject;
    ev.seq = 1;
    ev.bytes_transferred = received;
    ev.detail = strcat("endpoint=", token.value().endpoint_id, " path=", path, " sha256=",
                       digest);
    {
      std::lock_guard<std::mutex> lk(mu_);
      enqueue_event_locked(ev);
    }
    log_info("agent", strcat("user upload ", path, " (", received, " bytes) sha256=", digest));
  }

  void handle_user_download(const httplib::Request& req, httplib::Response& res) {
    auto token = user_token(req, TokenVerb::UserDownload);
    if (!token.ok()) {
      res.status = 401;
      res.set_content(to_json(Error{token.error().code, token.error().message, false}).dump(),
                      "application/json");
      return;
    }
    auto connector = make_served_connector(token.value().endpoint_id);
    if (!connector) {
      res.status = 401;
      return;
    }
    std::shared_ptr<Connector> shared_conn(std::move(connector));
    auto stat = shared_conn->stat(token.value().path);
    if (!stat.ok() || !stat.value().exists) {
      res.status = 404;
      res.set_content(to_json(Error{"NotFound", "no such object", false}).dump(),
                      "application/json");
      return;
    }
    uint64_t size = stat.value().size_bytes.value_or(0);
    std::string path = token.value().path;

    // Sequential provider state; httplib drives offsets (Range-aware).
    struct StreamState {
      std::unique_ptr<ByteReader> reader;
      uint64_t pos = 0;
    };
    auto state = std::make_shared<StreamState>();
    res.set_content_provider(
        size, "application/octet-stream",
        [shared_conn, path, state](size_t offset, size_t length, httplib::DataSink& sink) {
          if (!state->reader || state->pos != offset) {
            auto r = shared_conn->read_range(path, offset, std::nullopt);
            if (!r.ok()) return false;
            state->reader = r.take();
            state->pos = offset;
          }
          char buf[64 * 1024];
          size_t want = std::min(sizeof(buf), length);
          auto got = state->reader->read(buf, want);
          if (!got.ok() || got.value() == 0) return false;
          state->pos += got.value();
          sink.write(buf, got.value());
          return true;
        });
  }

  AgentConfig config_;
  httplib::Server server_;
  std::thread server_thread_;
  int port_ = 0;

  std::unique_ptr<tus::TusService> tus_;
  std::unique_ptr<AgentLink> link_ctl_;
  std::unique_ptr<AgentLink> link_hb_;
  std::unique_ptr<AgentLink> link_ev_;

  std::atomic<bool> running_{false};
  std::atomic<bool> registered_{false};
  std::thread control_thread_;
  std::thread heartbeat_thread_;
  std::thread event_thread_;
  std::vector<std::thread> workers_;

  std::mutex mu_;
  std::deque<TransferCommand> work_;
  std::condition_variable work_cv_;
  std::map<std::string, RunningTransfer> running_transfers_;
  std::condition_variable running_gone_cv_;
  std::set<std::string> canceled_transfers_;
  std::deque<AgentEvent> outbox_;
  std::condition_variable outbox_cv_;
  std::map<std::string, AgentEvent> completed_commands_;
  std::deque<std::string> dedupe_order_;
  int64_t last_gc_s_ = 0;

  std::mutex sleep_mu_;
  std::condition_variable sleep_cv_;
};

}  // namespace mft
