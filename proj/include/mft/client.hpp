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

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mft/controller.hpp"
#include "mft/core.hpp"
#include "mft/model.hpp"

namespace mft {

// HTTP clients for the documented API surface. The CLI and the scenario
// harness are pure clients of these endpoints; nothing here reaches into
// process internals.

/// Admin client. An optional capture hook records every response body so
/// harness runs can audit the full API transcript afterwards.
class ApiClient {
 public:
  using CaptureFn = std::function<void(const std::string& method, const std::string& path,
                                       int status, const std::string& body)>;

  ApiClient(const std::string& base_url, std::string admin_token)
      : client_(base_url), token_(std::move(admin_token)) {
    client_.set_connection_timeout(5, 0);
    client_.set_read_timeout(60, 0);
    client_.set_keep_alive(true);
  }

  void set_capture(CaptureFn fn) { capture_ = std::move(fn); }

  Result<TransferRecord> submit(const TransferRequest& request) {
    auto res = post("/v1/transfers", to_json(request));
    if (!res.ok()) return res.error();
    return transfer_record_from_json(res.value());
  }

  Result<TransferRecord> get_transfer(const std::string& transfer_id) {
    auto res = get(strcat("/v1/transfers/", transfer_id));
    if (!res.ok()) return res.error();
    return transfer_record_from_json(res.value());
  }

  Result<std::vector<TransferRecord>> list_transfers(const std::string& state = "",
                                                     size_t limit = 100,
                                                     const std::string& after = "") {
    std::string path = strcat("/v1/transfers?limit=", limit);
    if (!state.empty()) path += strcat("&state=", state);
    if (!after.empty()) path += strcat("&after=", after);
    auto res = get(path);
    if (!res.ok()) return res.error();
    std::vector<TransferRecord> out;
    for (const auto& r : res.value().value("transfers", json::array())) {
      out.push_back(transfer_record_from_json(r));
    }
    return out;
  }

  Result<TransferRecord> cancel(const std::string& transfer_id) {
    auto res = post(strcat("/v1/transfers/", transfer_id, "/cancel"), json::object());
    if (!res.ok()) return res.error();
    return transfer_record_from_json(res.value());
  }

  Result<std::pair<std::string, int64_t>> upload_url(const std::string& endpoint_id,
                                                     const std::string& path, int64_t ttl_s) {
    auto res = post("/v1/uploads",
                    json{{"endpoint_id", endpoint_id}, {"path", path}, {"ttl_s", ttl_s}});
    if (!res.ok()) return res.error();
    return std::make_pair(res.value().value("url", ""),
                          res.value().value("expires_at", int64_t{0}));
  }

  Result<std::pair<std::string, int64_t>> download_url(const std::string& endpoint_id,
                                                       const std::string& path, int64_t ttl_s) {
    auto res = post("/v1/downloads",
                    json{{"endpoint_id", endpoint_id}, {"path", path}, {"ttl_s", ttl_s}});
    if (!res.ok()) return res.error();
    return std::make_pair(res.value().value("url", ""),
                          res.value().value("expires_at", int64_t{0}));
  }

  Result<std::string> add_endpoint(const StorageEndpoint& endpoint) {
    auto res = post("/v1/endpoints", to_json(endpoint));
    if (!res.ok()) return res.error();
    return res.value().value("endpoint_id", "");
  }

  Result<std::vector<StorageEndpoint>> list_endpoints() {
    auto res = get("/v1/endpoints");
    if (!res.ok()) return res.error();
    std::vector<StorageEndpoint> out;
    for (const auto& e : res.value().value("endpoints", json::array())) {
      auto ep = storage_endpoint_from_json(e);
      if (ep.ok()) out.push_back(ep.take());
    }
    return out;
  }

  Result<StorageEndpoint> get_endpoint(const std::string& endpoint_id) {
    auto res = get(strcat("/v1/endpoints/", endpoint_id));
    if (!res.ok()) return res.error();
    return storage_endpoint_from_json(res.value());
  }

  Status delete_endpoint(const std::string& endpoint_id) {
    auto res = request("DELETE", strcat("/v1/endpoints/", endpoint_id), std::nullopt);
    if (!res.ok()) return res.error();
    return ok_status();
  }

  Result<std::string> add_credential(const CredentialPayload& payload) {
    auto res = post("/v1/credentials", payload.to_json());
    if (!res.ok()) return res.error();
    return res.value().value("credential_id", "");
  }

  Result<json> get_credential_meta(const std::string& credential_id) {
    return get(strcat("/v1/credentials/", credential_id));
  }

  Result<std::vector<json>> list_agents() {
    auto res = get("/v1/agents");
    if (!res.ok()) return res.error();
    std::vector<json> out;
    for (const auto& a : res.value().value("agents", json::array())) out.push_back(a);
    return out;
  }

  Result<json> get(const std::string& path) { return request("GET", path, std::nullopt); }
  Result<json> post(const std::string& path, const json& body) {
    return request("POST", path, body);
  }

 private:
  Result<json> request(const std::string& method, const std::string& path,
                       const std::optional<json>& body) {
    httplib::Headers headers{{"Authorization", strcat("Bearer ", token_)}};
    httplib::Result res;
    if (method == "GET") {
      res = client_.Get(path, headers);
    } else if (method == "POST") {
      res = client_.Post(path, headers, body ? body->dump() : "{}", "application/json");
    } else if (method == "DELETE") {
      res = client_.Delete(path, headers);
    }
    if (!res) {
      return make_error("Unreachable", strcat("API unreachable: ", httplib::to_string(res.error())),
                        true);
    }
    if (capture_) capture_(method, path, res->status, res->body);
    if (res->status / 100 != 2) {
      try {
        return error_from_json(json::parse(res->body));
      } catch (...) {
        return make_error("ApiError", strcat("status ", res->status), res->status >= 500);
      }
    }
    if (res->body.empty()) return json::object();
    try {
      return json::parse(res->body);
    } catch (...) {
      return make_error("ApiError", "response body is not JSON");
    }
  }

  httplib::Client client_;
  std::string token_;
  CaptureFn capture_;
};

/// Agent-side control-plane client: register, heartbeat, long-poll, event
/// delivery, grant redemption. Network failures surface as retryable errors;
/// the agent loops retry them forever.
class AgentLink {
 public:
  AgentLink(const std::string& controller_url, std::string cluster_token, std::string agent_id)
      : client_(controller_url), token_(std::move(cluster_token)), agent_id_(std::move(agent_id)) {
    client_.set_connection_timeout(3, 0);
    client_.set_read_timeout(90, 0);  // must exceed the long-poll window
    client_.set_keep_alive(true);
  }

  Result<RegisterReply> register_agent(const std::set<std::string>& served,
                                       const std::string& data_channel_url,
                                       const std::string& user_http_url) {
    json body{{"agent_id", agent_id_},
              {"served_endpoint_ids", served},
              {"data_channel_url", data_channel_url},
              {"user_http_url", user_http_url}};
    auto res = post("/v1/agents/register", body);
    if (!res.ok()) return res.error();
    RegisterReply reply;
    reply.poll_interval_ms = res.value().value("poll_interval_ms", int64_t{500});
    reply.liveness_window_s = res.value().value("liveness_window_s", int64_t{30});
    reply.heartbeat_interval_s = res.value().value("heartbeat_interval_s", int64_t{10});
    return reply;
  }

  Status heartbeat(const std::set<std::string>& running_transfer_ids) {
    auto res = post(strcat("/v1/agents/", agent_id_, "/heartbeat"),
                    json{{"running_transfer_ids", running_transfer_ids}});
    if (!res.ok()) return res.error();
    return ok_status();
  }

  Result<std::vector<TransferCommand>> poll_commands(int64_t wait_s) {
    auto res = get(strcat("/v1/agents/", agent_id_, "/commands?wait_s=", wait_s));
    if (!res.ok()) return res.error();
    std::vector<TransferCommand> out;
    for (const auto& c : res.value().value("commands", json::array())) {
      auto cmd = TransferCommand::from_json(c);
      if (!cmd.ok()) return cmd.error();
      out.push_back(cmd.take());
    }
    return out;
  }

  Status send_events(const std::vector<AgentEvent>& events) {
    json arr = json::array();
    for (const auto& e : events) arr.push_back(e.to_json());
    auto res = post(strcat("/v1/agents/", agent_id_, "/events"), json{{"events", arr}});
    if (!res.ok()) return res.error();
    return ok_status();
  }

  Result<CredentialPayload> redeem(const std::string& grant_token) {
    auto res = post("/v1/grants/redeem", json{{"token", grant_token}, {"agent_id", agent_id_}});
    if (!res.ok()) return res.error();
    return CredentialPayload::from_json(res.value().value("payload", json::object()));
  }

  /// Abort any in-flight request (wakes a blocked long-poll during shutdown).
  void stop() { client_.stop(); }

 private:
  Result<json> get(const std::string& path) {
    auto res = client_.Get(path, headers());
    return unwrap(res);
  }

  Result<json> post(const std::string& path, const json& body) {
    auto res = client_.Post(path, headers(), body.dump(), "application/json");
    return unwrap(res);
  }

  httplib::Headers headers() const {
    return {{"Authorization", strcat("Bearer ", token_)}};
  }

  Result<json> unwrap(httplib::Result& res) {
    if (!res) {
      return make_error("Unreachable",
                        strcat("controller unreachable: ", httplib::to_string(res.error())), true);
    }
    if (res->status / 100 != 2) {
      try {
        return error_from_json(json::parse(res->body));
      } catch (...) {
        return make_error("ControlError", strcat("status ", res->status), res->status >= 500);
      }
    }
    if (res->body.empty()) return json::object();
    try {
      return json::parse(res->body);
    } catch (...) {
      return make_error("ControlError", "response body is not JSON");
    }
  }

  httplib::Client client_;
  std::string token_;
  std::string agent_id_;
};

}  // namespace mft
