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

#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mft/backends.hpp"
#include "mft/controller.hpp"
#include "mft/core.hpp"
#include "mft/logging.hpp"

namespace mft {

// HTTP/JSON front door: the public transfer/endpoint/credential API for
// clients plus the controller<->agent control plane, deployed as one process
// with the controller. Every non-2xx body is exactly one ApiError document:
//   {"code": ..., "message": ..., "retryable": ...}

struct ApiConfig {
  std::string listen_host = "127.0.0.1";
  int listen_port = 0;  // 0 binds an ephemeral port
  std::string admin_token;
  std::string cluster_token;
};

class ApiServer {
 public:
  ApiServer(ApiConfig config, Controller& controller, ResourceBackend& resources,
            CredentialBackend& credentials)
      : config_(std::move(config)),
        controller_(controller),
        resources_(resources),
        credentials_(credentials) {
    server_.new_task_queue = [] { return new httplib::ThreadPool(32); };
    server_.set_read_timeout(120, 0);
    server_.set_payload_max_length(64ull * 1024 * 1024);
    configure_routes();
  }

  ~ApiServer() { stop(); }

  int start() {
    if (config_.listen_port == 0) {
      port_ = server_.bind_to_any_port(config_.listen_host);
    } else {
      server_.bind_to_port(config_.listen_host, config_.listen_port);
      port_ = config_.listen_port;
    }
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    log_info("api", strcat("listening on ", config_.listen_host, ":", port_));
    return port_;
  }

  void stop() {
    if (thread_.joinable()) {
      server_.stop();
      thread_.join();
    }
  }

  int port() const { return port_; }
  std::string url() const { return strcat("http://", config_.listen_host, ":", port_); }

  /// Documented endpoint shapes; the docs test cross-checks this table.
  static const std::vector<std::pair<std::string, std::string>>& route_table() {
    static const std::vector<std::pair<std::string, std::string>> kRoutes = {
        {"POST", "/v1/transfers"},
        {"GET", "/v1/transfers"},
        {"GET", "/v1/transfers/{id}"},
        {"POST", "/v1/transfers/{id}/cancel"},
        {"POST", "/v1/uploads"},
        {"POST", "/v1/downloads"},
        {"POST", "/v1/endpoints"},
        {"GET", "/v1/endpoints"},
        {"GET", "/v1/endpoints/{id}"},
        {"DELETE", "/v1/endpoints/{id}"},
        {"POST", "/v1/credentials"},
        {"GET", "/v1/credentials"},
        {"GET", "/v1/credentials/{id}"},
        {"GET", "/v1/agents"},
        {"POST", "/v1/agents/register"},
        {"POST", "/v1/agents/{id}/heartbeat"},
        {"GET", "/v1/agents/{id}/commands"},
        {"POST", "/v1/agents/{id}/events"},
        {"POST", "/v1/grants/redeem"},
    };
    return kRoutes;
  }

 private:
  static int status_for(const Error& e) {
    const std::string& c = e.code;
    if (c == "Unauthorized" || c == "BadSignature" || c == "Expired" || c == "ScopeMismatch") {
      return 401;
    }
    if (c == "UnknownEndpoint" || c == "UnknownTransfer" || c == "UnknownCredential" ||
        c == "UnknownAgent" || c == "UnknownGrant" || c == "NotFound") {
      return 404;
    }
    if (c == "DuplicateEndpointId" || c == "AlreadyTerminal" || c == "InUse" ||
        c == "NoLiveAgent") {
      return 409;
    }
    if (c == "GrantExpired") return 410;
    if (c == "Unreachable" || c == "SealFailed") return 500;
    return 400;
  }

  static void fail(httplib::Response& res, const Error& e) {
    res.status = status_for(e);
    res.set_content(to_json(e).dump(), "application/json");
  }

  static void fail(httplib::Response& res, int status, const std::string& code,
                   const std::string& message, bool retryable = false) {
    res.status = status;
    res.set_content(to_json(Error{code, message, retryable}).dump(), "application/json");
  }

  static void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  bool authorized(const httplib::Request& req, httplib::Response& res,
                  const std::string& expected_token) {
    auto auth = req.get_header_value("Authorization");
    if (!starts_with(auth, "Bearer ") || !ct_equal(auth.substr(7), expected_token)) {
      fail(res, 401, "Unauthorized", "missing or invalid bearer token");
      return false;
    }
    return true;
  }

  bool admin(const httplib::Request& req, httplib::Response& res) {
    return authorized(req, res, config_.admin_token);
  }

  bool cluster(const httplib::Request& req, httplib::Response& res) {
    return authorized(req, res, config_.cluster_token);
  }

  static std::optional<json> parse_body(const httplib::Request& req, httplib::Response& res) {
    try {
      return json::parse(req.body);
    } catch (...) {
      fail(res, 400, "MalformedBody", "request body is not valid JSON");
      return std::nullopt;
    }
  }

  void configure_routes() {
    // ---- transfers ---------------------------------------------------------
    server_.Post("/v1/transfers", [this](const httplib::Request& req, httplib::Response& res) {
      if (!admin(req, res)) return;
      auto body = parse_body(req, res);
      if (!body) return;
      TransferRequest request;
      try {
        request = transfer_request_from_json(*body);
      } catch (const json::exception& e) {
        return fail(res, 400, "MalformedBody", strcat("bad transfer request: ", e.what()));
      }
      auto rec = controller_.admit(request);
      if (!rec.ok()) return fail(res, rec.error());
      // 201 even for immediately-FAILED records: the record is the answer.
      reply(res, 201, to_json(rec.value()));
    });

    server_.Get("/v1/transfers", [this](const httplib::Request& req, httplib::Response& res) {
      if (!admin(req, res)) return;
      std::optional<TransferState> state;
      if (req.has_param("state")) {
        state = transfer_state_from_string(req.get_param_value("state"));
        if (!state) return fail(res, 400, "BadStateFilter", "unknown state value");
      }
      size_t limit = 100;
      if (req.has_param("limit")) {
        limit = std::clamp<size_t>(std::strtoull(req.get_param_value("limit").c_str(),
                                                 nullptr, 10),
                                   1, 1000);
      }
      auto records =
          controller_.list_records(state, limit, req.get_param_value("after"));
      json arr = json::array();
      for (const auto& r : records) arr.push_back(to_json(r));
      json out{{"transfers", std::move(arr)}};
      if (!records.empty()) out["next_after"] = records.back().transfer_id;
      reply(res, 200, out);
    });

    server_.Get(R"(/v1/transfers/([0-9a-f]{32}))",
                [this](const httplib::Request& req, httplib::Response& res) {
                  if (!admin(req, res)) return;
                  auto rec = controller_.get_record(req.matches[1]);
                  if (!rec.ok()) return fail(res, rec.error());
                  reply(res, 200, to_json(rec.value()));
                });

    server_.Post(R"(/v1/transfers/([0-9a-f]{32})/cancel)",
                 [this](const httplib::Request& req, httplib::Response& res) {
                   if (!admin(req, res)) return;
                   auto rec = controller_.cancel(req.matches[1]);
                   if (!rec.ok()) return fail(res, rec.error());
                   reply(res, 200, to_json(rec.value()));
                 });

    // ---- user upload / download links --------------------------------------
    auto mint_user_url = [this](const httplib::Request& req, httplib::Response& res,
                                TokenVerb verb) {
      if (!admin(req, res)) return;
      auto body = parse_body(req, res);
      if (!body) return;
      auto endpoint_id = body->value("endpoint_id", "");
      auto path = body->value("path", "");
      int64_t ttl = body->value("ttl_s", int64_t{600});
      auto out = controller_.make_user_url(verb, endpoint_id, path, ttl);
      if (!out.ok()) return fail(res, out.error());
      reply(res, 200, json{{"url", out.value().first}, {"expires_at", out.value().second}});
    };
    server_.Post("/v1/uploads", [mint_user_url](const httplib::Request& req,
                                                httplib::Response& res) {
      mint_user_url(req, res, TokenVerb::UserUpload);
    });
    server_.Post("/v1/downloads", [mint_user_url](const httplib::Request& req,
                                                  httplib::Response& res) {
      mint_user_url(req, res, TokenVerb::UserDownload);
    });

    // ---- endpoints ----------------------------------------------------------
    server_.Post("/v1/endpoints", [this](const httplib::Request& req, httplib::Response& res) {
      if (!admin(req, res)) return;
      auto body = parse_body(req, res);
      if (!body) return;
      auto ep = storage_endpoint_from_json(*body);
      if (!ep.ok()) return fail(res, ep.error());
      auto id = resources_.register_endpoint(ep.value());
      if (!id.ok()) return fail(res, id.error());
      reply(res, 201, json{{"endpoint_id", id.value()}});
    });

    server_.Get("/v1/endpoints", [this](const httplib::Request& req, httplib::Response& res) {
      if (!admin(req, res)) return;
      json arr = json::array();
      for (const auto& e : resources_.list_endpoints()) arr.push_back(to_json(e));
      reply(res, 200, json{{"endpoints", std::move(arr)}});
    });

    server_.Get(R"(/v1/endpoints/([^/]+))",
                [this](const httplib::Request& req, httplib::Response& res) {
                  if (!admin(req, res)) return;
                  auto ep = resources_.get_endpoint(req.matches[1]);
                  if (!ep.ok()) return fail(res, ep.error());
                  reply(res, 200, to_json(ep.value()));
                });

    server_.Delete(R"(/v1/endpoints/([^/]+))",
                   [this](const httplib::Request& req, httplib::Response& res) {
                     if (!admin(req, res)) return;
                     std::string id = req.matches[1];
                     if (controller_.endpoint_in_use(id)) {
                       return fail(res, 409, "InUse",
                                   "endpoint is referenced by a non-terminal transfer");
                     }
                     auto st = resources_.remove_endpoint(id);
                     if (!st.ok()) return fail(res, st.error());
                     res.status = 204;
                   });

    // ---- credentials (write-only payloads) ----------------------------------
    server_.Post("/v1/credentials", [this](const httplib::Request& req, httplib::Response& res) {
      if (!admin(req, res)) return;
      auto body = parse_body(req, res);
      if (!body) return;
      auto payload = CredentialPayload::from_json(*body);
      if (!payload.ok()) return fail(res, payload.error());
      auto id = credentials_.store_credential(payload.value());
      if (!id.ok()) return fail(res, id.error());
      reply(res, 201, json{{"credential_id", id.value()}});
    });

    server_.Get("/v1/credentials", [this](const httplib::Request& req, httplib::Response& res) {
      if (!admin(req, res)) return;
      json arr = json::array();
      for (const auto& m : credentials_.list_credentials()) {
        arr.push_back(json{{"credential_id", m.credential_id},
                           {"kind", to_string(m.kind)},
                           {"created_at", m.created_at}});
      }
      reply(res, 200, json{{"credentials", std::move(arr)}});
    });

    server_.Get(R"(/v1/credentials/([^/]+))",
                [this](const httplib::Request& req, httplib::Response& res) {
                  if (!admin(req, res)) return;
                  auto meta = credentials_.credential_meta(req.matches[1]);
                  if (!meta.ok()) return fail(res, meta.error());
                  reply(res, 200,
                        json{{"credential_id", meta.value().credential_id},
                             {"kind", to_string(meta.value().kind)},
                             {"created_at", meta.value().created_at}});
                });

    // ---- agent visibility ----------------------------------------------------
    server_.Get("/v1/agents", [this](const httplib::Request& req, httplib::Response& res) {
      if (!admin(req, res)) return;
      json arr = json::array();
      for (auto& a : controller_.list_agents()) arr.push_back(a);
      reply(res, 200, json{{"agents", std::move(arr)}});
    });

    // ---- control plane --------------------------------------------------------
    server_.Post("/v1/agents/register",
                 [this](const httplib::Request& req, httplib::Response& res) {
                   if (!cluster(req, res)) return;
                   auto body = parse_body(req, res);
                   if (!body) return;
                   std::set<std::string> served;
                   for (const auto& e : body->value("served_endpoint_ids", json::array())) {
                     served.insert(e.get<std::string>());
                   }
                   auto reply_body = controller_.register_agent(
                       body->value("agent_id", ""), served,
                       body->value("data_channel_url", ""), body->value("user_http_url", ""));
                   reply(res, 200,
                         json{{"poll_interval_ms", reply_body.poll_interval_ms},
                              {"liveness_window_s", reply_body.liveness_window_s},
                              {"heartbeat_interval_s", reply_body.heartbeat_interval_s}});
                 });

    server_.Post(R"(/v1/agents/([^/]+)/heartbeat)",
                 [this](const httplib::Request& req, httplib::Response& res) {
                   if (!cluster(req, res)) return;
                   std::set<std::string> running;
                   if (!req.body.empty()) {
                     try {
                       auto body = json::parse(req.body);
                       for (const auto& t : body.value("running_transfer_ids", json::array())) {
                         running.insert(t.get<std::string>());
                       }
                     } catch (...) {
                       return fail(res, 400, "MalformedBody", "heartbeat body is not JSON");
                     }
                   }
                   auto st = controller_.heartbeat(req.matches[1], running);
                   if (!st.ok()) return fail(res, st.error());
                   reply(res, 200, json::object());
                 });

    server_.Get(R"(/v1/agents/([^/]+)/commands)",
                [this](const httplib::Request& req, httplib::Response& res) {
                  if (!cluster(req, res)) return;
                  int64_t wait_s = 25;
                  if (req.has_param("wait_s")) {
                    wait_s = std::strtoll(req.get_param_value("wait_s").c_str(), nullptr, 10);
                  }
                  auto commands = controller_.poll_commands(req.matches[1], wait_s);
                  if (!commands.ok()) return fail(res, commands.error());
                  reply(res, 200, json{{"commands", commands.value()}});
                });

    server_.Post(R"(/v1/agents/([^/]+)/events)",
                 [this](const httplib::Request& req, httplib::Response& res) {
                   if (!cluster(req, res)) return;
                   auto body = parse_body(req, res);
                   if (!body) return;
                   std::vector<AgentEvent> events;
                   for (const auto& e : body->value("events", json::array())) {
                     auto ev = AgentEvent::from_json(e);
                     if (!ev.ok()) return fail(res, ev.error());
                     events.push_back(ev.take());
                   }
                   auto st = controller_.ingest_events(req.matches[1], events);
                   if (!st.ok()) return fail(res, st.error());
                   reply(res, 200, json{{"accepted", events.size()}});
                 });

    server_.Post("/v1/grants/redeem",
                 [this](const httplib::Request& req, httplib::Response& res) {
                   if (!cluster(req, res)) return;
                   auto body = parse_body(req, res);
                   if (!body) return;
                   auto payload = controller_.redeem_grant(body->value("token", ""),
                                                           body->value("agent_id", ""));
                   if (!payload.ok()) return fail(res, payload.error());
                   reply(res, 200, json{{"payload", payload.value().to_json()}});
                 });

    server_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
      res.status = 200;
      res.set_content("{\"ok\":true}", "application/json");
    });
  }

  ApiConfig config_;
  Controller& controller_;
  ResourceBackend& resources_;
  CredentialBackend& credentials_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace mft
