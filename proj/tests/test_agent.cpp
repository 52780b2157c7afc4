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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <mft/agent.hpp>
#include <mft/api.hpp>
#include <mft/object_store.hpp>

#include "oracle.hpp"
#include "support.hpp"

using namespace mft;
using testsupport::TempDir;
using testsupport::random_blob;

namespace {

/// Whole control+data plane in one process: API/controller, an object store,
/// and up to two in-process agent runtimes on loopback.
struct Stack {
  TempDir tmp;
  ClusterSecret secret = ClusterSecret::generate();
  InMemoryBackends backends;
  ControllerConfig ctrl_config;
  std::unique_ptr<Controller> controller;
  std::unique_ptr<ApiServer> api;
  ObjectStoreService store;
  std::vector<std::unique_ptr<AgentRuntime>> agents;
  std::string admin_token = "admin-token";
  std::string cluster_token = "cluster-token";

  Stack() {
    ctrl_config.tick_ms = 50;
    ctrl_config.liveness_window_s = 3;
    ctrl_config.stall_timeout_s = 20;
    ctrl_config.retry.base_delay_ms = 200;
    ctrl_config.retry.max_attempts = 3;
    controller = std::make_unique<Controller>(ctrl_config, backends, backends, secret);
    ApiConfig api_config;
    api_config.admin_token = admin_token;
    api_config.cluster_token = cluster_token;
    api = std::make_unique<ApiServer>(api_config, *controller, backends, backends);
    api->start();
    controller->start();
    store.add_account("AK", "SK");
    store.start();
  }

  ~Stack() {
    for (auto& a : agents) a->stop();
    controller->stop();
    api->stop();
  }

  std::string api_url() const { return api->url(); }

  StorageEndpoint posix_endpoint(const std::string& id, const std::string& dir) {
    auto root = tmp.path() / dir;
    fs::create_directories(root);
    return StorageEndpoint{id, EndpointKind::LocalPosix, root.string(),
                           default_capabilities(EndpointKind::LocalPosix), std::nullopt, {}};
  }

  AgentRuntime& add_agent(const std::string& agent_id,
                          const std::vector<ServedEndpoint>& served) {
    AgentConfig config;
    config.agent_id = agent_id;
    config.controller_url = api_url();
    config.cluster_token = cluster_token;
    config.cluster_secret = secret;
    config.served = served;
    config.staging_dir = tmp.path() / (agent_id + "-staging");
    config.poll_wait_s = 2;
    agents.push_back(std::make_unique<AgentRuntime>(std::move(config)));
    REQUIRE(agents.back()->start().ok());
    return *agents.back();
  }

  ApiClient client() { return ApiClient(api_url(), admin_token); }

  TransferRecord wait_terminal(ApiClient& cli, const std::string& tid, int timeout_ms = 20000) {
    int64_t deadline = steady_millis() + timeout_ms;
    while (steady_millis() < deadline) {
      auto rec = cli.get_transfer(tid);
      if (rec.ok() && is_terminal(rec.value().state)) return rec.take();
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    auto rec = cli.get_transfer(tid);
    REQUIRE(rec.ok());
    return rec.take();
  }
};

}  // namespace

TEST_CASE("agent registers and appears in /v1/agents") {
  Stack stack;
  auto src = stack.posix_endpoint("ep-src", "src");
  auto cli = stack.client();
  REQUIRE(cli.add_endpoint(src).ok());
  stack.add_agent("agent-1", {{src, std::nullopt}});

  int64_t deadline = steady_millis() + 5000;
  bool seen = false;
  while (steady_millis() < deadline && !seen) {
    auto agents = cli.list_agents();
    REQUIRE(agents.ok());
    for (const auto& a : agents.value()) {
      if (a.value("agent_id", "") == "agent-1" && a.value("live", false)) seen = true;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  CHECK(seen);
}

TEST_CASE("agent-to-agent transfer end to end") {
  Stack stack;
  auto src = stack.posix_endpoint("ep-src", "src");
  auto dst = stack.posix_endpoint("ep-dst", "dst");
  auto cli = stack.client();
  REQUIRE(cli.add_endpoint(src).ok());
  REQUIRE(cli.add_endpoint(dst).ok());
  stack.add_agent("agent-src", {{src, std::nullopt}});
  stack.add_agent("agent-dst", {{dst, std::nullopt}});

  auto blob = random_blob(404, 3 * 1024 * 1024 + 37);
  testsupport::write_file(fs::path(src.base_locator) / "in/payload.bin", blob);

  TransferRequest req;
  req.source = {"ep-src", "in/payload.bin"};
  req.destination = {"ep-dst", "out/payload.bin"};
  req.requested_chunk_bytes = 256 * 1024;
  auto submitted = cli.submit(req);
  REQUIRE(submitted.ok());
  CHECK(submitted.value().state == TransferState::Planned);
  CHECK(submitted.value().mode == TransferMode::AgentToAgent);

  auto final = stack.wait_terminal(cli, submitted.value().transfer_id);
  INFO("last_error: " << (final.last_error ? final.last_error->message : "none"));
  REQUIRE(final.state == TransferState::Completed);
  CHECK(final.digest_source == oracle::sha256_hex(blob));
  CHECK(final.digest_destination == oracle::sha256_hex(blob));
  CHECK(final.bytes_transferred == blob.size());
  CHECK(final.total_bytes == blob.size());

  auto delivered = testsupport::read_file(fs::path(dst.base_locator) / "out/payload.bin");
  CHECK(oracle::sha256_hex(delivered) == oracle::sha256_hex(blob));

  SUBCASE("no stray staging left behind") {
    CHECK_FALSE(fs::exists(fs::path(dst.base_locator) /
                           strcat("out/payload.bin.part-", final.transfer_id)));
  }
}

TEST_CASE("agent-to-storage push to the object store") {
  Stack stack;
  auto src = stack.posix_endpoint("ep-src", "src");
  auto cli = stack.client();
  REQUIRE(cli.add_endpoint(src).ok());

  auto cred_id = cli.add_credential(CredentialPayload{CredentialKind::AccessKeyPair, "AK", "SK",
                                                      ""});
  REQUIRE(cred_id.ok());
  StorageEndpoint cloud{"ep-cloud", EndpointKind::ObjectStore, stack.store.url("bkt"),
                        default_capabilities(EndpointKind::ObjectStore), cred_id.value(), {}};
  REQUIRE(cli.add_endpoint(cloud).ok());
  stack.add_agent("agent-src", {{src, std::nullopt}});

  auto blob = random_blob(505, 900 * 1024);
  testsupport::write_file(fs::path(src.base_locator) / "up.bin", blob);

  TransferRequest req;
  req.source = {"ep-src", "up.bin"};
  req.destination = {"ep-cloud", "dir/up.bin"};
  auto submitted = cli.submit(req);
  REQUIRE(submitted.ok());
  CHECK(submitted.value().mode == TransferMode::AgentToStoragePush);

  auto final = stack.wait_terminal(cli, submitted.value().transfer_id);
  INFO("last_error: " << (final.last_error ? final.last_error->message : "none"));
  REQUIRE(final.state == TransferState::Completed);
  CHECK(final.digest_source == oracle::sha256_hex(blob));
  CHECK(final.digest_destination == oracle::sha256_hex(blob));
  CHECK(stack.store.peek("bkt", "dir/up.bin") == blob);
}

TEST_CASE("agent-to-storage pull from the object store") {
  Stack stack;
  auto dst = stack.posix_endpoint("ep-dst", "dst");
  auto cli = stack.client();
  REQUIRE(cli.add_endpoint(dst).ok());

  auto cred_id = cli.add_credential(CredentialPayload{CredentialKind::AccessKeyPair, "AK", "SK",
                                                      ""});
  REQUIRE(cred_id.ok());
  StorageEndpoint cloud{"ep-cloud", EndpointKind::ObjectStore, stack.store.url("bkt"),
                        default_capabilities(EndpointKind::ObjectStore), cred_id.value(), {}};
  REQUIRE(cli.add_endpoint(cloud).ok());
  stack.add_agent("agent-dst", {{dst, std::nullopt}});

  auto blob = random_blob(606, 700 * 1024 + 11);
  stack.store.put_direct("bkt", "down.bin", blob);

  TransferRequest req;
  req.source = {"ep-cloud", "down.bin"};
  req.destination = {"ep-dst", "fetched/down.bin"};
  auto submitted = cli.submit(req);
  REQUIRE(submitted.ok());
  CHECK(submitted.value().mode == TransferMode::AgentToStoragePull);

  auto final = stack.wait_terminal(cli, submitted.value().transfer_id);
  INFO("last_error: " << (final.last_error ? final.last_error->message : "none"));
  REQUIRE(final.state == TransferState::Completed);
  auto fetched = testsupport::read_file(fs::path(dst.base_locator) / "fetched/down.bin");
  CHECK(oracle::sha256_hex(fetched) == oracle::sha256_hex(blob));
}

TEST_CASE("user upload and download through scoped URLs") {
  Stack stack;
  auto gw = stack.posix_endpoint("ep-gw", "gateway");
  auto cli = stack.client();
  REQUIRE(cli.add_endpoint(gw).ok());
  stack.add_agent("agent-gw", {{gw, std::nullopt}});

  // The agent must be live before links can be minted.
  int64_t deadline = steady_millis() + 5000;
  while (steady_millis() < deadline) {
    auto url = cli.upload_url("ep-gw", "userdata/file.bin", 600);
    if (url.ok()) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }

  auto upload = cli.upload_url("ep-gw", "userdata/file.bin", 600);
  REQUIRE(upload.ok());
  auto blob = random_blob(707, 512 * 1024);

  // A plain HTTP client with only the URL: no admin credentials, no cluster
  // secrets.
  auto split = tus::detail::split_url(upload.value().first);
  REQUIRE(split.ok());
  httplib::Client plain(split.value().origin);
  auto res = plain.Put(split.value().path, blob, "application/octet-stream");
  REQUIRE(res);
  REQUIRE(res->status == 201);
  auto body = json::parse(res->body);
  CHECK(body["sha256"] == oracle::sha256_hex(blob));
  CHECK(body["size_bytes"] == blob.size());

  SUBCASE("re-upload without overwrite is 409") {
    auto res2 = plain.Put(split.value().path, blob, "application/octet-stream");
    REQUIRE(res2);
    CHECK(res2->status == 409);
  }

  SUBCASE("expired token is 401") {
    auto stale = mint_token(stack.secret, "u", TokenVerb::UserUpload, "ep-gw", "x.bin", 60,
                            unix_seconds() - 7200)
                     .take();
    auto res2 = plain.Put(strcat("/user/files?token=", stale), blob,
                          "application/octet-stream");
    REQUIRE(res2);
    CHECK(res2->status == 401);
  }

  SUBCASE("download round-trips the bytes, Range honored") {
    auto download = cli.download_url("ep-gw", "userdata/file.bin", 600);
    REQUIRE(download.ok());
    auto dsplit = tus::detail::split_url(download.value().first);
    REQUIRE(dsplit.ok());
    auto got = plain.Get(dsplit.value().path);
    REQUIRE(got);
    REQUIRE(got->status == 200);
    CHECK(oracle::sha256_hex(got->body) == oracle::sha256_hex(blob));

    httplib::Headers range_headers{{"Range", "bytes=2-4"}};
    auto partial = plain.Get(dsplit.value().path, range_headers);
    REQUIRE(partial);
    CHECK(partial->status == 206);
    CHECK(partial->body == blob.substr(2, 3));
  }

  SUBCASE("download token never authorizes upload") {
    auto download = cli.download_url("ep-gw", "userdata/file.bin", 600);
    REQUIRE(download.ok());
    auto dsplit = tus::detail::split_url(download.value().first);
    auto res2 = plain.Put(dsplit.value().path, blob, "application/octet-stream");
    REQUIRE(res2);
    CHECK(res2->status == 401);
  }

  SUBCASE("upload link for an endpoint with no live agent is 409") {
    StorageEndpoint lonely{"ep-lonely", EndpointKind::LocalPosix,
                           (stack.tmp.path() / "lonely").string(),
                           default_capabilities(EndpointKind::LocalPosix), std::nullopt, {}};
    fs::create_directories(stack.tmp.path() / "lonely");
    REQUIRE(cli.add_endpoint(lonely).ok());
    auto url = cli.upload_url("ep-lonely", "x.bin", 600);
    REQUIRE_FALSE(url.ok());
    CHECK(url.error().code == "NoLiveAgent");
  }
}

TEST_CASE("cancel mid-transfer cleans up staging") {
  Stack stack;
  auto src = stack.posix_endpoint("ep-src", "src");
  auto dst = stack.posix_endpoint("ep-dst", "dst");
  auto cli = stack.client();
  REQUIRE(cli.add_endpoint(src).ok());
  REQUIRE(cli.add_endpoint(dst).ok());
  stack.add_agent("agent-src", {{src, std::nullopt}});
  stack.add_agent("agent-dst", {{dst, std::nullopt}});

  auto blob = random_blob(808, 32 * 1024 * 1024);
  testsupport::write_file(fs::path(src.base_locator) / "big.bin", blob);

  TransferRequest req;
  req.source = {"ep-src", "big.bin"};
  req.destination = {"ep-dst", "big-out.bin"};
  req.requested_chunk_bytes = 64 * 1024;  // many chunks: plenty of time to cancel
  auto submitted = cli.submit(req);
  REQUIRE(submitted.ok());
  auto tid = submitted.value().transfer_id;

  // Wait for RUNNING, then cancel.
  int64_t deadline = steady_millis() + 10000;
  while (steady_millis() < deadline) {
    auto rec = cli.get_transfer(tid);
    if (rec.ok() && rec.value().state == TransferState::Running) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  auto canceled = cli.cancel(tid);
  REQUIRE(canceled.ok());
  CHECK(canceled.value().state == TransferState::Canceled);

  // Staging at the receiving side disappears (cancel fans out to both agents).
  deadline = steady_millis() + 10000;
  bool clean = false;
  while (steady_millis() < deadline && !clean) {
    clean = !fs::exists(fs::path(dst.base_locator) / strcat("big-out.bin.part-", tid));
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  CHECK(clean);
  CHECK_FALSE(fs::exists(fs::path(dst.base_locator) / "big-out.bin"));

  auto again = cli.cancel(tid);
  REQUIRE_FALSE(again.ok());
  CHECK(again.error().code == "AlreadyTerminal");
}

TEST_CASE("digest verification failure retries and eventually fails") {
  Stack stack;
  auto src = stack.posix_endpoint("ep-src", "src");
  auto cli = stack.client();
  REQUIRE(cli.add_endpoint(src).ok());

  // Destination whose credential is wrong: every attempt fails at the
  // connector, exercising retry exhaustion end to end.
  auto cred_id = cli.add_credential(CredentialPayload{CredentialKind::AccessKeyPair, "AK",
                                                      "WRONG-SECRET", ""});
  REQUIRE(cred_id.ok());
  StorageEndpoint cloud{"ep-cloud", EndpointKind::ObjectStore, stack.store.url("bkt"),
                        default_capabilities(EndpointKind::ObjectStore), cred_id.value(), {}};
  REQUIRE(cli.add_endpoint(cloud).ok());
  stack.add_agent("agent-src", {{src, std::nullopt}});

  testsupport::write_file(fs::path(src.base_locator) / "f.bin", "hello");

  TransferRequest req;
  req.source = {"ep-src", "f.bin"};
  req.destination = {"ep-cloud", "f.bin"};
  auto submitted = cli.submit(req);
  REQUIRE(submitted.ok());

  auto final = stack.wait_terminal(cli, submitted.value().transfer_id, 30000);
  CHECK(final.state == TransferState::Failed);
  CHECK(final.attempt == 3);
  REQUIRE(final.last_error.has_value());
}
