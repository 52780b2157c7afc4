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

#include <mft/controller.hpp>

#include "support.hpp"

using namespace mft;
using testsupport::TempDir;

namespace {

/// Controller on a fake clock, with an in-memory backend pair and two
/// registered LOCAL_POSIX endpoints. Agents are simulated by direct control
/// plane calls.
struct Fixture {
  int64_t fake_ms = 1'700'000'000'000;
  InMemoryBackends backends;
  ClusterSecret secret = ClusterSecret::generate();
  ControllerConfig config;
  std::unique_ptr<Controller> ctrl;

  explicit Fixture(fs::path journal_dir = {}) {
    config.liveness_window_s = 30;
    config.stall_timeout_s = 120;
    config.retry.base_delay_ms = 1000;
    config.retry.max_attempts = 3;
    config.journal_dir = std::move(journal_dir);
    config.clock_ms = [this] { return fake_ms; };
    backends.register_endpoint(StorageEndpoint{
        "ep-src", EndpointKind::LocalPosix, "/srv/src",
        default_capabilities(EndpointKind::LocalPosix), std::nullopt, {}});
    backends.register_endpoint(StorageEndpoint{
        "ep-dst", EndpointKind::LocalPosix, "/srv/dst",
        default_capabilities(EndpointKind::LocalPosix), std::nullopt, {}});
    ctrl = std::make_unique<Controller>(config, backends, backends, secret);
  }

  int64_t now_s() const { return fake_ms / 1000; }
  void advance_s(int64_t s) { fake_ms += s * 1000; }

  void register_agent(const std::string& id, const std::set<std::string>& served) {
    ctrl->register_agent(id, served, strcat("http://127.0.0.1:1/", id),
                         strcat("http://127.0.0.1:2/", id));
  }

  TransferRequest request() {
    TransferRequest r;
    r.source = {"ep-src", "in/a.bin"};
    r.destination = {"ep-dst", "out/a.bin"};
    return r;
  }

  TransferCommand drain_one_command(const std::string& agent_id) {
    auto cmds = ctrl->poll_commands(agent_id, 0);
    REQUIRE(cmds.ok());
    REQUIRE(cmds.value().size() == 1);
    auto cmd = TransferCommand::from_json(cmds.value()[0]);
    REQUIRE(cmd.ok());
    return cmd.take();
  }

  AgentEvent event(const std::string& tid, uint32_t attempt, uint64_t seq, AgentEventKind kind,
                   uint64_t bytes = 0) {
    AgentEvent e;
    e.agent_id = "agent-src";
    e.transfer_id = tid;
    e.attempt = attempt;
    e.seq = seq;
    e.kind = kind;
    e.bytes_transferred = bytes;
    return e;
  }
};

}  // namespace

TEST_CASE("admission mode matrix") {
  Fixture fx;

  SUBCASE("both agents live: AGENT_TO_AGENT executed by the source agent") {
    fx.register_agent("agent-src", {"ep-src"});
    fx.register_agent("agent-dst", {"ep-dst"});
    auto rec = fx.ctrl->admit(fx.request());
    REQUIRE(rec.ok());
    CHECK(rec.value().state == TransferState::Planned);
    CHECK(rec.value().mode == TransferMode::AgentToAgent);
    CHECK(rec.value().executor_agent_id == "agent-src");
    CHECK(rec.value().transfer_id.size() == 32);
  }

  SUBCASE("source only: PUSH") {
    fx.register_agent("agent-src", {"ep-src"});
    auto rec = fx.ctrl->admit(fx.request());
    REQUIRE(rec.ok());
    CHECK(rec.value().mode == TransferMode::AgentToStoragePush);
    CHECK(rec.value().executor_agent_id == "agent-src");
  }

  SUBCASE("destination only: PULL") {
    fx.register_agent("agent-dst", {"ep-dst"});
    auto rec = fx.ctrl->admit(fx.request());
    REQUIRE(rec.ok());
    CHECK(rec.value().mode == TransferMode::AgentToStoragePull);
    CHECK(rec.value().executor_agent_id == "agent-dst");
  }

  SUBCASE("no agents: FAILED with NoAgentPath, record still returned") {
    auto rec = fx.ctrl->admit(fx.request());
    REQUIRE(rec.ok());
    CHECK(rec.value().state == TransferState::Failed);
    REQUIRE(rec.value().last_error.has_value());
    CHECK(rec.value().last_error->code == "NoAgentPath");
  }

  SUBCASE("unknown endpoint is an error, no record") {
    TransferRequest bad = fx.request();
    bad.source.endpoint_id = "nope";
    auto rec = fx.ctrl->admit(bad);
    REQUIRE_FALSE(rec.ok());
    CHECK(rec.error().code == "UnknownEndpoint");
  }

  SUBCASE("dead agents do not count") {
    fx.register_agent("agent-src", {"ep-src"});
    fx.advance_s(fx.config.liveness_window_s + 1);
    auto rec = fx.ctrl->admit(fx.request());
    REQUIRE(rec.ok());
    CHECK(rec.value().state == TransferState::Failed);
  }

  SUBCASE("endpoint affinity picks the preferred agent") {
    fx.backends.remove_endpoint("ep-src");
    StorageEndpoint src{"ep-src", EndpointKind::LocalPosix, "/srv/src",
                        default_capabilities(EndpointKind::LocalPosix), std::nullopt,
                        {"agent-b"}};
    fx.backends.register_endpoint(src);
    fx.register_agent("agent-a", {"ep-src"});
    fx.register_agent("agent-b", {"ep-src"});
    auto rec = fx.ctrl->admit(fx.request());
    REQUIRE(rec.ok());
    CHECK(rec.value().executor_agent_id == "agent-b");
  }
}

TEST_CASE("dispatch and command content") {
  Fixture fx;
  fx.register_agent("agent-src", {"ep-src"});
  fx.register_agent("agent-dst", {"ep-dst"});
  auto rec = fx.ctrl->admit(fx.request()).take();

  fx.ctrl->run_scheduler_once(fx.now_s());
  CHECK(fx.ctrl->get_record(rec.transfer_id).value().state == TransferState::Dispatched);

  auto cmd = fx.drain_one_command("agent-src");
  CHECK(cmd.type == "transfer");
  CHECK(cmd.transfer_id == rec.transfer_id);
  CHECK(cmd.attempt == 0);
  CHECK(cmd.mode == TransferMode::AgentToAgent);
  CHECK(cmd.chunk_bytes == kDefaultChunkBytes);
  CHECK(cmd.verify_digest);
  CHECK(cmd.source.role == "connector");
  REQUIRE(cmd.source.endpoint.has_value());
  CHECK(cmd.source.endpoint->endpoint_id == "ep-src");
  CHECK(cmd.source.path == "in/a.bin");
  CHECK(cmd.destination.role == "data_channel");
  CHECK(cmd.destination.data_channel_url == "http://127.0.0.1:1/agent-dst");

  // The carried tokens authorize exactly the destination path.
  REQUIRE(cmd.destination.create_token.has_value());
  REQUIRE(cmd.destination.patch_token.has_value());
  auto v = verify_token(fx.secret, *cmd.destination.create_token, TokenVerb::DataCreate,
                        "ep-dst", "out/a.bin", fx.now_s(), 0);
  REQUIRE(v.ok());
  CHECK(v.value() == rec.transfer_id);
  CHECK(verify_token(fx.secret, *cmd.destination.patch_token, TokenVerb::DataPatch, "ep-dst",
                     "out/a.bin", fx.now_s(), 0)
            .ok());

  SUBCASE("nothing pending afterwards") {
    fx.ctrl->run_scheduler_once(fx.now_s());
    auto cmds = fx.ctrl->poll_commands("agent-src", 0);
    REQUIRE(cmds.ok());
    CHECK(cmds.value().empty());
  }
}

TEST_CASE("progress and completion flow") {
  Fixture fx;
  fx.register_agent("agent-src", {"ep-src"});
  fx.register_agent("agent-dst", {"ep-dst"});
  auto rec = fx.ctrl->admit(fx.request()).take();
  fx.ctrl->run_scheduler_once(fx.now_s());
  fx.drain_one_command("agent-src");
  auto tid = rec.transfer_id;

  auto progress = fx.event(tid, 0, 1, AgentEventKind::Progress, 42);
  progress.total_bytes = 100;
  REQUIRE(fx.ctrl->ingest_events("agent-src", {progress}).ok());
  auto running = fx.ctrl->get_record(tid).take();
  CHECK(running.state == TransferState::Running);
  CHECK(running.bytes_transferred == 42);
  CHECK(running.total_bytes == 100);

  SUBCASE("duplicate seq replay is idempotent") {
    auto before = to_json(fx.ctrl->get_record(tid).value()).dump();
    auto dup = fx.event(tid, 0, 1, AgentEventKind::Progress, 999);
    REQUIRE(fx.ctrl->ingest_events("agent-src", {dup}).ok());
    CHECK(to_json(fx.ctrl->get_record(tid).value()).dump() == before);
  }

  SUBCASE("completion with matching digests") {
    auto done = fx.event(tid, 0, 2, AgentEventKind::Completed, 100);
    done.total_bytes = 100;
    done.digest_source = "aabb";
    done.digest_destination = "aabb";
    REQUIRE(fx.ctrl->ingest_events("agent-src", {done}).ok());
    auto final = fx.ctrl->get_record(tid).take();
    CHECK(final.state == TransferState::Completed);
    CHECK(final.digest_source == "aabb");
    CHECK(final.digest_destination == "aabb");
  }

  SUBCASE("completion with mismatched digests retries") {
    auto done = fx.event(tid, 0, 2, AgentEventKind::Completed, 100);
    done.digest_source = "aabb";
    done.digest_destination = "ccdd";
    REQUIRE(fx.ctrl->ingest_events("agent-src", {done}).ok());
    auto failed = fx.ctrl->get_record(tid).take();
    CHECK(failed.state == TransferState::RetryWait);
    CHECK(failed.attempt == 1);
    CHECK(failed.last_error->code == "DigestMismatch");
  }

  SUBCASE("completion without a destination digest is accepted (unverifiable side)") {
    auto done = fx.event(tid, 0, 2, AgentEventKind::Completed, 100);
    done.digest_source = "aabb";
    REQUIRE(fx.ctrl->ingest_events("agent-src", {done}).ok());
    CHECK(fx.ctrl->get_record(tid).value().state == TransferState::Completed);
  }

  SUBCASE("stale attempt events are discarded") {
    auto fail = fx.event(tid, 0, 2, AgentEventKind::Error);
    fail.error = make_error("ConnectorError", "boom", true);
    REQUIRE(fx.ctrl->ingest_events("agent-src", {fail}).ok());
    CHECK(fx.ctrl->get_record(tid).value().attempt == 1);

    // Old attempt reports completion after the controller moved on: ignored.
    auto late = fx.event(tid, 0, 3, AgentEventKind::Completed, 100);
    late.digest_source = late.digest_destination = "aabb";
    REQUIRE(fx.ctrl->ingest_events("agent-src", {late}).ok());
    CHECK(fx.ctrl->get_record(tid).value().state == TransferState::RetryWait);
  }
}

TEST_CASE("retry with backoff, then exhaustion") {
  Fixture fx;
  fx.register_agent("agent-src", {"ep-src"});
  fx.register_agent("agent-dst", {"ep-dst"});
  auto tid = fx.ctrl->admit(fx.request()).take().transfer_id;

  for (uint32_t attempt = 0; attempt < 3; ++attempt) {
    fx.ctrl->run_scheduler_once(fx.now_s());
    auto cmd = fx.drain_one_command("agent-src");
    CHECK(cmd.attempt == attempt);
    auto fail = fx.event(tid, attempt, 1, AgentEventKind::Error);
    fail.error = make_error("ConnectorError", "boom", true);
    REQUIRE(fx.ctrl->ingest_events("agent-src", {fail}).ok());

    auto rec = fx.ctrl->get_record(tid).take();
    if (attempt < 2) {
      CHECK(rec.state == TransferState::RetryWait);
      // Backoff holds until the deadline.
      fx.ctrl->run_scheduler_once(fx.now_s());
      CHECK(fx.ctrl->get_record(tid).value().state == TransferState::RetryWait);
      fx.advance_s(2 * (1 << attempt));
      fx.ctrl->run_scheduler_once(fx.now_s());
      CHECK(fx.ctrl->get_record(tid).value().state == TransferState::Dispatched);
      // Keep the agents alive across the simulated wait.
      fx.ctrl->heartbeat("agent-src", {});
      fx.ctrl->heartbeat("agent-dst", {});
    } else {
      CHECK(rec.state == TransferState::Failed);
      CHECK(rec.attempt == 3);
    }
  }
}

TEST_CASE("liveness scan fails attempts of dead executors and re-plans") {
  Fixture fx;
  fx.register_agent("agent-src", {"ep-src"});
  fx.register_agent("agent-dst", {"ep-dst"});
  auto tid = fx.ctrl->admit(fx.request()).take().transfer_id;
  fx.ctrl->run_scheduler_once(fx.now_s());
  fx.drain_one_command("agent-src");
  REQUIRE(fx.ctrl->ingest_events("agent-src",
                                 {fx.event(tid, 0, 1, AgentEventKind::Progress, 10)})
              .ok());
  CHECK(fx.ctrl->get_record(tid).value().state == TransferState::Running);

  // Source agent dies; destination keeps heartbeating.
  fx.advance_s(fx.config.liveness_window_s + 1);
  fx.ctrl->heartbeat("agent-dst", {});
  fx.ctrl->run_scheduler_once(fx.now_s());
  auto rec = fx.ctrl->get_record(tid).take();
  CHECK(rec.state == TransferState::RetryWait);
  CHECK(rec.last_error->code == "AgentLost");

  // After backoff the transfer is re-planned to the surviving side.
  fx.advance_s(2);
  fx.ctrl->heartbeat("agent-dst", {});
  fx.ctrl->run_scheduler_once(fx.now_s());
  rec = fx.ctrl->get_record(tid).take();
  CHECK(rec.state == TransferState::Dispatched);
  CHECK(rec.mode == TransferMode::AgentToStoragePull);
  CHECK(rec.executor_agent_id == "agent-dst");
  auto cmd = fx.drain_one_command("agent-dst");
  CHECK(cmd.attempt == 1);
  CHECK(cmd.destination.role == "connector");
  CHECK(cmd.source.role == "connector");
}

TEST_CASE("stall detection without events") {
  Fixture fx;
  fx.register_agent("agent-src", {"ep-src"});
  fx.register_agent("agent-dst", {"ep-dst"});
  auto tid = fx.ctrl->admit(fx.request()).take().transfer_id;
  fx.ctrl->run_scheduler_once(fx.now_s());
  fx.drain_one_command("agent-src");

  // Executor stays live but silent past the stall timeout.
  fx.advance_s(fx.config.stall_timeout_s + 1);
  fx.ctrl->heartbeat("agent-src", {});
  fx.ctrl->heartbeat("agent-dst", {});
  fx.ctrl->run_scheduler_once(fx.now_s());
  auto rec = fx.ctrl->get_record(tid).take();
  CHECK(rec.state == TransferState::RetryWait);
  CHECK(rec.last_error->code == "Stalled");
}

TEST_CASE("re-plan keeps waiting in PLANNED when no agent is available") {
  Fixture fx;
  fx.register_agent("agent-src", {"ep-src"});
  fx.register_agent("agent-dst", {"ep-dst"});
  auto tid = fx.ctrl->admit(fx.request()).take().transfer_id;

  // Both agents vanish before dispatch: stay PLANNED, no attempt burned.
  fx.advance_s(fx.config.liveness_window_s + 1);
  fx.ctrl->run_scheduler_once(fx.now_s());
  auto rec = fx.ctrl->get_record(tid).take();
  CHECK(rec.state == TransferState::Planned);
  CHECK(rec.attempt == 0);

  // An agent returns; dispatch proceeds with a fresh plan.
  fx.register_agent("agent-dst", {"ep-dst"});
  fx.ctrl->run_scheduler_once(fx.now_s());
  rec = fx.ctrl->get_record(tid).take();
  CHECK(rec.state == TransferState::Dispatched);
  CHECK(rec.mode == TransferMode::AgentToStoragePull);
}

TEST_CASE("cancel semantics") {
  Fixture fx;
  fx.register_agent("agent-src", {"ep-src"});
  fx.register_agent("agent-dst", {"ep-dst"});
  auto tid = fx.ctrl->admit(fx.request()).take().transfer_id;
  fx.ctrl->run_scheduler_once(fx.now_s());
  fx.drain_one_command("agent-src");
  REQUIRE(fx.ctrl->ingest_events("agent-src",
                                 {fx.event(tid, 0, 1, AgentEventKind::Progress, 10)})
              .ok());

  auto canceled = fx.ctrl->cancel(tid);
  REQUIRE(canceled.ok());
  CHECK(canceled.value().state == TransferState::Canceled);

  // Cancel commands reach both involved agents.
  auto src_cmds = fx.ctrl->poll_commands("agent-src", 0);
  auto dst_cmds = fx.ctrl->poll_commands("agent-dst", 0);
  REQUIRE(src_cmds.ok());
  REQUIRE(dst_cmds.ok());
  CHECK(src_cmds.value().size() == 1);
  CHECK(src_cmds.value()[0]["type"] == "cancel");
  CHECK(dst_cmds.value().size() == 1);

  SUBCASE("cancel twice is AlreadyTerminal") {
    auto again = fx.ctrl->cancel(tid);
    REQUIRE_FALSE(again.ok());
    CHECK(again.error().code == "AlreadyTerminal");
  }

  SUBCASE("cancel unknown transfer") {
    CHECK(fx.ctrl->cancel("00000000000000000000000000000000").error().code == "UnknownTransfer");
  }

  SUBCASE("late events for the canceled transfer are discarded") {
    auto late = fx.event(tid, 0, 2, AgentEventKind::Completed, 100);
    late.digest_source = late.digest_destination = "aa";
    REQUIRE(fx.ctrl->ingest_events("agent-src", {late}).ok());
    CHECK(fx.ctrl->get_record(tid).value().state == TransferState::Canceled);
  }
}

TEST_CASE("grants are issued for credentialed endpoints and embedded as tokens only") {
  Fixture fx;
  auto cred = fx.backends.store_credential(
      CredentialPayload{CredentialKind::AccessKeyPair, "AKID", "squirrel", ""});
  REQUIRE(cred.ok());
  fx.backends.remove_endpoint("ep-dst");
  StorageEndpoint dst{"ep-dst", EndpointKind::ObjectStore, "http://127.0.0.1:9000/bkt",
                      default_capabilities(EndpointKind::ObjectStore), cred.value(), {}};
  REQUIRE(fx.backends.register_endpoint(dst).ok());

  fx.register_agent("agent-src", {"ep-src"});
  auto rec = fx.ctrl->admit(fx.request()).take();
  CHECK(rec.mode == TransferMode::AgentToStoragePush);
  fx.ctrl->run_scheduler_once(fx.now_s());
  auto cmd = fx.drain_one_command("agent-src");

  REQUIRE(cmd.destination.grant_token.has_value());
  auto dumped = cmd.to_json().dump();
  CHECK(dumped.find("squirrel") == std::string::npos);  // no raw secret in commands

  // The grant token redeems to the payload through the controller.
  auto payload = fx.ctrl->redeem_grant(*cmd.destination.grant_token, "agent-src");
  REQUIRE(payload.ok());
  CHECK(payload.value().secret_key == "squirrel");

  SUBCASE("tokens for other verbs cannot redeem") {
    auto bogus = mint_token(fx.secret, "grant-x", TokenVerb::DataPatch, "ep-dst", "-", 600,
                            fx.now_s());
    auto denied = fx.ctrl->redeem_grant(bogus.take(), "agent-src");
    REQUIRE_FALSE(denied.ok());
    CHECK(denied.error().code == "Unauthorized");
  }
}

TEST_CASE("journal replay restores records across restart") {
  TempDir tmp;
  std::string tid_done, tid_running;
  {
    Fixture fx(tmp.path() / "journal");
    fx.register_agent("agent-src", {"ep-src"});
    fx.register_agent("agent-dst", {"ep-dst"});
    tid_done = fx.ctrl->admit(fx.request()).take().transfer_id;
    fx.ctrl->run_scheduler_once(fx.now_s());
    fx.drain_one_command("agent-src");
    auto done = fx.event(tid_done, 0, 1, AgentEventKind::Completed, 10);
    done.digest_source = done.digest_destination = "aa";
    REQUIRE(fx.ctrl->ingest_events("agent-src", {done}).ok());

    TransferRequest second = fx.request();
    second.destination.path = "out/b.bin";
    tid_running = fx.ctrl->admit(second).take().transfer_id;
    fx.ctrl->run_scheduler_once(fx.now_s());
    fx.drain_one_command("agent-src");
    REQUIRE(fx.ctrl
                ->ingest_events("agent-src",
                                {fx.event(tid_running, 0, 1, AgentEventKind::Progress, 5)})
                .ok());
  }

  Fixture fx2(tmp.path() / "journal");
  auto done_rec = fx2.ctrl->get_record(tid_done);
  REQUIRE(done_rec.ok());
  CHECK(done_rec.value().state == TransferState::Completed);

  auto running_rec = fx2.ctrl->get_record(tid_running);
  REQUIRE(running_rec.ok());
  CHECK(running_rec.value().state == TransferState::Running);

  // Terminal records stay terminal: late events are discarded.
  auto late = fx2.event(tid_done, 0, 5, AgentEventKind::Error);
  late.error = make_error("X", "y", true);
  REQUIRE(fx2.ctrl->ingest_events("agent-src", {late}).ok());
  CHECK(fx2.ctrl->get_record(tid_done).value().state == TransferState::Completed);

  // The RUNNING record re-enters retry via liveness scan (executor unknown
  // after restart) and eventually re-dispatches once agents return.
  fx2.advance_s(fx2.config.stall_timeout_s + 1);
  fx2.ctrl->run_scheduler_once(fx2.now_s());
  CHECK(fx2.ctrl->get_record(tid_running).value().state == TransferState::RetryWait);
  fx2.register_agent("agent-src", {"ep-src"});
  fx2.register_agent("agent-dst", {"ep-dst"});
  fx2.advance_s(2);
  fx2.ctrl->run_scheduler_once(fx2.now_s());
  CHECK(fx2.ctrl->get_record(tid_running).value().state == TransferState::Dispatched);
}

TEST_CASE("list and pagination") {
  Fixture fx;
  fx.register_agent("agent-src", {"ep-src"});
  fx.register_agent("agent-dst", {"ep-dst"});
  std::vector<std::string> ids;
  for (int i = 0; i < 7; ++i) {
    TransferRequest r = fx.request();
    r.destination.path = strcat("out/file-", i, ".bin");
    ids.push_back(fx.ctrl->admit(r).take().transfer_id);
    fx.advance_s(1);
  }

  auto page1 = fx.ctrl->list_records(std::nullopt, 3, "");
  REQUIRE(page1.size() == 3);
  CHECK(page1[0].transfer_id == ids[6]);  // newest first

  auto page2 = fx.ctrl->list_records(std::nullopt, 3, page1.back().transfer_id);
  REQUIRE(page2.size() == 3);
  auto page3 = fx.ctrl->list_records(std::nullopt, 3, page2.back().transfer_id);
  REQUIRE(page3.size() == 1);

  std::set<std::string> seen;
  for (const auto& p : {page1, page2, page3}) {
    for (const auto& r : p) seen.insert(r.transfer_id);
  }
  CHECK(seen.size() == 7);  // every record exactly once

  auto planned = fx.ctrl->list_records(TransferState::Planned, 100, "");
  CHECK(planned.size() == 7);
  CHECK(fx.ctrl->list_records(TransferState::Completed, 100, "").empty());
}

TEST_CASE("history state sequences always obey the transition table") {
  Fixture fx;
  fx.register_agent("agent-src", {"ep-src"});
  fx.register_agent("agent-dst", {"ep-dst"});
  auto tid = fx.ctrl->admit(fx.request()).take().transfer_id;
  fx.ctrl->run_scheduler_once(fx.now_s());
  fx.drain_one_command("agent-src");
  auto fail = fx.event(tid, 0, 1, AgentEventKind::Error);
  fail.error = make_error("ConnectorError", "x", true);
  REQUIRE(fx.ctrl->ingest_events("agent-src", {fail}).ok());
  fx.advance_s(2);
  fx.ctrl->heartbeat("agent-src", {});
  fx.ctrl->heartbeat("agent-dst", {});
  fx.ctrl->run_scheduler_once(fx.now_s());
  REQUIRE(fx.ctrl->ingest_events("agent-src",
                                 {fx.event(tid, 1, 1, AgentEventKind::Progress, 1)})
              .ok());
  auto done = fx.event(tid, 1, 2, AgentEventKind::Completed, 10);
  done.digest_source = done.digest_destination = "aa";
  REQUIRE(fx.ctrl->ingest_events("agent-src", {done}).ok());

  auto rec = fx.ctrl->get_record(tid).take();
  REQUIRE(rec.state == TransferState::Completed);
  TransferState prev = TransferState::Created;
  for (const auto& h : rec.history) {
    auto probe = TransferRecord{};
    probe.state = prev;
    bool legal = false;
    for (auto ev : {TransferEvent::Planned, TransferEvent::Dispatched,
                    TransferEvent::ProgressStarted, TransferEvent::Completed,
                    TransferEvent::AttemptFailed, TransferEvent::BackoffElapsed,
                    TransferEvent::AttemptsExhausted, TransferEvent::Cancel}) {
      auto out = apply_transition(probe, ev, 0);
      if (out.ok() && out.value().state == h.state) {
        legal = true;
        break;
      }
    }
    CHECK(legal);
    prev = h.state;
  }
}
