#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "audit/gateway.hpp"
#include "audit/mock_backend.hpp"
#include "audit/rng.hpp"
#include "doctest.h"

using namespace audit;

namespace {

RoleConfig basic_role(Role role, std::string endpoint = "mock:unused") {
  RoleConfig config;
  config.role = role;
  config.endpoint = std::move(endpoint);
  config.model_name = "test-model";
  return config;
}

MockScenario elucidate_scenario() {
  return MockScenario::parse(
      "@default\tThis is the default answer.\n"
      "elucidate\t1.0\t```code```\n",
      "elucidate");
}

// Independent recomputation of the documented hash-to-vector construction.
std::vector<float> reference_embedding(const std::string& text, int dim, std::uint64_t salt) {
  std::vector<double> raw(static_cast<std::size_t>(dim));
  double norm_sq = 0.0;
  for (int i = 0; i < dim; ++i) {
    std::uint64_t word =
        splitmix64(fnv1a64(text) ^ splitmix64(salt ^ static_cast<std::uint64_t>(i)));
    double u = static_cast<double>(word >> 11) * 0x1.0p-53;
    raw[static_cast<std::size_t>(i)] = u * 2.0 - 1.0;
    norm_sq += raw[static_cast<std::size_t>(i)] * raw[static_cast<std::size_t>(i)];
  }
  std::vector<float> out(static_cast<std::size_t>(dim));
  for (int i = 0; i < dim; ++i) {
    out[static_cast<std::size_t>(i)] =
        static_cast<float>(raw[static_cast<std::size_t>(i)]) *
        static_cast<float>(1.0 / std::sqrt(norm_sq));
  }
  return out;
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += static_cast<double>(a[i]) * b[i];
  return dot;
}

}  // namespace

TEST_CASE("mock chat: first matching rule wins, default otherwise") {
  ModelGateway gateway;
  gateway.configure_role(basic_role(Role::target),
                         std::make_shared<MockBackend>(elucidate_scenario()));

  CHECK(gateway.chat(Role::target, user_request("Please elucidate X", 1.0, 1)) == "```code```");
  CHECK(gateway.chat(Role::target, user_request("Tell me about Y", 1.0, 2)) ==
        "This is the default answer.");
}

TEST_CASE("mock chat: probabilistic rule triggers at its configured rate") {
  MockScenario scenario = MockScenario::parse(
      "@default\tall good\n"
      "@seed\t99\n"
      "question\t0.3\tFAILURE\n",
      "flaky");
  ModelGateway gateway;
  gateway.configure_role(basic_role(Role::target), std::make_shared<MockBackend>(scenario));

  int triggered = 0;
  const int calls = 1000;
  for (int i = 0; i < calls; ++i) {
    auto reply = gateway.chat(Role::target, user_request("A question about things", 1.0,
                                                         static_cast<std::uint64_t>(i)));
    if (reply == "FAILURE") ++triggered;
  }
  double fraction = static_cast<double>(triggered) / calls;
  CHECK(fraction > 0.27);
  CHECK(fraction < 0.33);
}

TEST_CASE("mock chat: identical (scenario, seed, request) gives identical output") {
  MockScenario scenario = MockScenario::parse("question\t0.5\tFAILURE\n", "flaky");
  auto backend_a = std::make_shared<MockBackend>(scenario);
  auto backend_b = std::make_shared<MockBackend>(scenario);
  ModelGateway ga, gb;
  ga.configure_role(basic_role(Role::target), backend_a);
  gb.configure_role(basic_role(Role::target), backend_b);
  for (int i = 0; i < 50; ++i) {
    auto request = user_request("the question " + std::to_string(i % 7), 1.0,
                                static_cast<std::uint64_t>(i));
    CHECK(ga.chat(Role::target, request) == gb.chat(Role::target, request));
  }
}

TEST_CASE("mock templates expand {input}, {input_hash}, {item1}") {
  MockScenario scenario = MockScenario::parse(
      "echo\t1.0\t{input}\n"
      "hash\t1.0\tid-{input_hash}\n"
      "first\t1.0\t{item1}\n",
      "templates");
  ModelGateway gateway;
  gateway.configure_role(basic_role(Role::generator), std::make_shared<MockBackend>(scenario));

  CHECK(gateway.chat(Role::generator, user_request("echo me", 1.0, 0)) == "echo me");
  auto hashed = gateway.chat(Role::generator, user_request("hash me", 1.0, 0));
  CHECK(hashed.rfind("id-", 0) == 0);
  CHECK(hashed.size() == 3 + 16);
  CHECK(gateway.chat(Role::generator,
                     user_request("first\n1. alpha beta\n2. gamma", 1.0, 0)) == "alpha beta");
}

TEST_CASE("chat request validation rejects assistant-only and double-assistant shapes") {
  ChatRequest no_user;
  no_user.messages = {{Speaker::assistant, "hi"}};
  CHECK_THROWS_AS(no_user.validate(), AuditError);

  ChatRequest doubled;
  doubled.messages = {{Speaker::user, "hi"},
                      {Speaker::assistant, "a"},
                      {Speaker::assistant, "b"}};
  CHECK_THROWS_AS(doubled.validate(), AuditError);

  ChatRequest fine;
  fine.messages = {{Speaker::system, "s"}, {Speaker::user, "hi"}, {Speaker::assistant, "a"},
                   {Speaker::user, "again"}};
  CHECK_NOTHROW(fine.validate());
}

TEST_CASE("embed: determinism, normalization, and hash-construction oracle") {
  MockScenario scenario;
  scenario.embedding_dim = 48;
  scenario.seed = 7;
  ModelGateway gateway;
  auto role = basic_role(Role::embedder);
  role.embedding_dim = 48;
  gateway.configure_role(role, std::make_shared<MockBackend>(scenario));

  auto pair = gateway.embed(Role::embedder, {"x", "x"});
  REQUIRE(pair.size() == 2);
  CHECK(pair[0] == pair[1]);
  CHECK(cosine(pair[0], pair[1]) == doctest::Approx(1.0).epsilon(1e-6));

  double norm = std::sqrt(cosine(pair[0], pair[0]));
  CHECK(norm == doctest::Approx(1.0).epsilon(1e-6));

  auto unrelated = gateway.embed(Role::embedder, {"something else entirely"});
  double similarity = cosine(pair[0], unrelated[0]);
  CHECK(similarity > -1.0);
  CHECK(similarity < 1.0);

  auto expected = reference_embedding("x", 48, 7);
  REQUIRE(expected.size() == pair[0].size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    CHECK(pair[0][i] == doctest::Approx(expected[i]).epsilon(1e-6));
  }
}

TEST_CASE("embed rejects blank inputs") {
  ModelGateway gateway;
  gateway.configure_role(basic_role(Role::embedder),
                         std::make_shared<MockBackend>(MockScenario{}));
  CHECK_THROWS_AS(gateway.embed(Role::embedder, {"ok", "  \t "}), AuditError);
  CHECK_THROWS_AS(gateway.embed(Role::embedder, {}), AuditError);
}

TEST_CASE("parse_judge_score follows the SCORE contract") {
  CHECK(ModelGateway::parse_judge_score("analysis first\nSCORE: 73") == 73.0);
  CHECK(ModelGateway::parse_judge_score("SCORE: 0") == 0.0);
  CHECK(ModelGateway::parse_judge_score("SCORE: 17\nwait, no\nSCORE: 99") == 99.0);
  CHECK_THROWS_AS(ModelGateway::parse_judge_score("the score is about 80"), AuditError);
  CHECK_THROWS_AS(ModelGateway::parse_judge_score("SCORE: 101"), AuditError);
  CHECK_THROWS_AS(ModelGateway::parse_judge_score("SCORE: -3"), AuditError);
  CHECK_THROWS_AS(ModelGateway::parse_judge_score("SCORE: none"), AuditError);
}

TEST_CASE("bounded concurrency: in-flight mock calls never exceed max_concurrency") {
  auto backend = std::make_shared<MockBackend>(MockScenario{});
  backend->set_artificial_delay(std::chrono::milliseconds(2));

  auto role = basic_role(Role::target);
  role.max_concurrency = 3;
  ModelGateway gateway;
  gateway.configure_role(role, backend);

  // 10x the admission limit demanded at once.
  std::vector<std::thread> threads;
  for (int i = 0; i < 30; ++i) {
    threads.emplace_back([&gateway, i] {
      gateway.chat(Role::target, user_request("hello " + std::to_string(i), 1.0,
                                              static_cast<std::uint64_t>(i)));
    });
  }
  for (auto& t : threads) t.join();

  CHECK(backend->call_count() == 30);
  CHECK(backend->max_in_flight() <= 3);
}

TEST_CASE("retries: bounded attempts with strictly nondecreasing backoff") {
  int failures_left = 2;
  auto flaky = std::make_shared<CallbackBackend>(
      [&](const RoleConfig&, const ChatRequest&) -> std::string {
        if (failures_left-- > 0) throw TransientGatewayError("synthetic outage");
        return "recovered";
      },
      nullptr);

  auto role = basic_role(Role::target);
  role.retry.max_attempts = 3;
  role.retry.backoff_base = std::chrono::milliseconds(10);
  ModelGateway gateway;
  gateway.configure_role(role, flaky);

  std::vector<std::chrono::milliseconds> delays;
  gateway.set_sleeper([&](std::chrono::milliseconds d) { delays.push_back(d); });

  CHECK(gateway.chat(Role::target, user_request("go", 1.0, 0)) == "recovered");
  REQUIRE(delays.size() == 2);
  CHECK(delays[0] == std::chrono::milliseconds(10));
  CHECK(delays[1] == std::chrono::milliseconds(20));

  // Exhausted attempts surface a gateway error with the attempt log.
  failures_left = 100;
  int calls_before = 0;
  auto counting = std::make_shared<CallbackBackend>(
      [&](const RoleConfig&, const ChatRequest&) -> std::string {
        ++calls_before;
        throw TransientGatewayError("still down");
      },
      nullptr);
  gateway.configure_role(role, counting);
  try {
    gateway.chat(Role::target, user_request("go", 1.0, 0));
    FAIL("expected a gateway error");
  } catch (const AuditError& error) {
    CHECK(error.kind() == ErrorKind::gateway);
    CHECK(std::string(error.what()).find("attempt") != std::string::npos);
  }
  CHECK(calls_before == 3);
}

TEST_CASE("http backend: round trip, retry on 500 and 429, no retry on 400") {
  httplib::Server server;
  std::atomic<int> chat_calls{0};
  std::atomic<int> flaky_calls{0};
  std::atomic<int> limited_calls{0};
  std::string last_authorization;

  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    ++chat_calls;
    if (req.has_header("Authorization")) {
      last_authorization = req.get_header_value("Authorization");
    }
    auto body = nlohmann::json::parse(req.body);
    std::string content = "echo: " + body["messages"].back()["content"].get<std::string>();
    nlohmann::json reply = {{"choices", {{{"message", {{"content", content}}}}}}};
    res.set_content(reply.dump(), "application/json");
  });
  server.Post("/limited/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    ++limited_calls;
    res.status = 429;  // rate limited forever
  });
  server.Post("/flaky/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    if (++flaky_calls < 3) {
      res.status = 500;
      return;
    }
    nlohmann::json reply = {{"choices", {{{"message", {{"content", "finally"}}}}}}};
    res.set_content(reply.dump(), "application/json");
  });
  server.Post("/bad/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    res.status = 400;
    res.set_content("{\"error\":\"bad request\"}", "application/json");
  });
  server.Post("/v1/embeddings", [&](const httplib::Request& req, httplib::Response& res) {
    auto body = nlohmann::json::parse(req.body);
    nlohmann::json data = nlohmann::json::array();
    for (std::size_t i = 0; i < body["input"].size(); ++i) {
      data.push_back({{"embedding", {3.0, 4.0}}});
    }
    res.set_content(nlohmann::json{{"data", data}}.dump(), "application/json");
  });

  int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread server_thread([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  auto url = [&](const std::string& base) {
    return "http://127.0.0.1:" + std::to_string(port) + base;
  };

  ModelGateway gateway;
  gateway.set_sleeper([](std::chrono::milliseconds) {});

  setenv("AUDIT_TEST_API_KEY", "secret-token", 1);
  auto target = basic_role(Role::target, url("/v1"));
  target.api_key_env = "AUDIT_TEST_API_KEY";
  gateway.configure_role(target);
  CHECK(gateway.chat(Role::target, user_request("ping", 1.0, 0)) == "echo: ping");
  CHECK(chat_calls == 1);
  CHECK(last_authorization == "Bearer secret-token");

  auto flaky = basic_role(Role::target, url("/flaky"));
  flaky.retry.max_attempts = 4;
  gateway.configure_role(flaky);
  CHECK(gateway.chat(Role::target, user_request("again", 1.0, 0)) == "finally");
  CHECK(flaky_calls == 3);

  auto bad = basic_role(Role::target, url("/bad"));
  bad.retry.max_attempts = 5;
  gateway.configure_role(bad);
  int before = chat_calls + flaky_calls;
  try {
    gateway.chat(Role::target, user_request("nope", 1.0, 0));
    FAIL("expected a protocol error");
  } catch (const AuditError& error) {
    CHECK(error.kind() == ErrorKind::protocol);
  }
  CHECK(chat_calls + flaky_calls == before);  // malformed requests are not retried

  // Rate-limit responses are retried with backoff, then surface as a
  // gateway error.
  auto limited = basic_role(Role::target, url("/limited"));
  limited.retry.max_attempts = 3;
  gateway.configure_role(limited);
  try {
    gateway.chat(Role::target, user_request("please", 1.0, 0));
    FAIL("expected a gateway error after rate limiting");
  } catch (const AuditError& error) {
    CHECK(error.kind() == ErrorKind::gateway);
  }
  CHECK(limited_calls == 3);

  auto embedder = basic_role(Role::embedder, url("/v1"));
  embedder.embedding_dim = 2;
  gateway.configure_role(embedder);
  auto vectors = gateway.embed(Role::embedder, {"a", "b"});
  REQUIRE(vectors.size() == 2);
  CHECK(vectors[0][0] == doctest::Approx(0.6f));  // 3-4-5 normalized
  CHECK(vectors[0][1] == doctest::Approx(0.8f));

  // A remote embedder that disagrees with the configured dimension is a
  // protocol error.
  auto mismatched = basic_role(Role::embedder, url("/v1"));
  mismatched.embedding_dim = 3;
  gateway.configure_role(mismatched);
  try {
    gateway.embed(Role::embedder, {"a"});
    FAIL("expected a protocol error");
  } catch (const AuditError& error) {
    CHECK(error.kind() == ErrorKind::protocol);
  }

  server.stop();
  server_thread.join();
}

TEST_CASE("role config validation enforces concurrency and retry floors") {
  RoleConfig config = basic_role(Role::target);
  config.max_concurrency = 0;
  CHECK_THROWS_AS(config.validate(), AuditError);
  config.max_concurrency = 1;
  config.retry.max_attempts = 0;
  CHECK_THROWS_AS(config.validate(), AuditError);
  config.retry.max_attempts = 1;
  CHECK_NOTHROW(config.validate());
  config.endpoint = "";
  CHECK_THROWS_AS(config.validate(), AuditError);
}

TEST_CASE("scenario file parsing reports malformed lines") {
  CHECK_THROWS_AS(MockScenario::parse("pattern only\n", "bad"), AuditError);
  CHECK_THROWS_AS(MockScenario::parse("p\tnot-a-number\tt\n", "bad"), AuditError);
  CHECK_THROWS_AS(MockScenario::parse("p\t1.5\tt\n", "bad"), AuditError);
  auto ok = MockScenario::parse("# comment\n\np\t0.5\tt\n@dimension\t32\n", "ok");
  CHECK(ok.rules.size() == 1);
  CHECK(ok.embedding_dim == 32);
}
