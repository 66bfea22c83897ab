#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "audit/errors.hpp"

// Uniform access to the four model roles (target, generator, judge,
// embedder) over JSON-over-HTTP, plus deterministic mock backends used by
// the test suites. One wire path serves every role.

namespace audit {

enum class Role { target, generator, judge, embedder };

const char* role_name(Role role);
Role role_from_name(const std::string& name);

enum class Speaker { system, user, assistant };

struct ChatMessage {
  Speaker speaker = Speaker::user;
  std::string text;
};

struct ChatRequest {
  std::vector<ChatMessage> messages;
  double temperature = 1.0;
  int max_output_tokens = 1024;
  std::optional<std::uint64_t> seed;  // honored only by the mock backend

  // At least one user message; no two consecutive assistant turns.
  void validate() const;
  const std::string& last_user_text() const;
};

ChatRequest user_request(std::string text, double temperature, std::uint64_t seed);

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds backoff_base{250};
};

struct RoleConfig {
  Role role = Role::target;
  std::string endpoint;  // "http(s)://host[:port][/base]" or "mock:<scenario file>"
  std::string model_name;
  int max_concurrency = 4;
  std::chrono::milliseconds timeout{30000};
  RetryPolicy retry;
  double default_temperature = 1.0;
  int embedding_dim = 0;        // embedder: expected dimension; 0 accepts the remote's
  long max_input_tokens = 0;    // 0 = unlimited (whitespace-token proxy)
  std::string api_key_env;      // environment variable holding the API key

  void validate() const;
};

// Raised by backends for failures worth retrying (connect errors, 5xx,
// rate limits). Anything else propagates immediately.
class TransientGatewayError : public AuditError {
 public:
  explicit TransientGatewayError(const std::string& message)
      : AuditError(ErrorKind::gateway, message) {}
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string chat(const RoleConfig& config, const ChatRequest& request) = 0;
  virtual std::vector<std::vector<float>> embed(const RoleConfig& config,
                                                const std::vector<std::string>& texts) = 0;
};

// Scripted backend for tests: plug in plain functions.
class CallbackBackend : public Backend {
 public:
  using ChatFn = std::function<std::string(const RoleConfig&, const ChatRequest&)>;
  using EmbedFn =
      std::function<std::vector<std::vector<float>>(const RoleConfig&, const std::vector<std::string>&)>;

  CallbackBackend(ChatFn chat_fn, EmbedFn embed_fn)
      : chat_fn_(std::move(chat_fn)), embed_fn_(std::move(embed_fn)) {}

  std::string chat(const RoleConfig& config, const ChatRequest& request) override;
  std::vector<std::vector<float>> embed(const RoleConfig& config,
                                        const std::vector<std::string>& texts) override;

 private:
  ChatFn chat_fn_;
  EmbedFn embed_fn_;
};

std::shared_ptr<Backend> make_http_backend();

class ModelGateway {
 public:
  ModelGateway();
  ~ModelGateway();

  ModelGateway(const ModelGateway&) = delete;
  ModelGateway& operator=(const ModelGateway&) = delete;

  // Builds a backend from the endpoint string ("mock:..." or http/https).
  void configure_role(const RoleConfig& config);
  void configure_role(const RoleConfig& config, std::shared_ptr<Backend> backend);

  bool has_role(Role role) const;
  const RoleConfig& role_config(Role role) const;
  std::shared_ptr<Backend> backend(Role role) const;

  // Sends the request under the role's admission limit, retrying transient
  // transport failures with exponential backoff. Throws ErrorKind::gateway
  // with the per-attempt log once attempts are exhausted.
  std::string chat(Role role, const ChatRequest& request);

  // One L2-normalized vector per input text. Blank inputs raise
  // ErrorKind::input; inconsistent dimensions raise ErrorKind::protocol.
  std::vector<std::vector<float>> embed(Role role, const std::vector<std::string>& texts);

  // Extracts the final "SCORE: <int>" line; the value must lie in [0, 100].
  // Violations raise ErrorKind::judge_parse.
  static double parse_judge_score(const std::string& raw);

  // Call accounting for post-hoc cost analysis.
  struct RoleStats {
    std::uint64_t chat_calls = 0;
    std::uint64_t embed_calls = 0;
    std::uint64_t retried_attempts = 0;
  };
  RoleStats stats(Role role) const;

  // Test hook: replaces the inter-retry sleep.
  void set_sleeper(std::function<void(std::chrono::milliseconds)> sleeper);

 private:
  struct RoleSlot;
  RoleSlot& slot(Role role);
  const RoleSlot& slot(Role role) const;

  std::unique_ptr<RoleSlot> slots_[4];
  std::function<void(std::chrono::milliseconds)> sleeper_;
};

}  // namespace audit
