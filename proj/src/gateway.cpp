#include "audit/gateway.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <mutex>
#include <sstream>
#include <thread>

#include "audit/mock_backend.hpp"

namespace audit {
namespace {

// Counting admission gate; std::counting_semaphore needs a compile-time
// ceiling, so a condvar keeps the limit fully runtime-configurable.
class AdmissionLimiter {
 public:
  explicit AdmissionLimiter(int limit) : available_(limit) {}

  void acquire() {
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [&] { return available_ > 0; });
    --available_;
  }

  void release() {
    {
      std::lock_guard lock(mutex_);
      ++available_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  int available_;
};

struct AdmissionGuard {
  explicit AdmissionGuard(AdmissionLimiter& limiter) : limiter(limiter) { limiter.acquire(); }
  ~AdmissionGuard() { limiter.release(); }
  AdmissionLimiter& limiter;
};

}  // namespace

const char* role_name(Role role) {
  switch (role) {
    case Role::target: return "target";
    case Role::generator: return "generator";
    case Role::judge: return "judge";
    case Role::embedder: return "embedder";
  }
  return "unknown";
}

Role role_from_name(const std::string& name) {
  if (name == "target") return Role::target;
  if (name == "generator") return Role::generator;
  if (name == "judge") return Role::judge;
  if (name == "embedder") return Role::embedder;
  throw AuditError(ErrorKind::config, "unknown model role '" + name + "'");
}

void ChatRequest::validate() const {
  bool has_user = false;
  for (std::size_t i = 0; i < messages.size(); ++i) {
    if (messages[i].speaker == Speaker::user) has_user = true;
    if (i > 0 && messages[i].speaker == Speaker::assistant &&
        messages[i - 1].speaker == Speaker::assistant) {
      throw AuditError(ErrorKind::input, "chat request has two consecutive assistant turns");
    }
  }
  if (!has_user) {
    throw AuditError(ErrorKind::input, "chat request needs at least one user message");
  }
  if (!(temperature >= 0.0)) {
    throw AuditError(ErrorKind::input, "sampling temperature must be >= 0");
  }
  if (max_output_tokens <= 0) {
    throw AuditError(ErrorKind::input, "max_output_tokens must be positive");
  }
}

const std::string& ChatRequest::last_user_text() const {
  for (auto it = messages.rbegin(); it != messages.rend(); ++it) {
    if (it->speaker == Speaker::user) return it->text;
  }
  throw AuditError(ErrorKind::input, "chat request has no user message");
}

ChatRequest user_request(std::string text, double temperature, std::uint64_t seed) {
  ChatRequest request;
  request.messages.push_back({Speaker::user, std::move(text)});
  request.temperature = temperature;
  request.seed = seed;
  return request;
}

void RoleConfig::validate() const {
  if (endpoint.empty()) {
    throw AuditError(ErrorKind::config, std::string(role_name(role)) + " role has no endpoint");
  }
  if (max_concurrency < 1) {
    throw AuditError(ErrorKind::config, "max_concurrency must be >= 1");
  }
  if (retry.max_attempts < 1) {
    throw AuditError(ErrorKind::config, "retry max_attempts must be >= 1");
  }
  if (embedding_dim < 0) {
    throw AuditError(ErrorKind::config, "embedding_dim must be >= 0");
  }
}

std::string CallbackBackend::chat(const RoleConfig& config, const ChatRequest& request) {
  if (!chat_fn_) throw AuditError(ErrorKind::config, "callback backend has no chat function");
  return chat_fn_(config, request);
}

std::vector<std::vector<float>> CallbackBackend::embed(const RoleConfig& config,
                                                       const std::vector<std::string>& texts) {
  if (!embed_fn_) throw AuditError(ErrorKind::config, "callback backend has no embed function");
  return embed_fn_(config, texts);
}

struct ModelGateway::RoleSlot {
  RoleConfig config;
  std::shared_ptr<Backend> backend;
  std::unique_ptr<AdmissionLimiter> limiter;
  std::atomic<std::uint64_t> chat_calls{0};
  std::atomic<std::uint64_t> embed_calls{0};
  std::atomic<std::uint64_t> retried_attempts{0};
};

ModelGateway::ModelGateway()
    : sleeper_([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }) {}

ModelGateway::~ModelGateway() = default;

void ModelGateway::configure_role(const RoleConfig& config) {
  config.validate();
  std::shared_ptr<Backend> backend;
  if (config.endpoint.rfind("mock:", 0) == 0) {
    backend = std::make_shared<MockBackend>(MockScenario::load(config.endpoint.substr(5)));
  } else if (config.endpoint.rfind("http://", 0) == 0 || config.endpoint.rfind("https://", 0) == 0) {
    backend = make_http_backend();
  } else {
    throw AuditError(ErrorKind::config,
                     "endpoint must start with http://, https://, or mock: (got '" +
                         config.endpoint + "')");
  }
  configure_role(config, std::move(backend));
}

void ModelGateway::configure_role(const RoleConfig& config, std::shared_ptr<Backend> backend) {
  config.validate();
  auto& entry = slots_[static_cast<int>(config.role)];
  entry = std::make_unique<RoleSlot>();
  entry->config = config;
  entry->backend = std::move(backend);
  entry->limiter = std::make_unique<AdmissionLimiter>(config.max_concurrency);
}

bool ModelGateway::has_role(Role role) const { return slots_[static_cast<int>(role)] != nullptr; }

ModelGateway::RoleSlot& ModelGateway::slot(Role role) {
  auto& entry = slots_[static_cast<int>(role)];
  if (!entry) {
    throw AuditError(ErrorKind::config,
                     std::string("role '") + role_name(role) + "' is not configured");
  }
  return *entry;
}

const ModelGateway::RoleSlot& ModelGateway::slot(Role role) const {
  return const_cast<ModelGateway*>(this)->slot(role);
}

const RoleConfig& ModelGateway::role_config(Role role) const { return slot(role).config; }

std::shared_ptr<Backend> ModelGateway::backend(Role role) const { return slot(role).backend; }

void ModelGateway::set_sleeper(std::function<void(std::chrono::milliseconds)> sleeper) {
  sleeper_ = std::move(sleeper);
}

ModelGateway::RoleStats ModelGateway::stats(Role role) const {
  const auto& s = slot(role);
  return {s.chat_calls.load(), s.embed_calls.load(), s.retried_attempts.load()};
}

namespace {

// Shared retry loop: transient failures back off exponentially; anything
// else propagates at once. Delays are base * 2^(attempt-1), so the
// sequence is strictly increasing.
template <typename Fn>
auto with_retries(const RoleConfig& config,
                  const std::function<void(std::chrono::milliseconds)>& sleeper,
                  std::atomic<std::uint64_t>& retried_attempts, Fn&& fn) -> decltype(fn()) {
  std::ostringstream attempt_log;
  for (int attempt = 0; attempt < config.retry.max_attempts; ++attempt) {
    if (attempt > 0) {
      ++retried_attempts;
      auto delay = config.retry.backoff_base * (1L << (attempt - 1));
      sleeper(delay);
    }
    try {
      return fn();
    } catch (const TransientGatewayError& error) {
      attempt_log << "\n  attempt " << (attempt + 1) << ": " << error.what();
    }
  }
  throw AuditError(ErrorKind::gateway,
                   std::string(role_name(config.role)) + " call failed after " +
                       std::to_string(config.retry.max_attempts) +
                       " attempts:" + attempt_log.str());
}

}  // namespace

std::string ModelGateway::chat(Role role, const ChatRequest& request) {
  request.validate();
  auto& s = slot(role);
  ++s.chat_calls;
  AdmissionGuard guard(*s.limiter);
  return with_retries(s.config, sleeper_, s.retried_attempts,
                      [&] { return s.backend->chat(s.config, request); });
}

std::vector<std::vector<float>> ModelGateway::embed(Role role,
                                                    const std::vector<std::string>& texts) {
  if (texts.empty()) {
    throw AuditError(ErrorKind::input, "embed requires at least one text");
  }
  for (const auto& text : texts) {
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
      throw AuditError(ErrorKind::input, "embed input texts must be non-blank");
    }
  }
  auto& s = slot(role);
  ++s.embed_calls;
  AdmissionGuard guard(*s.limiter);
  auto vectors = with_retries(s.config, sleeper_, s.retried_attempts,
                              [&] { return s.backend->embed(s.config, texts); });

  if (vectors.size() != texts.size()) {
    throw AuditError(ErrorKind::protocol, "embedder returned " + std::to_string(vectors.size()) +
                                              " vectors for " + std::to_string(texts.size()) +
                                              " inputs");
  }
  std::size_t expected =
      s.config.embedding_dim > 0 ? static_cast<std::size_t>(s.config.embedding_dim)
                                 : (vectors.empty() ? 0 : vectors.front().size());
  for (auto& vector : vectors) {
    if (vector.size() != expected || expected == 0) {
      throw AuditError(ErrorKind::protocol,
                       "embedding dimension mismatch: expected " + std::to_string(expected) +
                           ", got " + std::to_string(vector.size()));
    }
    double norm_sq = 0.0;
    for (float v : vector) norm_sq += static_cast<double>(v) * v;
    if (norm_sq <= 0.0) {
      throw AuditError(ErrorKind::protocol, "embedder returned a zero vector");
    }
    float inv = static_cast<float>(1.0 / std::sqrt(norm_sq));
    for (float& v : vector) v *= inv;
  }
  return vectors;
}

double ModelGateway::parse_judge_score(const std::string& raw) {
  // Last line of the form "SCORE: <int>" wins; the tag is required.
  std::size_t pos = raw.rfind("SCORE:");
  if (pos == std::string::npos) {
    throw AuditError(ErrorKind::judge_parse, "judge reply is missing the SCORE: line");
  }
  std::size_t cursor = pos + 6;
  while (cursor < raw.size() && (raw[cursor] == ' ' || raw[cursor] == '\t')) ++cursor;
  bool negative = false;
  if (cursor < raw.size() && (raw[cursor] == '-' || raw[cursor] == '+')) {
    negative = raw[cursor] == '-';
    ++cursor;
  }
  if (cursor >= raw.size() || raw[cursor] < '0' || raw[cursor] > '9') {
    throw AuditError(ErrorKind::judge_parse, "judge SCORE: line has no integer");
  }
  long value = 0;
  while (cursor < raw.size() && raw[cursor] >= '0' && raw[cursor] <= '9') {
    value = value * 10 + (raw[cursor] - '0');
    if (value > 100000) break;
    ++cursor;
  }
  if (negative) value = -value;
  if (value < 0 || value > 100) {
    throw AuditError(ErrorKind::judge_parse,
                     "judge score " + std::to_string(value) + " is outside [0, 100]");
  }
  return static_cast<double>(value);
}

}  // namespace audit
