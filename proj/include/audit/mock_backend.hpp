#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include "audit/gateway.hpp"

// Deterministic scripted backend. A scenario is an ordered rule list over
// the last user message; the first matching rule wins. Every output is a
// pure function of (scenario, seed, request sequence), which is what lets
// the test suites replay runs byte-identically with zero network access.

namespace audit {

struct MockRule {
  std::string pattern;              // substring, or ECMAScript regex when is_regex
  bool is_regex = false;
  double trigger_probability = 1.0; // chance the template fires instead of the default
  std::string response_template;
};

struct MockScenario {
  std::string name;
  std::vector<MockRule> rules;
  std::string default_response = "OK.";
  int embedding_dim = 64;
  std::uint64_t seed = 0;

  void validate() const;

  // Plain-text format, one rule per line: pattern TAB probability TAB
  // template. Patterns starting with "re:" are regexes. Directive lines:
  //   @default  TAB template
  //   @dimension TAB <int>
  //   @seed     TAB <int>
  // '#' starts a comment. \n, \t and \\ escapes apply to patterns and
  // templates. Templates may use {input} (the last user message),
  // {input_hash} (16 hex chars of its FNV-1a hash), {item1} (the first
  // numbered list item of the last user message) and {seed} (16 hex chars
  // of the request seed, or the call sequence number when absent).
  static MockScenario parse(const std::string& text, const std::string& name);
  static MockScenario load(const std::filesystem::path& path);
};

// The documented hash-to-vector embedding: coordinate i of the vector for
// `text` is u * 2 - 1 where u = (splitmix64(fnv1a64(text) ^ splitmix64(salt
// ^ i)) >> 11) * 2^-53, and the result is L2-normalized (first coordinate
// forced to 1 if the norm degenerates). Tests recompute it independently.
std::vector<float> mock_embedding(std::string_view text, int dim, std::uint64_t salt);

class MockBackend : public Backend {
 public:
  explicit MockBackend(MockScenario scenario);

  std::string chat(const RoleConfig& config, const ChatRequest& request) override;
  std::vector<std::vector<float>> embed(const RoleConfig& config,
                                        const std::vector<std::string>& texts) override;

  const MockScenario& scenario() const { return scenario_; }

  // Instrumentation for the bounded-concurrency tests.
  int max_in_flight() const { return max_in_flight_.load(); }
  std::uint64_t call_count() const { return calls_.load(); }
  void set_artificial_delay(std::chrono::milliseconds delay) { delay_ = delay; }

 private:
  bool rule_matches(std::size_t index, const std::string& text) const;

  MockScenario scenario_;
  std::vector<std::optional<std::regex>> compiled_;  // parallel to scenario rules
  std::atomic<int> in_flight_{0};
  std::atomic<int> max_in_flight_{0};
  std::atomic<std::uint64_t> calls_{0};
  std::atomic<std::uint64_t> sequence_{0};
  std::chrono::milliseconds delay_{0};
};

}  // namespace audit
