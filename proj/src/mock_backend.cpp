#include "audit/mock_backend.hpp"

#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>
#include <thread>

#include "audit/rng.hpp"

namespace audit {
namespace {

std::string unescape(const std::string& raw) {
  std::string out;
  out.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] == '\\' && i + 1 < raw.size()) {
      char next = raw[i + 1];
      if (next == 'n') {
        out.push_back('\n');
        ++i;
        continue;
      }
      if (next == 't') {
        out.push_back('\t');
        ++i;
        continue;
      }
      if (next == '\\') {
        out.push_back('\\');
        ++i;
        continue;
      }
    }
    out.push_back(raw[i]);
  }
  return out;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return fields;
}

std::string hex16(std::uint64_t value) {
  static const char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[value & 0xf];
    value >>= 4;
  }
  return out;
}

std::string first_numbered_item(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::string first_nonempty;
  while (std::getline(in, line)) {
    std::size_t begin = line.find_first_not_of(" \t\r");
    if (begin == std::string::npos) continue;
    if (first_nonempty.empty()) first_nonempty = line.substr(begin);
    std::size_t cursor = begin;
    while (cursor < line.size() && line[cursor] >= '0' && line[cursor] <= '9') ++cursor;
    if (cursor > begin && cursor < line.size() && (line[cursor] == '.' || line[cursor] == ')')) {
      ++cursor;
      std::size_t body = line.find_first_not_of(" \t", cursor);
      if (body != std::string::npos) return line.substr(body);
    }
  }
  return first_nonempty;
}

std::string expand_template(const std::string& tpl, const std::string& input,
                            std::uint64_t stream) {
  std::string out;
  out.reserve(tpl.size());
  for (std::size_t i = 0; i < tpl.size();) {
    if (tpl.compare(i, 7, "{input}") == 0) {
      out += input;
      i += 7;
    } else if (tpl.compare(i, 12, "{input_hash}") == 0) {
      out += hex16(fnv1a64(input));
      i += 12;
    } else if (tpl.compare(i, 7, "{item1}") == 0) {
      out += first_numbered_item(input);
      i += 7;
    } else if (tpl.compare(i, 6, "{seed}") == 0) {
      out += hex16(stream);
      i += 6;
    } else {
      out.push_back(tpl[i]);
      ++i;
    }
  }
  return out;
}

}  // namespace

void MockScenario::validate() const {
  for (const auto& rule : rules) {
    if (rule.pattern.empty()) {
      throw AuditError(ErrorKind::config, "mock rule pattern must be non-empty");
    }
    if (!(rule.trigger_probability >= 0.0 && rule.trigger_probability <= 1.0)) {
      throw AuditError(ErrorKind::config, "mock rule probability must lie in [0, 1]");
    }
  }
  if (embedding_dim < 1) {
    throw AuditError(ErrorKind::config, "mock embedding dimension must be >= 1");
  }
}

MockScenario MockScenario::parse(const std::string& text, const std::string& name) {
  MockScenario scenario;
  scenario.name = name;
  std::istringstream in(text);
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::size_t begin = line.find_first_not_of(" \t");
    if (begin == std::string::npos || line[begin] == '#') continue;

    auto fields = split_tabs(line);
    auto fail = [&](const std::string& why) -> AuditError {
      return AuditError(ErrorKind::config,
                        name + ":" + std::to_string(line_number) + ": " + why);
    };

    if (fields[0] == "@default") {
      if (fields.size() != 2) throw fail("@default needs exactly one template field");
      scenario.default_response = unescape(fields[1]);
      continue;
    }
    if (fields[0] == "@dimension") {
      if (fields.size() != 2) throw fail("@dimension needs one integer field");
      scenario.embedding_dim = std::stoi(fields[1]);
      continue;
    }
    if (fields[0] == "@seed") {
      if (fields.size() != 2) throw fail("@seed needs one integer field");
      scenario.seed = std::stoull(fields[1]);
      continue;
    }

    if (fields.size() != 3) throw fail("rule lines are: pattern TAB probability TAB template");
    MockRule rule;
    rule.pattern = unescape(fields[0]);
    if (rule.pattern.rfind("re:", 0) == 0) {
      rule.is_regex = true;
      rule.pattern = rule.pattern.substr(3);
    }
    try {
      rule.trigger_probability = std::stod(fields[1]);
    } catch (const std::exception&) {
      throw fail("probability field '" + fields[1] + "' is not a number");
    }
    rule.response_template = unescape(fields[2]);
    scenario.rules.push_back(std::move(rule));
  }
  scenario.validate();
  return scenario;
}

MockScenario MockScenario::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw AuditError(ErrorKind::config, "cannot open mock scenario: " + path.string());
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str(), path.filename().string());
}

std::vector<float> mock_embedding(std::string_view text, int dim, std::uint64_t salt) {
  std::uint64_t text_hash = fnv1a64(text);
  std::vector<float> vector(static_cast<std::size_t>(dim));
  double norm_sq = 0.0;
  for (int i = 0; i < dim; ++i) {
    std::uint64_t word = splitmix64(text_hash ^ splitmix64(salt ^ static_cast<std::uint64_t>(i)));
    double u = static_cast<double>(word >> 11) * 0x1.0p-53;
    double coordinate = u * 2.0 - 1.0;
    vector[static_cast<std::size_t>(i)] = static_cast<float>(coordinate);
    norm_sq += coordinate * coordinate;
  }
  if (norm_sq < 1e-24) {
    vector[0] = 1.0f;
    norm_sq = 1.0;
  }
  float inv = static_cast<float>(1.0 / std::sqrt(norm_sq));
  for (float& v : vector) v *= inv;
  return vector;
}

MockBackend::MockBackend(MockScenario scenario) : scenario_(std::move(scenario)) {
  scenario_.validate();
  compiled_.resize(scenario_.rules.size());
  for (std::size_t i = 0; i < scenario_.rules.size(); ++i) {
    if (scenario_.rules[i].is_regex) {
      try {
        compiled_[i].emplace(scenario_.rules[i].pattern);
      } catch (const std::regex_error& error) {
        throw AuditError(ErrorKind::config, "mock rule regex '" + scenario_.rules[i].pattern +
                                                "' is invalid: " + error.what());
      }
    }
  }
}

bool MockBackend::rule_matches(std::size_t index, const std::string& text) const {
  const MockRule& rule = scenario_.rules[index];
  if (rule.is_regex) return std::regex_search(text, *compiled_[index]);
  return text.find(rule.pattern) != std::string::npos;
}

std::string MockBackend::chat(const RoleConfig&, const ChatRequest& request) {
  const std::string& input = request.last_user_text();
  int now = ++in_flight_;
  int seen = max_in_flight_.load();
  while (now > seen && !max_in_flight_.compare_exchange_weak(seen, now)) {
  }
  ++calls_;
  if (delay_.count() > 0) std::this_thread::sleep_for(delay_);
  std::uint64_t stream = request.seed ? *request.seed : sequence_++;
  std::string reply = scenario_.default_response;
  for (std::size_t i = 0; i < scenario_.rules.size(); ++i) {
    const auto& rule = scenario_.rules[i];
    if (!rule_matches(i, input)) continue;
    bool triggered = true;
    if (rule.trigger_probability < 1.0) {
      double draw = keyed_unit_draw(scenario_.seed, stream, fnv1a64(input));
      triggered = draw < rule.trigger_probability;
    }
    if (triggered) reply = expand_template(rule.response_template, input, stream);
    break;  // first matching rule wins, triggered or not
  }

  --in_flight_;
  return reply;
}

std::vector<std::vector<float>> MockBackend::embed(const RoleConfig& config,
                                                   const std::vector<std::string>& texts) {
  ++calls_;
  int dim = config.embedding_dim > 0 ? config.embedding_dim : scenario_.embedding_dim;
  std::vector<std::vector<float>> vectors;
  vectors.reserve(texts.size());
  for (const auto& text : texts) {
    vectors.push_back(mock_embedding(text, dim, scenario_.seed));
  }
  return vectors;
}

}  // namespace audit
