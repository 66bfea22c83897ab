#include "audit/config.hpp"

#include <cctype>
#include <cstdlib>

namespace audit {
namespace {

std::string interpolate_env(const std::string& value) {
  std::string out;
  std::size_t cursor = 0;
  while (cursor < value.size()) {
    std::size_t start = value.find("${", cursor);
    if (start == std::string::npos) {
      out += value.substr(cursor);
      break;
    }
    std::size_t end = value.find('}', start + 2);
    if (end == std::string::npos) {
      out += value.substr(cursor);
      break;
    }
    out += value.substr(cursor, start - cursor);
    std::string name = value.substr(start + 2, end - start - 2);
    if (const char* env = std::getenv(name.c_str())) out += env;
    cursor = end + 1;
  }
  return out;
}

struct TomlParser {
  const std::string& text;
  const std::string& origin;
  std::size_t pos = 0;
  std::size_t line = 1;

  [[noreturn]] void fail(const std::string& why) const {
    throw AuditError(ErrorKind::config, origin + ":" + std::to_string(line) + ": " + why);
  }

  bool done() const { return pos >= text.size(); }
  char peek() const { return text[pos]; }

  void advance() {
    if (text[pos] == '\n') ++line;
    ++pos;
  }

  void skip_inline_space() {
    while (!done() && (peek() == ' ' || peek() == '\t' || peek() == '\r')) advance();
  }

  void skip_blank() {
    while (!done()) {
      skip_inline_space();
      if (done()) break;
      if (peek() == '#') {
        while (!done() && peek() != '\n') advance();
        continue;
      }
      if (peek() == '\n') {
        advance();
        continue;
      }
      break;
    }
  }

  void expect_line_end() {
    skip_inline_space();
    if (done()) return;
    if (peek() == '#') {
      while (!done() && peek() != '\n') advance();
    }
    if (done()) return;
    if (peek() != '\n') fail("unexpected trailing characters");
    advance();
  }

  std::string parse_bare_key() {
    std::string key;
    while (!done() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' ||
                       peek() == '-')) {
      key.push_back(peek());
      advance();
    }
    if (key.empty()) fail("expected a key");
    return key;
  }

  std::string parse_string() {
    if (peek() != '"') fail("expected an opening quote");
    advance();
    std::string out;
    while (!done() && peek() != '"') {
      char c = peek();
      if (c == '\n') fail("unterminated string");
      if (c == '\\') {
        advance();
        if (done()) fail("dangling escape");
        char escaped = peek();
        switch (escaped) {
          case 'n': out.push_back('\n'); break;
          case 't': out.push_back('\t'); break;
          case '"': out.push_back('"'); break;
          case '\\': out.push_back('\\'); break;
          default: fail(std::string("unsupported escape \\") + escaped);
        }
        advance();
        continue;
      }
      out.push_back(c);
      advance();
    }
    if (done()) fail("unterminated string");
    advance();  // closing quote
    return interpolate_env(out);
  }

  json parse_scalar() {
    if (peek() == '"') return parse_string();
    std::string token;
    while (!done() && peek() != ',' && peek() != ']' && peek() != '\n' && peek() != '#') {
      token.push_back(peek());
      advance();
    }
    while (!token.empty() && (token.back() == ' ' || token.back() == '\t' || token.back() == '\r')) {
      token.pop_back();
    }
    if (token == "true") return true;
    if (token == "false") return false;
    if (token.empty()) fail("expected a value");
    bool numeric = true;
    bool floating = false;
    for (std::size_t i = 0; i < token.size(); ++i) {
      char c = token[i];
      if (c == '.' || c == 'e' || c == 'E') {
        floating = true;
      } else if (!(std::isdigit(static_cast<unsigned char>(c)) ||
                   ((c == '-' || c == '+') && (i == 0 || token[i - 1] == 'e' || token[i - 1] == 'E')))) {
        numeric = false;
        break;
      }
    }
    if (!numeric) fail("unquoted value '" + token + "' is not a number or boolean");
    try {
      if (floating) return std::stod(token);
      return std::stoll(token);
    } catch (const std::exception&) {
      fail("cannot parse number '" + token + "'");
    }
  }

  json parse_value() {
    skip_inline_space();
    if (done()) fail("expected a value");
    if (peek() == '[') {
      advance();
      json array = json::array();
      while (true) {
        skip_blank();
        if (done()) fail("unterminated array");
        if (peek() == ']') {
          advance();
          break;
        }
        array.push_back(parse_value());
        skip_blank();
        if (!done() && peek() == ',') {
          advance();
          continue;
        }
        if (!done() && peek() == ']') {
          advance();
          break;
        }
        fail("expected ',' or ']' in array");
      }
      return array;
    }
    return parse_scalar();
  }

  json parse_document() {
    json root = json::object();
    json* section = &root;
    while (true) {
      skip_blank();
      if (done()) break;
      if (peek() == '[') {
        advance();
        std::string path;
        while (!done() && peek() != ']' && peek() != '\n') {
          path.push_back(peek());
          advance();
        }
        if (done() || peek() != ']') fail("unterminated section header");
        advance();
        expect_line_end();

        section = &root;
        std::size_t cursor = 0;
        while (cursor <= path.size()) {
          std::size_t dot = path.find('.', cursor);
          std::string part = path.substr(cursor, dot == std::string::npos ? std::string::npos
                                                                          : dot - cursor);
          if (part.empty()) fail("empty section name component");
          section = &(*section)[part];
          if (!section->is_object()) *section = json::object();
          if (dot == std::string::npos) break;
          cursor = dot + 1;
        }
        continue;
      }
      std::string key = parse_bare_key();
      skip_inline_space();
      if (done() || peek() != '=') fail("expected '=' after key '" + key + "'");
      advance();
      (*section)[key] = parse_value();
      expect_line_end();
    }
    return root;
  }
};

}  // namespace

json parse_toml(const std::string& text, const std::string& origin) {
  TomlParser parser{text, origin};
  return parser.parse_document();
}

json load_config_file(const std::filesystem::path& path) {
  std::string text = read_text_file(path);
  std::size_t first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) {
      throw AuditError(ErrorKind::config, "malformed JSON config: " + path.string());
    }
    return value;
  }
  return parse_toml(text, path.string());
}

std::filesystem::path resolve_config_path(const std::filesystem::path& base_dir,
                                          const std::string& value) {
  std::filesystem::path p(value);
  if (p.is_absolute()) return p;
  return base_dir / p;
}

RoleConfig role_config_from_json(Role role, const json& section,
                                 const std::filesystem::path& base_dir) {
  RoleConfig config;
  config.role = role;
  config.endpoint = section.value("endpoint", "");
  if (config.endpoint.rfind("mock:", 0) == 0) {
    std::string scenario = config.endpoint.substr(5);
    config.endpoint = "mock:" + resolve_config_path(base_dir, scenario).string();
  }
  config.model_name = section.value("model_name", "");
  config.max_concurrency = section.value("max_concurrency", 4);
  config.timeout = std::chrono::milliseconds(section.value("timeout_ms", 30000));
  config.retry.max_attempts = section.value("retry_max_attempts", 3);
  config.retry.backoff_base = std::chrono::milliseconds(section.value("retry_backoff_ms", 250));
  // Targets and generators sample at 1.0 by default; judges at 0.
  config.default_temperature = section.value("temperature", role == Role::judge ? 0.0 : 1.0);
  config.embedding_dim = section.value("embedding_dim", 0);
  config.max_input_tokens = section.value("max_input_tokens", 0L);
  std::string default_key_env =
      std::string("AUDIT_") + role_name(role) + "_API_KEY";
  for (auto& c : default_key_env) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  config.api_key_env = section.value("api_key_env", default_key_env);
  config.validate();
  return config;
}

json role_config_to_json(const RoleConfig& config) {
  return json{{"endpoint", config.endpoint},
              {"model_name", config.model_name},
              {"max_concurrency", config.max_concurrency},
              {"timeout_ms", config.timeout.count()},
              {"retry_max_attempts", config.retry.max_attempts},
              {"retry_backoff_ms", config.retry.backoff_base.count()},
              {"temperature", config.default_temperature},
              {"embedding_dim", config.embedding_dim},
              {"max_input_tokens", config.max_input_tokens},
              {"api_key_env", config.api_key_env}};
}

void configure_gateway_from_json(ModelGateway& gateway, const json& config_root,
                                 const std::filesystem::path& base_dir) {
  if (!config_root.contains("roles") || !config_root["roles"].is_object()) {
    throw AuditError(ErrorKind::config, "config has no [roles.*] sections");
  }
  for (const auto& [name, section] : config_root["roles"].items()) {
    Role role = role_from_name(name);
    gateway.configure_role(role_config_from_json(role, section, base_dir));
  }
}

Rubric rubric_from_json(const json& section) {
  Rubric rubric;
  rubric.name = section.value("name", "");
  rubric.description = section.value("description", "");
  rubric.judge_instructions = section.value("judge_instructions", "");
  rubric.violation_threshold = section.value("violation_threshold", 70.0);
  rubric.validate();
  return rubric;
}

json rubric_to_json(const Rubric& rubric) {
  return json{{"name", rubric.name},
              {"description", rubric.description},
              {"judge_instructions", rubric.judge_instructions},
              {"violation_threshold", rubric.violation_threshold}};
}

}  // namespace audit
