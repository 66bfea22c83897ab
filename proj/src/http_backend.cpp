#include <cstdlib>
#include <memory>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "audit/gateway.hpp"

namespace audit {
namespace {

using json = nlohmann::json;

struct ParsedEndpoint {
  std::string host_port;  // scheme://host[:port]
  std::string base_path;  // "" or "/v1" etc., no trailing slash
};

ParsedEndpoint parse_endpoint(const std::string& endpoint) {
  std::size_t scheme_end = endpoint.find("://");
  if (scheme_end == std::string::npos) {
    throw AuditError(ErrorKind::config, "endpoint is not a URL: " + endpoint);
  }
  std::size_t path_start = endpoint.find('/', scheme_end + 3);
  ParsedEndpoint parsed;
  if (path_start == std::string::npos) {
    parsed.host_port = endpoint;
  } else {
    parsed.host_port = endpoint.substr(0, path_start);
    parsed.base_path = endpoint.substr(path_start);
  }
  while (!parsed.base_path.empty() && parsed.base_path.back() == '/') {
    parsed.base_path.pop_back();
  }
  return parsed;
}

const char* speaker_wire_name(Speaker speaker) {
  switch (speaker) {
    case Speaker::system: return "system";
    case Speaker::user: return "user";
    case Speaker::assistant: return "assistant";
  }
  return "user";
}

class HttpBackend : public Backend {
 public:
  std::string chat(const RoleConfig& config, const ChatRequest& request) override {
    json body;
    body["model"] = config.model_name;
    body["messages"] = json::array();
    for (const auto& message : request.messages) {
      body["messages"].push_back({{"role", speaker_wire_name(message.speaker)},
                                  {"content", message.text}});
    }
    body["temperature"] = request.temperature;
    body["max_tokens"] = request.max_output_tokens;

    json payload = post(config, "/chat/completions", body);
    try {
      return payload.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& error) {
      throw AuditError(ErrorKind::protocol,
                       std::string("chat response missing choices[0].message.content: ") +
                           error.what());
    }
  }

  std::vector<std::vector<float>> embed(const RoleConfig& config,
                                        const std::vector<std::string>& texts) override {
    json body;
    body["model"] = config.model_name;
    body["input"] = texts;

    json payload = post(config, "/embeddings", body);
    std::vector<std::vector<float>> vectors;
    try {
      for (const auto& entry : payload.at("data")) {
        std::vector<float> vector;
        for (const auto& value : entry.at("embedding")) {
          vector.push_back(value.get<float>());
        }
        vectors.push_back(std::move(vector));
      }
    } catch (const json::exception& error) {
      throw AuditError(ErrorKind::protocol,
                       std::string("embedding response missing data[*].embedding: ") + error.what());
    }
    return vectors;
  }

 private:
  json post(const RoleConfig& config, const std::string& path, const json& body) {
    ParsedEndpoint endpoint = parse_endpoint(config.endpoint);
    httplib::Client client(endpoint.host_port);
    auto seconds = std::chrono::duration_cast<std::chrono::seconds>(config.timeout);
    auto micros = std::chrono::duration_cast<std::chrono::microseconds>(config.timeout - seconds);
    client.set_connection_timeout(seconds.count(), micros.count());
    client.set_read_timeout(seconds.count(), micros.count());
    client.set_write_timeout(seconds.count(), micros.count());

    httplib::Headers headers;
    if (!config.api_key_env.empty()) {
      if (const char* key = std::getenv(config.api_key_env.c_str()); key && *key) {
        headers.emplace("Authorization", std::string("Bearer ") + key);
      }
    }

    auto result = client.Post(endpoint.base_path + path, headers, body.dump(), "application/json");
    if (!result) {
      throw TransientGatewayError("transport failure: " + httplib::to_string(result.error()));
    }
    int status = result->status;
    if (status == 429 || status == 408 || status >= 500) {
      throw TransientGatewayError("HTTP " + std::to_string(status) + " from " + config.endpoint);
    }
    if (status < 200 || status >= 300) {
      // Malformed-request responses are never retried.
      throw AuditError(ErrorKind::protocol,
                       "HTTP " + std::to_string(status) + " from " + config.endpoint + ": " +
                           result->body.substr(0, 300));
    }
    json payload = json::parse(result->body, nullptr, false);
    if (payload.is_discarded()) {
      throw AuditError(ErrorKind::protocol, "response from " + config.endpoint + " is not JSON");
    }
    return payload;
  }
};

}  // namespace

std::shared_ptr<Backend> make_http_backend() { return std::make_shared<HttpBackend>(); }

}  // namespace audit
