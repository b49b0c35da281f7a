// HTTP-backed judge and embedding clients. Kept in one translation unit so
// httplib is compiled exactly once.
#include <cstdlib>
#include <string>
#include <utility>

#include "httplib.h"
#include "nlohmann/json.hpp"
#include "traceguard/consistency.hpp"
#include "traceguard/errors.hpp"
#include "traceguard/judge.hpp"

namespace traceguard {
namespace {

using nlohmann::json;

constexpr const char kSystemMessage[] =
    "You review agent traces for consistency. Reply exactly in the requested "
    "answer format.";

bool looks_like_timeout(httplib::Error err) {
  return err == httplib::Error::ConnectionTimeout ||
         err == httplib::Error::Read || err == httplib::Error::Write;
}

struct PostOutcome {
  std::string body;
  bool ok = false;
  bool timed_out = false;
  std::string error;  // transport or status detail, no request content
};

PostOutcome post_json(const std::string& base_url, const std::string& path,
                      const httplib::Headers& headers,
                      const std::string& payload,
                      std::chrono::milliseconds timeout) {
  httplib::Client client(base_url);
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  auto res = client.Post(path, headers, payload, "application/json");
  PostOutcome outcome;
  if (!res) {
    outcome.timed_out = looks_like_timeout(res.error());
    outcome.error = httplib::to_string(res.error());
    return outcome;
  }
  if (res->status < 200 || res->status >= 300) {
    outcome.error = "HTTP status " + std::to_string(res->status);
    return outcome;
  }
  outcome.ok = true;
  outcome.body = res->body;
  return outcome;
}

httplib::Headers auth_headers(const std::string& api_key_env) {
  httplib::Headers headers;
  if (const char* key = std::getenv(api_key_env.c_str());
      key != nullptr && *key != '\0') {
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }
  return headers;
}

class HttpJudge : public JudgeBackend {
 public:
  explicit HttpJudge(JudgeEndpointConfig config) : config_(std::move(config)) {
    config_.validate();
  }

  std::string complete(const std::string& prompt) override {
    json body;
    body["model"] = config_.model_name;
    body["messages"] = json::array({
        json{{"role", "system"}, {"content", kSystemMessage}},
        json{{"role", "user"}, {"content", prompt}},
    });
    body["temperature"] = config_.temperature;
    const std::string payload = body.dump();
    const httplib::Headers headers = auth_headers(config_.api_key_env);

    std::string last_error = "no attempt made";
    bool timed_out = false;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
      PostOutcome outcome = post_json(config_.base_url, config_.path, headers,
                                      payload, config_.timeout);
      if (!outcome.ok) {
        timed_out = outcome.timed_out;
        last_error = outcome.error;
        continue;
      }
      try {
        return extract_completion(outcome.body);
      } catch (const std::exception& e) {
        timed_out = false;
        last_error = std::string("reply body: ") + e.what();
      }
    }
    // Error text identifies the prompt by hash only.
    const std::string detail =
        " after " + std::to_string(config_.max_retries + 1) +
        " attempt(s) for prompt " + prompt_hash(prompt) + ": " + last_error;
    if (timed_out) {
      throw JudgeTimeoutError("judge request timed out" + detail);
    }
    throw JudgeUnavailableError("judge unavailable" + detail);
  }

  std::string name() const override { return config_.model_name; }

 private:
  std::string extract_completion(const std::string& body) const {
    const json reply = json::parse(body);
    const json& node = reply.at(json::json_pointer(config_.completion_pointer));
    if (!node.is_string()) {
      throw ParseError("completion node at " + config_.completion_pointer +
                       " is not a string");
    }
    return node.get<std::string>();
  }

  JudgeEndpointConfig config_;
};

}  // namespace

JudgePtr make_http_judge(JudgeEndpointConfig config) {
  return std::make_unique<HttpJudge>(std::move(config));
}

std::vector<std::vector<double>> fetch_embeddings(
    const EmbeddingEndpointConfig& config,
    const std::vector<std::string>& inputs) {
  if (config.base_url.empty()) {
    throw ConfigError("embedding endpoint base_url is empty");
  }
  if (config.path.empty() || config.path.front() != '/') {
    throw ConfigError("embedding endpoint path must start with '/'");
  }
  if (inputs.empty()) {
    throw ArgumentError("fetch_embeddings needs at least one input");
  }
  json body;
  body["input"] = inputs;
  const std::string payload = body.dump();

  std::string last_error = "no attempt made";
  bool timed_out = false;
  for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
    PostOutcome outcome = post_json(config.base_url, config.path, {}, payload,
                                    config.timeout);
    if (!outcome.ok) {
      timed_out = outcome.timed_out;
      last_error = outcome.error;
      continue;
    }
    try {
      const json reply = json::parse(outcome.body);
      const json& rows = reply.at("embeddings");
      std::vector<std::vector<double>> out;
      out.reserve(rows.size());
      for (const auto& row : rows) {
        out.push_back(row.get<std::vector<double>>());
      }
      if (out.size() != inputs.size()) {
        throw ParseError("embedding endpoint returned " +
                         std::to_string(out.size()) + " vectors for " +
                         std::to_string(inputs.size()) + " inputs");
      }
      return out;
    } catch (const std::exception& e) {
      timed_out = false;
      last_error = std::string("reply body: ") + e.what();
    }
  }
  const std::string detail = " after " +
                             std::to_string(config.max_retries + 1) +
                             " attempt(s): " + last_error;
  if (timed_out) {
    throw JudgeTimeoutError("embedding request timed out" + detail);
  }
  throw TransportError("embedding endpoint unavailable" + detail);
}

}  // namespace traceguard
