#include <cstdio>
#include <cstdlib>

#define CPPHTTPLIB_OPENSSL_SUPPORT_DISABLED
#include <httplib.h>
#include <json.hpp>

#include "medvg/errors.hpp"
#include "medvg/pipeline.hpp"

namespace medvg {

namespace {
std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v == nullptr ? fallback : std::string(v);
}
}  // namespace

HttpBackend::HttpBackend()
    : base_url_(env_or("MEDVG_BACKEND_URL", "")),
      model_(env_or("MEDVG_BACKEND_MODEL", "")),
      api_key_(env_or("MEDVG_BACKEND_KEY", "")),
      debug_(env_or("MEDVG_DEBUG_PROMPTS", "") == "1") {
  if (base_url_.empty())
    throw ConfigError("HttpBackend: MEDVG_BACKEND_URL is not set");
  if (model_.empty())
    throw ConfigError("HttpBackend: MEDVG_BACKEND_MODEL is not set");
}

HttpBackend::HttpBackend(std::string base_url, std::string model, std::string api_key,
                         bool debug)
    : base_url_(std::move(base_url)), model_(std::move(model)), api_key_(std::move(api_key)),
      debug_(debug) {}

std::string HttpBackend::complete(const std::string& system_prompt,
                                  const std::string& user_text) {
  nlohmann::json body;
  body["model"] = model_;
  // cleaning prompts are fully rendered and already embed the input text;
  // avoid sending it twice
  if (system_prompt.find(user_text) != std::string::npos) {
    body["messages"] = {{{"role", "user"}, {"content", system_prompt}}};
  } else {
    body["messages"] = {{{"role", "system"}, {"content", system_prompt}},
                        {{"role", "user"}, {"content", user_text}}};
  }
  body["temperature"] = 0.0;
  std::string payload = body.dump();

  httplib::Client client(base_url_);
  client.set_read_timeout(120, 0);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

  if (debug_) std::fprintf(stderr, "[backend request] %s\n", payload.c_str());
  auto res = client.Post("/v1/chat/completions", headers, payload, "application/json");
  if (!res)
    throw TransportError("HttpBackend: request failed: " + httplib::to_string(res.error()));
  if (debug_) std::fprintf(stderr, "[backend response %d] %s\n", res->status, res->body.c_str());
  if (res->status != 200)
    throw TransportError("HttpBackend: HTTP status " + std::to_string(res->status));

  nlohmann::json resp = nlohmann::json::parse(res->body, nullptr, false);
  if (resp.is_discarded()) throw TransportError("HttpBackend: malformed response JSON");
  try {
    return resp.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw TransportError("HttpBackend: unexpected response structure");
  }
}

}  // namespace medvg
