#pragma once

// Generic HTTP chat-completion client. Endpoint, model, and decoding
// parameters come from config; the API key comes from an environment variable
// only. Optional at runtime: nothing in the offline pipeline needs it.

#include <cstdlib>
#include <optional>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "tpige/enhance.hpp"

namespace tpige {

struct HttpProviderConfig {
    std::string endpoint = "https://api.openai.com";
    std::string path = "/v1/chat/completions";
    std::string model;
    std::string api_key_env = "TPIGE_API_KEY";
    int timeout_s = 60;
    // Decoding parameters forwarded untouched when present (temperature, top_p, ...).
    nlohmann::json decoding = nlohmann::json::object();
};

inline void from_json(const nlohmann::json& j, HttpProviderConfig& c) {
    c.endpoint = j.value("endpoint", c.endpoint);
    c.path = j.value("path", c.path);
    c.model = j.value("model", c.model);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
    c.timeout_s = j.value("timeout_s", c.timeout_s);
    if (j.contains("decoding")) c.decoding = j["decoding"];
    if (j.contains("api_key"))
        throw DataError("provider config must not contain api_key; use " + c.api_key_env);
}

class HttpChatProvider final : public TextProvider {
public:
    explicit HttpChatProvider(HttpProviderConfig config) : config_(std::move(config)) {
        if (config_.model.empty()) throw ParameterError("HttpChatProvider: model required");
        const char* key = std::getenv(config_.api_key_env.c_str());
        if (!key || !*key)
            throw ProviderError("API key environment variable not set: " + config_.api_key_env);
        api_key_ = key;
    }

    ProviderResponse complete(const std::string& instruction,
                              const std::optional<std::string>& image_path) override {
        nlohmann::json content = nlohmann::json::array({{{"type", "text"}, {"text", instruction}}});
        if (image_path)
            content.push_back({{"type", "image_url"}, {"image_url", {{"url", *image_path}}}});
        nlohmann::json body = {{"model", config_.model},
                               {"messages", {{{"role", "user"}, {"content", content}}}}};
        for (auto& [k, v] : config_.decoding.items()) body[k] = v;

        httplib::Client client(config_.endpoint);
        client.set_read_timeout(config_.timeout_s, 0);
        httplib::Headers headers = {{"Authorization", "Bearer " + api_key_}};
        const auto start = std::chrono::steady_clock::now();
        auto res = client.Post(config_.path, headers, body.dump(), "application/json");
        const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                            std::chrono::steady_clock::now() - start)
                            .count();
        if (!res) throw ProviderError("http provider: no response from " + config_.endpoint);
        if (res->status != 200)
            throw ProviderError("http provider: status " + std::to_string(res->status));
        nlohmann::json j = nlohmann::json::parse(res->body, nullptr, false);
        if (j.is_discarded()) throw ProviderError("http provider: invalid JSON response");
        try {
            std::string text = j.at("choices").at(0).at("message").at("content");
            return {std::move(text), name(), static_cast<long>(ms), false};
        } catch (const nlohmann::json::exception&) {
            throw ProviderError("http provider: unexpected response shape");
        }
    }

    std::string name() const override { return "http:" + config_.model; }

private:
    HttpProviderConfig config_;
    std::string api_key_;
};

}  // namespace tpige
