#pragma once

// Neutral chat-completion HTTP contract for the explainer/scorer models, with
// retries, timeouts and an append-only JSONL transcript store. The auth token
// is read from an environment variable at call time and never persisted.

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "moescope/common.hpp"
#include "moescope/defaults.hpp"

namespace moescope {

struct ProtocolError : std::runtime_error {
    explicit ProtocolError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ChatMessage {
    std::string role;
    std::string content;
};

struct LlmEndpoint {
    std::string base_url;  // scheme://host[:port]
    std::string path = "/v1/chat/completions";
    std::string model;
    std::string auth_env;  // name of the env var holding the token; never the token
    int timeout_ms = defaults::kEndpointTimeoutMs;
    int max_retries = defaults::kEndpointMaxRetries;
    double temperature = defaults::kEndpointTemperature;
    int retry_backoff_ms = 250;

    std::string id() const { return base_url + "#" + model; }
};

inline LlmEndpoint endpoint_from_json(const nlohmann::json& j) {
    LlmEndpoint e;
    try {
        e.base_url = j.at("base_url").get<std::string>();
        e.model = j.at("model").get<std::string>();
        e.path = j.value("path", e.path);
        e.auth_env = j.value("auth_env", std::string());
        e.timeout_ms = j.value("timeout_ms", e.timeout_ms);
        e.max_retries = j.value("max_retries", e.max_retries);
        e.temperature = j.value("temperature", e.temperature);
        e.retry_backoff_ms = j.value("retry_backoff_ms", e.retry_backoff_ms);
    } catch (const nlohmann::json::exception& ex) {
        throw ConfigError(std::string("bad endpoint config: ") + ex.what());
    }
    return e;
}

// Append-only store; safe for concurrent appends.
class TranscriptStore {
public:
    explicit TranscriptStore(std::string path) : path_(std::move(path)) {}

    void append(const nlohmann::json& entry) {
        std::lock_guard<std::mutex> lock(mu_);
        std::ofstream out(path_, std::ios::app);
        if (!out) throw IoError("cannot append transcript: " + path_);
        out << entry.dump() << "\n";
    }

    static std::vector<nlohmann::json> read_all(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot read transcript: " + path);
        std::vector<nlohmann::json> entries;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            entries.push_back(nlohmann::json::parse(line));
        }
        return entries;
    }

    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::mutex mu_;
};

// One chat completion round trip. Retries with exponential backoff on
// transport errors and 5xx responses; other HTTP statuses fail immediately.
inline std::string call_llm(const LlmEndpoint& endpoint, const std::vector<ChatMessage>& messages,
                            TranscriptStore* transcripts = nullptr) {
    nlohmann::json body;
    body["model"] = endpoint.model;
    body["temperature"] = endpoint.temperature;
    body["messages"] = nlohmann::json::array();
    for (const auto& m : messages)
        body["messages"].push_back({{"role", m.role}, {"content", m.content}});
    const std::string payload = body.dump();

    std::string auth_token;
    if (!endpoint.auth_env.empty()) {
        const char* tok = std::getenv(endpoint.auth_env.c_str());
        if (!tok)
            throw ConfigError("auth environment variable not set: " + endpoint.auth_env);
        auth_token = tok;
    }

    std::string last_error;
    for (int attempt = 0; attempt <= endpoint.max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(
                std::chrono::milliseconds(endpoint.retry_backoff_ms * (1 << (attempt - 1))));
        }
        httplib::Client client(endpoint.base_url);
        client.set_connection_timeout(endpoint.timeout_ms / 1000,
                                      (endpoint.timeout_ms % 1000) * 1000);
        client.set_read_timeout(endpoint.timeout_ms / 1000, (endpoint.timeout_ms % 1000) * 1000);
        httplib::Headers headers;
        if (!auth_token.empty()) headers.emplace("Authorization", "Bearer " + auth_token);

        auto res = client.Post(endpoint.path, headers, payload, "application/json");
        const auto record = [&](int status, const std::string& response_body) {
            if (!transcripts) return;
            transcripts->append({{"endpoint", endpoint.id()},
                                 {"attempt", attempt},
                                 {"status", status},
                                 {"request", body},
                                 {"response", response_body},
                                 {"unix_ms", std::chrono::duration_cast<std::chrono::milliseconds>(
                                                 std::chrono::system_clock::now().time_since_epoch())
                                                 .count()}});
        };
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            record(-1, last_error);
            continue;
        }
        record(res->status, res->body);
        if (res->status >= 500) {
            last_error = "server error: HTTP " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200)
            throw EndpointError("endpoint returned HTTP " + std::to_string(res->status) + ": " +
                                res->body);
        nlohmann::json parsed;
        try {
            parsed = nlohmann::json::parse(res->body);
            return parsed.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw ProtocolError(std::string("malformed completion response: ") + e.what());
        }
    }
    throw EndpointError("retries exhausted (" + std::to_string(endpoint.max_retries) +
                        "); last error: " + last_error);
}

}  // namespace moescope
