// HTTP client for OpenAI-compatible chat-completions endpoints.
#include "lab/remote_backend.h"

#include <chrono>
#include <cstdlib>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "lab/errors.h"

namespace lab {

using nlohmann::json;

namespace {

std::string env_or(const char* name, const char* fallback) {
    const char* v = std::getenv(name);
    return v ? v : fallback;
}

} // namespace

RemoteConfig RemoteConfig::from_env() {
    RemoteConfig cfg;
    cfg.endpoint = env_or("LAB_LM_ENDPOINT", "");
    cfg.api_token = env_or("LAB_LM_TOKEN", "");
    cfg.model_name = env_or("LAB_LM_MODEL", "");
    return cfg;
}

std::string RemoteConfig::validate() const {
    if (endpoint.empty()) return "remote endpoint not configured";
    if (model_name.empty()) return "remote model name not configured";
    if (max_attempts < 1) return "max_attempts must be >= 1";
    if (backoff_initial_ms < 0) return "backoff must be nonnegative";
    if (!(backoff_factor >= 1.0)) return "backoff factor must be >= 1";
    if (max_in_flight < 1) return "max_in_flight must be >= 1";
    return {};
}

RemoteBackend::RemoteBackend(RemoteConfig cfg) : cfg_(std::move(cfg)) {
    if (const auto err = cfg_.validate(); !err.empty()) throw ConfigError(err);
}

GenResponse RemoteBackend::generate(const GenRequest& req) {
    if (req.want_introspection)
        throw CapabilityError("remote backend cannot expose internal state");
    if (const auto err = req.validate(); !err.empty()) throw ConfigError("bad request: " + err);

    // Only the portable sampling fields go on the wire.
    json msgs = json::array();
    for (const auto& m : req.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
    const json body = {
        {"model", cfg_.model_name}, {"messages", std::move(msgs)},
        {"temperature", req.sampler.temperature}, {"top_p", req.sampler.top_p},
        {"max_tokens", req.max_tokens},           {"seed", req.seed},
    };
    const std::string payload = body.dump();

    httplib::Headers headers;
    if (!cfg_.api_token.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_token);

    // In-flight throttle.
    {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [&] { return in_flight_ < cfg_.max_in_flight; });
        ++in_flight_;
    }
    struct Release {
        RemoteBackend* b;
        ~Release() {
            {
                std::lock_guard<std::mutex> lock(b->mu_);
                --b->in_flight_;
            }
            b->cv_.notify_one();
        }
    } release{this};

    std::string failure = "no attempt made";
    double backoff = cfg_.backoff_initial_ms;
    for (int attempt = 1; attempt <= cfg_.max_attempts; ++attempt) {
        last_attempts_.store(attempt);
        httplib::Client cli(cfg_.endpoint);
        cli.set_connection_timeout(10, 0);
        cli.set_read_timeout(120, 0);
        auto res = cli.Post("/v1/chat/completions", headers, payload, "application/json");

        if (res && res->status >= 200 && res->status < 300) {
            json j;
            try {
                j = json::parse(res->body);
            } catch (const json::exception& e) {
                throw BackendError(std::string("malformed response body: ") + e.what());
            }
            if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty())
                throw BackendError("malformed response body: no choices");
            const json& choice = j["choices"][0];
            GenResponse out;
            try {
                out.text = choice.at("message").at("content").get<std::string>();
            } catch (const json::exception&) {
                throw BackendError("malformed response body: missing message content");
            }
            out.finish_reason = choice.value("finish_reason", "stop");
            return out;
        }

        if (res && res->status >= 400 && res->status < 500)
            throw BackendError("HTTP " + std::to_string(res->status) + " from endpoint (not retried)");

        failure = res ? "HTTP " + std::to_string(res->status)
                      : "transport error: " + httplib::to_string(res.error());
        if (attempt < cfg_.max_attempts) {
            std::this_thread::sleep_for(
                std::chrono::milliseconds(static_cast<long>(backoff)));
            backoff *= cfg_.backoff_factor;
        }
    }
    throw BackendError("remote call failed after " + std::to_string(cfg_.max_attempts) +
                       " attempts; last error: " + failure);
}

} // namespace lab
