#pragma once
#include <atomic>
#include <condition_variable>
#include <mutex>
#include <string>

#include "lab/backend.h"

namespace lab {

// OpenAI-compatible chat-completions client. Text in, text out; no
// introspection. Transport failures and 5xx responses retry with
// exponential backoff; 4xx surfaces immediately.
struct RemoteConfig {
    std::string endpoint;   // base URL, e.g. "http://127.0.0.1:8080"
    std::string api_token;  // sent as a Bearer header when non-empty
    std::string model_name; // wire "model" field
    int max_attempts = 3;
    int backoff_initial_ms = 100;
    double backoff_factor = 2.0;
    int max_in_flight = 4;

    // LAB_LM_ENDPOINT / LAB_LM_TOKEN / LAB_LM_MODEL.
    static RemoteConfig from_env();

    std::string validate() const; // empty when usable
};

class RemoteBackend : public LmBackend {
public:
    explicit RemoteBackend(RemoteConfig cfg);

    GenResponse generate(const GenRequest& req) override;
    bool introspectable() const override { return false; }
    std::string name() const override { return "remote"; }

    // Attempt count of the most recent completed call (diagnostic only;
    // racy under concurrent use by design).
    int last_attempts() const { return last_attempts_.load(); }

private:
    RemoteConfig cfg_;
    std::mutex mu_;
    std::condition_variable cv_;
    int in_flight_ = 0;
    std::atomic<int> last_attempts_{0};
};

} // namespace lab
