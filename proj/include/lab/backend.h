#pragma once
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lab/model.h"
#include "lab/sampler.h"
#include "lab/vocab.h"

namespace lab {

// Uniform generation interface. Two real implementations: the local toy
// model (fully introspectable) and an OpenAI-compatible HTTP endpoint
// (text only). A scripted backend and a JSONL cassette recorder/replayer
// cover testing.

// === request / response ==================================================

struct ChatMessage {
    std::string role; // "system" | "user" | "assistant"
    std::string content;
};

bool valid_role(const std::string& role);

struct GenRequest {
    std::vector<ChatMessage> messages;
    SamplerParams sampler;
    size_t max_tokens = 64;
    uint64_t seed = 0;
    double repetition_penalty = 1.0; // >= 1, 1 = off
    size_t no_repeat_ngram = 0;      // 0 = off
    bool want_introspection = false;

    std::string validate() const; // empty when all invariants hold
};

// Per-token introspection record. `logits` is the snapshot the sampler saw
// (after repetition controls); p1/p2 are the top-2 probabilities of its
// temperature-1 softmax.
struct TokenInfo {
    int id = 0;
    double p1 = 0.0;
    double p2 = 0.0;
    std::vector<double> logits;
};

struct GenResponse {
    std::string text;
    std::vector<TokenInfo> tokens; // present iff introspection
    // Cumulative internal-state record for the whole sequence. Together
    // with the per-token logit snapshots this carries everything a
    // per-step stream would, without the quadratic copies.
    std::optional<StepTrace> final_state;
    std::string finish_reason = "length";
};

// === backend interface ===================================================

class LmBackend {
public:
    virtual ~LmBackend() = default;
    virtual GenResponse generate(const GenRequest& req) = 0;
    // Whether this backend can expose logits/attention/hidden state.
    virtual bool introspectable() const = 0;
    virtual std::string name() const = 0;
};

// Flattening used by the local backends: "role: content\n" per message
// plus a trailing "assistant:" cue.
std::string flatten_messages(const std::vector<ChatMessage>& messages);

// RNG stream id for request-seeded decode loops. Shared so the adaptive
// decoder can reproduce the toy backend's draws bit for bit.
inline constexpr uint64_t kDecodeSampleStream = 101;

// === toy backend =========================================================

// Deterministic decode over the toy transformer: identical (weights,
// request) pairs produce byte-identical responses. Each call builds its
// own cache, so concurrent generate() calls are safe.
class ToyBackend : public LmBackend {
public:
    ToyBackend(const Model& model, Vocab vocab);

    GenResponse generate(const GenRequest& req) override;
    bool introspectable() const override { return true; }
    std::string name() const override { return "toy"; }

    const Model& model() const { return *model_; }
    const Vocab& vocab() const { return vocab_; }

private:
    const Model* model_;
    Vocab vocab_;
};

// Repetition controls shared by the toy backend and the decode loops:
// CTRL-style penalty over already-seen ids, then a hard ban on any token
// that would complete an n-gram already present in `history`.
void apply_repetition_controls(std::vector<double>& logits, const std::vector<int>& history,
                               double penalty, size_t no_repeat_ngram);

// === scripted backend ====================================================

// Test double: replies from a fixed list (in order) or a handler. Counts
// calls and keeps the request log. Not introspectable.
class ScriptedBackend : public LmBackend {
public:
    using Handler = std::function<std::string(const GenRequest&, size_t call_index)>;

    explicit ScriptedBackend(std::vector<std::string> canned);
    explicit ScriptedBackend(Handler handler);

    GenResponse generate(const GenRequest& req) override;
    bool introspectable() const override { return false; }
    std::string name() const override { return "scripted"; }

    size_t calls() const { return log_.size(); }
    const std::vector<GenRequest>& log() const { return log_; }

private:
    std::vector<std::string> canned_;
    Handler handler_;
    std::vector<GenRequest> log_;
};

// === cassette record / replay ============================================

// Serialized request fields (canonical JSON, sorted keys) — the identity
// used to match a replayed call against the recording.
std::string canonical_request_json(const GenRequest& req);

// Wraps another backend and appends {"request", "response"} JSONL lines.
// Text transcripts only: introspection requests are refused.
class CassetteRecorder : public LmBackend {
public:
    CassetteRecorder(LmBackend& inner, std::string path);

    GenResponse generate(const GenRequest& req) override;
    bool introspectable() const override { return false; }
    std::string name() const override { return "record(" + inner_->name() + ")"; }

private:
    LmBackend* inner_;
    std::string path_;
};

// Replays a recorded cassette in order; a request that differs from the
// recording (or runs past its end) is an error.
class CassetteReplay : public LmBackend {
public:
    explicit CassetteReplay(const std::string& path);

    GenResponse generate(const GenRequest& req) override;
    bool introspectable() const override { return false; }
    std::string name() const override { return "replay"; }

    size_t remaining() const { return entries_.size() - next_; }

private:
    struct Entry {
        std::string request_json;
        GenResponse response;
    };
    std::vector<Entry> entries_;
    size_t next_ = 0;
};

} // namespace lab
