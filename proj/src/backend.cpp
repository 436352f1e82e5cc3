// Local generation backends: the toy-transformer decode loop, the scripted
// test double, and JSONL cassette record/replay.
#include "lab/backend.h"

#include <algorithm>
#include <fstream>
#include <unordered_set>

#include "json.hpp"
#include "lab/errors.h"
#include "lab/rng.h"

namespace lab {

using nlohmann::json;

namespace {

// Cassette text fields hold raw model output, which need not be valid UTF-8.
// Each byte is widened to its own codepoint (the latin-1 view) before JSON
// serialization so every transcript line is well formed and replays restore
// the original bytes exactly.
std::string bytes_to_codepoints(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (const char ch : s) {
        const auto c = static_cast<unsigned char>(ch);
        if (c < 0x80) {
            out.push_back(ch);
        } else {
            out.push_back(static_cast<char>(0xC0 | (c >> 6)));
            out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
        }
    }
    return out;
}

std::string codepoints_to_bytes(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (size_t i = 0; i < s.size(); ++i) {
        const auto c = static_cast<unsigned char>(s[i]);
        if (c < 0x80) {
            out.push_back(s[i]);
        } else if ((c == 0xC2 || c == 0xC3) && i + 1 < s.size()) {
            const auto d = static_cast<unsigned char>(s[++i]);
            out.push_back(static_cast<char>(((c & 0x03u) << 6) | (d & 0x3Fu)));
        } else {
            throw ConfigError("cassette text holds a codepoint outside the byte range");
        }
    }
    return out;
}

// Top-2 probabilities of the temperature-1 softmax of `logits`.
std::pair<double, double> top_two_probs(const std::vector<double>& logits) {
    const auto p = softmax_temperature(logits, 1.0);
    double p1 = 0.0, p2 = 0.0;
    for (double x : p) {
        if (x > p1) {
            p2 = p1;
            p1 = x;
        } else if (x > p2) {
            p2 = x;
        }
    }
    return {p1, p2};
}

} // namespace

// === request plumbing ====================================================

bool valid_role(const std::string& role) {
    return role == "system" || role == "user" || role == "assistant";
}

std::string GenRequest::validate() const {
    for (const auto& m : messages)
        if (!valid_role(m.role)) return "unknown message role: " + m.role;
    if (!sampler.valid()) return "sampler parameters out of range";
    if (max_tokens < 1) return "max_tokens must be >= 1";
    if (!(repetition_penalty >= 1.0)) return "repetition_penalty must be >= 1";
    return {};
}

std::string flatten_messages(const std::vector<ChatMessage>& messages) {
    std::string out;
    for (const auto& m : messages) {
        out += m.role;
        out += ": ";
        out += m.content;
        out += '\n';
    }
    out += "assistant:";
    return out;
}

// === repetition controls =================================================

void apply_repetition_controls(std::vector<double>& logits, const std::vector<int>& history,
                               double penalty, size_t no_repeat_ngram) {
    if (penalty > 1.0) {
        std::unordered_set<int> seen(history.begin(), history.end());
        for (int id : seen) {
            if (id < 0 || static_cast<size_t>(id) >= logits.size()) continue;
            double& z = logits[static_cast<size_t>(id)];
            z = z > 0.0 ? z / penalty : z * penalty;
        }
    }
    const size_t n = no_repeat_ngram;
    if (n > 0 && history.size() + 1 >= n) {
        // Ban every token that would complete an n-gram already present:
        // match the trailing n-1 tokens against each historical window.
        const size_t ctx = n - 1;
        const int* tail = history.data() + (history.size() - ctx);
        for (size_t i = 0; i + n <= history.size(); ++i) {
            if (!std::equal(tail, tail + ctx, history.data() + i)) continue;
            const int banned = history[i + ctx];
            if (banned >= 0 && static_cast<size_t>(banned) < logits.size())
                logits[static_cast<size_t>(banned)] = -1e30;
        }
    }
}

// === toy backend =========================================================

ToyBackend::ToyBackend(const Model& model, Vocab vocab)
    : model_(&model), vocab_(std::move(vocab)) {}

GenResponse ToyBackend::generate(const GenRequest& req) {
    if (const auto err = req.validate(); !err.empty()) throw ConfigError("bad request: " + err);

    std::vector<int> ids = vocab_.tokenize(flatten_messages(req.messages));
    const size_t prompt_len = ids.size();
    if (prompt_len + req.max_tokens > model_->cfg.max_seq)
        throw BackendError("prompt plus max_tokens exceeds the model context window");

    KvCache cache = make_cache(*model_, req.want_introspection);
    forward_extend(*model_, ids, cache);

    GenResponse resp;
    RngSequence rng(Rng{req.seed, kDecodeSampleStream});
    for (size_t t = 0; t < req.max_tokens; ++t) {
        std::vector<double> logits = cache.last_logits;
        apply_repetition_controls(logits, ids, req.repetition_penalty, req.no_repeat_ngram);

        const auto [p1, p2] = top_two_probs(logits);
        auto probs = softmax_temperature(logits, req.sampler.temperature);
        probs = apply_sampler(probs, req.sampler);
        const int id = sample_index(probs, rng.u01());

        if (req.want_introspection) {
            TokenInfo info;
            info.id = id;
            info.p1 = p1;
            info.p2 = p2;
            info.logits = std::move(logits);
            resp.tokens.push_back(std::move(info));
        }
        ids.push_back(id);
        forward_extend(*model_, ids, cache);
    }

    resp.text = vocab_.detokenize(std::vector<int>(ids.begin() + prompt_len, ids.end()));
    resp.finish_reason = "length";
    if (req.want_introspection) resp.final_state = forward_step(*model_, ids, &cache);
    return resp;
}

// === scripted backend ====================================================

ScriptedBackend::ScriptedBackend(std::vector<std::string> canned)
    : canned_(std::move(canned)) {}

ScriptedBackend::ScriptedBackend(Handler handler) : handler_(std::move(handler)) {}

GenResponse ScriptedBackend::generate(const GenRequest& req) {
    if (req.want_introspection)
        throw CapabilityError("scripted backend cannot expose internal state");
    const size_t index = log_.size();
    log_.push_back(req);

    GenResponse resp;
    if (handler_) {
        resp.text = handler_(req, index);
    } else {
        if (index >= canned_.size())
            throw BackendError("script exhausted after " + std::to_string(canned_.size()) +
                               " replies");
        resp.text = canned_[index];
    }
    resp.finish_reason = "stop";
    return resp;
}

// === cassettes ===========================================================

std::string canonical_request_json(const GenRequest& req) {
    json msgs = json::array();
    for (const auto& m : req.messages)
        msgs.push_back({{"role", m.role}, {"content", bytes_to_codepoints(m.content)}});
    const json j = {
        {"messages", std::move(msgs)},
        {"temperature", req.sampler.temperature},
        {"top_p", req.sampler.top_p},
        {"top_k", req.sampler.top_k},
        {"min_p", req.sampler.min_p},
        {"max_tokens", req.max_tokens},
        {"seed", req.seed},
        {"repetition_penalty", req.repetition_penalty},
        {"no_repeat_ngram", req.no_repeat_ngram},
    };
    return j.dump();
}

CassetteRecorder::CassetteRecorder(LmBackend& inner, std::string path)
    : inner_(&inner), path_(std::move(path)) {
    std::ofstream out(path_, std::ios::trunc); // fresh transcript per recorder
    if (!out) throw ConfigError("cannot open cassette for writing: " + path_);
}

GenResponse CassetteRecorder::generate(const GenRequest& req) {
    if (req.want_introspection)
        throw CapabilityError("cassettes record text transcripts only");
    GenResponse resp = inner_->generate(req);

    json line = {
        {"request", json::parse(canonical_request_json(req))},
        {"response",
         {{"text", bytes_to_codepoints(resp.text)}, {"finish_reason", resp.finish_reason}}},
    };
    std::ofstream out(path_, std::ios::app);
    if (!out) throw BackendError("cassette write failed: " + path_);
    out << line.dump() << '\n';
    return resp;
}

CassetteReplay::CassetteReplay(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open cassette: " + path);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ConfigError("cassette line " + std::to_string(lineno) + ": " + e.what());
        }
        Entry e;
        e.request_json = j.at("request").dump();
        e.response.text = codepoints_to_bytes(j.at("response").at("text").get<std::string>());
        e.response.finish_reason = j.at("response").at("finish_reason").get<std::string>();
        entries_.push_back(std::move(e));
    }
}

GenResponse CassetteReplay::generate(const GenRequest& req) {
    if (req.want_introspection)
        throw CapabilityError("replayed cassettes carry no internal state");
    if (next_ >= entries_.size())
        throw BackendError("cassette exhausted at call " + std::to_string(next_ + 1));
    const Entry& e = entries_[next_];
    if (canonical_request_json(req) != e.request_json)
        throw BackendError("cassette mismatch at call " + std::to_string(next_ + 1) +
                           ": request differs from the recording");
    ++next_;
    return e.response;
}

} // namespace lab
