#pragma once
#include <string>

#include "json.hpp"
#include "lab/backend.h"
#include "lab/config.h"
#include "lab/critic.h"
#include "lab/retrieval.h"

namespace lab {

// Run orchestration: a resolved run context, the instrumented decode loop
// that splices the retrieval gate and the cache compressor into token
// generation, and the operator-level entry points behind the CLI verbs.

// Everything a run needs, resolved once. The vocabulary is the byte set
// plus the corpus's distinct words, so sampled tokens can be real words;
// a configured model vocab_size of 0 is replaced by the vocabulary size.
struct RunContext {
    RunConfig cfg;
    Vocab vocab;
    Model model;
    Index index;          // over the configured corpus; empty otherwise
    bool has_index = false;
};

RunContext make_run_context(RunConfig cfg);

// Instrumentation accumulated across every generation a run performs.
struct RunLog {
    nlohmann::json gate_decisions = nlohmann::json::array();
    nlohmann::json retrievals = nlohmann::json::array();
    nlohmann::json critic_events = nlohmann::json::array();
    size_t generations = 0;
    size_t retrieval_count = 0;     // retrieve() invocations (gate triggers)
    size_t context_insertions = 0;  // retrievals that actually added tokens
    uint64_t dot_products = 0;      // cache counter, summed over generations
    CompressionStats critic_stats;  // from the most recent generation
};

// The toy decode loop with the retrieval gate and the cache compressor
// spliced in after each accepted token. With both disabled, responses are
// byte-identical to ToyBackend under the same request. Retrieved context
// is appended to the working sequence (visible to later steps) but never
// to the reported text, and every retrieval decays the gate sensitivity.
class PipelineBackend : public LmBackend {
public:
    explicit PipelineBackend(const RunContext& ctx, RunLog* log = nullptr);

    GenResponse generate(const GenRequest& req) override;
    bool introspectable() const override { return true; }
    std::string name() const override { return "pipeline"; }

private:
    const RunContext* ctx_;
    RunLog* log_;
};

// === operator entry points ===============================================

struct GenerateOutcome {
    std::string answer;
    nlohmann::json trace;   // question, strategy record, event logs
    nlohmann::json metrics; // counters and summary statistics
};

// Runs the configured decoding strategy over the question. Strategies that
// need the raw model (entropy, cot-decode) refuse to run with the gate or
// the compressor enabled, and the gate/compressor need the toy backend.
GenerateOutcome run_generate(const RunContext& ctx, const std::string& question);

// GRPO training over JSONL items {"question","docs","answer"}. Appends one
// JSON metrics line per step to <out_dir>/metrics.jsonl and writes
// <out_dir>/checkpoint.bin (+ .json sidecar) atomically every
// checkpoint_every steps; an existing checkpoint is resumed. Returns a
// summary report. A non-finite objective propagates as NumericError with
// the last good checkpoint still in place.
nlohmann::json run_train(const RunContext& ctx, const std::string& train_path,
                         const std::string& out_dir);

// Decodes the prompt twice under the same seed, compressor off then on,
// and reports per-event retention, dot-product counters, and the first
// token index where the outputs diverge (null when they do not).
nlohmann::json run_compress_bench(const RunContext& ctx, const std::string& prompt);

// Exact-match / token-F1 / ROUGE-L per item and aggregated over JSONL
// lines {"question","answer",...}. Malformed lines are collected with
// their line numbers and the run continues on the valid ones.
nlohmann::json run_eval(const RunContext& ctx, const std::string& qa_path);

// One introspected generation: per-token sampling data plus a final-state
// summary (attention row entropies, hidden norms, top logits).
nlohmann::json run_trace(const RunContext& ctx, const std::string& question);

// dump(2) that never throws on stray bytes: generated text is arbitrary,
// so invalid UTF-8 is replaced (deterministically) rather than rejected.
std::string dump_json(const nlohmann::json& j);

} // namespace lab
