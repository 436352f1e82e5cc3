#pragma once
#include <array>
#include <map>
#include <string>

#include "json.hpp"
#include "lab/atlas.h"
#include "lab/critic.h"
#include "lab/decoders.h"
#include "lab/model.h"
#include "lab/porag.h"
#include "lab/sampler.h"

namespace lab {

// Run configuration: one JSON file keying every module's hyperparameters
// plus the global seed. Loading is strict -- unknown keys are rejected with
// their dotted path -- and print_config() emits the fully resolved values
// with a provenance tag per key, in a form that loads back to the same run.

// Which test-time strategy run_generate dispatches to.
inline const std::array<const char*, 12> kDecoderNames = {
    "sample",         // one plain backend call
    "self-consistency", "best-of-n", "cot-reflection", "re2",
    "entropy",        // adaptive sampling (raw model only)
    "cot-decode",     // branch-and-score (raw model only)
    "moa", "rto", "plansearch", "mcts", "r-star",
};

struct DecoderConfig {
    std::string name = "sample";
    SamplerParams sampler;           // base tuple; its temperature is stage 1 where staged
    size_t max_tokens = 48;
    double repetition_penalty = 1.0;
    size_t no_repeat_ngram = 0;
    size_t k = 4;                    // samples / candidates / branches / expansion width
    double tau = 0.5;                // agreement threshold (consensus and draft gate)
    double rate_temperature = 0.1;   // judge temperature (best-of-n)
    double t2 = 0.5;                 // mid-stage temperature (agent mixture critique)
    double t3 = 0.2;                 // final-stage temperature (agent mixture synthesis)
    double alpha = 0.5;              // positional damping (branch scoring)
    bool consolidate = true;         // merge near-duplicate branches
    std::array<double, 7> betas = kDefaultBetas; // uncertainty couplings (entropy decoder)
    size_t rollouts = 16;            // tree searches
    size_t depth = 5;
    size_t h_max = 4096;             // rollout character budget (MCTS)
    double c_uct = 1.4;
    double consistency_theta = 0.7;  // verification overlap (reasoning search)
    size_t n1 = 3;                   // first-order observations (plan search)
    size_t n2 = 1;                   // derived observations (plan search)
    size_t solves = 1;               // independent plan-search solves

    std::string validate() const; // empty when all invariants hold
};

struct RetrievalConfig {
    std::string corpus;         // JSONL path; required when the gate is enabled
    size_t top_n = 3;           // documents returned per query
    size_t context_budget = 48; // words spent on inserted context

    std::string validate() const;
};

struct BackendSettings {
    std::string kind = "toy"; // "toy" | "remote" | "replay"
    std::string cassette;     // replay source, or record destination when `record`
    bool record = false;

    std::string validate() const;
};

struct PoragRunConfig {
    GrpoConfig grpo;
    size_t train_steps = 50;
    size_t checkpoint_every = 10;
    size_t candidate_len = 8; // tokens sampled per candidate

    std::string validate() const;
};

struct AtlasRunConfig {
    bool enabled = false;
    AtlasConfig gate;
    std::string stopwords; // plain-text file, one word per line

    std::string validate() const;
};

struct CriticRunConfig {
    bool enabled = false;
    CompressionConfig compression;

    std::string validate() const;
};

struct RunConfig {
    uint64_t seed = 0;
    // model.vocab_size == 0 means "match the run vocabulary" (the default).
    ModelConfig model = [] { ModelConfig m; m.vocab_size = 0; return m; }();
    AtlasRunConfig atlas;
    CriticRunConfig critic;
    PoragRunConfig porag;
    DecoderConfig decoder;
    RetrievalConfig retrieval;
    BackendSettings backend;

    std::string validate() const;
};

// Strict parse: unknown keys throw ConfigError naming the dotted path (a
// top-level "provenance" object is tolerated so print_config round-trips);
// missing keys keep their defaults; every section's invariants are checked.
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::string& path);

// Full resolved dump; parse_config(config_to_json(c)) reproduces c exactly.
nlohmann::json config_to_json(const RunConfig& cfg);

// Dotted key -> "paper" (value stated in the source work) or "artifact"
// (scale, calibration, or convention chosen here).
const std::map<std::string, std::string>& config_provenance();

// config_to_json plus the provenance map, pretty-printed.
std::string print_config(const RunConfig& cfg);

} // namespace lab
