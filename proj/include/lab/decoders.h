#pragma once
#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lab/backend.h"
#include "lab/causal.h"
#include "lab/model.h"
#include "lab/sampler.h"

namespace lab {

// Test-time scaling strategies. Each is a pure function of the backend
// transcript and its seeds, and returns an answer plus an audit trace that
// is sufficient to replay the decision.

// === audit trace =========================================================

struct StrategyTrace {
    std::string strategy;
    std::vector<uint64_t> seeds;
    nlohmann::json calls = nlohmann::json::array(); // {prompt, params, response}
    nlohmann::json decision;                        // strategy-specific summary

    nlohmann::json to_json() const;
};

// Issues one backend call and appends its {prompt, params, response} record.
std::string traced_call(LmBackend& be, StrategyTrace& trace,
                        const std::vector<ChatMessage>& messages, const SamplerParams& sampler,
                        uint64_t seed, size_t max_tokens, double repetition_penalty = 1.0,
                        size_t no_repeat_ngram = 0);

// === shared text measures ================================================

// Jaccard similarity of lowercased word sets; both-empty is defined as 1.
double word_overlap(const std::string& a, const std::string& b);

// The response-similarity metric used everywhere one is needed (same
// measure as word_overlap; separate name for the sampling-consensus role).
double response_similarity(const std::string& a, const std::string& b);

// First integer token with value in [0,10]; nullopt when none appears.
std::optional<int> parse_rating(const std::string& reply);

// First real-number token with value in [0,1]; nullopt when none appears.
std::optional<double> parse_unit_score(const std::string& reply);

// === self-consistency ====================================================

struct Cluster {
    std::vector<size_t> members; // candidate indices, ascending
    double coherence = 1.0;      // mean pairwise similarity (1 for singletons)
};

// Greedy single pass: each text joins the first cluster whose every member
// is at least tau-similar, else opens a new cluster.
std::vector<Cluster> cluster_responses(const std::vector<std::string>& texts, double tau);

struct SelfConsistencyResult {
    std::string answer;
    size_t winner_cluster = 0;
    std::vector<std::string> samples;
    std::vector<Cluster> clusters;
    StrategyTrace trace;
};

// k samples at temperature T, clustered at threshold tau; the largest
// cluster wins (ties: higher coherence, then earliest member).
SelfConsistencyResult self_consistency(LmBackend& be, const std::string& prompt, size_t k,
                                       double T, double tau, uint64_t seed = 0,
                                       size_t max_tokens = 64);

// === best-of-n ===========================================================

extern const char* const kRatingSystemPrompt;

struct BestOfNResult {
    std::string answer;
    size_t winner = 0;
    std::vector<std::string> candidates;
    std::vector<int> ratings;
    std::vector<bool> parse_failed;
    bool all_unratable = false;
    bool temperature_warning = false; // T_rate > T_gen
    StrategyTrace trace;
};

BestOfNResult best_of_n(LmBackend& be, const std::string& prompt, size_t k, double t_gen,
                        double t_rate, uint64_t seed = 0, size_t max_tokens = 64);

// === chain-of-thought reflection =========================================

struct CotReflectionResult {
    std::string answer;        // last <output> section, or the full text
    std::string full_response;
    bool marker_missing = false;
    StrategyTrace trace;
};

CotReflectionResult cot_reflection(LmBackend& be, const std::string& query, uint64_t seed = 0,
                                   double T = 0.7, size_t max_tokens = 128);

// === re-reading ==========================================================

// Three fixed reasoning phases around the query; the query appears exactly
// twice (initial reading and re-reading).
std::string re2_prompt(const std::string& query);

struct Re2Result {
    std::string answer;
    std::string prompt;
    StrategyTrace trace;
};

Re2Result re2(LmBackend& be, const std::string& query, const std::string& system_prompt = "",
              const SamplerParams& sampler = {}, uint64_t seed = 0, size_t max_tokens = 128);

// === entropy-guided sampling =============================================

struct UncertaintyMetrics {
    double h_bits = 0.0;      // token entropy, bits
    double varentropy = 0.0;  // spread of log2-probs around -H
    double h_attn = 0.0;      // summed attention entropy, final layer
    double v_attn = 0.0;      // head variance of attention entropy
    double agreement = 0.0;   // mean L1 distance of each head to the mean head
    double interaction = 0.0; // mean |ln A| over support entries
};

// (H bits, varentropy) of softmax(logits).
std::pair<double, double> uncertainty_metrics(const std::vector<double>& logits);

// Attention-derived components from the final layer's per-head matrices.
UncertaintyMetrics attention_metrics(const std::vector<CausalMatrix>& heads);

// All four update rules applied to the base tuple; betas are the seven
// coefficients, multiplier clips fixed at tau [0.5,2], top-p [0.5,1],
// k [1,2k0], min-p [0.25,2].
SamplerParams adapt_sampler_params(const UncertaintyMetrics& m, const SamplerParams& base,
                                   const std::array<double, 7>& betas);

inline constexpr std::array<double, 7> kDefaultBetas = {0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3};

struct EntropyGuidedStep {
    UncertaintyMetrics metrics;
    SamplerParams params;
    int token = 0;
};

struct EntropyGuidedResult {
    std::string text;
    std::vector<int> tokens;
    std::vector<EntropyGuidedStep> steps;
    StrategyTrace trace;
};

// Adaptive decode over the introspectable backend; any other backend is a
// capability error. With all betas zero this reproduces the backend's own
// fixed-parameter decode byte for byte.
EntropyGuidedResult entropy_guided_generate(LmBackend& be, const std::string& prompt,
                                            const SamplerParams& base,
                                            const std::array<double, 7>& betas = kDefaultBetas,
                                            size_t max_tokens = 32, uint64_t seed = 0);

// === chain-of-thought decoding ===========================================

// (p1 - p2) * (1 - alpha*j/L): top-two margin damped by position.
double token_reliability(double p1, double p2, size_t j, size_t l_max, double alpha);

struct CotPath {
    std::vector<int> tokens;
    std::vector<double> p1, p2, reliability;
    double score = 0.0; // weighted mean reliability
    std::string text;
    bool pruned = false; // consolidated away into a more reliable twin
};

struct CotDecodeResult {
    std::string answer;
    size_t winner = 0;
    std::vector<CotPath> paths;
    StrategyTrace trace;
};

// Branches on the top-k first tokens, completes each greedily, scores
// every path, optionally consolidates near-duplicates (similarity >= 0.9).
CotDecodeResult cot_decode(const Model& model, const Vocab& vocab, const std::string& prompt,
                           size_t k, double alpha, bool consolidate, size_t max_tokens = 16);

// === mixture-of-agents ====================================================

struct MoaResult {
    std::string answer; // synthesis after scaffold stripping
    std::vector<std::string> candidates;
    std::string critique;
    std::string synthesis_raw;
    StrategyTrace trace;
};

// n candidates at T1, one critique at T2, one synthesis at T3; the strict
// cascade T1 > T2 > T3 is validated before any call. n+2 calls total.
MoaResult moa_pipeline(LmBackend& be, const std::string& query, size_t n, double t1, double t2,
                       double t3, double repetition_penalty = 1.0, size_t no_repeat_ngram = 0,
                       uint64_t seed = 0, size_t max_tokens = 64);

// Scaffold stripper used on the synthesis output.
std::string strip_scaffolding(const std::string& text);

// === regenerate-then-optimize ============================================

struct RtoResult {
    std::string answer;
    std::string first_pass, analysis, second_pass;
    double delta = 0.0; // word overlap between the two passes
    bool consistent = false;
    size_t calls = 0; // 3 when consistent, else 4
    std::optional<double> quality_delta;
    StrategyTrace trace;
};

// Draft, analyze, regenerate; synthesize only when the two passes disagree
// (overlap below tau). An optional evaluator reports the quality delta.
RtoResult rto_pipeline(LmBackend& be, const std::string& query, double tau, uint64_t seed = 0,
                       const SamplerParams& sampler = {}, size_t max_tokens = 64,
                       const std::function<double(const std::string&)>& evaluator = {});

// === observation-driven planning =========================================

struct PlanSearchResult {
    std::vector<std::string> answers; // one per independent solve
    size_t calls = 0;
    StrategyTrace trace;
};

// Staged prompts per solve: observations, optional derived observations,
// strategy, answer; N independent solves with distinct seeds.
PlanSearchResult plansearch_pipeline(LmBackend& be, const std::string& query, size_t n1,
                                     size_t n2, size_t N, double T, uint64_t seed = 0,
                                     size_t max_tokens = 64);

// === Monte-Carlo tree search =============================================

// V/N + c*sqrt(ln(N_parent)/N); unvisited edges sort first.
double uct_score(double v, uint64_t n, uint64_t n_parent, double c);

extern const char* const kUnitEvalPrompt; // the 0-1 rating system prompt

struct MctsResult {
    std::string answer;
    size_t completed_rollouts = 0;
    size_t aborted_rollouts = 0;
    uint64_t root_visits = 0;
    bool parse_fallback_used = false; // any eval defaulted to 0.5
    nlohmann::json tree;              // nested {action, n, v, children}
    StrategyTrace trace;
};

MctsResult mcts_search(LmBackend& be, const std::string& query, size_t rollouts,
                       size_t k_expand = 2, size_t depth = 5, size_t h_max = 4096,
                       double c = 1.4, uint64_t seed = 0, double T = 1.0,
                       size_t max_tokens = 48);

// === self-play reasoning search ==========================================

extern const std::array<const char*, 5> kReasoningActions;

struct RStarTrajectory {
    std::vector<std::string> steps;
    std::string answer;
    double conf = 0.5;
    bool consistent = false;
    double score = 0.0; // conf when consistent, else 0
};

struct RStarResult {
    std::string answer;
    bool fallback_inconsistent = false; // no trajectory passed the check
    std::vector<RStarTrajectory> trajectories;
    StrategyTrace trace;
};

// UCT search over the five reasoning actions; each completed trajectory is
// verified by split-and-recomplete word overlap (> theta) and the answer is
// the frequency-times-confidence argmax over consistent trajectories.
RStarResult r_star_search(LmBackend& be, const std::string& query, size_t rollouts,
                          size_t depth = 5, double c = 1.4, double theta = 0.7,
                          uint64_t seed = 0, double T = 1.0, size_t max_tokens = 48);

} // namespace lab
