#pragma once
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lab/model.h"

namespace lab {

// Importance-scored KV-cache compression: three scorers over the currently
// kept tokens of a layer, a hybrid combination, retention math, and in-place
// cache reconstruction. One CriticState per generation stream.

struct ImportanceWeights {
    double attn = 0.4;
    double entropy = 0.3;
    double grad = 0.3;
    bool valid() const {
        return attn >= 0.0 && entropy >= 0.0 && grad >= 0.0 &&
               std::abs(attn + entropy + grad - 1.0) <= 1e-9;
    }
};

struct CompressionConfig {
    double ratio = 0.3;            // base compression ratio r, in (0, 1)
    size_t min_tokens = 16;        // m: retention floor and activation delay
    double adapt_alpha = 0.2;      // memory-pressure sensitivity, >= 0
    double ratio_max = 0.5;        // cap on the adaptive ratio, in (r, 1)
    double mem_total_bytes = 1e6;  // M_total for the pressure term
    ImportanceWeights weights;

    std::string validate() const; // empty when all invariants hold
};

struct CompressionEvent {
    size_t step = 0; // total_processed at the time of the event
    size_t n_before = 0;
    size_t n_after = 0;
};

struct CompressionStats {
    std::vector<CompressionEvent> events;
    // Latest event's sizes; achieved_ratio is the retention fraction
    // n_after/n_before (1.0 until compression first fires).
    size_t n_before = 0;
    size_t n_after = 0;
    double achieved_ratio = 1.0;
    // Query-key dot products the next step avoids versus an uncompressed
    // cache, accumulated over events (all layers, all heads).
    uint64_t dot_products_saved = 0;
    uint64_t tokens_dropped = 0;
};

struct ImportanceResult {
    std::vector<double> scores;
    bool degenerate = false; // all raw values equal; scores are all zero
};

// === scorers (per layer, over the kept block) ===========================

// Recorded attention gathered down to the kept tokens of `layer`: one
// causal matrix per head where entry (a, b) is the original-coordinate
// weight between kept rows a and b.
std::vector<CausalMatrix> kept_block(const KvCache& cache, size_t layer);

// Column mass: total attention each kept token receives, min-max normalized.
ImportanceResult attn_importance(const KvCache& cache, size_t layer);

// Head-averaged Shannon entropy of each kept token's outgoing attention
// row, min-max normalized.
ImportanceResult entropy_importance(const KvCache& cache, size_t layer);

// Closed-form gradients of one masked block-attention layer against an MSE
// consistency target. Exposed separately so the finite-difference oracle
// can drive it directly.
struct BlockAttentionGrads {
    std::vector<std::vector<double>> output; // [n][H*d_h]
    double loss = 0.0;                       // MSE over rows with row_mask set
    std::vector<std::vector<double>> d_keys;   // [n][H*d_h]
    std::vector<std::vector<double>> d_values; // [n][H*d_h]
};

// Causal softmax(Q K^T / sqrt(d_h)) V per head over a kept block, plus
// dL/dK and dL/dV where L = MSE(output, prev) restricted to masked rows.
// Rows without a previous-step counterpart carry zero loss weight but still
// receive gradients through the rows that attend to them.
BlockAttentionGrads attention_mse_grads(const std::vector<std::vector<double>>& Q,
                                        const std::vector<std::vector<double>>& K,
                                        const std::vector<std::vector<double>>& V,
                                        const std::vector<std::vector<double>>& prev,
                                        const std::vector<char>& row_mask, size_t num_heads);

// Replays block attention over the kept tokens, compares with the previous
// step's output aligned by original position, and scores each token by the
// L1 mass of its key/value gradients (min-max normalized). `block_output`
// returns the pre-compression attention output keyed by original position
// (the next step's alignment target). Requires an introspecting cache.
ImportanceResult grad_importance(const KvCache& cache, size_t layer,
                                 const std::map<size_t, std::vector<double>>& prev_output,
                                 std::map<size_t, std::vector<double>>* block_output = nullptr);

// Weighted combination of the three scores, min-max renormalized to [0,1].
ImportanceResult hybrid_importance(const ImportanceWeights& w, const std::vector<double>& attn,
                                   const std::vector<double>& entropy,
                                   const std::vector<double>& grad);

// === retention math ======================================================

// n_c = min(max(m, floor((1-r)*n)), n-1). Throws when n < 2.
size_t retain_count(size_t n, double ratio, size_t min_tokens);

// min(r_base + alpha * used/total, r_max). Throws when total <= 0.
double adaptive_ratio(double r_base, double adapt_alpha, double mem_used, double mem_total,
                      double r_max);

// Compression activates strictly after m processed tokens.
bool should_compress(size_t total_processed, size_t min_tokens);

// Indices of the n_c highest scores (ties prefer the later index),
// returned in ascending order.
std::vector<size_t> top_k_retention(const std::vector<double>& scores, size_t n_c);

// Resident bytes of the cache's key/value entries (8 bytes per double).
double cache_bytes(const KvCache& cache);

// Deterministic instrumented cost counter for the importance scorers (one
// unit per gathered entry or scalar accumulate). The complexity harness
// fits its growth against the kept-token count; wall clock is too noisy at
// small n.
uint64_t scorer_ops();
void reset_scorer_ops();

// === cache reconstruction ===============================================

// Drops every kept token of `kv` not listed in `keep` (indices into the
// current kept order, ascending). Original position ids are preserved.
void reconstruct_layer(LayerKv& kv, const std::vector<size_t>& keep);

// Applies top-k retention with the given effective ratio to every layer,
// using the supplied per-layer hybrid scores. Returns one event (layer
// counts move in lockstep). Throws on score/cache length mismatch.
CompressionEvent compress_cache(KvCache& cache,
                                const std::vector<std::vector<double>>& per_layer_scores,
                                double ratio, size_t min_tokens);

// === per-step driver =====================================================

struct CriticState {
    CompressionConfig cfg;
    // Previous step's block attention output per layer, keyed by original
    // position; the gradient scorer's consistency target.
    std::vector<std::map<size_t, std::vector<double>>> prev_output;
    CompressionStats stats;
};

// Full per-token pass: once active, scores every layer (attention, entropy,
// gradient -> hybrid), compresses, and rolls the previous-output record.
// Returns true when a compression event happened.
bool critic_step(KvCache& cache, CriticState& state);

} // namespace lab
