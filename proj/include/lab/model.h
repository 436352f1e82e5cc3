#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "lab/causal.h"

namespace lab {

struct ModelConfig {
    size_t num_layers = 4;  // L
    size_t num_heads = 4;   // H
    size_t head_dim = 16;   // d_h
    size_t model_dim = 64;  // d == H * d_h
    size_t vocab_size = 256; // V
    size_t max_seq = 2048;   // S_max
    uint64_t seed = 0x1ab5eed;

    // Returns an empty string when valid, else a description of the problem.
    std::string validate() const;
};

struct LayerWeights {
    std::vector<double> wq, wk, wv, wo; // [d][d] row-major
    std::vector<double> w1;             // [2d][d]
    std::vector<double> w2;             // [d][2d]
};

// Frozen toy decoder-only transformer. All weights come from a counter-based
// PRNG scaled by 1/sqrt(d); nothing here ever trains (policy optimization
// touches only the output-head adapter, and reward heads live elsewhere).
struct Model {
    ModelConfig cfg;
    std::vector<double> embed; // [V][d]
    std::vector<double> pos;   // [S_max][d]
    std::vector<LayerWeights> layers;
    std::vector<double> wout;  // [V][d]

    uint64_t weight_checksum() const;
};

Model build_model(const ModelConfig& cfg);

// Low-rank adapter on the output head: logits = Wout*h + B*(A*h).
// The only trainable piece of the policy.
struct OutputAdapter {
    size_t rank = 4;
    std::vector<double> A; // [rank][d]
    std::vector<double> B; // [V][rank]

    static OutputAdapter zeros(size_t rank, size_t d, size_t V);
};

// Non-owning read view over a stream's introspection record; what the
// trigger/compression/uncertainty math consumes.
struct TraceView {
    size_t S = 0, L = 0, H = 0, d = 0, V = 0;
    const std::vector<std::vector<CausalMatrix>>* attn = nullptr;        // [L][H]
    const std::vector<std::vector<std::vector<double>>>* hidden = nullptr; // [L+1][S][d]
    const std::vector<double>* logits = nullptr;                          // last position

    const CausalMatrix& attention(size_t l, size_t h) const { return (*attn)[l][h]; }
    const std::vector<double>& hidden_at(size_t l, size_t p) const { return (*hidden)[l][p]; }
};

// Per-layer retained K/V rows plus original position ids. `queries` is kept
// only on introspecting streams (the gradient-based importance scorer needs
// them to replay the block attention).
struct LayerKv {
    std::vector<std::vector<double>> keys;    // [n_kept][d]
    std::vector<std::vector<double>> values;  // [n_kept][d]
    std::vector<std::vector<double>> queries; // [n_kept][d] when introspecting
    std::vector<size_t> kept_positions;       // strictly increasing original ids
};

struct KvCache {
    ModelConfig cfg;
    std::vector<LayerKv> layers;
    size_t total_processed = 0;
    bool introspect = false;

    // Introspection record in original-position coordinates; rows are the
    // attention actually computed when each position was processed (a row
    // computed over a compressed cache has zeros at evicted columns).
    std::vector<std::vector<CausalMatrix>> attn;          // [L][H]
    std::vector<std::vector<std::vector<double>>> hidden; // [L+1][S][d]
    std::vector<double> last_logits;

    // Instrumented cost counter: one unit per query-key dot product.
    uint64_t key_dot_products = 0;

    TraceView view() const;
};

KvCache make_cache(const Model& model, bool introspect);

// One forward step's full introspection record (owning).
struct StepTrace {
    size_t S = 0, L = 0, H = 0, d = 0, V = 0;
    std::vector<double> logits;                           // [V], last position
    std::vector<std::vector<CausalMatrix>> attention;     // [L][H]
    std::vector<std::vector<std::vector<double>>> hidden; // [L+1][S][d]
    struct KvRow {
        std::vector<double> key, value; // [d] each
    };
    std::vector<KvRow> new_kv; // [L], rows for the newest position

    TraceView view() const;
};

// Processes tokens[cache.total_processed ..) through the model, extending
// the cache in place. Throws on overlong input or model/cache mismatch.
void forward_extend(const Model& model, const std::vector<int>& tokens, KvCache& cache);

// Convenience wrapper: runs forward_extend (on a fresh introspecting cache
// when none is given) and materializes the accumulated record as an owning
// StepTrace. A supplied cache must be introspecting.
StepTrace forward_step(const Model& model, const std::vector<int>& tokens,
                       KvCache* cache = nullptr);

// rmsnorm(h) — the normalized final state that feeds the output head (also
// the aggregate the reward heads consume).
std::vector<double> normalize_final(const Model& model, const std::vector<double>& final_hidden);

// logits = Wout*hn + B*(A*hn) for an already-normalized state. Policy
// training calls this directly so each candidate's hidden state is
// normalized exactly once.
std::vector<double> logits_from_normed(const Model& model, const std::vector<double>& normed,
                                       const OutputAdapter* adapter = nullptr);

// Convenience: normalize_final then logits_from_normed.
std::vector<double> output_logits(const Model& model, const std::vector<double>& final_hidden,
                                  const OutputAdapter* adapter = nullptr);

} // namespace lab
