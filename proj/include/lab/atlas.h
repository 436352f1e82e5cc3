#pragma once
#include <functional>
#include <string>
#include <vector>

#include "lab/model.h"
#include "lab/vocab.h"

namespace lab {

// Retrieval gating and query construction from a decode trace. Everything
// here is a pure function of the trace plus scalar inputs; the generation
// pipeline owns the loop, the backend call, and the event log.
struct AtlasConfig {
    double alpha0 = 0.8;    // baseline sensitivity, in [0.7, 1.0]
    double lambda = 4.0;    // load decay coefficient, in [3, 5]
    double tau_p = 0.5;     // generation-probability threshold, in (0, 1)
    size_t k_tokens = 6;    // query tokens to select, in [5, 7]
    double beta = 0.7;      // attention vs representation balance, in [0, 1]
    double tau_embed = 2.0; // depth-weighting temperature, > 0
    double theta = 0.05;    // trigger threshold, >= 0
    double c_max = 4.0;     // retrieval budget consumed by the scaling factor, > 0

    // Empty string when all bounds hold, else a description.
    std::string validate() const;
};

struct MlagBreakdown {
    double gradient = 0.0; // G_i: layer-weighted attention shift
    double density = 0.0;  // D_i: uncertainty-weighted attention density
    int filter = 0;        // s_i: semantic filter
    double scaling = 0.0;  // alpha: load-dependent sensitivity
    double score = 0.0;    // alpha * G_i * D_i * s_i
};

// === gate components ====================================================

// Attention position i pays to its predecessors at `layer`, normalized by
// the largest such restricted row mass over positions m <= i. 0 when i == 0.
double normalized_avg_attention(const TraceView& t, size_t layer, size_t i);

// G_i = sum_{j=1..L-1} (j/(L-1)) * |Abar_{j+1,i} - Abar_{j,i}|.
// Throws when the model has a single layer (consecutive pairs undefined).
double gradient_factor(const TraceView& t, size_t i);

// Head weights phi from final-layer attention entropy over the current
// causal block; per-head totals are floored at zero (the epsilon inside the
// log makes one-hot rows land a hair below it), and an all-zero profile
// degrades to uniform weights. Sums to 1 within 1e-9.
std::vector<double> head_entropy_importance(const TraceView& t);

// D_i = (1 - p_i) * sum_h phi_h * mean attention from position i to its i
// predecessors (final layer). 0 when i == 0.
double info_density(const TraceView& t, size_t i, double p_i);

// alpha = alpha0 * exp(-lambda * clamp(c_current / c_max, 0, 1)).
// Throws when c_max <= 0.
double scaling_factor(double alpha0, double lambda, double c_current, double c_max);

// 0 iff the token is a stopword, numeric, punctuation, or has no
// alphanumeric character at all (whitespace, control bytes).
int semantic_filter(const Vocab& vocab, int token_id);

// The cheap first-stage check: p_i < tau_p and s_i == 1. Only when this
// passes does the pipeline evaluate the full gate.
bool relevance_precheck(double p_i, double tau_p, int s_i);

MlagBreakdown mlag_score(const TraceView& t, size_t i, double p_i, int s_i,
                         const AtlasConfig& cfg, double c_current);

// === query formulation ==================================================

// Piecewise-linear layer weights psi for the attention score; entry idx is
// 1-based layer idx+1, and the final layer always gets weight 0.
std::vector<double> lrp_layer_weights(size_t L);

// Softmax over l / tau for l = 1..L; concentrates on deeper layers.
std::vector<double> embed_layer_weights(size_t L, double tau);

// Depth-weighted contextual embedding e_j over the post-layer hidden states.
std::vector<double> context_embedding(const TraceView& t, size_t j, double tau_embed);

// sum_l psi_l * (1/H) sum_h A[l][h][i][j] for a candidate j < i.
double atten_score(const TraceView& t, size_t i, size_t j);

struct RelevanceScore {
    double atten = 0.0;
    double rep = 0.0; // cosine, in [-1, 1]
    double combined = 0.0;
};

RelevanceScore relevance_score(double atten, double rep, double beta);

// Combined relevance of every predecessor j < i.
std::vector<RelevanceScore> relevance_scores(const TraceView& t, size_t i,
                                             const AtlasConfig& cfg);

// Top-k positions by combined score among candidates with eligible[j] set,
// returned in ascending position order; ties prefer the later position.
// Empty result means "skip retrieval".
std::vector<size_t> select_query_tokens(const std::vector<RelevanceScore>& scores,
                                        const std::vector<char>& eligible, size_t k_tokens);

std::string joined_tokens(const std::vector<std::string>& tokens);
std::string query_prompt(const std::vector<std::string>& tokens);

struct QueryResult {
    std::string query;
    bool fallback = false; // backend failed; query is the raw joined tokens
};

// Renders the query prompt and runs it through `ask` (one backend call).
// Backend exceptions degrade to the raw joined tokens with the flag set.
// Throws on an empty selection.
QueryResult formulate_query(const std::vector<std::string>& tokens,
                            const std::function<std::string(const std::string&)>& ask);

} // namespace lab
