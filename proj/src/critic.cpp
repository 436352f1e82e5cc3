// Importance-scored KV-cache compression: scorers, retention math, and the
// per-step driver that rewrites the cache in place.
#include "lab/critic.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "lab/kernels.h"

namespace lab {

namespace {

constexpr double kMinMaxEps = 1e-10;

uint64_t g_scorer_ops = 0;

// (s - min) / (max - min + eps). All-equal inputs map to all zeros and are
// reported as degenerate so callers can log the collapse.
ImportanceResult min_max_normalize(std::vector<double> s) {
    ImportanceResult out;
    if (s.empty()) return out;
    auto [lo_it, hi_it] = std::minmax_element(s.begin(), s.end());
    double lo = *lo_it, hi = *hi_it;
    out.degenerate = (hi == lo);
    for (double& v : s) v = (v - lo) / (hi - lo + kMinMaxEps);
    out.scores = std::move(s);
    return out;
}

} // namespace

std::string CompressionConfig::validate() const {
    if (!(ratio > 0.0 && ratio < 1.0)) return "ratio must lie in (0, 1)";
    if (min_tokens < 1) return "min_tokens must be at least 1";
    if (!(adapt_alpha >= 0.0)) return "adapt_alpha must be non-negative";
    if (!(ratio_max > ratio && ratio_max < 1.0)) return "ratio_max must lie in (ratio, 1)";
    if (!(mem_total_bytes > 0.0)) return "mem_total_bytes must be positive";
    if (!weights.valid()) return "importance weights must be non-negative and sum to 1";
    return "";
}

// === scorers =============================================================

std::vector<CausalMatrix> kept_block(const KvCache& cache, size_t layer) {
    if (layer >= cache.attn.size())
        throw std::logic_error("kept_block needs an introspecting cache and a valid layer");
    const auto& pos = cache.layers[layer].kept_positions;
    const size_t n = pos.size();
    std::vector<CausalMatrix> block(cache.cfg.num_heads);
    for (size_t h = 0; h < cache.cfg.num_heads; ++h) {
        const CausalMatrix& full = cache.attn[layer][h];
        for (size_t a = 0; a < n; ++a) {
            std::vector<double> row(a + 1);
            for (size_t b = 0; b <= a; ++b) row[b] = full.at(pos[a], pos[b]);
            g_scorer_ops += a + 1;
            block[h].append_row(std::move(row));
        }
    }
    return block;
}

ImportanceResult attn_importance(const KvCache& cache, size_t layer) {
    auto block = kept_block(cache, layer);
    const size_t n = block.empty() ? 0 : block[0].rows();
    std::vector<double> strength(n, 0.0);
    for (const auto& head : block)
        for (size_t a = 0; a < n; ++a) {
            for (size_t b = 0; b <= a; ++b) strength[b] += std::abs(head.at(a, b));
            g_scorer_ops += a + 1;
        }
    return min_max_normalize(std::move(strength));
}

ImportanceResult entropy_importance(const KvCache& cache, size_t layer) {
    auto block = kept_block(cache, layer);
    const size_t n = block.empty() ? 0 : block[0].rows();
    std::vector<double> ent(n, 0.0);
    for (const auto& head : block)
        for (size_t a = 0; a < n; ++a) ent[a] += head.row_entropy(a);
    g_scorer_ops += block.size() * n;
    for (double& e : ent) e /= static_cast<double>(cache.cfg.num_heads);
    return min_max_normalize(std::move(ent));
}

BlockAttentionGrads attention_mse_grads(const std::vector<std::vector<double>>& Q,
                                        const std::vector<std::vector<double>>& K,
                                        const std::vector<std::vector<double>>& V,
                                        const std::vector<std::vector<double>>& prev,
                                        const std::vector<char>& row_mask, size_t num_heads) {
    const size_t n = Q.size();
    if (K.size() != n || V.size() != n || prev.size() != n || row_mask.size() != n)
        throw std::invalid_argument("attention_mse_grads: row count mismatch");
    BlockAttentionGrads g;
    if (n == 0) return g;
    const size_t d = Q[0].size();
    if (d % num_heads != 0) throw std::invalid_argument("model width not divisible by heads");
    const size_t dh = d / num_heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    g.output.assign(n, std::vector<double>(d, 0.0));
    g.d_keys.assign(n, std::vector<double>(d, 0.0));
    g.d_values.assign(n, std::vector<double>(d, 0.0));

    size_t masked_rows = 0;
    for (char m : row_mask) masked_rows += (m != 0);

    // Forward: per-head causal softmax attention over the block.
    std::vector<std::vector<std::vector<double>>> A(num_heads); // [h][a][b<=a]
    for (size_t h = 0; h < num_heads; ++h) {
        const size_t off = h * dh;
        A[h].resize(n);
        for (size_t a = 0; a < n; ++a) {
            std::vector<double>& row = A[h][a];
            row.resize(a + 1);
            for (size_t b = 0; b <= a; ++b)
                row[b] = kernels::dot(Q[a].data() + off, K[b].data() + off, dh) * inv_sqrt_dh;
            kernels::softmax_inplace(row);
            for (size_t b = 0; b <= a; ++b)
                for (size_t c = 0; c < dh; ++c) g.output[a][off + c] += row[b] * V[b][off + c];
            g_scorer_ops += 2 * (a + 1) * dh;
        }
    }

    // Loss over the masked rows: mean squared deviation from the previous
    // step's output. No masked rows (first event) means no signal at all.
    if (masked_rows == 0) return g;
    const double numel = static_cast<double>(masked_rows * d);
    std::vector<std::vector<double>> d_out(n, std::vector<double>(d, 0.0));
    for (size_t a = 0; a < n; ++a) {
        if (!row_mask[a]) continue;
        for (size_t c = 0; c < d; ++c) {
            const double diff = g.output[a][c] - prev[a][c];
            g.loss += diff * diff / numel;
            d_out[a][c] = 2.0 * diff / numel;
        }
    }

    // Backward through O = A*V and A = softmax(Q K^T / sqrt(dh)).
    for (size_t h = 0; h < num_heads; ++h) {
        const size_t off = h * dh;
        for (size_t a = 0; a < n; ++a) {
            const std::vector<double>& row = A[h][a];
            // dV_b += A_ab * dO_a
            for (size_t b = 0; b <= a; ++b)
                for (size_t c = 0; c < dh; ++c)
                    g.d_values[b][off + c] += row[b] * d_out[a][off + c];
            // dA_ab = dO_a . V_b, then the softmax Jacobian give dS.
            std::vector<double> d_a(a + 1);
            for (size_t b = 0; b <= a; ++b)
                d_a[b] = kernels::dot(d_out[a].data() + off, V[b].data() + off, dh);
            double inner = 0.0;
            for (size_t b = 0; b <= a; ++b) inner += row[b] * d_a[b];
            for (size_t b = 0; b <= a; ++b) {
                const double d_s = row[b] * (d_a[b] - inner);
                for (size_t c = 0; c < dh; ++c)
                    g.d_keys[b][off + c] += d_s * Q[a][off + c] * inv_sqrt_dh;
            }
            g_scorer_ops += 3 * (a + 1) * dh;
        }
    }
    return g;
}

ImportanceResult grad_importance(const KvCache& cache, size_t layer,
                                 const std::map<size_t, std::vector<double>>& prev_output,
                                 std::map<size_t, std::vector<double>>* block_output) {
    if (!cache.introspect)
        throw std::logic_error("grad_importance needs the retained queries of an introspecting cache");
    const LayerKv& kv = cache.layers[layer];
    const size_t n = kv.kept_positions.size();
    const size_t d = cache.cfg.model_dim;

    // Align the consistency target by original position; the newest token
    // (and anything else without a previous-step row) carries no loss.
    std::vector<std::vector<double>> prev(n, std::vector<double>(d, 0.0));
    std::vector<char> mask(n, 0);
    for (size_t a = 0; a < n; ++a) {
        auto it = prev_output.find(kv.kept_positions[a]);
        if (it != prev_output.end()) {
            prev[a] = it->second;
            mask[a] = 1;
        }
    }

    auto g = attention_mse_grads(kv.queries, kv.keys, kv.values, prev, mask,
                                 cache.cfg.num_heads);
    if (block_output) {
        block_output->clear();
        for (size_t a = 0; a < n; ++a) (*block_output)[kv.kept_positions[a]] = g.output[a];
    }
    std::vector<double> score(n, 0.0);
    for (size_t a = 0; a < n; ++a)
        for (size_t c = 0; c < d; ++c)
            score[a] += std::abs(g.d_keys[a][c]) + std::abs(g.d_values[a][c]);
    return min_max_normalize(std::move(score));
}

ImportanceResult hybrid_importance(const ImportanceWeights& w, const std::vector<double>& attn,
                                   const std::vector<double>& entropy,
                                   const std::vector<double>& grad) {
    if (!w.valid()) throw std::invalid_argument("importance weights must sum to 1");
    if (attn.size() != entropy.size() || attn.size() != grad.size())
        throw std::invalid_argument("hybrid_importance: score length mismatch");
    std::vector<double> s(attn.size());
    for (size_t i = 0; i < s.size(); ++i)
        s[i] = w.attn * attn[i] + w.entropy * entropy[i] + w.grad * grad[i];
    return min_max_normalize(std::move(s));
}

// === retention math ======================================================

size_t retain_count(size_t n, double ratio, size_t min_tokens) {
    if (n < 2) throw std::invalid_argument("retain_count needs at least two cached tokens");
    if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("ratio must lie in (0, 1)");
    auto floor_keep = static_cast<size_t>(std::floor((1.0 - ratio) * static_cast<double>(n)));
    return std::min(std::max(min_tokens, floor_keep), n - 1);
}

double adaptive_ratio(double r_base, double adapt_alpha, double mem_used, double mem_total,
                      double r_max) {
    if (!(mem_total > 0.0)) throw std::invalid_argument("mem_total must be positive");
    if (mem_used < 0.0) throw std::invalid_argument("mem_used must be non-negative");
    return std::min(r_base + adapt_alpha * (mem_used / mem_total), r_max);
}

bool should_compress(size_t total_processed, size_t min_tokens) {
    return total_processed > min_tokens;
}

std::vector<size_t> top_k_retention(const std::vector<double>& scores, size_t n_c) {
    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    // Equal scores keep the more recent token, so recency wins the tie.
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a > b;
    });
    order.resize(std::min(n_c, order.size()));
    std::sort(order.begin(), order.end());
    return order;
}

uint64_t scorer_ops() { return g_scorer_ops; }
void reset_scorer_ops() { g_scorer_ops = 0; }

double cache_bytes(const KvCache& cache) {
    size_t entries = 0;
    for (const auto& kv : cache.layers)
        for (const auto& rows : {&kv.keys, &kv.values})
            for (const auto& row : *rows) entries += row.size();
    return static_cast<double>(entries) * sizeof(double);
}

// === cache reconstruction ===============================================

void reconstruct_layer(LayerKv& kv, const std::vector<size_t>& keep) {
    auto gather = [&](std::vector<std::vector<double>>& rows) {
        if (rows.empty()) return; // queries absent on non-introspecting streams
        std::vector<std::vector<double>> out;
        out.reserve(keep.size());
        for (size_t idx : keep) out.push_back(std::move(rows[idx]));
        rows = std::move(out);
    };
    gather(kv.keys);
    gather(kv.values);
    gather(kv.queries);
    std::vector<size_t> pos;
    pos.reserve(keep.size());
    for (size_t idx : keep) pos.push_back(kv.kept_positions[idx]);
    kv.kept_positions = std::move(pos);
}

CompressionEvent compress_cache(KvCache& cache,
                                const std::vector<std::vector<double>>& per_layer_scores,
                                double ratio, size_t min_tokens) {
    if (per_layer_scores.size() != cache.layers.size())
        throw std::invalid_argument("compress_cache: one score vector per layer required");
    CompressionEvent ev;
    ev.step = cache.total_processed;
    for (size_t l = 0; l < cache.layers.size(); ++l) {
        LayerKv& kv = cache.layers[l];
        const size_t n = kv.kept_positions.size();
        if (per_layer_scores[l].size() != n)
            throw std::invalid_argument("compress_cache: score length does not match kept count");
        const size_t n_c = retain_count(n, ratio, min_tokens);
        reconstruct_layer(kv, top_k_retention(per_layer_scores[l], n_c));
        // Layer counts move in lockstep; the event records the shared sizes.
        ev.n_before = n;
        ev.n_after = n_c;
    }
    return ev;
}

// === per-step driver =====================================================

bool critic_step(KvCache& cache, CriticState& state) {
    if (!should_compress(cache.total_processed, state.cfg.min_tokens)) return false;
    if (!cache.introspect)
        throw std::logic_error("critic_step needs an introspecting cache");
    const std::string err = state.cfg.validate();
    if (!err.empty()) throw std::invalid_argument("compression config: " + err);

    const size_t L = cache.layers.size();
    state.prev_output.resize(L);
    const double ratio = adaptive_ratio(state.cfg.ratio, state.cfg.adapt_alpha,
                                        cache_bytes(cache), state.cfg.mem_total_bytes,
                                        state.cfg.ratio_max);

    std::vector<std::vector<double>> scores(L);
    std::vector<std::map<size_t, std::vector<double>>> next_prev(L);
    for (size_t l = 0; l < L; ++l) {
        auto ia = attn_importance(cache, l);
        auto ie = entropy_importance(cache, l);
        auto ig = grad_importance(cache, l, state.prev_output[l], &next_prev[l]);
        scores[l] = hybrid_importance(state.cfg.weights, ia.scores, ie.scores, ig.scores).scores;
    }

    CompressionEvent ev = compress_cache(cache, scores, ratio, state.cfg.min_tokens);
    state.prev_output = std::move(next_prev);
    state.stats.events.push_back(ev);
    state.stats.n_before = ev.n_before;
    state.stats.n_after = ev.n_after;
    state.stats.achieved_ratio =
        static_cast<double>(ev.n_after) / static_cast<double>(ev.n_before);
    state.stats.tokens_dropped += ev.n_before - ev.n_after;
    // The next step would have attended to every processed position; it now
    // sees only the survivors, in every layer and head.
    state.stats.dot_products_saved +=
        static_cast<uint64_t>(cache.total_processed - ev.n_after) * L * cache.cfg.num_heads;
    return true;
}

} // namespace lab
