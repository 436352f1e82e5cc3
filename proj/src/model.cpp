#include "lab/model.h"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "lab/errors.h"
#include "lab/kernels.h"
#include "lab/rng.h"

namespace lab {

std::string ModelConfig::validate() const {
    if (num_layers == 0 || num_heads == 0 || head_dim == 0 || vocab_size == 0)
        return "all model dimensions must be at least 1";
    if (model_dim != num_heads * head_dim)
        return "model_dim must equal num_heads * head_dim";
    if (max_seq < 2) return "max_seq must be at least 2";
    return "";
}

namespace {

// Substream ids for weight tensors; each tensor gets an independent counter
// space so the fill order (and thread count) cannot matter.
enum : uint64_t { kStreamEmbed = 1, kStreamPos = 2, kStreamWout = 3, kStreamLayerBase = 16 };

void fill_tensor(std::vector<double>& t, size_t n, Rng rng, double scale) {
    t.resize(n);
    kernels::parallel_for(n, [&](size_t i) { t[i] = rng.sym(i) * scale; });
}

uint64_t fnv1a_accumulate(uint64_t h, const std::vector<double>& v) {
    for (double x : v) {
        uint64_t bits;
        std::memcpy(&bits, &x, sizeof bits);
        for (int b = 0; b < 8; ++b) {
            h ^= (bits >> (8 * b)) & 0xffu;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

} // namespace

Model build_model(const ModelConfig& cfg) {
    const std::string err = cfg.validate();
    if (!err.empty()) throw ConfigError("model config: " + err);

    const size_t d = cfg.model_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    const Rng root{cfg.seed, 0};

    Model m;
    m.cfg = cfg;
    fill_tensor(m.embed, cfg.vocab_size * d, root.fork(kStreamEmbed), scale);
    fill_tensor(m.pos, cfg.max_seq * d, root.fork(kStreamPos), scale);
    fill_tensor(m.wout, cfg.vocab_size * d, root.fork(kStreamWout), scale);
    m.layers.resize(cfg.num_layers);
    for (size_t l = 0; l < cfg.num_layers; ++l) {
        const uint64_t base = kStreamLayerBase + 8 * l;
        LayerWeights& w = m.layers[l];
        fill_tensor(w.wq, d * d, root.fork(base + 0), scale);
        fill_tensor(w.wk, d * d, root.fork(base + 1), scale);
        fill_tensor(w.wv, d * d, root.fork(base + 2), scale);
        fill_tensor(w.wo, d * d, root.fork(base + 3), scale);
        fill_tensor(w.w1, 2 * d * d, root.fork(base + 4), scale);
        fill_tensor(w.w2, d * 2 * d, root.fork(base + 5), scale);
    }
    return m;
}

uint64_t Model::weight_checksum() const {
    uint64_t h = 0xcbf29ce484222325ULL; // FNV-1a offset basis
    h = fnv1a_accumulate(h, embed);
    h = fnv1a_accumulate(h, pos);
    for (const LayerWeights& w : layers) {
        h = fnv1a_accumulate(h, w.wq);
        h = fnv1a_accumulate(h, w.wk);
        h = fnv1a_accumulate(h, w.wv);
        h = fnv1a_accumulate(h, w.wo);
        h = fnv1a_accumulate(h, w.w1);
        h = fnv1a_accumulate(h, w.w2);
    }
    h = fnv1a_accumulate(h, wout);
    return h;
}

OutputAdapter OutputAdapter::zeros(size_t rank, size_t d, size_t V) {
    OutputAdapter a;
    a.rank = rank;
    a.A.assign(rank * d, 0.0);
    a.B.assign(V * rank, 0.0);
    return a;
}

KvCache make_cache(const Model& model, bool introspect) {
    KvCache c;
    c.cfg = model.cfg;
    c.layers.resize(model.cfg.num_layers);
    c.introspect = introspect;
    if (introspect) {
        c.attn.assign(model.cfg.num_layers,
                      std::vector<CausalMatrix>(model.cfg.num_heads));
        c.hidden.resize(model.cfg.num_layers + 1);
    }
    return c;
}

TraceView KvCache::view() const {
    TraceView v;
    v.S = total_processed;
    v.L = cfg.num_layers;
    v.H = cfg.num_heads;
    v.d = cfg.model_dim;
    v.V = cfg.vocab_size;
    v.attn = &attn;
    v.hidden = &hidden;
    v.logits = &last_logits;
    return v;
}

TraceView StepTrace::view() const {
    TraceView v;
    v.S = S;
    v.L = L;
    v.H = H;
    v.d = d;
    v.V = V;
    v.attn = &attention;
    v.hidden = &hidden;
    v.logits = &logits;
    return v;
}

void forward_extend(const Model& model, const std::vector<int>& tokens, KvCache& cache) {
    const ModelConfig& cfg = model.cfg;
    const size_t L = cfg.num_layers, H = cfg.num_heads, dh = cfg.head_dim, d = cfg.model_dim;
    if (cache.layers.size() != L)
        throw std::logic_error("forward_extend: cache layer count does not match model");
    if (tokens.size() > cfg.max_seq)
        throw ConfigError("sequence length " + std::to_string(tokens.size()) +
                          " exceeds max_seq " + std::to_string(cfg.max_seq));
    if (tokens.size() < cache.total_processed)
        throw std::logic_error("forward_extend: token list shorter than processed prefix");
    if (tokens.size() == cache.total_processed) return;

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> x(d), normed(d), q(d), k(d), v(d), ctx(d), proj(d), h1(2 * d);

    for (size_t p = cache.total_processed; p < tokens.size(); ++p) {
        const int tok = tokens[p];
        if (tok < 0 || static_cast<size_t>(tok) >= cfg.vocab_size)
            throw ConfigError("token id " + std::to_string(tok) + " outside vocabulary");

        for (size_t i = 0; i < d; ++i) x[i] = model.embed[tok * d + i] + model.pos[p * d + i];
        if (cache.introspect) cache.hidden[0].push_back(x);

        for (size_t l = 0; l < L; ++l) {
            const LayerWeights& w = model.layers[l];
            LayerKv& kv = cache.layers[l];

            kernels::rmsnorm(x.data(), d, normed.data());
            kernels::matvec(w.wq.data(), d, d, normed.data(), q.data());
            kernels::matvec(w.wk.data(), d, d, normed.data(), k.data());
            kernels::matvec(w.wv.data(), d, d, normed.data(), v.data());
            kv.keys.push_back(k);
            kv.values.push_back(v);
            if (cache.introspect) kv.queries.push_back(q);
            kv.kept_positions.push_back(p);

            const size_t kept = kv.keys.size();
            std::fill(ctx.begin(), ctx.end(), 0.0);
            std::vector<double> scores(kept);
            for (size_t h = 0; h < H; ++h) {
                const size_t off = h * dh;
                for (size_t j = 0; j < kept; ++j)
                    scores[j] =
                        kernels::dot(q.data() + off, kv.keys[j].data() + off, dh) * inv_sqrt_dh;
                cache.key_dot_products += kept;
                kernels::softmax_inplace(scores);
                for (size_t j = 0; j < kept; ++j) {
                    const double a = scores[j];
                    const double* vj = kv.values[j].data() + off;
                    for (size_t t = 0; t < dh; ++t) ctx[off + t] += a * vj[t];
                }
                if (cache.introspect) {
                    // Record in original-position coordinates: a row computed
                    // over a compressed cache keeps zeros at evicted columns.
                    std::vector<double> row(p + 1, 0.0);
                    for (size_t j = 0; j < kept; ++j) row[kv.kept_positions[j]] = scores[j];
                    cache.attn[l][h].append_row(std::move(row));
                }
            }
            kernels::matvec(w.wo.data(), d, d, ctx.data(), proj.data());
            for (size_t i = 0; i < d; ++i) x[i] += proj[i];

            kernels::rmsnorm(x.data(), d, normed.data());
            kernels::matvec(w.w1.data(), 2 * d, d, normed.data(), h1.data());
            kernels::tanh_inplace(h1.data(), 2 * d);
            kernels::matvec(w.w2.data(), d, 2 * d, h1.data(), proj.data());
            for (size_t i = 0; i < d; ++i) x[i] += proj[i];
            if (cache.introspect) cache.hidden[l + 1].push_back(x);
        }
        cache.total_processed = p + 1;
    }
    cache.last_logits = output_logits(model, x);
}

StepTrace forward_step(const Model& model, const std::vector<int>& tokens, KvCache* cache) {
    KvCache local = make_cache(model, true);
    KvCache* c = cache ? cache : &local;
    if (!c->introspect) throw std::logic_error("forward_step requires an introspecting cache");
    forward_extend(model, tokens, *c);

    StepTrace t;
    t.S = c->total_processed;
    t.L = model.cfg.num_layers;
    t.H = model.cfg.num_heads;
    t.d = model.cfg.model_dim;
    t.V = model.cfg.vocab_size;
    t.logits = c->last_logits;
    t.attention = c->attn;
    t.hidden = c->hidden;
    t.new_kv.resize(t.L);
    for (size_t l = 0; l < t.L; ++l) {
        t.new_kv[l].key = c->layers[l].keys.back();
        t.new_kv[l].value = c->layers[l].values.back();
    }
    return t;
}

std::vector<double> normalize_final(const Model& model, const std::vector<double>& final_hidden) {
    std::vector<double> out(model.cfg.model_dim);
    kernels::rmsnorm(final_hidden.data(), final_hidden.size(), out.data());
    return out;
}

std::vector<double> logits_from_normed(const Model& model, const std::vector<double>& normed,
                                       const OutputAdapter* adapter) {
    const size_t V = model.cfg.vocab_size, d = model.cfg.model_dim;
    std::vector<double> logits(V);
    kernels::matvec(model.wout.data(), V, d, normed.data(), logits.data());
    if (adapter) {
        std::vector<double> low(adapter->rank);
        kernels::matvec(adapter->A.data(), adapter->rank, d, normed.data(), low.data());
        std::vector<double> corr(V);
        kernels::matvec(adapter->B.data(), V, adapter->rank, low.data(), corr.data());
        for (size_t i = 0; i < V; ++i) logits[i] += corr[i];
    }
    return logits;
}

std::vector<double> output_logits(const Model& model, const std::vector<double>& final_hidden,
                                  const OutputAdapter* adapter) {
    return logits_from_normed(model, normalize_final(model, final_hidden), adapter);
}

} // namespace lab
