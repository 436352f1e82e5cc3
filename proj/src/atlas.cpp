#include "lab/atlas.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lab {

std::string AtlasConfig::validate() const {
    if (alpha0 < 0.7 || alpha0 > 1.0) return "alpha0 must lie in [0.7, 1.0]";
    if (lambda < 3.0 || lambda > 5.0) return "lambda must lie in [3, 5]";
    if (tau_p <= 0.0 || tau_p >= 1.0) return "tau_p must lie in (0, 1)";
    if (k_tokens < 5 || k_tokens > 7) return "k_tokens must lie in [5, 7]";
    if (beta < 0.0 || beta > 1.0) return "beta must lie in [0, 1]";
    if (tau_embed <= 0.0) return "tau_embed must be positive";
    if (theta < 0.0) return "theta must be nonnegative";
    if (c_max <= 0.0) return "c_max must be positive";
    return "";
}

double normalized_avg_attention(const TraceView& t, size_t layer, size_t i) {
    if (i == 0) return 0.0;
    // Restricted row mass: attention a position pays to keys before i. Rows
    // m < i only store keys <= m < i, so their restriction is the cached row
    // sum; row i drops just its diagonal entry.
    double numer = 0.0;
    double denom = 0.0;
    for (size_t h = 0; h < t.H; ++h) {
        const CausalMatrix& a = t.attention(layer, h);
        numer += a.row_sum(i) - a.at(i, i);
    }
    for (size_t m = 0; m < i; ++m) {
        double raw = 0.0;
        for (size_t h = 0; h < t.H; ++h) raw += t.attention(layer, h).row_sum(m);
        denom = std::max(denom, raw);
    }
    denom = std::max(denom, numer);
    return denom > 0.0 ? numer / denom : 0.0;
}

double gradient_factor(const TraceView& t, size_t i) {
    if (t.L < 2) throw std::logic_error("gradient factor needs at least two layers");
    std::vector<double> abar(t.L);
    for (size_t l = 0; l < t.L; ++l) abar[l] = normalized_avg_attention(t, l, i);
    double g = 0.0;
    for (size_t j = 1; j < t.L; ++j)
        g += (static_cast<double>(j) / static_cast<double>(t.L - 1)) *
             std::abs(abar[j] - abar[j - 1]);
    return g;
}

std::vector<double> head_entropy_importance(const TraceView& t) {
    std::vector<double> ent(t.H, 0.0);
    double total = 0.0;
    for (size_t h = 0; h < t.H; ++h) {
        const CausalMatrix& a = t.attention(t.L - 1, h);
        double e = 0.0;
        for (size_t r = 0; r < a.rows(); ++r) e += a.row_entropy(r);
        ent[h] = std::max(e, 0.0);
        total += ent[h];
    }
    if (total <= 0.0) {
        std::fill(ent.begin(), ent.end(), 1.0 / static_cast<double>(t.H));
        return ent;
    }
    for (double& e : ent) e /= total;
    return ent;
}

double info_density(const TraceView& t, size_t i, double p_i) {
    if (i == 0) return 0.0;
    const std::vector<double> phi = head_entropy_importance(t);
    double weighted = 0.0;
    for (size_t h = 0; h < t.H; ++h) {
        const CausalMatrix& a = t.attention(t.L - 1, h);
        const double avg = (a.row_sum(i) - a.at(i, i)) / static_cast<double>(i);
        weighted += phi[h] * avg;
    }
    return (1.0 - p_i) * weighted;
}

double scaling_factor(double alpha0, double lambda, double c_current, double c_max) {
    if (!(c_max > 0.0)) throw std::invalid_argument("c_max must be positive");
    const double ratio = std::clamp(c_current / c_max, 0.0, 1.0);
    return alpha0 * std::exp(-lambda * ratio);
}

int semantic_filter(const Vocab& vocab, int token_id) {
    const Vocab::Token& tok = vocab.token(token_id);
    if (tok.is_stopword || tok.is_numeric || tok.is_punctuation) return 0;
    // Whitespace, control bytes, and other glyphless tokens carry nothing a
    // query could use either.
    const bool has_alnum = std::any_of(tok.text.begin(), tok.text.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) != 0;
    });
    return has_alnum ? 1 : 0;
}

bool relevance_precheck(double p_i, double tau_p, int s_i) {
    return p_i < tau_p && s_i == 1;
}

MlagBreakdown mlag_score(const TraceView& t, size_t i, double p_i, int s_i,
                         const AtlasConfig& cfg, double c_current) {
    MlagBreakdown b;
    b.gradient = gradient_factor(t, i);
    b.density = info_density(t, i, p_i);
    b.filter = s_i;
    b.scaling = scaling_factor(cfg.alpha0, cfg.lambda, c_current, cfg.c_max);
    b.score = b.scaling * b.gradient * b.density * static_cast<double>(s_i);
    return b;
}

std::vector<double> lrp_layer_weights(size_t L) {
    const double third = static_cast<double>(L) / 3.0;
    std::vector<double> psi(L);
    for (size_t idx = 0; idx < L; ++idx) {
        const double l = static_cast<double>(idx + 1);
        if (l < third)
            psi[idx] = 0.2 * l / third;
        else if (l < 2.0 * third)
            psi[idx] = 0.5 * (l - third) / third;
        else
            psi[idx] = 0.3 * (static_cast<double>(L) - l) / third;
    }
    return psi;
}

std::vector<double> embed_layer_weights(size_t L, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("embedding temperature must be positive");
    std::vector<double> delta(L);
    double sum = 0.0;
    for (size_t idx = 0; idx < L; ++idx) {
        delta[idx] = std::exp(static_cast<double>(idx + 1) / tau);
        sum += delta[idx];
    }
    for (double& d : delta) d /= sum;
    return delta;
}

std::vector<double> context_embedding(const TraceView& t, size_t j, double tau_embed) {
    const std::vector<double> delta = embed_layer_weights(t.L, tau_embed);
    std::vector<double> e(t.d, 0.0);
    for (size_t l = 1; l <= t.L; ++l) {
        const std::vector<double>& h = t.hidden_at(l, j);
        for (size_t k = 0; k < t.d; ++k) e[k] += delta[l - 1] * h[k];
    }
    return e;
}

double atten_score(const TraceView& t, size_t i, size_t j) {
    if (j >= i) throw std::invalid_argument("atten_score candidate must precede current token");
    const std::vector<double> psi = lrp_layer_weights(t.L);
    double score = 0.0;
    for (size_t l = 0; l < t.L; ++l) {
        double head_sum = 0.0;
        for (size_t h = 0; h < t.H; ++h) head_sum += t.attention(l, h).at(i, j);
        score += psi[l] * head_sum / static_cast<double>(t.H);
    }
    return score;
}

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 0.0 || nb <= 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

} // namespace

RelevanceScore relevance_score(double atten, double rep, double beta) {
    RelevanceScore r;
    r.atten = atten;
    r.rep = rep;
    r.combined = beta * atten + (1.0 - beta) * rep;
    return r;
}

std::vector<RelevanceScore> relevance_scores(const TraceView& t, size_t i,
                                             const AtlasConfig& cfg) {
    std::vector<RelevanceScore> out(i);
    const std::vector<double> e_i = context_embedding(t, i, cfg.tau_embed);
    for (size_t j = 0; j < i; ++j) {
        const double a = atten_score(t, i, j);
        const double rep = cosine(context_embedding(t, j, cfg.tau_embed), e_i);
        out[j] = relevance_score(a, rep, cfg.beta);
    }
    return out;
}

std::vector<size_t> select_query_tokens(const std::vector<RelevanceScore>& scores,
                                        const std::vector<char>& eligible, size_t k_tokens) {
    std::vector<size_t> cand;
    for (size_t j = 0; j < scores.size(); ++j)
        if (j < eligible.size() && eligible[j]) cand.push_back(j);
    // Ties prefer the later (more recent) position.
    std::sort(cand.begin(), cand.end(), [&](size_t a, size_t b) {
        if (scores[a].combined != scores[b].combined)
            return scores[a].combined > scores[b].combined;
        return a > b;
    });
    if (cand.size() > k_tokens) cand.resize(k_tokens);
    std::sort(cand.begin(), cand.end());
    return cand;
}

std::string joined_tokens(const std::vector<std::string>& tokens) {
    std::string out;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i];
    }
    return out;
}

std::string query_prompt(const std::vector<std::string>& tokens) {
    return "Formulate a search query from these tokens: " + joined_tokens(tokens);
}

QueryResult formulate_query(const std::vector<std::string>& tokens,
                            const std::function<std::string(const std::string&)>& ask) {
    if (tokens.empty()) throw std::invalid_argument("formulate_query on empty selection");
    QueryResult r;
    try {
        r.query = ask(query_prompt(tokens));
    } catch (const std::exception&) {
        r.query = joined_tokens(tokens);
        r.fallback = true;
    }
    return r;
}

} // namespace lab
