// Test-time scaling strategies: consensus, rating, reflection, adaptive
// sampling, branch-and-score decoding, and the search-based pipelines.
#include "lab/decoders.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <memory>
#include <numeric>
#include <set>
#include <stdexcept>
#include <tuple>

#include "lab/errors.h"
#include "lab/rng.h"
#include "lab/text_metrics.h"

namespace lab {

namespace {

std::set<std::string> word_set(const std::string& text) {
    const auto words = word_tokens(text);
    return {words.begin(), words.end()};
}

double clip(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

std::vector<ChatMessage> user_only(std::string content) {
    return {{"user", std::move(content)}};
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

// Top-two probabilities of the temperature-1 softmax; equal when the two
// largest logits tie.
std::pair<double, double> top_two(const std::vector<double>& probs) {
    double p1 = -1.0, p2 = -1.0;
    for (double p : probs) {
        if (p > p1) {
            p2 = p1;
            p1 = p;
        } else if (p > p2) {
            p2 = p;
        }
    }
    return {p1, probs.size() > 1 ? p2 : 0.0};
}

} // namespace

// === audit trace =========================================================

nlohmann::json StrategyTrace::to_json() const {
    return {{"strategy", strategy}, {"seeds", seeds}, {"calls", calls}, {"decision", decision}};
}

std::string traced_call(LmBackend& be, StrategyTrace& trace,
                        const std::vector<ChatMessage>& messages, const SamplerParams& sampler,
                        uint64_t seed, size_t max_tokens, double repetition_penalty,
                        size_t no_repeat_ngram) {
    GenRequest req;
    req.messages = messages;
    req.sampler = sampler;
    req.max_tokens = max_tokens;
    req.seed = seed;
    req.repetition_penalty = repetition_penalty;
    req.no_repeat_ngram = no_repeat_ngram;

    const GenResponse resp = be.generate(req); // throws propagate; nothing is logged then
    trace.seeds.push_back(seed);
    trace.calls.push_back({{"prompt", flatten_messages(messages)},
                           {"params",
                            {{"temperature", sampler.temperature},
                             {"top_p", sampler.top_p},
                             {"top_k", sampler.top_k},
                             {"min_p", sampler.min_p},
                             {"seed", seed},
                             {"max_tokens", max_tokens},
                             {"repetition_penalty", repetition_penalty},
                             {"no_repeat_ngram", no_repeat_ngram}}},
                           {"response", resp.text}});
    return resp.text;
}

// === shared text measures ================================================

double word_overlap(const std::string& a, const std::string& b) {
    const auto sa = word_set(a);
    const auto sb = word_set(b);
    if (sa.empty() && sb.empty()) return 1.0;
    size_t inter = 0;
    for (const auto& w : sa) inter += sb.count(w);
    const size_t uni = sa.size() + sb.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double response_similarity(const std::string& a, const std::string& b) {
    return word_overlap(a, b);
}

std::optional<int> parse_rating(const std::string& reply) {
    for (size_t i = 0; i < reply.size(); ++i) {
        if (!std::isdigit(static_cast<unsigned char>(reply[i]))) continue;
        size_t j = i;
        while (j < reply.size() && std::isdigit(static_cast<unsigned char>(reply[j]))) ++j;
        if (j - i <= 18) { // longer runs cannot be <= 10 even with leading zeros stripped
            const unsigned long long v = std::stoull(reply.substr(i, j - i));
            if (v <= 10) return static_cast<int>(v);
        }
        i = j - 1; // resume after this run
    }
    return std::nullopt;
}

std::optional<double> parse_unit_score(const std::string& reply) {
    const auto digit_at = [&](size_t p) {
        return p < reply.size() && std::isdigit(static_cast<unsigned char>(reply[p]));
    };
    for (size_t i = 0; i < reply.size(); ++i) {
        if (!digit_at(i) && !(reply[i] == '.' && digit_at(i + 1))) continue;
        size_t j = i;
        bool dot = false;
        while (j < reply.size()) {
            if (digit_at(j)) {
                ++j;
            } else if (reply[j] == '.' && !dot && digit_at(j + 1)) {
                dot = true;
                ++j;
            } else {
                break;
            }
        }
        const double v = std::strtod(reply.substr(i, j - i).c_str(), nullptr);
        if (v >= 0.0 && v <= 1.0) return v;
        i = j - 1;
    }
    return std::nullopt;
}

// === self-consistency ====================================================

std::vector<Cluster> cluster_responses(const std::vector<std::string>& texts, double tau) {
    std::vector<Cluster> clusters;
    for (size_t i = 0; i < texts.size(); ++i) {
        bool placed = false;
        for (auto& c : clusters) {
            bool compatible = true;
            for (size_t m : c.members) {
                if (response_similarity(texts[i], texts[m]) < tau) {
                    compatible = false;
                    break;
                }
            }
            if (compatible) {
                c.members.push_back(i);
                placed = true;
                break;
            }
        }
        if (!placed) clusters.push_back(Cluster{{i}, 1.0});
    }
    for (auto& c : clusters) {
        if (c.members.size() < 2) continue; // singleton coherence stays 1
        double sum = 0.0;
        size_t pairs = 0;
        for (size_t x = 0; x < c.members.size(); ++x) {
            for (size_t y = x + 1; y < c.members.size(); ++y) {
                sum += response_similarity(texts[c.members[x]], texts[c.members[y]]);
                ++pairs;
            }
        }
        c.coherence = sum / static_cast<double>(pairs);
    }
    return clusters;
}

SelfConsistencyResult self_consistency(LmBackend& be, const std::string& prompt, size_t k,
                                       double T, double tau, uint64_t seed, size_t max_tokens) {
    if (k < 1) throw std::invalid_argument("self_consistency: need at least one sample");

    SelfConsistencyResult res;
    res.trace.strategy = "self-consistency";

    SamplerParams sampler;
    sampler.temperature = T;
    std::string last_error;
    nlohmann::json failed = nlohmann::json::array();
    for (size_t i = 0; i < k; ++i) {
        try {
            res.samples.push_back(
                traced_call(be, res.trace, user_only(prompt), sampler, seed + i, max_tokens));
        } catch (const BackendError& e) {
            last_error = e.what();
            failed.push_back({{"sample", i}, {"error", last_error}});
        }
    }
    if (res.samples.empty())
        throw BackendError("all " + std::to_string(k) + " samples failed; last error: " +
                           last_error);

    res.clusters = cluster_responses(res.samples, tau);
    size_t best = 0;
    for (size_t c = 1; c < res.clusters.size(); ++c) {
        const auto& cand = res.clusters[c];
        const auto& top = res.clusters[best];
        if (cand.members.size() > top.members.size() ||
            (cand.members.size() == top.members.size() && cand.coherence > top.coherence))
            best = c;
    }
    res.winner_cluster = best;
    res.answer = res.samples[res.clusters[best].members.front()];

    nlohmann::json clusters = nlohmann::json::array();
    for (const auto& c : res.clusters)
        clusters.push_back({{"members", c.members}, {"coherence", c.coherence}});
    res.trace.decision = {{"clusters", clusters},
                          {"winner", best},
                          {"failed_samples", failed},
                          {"tau", tau}};
    return res;
}

// === best-of-n ===========================================================

const char* const kRatingSystemPrompt =
    "Rate the following response from 0-10 based on clarity, accuracy, and helpfulness. "
    "Respond with ONLY a number";

BestOfNResult best_of_n(LmBackend& be, const std::string& prompt, size_t k, double t_gen,
                        double t_rate, uint64_t seed, size_t max_tokens) {
    if (k < 1) throw std::invalid_argument("best_of_n: need at least one candidate");

    BestOfNResult res;
    res.trace.strategy = "best-of-n";
    res.temperature_warning = t_rate > t_gen; // rating hotter than generation is suspect

    SamplerParams gen;
    gen.temperature = t_gen;
    for (size_t i = 0; i < k; ++i)
        res.candidates.push_back(
            traced_call(be, res.trace, user_only(prompt), gen, seed + i, max_tokens));

    SamplerParams rate;
    rate.temperature = t_rate;
    res.ratings.assign(k, 0);
    res.parse_failed.assign(k, false);
    for (size_t i = 0; i < k; ++i) {
        const std::vector<ChatMessage> messages = {
            {"system", kRatingSystemPrompt},
            {"user", "Query:\n" + prompt + "\n\nResponse:\n" + res.candidates[i]}};
        const std::string reply =
            traced_call(be, res.trace, messages, rate, seed + k + i, /*max_tokens=*/16);
        if (const auto rating = parse_rating(reply)) {
            res.ratings[i] = *rating;
        } else {
            res.parse_failed[i] = true;
        }
    }

    res.all_unratable =
        std::all_of(res.parse_failed.begin(), res.parse_failed.end(), [](bool f) { return f; });
    size_t best = 0;
    if (!res.all_unratable) {
        for (size_t i = 1; i < k; ++i)
            if (res.ratings[i] > res.ratings[best]) best = i;
    }
    res.winner = best;
    res.answer = res.candidates[best];
    res.trace.decision = {{"ratings", res.ratings},
                          {"parse_failed", res.parse_failed},
                          {"winner", best},
                          {"all_unratable", res.all_unratable},
                          {"temperature_warning", res.temperature_warning}};
    return res;
}

// === chain-of-thought reflection =========================================

CotReflectionResult cot_reflection(LmBackend& be, const std::string& query, uint64_t seed,
                                   double T, size_t max_tokens) {
    CotReflectionResult res;
    res.trace.strategy = "cot-reflection";

    const std::vector<ChatMessage> messages = {
        {"system",
         "Respond in three phases. Put your step-by-step reasoning inside "
         "<thinking>...</thinking>, critique that reasoning inside "
         "<reflection>...</reflection>, and give only the final answer inside "
         "<output>...</output>."},
        {"user", query}};
    SamplerParams sampler;
    sampler.temperature = T;
    res.full_response = traced_call(be, res.trace, messages, sampler, seed, max_tokens);

    // The answer is the LAST <output> section; an unclosed tag runs to the
    // end, and a missing tag falls back to the whole response.
    const std::string open = "<output>", close = "</output>";
    const size_t pos = res.full_response.rfind(open);
    if (pos == std::string::npos) {
        res.answer = res.full_response;
        res.marker_missing = true;
    } else {
        const size_t start = pos + open.size();
        const size_t end = res.full_response.find(close, start);
        res.answer = trim(res.full_response.substr(
            start, end == std::string::npos ? std::string::npos : end - start));
    }
    res.trace.decision = {{"marker_missing", res.marker_missing}};
    return res;
}

// === re-reading ==========================================================

std::string re2_prompt(const std::string& query) {
    return "Step 1 - Initial Reading: Let's first read and understand the question carefully.\n"
           "Original Question: " +
           query +
           "\n"
           "Step 2 - Re-reading and Analysis: Let's read the question again: " +
           query +
           "\n"
           "Now, let's break down what the question is asking and analyze its key components.\n"
           "Step 3 - Final Answer: Based on our analysis, here is the complete answer:";
}

Re2Result re2(LmBackend& be, const std::string& query, const std::string& system_prompt,
              const SamplerParams& sampler, uint64_t seed, size_t max_tokens) {
    Re2Result res;
    res.trace.strategy = "re2";
    res.prompt = re2_prompt(query);

    std::vector<ChatMessage> messages;
    if (!system_prompt.empty()) messages.push_back({"system", system_prompt});
    messages.push_back({"user", res.prompt});
    res.answer = traced_call(be, res.trace, messages, sampler, seed, max_tokens);
    res.trace.decision = {{"prompt", res.prompt}};
    return res;
}

// === entropy-guided sampling =============================================

std::pair<double, double> uncertainty_metrics(const std::vector<double>& logits) {
    const auto probs = softmax_temperature(logits, 1.0);
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log2(p);
    double varentropy = 0.0;
    for (double p : probs) {
        if (p <= 0.0) continue;
        const double dev = std::log2(p) + h; // distance of surprisal from the mean
        varentropy += p * dev * dev;
    }
    return {h, varentropy};
}

UncertaintyMetrics attention_metrics(const std::vector<CausalMatrix>& heads) {
    UncertaintyMetrics m;
    if (heads.empty()) return m;
    const double eps = CausalMatrix::kEntropyEps;
    const size_t n_heads = heads.size();
    const size_t n_rows = heads[0].rows();

    // Per-head entropy in bits; summed and spread across heads.
    std::vector<double> head_entropy(n_heads, 0.0);
    double abs_log_sum = 0.0;
    size_t support = 0;
    for (size_t h = 0; h < n_heads; ++h) {
        for (size_t i = 0; i < heads[h].rows(); ++i) {
            const auto& row = heads[h].row(i);
            for (double a : row) {
                head_entropy[h] -= a * std::log2(a + eps);
                abs_log_sum += std::abs(std::log(a + eps));
                ++support;
            }
        }
    }
    for (double e : head_entropy) m.h_attn += e;
    double mean_e = m.h_attn / static_cast<double>(n_heads);
    double var = 0.0;
    for (double e : head_entropy) var += (e - mean_e) * (e - mean_e);
    m.v_attn = var / static_cast<double>(n_heads);
    m.interaction = support ? abs_log_sum / static_cast<double>(support) : 0.0;

    // Mean head pattern, then the average L1 distance of each head to it.
    double l1_sum = 0.0;
    for (size_t i = 0; i < n_rows; ++i) {
        const size_t width = heads[0].row(i).size();
        for (size_t j = 0; j < width; ++j) {
            double mean_a = 0.0;
            for (size_t h = 0; h < n_heads; ++h) mean_a += heads[h].at(i, j);
            mean_a /= static_cast<double>(n_heads);
            for (size_t h = 0; h < n_heads; ++h) l1_sum += std::abs(heads[h].at(i, j) - mean_a);
        }
    }
    m.agreement = l1_sum / static_cast<double>(n_heads);
    return m;
}

SamplerParams adapt_sampler_params(const UncertaintyMetrics& m, const SamplerParams& base,
                                   const std::array<double, 7>& betas) {
    SamplerParams out = base;
    const double token_u = m.h_bits + m.varentropy;

    out.temperature =
        base.temperature *
        clip(1.0 + betas[0] * token_u + betas[1] * m.h_attn - betas[2] * m.agreement, 0.5, 2.0);
    out.top_p = base.top_p * clip(1.0 + betas[3] * m.v_attn, 0.5, 1.0);

    const double k_scaled =
        std::nearbyint(base.top_k * (1.0 + betas[4] * m.interaction - betas[5] * m.agreement));
    const double k_hi = std::min(2.0 * base.top_k, 2147483647.0);
    out.top_k = static_cast<int>(clip(k_scaled, 1.0, k_hi));

    out.min_p = base.min_p * clip(1.0 - betas[6] * token_u, 0.25, 2.0);
    return out;
}

EntropyGuidedResult entropy_guided_generate(LmBackend& be, const std::string& prompt,
                                            const SamplerParams& base,
                                            const std::array<double, 7>& betas,
                                            size_t max_tokens, uint64_t seed) {
    auto* toy = dynamic_cast<ToyBackend*>(&be);
    if (!toy) throw CapabilityError("entropy-guided decoding requires an internal-state backend");
    const Model& model = toy->model();
    const Vocab& vocab = toy->vocab();

    // Mirror the backend's own decode discipline exactly (same flattening,
    // same RNG stream, one uniform per token) so that all-zero betas
    // reproduce a plain generate() byte for byte.
    std::vector<int> ids = vocab.tokenize(flatten_messages(user_only(prompt)));
    const size_t prompt_len = ids.size();
    if (prompt_len + max_tokens > model.cfg.max_seq)
        throw BackendError("prompt plus max_tokens exceeds the model context window");

    KvCache cache = make_cache(model, /*introspect=*/true);
    forward_extend(model, ids, cache);

    EntropyGuidedResult res;
    res.trace.strategy = "entropy-guided";
    res.trace.seeds.push_back(seed);

    RngSequence rng(Rng{seed, kDecodeSampleStream});
    nlohmann::json steps = nlohmann::json::array();
    for (size_t t = 0; t < max_tokens; ++t) {
        std::vector<double> logits = cache.last_logits;
        apply_repetition_controls(logits, ids, 1.0, 0);

        EntropyGuidedStep step;
        std::tie(step.metrics.h_bits, step.metrics.varentropy) = uncertainty_metrics(logits);
        const UncertaintyMetrics attn = attention_metrics(cache.attn.back());
        step.metrics.h_attn = attn.h_attn;
        step.metrics.v_attn = attn.v_attn;
        step.metrics.agreement = attn.agreement;
        step.metrics.interaction = attn.interaction;
        step.params = adapt_sampler_params(step.metrics, base, betas);

        auto probs = softmax_temperature(logits, step.params.temperature);
        probs = apply_sampler(probs, step.params);
        step.token = sample_index(probs, rng.u01());

        ids.push_back(step.token);
        forward_extend(model, ids, cache);
        steps.push_back({{"token", step.token},
                         {"h_bits", step.metrics.h_bits},
                         {"varentropy", step.metrics.varentropy},
                         {"h_attn", step.metrics.h_attn},
                         {"v_attn", step.metrics.v_attn},
                         {"agreement", step.metrics.agreement},
                         {"interaction", step.metrics.interaction},
                         {"temperature", step.params.temperature},
                         {"top_p", step.params.top_p},
                         {"top_k", step.params.top_k},
                         {"min_p", step.params.min_p}});
        res.steps.push_back(std::move(step));
        res.tokens.push_back(res.steps.back().token);
    }

    res.text = vocab.detokenize(std::vector<int>(ids.begin() + prompt_len, ids.end()));
    res.trace.calls.push_back({{"prompt", flatten_messages(user_only(prompt))},
                               {"params",
                                {{"temperature", base.temperature},
                                 {"top_p", base.top_p},
                                 {"top_k", base.top_k},
                                 {"min_p", base.min_p},
                                 {"seed", seed},
                                 {"max_tokens", max_tokens}}},
                               {"response", res.text}});
    res.trace.decision = {{"betas", betas}, {"steps", steps}};
    return res;
}

// === chain-of-thought decoding ===========================================

double token_reliability(double p1, double p2, size_t j, size_t l_max, double alpha) {
    if (!(p2 >= 0.0 && p1 >= p2 && p1 <= 1.0))
        throw std::invalid_argument("token_reliability: need 0 <= p2 <= p1 <= 1");
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw std::invalid_argument("token_reliability: alpha must be in [0,1]");
    if (l_max < 1) throw std::invalid_argument("token_reliability: l_max must be positive");
    const double f =
        std::max(0.0, 1.0 - alpha * static_cast<double>(j) / static_cast<double>(l_max));
    return (p1 - p2) * f;
}

CotDecodeResult cot_decode(const Model& model, const Vocab& vocab, const std::string& prompt,
                           size_t k, double alpha, bool consolidate, size_t max_tokens) {
    if (k < 1) throw std::invalid_argument("cot_decode: need at least one branch");
    if (k > model.cfg.vocab_size)
        throw std::invalid_argument("cot_decode: more branches than vocabulary entries");
    if (max_tokens < 1) throw std::invalid_argument("cot_decode: need at least one step");
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw std::invalid_argument("cot_decode: alpha must be in [0,1]");

    std::vector<int> prompt_ids = vocab.tokenize(prompt);
    if (prompt_ids.empty()) throw std::invalid_argument("cot_decode: empty prompt");
    if (prompt_ids.size() + max_tokens > model.cfg.max_seq)
        throw std::invalid_argument("cot_decode: prompt plus max_tokens exceeds the context window");

    KvCache base_cache = make_cache(model, /*introspect=*/false);
    forward_extend(model, prompt_ids, base_cache);
    const auto first_probs = softmax_temperature(base_cache.last_logits, 1.0);

    // Branch on the k most probable first tokens (ties by lower id).
    std::vector<int> order(first_probs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (first_probs[a] != first_probs[b]) return first_probs[a] > first_probs[b];
        return a < b;
    });
    const auto [fp1, fp2] = top_two(first_probs);

    CotDecodeResult res;
    res.trace.strategy = "cot-decode";
    for (size_t b = 0; b < k; ++b) {
        CotPath path;
        KvCache cache = base_cache;
        std::vector<int> ids = prompt_ids;

        // The first step records the shared branching distribution's margin;
        // later steps are greedy and record their own top-two.
        path.tokens.push_back(order[b]);
        path.p1.push_back(fp1);
        path.p2.push_back(fp2);
        ids.push_back(order[b]);
        forward_extend(model, ids, cache);

        for (size_t j = 1; j < max_tokens; ++j) {
            const auto probs = softmax_temperature(cache.last_logits, 1.0);
            const size_t next =
                std::max_element(probs.begin(), probs.end()) - probs.begin();
            const auto [p1, p2] = top_two(probs);
            path.tokens.push_back(static_cast<int>(next));
            path.p1.push_back(p1);
            path.p2.push_back(p2);
            ids.push_back(static_cast<int>(next));
            forward_extend(model, ids, cache);
        }

        double num = 0.0, den = 0.0;
        for (size_t j = 0; j < path.tokens.size(); ++j) {
            const double r = token_reliability(path.p1[j], path.p2[j], j, max_tokens, alpha);
            const double w =
                1.0 - alpha * static_cast<double>(j) / static_cast<double>(max_tokens);
            path.reliability.push_back(r);
            num += r * w;
            den += w;
        }
        path.score = num / den;
        path.text = vocab.detokenize(path.tokens);
        res.paths.push_back(std::move(path));
    }

    if (consolidate) {
        // Near-duplicate paths keep only their most reliable representative.
        std::vector<std::string> texts;
        for (const auto& p : res.paths) texts.push_back(p.text);
        for (const auto& cluster : cluster_responses(texts, 0.9)) {
            size_t keep = cluster.members.front();
            for (size_t m : cluster.members)
                if (res.paths[m].score > res.paths[keep].score) keep = m;
            for (size_t m : cluster.members)
                if (m != keep) res.paths[m].pruned = true;
        }
    }

    size_t winner = 0;
    bool found = false;
    for (size_t b = 0; b < res.paths.size(); ++b) {
        if (res.paths[b].pruned) continue;
        if (!found || res.paths[b].score > res.paths[winner].score) {
            winner = b;
            found = true;
        }
    }
    res.winner = winner;
    res.answer = res.paths[winner].text;

    nlohmann::json paths = nlohmann::json::array();
    for (const auto& p : res.paths)
        paths.push_back({{"tokens", p.tokens},
                         {"score", p.score},
                         {"pruned", p.pruned}});
    res.trace.decision = {{"paths", paths}, {"winner", winner}, {"alpha", alpha}};
    return res;
}

// === mixture-of-agents ====================================================

std::string strip_scaffolding(const std::string& text) {
    static const char* const kPrefixes[] = {"Rating:", "Score:", "Critique:", "Candidate "};
    std::vector<std::string> kept;
    size_t pos = 0;
    while (pos <= text.size()) {
        const size_t nl = text.find('\n', pos);
        const std::string line =
            text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        const std::string lead = trim(line);
        bool scaffold = false;
        for (const char* prefix : kPrefixes)
            if (lead.rfind(prefix, 0) == 0) scaffold = true;
        if (!scaffold) kept.push_back(line);
        if (nl == std::string::npos) break;
        pos = nl + 1;
    }
    return trim(join(kept, "\n"));
}

MoaResult moa_pipeline(LmBackend& be, const std::string& query, size_t n, double t1, double t2,
                       double t3, double repetition_penalty, size_t no_repeat_ngram,
                       uint64_t seed, size_t max_tokens) {
    if (n < 1) throw std::invalid_argument("moa_pipeline: need at least one candidate");
    if (!(t1 > t2 && t2 > t3))
        throw std::invalid_argument(
            "moa_pipeline: temperatures must strictly decrease across stages");

    MoaResult res;
    res.trace.strategy = "mixture-of-agents";

    SamplerParams stage1;
    stage1.temperature = t1;
    std::string numbered;
    for (size_t i = 0; i < n; ++i) {
        res.candidates.push_back(traced_call(be, res.trace, user_only(query), stage1, seed + i,
                                             max_tokens, repetition_penalty, no_repeat_ngram));
        numbered += std::to_string(i + 1) + ". " + res.candidates.back() + "\n";
    }

    SamplerParams stage2;
    stage2.temperature = t2;
    res.critique = traced_call(
        be, res.trace,
        {{"system",
          "You are a careful reviewer. Point out the strengths and weaknesses of each "
          "candidate answer."},
         {"user", "Query: " + query + "\n\nCandidates:\n" + numbered}},
        stage2, seed + n, max_tokens);

    SamplerParams stage3;
    stage3.temperature = t3;
    res.synthesis_raw = traced_call(
        be, res.trace,
        {{"system", "Write the single best answer to the query, guided by the critique."},
         {"user", "Query: " + query + "\n\nCritique:\n" + res.critique}},
        stage3, seed + n + 1, max_tokens);

    res.answer = strip_scaffolding(res.synthesis_raw);
    res.trace.decision = {{"calls", n + 2}, {"temperatures", {t1, t2, t3}}};
    return res;
}

// === regenerate-then-optimize ============================================

RtoResult rto_pipeline(LmBackend& be, const std::string& query, double tau, uint64_t seed,
                       const SamplerParams& sampler, size_t max_tokens,
                       const std::function<double(const std::string&)>& evaluator) {
    if (!(tau >= 0.0 && tau <= 1.0))
        throw std::invalid_argument("rto_pipeline: tau must be in [0,1]");

    RtoResult res;
    res.trace.strategy = "rto";

    const auto stage = [&](const char* label, const std::vector<ChatMessage>& messages,
                           uint64_t stage_seed) {
        try {
            return traced_call(be, res.trace, messages, sampler, stage_seed, max_tokens);
        } catch (const BackendError& e) {
            throw BackendError(std::string(label) + " stage failed: " + e.what());
        }
    };

    res.first_pass = stage(
        "draft",
        user_only("Provide a high-quality, complete answer to the following question.\n\n" +
                  query),
        seed);
    res.analysis =
        stage("analysis",
              user_only("Extract the requirements and key specification that the following "
                        "draft answer is trying to satisfy.\n\nDraft answer:\n" +
                        res.first_pass),
              seed + 1);
    // The second pass sees only the extracted specification, never the
    // original question — that independence is what the overlap test probes.
    res.second_pass =
        stage("regeneration",
              user_only("Write a complete answer that satisfies the following specification."
                        "\n\nSpecification:\n" +
                        res.analysis),
              seed + 2);

    res.delta = word_overlap(res.first_pass, res.second_pass);
    res.consistent = res.delta >= tau;
    if (res.consistent) {
        res.answer = res.first_pass;
        res.calls = 3;
    } else {
        res.answer = stage("synthesis",
                           user_only("Question: " + query + "\n\nFirst solution:\n" +
                                     res.first_pass + "\n\nSecond solution:\n" + res.second_pass +
                                     "\n\nSynthesize the single best final answer."),
                           seed + 3);
        res.calls = 4;
    }
    if (evaluator) res.quality_delta = evaluator(res.answer) - evaluator(res.first_pass);

    res.trace.decision = {{"delta", res.delta},
                          {"consistent", res.consistent},
                          {"calls", res.calls},
                          {"tau", tau}};
    if (res.quality_delta) res.trace.decision["quality_delta"] = *res.quality_delta;
    return res;
}

// === observation-driven planning =========================================

PlanSearchResult plansearch_pipeline(LmBackend& be, const std::string& query, size_t n1,
                                     size_t n2, size_t N, double T, uint64_t seed,
                                     size_t max_tokens) {
    if (n1 < 1) throw std::invalid_argument("plansearch_pipeline: need at least one observation");
    if (N < 1) throw std::invalid_argument("plansearch_pipeline: need at least one solve");

    PlanSearchResult res;
    res.trace.strategy = "plansearch";

    SamplerParams sampler;
    sampler.temperature = T;
    for (size_t s = 0; s < N; ++s) {
        const uint64_t base = seed + s * 16; // room for the per-solve stages
        const std::string obs = traced_call(
            be, res.trace,
            user_only("Problem: " + query + "\n\nList " + std::to_string(n1) +
                      " key observations about the problem."),
            sampler, base, max_tokens);

        std::string derived;
        if (n2 > 0)
            derived = traced_call(
                be, res.trace,
                user_only("Problem: " + query + "\n\nObservations:\n" + obs + "\n\nDerive " +
                          std::to_string(n2) +
                          " further observations that follow from combining them."),
                sampler, base + 1, max_tokens);

        std::string strategy_prompt = "Problem: " + query + "\n\nObservations:\n" + obs;
        if (n2 > 0) strategy_prompt += "\n\nDerived observations:\n" + derived;
        strategy_prompt += "\n\nPropose a concrete solution strategy based on these observations.";
        const std::string strat =
            traced_call(be, res.trace, user_only(strategy_prompt), sampler, base + 2, max_tokens);

        res.answers.push_back(traced_call(
            be, res.trace,
            user_only("Problem: " + query + "\n\nStrategy:\n" + strat +
                      "\n\nExecute the strategy and give the final answer."),
            sampler, base + 3, max_tokens));
    }
    res.calls = res.trace.calls.size();
    res.trace.decision = {{"answers", res.answers}, {"calls", res.calls}};
    return res;
}

// === Monte-Carlo tree search =============================================

double uct_score(double v, uint64_t n, uint64_t n_parent, double c) {
    if (n_parent == 0) throw std::invalid_argument("uct_score: parent must have visits");
    if (n == 0) return std::numeric_limits<double>::infinity();
    return v / static_cast<double>(n) +
           c * std::sqrt(std::log(static_cast<double>(n_parent)) / static_cast<double>(n));
}

const char* const kUnitEvalPrompt =
    "Rate the quality of the following response on a scale from 0 to 1. "
    "Respond with ONLY a number.";

namespace {

struct MctsNode {
    std::vector<std::string> actions; // edge label: the sampled continuation
    std::vector<double> value;        // summed backpropagated quality per edge
    std::vector<uint64_t> visits;
    std::vector<std::unique_ptr<MctsNode>> kids;
    bool expanded = false;
};

// Edge with the best UCT score; unvisited edges rank first, ties keep the
// lowest index.
size_t select_edge(const MctsNode& node, double c) {
    const uint64_t parent = std::max<uint64_t>(
        1, std::accumulate(node.visits.begin(), node.visits.end(), uint64_t{0}));
    size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (size_t e = 0; e < node.actions.size(); ++e) {
        const double s = uct_score(node.value[e], node.visits[e], parent, c);
        if (s > best_score) {
            best_score = s;
            best = e;
        }
    }
    return best;
}

nlohmann::json dump_tree(const MctsNode& node) {
    nlohmann::json kids = nlohmann::json::array();
    for (size_t e = 0; e < node.actions.size(); ++e)
        kids.push_back({{"action", node.actions[e]},
                        {"n", node.visits[e]},
                        {"v", node.value[e]},
                        {"children", dump_tree(*node.kids[e])["children"]}});
    return {{"children", kids}};
}

} // namespace

MctsResult mcts_search(LmBackend& be, const std::string& query, size_t rollouts, size_t k_expand,
                       size_t depth, size_t h_max, double c, uint64_t seed, double T,
                       size_t max_tokens) {
    if (rollouts < 1) throw std::invalid_argument("mcts_search: need at least one rollout");
    if (k_expand < 1) throw std::invalid_argument("mcts_search: need at least one expansion");
    if (depth < 1) throw std::invalid_argument("mcts_search: need positive depth");

    MctsResult res;
    res.trace.strategy = "mcts";
    SamplerParams sampler;
    sampler.temperature = T;

    const auto terminal = [&](const std::vector<std::string>& history) {
        if (history.size() >= depth) return true;
        size_t chars = 0;
        for (const auto& h : history) chars += h.size();
        return chars > h_max;
    };
    uint64_t call_no = 0;
    const auto generate = [&](const std::vector<std::string>& history) {
        std::string prompt = "Query: " + query;
        if (!history.empty()) prompt += "\n\nResponse so far:\n" + join(history, "\n");
        prompt += "\n\nContinue the response.";
        return traced_call(be, res.trace, user_only(prompt), sampler, seed + call_no++,
                           max_tokens);
    };

    auto root = std::make_unique<MctsNode>();
    std::string last_error;
    for (size_t r = 0; r < rollouts; ++r) {
        try {
            MctsNode* node = root.get();
            std::vector<std::pair<MctsNode*, size_t>> path;
            std::vector<std::string> history;

            while (node->expanded && !terminal(history)) {
                const size_t e = select_edge(*node, c);
                path.push_back({node, e});
                history.push_back(node->actions[e]);
                node = node->kids[e].get();
            }
            if (!node->expanded && !terminal(history)) {
                for (size_t i = 0; i < k_expand; ++i) {
                    node->actions.push_back(generate(history));
                    node->value.push_back(0.0);
                    node->visits.push_back(0);
                    node->kids.push_back(std::make_unique<MctsNode>());
                }
                node->expanded = true;
                const size_t e = select_edge(*node, c); // all fresh: picks edge 0
                path.push_back({node, e});
                history.push_back(node->actions[e]);
                node = node->kids[e].get();
            }

            std::vector<std::string> sim = history;
            while (!terminal(sim)) sim.push_back(generate(sim));

            const std::string reply = traced_call(
                be, res.trace,
                {{"system", kUnitEvalPrompt},
                 {"user", "Query: " + query + "\n\nResponse:\n" + join(sim, "\n")}},
                sampler, seed + call_no++, /*max_tokens=*/16);
            double q = 0.5;
            if (const auto parsed = parse_unit_score(reply)) {
                q = *parsed;
            } else {
                res.parse_fallback_used = true;
            }

            for (const auto& [n, e] : path) {
                ++n->visits[e];
                n->value[e] += q;
            }
            ++res.completed_rollouts;
        } catch (const BackendError& e) {
            // A failed rollout backpropagates nothing, so visit accounting
            // stays consistent even if it had already expanded a node.
            last_error = e.what();
            ++res.aborted_rollouts;
        }
    }

    if (!root->expanded)
        throw BackendError("every rollout aborted; last error: " + last_error);
    for (uint64_t n : root->visits) res.root_visits += n;

    size_t best = 0;
    double best_mean = -std::numeric_limits<double>::infinity();
    for (size_t e = 0; e < root->actions.size(); ++e) {
        if (root->visits[e] == 0) continue;
        const double mean = root->value[e] / static_cast<double>(root->visits[e]);
        if (mean > best_mean) {
            best_mean = mean;
            best = e;
        }
    }
    res.answer = root->actions[best];
    res.tree = dump_tree(*root);
    res.trace.decision = {{"completed", res.completed_rollouts},
                          {"aborted", res.aborted_rollouts},
                          {"root_visits", res.root_visits},
                          {"parse_fallback_used", res.parse_fallback_used},
                          {"winner", best}};
    return res;
}

// === self-play reasoning search ==========================================

const std::array<const char*, 5> kReasoningActions = {
    "Propose the immediate next step of the solution.",
    "Draft the complete remaining solution and state the final answer.",
    "Restate the question precisely in your own words.",
    "Decompose the question into smaller sub-questions.",
    "Verify and summarize the current reasoning.",
};

namespace {

constexpr size_t kActionCount = 5;
constexpr size_t kDraftAction = 1; // terminal: drafts the full remaining solution

struct RStarNode {
    std::array<std::string, kActionCount> step_text; // generated on first traversal
    std::array<bool, kActionCount> generated{};
    std::array<double, kActionCount> value{};
    std::array<uint64_t, kActionCount> visits{};
    std::array<std::unique_ptr<RStarNode>, kActionCount> kids;
};

size_t select_action(const RStarNode& node, double c) {
    const uint64_t parent = std::max<uint64_t>(
        1, std::accumulate(node.visits.begin(), node.visits.end(), uint64_t{0}));
    size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (size_t a = 0; a < kActionCount; ++a) {
        const double s = uct_score(node.value[a], node.visits[a], parent, c);
        if (s > best_score) {
            best_score = s;
            best = a;
        }
    }
    return best;
}

} // namespace

RStarResult r_star_search(LmBackend& be, const std::string& query, size_t rollouts, size_t depth,
                          double c, double theta, uint64_t seed, double T, size_t max_tokens) {
    if (rollouts < 1) throw std::invalid_argument("r_star_search: need at least one rollout");
    if (depth < 1) throw std::invalid_argument("r_star_search: need positive depth");
    if (!(theta >= 0.0 && theta <= 1.0))
        throw std::invalid_argument("r_star_search: theta must be in [0,1]");

    RStarResult res;
    res.trace.strategy = "r-star";
    SamplerParams sampler;
    sampler.temperature = T;
    uint64_t call_no = 0;

    const auto reasoning_prompt = [&](const std::vector<std::string>& steps, size_t action) {
        std::string prompt = "Question: " + query;
        if (!steps.empty()) prompt += "\n\nReasoning so far:\n" + join(steps, "\n");
        prompt += std::string("\n\n") + kReasoningActions[action];
        return prompt;
    };

    auto root = std::make_unique<RStarNode>();
    for (size_t r = 0; r < rollouts; ++r) {
        RStarNode* node = root.get();
        std::vector<std::pair<RStarNode*, size_t>> path;
        std::vector<std::string> steps;

        while (steps.size() < depth) {
            const size_t a = select_action(*node, c);
            if (!node->generated[a]) {
                node->step_text[a] =
                    traced_call(be, res.trace, user_only(reasoning_prompt(steps, a)), sampler,
                                seed + call_no++, max_tokens);
                node->generated[a] = true;
                node->kids[a] = std::make_unique<RStarNode>();
            }
            path.push_back({node, a});
            steps.push_back(node->step_text[a]);
            if (a == kDraftAction) break; // the full-draft action ends a trajectory
            node = node->kids[a].get();
        }

        RStarTrajectory traj;
        traj.steps = steps;
        traj.answer = steps.back();

        const std::string conf_reply = traced_call(
            be, res.trace,
            {{"system", kUnitEvalPrompt},
             {"user", "Question: " + query + "\n\nReasoning:\n" + join(steps, "\n")}},
            sampler, seed + call_no++, /*max_tokens=*/16);
        if (const auto parsed = parse_unit_score(conf_reply)) traj.conf = *parsed;

        // Verification: re-complete from the first half and compare against
        // the trajectory's own second half.
        const size_t mid = steps.size() / 2;
        std::string recomplete_prompt = "Question: " + query;
        if (mid > 0)
            recomplete_prompt += "\n\nReasoning so far:\n" +
                                 join({steps.begin(), steps.begin() + mid}, "\n");
        recomplete_prompt += "\n\nContinue the reasoning and state the final answer.";
        const std::string recompletion = traced_call(
            be, res.trace, user_only(recomplete_prompt), sampler, seed + call_no++, max_tokens);
        const std::string rest = join({steps.begin() + mid, steps.end()}, "\n");
        traj.consistent = word_overlap(rest, recompletion) > theta;
        traj.score = traj.consistent ? traj.conf : 0.0;

        for (const auto& [n, a] : path) {
            ++n->visits[a];
            n->value[a] += traj.conf;
        }
        res.trajectories.push_back(std::move(traj));
    }

    // Answer = frequency-times-mean-confidence argmax over consistent
    // trajectories, which reduces to the largest summed confidence.
    std::vector<std::pair<std::string, double>> weights; // first-seen order
    for (const auto& t : res.trajectories) {
        if (!t.consistent) continue;
        auto it = std::find_if(weights.begin(), weights.end(),
                               [&](const auto& w) { return w.first == t.answer; });
        if (it == weights.end()) {
            weights.push_back({t.answer, t.conf});
        } else {
            it->second += t.conf;
        }
    }
    if (!weights.empty()) {
        size_t best = 0;
        for (size_t i = 1; i < weights.size(); ++i)
            if (weights[i].second > weights[best].second) best = i;
        res.answer = weights[best].first;
    } else {
        res.fallback_inconsistent = true;
        size_t best = 0;
        for (size_t i = 1; i < res.trajectories.size(); ++i)
            if (res.trajectories[i].conf > res.trajectories[best].conf) best = i;
        res.answer = res.trajectories[best].answer;
    }

    nlohmann::json trajs = nlohmann::json::array();
    for (const auto& t : res.trajectories)
        trajs.push_back({{"answer", t.answer},
                         {"conf", t.conf},
                         {"consistent", t.consistent},
                         {"score", t.score}});
    res.trace.decision = {{"trajectories", trajs},
                          {"fallback_inconsistent", res.fallback_inconsistent},
                          {"theta", theta}};
    return res;
}

} // namespace lab
