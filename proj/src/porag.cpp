// Group-relative policy optimization: reward heads, GRPO math, adapter
// gradients, the per-step training driver, and flat-file checkpoints.
#include "lab/porag.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "lab/errors.h"
#include "lab/kernels.h"
#include "lab/text_metrics.h"

namespace lab {

namespace {

constexpr double kVarianceEps = 1e-12;

double log_sum_exp(const std::vector<double>& z) {
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    return m + std::log(s);
}

double l2_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

} // namespace

// === reward heads ========================================================

RewardHeadParams RewardHeadParams::init(size_t d, Rng rng) {
    RewardHeadParams p;
    p.d = d;
    p.w1.resize(d * d);
    p.b1.assign(d, 0.0);
    p.w2.resize(d);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (size_t i = 0; i < p.w1.size(); ++i) p.w1[i] = rng.sym(i) * scale;
    Rng r2 = rng.fork(1);
    for (size_t i = 0; i < d; ++i) p.w2[i] = r2.sym(i) * scale;
    return p;
}

double reward_head_forward(const RewardHeadParams& p, const std::vector<double>& h) {
    if (h.size() != p.d) throw std::invalid_argument("reward head input length mismatch");
    std::vector<double> a(p.d);
    kernels::matvec(p.w1.data(), p.d, p.d, h.data(), a.data());
    for (size_t i = 0; i < p.d; ++i) a[i] = std::tanh(a[i] + p.b1[i]);
    return kernels::dot(p.w2.data(), a.data(), p.d) + p.b2;
}

RewardHeadGrads reward_head_grads(const RewardHeadParams& p, const std::vector<double>& h,
                                  double upstream) {
    if (h.size() != p.d) throw std::invalid_argument("reward head input length mismatch");
    RewardHeadGrads g;
    g.w1.assign(p.d * p.d, 0.0);
    g.b1.assign(p.d, 0.0);
    g.w2.assign(p.d, 0.0);

    // Forward pieces: pre-activation s, activation a = tanh(s).
    std::vector<double> s(p.d), a(p.d);
    kernels::matvec(p.w1.data(), p.d, p.d, h.data(), s.data());
    for (size_t i = 0; i < p.d; ++i) {
        s[i] += p.b1[i];
        a[i] = std::tanh(s[i]);
    }
    // d(upstream*f)/dW2 = upstream * a; /db2 = upstream.
    for (size_t i = 0; i < p.d; ++i) g.w2[i] = upstream * a[i];
    g.b2 = upstream;
    // Through tanh: da/ds = 1 - a^2.
    for (size_t i = 0; i < p.d; ++i) {
        const double ds = upstream * p.w2[i] * (1.0 - a[i] * a[i]);
        g.b1[i] = ds;
        for (size_t c = 0; c < p.d; ++c) g.w1[i * p.d + c] = ds * h[c];
    }
    return g;
}

// === GRPO math ===========================================================

std::string GrpoConfig::validate() const {
    if (!(eps_clip > 0.0)) return "eps_clip must be positive";
    if (!(alpha > 0.0 && beta > 0.0)) return "reward weights must be positive";
    if (std::abs(alpha + beta - 1.0) > 1e-9) return "alpha + beta must equal 1";
    if (!(c1 > 0.0)) return "c1 must be positive";
    if (!(gamma_scale > 0.0)) return "gamma_scale must be positive";
    if (!(sigma_min > 0.0)) return "sigma_min must be positive";
    if (!(omega1 > 0.0 && omega2 > 0.0)) return "objective weights must be positive";
    if (!(c_value > 0.0 && c_norm > 0.0)) return "gradient clips must be positive";
    if (!(eta_policy >= 0.0 && eta_reward >= 0.0)) return "learning rates must be non-negative";
    if (group_size < 2) return "group_size must be at least 2";
    if (inner_iters < 1) return "inner_iters must be at least 1";
    return "";
}

CompositeReward composite_reward(double fidelity, double quality, const GrpoConfig& cfg) {
    CompositeReward r;
    r.combined = cfg.alpha * fidelity + cfg.beta * quality;
    r.final_reward = std::clamp(r.combined, -cfg.c1, cfg.c1) * cfg.gamma_scale;
    return r;
}

std::vector<double> group_advantages(const std::vector<double>& final_rewards,
                                     double sigma_min) {
    const size_t g = final_rewards.size();
    if (g < 2) throw std::invalid_argument("group_advantages needs at least two rewards");
    double mu = 0.0;
    for (double r : final_rewards) mu += r;
    mu /= static_cast<double>(g);
    double var = 0.0;
    for (double r : final_rewards) var += (r - mu) * (r - mu);
    var /= static_cast<double>(g);
    const double sigma = std::max(std::sqrt(var + kVarianceEps), sigma_min);
    std::vector<double> adv(g);
    for (size_t i = 0; i < g; ++i) adv[i] = (final_rewards[i] - mu) / sigma;
    return adv;
}

double prob_ratio(double logp_new, double logp_old) { return std::exp(logp_new - logp_old); }

double clipped_surrogate(const std::vector<std::vector<double>>& ratios,
                         const std::vector<double>& advantages, double eps) {
    if (ratios.size() != advantages.size() || ratios.empty())
        throw std::invalid_argument("clipped_surrogate shape mismatch");
    double total = 0.0;
    for (size_t i = 0; i < ratios.size(); ++i) {
        if (ratios[i].empty()) throw std::invalid_argument("empty candidate in surrogate");
        double cand = 0.0;
        for (double r : ratios[i]) {
            const double clipped = std::clamp(r, 1.0 - eps, 1.0 + eps);
            cand += std::min(r * advantages[i], clipped * advantages[i]);
        }
        total += cand / static_cast<double>(ratios[i].size());
    }
    return total / static_cast<double>(ratios.size());
}

double kl_unbiased(const std::vector<std::vector<double>>& logp_ref,
                   const std::vector<std::vector<double>>& logp_cur) {
    if (logp_ref.size() != logp_cur.size())
        throw std::invalid_argument("kl_unbiased candidate count mismatch");
    if (logp_ref.empty()) return 0.0;
    double total = 0.0;
    for (size_t i = 0; i < logp_ref.size(); ++i) {
        if (logp_ref[i].size() != logp_cur[i].size())
            throw std::invalid_argument("kl_unbiased token count mismatch");
        if (logp_ref[i].empty()) continue;
        double cand = 0.0;
        for (size_t t = 0; t < logp_ref[i].size(); ++t) {
            const double u = std::exp(logp_ref[i][t] - logp_cur[i][t]);
            cand += u - std::log(u) - 1.0;
        }
        total += cand / static_cast<double>(logp_ref[i].size());
    }
    return total / static_cast<double>(logp_ref.size());
}

double grpo_objective(double l_clip, double kl, double omega1, double omega2) {
    return omega1 * l_clip - omega2 * kl;
}

void clip_and_normalize_grads(std::vector<double>& grad, double c_value, double c_norm) {
    for (double& g : grad) g = std::clamp(g, -c_value, c_value);
    const double norm = l2_norm(grad);
    if (norm == 0.0) return;
    const double target = std::min(norm, c_norm);
    const double scale = target / norm;
    for (double& g : grad) g *= scale;
}

// === policy evaluation ===================================================

CandidateTrace trace_candidate(const Model& model, const Vocab& vocab,
                               const std::vector<int>& context,
                               const std::vector<int>& candidate) {
    if (context.empty()) throw std::invalid_argument("trace_candidate needs a context");
    if (candidate.empty()) throw std::invalid_argument("trace_candidate needs a candidate");
    std::vector<int> full = context;
    full.insert(full.end(), candidate.begin(), candidate.end());

    KvCache cache = make_cache(model, true);
    forward_extend(model, full, cache);
    const auto& final_layer = cache.hidden[model.cfg.num_layers];

    CandidateTrace tr;
    tr.tokens = candidate;
    tr.normed.reserve(candidate.size());
    // Token t of the candidate is produced from the state one position back.
    for (size_t t = 0; t < candidate.size(); ++t)
        tr.normed.push_back(normalize_final(model, final_layer[context.size() - 1 + t]));
    tr.aggregate = normalize_final(model, final_layer.back());
    tr.text = vocab.detokenize(candidate);
    return tr;
}

double token_logp(const Model& model, const OutputAdapter* adapter,
                  const std::vector<double>& normed, int token) {
    const auto z = logits_from_normed(model, normed, adapter);
    return z[static_cast<size_t>(token)] - log_sum_exp(z);
}

GroupEval evaluate_group(const Model& model, const OutputAdapter& adapter,
                         const OutputAdapter& ref_adapter, const OutputAdapter& old_adapter,
                         const std::vector<CandidateTrace>& group,
                         const std::vector<double>& advantages, const GrpoConfig& cfg) {
    if (group.size() != advantages.size() || group.empty())
        throw std::invalid_argument("evaluate_group shape mismatch");
    const size_t d = model.cfg.model_dim;
    const size_t vocab = model.cfg.vocab_size;
    const size_t rank = adapter.rank;
    const double g_count = static_cast<double>(group.size());

    GroupEval ev;
    ev.grads.A.assign(rank * d, 0.0);
    ev.grads.B.assign(vocab * rank, 0.0);

    for (size_t i = 0; i < group.size(); ++i) {
        const CandidateTrace& tr = group[i];
        if (tr.tokens.empty()) throw std::invalid_argument("empty candidate in group");
        const double t_count = static_cast<double>(tr.tokens.size());
        const double adv = advantages[i];

        for (size_t t = 0; t < tr.tokens.size(); ++t) {
            const int y = tr.tokens[t];
            const auto& hn = tr.normed[t];
            const auto z = logits_from_normed(model, hn, &adapter);
            const double lse = log_sum_exp(z);
            const double lp_cur = z[static_cast<size_t>(y)] - lse;
            const double lp_old = token_logp(model, &old_adapter, hn, y);
            const double lp_ref = token_logp(model, &ref_adapter, hn, y);

            // Surrogate term and its log-prob derivative (0 on the clipped
            // branch: that branch is constant in the current policy).
            const double r = prob_ratio(lp_cur, lp_old);
            const double clipped = std::clamp(r, 1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip);
            const double unclipped_term = r * adv;
            const double clipped_term = clipped * adv;
            ev.l_clip += std::min(unclipped_term, clipped_term) / (g_count * t_count);
            double d_lp = 0.0;
            if (unclipped_term <= clipped_term) d_lp += cfg.omega1 * r * adv;

            // KL term u - log u - 1 and its derivative (1 - u).
            const double u = std::exp(lp_ref - lp_cur);
            ev.kl += (u - std::log(u) - 1.0) / (g_count * t_count);
            d_lp -= cfg.omega2 * (1.0 - u);

            d_lp /= g_count * t_count;

            // dlp/dz = onehot(y) - softmax(z); push through the adapter.
            std::vector<double> g_z(vocab);
            for (size_t v = 0; v < vocab; ++v) {
                const double p = std::exp(z[v] - lse);
                g_z[v] = d_lp * ((static_cast<int>(v) == y ? 1.0 : 0.0) - p);
            }
            // u_rank = A*hn; dJ/dB[v][r] += g_z[v]*u_rank[r];
            // dJ/dA[r][c] += (B^T g_z)[r]*hn[c].
            std::vector<double> u_rank(rank, 0.0);
            for (size_t rr = 0; rr < rank; ++rr)
                u_rank[rr] = kernels::dot(adapter.A.data() + rr * d, hn.data(), d);
            std::vector<double> g_u(rank, 0.0);
            for (size_t v = 0; v < vocab; ++v)
                for (size_t rr = 0; rr < rank; ++rr) g_u[rr] += adapter.B[v * rank + rr] * g_z[v];
            for (size_t v = 0; v < vocab; ++v)
                for (size_t rr = 0; rr < rank; ++rr)
                    ev.grads.B[v * rank + rr] += g_z[v] * u_rank[rr];
            for (size_t rr = 0; rr < rank; ++rr)
                for (size_t c = 0; c < d; ++c) ev.grads.A[rr * d + c] += g_u[rr] * hn[c];
        }
    }
    ev.j = grpo_objective(ev.l_clip, ev.kl, cfg.omega1, cfg.omega2);
    return ev;
}

OutputAdapter lora_init(size_t rank, size_t d, size_t vocab, Rng rng) {
    OutputAdapter a = OutputAdapter::zeros(rank, d, vocab);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (size_t i = 0; i < a.A.size(); ++i) a.A[i] = rng.sym(i) * scale;
    return a;
}

std::vector<int> sample_candidate(const Model& model, const OutputAdapter& adapter,
                                  const std::vector<int>& context, size_t len,
                                  const SamplerParams& sp, RngSequence& rng) {
    if (context.empty()) throw std::invalid_argument("sample_candidate needs a context");
    KvCache cache = make_cache(model, true);
    std::vector<int> tokens = context;
    forward_extend(model, tokens, cache);
    std::vector<int> out;
    for (size_t t = 0; t < len; ++t) {
        const auto hn =
            normalize_final(model, cache.hidden[model.cfg.num_layers].back());
        const auto z = logits_from_normed(model, hn, &adapter);
        auto probs = softmax_temperature(z, sp.temperature);
        probs = apply_sampler(probs, sp);
        const int tok = sample_index(probs, rng.u01());
        out.push_back(tok);
        tokens.push_back(tok);
        forward_extend(model, tokens, cache);
    }
    return out;
}

// === training loop =======================================================

PoragTrainer::PoragTrainer(const Model& model, const Vocab& vocab, GrpoConfig cfg,
                           uint64_t seed)
    : model_(&model),
      vocab_(&vocab),
      cfg_(std::move(cfg)),
      adapter_(lora_init(4, model.cfg.model_dim, model.cfg.vocab_size, Rng{seed, 11})),
      ref_adapter_(adapter_),
      fidelity_head_(RewardHeadParams::init(model.cfg.model_dim, Rng{seed, 21})),
      quality_head_(RewardHeadParams::init(model.cfg.model_dim, Rng{seed, 22})),
      base_checksum_(model.weight_checksum()),
      rng_(Rng{seed, 31}) {
    const std::string err = cfg_.validate();
    if (!err.empty()) throw ConfigError("grpo config: " + err);
}

StepMetrics PoragTrainer::train_step(const TrainItem& item) {
    // Context = question and retrieved documents, newline-separated.
    std::string context_text = item.question;
    for (const auto& d : item.docs) {
        context_text.push_back('\n');
        context_text += d;
    }
    context_text.push_back('\n');
    const std::vector<int> context = vocab_->tokenize(context_text);
    if (context.empty()) throw ConfigError("training item produced an empty context");

    // Sample the group under the step-start policy, then freeze it as old.
    const OutputAdapter old_adapter = adapter_;
    std::vector<CandidateTrace> group;
    group.reserve(cfg_.group_size);
    for (size_t i = 0; i < cfg_.group_size; ++i) {
        const auto cand =
            sample_candidate(*model_, old_adapter, context, candidate_len_, sampler_, rng_);
        group.push_back(trace_candidate(*model_, *vocab_, context, cand));
    }

    // Head rewards -> composite -> group advantages.
    std::vector<double> fid(cfg_.group_size), qual(cfg_.group_size), rewards(cfg_.group_size);
    for (size_t i = 0; i < cfg_.group_size; ++i) {
        fid[i] = reward_head_forward(fidelity_head_, group[i].aggregate);
        qual[i] = reward_head_forward(quality_head_, group[i].aggregate);
        rewards[i] = composite_reward(fid[i], qual[i], cfg_).final_reward;
    }
    const auto adv = group_advantages(rewards, cfg_.sigma_min);

    StepMetrics m;
    double mu = 0.0;
    for (double r : rewards) mu += r;
    mu /= static_cast<double>(rewards.size());
    double var = 0.0;
    for (double r : rewards) var += (r - mu) * (r - mu);
    var /= static_cast<double>(rewards.size());
    m.reward_mean = mu;
    m.reward_sigma = std::sqrt(var);

    // Inner policy iterations: ascend J on value-clipped, norm-capped grads.
    const size_t d = model_->cfg.model_dim;
    const size_t rank = adapter_.rank;
    for (size_t k = 0; k < cfg_.inner_iters; ++k) {
        const GroupEval ev =
            evaluate_group(*model_, adapter_, ref_adapter_, old_adapter, group, adv, cfg_);
        if (!std::isfinite(ev.j))
            throw NumericError("non-finite objective at step " + std::to_string(steps_done_) +
                               ": J=" + std::to_string(ev.j) +
                               " L_clip=" + std::to_string(ev.l_clip) +
                               " KL=" + std::to_string(ev.kl));
        std::vector<double> flat = ev.grads.A;
        flat.insert(flat.end(), ev.grads.B.begin(), ev.grads.B.end());
        clip_and_normalize_grads(flat, cfg_.c_value, cfg_.c_norm);
        m.grad_norm = l2_norm(flat);
        for (size_t i = 0; i < rank * d; ++i) adapter_.A[i] += cfg_.eta_policy * flat[i];
        for (size_t i = 0; i < adapter_.B.size(); ++i)
            adapter_.B[i] += cfg_.eta_policy * flat[rank * d + i];
        m.j = ev.j;
        m.l_clip = ev.l_clip;
        m.kl = ev.kl;
    }

    // Reward heads regress onto the measured targets and descend.
    auto update_head = [&](RewardHeadParams& head, const std::vector<double>& scores,
                           auto target_of) {
        double loss = 0.0;
        RewardHeadGrads acc;
        acc.w1.assign(head.d * head.d, 0.0);
        acc.b1.assign(head.d, 0.0);
        acc.w2.assign(head.d, 0.0);
        for (size_t i = 0; i < group.size(); ++i) {
            const double target = target_of(group[i]);
            const double diff = scores[i] - target;
            loss += diff * diff / static_cast<double>(group.size());
            const double upstream = 2.0 * diff / static_cast<double>(group.size());
            const auto g = reward_head_grads(head, group[i].aggregate, upstream);
            for (size_t j = 0; j < acc.w1.size(); ++j) acc.w1[j] += g.w1[j];
            for (size_t j = 0; j < acc.b1.size(); ++j) acc.b1[j] += g.b1[j];
            for (size_t j = 0; j < acc.w2.size(); ++j) acc.w2[j] += g.w2[j];
            acc.b2 += g.b2;
        }
        if (!std::isfinite(loss))
            throw NumericError("non-finite reward-head loss at step " +
                               std::to_string(steps_done_));
        for (size_t j = 0; j < acc.w1.size(); ++j) head.w1[j] -= cfg_.eta_reward * acc.w1[j];
        for (size_t j = 0; j < acc.b1.size(); ++j) head.b1[j] -= cfg_.eta_reward * acc.b1[j];
        for (size_t j = 0; j < acc.w2.size(); ++j) head.w2[j] -= cfg_.eta_reward * acc.w2[j];
        head.b2 -= cfg_.eta_reward * acc.b2;
        return loss;
    };
    m.fidelity_head_loss = update_head(fidelity_head_, fid, [&](const CandidateTrace& tr) {
        return 1.0 - fidelity_loss(tr.text, item.docs).loss;
    });
    m.quality_head_loss = update_head(quality_head_, qual, [&](const CandidateTrace& tr) {
        return 1.0 - quality_loss(tr.text, item.answer).loss;
    });

    // Frozen-base tripwire: nothing in this step may touch model weights.
    if (model_->weight_checksum() != base_checksum_)
        throw std::logic_error("base model weights changed during a training step");
    ++steps_done_;
    return m;
}

// === checkpoints =========================================================

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

void append_doubles(std::ofstream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_doubles(std::ifstream& in, std::vector<double>& v) {
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

nlohmann::json head_shape(const RewardHeadParams& h) {
    return {{"d", h.d}};
}

} // namespace

void save_checkpoint(const std::string& path, const OutputAdapter& adapter,
                     const RewardHeadParams& fidelity, const RewardHeadParams& quality,
                     uint64_t step) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write checkpoint: " + path);
    append_doubles(out, adapter.A);
    append_doubles(out, adapter.B);
    for (const RewardHeadParams* h : {&fidelity, &quality}) {
        append_doubles(out, h->w1);
        append_doubles(out, h->b1);
        append_doubles(out, h->w2);
        out.write(reinterpret_cast<const char*>(&h->b2), sizeof(double));
    }
    out.close();

    nlohmann::json side = {
        {"rank", adapter.rank},
        {"d", adapter.A.empty() ? 0 : adapter.A.size() / adapter.rank},
        {"vocab", adapter.B.empty() ? 0 : adapter.B.size() / adapter.rank},
        {"fidelity", head_shape(fidelity)},
        {"quality", head_shape(quality)},
        {"step", step},
    };
    std::ofstream js(path + ".json", std::ios::trunc);
    if (!js) throw ConfigError("cannot write checkpoint sidecar: " + path + ".json");
    js << side.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream js(path + ".json");
    if (!js) throw ConfigError("missing checkpoint sidecar: " + path + ".json");
    nlohmann::json side;
    js >> side;
    const size_t rank = side.at("rank").get<size_t>();
    const size_t d = side.at("d").get<size_t>();
    const size_t vocab = side.at("vocab").get<size_t>();
    const size_t head_d = side.at("fidelity").at("d").get<size_t>();
    const size_t head_d2 = side.at("quality").at("d").get<size_t>();

    Checkpoint ck;
    ck.step = side.at("step").get<uint64_t>();
    ck.adapter = OutputAdapter::zeros(rank, d, vocab);
    ck.fidelity.d = head_d;
    ck.fidelity.w1.resize(head_d * head_d);
    ck.fidelity.b1.resize(head_d);
    ck.fidelity.w2.resize(head_d);
    ck.quality.d = head_d2;
    ck.quality.w1.resize(head_d2 * head_d2);
    ck.quality.b1.resize(head_d2);
    ck.quality.w2.resize(head_d2);

    const size_t expect_doubles = rank * d + vocab * rank +
                                  (head_d * head_d + head_d + head_d + 1) +
                                  (head_d2 * head_d2 + head_d2 + head_d2 + 1);
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw ConfigError("missing checkpoint file: " + path);
    if (static_cast<size_t>(in.tellg()) != expect_doubles * sizeof(double))
        throw ConfigError("checkpoint size does not match its sidecar shapes: " + path);
    in.seekg(0);
    read_doubles(in, ck.adapter.A);
    read_doubles(in, ck.adapter.B);
    for (RewardHeadParams* h : {&ck.fidelity, &ck.quality}) {
        read_doubles(in, h->w1);
        read_doubles(in, h->b1);
        read_doubles(in, h->w2);
        in.read(reinterpret_cast<char*>(&h->b2), sizeof(double));
    }
    if (!in) throw ConfigError("truncated checkpoint: " + path);
    return ck;
}

} // namespace lab
