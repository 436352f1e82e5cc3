#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "lab/model.h"
#include "lab/rng.h"
#include "lab/sampler.h"
#include "lab/vocab.h"

namespace lab {

// Group-relative policy optimization over the frozen toy model: dual reward
// heads score sampled candidate groups, advantages are group-normalized, and
// the output-head adapter ascends a clipped surrogate with an unbiased KL
// penalty. Only the adapter and the heads ever move.

// === reward heads ========================================================

// f(h) = W2 . tanh(W1 h + b1) + b2, one head each for fidelity and quality.
struct RewardHeadParams {
    size_t d = 0;
    std::vector<double> w1; // [d][d] row-major
    std::vector<double> b1; // [d]
    std::vector<double> w2; // [d]
    double b2 = 0.0;

    static RewardHeadParams init(size_t d, Rng rng);
};

double reward_head_forward(const RewardHeadParams& p, const std::vector<double>& h);

struct RewardHeadGrads {
    std::vector<double> w1, b1, w2;
    double b2 = 0.0;
};

// Gradient of upstream * f(h) with respect to every head parameter.
RewardHeadGrads reward_head_grads(const RewardHeadParams& p, const std::vector<double>& h,
                                  double upstream);

// === GRPO math ===========================================================

struct GrpoConfig {
    double eps_clip = 0.2;
    double alpha = 0.7; // fidelity weight
    double beta = 0.3;  // quality weight
    double c1 = 10.0;   // reward winsorization bound
    double gamma_scale = 1.0;
    double sigma_min = 0.1;
    double omega1 = 100.0; // surrogate weight
    double omega2 = 0.1;   // KL weight
    double c_value = 3.0;  // elementwise gradient clip
    double c_norm = 1.0;   // gradient norm cap
    double eta_policy = 5e-6;
    double eta_reward = 5e-5;
    size_t group_size = 4;
    size_t inner_iters = 1;

    std::string validate() const; // empty when all invariants hold
};

struct CompositeReward {
    double combined = 0.0;     // alpha*fidelity + beta*quality
    double final_reward = 0.0; // clip(combined, +-c1) * gamma_scale
};
CompositeReward composite_reward(double fidelity, double quality, const GrpoConfig& cfg);

// (R_i - mean) / max(sqrt(var + eps), sigma_min), population statistics.
std::vector<double> group_advantages(const std::vector<double>& final_rewards,
                                     double sigma_min);

double prob_ratio(double logp_new, double logp_old);

// (1/G) sum_i (1/|y_i|) sum_t min(r*A, clip(r, 1-eps, 1+eps)*A).
double clipped_surrogate(const std::vector<std::vector<double>>& ratios,
                         const std::vector<double>& advantages, double eps);

// Mean over tokens then candidates of u - log u - 1, u = exp(ref - cur).
double kl_unbiased(const std::vector<std::vector<double>>& logp_ref,
                   const std::vector<std::vector<double>>& logp_cur);

double grpo_objective(double l_clip, double kl, double omega1, double omega2);

// Elementwise clip to [-c_value, c_value], then rescale so the L2 norm is
// min(current, c_norm). Zero vectors pass through.
void clip_and_normalize_grads(std::vector<double>& grad, double c_value, double c_norm);

// === policy evaluation ===================================================

// Hidden states are adapter-independent, so each candidate is forwarded
// once; log-probs under any adapter reuse the same normalized states.
struct CandidateTrace {
    std::vector<int> tokens;                 // candidate tokens only
    std::vector<std::vector<double>> normed; // [T][d], producer state per token
    std::vector<double> aggregate;           // [d], last-token state for the heads
    std::string text;
};

CandidateTrace trace_candidate(const Model& model, const Vocab& vocab,
                               const std::vector<int>& context,
                               const std::vector<int>& candidate);

// log softmax(Wout*hn + B(A*hn))[token].
double token_logp(const Model& model, const OutputAdapter* adapter,
                  const std::vector<double>& normed, int token);

struct AdapterGrads {
    std::vector<double> A; // same layout as OutputAdapter::A
    std::vector<double> B;
};

// Objective value and analytic adapter gradient for one candidate group.
// Exposed so the finite-difference harness can drive it directly.
struct GroupEval {
    double l_clip = 0.0;
    double kl = 0.0;
    double j = 0.0;
    AdapterGrads grads;
};
GroupEval evaluate_group(const Model& model, const OutputAdapter& adapter,
                         const OutputAdapter& ref_adapter, const OutputAdapter& old_adapter,
                         const std::vector<CandidateTrace>& group,
                         const std::vector<double>& advantages, const GrpoConfig& cfg);

// LoRA-style start: A random, B zero, so the initial policy equals the base
// model but gradient still flows into B (an all-zero pair is a stationary
// point of the bilinear head).
OutputAdapter lora_init(size_t rank, size_t d, size_t vocab, Rng rng);

// Samples `len` tokens autoregressively under the given adapter.
std::vector<int> sample_candidate(const Model& model, const OutputAdapter& adapter,
                                  const std::vector<int>& context, size_t len,
                                  const SamplerParams& sp, RngSequence& rng);

// === training loop =======================================================

struct TrainItem {
    std::string question;
    std::vector<std::string> docs;
    std::string answer;
};

struct StepMetrics {
    double j = 0.0;
    double l_clip = 0.0;
    double kl = 0.0;
    double reward_mean = 0.0;
    double reward_sigma = 0.0;
    double fidelity_head_loss = 0.0;
    double quality_head_loss = 0.0;
    double grad_norm = 0.0; // post-clip policy gradient norm
};

class PoragTrainer {
public:
    PoragTrainer(const Model& model, const Vocab& vocab, GrpoConfig cfg, uint64_t seed);

    // One full group step: sample G candidates, score them with the heads,
    // run the inner policy iterations, then regress the heads onto their
    // metric targets. Throws NumericError on a non-finite objective.
    StepMetrics train_step(const TrainItem& item);

    const OutputAdapter& adapter() const { return adapter_; }
    OutputAdapter& adapter() { return adapter_; }
    const RewardHeadParams& fidelity_head() const { return fidelity_head_; }
    RewardHeadParams& fidelity_head() { return fidelity_head_; }
    const RewardHeadParams& quality_head() const { return quality_head_; }
    RewardHeadParams& quality_head() { return quality_head_; }
    const GrpoConfig& config() const { return cfg_; }
    SamplerParams& sampler() { return sampler_; }
    size_t& candidate_len() { return candidate_len_; }
    uint64_t steps_done() const { return steps_done_; }
    void set_steps_done(uint64_t n) { steps_done_ = n; }

private:
    const Model* model_;
    const Vocab* vocab_;
    GrpoConfig cfg_;
    SamplerParams sampler_;
    size_t candidate_len_ = 8;
    OutputAdapter adapter_;
    OutputAdapter ref_adapter_;
    RewardHeadParams fidelity_head_;
    RewardHeadParams quality_head_;
    uint64_t base_checksum_ = 0;
    uint64_t steps_done_ = 0;
    RngSequence rng_;
};

// === checkpoints =========================================================

// Flat little-endian 64-bit floats plus a JSON sidecar (path + ".json")
// recording shapes and the step counter; loading validates both.
void save_checkpoint(const std::string& path, const OutputAdapter& adapter,
                     const RewardHeadParams& fidelity, const RewardHeadParams& quality,
                     uint64_t step);

struct Checkpoint {
    OutputAdapter adapter;
    RewardHeadParams fidelity;
    RewardHeadParams quality;
    uint64_t step = 0;
};
Checkpoint load_checkpoint(const std::string& path);

} // namespace lab
