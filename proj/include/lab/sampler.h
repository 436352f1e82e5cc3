#pragma once
#include <vector>

namespace lab {

// Sampling knobs; also the tuple the entropy-guided decoder adapts per step.
struct SamplerParams {
    double temperature = 1.0; // > 0
    double top_p = 1.0;       // (0, 1]
    int top_k = 1 << 30;      // >= 1; defaults to "no cut"
    double min_p = 0.0;       // [0, 1]

    bool valid() const {
        return temperature > 0.0 && top_p > 0.0 && top_p <= 1.0 && top_k >= 1 &&
               min_p >= 0.0 && min_p <= 1.0;
    }
};

// Max-subtracted softmax of logits / T; sums to 1 within 1e-9.
std::vector<double> softmax_temperature(const std::vector<double>& logits, double T);

// Filters a probability vector in order: top-k cut, nucleus cut (smallest
// descending-probability prefix with cumulative mass >= top_p), then min-p
// cut (drop p < min_p * max p); renormalizes. The argmax always survives,
// so the support is never empty.
std::vector<double> apply_sampler(const std::vector<double>& probs, const SamplerParams& params);

// Inverse-CDF draw from a distribution using one uniform in [0,1).
int sample_index(const std::vector<double>& probs, double u);

} // namespace lab
