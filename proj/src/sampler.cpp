#include "lab/sampler.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lab {

std::vector<double> softmax_temperature(const std::vector<double>& logits, double T) {
    if (logits.empty()) throw std::invalid_argument("softmax of empty vector");
    if (!(T > 0.0)) throw std::invalid_argument("temperature must be positive");
    for (double z : logits)
        if (!std::isfinite(z)) throw std::invalid_argument("non-finite logit");
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp((logits[i] - mx) / T);
        sum += p[i];
    }
    for (double& x : p) x /= sum;
    return p;
}

std::vector<double> apply_sampler(const std::vector<double>& probs, const SamplerParams& params) {
    if (probs.empty()) throw std::invalid_argument("apply_sampler on empty vector");
    const size_t n = probs.size();

    // Indices in descending probability; stable so equal probabilities keep
    // their id order and the cut is deterministic.
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return probs[a] > probs[b]; });

    std::vector<char> keep(n, 0);

    // 1) top-k cut.
    const size_t k = std::min<size_t>(static_cast<size_t>(std::max(params.top_k, 1)), n);
    for (size_t r = 0; r < k; ++r) keep[order[r]] = 1;

    // 2) nucleus cut: smallest prefix of the descending survivors whose
    //    cumulative mass reaches top_p.
    double cum = 0.0;
    bool reached = false;
    for (size_t r = 0; r < n; ++r) {
        if (!keep[order[r]]) continue;
        if (reached) {
            keep[order[r]] = 0;
            continue;
        }
        cum += probs[order[r]];
        if (cum >= params.top_p) reached = true;
    }

    // 3) min-p cut relative to the maximum surviving probability.
    const double mx = probs[order[0]]; // argmax always survives cuts 1-2
    const double floor_p = params.min_p * mx;
    for (size_t i = 0; i < n; ++i)
        if (keep[i] && probs[i] < floor_p) keep[i] = 0;
    keep[order[0]] = 1;

    std::vector<double> out(n, 0.0);
    double mass = 0.0;
    for (size_t i = 0; i < n; ++i)
        if (keep[i]) mass += probs[i];
    for (size_t i = 0; i < n; ++i)
        if (keep[i]) out[i] = probs[i] / mass;
    return out;
}

int sample_index(const std::vector<double>& probs, double u) {
    double cum = 0.0;
    int last = 0;
    for (size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        cum += probs[i];
        last = static_cast<int>(i);
        if (u < cum) return last;
    }
    return last;
}

} // namespace lab
