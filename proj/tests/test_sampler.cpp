// Sampling-head semantics: tempered softmax, the top-k / nucleus / min-p
// filter chain (with its argmax-survival guarantee), and inverse-CDF draws.
// Filter behaviour is validated against an independent reference written
// directly from the definitions.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "lab/rng.h"
#include "lab/sampler.h"

using namespace lab;

namespace {

// Reference filter: sort probs descending (stable on index), keep top_k,
// then the smallest descending prefix with cumulative mass >= top_p, then
// drop entries below min_p * max, always retaining the argmax; renormalize.
std::vector<double> filter_ref(std::vector<double> probs, const SamplerParams& sp) {
    const size_t n = probs.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return probs[a] > probs[b]; });

    std::vector<char> keep(n, 0);
    const size_t k = std::min<size_t>(sp.top_k, n);
    for (size_t r = 0; r < k; ++r) keep[order[r]] = 1;

    double cum = 0.0;
    bool reached = false;
    for (size_t r = 0; r < n; ++r) {
        if (!keep[order[r]]) continue;
        if (reached) {
            keep[order[r]] = 0;
        } else {
            cum += probs[order[r]];
            if (cum >= sp.top_p) reached = true;
        }
    }

    double max_kept = 0.0;
    for (size_t i = 0; i < n; ++i)
        if (keep[i]) max_kept = std::max(max_kept, probs[i]);
    for (size_t i = 0; i < n; ++i)
        if (keep[i] && probs[i] < sp.min_p * max_kept) keep[i] = 0;

    keep[order[0]] = 1;

    double total = 0.0;
    for (size_t i = 0; i < n; ++i)
        if (keep[i]) total += probs[i];
    std::vector<double> out(n, 0.0);
    for (size_t i = 0; i < n; ++i)
        if (keep[i]) out[i] = probs[i] / total;
    return out;
}

} // namespace

TEST_CASE("softmax_temperature normalizes and sharpens as T drops") {
    std::vector<double> logits = {2.0, 1.0, 0.0, -1.0};
    auto p1 = softmax_temperature(logits, 1.0);
    auto p_cold = softmax_temperature(logits, 0.25);
    auto p_hot = softmax_temperature(logits, 4.0);

    for (const auto& p : {p1, p_cold, p_hot}) {
        double sum = std::accumulate(p.begin(), p.end(), 0.0);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(p_cold[0] > p1[0]);
    CHECK(p_hot[0] < p1[0]);

    // Max subtraction keeps extreme logits finite.
    auto extreme = softmax_temperature({1e4, 0.0}, 1.0);
    CHECK(std::isfinite(extreme[0]));
    CHECK(extreme[0] == doctest::Approx(1.0));
}

TEST_CASE("softmax_temperature rejects bad input") {
    CHECK_THROWS(softmax_temperature({}, 1.0));
    CHECK_THROWS(softmax_temperature({1.0}, 0.0));
    CHECK_THROWS(softmax_temperature({1.0}, -2.0));
    CHECK_THROWS(softmax_temperature({std::nan("")}, 1.0));
}

TEST_CASE("top_k keeps exactly the k most probable tokens") {
    std::vector<double> probs = {0.4, 0.3, 0.2, 0.1};
    SamplerParams sp;
    sp.top_k = 2;
    auto out = apply_sampler(probs, sp);
    CHECK(out[0] == doctest::Approx(0.4 / 0.7));
    CHECK(out[1] == doctest::Approx(0.3 / 0.7));
    CHECK(out[2] == 0.0);
    CHECK(out[3] == 0.0);
}

TEST_CASE("nucleus keeps the smallest prefix reaching top_p") {
    std::vector<double> probs = {0.5, 0.3, 0.15, 0.05};
    SamplerParams sp;
    sp.top_p = 0.7;
    auto out = apply_sampler(probs, sp);
    // 0.5 alone < 0.7, 0.5+0.3 >= 0.7 -> keep exactly two.
    CHECK(out[0] == doctest::Approx(0.5 / 0.8));
    CHECK(out[1] == doctest::Approx(0.3 / 0.8));
    CHECK(out[2] == 0.0);
    CHECK(out[3] == 0.0);
}

TEST_CASE("min_p drops tokens far below the surviving maximum") {
    std::vector<double> probs = {0.6, 0.25, 0.1, 0.05};
    SamplerParams sp;
    sp.min_p = 0.3; // threshold 0.18
    auto out = apply_sampler(probs, sp);
    CHECK(out[0] > 0.0);
    CHECK(out[1] > 0.0);
    CHECK(out[2] == 0.0);
    CHECK(out[3] == 0.0);
    CHECK(out[0] + out[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("argmax always survives even under hostile settings") {
    std::vector<double> probs = {0.9, 0.1};
    SamplerParams sp;
    sp.top_p = 1e-12;
    sp.min_p = 1.0;
    sp.top_k = 1;
    auto out = apply_sampler(probs, sp);
    CHECK(out[0] == doctest::Approx(1.0));
    CHECK(out[1] == 0.0);
}

TEST_CASE("filter chain matches the reference across random cases") {
    Rng rng{77, 0};
    for (uint64_t trial = 0; trial < 200; ++trial) {
        Rng tr = rng.fork(trial);
        const size_t n = 2 + tr.bits(0) % 12;
        std::vector<double> logits(n);
        for (size_t i = 0; i < n; ++i) logits[i] = 4.0 * tr.sym(100 + i);
        auto probs = softmax_temperature(logits, 1.0);

        SamplerParams sp;
        sp.top_k = 1 + tr.bits(1) % n;
        sp.top_p = 0.2 + 0.8 * tr.u01(2);
        sp.min_p = 0.5 * tr.u01(3);

        auto got = apply_sampler(probs, sp);
        auto ref = filter_ref(probs, sp);
        REQUIRE(got.size() == ref.size());
        for (size_t i = 0; i < n; ++i)
            CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-12));

        double sum = std::accumulate(got.begin(), got.end(), 0.0);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("sample_index walks the inverse CDF") {
    std::vector<double> probs = {0.2, 0.0, 0.5, 0.3};
    CHECK(sample_index(probs, 0.0) == 0);
    CHECK(sample_index(probs, 0.19) == 0);
    CHECK(sample_index(probs, 0.21) == 2);
    CHECK(sample_index(probs, 0.69) == 2);
    CHECK(sample_index(probs, 0.71) == 3);
    CHECK(sample_index(probs, 0.999999) == 3);
    // u at (or past) the total mass lands on the last nonzero entry.
    CHECK(sample_index(probs, 1.0) == 3);
}

TEST_CASE("sampler params validate their ranges") {
    SamplerParams ok;
    CHECK(ok.valid());
    SamplerParams bad = ok;
    bad.temperature = 0.0;
    CHECK_FALSE(bad.valid());
    bad = ok;
    bad.top_p = 0.0;
    CHECK_FALSE(bad.valid());
    bad = ok;
    bad.top_p = 1.5;
    CHECK_FALSE(bad.valid());
    bad = ok;
    bad.min_p = -0.1;
    CHECK_FALSE(bad.valid());
    bad = ok;
    bad.top_k = 0;
    CHECK_FALSE(bad.valid());
}
