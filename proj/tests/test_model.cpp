// Forward-pass invariants: determinism, incremental==batch, causal row
// normalization, trace shapes, adapter algebra, checksum stability.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <vector>

#include "lab/errors.h"
#include "lab/kernels.h"
#include "lab/model.h"

using namespace lab;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.num_layers = 3;
    cfg.num_heads = 2;
    cfg.head_dim = 8;
    cfg.model_dim = 16;
    cfg.vocab_size = 32;
    cfg.max_seq = 64;
    cfg.seed = 2024;
    return cfg;
}

std::vector<int> ramp_tokens(size_t n, size_t vocab) {
    std::vector<int> t(n);
    for (size_t i = 0; i < n; ++i) t[i] = static_cast<int>((i * 7 + 3) % vocab);
    return t;
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

} // namespace

TEST_CASE("config validation rejects inconsistent dimensions") {
    ModelConfig cfg = tiny_config();
    CHECK(cfg.validate().empty());
    cfg.model_dim = 17;
    CHECK_FALSE(cfg.validate().empty());
    cfg = tiny_config();
    cfg.max_seq = 1;
    CHECK_FALSE(cfg.validate().empty());
    cfg = tiny_config();
    cfg.num_heads = 0;
    CHECK_FALSE(cfg.validate().empty());
    CHECK_THROWS_AS(build_model(cfg), ConfigError);
}

TEST_CASE("same seed same weights, different seed different weights") {
    auto cfg = tiny_config();
    Model a = build_model(cfg);
    Model b = build_model(cfg);
    CHECK(a.weight_checksum() == b.weight_checksum());
    CHECK(bits_equal(a.embed, b.embed));

    cfg.seed = 2025;
    Model c = build_model(cfg);
    CHECK(a.weight_checksum() != c.weight_checksum());
}

TEST_CASE("forward pass is deterministic across runs and thread modes") {
    Model m = build_model(tiny_config());
    auto toks = ramp_tokens(12, m.cfg.vocab_size);

    StepTrace t1 = forward_step(m, toks);
    StepTrace t2 = forward_step(m, toks);
    CHECK(bits_equal(t1.logits, t2.logits));

    kernels::set_parallel(false);
    StepTrace t3 = forward_step(m, toks);
    kernels::set_parallel(true);
    CHECK(bits_equal(t1.logits, t3.logits));
    for (size_t l = 0; l <= m.cfg.num_layers; ++l)
        for (size_t p = 0; p < toks.size(); ++p)
            CHECK(bits_equal(t1.hidden[l][p], t3.hidden[l][p]));
}

TEST_CASE("incremental decode equals batch forward bit for bit") {
    Model m = build_model(tiny_config());
    auto toks = ramp_tokens(10, m.cfg.vocab_size);

    StepTrace batch = forward_step(m, toks);

    KvCache cache = make_cache(m, true);
    for (size_t n = 1; n <= toks.size(); ++n) {
        std::vector<int> prefix(toks.begin(), toks.begin() + n);
        forward_extend(m, prefix, cache);
    }
    CHECK(cache.total_processed == toks.size());
    CHECK(bits_equal(batch.logits, cache.last_logits));
    for (size_t l = 0; l < m.cfg.num_layers; ++l) {
        for (size_t h = 0; h < m.cfg.num_heads; ++h) {
            const CausalMatrix& a = batch.attention[l][h];
            const CausalMatrix& b = cache.attn[l][h];
            REQUIRE(a.rows() == b.rows());
            for (size_t i = 0; i < a.rows(); ++i)
                for (size_t j = 0; j <= i; ++j) CHECK(a.at(i, j) == b.at(i, j));
        }
    }
    for (size_t l = 0; l <= m.cfg.num_layers; ++l)
        for (size_t p = 0; p < toks.size(); ++p)
            CHECK(bits_equal(batch.hidden[l][p], cache.hidden[l][p]));
}

TEST_CASE("attention rows are causal and sum to one") {
    Model m = build_model(tiny_config());
    auto toks = ramp_tokens(9, m.cfg.vocab_size);
    StepTrace t = forward_step(m, toks);

    for (size_t l = 0; l < t.L; ++l) {
        for (size_t h = 0; h < t.H; ++h) {
            const CausalMatrix& a = t.attention[l][h];
            REQUIRE(a.rows() == toks.size());
            for (size_t i = 0; i < a.rows(); ++i) {
                CHECK(a.row(i).size() == i + 1);           // strictly causal storage
                CHECK(a.at(i, i + 1) == 0.0);              // reads above diagonal are zero
                CHECK(a.row_sum(i) == doctest::Approx(1.0).epsilon(1e-6));
                for (size_t j = 0; j <= i; ++j) CHECK(a.at(i, j) >= 0.0);
            }
        }
    }
}

TEST_CASE("trace shapes match the declared layout") {
    Model m = build_model(tiny_config());
    auto toks = ramp_tokens(5, m.cfg.vocab_size);
    StepTrace t = forward_step(m, toks);

    CHECK(t.S == 5);
    CHECK(t.L == m.cfg.num_layers);
    CHECK(t.H == m.cfg.num_heads);
    CHECK(t.logits.size() == m.cfg.vocab_size);
    REQUIRE(t.hidden.size() == m.cfg.num_layers + 1);
    for (const auto& layer : t.hidden) {
        REQUIRE(layer.size() == toks.size());
        for (const auto& vec : layer) CHECK(vec.size() == m.cfg.model_dim);
    }
    REQUIRE(t.new_kv.size() == m.cfg.num_layers);
    for (const auto& kv : t.new_kv) {
        CHECK(kv.key.size() == m.cfg.model_dim);
        CHECK(kv.value.size() == m.cfg.model_dim);
    }
    for (double x : t.logits) CHECK(std::isfinite(x));

    TraceView v = t.view();
    CHECK(v.S == t.S);
    CHECK(&v.attention(0, 0) == &t.attention[0][0]);
    CHECK(v.hidden_at(1, 2) == t.hidden[1][2]);
}

TEST_CASE("input validation throws on bad tokens and overlong sequences") {
    Model m = build_model(tiny_config());
    CHECK_THROWS_AS(forward_step(m, {-1}), ConfigError);
    CHECK_THROWS_AS(forward_step(m, {static_cast<int>(m.cfg.vocab_size)}), ConfigError);
    std::vector<int> too_long(m.cfg.max_seq + 1, 0);
    CHECK_THROWS_AS(forward_step(m, too_long), ConfigError);
}

TEST_CASE("zero adapter is a no-op and nonzero adapter shifts logits") {
    Model m = build_model(tiny_config());
    auto toks = ramp_tokens(4, m.cfg.vocab_size);
    StepTrace t = forward_step(m, toks);
    const auto& h_last = t.hidden[m.cfg.num_layers].back();

    OutputAdapter zero = OutputAdapter::zeros(4, m.cfg.model_dim, m.cfg.vocab_size);
    auto base = output_logits(m, h_last);
    auto with_zero = output_logits(m, h_last, &zero);
    CHECK(bits_equal(base, with_zero));
    CHECK(bits_equal(base, t.logits));

    OutputAdapter adapter = zero;
    adapter.A[0] = 0.5;
    adapter.B[0] = 1.0;
    auto shifted = output_logits(m, h_last, &adapter);
    CHECK_FALSE(bits_equal(base, shifted));

    // Split form agrees with the one-shot helper.
    auto hn = normalize_final(m, h_last);
    CHECK(bits_equal(logits_from_normed(m, hn, &adapter), shifted));
}

TEST_CASE("key dot product counter grows quadratically when uncompressed") {
    Model m = build_model(tiny_config());
    KvCache cache = make_cache(m, false);
    auto toks = ramp_tokens(6, m.cfg.vocab_size);
    forward_extend(m, toks, cache);
    // Position p attends over p+1 keys, per layer and per head.
    uint64_t expect = 0;
    for (size_t p = 0; p < toks.size(); ++p)
        expect += (p + 1) * m.cfg.num_layers * m.cfg.num_heads;
    CHECK(cache.key_dot_products == expect);
}
