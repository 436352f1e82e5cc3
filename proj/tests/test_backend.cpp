// Backend contracts: toy-decode determinism, repetition controls, scripted
// doubles, cassette record/replay, and the HTTP client against a local server.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <mutex>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "lab/backend.h"
#include "lab/errors.h"
#include "lab/model.h"
#include "lab/remote_backend.h"

using namespace lab;
using nlohmann::json;

namespace {

ModelConfig small_config() {
    ModelConfig mc;
    mc.num_layers = 2;
    mc.num_heads = 2;
    mc.head_dim = 8;
    mc.model_dim = 16;
    mc.vocab_size = 256;
    mc.max_seq = 128;
    mc.seed = 99;
    return mc;
}

GenRequest user_request(const std::string& text) {
    GenRequest req;
    req.messages = {{"user", text}};
    req.max_tokens = 6;
    req.seed = 7;
    return req;
}

// Local chat-completions server for the HTTP client tests.
struct TestServer {
    httplib::Server svr;
    std::thread worker;
    int port = 0;

    explicit TestServer(httplib::Server::Handler handler) {
        svr.Post("/v1/chat/completions", std::move(handler));
        port = svr.bind_to_any_port("127.0.0.1");
        REQUIRE(port > 0);
        worker = std::thread([this] { svr.listen_after_bind(); });
        while (!svr.is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(1));
    }
    ~TestServer() {
        svr.stop();
        worker.join();
    }
    std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port); }
};

RemoteConfig quick_remote(const std::string& endpoint) {
    RemoteConfig cfg;
    cfg.endpoint = endpoint;
    cfg.model_name = "toy-remote";
    cfg.backoff_initial_ms = 0;
    return cfg;
}

} // namespace

// === request plumbing ====================================================

TEST_CASE("request validation") {
    GenRequest req = user_request("hello");
    CHECK(req.validate().empty());
    req.messages.push_back({"narrator", "nope"});
    CHECK(!req.validate().empty());

    req = user_request("hello");
    req.sampler.temperature = 0.0;
    CHECK(!req.validate().empty());
    req = user_request("hello");
    req.max_tokens = 0;
    CHECK(!req.validate().empty());
    req = user_request("hello");
    req.repetition_penalty = 0.5;
    CHECK(!req.validate().empty());
}

TEST_CASE("message flattening is the fixed chat template") {
    CHECK(flatten_messages({{"system", "be brief"}, {"user", "hi"}}) ==
          "system: be brief\nuser: hi\nassistant:");
    CHECK(flatten_messages({}) == "assistant:");
}

// === repetition controls =================================================

TEST_CASE("repetition penalty rescales seen logits only") {
    std::vector<double> logits = {1.0, -1.0, 0.5};
    apply_repetition_controls(logits, {0, 1}, 2.0, 0);
    CHECK(logits[0] == doctest::Approx(0.5));  // positive: divided
    CHECK(logits[1] == doctest::Approx(-2.0)); // negative: multiplied
    CHECK(logits[2] == doctest::Approx(0.5));  // unseen: untouched
}

TEST_CASE("no-repeat n-gram bans completing tokens") {
    // History 1 2 3 1, tail context {1}: only the bigram 1->2 recurs.
    std::vector<double> logits(5, 0.0);
    apply_repetition_controls(logits, {1, 2, 3, 1}, 1.0, 2);
    CHECK(logits[2] == -1e30);
    CHECK(logits[1] == 0.0);
    CHECK(logits[3] == 0.0);

    // n=1 bans every seen token.
    std::vector<double> l2(4, 1.0);
    apply_repetition_controls(l2, {0, 2}, 1.0, 1);
    CHECK(l2[0] == -1e30);
    CHECK(l2[1] == 1.0);
    CHECK(l2[2] == -1e30);

    // Too little history: no-op.
    std::vector<double> l3(4, 1.0);
    apply_repetition_controls(l3, {1}, 1.0, 3);
    CHECK(l3 == std::vector<double>(4, 1.0));
}

// === toy backend =========================================================

TEST_CASE("toy backend is deterministic and seed-sensitive") {
    Model model = build_model(small_config());
    ToyBackend be(model, Vocab::bytes_only());

    GenRequest req = user_request("tell me something");
    req.sampler.temperature = 1.2;
    const auto r1 = be.generate(req);
    const auto r2 = be.generate(req);
    CHECK(r1.text == r2.text);
    CHECK(r1.finish_reason == "length");

    req.seed = 8;
    const auto r3 = be.generate(req);
    CHECK(r3.text != r1.text); // 6 tokens over 256 symbols: collision is negligible
}

TEST_CASE("max_tokens bounds the generation exactly") {
    Model model = build_model(small_config());
    ToyBackend be(model, Vocab::bytes_only());
    GenRequest req = user_request("x");
    req.max_tokens = 1;
    req.want_introspection = true;
    const auto r = be.generate(req);
    CHECK(r.tokens.size() == 1);
    CHECK(r.text.size() == 1); // byte vocab: one token, one byte

    req.max_tokens = 200; // prompt + 200 > max_seq 128
    CHECK_THROWS_AS(be.generate(req), BackendError);
}

TEST_CASE("introspection fields appear exactly when requested") {
    Model model = build_model(small_config());
    ToyBackend be(model, Vocab::bytes_only());
    GenRequest req = user_request("probe");
    req.max_tokens = 4;

    const auto plain = be.generate(req);
    CHECK(plain.tokens.empty());
    CHECK(!plain.final_state.has_value());

    req.want_introspection = true;
    const auto full = be.generate(req);
    REQUIRE(full.tokens.size() == 4);
    for (const auto& tok : full.tokens) {
        CHECK(tok.logits.size() == 256);
        CHECK(tok.p1 >= tok.p2);
        CHECK(tok.p2 >= 0.0);
        CHECK(tok.p1 <= 1.0);
    }
    REQUIRE(full.final_state.has_value());
    const StepTrace& st = *full.final_state;
    CHECK(st.L == 2);
    CHECK(st.H == 2);
    CHECK(st.attention[1][0].rows() == st.S);
    CHECK(st.hidden.size() == 3);
    CHECK(st.logits.size() == 256);

    // Both variants decode the same text.
    CHECK(full.text == plain.text);
}

TEST_CASE("greedy sampling picks the argmax of the snapshot logits") {
    Model model = build_model(small_config());
    ToyBackend be(model, Vocab::bytes_only());
    GenRequest req = user_request("greedy");
    req.sampler.top_k = 1;
    req.max_tokens = 5;
    req.want_introspection = true;
    const auto r = be.generate(req);
    for (const auto& tok : r.tokens) {
        const auto it = std::max_element(tok.logits.begin(), tok.logits.end());
        CHECK(tok.id == static_cast<int>(it - tok.logits.begin()));
    }
}

TEST_CASE("concurrent generate calls match serial results") {
    Model model = build_model(small_config());
    ToyBackend be(model, Vocab::bytes_only());
    GenRequest a = user_request("left"), b = user_request("right");
    const std::string sa = be.generate(a).text, sb = be.generate(b).text;

    std::string ta, tb;
    std::thread t1([&] { ta = be.generate(a).text; });
    std::thread t2([&] { tb = be.generate(b).text; });
    t1.join();
    t2.join();
    CHECK(ta == sa);
    CHECK(tb == sb);
}

// === scripted backend ====================================================

TEST_CASE("scripted backend replies in order and logs requests") {
    ScriptedBackend be({"first", "second"});
    GenRequest req = user_request("q");
    CHECK(be.generate(req).text == "first");
    CHECK(be.generate(req).text == "second");
    CHECK(be.calls() == 2);
    CHECK(be.log()[0].messages[0].content == "q");
    CHECK_THROWS_AS(be.generate(req), BackendError); // script exhausted

    req.want_introspection = true;
    CHECK_THROWS_AS(be.generate(req), CapabilityError);

    ScriptedBackend fn([](const GenRequest& r, size_t i) {
        return r.messages[0].content + "#" + std::to_string(i);
    });
    CHECK(fn.generate(user_request("a")).text == "a#0");
    CHECK(fn.generate(user_request("b")).text == "b#1");
}

// === cassettes ===========================================================

TEST_CASE("cassette round-trips a transcript") {
    const std::string path = "/tmp/lab_cassette_test.jsonl";
    GenRequest q1 = user_request("one");
    GenRequest q2 = user_request("two");
    q2.sampler.temperature = 0.5;

    {
        ScriptedBackend inner({"alpha", "beta"});
        CassetteRecorder rec(inner, path);
        CHECK(rec.generate(q1).text == "alpha");
        CHECK(rec.generate(q2).text == "beta");
        GenRequest introspect = q1;
        introspect.want_introspection = true;
        CHECK_THROWS_AS(rec.generate(introspect), CapabilityError);
    }

    CassetteReplay replay(path);
    CHECK(replay.remaining() == 2);
    const auto r1 = replay.generate(q1);
    CHECK(r1.text == "alpha");
    CHECK(r1.finish_reason == "stop");
    CHECK(replay.generate(q2).text == "beta");
    CHECK_THROWS_AS(replay.generate(q1), BackendError); // exhausted

    CassetteReplay strict(path);
    GenRequest other = q1;
    other.seed = 999; // differs from the recording
    CHECK_THROWS_AS(strict.generate(other), BackendError);

    std::remove(path.c_str());
    CHECK_THROWS_AS(CassetteReplay("/tmp/no_such_cassette.jsonl"), ConfigError);
}

TEST_CASE("canonical request serialization is stable and discriminating") {
    GenRequest a = user_request("same");
    GenRequest b = user_request("same");
    CHECK(canonical_request_json(a) == canonical_request_json(b));
    b.no_repeat_ngram = 3;
    CHECK(canonical_request_json(a) != canonical_request_json(b));
}

// === remote backend ======================================================

TEST_CASE("remote backend extracts text from a well-formed response") {
    std::mutex mu;
    std::vector<std::string> bodies;
    TestServer server([&](const httplib::Request& rq, httplib::Response& rs) {
        {
            std::lock_guard<std::mutex> lock(mu);
            bodies.push_back(rq.body);
        }
        json reply = {{"choices",
                       {{{"message", {{"content", "remote says hi"}}},
                         {"finish_reason", "stop"}}}}};
        rs.set_content(reply.dump(), "application/json");
    });

    RemoteConfig cfg = quick_remote(server.endpoint());
    cfg.api_token = "sec";
    RemoteBackend be(cfg);
    GenRequest req = user_request("ping");
    const auto r = be.generate(req);
    CHECK(r.text == "remote says hi");
    CHECK(r.finish_reason == "stop");
    CHECK(be.last_attempts() == 1);

    // Exactly the portable fields go on the wire.
    REQUIRE(bodies.size() == 1);
    const json sent = json::parse(bodies[0]);
    CHECK(sent.size() == 6);
    CHECK(sent["model"] == "toy-remote");
    CHECK(sent["messages"][0]["content"] == "ping");
    CHECK(sent["temperature"] == req.sampler.temperature);
    CHECK(sent["top_p"] == req.sampler.top_p);
    CHECK(sent["max_tokens"] == req.max_tokens);
    CHECK(sent["seed"] == req.seed);
}

TEST_CASE("transient 5xx retries then succeeds") {
    std::atomic<int> hits{0};
    TestServer server([&](const httplib::Request&, httplib::Response& rs) {
        if (++hits <= 2) {
            rs.status = 503;
            rs.set_content("overloaded", "text/plain");
            return;
        }
        json reply = {{"choices",
                       {{{"message", {{"content", "third time lucky"}}},
                         {"finish_reason", "stop"}}}}};
        rs.set_content(reply.dump(), "application/json");
    });

    RemoteBackend be(quick_remote(server.endpoint()));
    const auto r = be.generate(user_request("retry me"));
    CHECK(r.text == "third time lucky");
    CHECK(hits.load() == 3);
    CHECK(be.last_attempts() == 3);
}

TEST_CASE("retries exhaust on persistent 5xx") {
    std::atomic<int> hits{0};
    TestServer server([&](const httplib::Request&, httplib::Response& rs) {
        ++hits;
        rs.status = 500;
    });
    RemoteBackend be(quick_remote(server.endpoint()));
    CHECK_THROWS_AS(be.generate(user_request("doomed")), BackendError);
    CHECK(hits.load() == 3); // default attempt budget
}

TEST_CASE("4xx surfaces immediately without retry") {
    std::atomic<int> hits{0};
    TestServer server([&](const httplib::Request&, httplib::Response& rs) {
        ++hits;
        rs.status = 401;
        rs.set_content("bad token", "text/plain");
    });
    RemoteBackend be(quick_remote(server.endpoint()));
    CHECK_THROWS_AS(be.generate(user_request("denied")), BackendError);
    CHECK(hits.load() == 1);
}

TEST_CASE("malformed response bodies are rejected") {
    TestServer server([&](const httplib::Request&, httplib::Response& rs) {
        rs.set_content("{\"choices\": []}", "application/json");
    });
    RemoteBackend be(quick_remote(server.endpoint()));
    CHECK_THROWS_AS(be.generate(user_request("empty")), BackendError);
}

TEST_CASE("remote configuration is validated up front") {
    CHECK_THROWS_AS(RemoteBackend(RemoteConfig{}), ConfigError);

    RemoteConfig cfg = quick_remote("http://127.0.0.1:1");
    RemoteBackend be(cfg);
    GenRequest req = user_request("x");
    req.want_introspection = true;
    CHECK_THROWS_AS(be.generate(req), CapabilityError); // checked before any I/O

    setenv("LAB_LM_ENDPOINT", "http://example.test:9", 1);
    setenv("LAB_LM_TOKEN", "tkn", 1);
    setenv("LAB_LM_MODEL", "m1", 1);
    const RemoteConfig env = RemoteConfig::from_env();
    CHECK(env.endpoint == "http://example.test:9");
    CHECK(env.api_token == "tkn");
    CHECK(env.model_name == "m1");
}

TEST_CASE("transport failure to a closed port retries then fails") {
    RemoteConfig cfg = quick_remote("http://127.0.0.1:9"); // discard port: nothing listens
    cfg.max_attempts = 2;
    RemoteBackend be(cfg);
    CHECK_THROWS_AS(be.generate(user_request("void")), BackendError);
    CHECK(be.last_attempts() == 2);
}
