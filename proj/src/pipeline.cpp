// Run orchestration: the instrumented decode loop and the CLI-facing ops.
#include "lab/pipeline.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>

#include "lab/atlas.h"
#include "lab/decoders.h"
#include "lab/errors.h"
#include "lab/porag.h"
#include "lab/remote_backend.h"
#include "lab/text_metrics.h"

namespace lab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> read_word_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open word list: " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

// Top-2 of the temperature-1 softmax, matching the plain backend's
// per-token introspection record bit for bit.
std::pair<double, double> top_two(const std::vector<double>& probs) {
    double p1 = 0.0, p2 = 0.0;
    for (double x : probs) {
        if (x > p1) {
            p2 = p1;
            p1 = x;
        } else if (x > p2) {
            p2 = x;
        }
    }
    return {p1, p2};
}

} // namespace

std::string dump_json(const json& j) {
    return j.dump(2, ' ', false, json::error_handler_t::replace) + "\n";
}

// === run context ==========================================================

RunContext make_run_context(RunConfig cfg) {
    if (const auto err = cfg.validate(); !err.empty()) throw ConfigError("config: " + err);

    RunContext ctx;
    Corpus corpus;
    // Single-character words are skipped: they already exist as byte tokens.
    std::set<std::string> uniq;
    const auto add_word = [&uniq](const std::string& w) {
        if (w.size() >= 2) uniq.insert(w);
    };
    if (!cfg.retrieval.corpus.empty()) {
        corpus = ingest_corpus(cfg.retrieval.corpus);
        for (const auto& d : corpus.docs) {
            for (const auto& w : word_tokens(d.title)) add_word(w);
            for (const auto& w : word_tokens(d.text)) add_word(w);
        }
    }
    std::vector<std::string> stopwords;
    if (!cfg.atlas.stopwords.empty()) {
        stopwords = read_word_lines(cfg.atlas.stopwords);
        // Stopwords join the vocabulary too, so prompts tokenize them as
        // single flagged words rather than opaque byte runs.
        for (const auto& w : stopwords) add_word(w);
    }

    const std::vector<std::string> words(uniq.begin(), uniq.end());
    ctx.vocab = words.empty() ? Vocab::bytes_only() : Vocab::with_words(words, stopwords);

    if (cfg.model.vocab_size == 0) cfg.model.vocab_size = ctx.vocab.size();
    if (const auto err = cfg.model.validate(); !err.empty())
        throw ConfigError("config: model: " + err);
    ctx.model = build_model(cfg.model);

    if (!corpus.docs.empty()) {
        ctx.index = Index::build(corpus);
        ctx.has_index = true;
    }
    ctx.cfg = std::move(cfg);
    return ctx;
}

// === instrumented decode loop =============================================

PipelineBackend::PipelineBackend(const RunContext& ctx, RunLog* log) : ctx_(&ctx), log_(log) {}

GenResponse PipelineBackend::generate(const GenRequest& req) {
    if (const auto err = req.validate(); !err.empty()) throw ConfigError("bad request: " + err);

    const Model& model = ctx_->model;
    const Vocab& vocab = ctx_->vocab;
    const AtlasConfig& gate = ctx_->cfg.atlas.gate;
    const bool atlas_on = ctx_->cfg.atlas.enabled;
    const bool critic_on = ctx_->cfg.critic.enabled;
    const size_t generation = log_ ? log_->generations : 0;

    std::vector<int> ids = vocab.tokenize(flatten_messages(req.messages));
    const size_t prompt_len = ids.size();
    if (prompt_len + req.max_tokens > model.cfg.max_seq)
        throw BackendError("prompt plus max_tokens exceeds the model context window");

    KvCache cache = make_cache(model, req.want_introspection || atlas_on || critic_on);
    forward_extend(model, ids, cache);

    CriticState cstate;
    cstate.cfg = ctx_->cfg.critic.compression;
    double c_current = 0.0; // retrievals performed in this generation

    GenResponse resp;
    std::vector<int> generated;
    RngSequence rng(Rng{req.seed, kDecodeSampleStream});
    for (size_t t = 0; t < req.max_tokens; ++t) {
        std::vector<double> logits = cache.last_logits;
        apply_repetition_controls(logits, ids, req.repetition_penalty, req.no_repeat_ngram);

        const auto probs1 = softmax_temperature(logits, 1.0);
        const auto [p1, p2] = top_two(probs1);
        auto probs = softmax_temperature(logits, req.sampler.temperature);
        probs = apply_sampler(probs, req.sampler);
        const int id = sample_index(probs, rng.u01());

        if (req.want_introspection) {
            TokenInfo info;
            info.id = id;
            info.p1 = p1;
            info.p2 = p2;
            info.logits = std::move(logits);
            resp.tokens.push_back(std::move(info));
        }
        const double p_i = probs1[static_cast<size_t>(id)];
        ids.push_back(id);
        generated.push_back(id);
        forward_extend(model, ids, cache);

        if (critic_on && critic_step(cache, cstate) && log_) {
            const CompressionEvent& ev = cstate.stats.events.back();
            log_->critic_events.push_back({{"generation", generation},
                                           {"step", ev.step},
                                           {"n_before", ev.n_before},
                                           {"n_after", ev.n_after}});
        }

        if (atlas_on) {
            const size_t pos = ids.size() - 1;
            const int s_i = semantic_filter(vocab, id);
            const bool pre = relevance_precheck(p_i, gate.tau_p, s_i);
            json decision = {{"generation", generation}, {"pos", pos},  {"token", id},
                             {"p", p_i},                 {"s", s_i},    {"precheck", pre},
                             {"triggered", false}};
            if (pre) {
                const TraceView tv = cache.view();
                const MlagBreakdown mb = mlag_score(tv, pos, p_i, s_i, gate, c_current);
                decision["gradient"] = mb.gradient;
                decision["density"] = mb.density;
                decision["scaling"] = mb.scaling;
                decision["score"] = mb.score;
                if (mb.score > gate.theta) {
                    decision["triggered"] = true;

                    const auto scores = relevance_scores(tv, pos, gate);
                    std::vector<char> eligible(pos, 0);
                    for (size_t j = 0; j < pos; ++j)
                        eligible[j] = semantic_filter(vocab, ids[j]) == 1 ? 1 : 0;
                    const auto sel = select_query_tokens(scores, eligible, gate.k_tokens);

                    json rev = {{"generation", generation}, {"pos", pos}};
                    if (sel.empty()) {
                        rev["skipped"] = "no eligible query tokens";
                    } else {
                        std::vector<std::string> texts;
                        texts.reserve(sel.size());
                        json positions = json::array();
                        for (size_t p : sel) {
                            texts.push_back(vocab.detokenize({ids[p]}));
                            positions.push_back(p);
                        }
                        // One greedy call to the raw model rewrites the
                        // selection into a query; failures degrade to the
                        // joined tokens inside formulate_query.
                        const auto ask = [&](const std::string& prompt) {
                            ToyBackend toy(model, vocab);
                            GenRequest q;
                            q.messages = {{"user", prompt}};
                            q.sampler.top_k = 1;
                            q.max_tokens = 16;
                            q.seed = req.seed;
                            return toy.generate(q).text;
                        };
                        const QueryResult qr = formulate_query(texts, ask);
                        c_current += 1.0;
                        if (log_) log_->retrieval_count += 1;

                        auto hits = ctx_->index.retrieve(qr.query, ctx_->cfg.retrieval.top_n);
                        bool recovered = false;
                        if (hits.empty()) {
                            // The rewriter's tokens rarely intersect the
                            // corpus vocabulary; fall back to the selected
                            // tokens themselves before giving up.
                            hits = ctx_->index.retrieve(joined_tokens(texts),
                                                        ctx_->cfg.retrieval.top_n);
                            recovered = !hits.empty();
                        }

                        rev["tokens"] = texts;
                        rev["positions"] = std::move(positions);
                        rev["query"] = qr.query;
                        rev["query_fallback"] = qr.fallback;
                        rev["recovered"] = recovered;
                        json docs = json::array();
                        for (const auto& h : hits)
                            docs.push_back({{"id", ctx_->index.corpus().docs[h.doc].id},
                                            {"score", h.score}});
                        rev["docs"] = std::move(docs);

                        size_t inserted = 0;
                        if (!hits.empty()) {
                            const std::string context = format_context(
                                ctx_->index.corpus(), hits, ctx_->cfg.retrieval.context_budget);
                            auto ctx_tokens = vocab.tokenize("\n" + context + "\n");
                            const auto room = static_cast<long long>(model.cfg.max_seq) -
                                              static_cast<long long>(ids.size()) -
                                              static_cast<long long>(req.max_tokens - t - 1);
                            if (room <= 0) {
                                rev["window_exhausted"] = true;
                            } else {
                                if (ctx_tokens.size() > static_cast<size_t>(room))
                                    ctx_tokens.resize(static_cast<size_t>(room));
                                ids.insert(ids.end(), ctx_tokens.begin(), ctx_tokens.end());
                                forward_extend(model, ids, cache);
                                inserted = ctx_tokens.size();
                                if (log_) log_->context_insertions += 1;
                            }
                        }
                        rev["inserted"] = inserted;
                    }
                    if (log_) log_->retrievals.push_back(std::move(rev));
                }
            }
            if (log_) log_->gate_decisions.push_back(std::move(decision));
        }
    }

    resp.text = vocab.detokenize(generated);
    resp.finish_reason = "length";
    if (req.want_introspection) resp.final_state = forward_step(model, ids, &cache);

    if (log_) {
        log_->generations += 1;
        log_->dot_products += cache.key_dot_products;
        if (critic_on) log_->critic_stats = cstate.stats;
    }
    return resp;
}

// === strategy dispatch ====================================================

namespace {

struct StrategyOutcome {
    std::string answer;
    json record;
};

// Runs one strategy against the resolved backend stack. `seed` is passed
// explicitly so evaluation runs can vary it per item.
StrategyOutcome dispatch_strategy(const RunContext& ctx, LmBackend& be, const std::string& q,
                                  uint64_t seed) {
    const DecoderConfig& d = ctx.cfg.decoder;
    const std::string& name = d.name;

    if (name == "sample") {
        GenRequest req;
        req.messages = {{"user", q}};
        req.sampler = d.sampler;
        req.max_tokens = d.max_tokens;
        req.seed = seed;
        req.repetition_penalty = d.repetition_penalty;
        req.no_repeat_ngram = d.no_repeat_ngram;
        const GenResponse resp = be.generate(req);
        return {resp.text, json{{"strategy", "sample"}, {"seeds", {seed}}}};
    }
    if (name == "self-consistency") {
        auto r = self_consistency(be, q, d.k, d.sampler.temperature, d.tau, seed, d.max_tokens);
        return {r.answer, r.trace.to_json()};
    }
    if (name == "best-of-n") {
        auto r = best_of_n(be, q, d.k, d.sampler.temperature, d.rate_temperature, seed,
                           d.max_tokens);
        return {r.answer, r.trace.to_json()};
    }
    if (name == "cot-reflection") {
        auto r = cot_reflection(be, q, seed, d.sampler.temperature, d.max_tokens);
        return {r.answer, r.trace.to_json()};
    }
    if (name == "re2") {
        auto r = re2(be, q, "", d.sampler, seed, d.max_tokens);
        return {r.answer, r.trace.to_json()};
    }
    if (name == "moa") {
        auto r = moa_pipeline(be, q, d.k, d.sampler.temperature, d.t2, d.t3,
                              d.repetition_penalty, d.no_repeat_ngram, seed, d.max_tokens);
        return {r.answer, r.trace.to_json()};
    }
    if (name == "rto") {
        auto r = rto_pipeline(be, q, d.tau, seed, d.sampler, d.max_tokens);
        return {r.answer, r.trace.to_json()};
    }
    if (name == "plansearch") {
        auto r = plansearch_pipeline(be, q, d.n1, d.n2, d.solves, d.sampler.temperature, seed,
                                     d.max_tokens);
        return {r.answers.front(), r.trace.to_json()};
    }
    if (name == "mcts") {
        auto r = mcts_search(be, q, d.rollouts, d.k, d.depth, d.h_max, d.c_uct, seed,
                             d.sampler.temperature, d.max_tokens);
        return {r.answer, r.trace.to_json()};
    }
    if (name == "r-star") {
        auto r = r_star_search(be, q, d.rollouts, d.depth, d.c_uct, d.consistency_theta, seed,
                               d.sampler.temperature, d.max_tokens);
        return {r.answer, r.trace.to_json()};
    }
    throw ConfigError("unknown decoder: " + name);
}

// Resolves the backend stack and runs the configured decoder. The raw-model
// strategies (entropy, cot-decode) bypass the backend stack entirely, so
// they are incompatible with the gate, the compressor, and recording.
GenerateOutcome generate_seeded(const RunContext& ctx, const std::string& question,
                                uint64_t seed) {
    const RunConfig& cfg = ctx.cfg;
    const DecoderConfig& d = cfg.decoder;
    RunLog log;

    StrategyOutcome out;
    if (d.name == "entropy" || d.name == "cot-decode") {
        if (cfg.atlas.enabled || cfg.critic.enabled)
            throw CapabilityError(d.name +
                                  " decodes against the raw model; disable the retrieval gate "
                                  "and the cache compressor");
        if (cfg.backend.kind != "toy")
            throw CapabilityError(d.name + " needs the toy backend");
        if (cfg.backend.record)
            throw CapabilityError(d.name + " runs outside the backend stack; recording would "
                                           "capture nothing");
        if (d.name == "entropy") {
            ToyBackend toy(ctx.model, ctx.vocab);
            auto r = entropy_guided_generate(toy, question, d.sampler, d.betas, d.max_tokens,
                                             seed);
            out = {r.text, r.trace.to_json()};
        } else {
            auto r = cot_decode(ctx.model, ctx.vocab, question, d.k, d.alpha, d.consolidate,
                                d.max_tokens);
            out = {r.answer, r.trace.to_json()};
        }
    } else {
        PipelineBackend pipe(ctx, &log);
        std::unique_ptr<LmBackend> owned;
        LmBackend* be = &pipe;
        if (cfg.backend.kind != "toy") {
            if (cfg.atlas.enabled || cfg.critic.enabled)
                throw CapabilityError(
                    "the retrieval gate and the cache compressor need the toy backend");
            if (cfg.backend.kind == "replay")
                owned = std::make_unique<CassetteReplay>(cfg.backend.cassette);
            else
                owned = std::make_unique<RemoteBackend>(RemoteConfig::from_env());
            be = owned.get();
        }
        std::unique_ptr<CassetteRecorder> recorder;
        if (cfg.backend.record) {
            recorder = std::make_unique<CassetteRecorder>(*be, cfg.backend.cassette);
            be = recorder.get();
        }
        out = dispatch_strategy(ctx, *be, question, seed);
    }

    size_t triggers = 0;
    for (const auto& g : log.gate_decisions)
        if (g.at("triggered").get<bool>()) ++triggers;

    GenerateOutcome res;
    res.answer = out.answer;
    res.trace = {{"question", question},
                 {"decoder", d.name},
                 {"seed", seed},
                 {"answer", out.answer},
                 {"strategy", std::move(out.record)},
                 {"atlas",
                  {{"enabled", cfg.atlas.enabled},
                   {"gate_decisions", std::move(log.gate_decisions)},
                   {"retrievals", std::move(log.retrievals)}}},
                 {"critic",
                  {{"enabled", cfg.critic.enabled}, {"events", std::move(log.critic_events)}}}};
    res.metrics = {{"decoder", d.name},
                   {"seed", seed},
                   {"generations", log.generations},
                   {"answer_bytes", res.answer.size()},
                   {"dot_products", log.dot_products},
                   {"gate",
                    {{"triggers", triggers},
                     {"retrievals", log.retrieval_count},
                     {"insertions", log.context_insertions}}},
                   {"critic",
                    {{"events", log.critic_stats.events.size()},
                     {"tokens_dropped", log.critic_stats.tokens_dropped},
                     {"dot_products_saved", log.critic_stats.dot_products_saved},
                     {"achieved_ratio", log.critic_stats.achieved_ratio}}}};
    return res;
}

} // namespace

GenerateOutcome run_generate(const RunContext& ctx, const std::string& question) {
    return generate_seeded(ctx, question, ctx.cfg.seed);
}

// === training =============================================================

namespace {

std::vector<TrainItem> read_train_items(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open training data: " + path);
    std::vector<TrainItem> items;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ConfigError(path + " line " + std::to_string(line_no) + ": " + e.what());
        }
        const auto fail = [&](const char* what) -> ConfigError {
            return ConfigError(path + " line " + std::to_string(line_no) + ": " + what);
        };
        if (!j.is_object()) throw fail("expected an object");
        if (!j.contains("question") || !j.at("question").is_string())
            throw fail("needs a string \"question\"");
        if (!j.contains("answer") || !j.at("answer").is_string())
            throw fail("needs a string \"answer\"");
        if (!j.contains("docs") || !j.at("docs").is_array())
            throw fail("needs an array \"docs\"");
        TrainItem item;
        item.question = j.at("question").get<std::string>();
        item.answer = j.at("answer").get<std::string>();
        for (const auto& doc : j.at("docs")) {
            if (!doc.is_string()) throw fail("docs entries must be strings");
            item.docs.push_back(doc.get<std::string>());
        }
        items.push_back(std::move(item));
    }
    return items;
}

// save_checkpoint writes <path> and <path>.json; staging both under a
// temporary name and renaming keeps the visible pair always loadable.
void save_checkpoint_atomic(const std::string& dir, const PoragTrainer& tr, uint64_t step) {
    const fs::path tmp = fs::path(dir) / "checkpoint.tmp";
    const fs::path final_bin = fs::path(dir) / "checkpoint.bin";
    save_checkpoint(tmp.string(), tr.adapter(), tr.fidelity_head(), tr.quality_head(), step);
    fs::rename(tmp.string() + ".json", final_bin.string() + ".json");
    fs::rename(tmp, final_bin);
}

} // namespace

json run_train(const RunContext& ctx, const std::string& train_path,
               const std::string& out_dir) {
    const PoragRunConfig& pc = ctx.cfg.porag;
    if (pc.grpo.group_size != 2 && pc.grpo.group_size != 4)
        throw ConfigError("porag.group_size must be 2 or 4 for training runs");

    const std::vector<TrainItem> items = read_train_items(train_path);
    if (items.empty() && pc.train_steps > 0)
        throw ConfigError(train_path + ": no training items");

    fs::create_directories(out_dir);
    PoragTrainer trainer(ctx.model, ctx.vocab, pc.grpo, ctx.cfg.seed);
    trainer.candidate_len() = pc.candidate_len;

    const fs::path ckpt = fs::path(out_dir) / "checkpoint.bin";
    std::optional<uint64_t> resumed;
    if (fs::exists(ckpt)) {
        Checkpoint ck = load_checkpoint(ckpt.string());
        trainer.adapter() = std::move(ck.adapter);
        trainer.fidelity_head() = std::move(ck.fidelity);
        trainer.quality_head() = std::move(ck.quality);
        trainer.set_steps_done(ck.step);
        resumed = ck.step;
    }

    const fs::path metrics_path = fs::path(out_dir) / "metrics.jsonl";
    std::ofstream metrics(metrics_path, resumed ? std::ios::app : std::ios::trunc);
    if (!metrics) throw ConfigError("cannot write " + metrics_path.string());

    if (!resumed) save_checkpoint_atomic(out_dir, trainer, 0); // step-0 state

    size_t ran = 0;
    while (trainer.steps_done() < pc.train_steps) {
        const uint64_t step = trainer.steps_done() + 1;
        const TrainItem& item = items[(step - 1) % items.size()];
        const StepMetrics m = trainer.train_step(item);
        ++ran;

        const json line = {{"step", step},
                           {"j", m.j},
                           {"l_clip", m.l_clip},
                           {"kl", m.kl},
                           {"reward_mean", m.reward_mean},
                           {"reward_sigma", m.reward_sigma},
                           {"fidelity_head_loss", m.fidelity_head_loss},
                           {"quality_head_loss", m.quality_head_loss},
                           {"grad_norm", m.grad_norm}};
        metrics << line.dump(-1, ' ', false, json::error_handler_t::replace) << '\n';
        metrics.flush();

        if (step % pc.checkpoint_every == 0) save_checkpoint_atomic(out_dir, trainer, step);
    }
    if (ran > 0) save_checkpoint_atomic(out_dir, trainer, trainer.steps_done());

    return json{{"steps_run", ran},
                {"steps_total", trainer.steps_done()},
                {"resumed_from", resumed ? json(*resumed) : json(nullptr)},
                {"checkpoint", ckpt.string()},
                {"metrics", metrics_path.string()}};
}

// === compression bench ====================================================

json run_compress_bench(const RunContext& ctx, const std::string& prompt) {
    GenRequest req;
    req.messages = {{"user", prompt}};
    req.sampler = ctx.cfg.decoder.sampler;
    req.max_tokens = ctx.cfg.decoder.max_tokens;
    req.seed = ctx.cfg.seed;
    req.repetition_penalty = ctx.cfg.decoder.repetition_penalty;
    req.no_repeat_ngram = ctx.cfg.decoder.no_repeat_ngram;
    req.want_introspection = true;

    // Same weights, same seed; only the compressor flag differs.
    RunContext off = ctx;
    off.cfg.atlas.enabled = false;
    off.cfg.critic.enabled = false;
    RunContext on = ctx;
    on.cfg.atlas.enabled = false;
    on.cfg.critic.enabled = true;

    RunLog log_off, log_on;
    const GenResponse base = PipelineBackend(off, &log_off).generate(req);
    const GenResponse comp = PipelineBackend(on, &log_on).generate(req);

    json divergence = nullptr;
    for (size_t i = 0; i < base.tokens.size() && i < comp.tokens.size(); ++i) {
        if (base.tokens[i].id != comp.tokens[i].id) {
            divergence = i;
            break;
        }
    }

    json events = json::array();
    for (const auto& ev : log_on.critic_stats.events)
        events.push_back({{"step", ev.step}, {"n_before", ev.n_before}, {"n_after", ev.n_after}});

    return json{
        {"prompt_tokens", ctx.vocab.tokenize(flatten_messages(req.messages)).size()},
        {"steps", req.max_tokens},
        {"baseline", {{"dot_products", log_off.dot_products}}},
        {"compressed",
         {{"dot_products", log_on.dot_products},
          {"events", std::move(events)},
          {"retained", log_on.critic_stats.n_after},
          {"achieved_ratio", log_on.critic_stats.achieved_ratio},
          {"tokens_dropped", log_on.critic_stats.tokens_dropped},
          {"dot_products_saved", log_on.critic_stats.dot_products_saved}}},
        {"divergence_index", std::move(divergence)}};
}

// === evaluation ===========================================================

json run_eval(const RunContext& ctx, const std::string& qa_path) {
    std::ifstream in(qa_path);
    if (!in) throw ConfigError("cannot open evaluation data: " + qa_path);

    json items = json::array();
    json errors = json::array();
    double em_sum = 0.0, f1_sum = 0.0, rouge_sum = 0.0;
    size_t count = 0;

    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::string question, gold;
        try {
            const json j = json::parse(line);
            if (!j.is_object() || !j.contains("question") || !j.at("question").is_string() ||
                !j.contains("answer") || !j.at("answer").is_string())
                throw ConfigError("needs string \"question\" and \"answer\"");
            question = j.at("question").get<std::string>();
            gold = j.at("answer").get<std::string>();
        } catch (const std::exception& e) {
            errors.push_back({{"line", line_no}, {"error", e.what()}});
            continue;
        }

        // Spread item seeds far apart so multi-sample strategies never
        // overlap their per-call offsets across items.
        const uint64_t seed = ctx.cfg.seed + static_cast<uint64_t>(count) * 100000;
        const GenerateOutcome out = generate_seeded(ctx, question, seed);
        const double em = exact_match(out.answer, gold);
        const double f1 = token_f1(out.answer, gold);
        const double rl = rouge_l_f1(word_tokens(out.answer), word_tokens(gold));
        em_sum += em;
        f1_sum += f1;
        rouge_sum += rl;
        ++count;
        items.push_back({{"line", line_no},
                         {"seed", seed},
                         {"em", em},
                         {"f1", f1},
                         {"rouge_l", rl},
                         {"answer_bytes", out.answer.size()}});
    }

    const double n = count > 0 ? static_cast<double>(count) : 1.0;
    return json{{"items", std::move(items)},
                {"errors", std::move(errors)},
                {"aggregate",
                 {{"count", count},
                  {"em", em_sum / n},
                  {"f1", f1_sum / n},
                  {"rouge_l", rouge_sum / n}}}};
}

// === trace ================================================================

json run_trace(const RunContext& ctx, const std::string& question) {
    RunLog log;
    PipelineBackend pipe(ctx, &log);

    GenRequest req;
    req.messages = {{"user", question}};
    req.sampler = ctx.cfg.decoder.sampler;
    req.max_tokens = ctx.cfg.decoder.max_tokens;
    req.seed = ctx.cfg.seed;
    req.repetition_penalty = ctx.cfg.decoder.repetition_penalty;
    req.no_repeat_ngram = ctx.cfg.decoder.no_repeat_ngram;
    req.want_introspection = true;
    const GenResponse resp = pipe.generate(req);

    json tokens = json::array();
    for (const auto& tok : resp.tokens)
        tokens.push_back({{"id", tok.id},
                          {"text", ctx.vocab.detokenize({tok.id})},
                          {"p1", tok.p1},
                          {"p2", tok.p2}});

    json final_state;
    if (resp.final_state) {
        const TraceView tv = resp.final_state->view();

        json attn_entropy = json::array();
        for (size_t l = 0; l < tv.L; ++l) {
            json per_head = json::array();
            for (size_t h = 0; h < tv.H; ++h) {
                const CausalMatrix& m = tv.attention(l, h);
                json rows = json::array();
                for (size_t i = 0; i < m.rows(); ++i) rows.push_back(m.row_entropy(i));
                per_head.push_back(std::move(rows));
            }
            attn_entropy.push_back(std::move(per_head));
        }

        json hidden_norms = json::array();
        for (size_t l = 0; l <= tv.L; ++l) {
            json norms = json::array();
            for (size_t p = 0; p < tv.S; ++p) {
                const auto& h = tv.hidden_at(l, p);
                double s = 0.0;
                for (double x : h) s += x * x;
                norms.push_back(std::sqrt(s));
            }
            hidden_norms.push_back(std::move(norms));
        }

        std::vector<size_t> order(resp.final_state->logits.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            const auto& lg = resp.final_state->logits;
            return lg[a] != lg[b] ? lg[a] > lg[b] : a < b;
        });
        json top = json::array();
        for (size_t i = 0; i < order.size() && i < 16; ++i)
            top.push_back({{"token", order[i]},
                           {"text", ctx.vocab.detokenize({static_cast<int>(order[i])})},
                           {"logit", resp.final_state->logits[order[i]]}});

        final_state = {{"positions", tv.S},
                       {"attention_row_entropy", std::move(attn_entropy)},
                       {"hidden_norms", std::move(hidden_norms)},
                       {"top_logits", std::move(top)}};
    }

    return json{{"question", question},
                {"seed", ctx.cfg.seed},
                {"answer", resp.text},
                {"tokens", std::move(tokens)},
                {"final_state", std::move(final_state)},
                {"atlas",
                 {{"enabled", ctx.cfg.atlas.enabled},
                  {"gate_decisions", std::move(log.gate_decisions)},
                  {"retrievals", std::move(log.retrievals)}}},
                {"critic",
                 {{"enabled", ctx.cfg.critic.enabled},
                  {"events", std::move(log.critic_events)}}}};
}

} // namespace lab
