// Corpus ingestion rules, BM25 closed forms, brute-force ranking
// equivalence, context assembly, and index persistence.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "lab/errors.h"
#include "lab/retrieval.h"
#include "lab/rng.h"

using namespace lab;
using doctest::Approx;

namespace {

std::string write_tmp(const std::string& name, const std::string& content) {
    const std::string path = "/tmp/" + name;
    std::ofstream out(path, std::ios::trunc);
    out << content;
    return path;
}

Corpus three_doc_corpus() {
    Corpus c;
    c.docs = {
        {"d1", "cooking basics", "salt and pepper season the broth"},
        {"d2", "kettle care", "descale the kettle with vinegar and water"},
        {"d3", "broth guide", "simmer bones for broth broth broth"},
    };
    return c;
}

} // namespace

// === ingestion ===========================================================

TEST_CASE("corpus ingestion accepts valid JSONL") {
    const auto path = write_tmp(
        "lab_corpus_ok.jsonl",
        R"({"id":"a","title":"one","text":"first doc"})" "\n"
        R"({"id":"b","title":"two","text":"second doc"})" "\n"
        R"({"id":"c","title":"three","text":"third doc"})" "\n");
    const Corpus c = ingest_corpus(path);
    REQUIRE(c.docs.size() == 3);
    CHECK(c.docs[1].id == "b");
    CHECK(c.docs[2].text == "third doc");

    const auto empty = write_tmp("lab_corpus_empty.jsonl", "");
    CHECK(ingest_corpus(empty).docs.empty());
}

TEST_CASE("corpus ingestion names the offending line") {
    std::string lines;
    for (int i = 1; i <= 6; ++i)
        lines += R"({"id":"doc)" + std::to_string(i) + R"(","title":"t","text":"body"})" + "\n";
    lines += R"({"id":"doc3","title":"t","text":"body"})" "\n"; // line 7 repeats doc3
    const auto dup = write_tmp("lab_corpus_dup.jsonl", lines);
    try {
        ingest_corpus(dup);
        FAIL("expected duplicate-id error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("line 7") != std::string::npos);
        CHECK(std::string(e.what()).find("doc3") != std::string::npos);
    }

    const auto bad = write_tmp("lab_corpus_bad.jsonl", "{\"id\":\"a\"\n");
    try {
        ingest_corpus(bad);
        FAIL("expected parse error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("line 1") != std::string::npos);
    }

    const auto missing = write_tmp("lab_corpus_missing_field.jsonl",
                                   R"({"id":"a","title":"no text field"})" "\n");
    CHECK_THROWS_AS(ingest_corpus(missing), ConfigError);
    const auto hollow = write_tmp("lab_corpus_hollow.jsonl",
                                  R"({"id":"a","title":"t","text":""})" "\n");
    CHECK_THROWS_AS(ingest_corpus(hollow), ConfigError);
    CHECK_THROWS_AS(ingest_corpus("/tmp/no_such_corpus.jsonl"), ConfigError);
}

// === BM25 ================================================================

TEST_CASE("single-doc score reduces to the closed form") {
    Corpus c;
    c.docs = {{"only", "", "signal word here"}};
    const Index ix = Index::build(c);
    // df=1, N=1: idf = ln(1 + 0.5/1.5); tf=1 and |d|=avg collapse the
    // length normalization, leaving exactly idf.
    CHECK(ix.bm25_score({"signal"}, 0) == Approx(std::log(4.0 / 3.0)).epsilon(1e-12));
    CHECK(ix.bm25_score({"absent"}, 0) == 0.0);
    // Additivity: a duplicated query term counts twice.
    CHECK(ix.bm25_score({"signal", "signal"}, 0) ==
          Approx(2.0 * ix.bm25_score({"signal"}, 0)).epsilon(1e-12));
}

TEST_CASE("index statistics") {
    Corpus c;
    c.docs = {{"a", "", "two words"}, {"b", "", "four words live here"}};
    const Index ix = Index::build(c);
    CHECK(ix.doc_count() == 2);
    CHECK(ix.avg_len() == Approx(3.0));
    // Title words count toward the document length.
    Corpus t;
    t.docs = {{"a", "heading words", "body"}};
    CHECK(Index::build(t).avg_len() == Approx(3.0));
}

TEST_CASE("retrieval ranks by score with id tiebreak") {
    const Index ix = Index::build(three_doc_corpus());

    // "broth" appears 3x in d3 (tf saturation) and once in d1.
    const auto hits = ix.retrieve("broth", 10);
    REQUIRE(hits.size() == 2);
    CHECK(ix.corpus().docs[hits[0].doc].id == "d3");
    CHECK(ix.corpus().docs[hits[1].doc].id == "d1");
    CHECK(hits[0].score > hits[1].score);

    CHECK(ix.retrieve("zeppelin", 5).empty()); // unknown term
    CHECK(ix.retrieve("kettle", 5).size() == 1);
    CHECK(ix.retrieve("broth", 1).size() == 1); // truncation

    // Identical twin docs tie exactly; the smaller id wins.
    Corpus twins;
    twins.docs = {{"zz", "t", "same exact words"}, {"aa", "t", "same exact words"}};
    const auto tied = Index::build(twins).retrieve("exact", 2);
    REQUIRE(tied.size() == 2);
    CHECK(twins.docs[tied[0].doc].id == "aa");
    CHECK(tied[0].score == tied[1].score);

    CHECK(Index::build(Corpus{}).retrieve("anything", 3).empty());
    CHECK_THROWS(ix.retrieve("broth", 0));
}

TEST_CASE("ranking equals brute-force scoring on random corpora") {
    const std::vector<std::string> lexicon = {
        "alpha", "beta", "gamma", "delta", "omega", "stone", "river", "cloud",
        "ember", "frost", "quill", "marsh", "cedar", "lumen", "vapor", "grain",
    };
    RngSequence seq(Rng{515151, 9});
    for (int trial = 0; trial < 25; ++trial) {
        Corpus c;
        const size_t n_docs = 5 + seq.below(40);
        for (size_t d = 0; d < n_docs; ++d) {
            std::string text;
            const size_t len = 3 + seq.below(12);
            for (size_t w = 0; w < len; ++w) {
                if (w) text += ' ';
                text += lexicon[seq.below(lexicon.size())];
            }
            c.docs.push_back({"doc" + std::to_string(d), "", text});
        }
        const Index ix = Index::build(c);

        std::string query;
        const size_t q_len = 1 + seq.below(4);
        for (size_t w = 0; w < q_len; ++w) {
            if (w) query += ' ';
            query += lexicon[seq.below(lexicon.size())];
        }
        const size_t top_n = 1 + seq.below(n_docs + 2);
        const auto got = ix.retrieve(query, top_n);

        // Oracle: score everything, keep positives, sort, truncate.
        std::vector<std::string> terms;
        {
            std::string cur;
            for (char ch : query + " ") {
                if (ch == ' ') {
                    if (!cur.empty()) terms.push_back(cur);
                    cur.clear();
                } else {
                    cur += ch;
                }
            }
        }
        std::vector<Index::Hit> want;
        for (size_t d = 0; d < n_docs; ++d) {
            const double s = ix.bm25_score(terms, d);
            if (s > 0.0) want.push_back({d, s});
        }
        std::sort(want.begin(), want.end(), [&](const Index::Hit& a, const Index::Hit& b) {
            if (a.score != b.score) return a.score > b.score;
            return c.docs[a.doc].id < c.docs[b.doc].id;
        });
        if (want.size() > top_n) want.resize(top_n);

        REQUIRE(got.size() == want.size());
        for (size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].doc == want[i].doc);
            CHECK(got[i].score == want[i].score);
        }
    }
}

// === context assembly ====================================================

TEST_CASE("context blocks render and truncate on boundaries") {
    const Corpus c = three_doc_corpus();
    const Index ix = Index::build(c);
    const auto hits = ix.retrieve("broth", 10); // d3 then d1

    // Ample budget: both blocks, blank-line separated.
    const auto full = format_context(c, hits, 100);
    CHECK(full == "[broth guide]\nsimmer bones for broth broth broth\n\n"
                  "[cooking basics]\nsalt and pepper season the broth");

    // d3's block is 8 words (2 title + 6 text); budget 8 fits exactly one.
    const auto one = format_context(c, hits, 8);
    CHECK(one == "[broth guide]\nsimmer bones for broth broth broth");
    // Budget 9 still cannot take the second block: boundary rule.
    CHECK(format_context(c, hits, 9) == one);

    // Budget below the first block truncates it: 2 title words + 2 kept.
    CHECK(format_context(c, hits, 4) == "[broth guide]\nsimmer bones");
    // Budget that doesn't even cover the title: title only.
    CHECK(format_context(c, hits, 1) == "[broth guide]");

    CHECK(format_context(c, {}, 5) == "");
    CHECK_THROWS(format_context(c, hits, 0));
}

// === persistence =========================================================

TEST_CASE("index snapshots round-trip and reject foreign files") {
    const Index built = Index::build(three_doc_corpus());
    const std::string path = "/tmp/lab_index_test.bin";
    built.save(path);
    const Index loaded = Index::load(path);

    CHECK(loaded.doc_count() == 3);
    CHECK(loaded.avg_len() == built.avg_len());
    for (const std::string query : {"broth", "kettle vinegar", "salt simmer", "none"}) {
        const auto a = built.retrieve(query, 5);
        const auto b = loaded.retrieve(query, 5);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].doc == b[i].doc);
            CHECK(a[i].score == b[i].score); // bitwise: same arithmetic path
        }
    }

    const auto foreign = write_tmp("lab_index_foreign.bin", "not an index at all");
    CHECK_THROWS_AS(Index::load(foreign), ConfigError);

    // Truncate mid-stream: header ok, payload cut.
    {
        std::ifstream in(path, std::ios::binary);
        std::string head(40, '\0');
        in.read(head.data(), 40);
        std::ofstream out("/tmp/lab_index_cut.bin", std::ios::binary | std::ios::trunc);
        out.write(head.data(), in.gcount());
    }
    CHECK_THROWS_AS(Index::load("/tmp/lab_index_cut.bin"), ConfigError);
    CHECK_THROWS_AS(Index::load("/tmp/no_such_index.bin"), ConfigError);
    std::remove(path.c_str());
}
