// JSONL corpus ingestion, BM25 ranking, and context assembly.
#include "lab/retrieval.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <unordered_set>

#include "json.hpp"
#include "lab/errors.h"
#include "lab/text_metrics.h"

namespace lab {

using nlohmann::json;

namespace {

constexpr double kBm25K1 = 1.2;
constexpr double kBm25B = 0.75;
constexpr char kIndexMagic[8] = {'L', 'A', 'B', 'I', 'D', 'X', '0', '1'};

// Byte offset just past the n-th word (alnum run) of `text`; text.size()
// when there are fewer than n words.
size_t end_of_nth_word(const std::string& text, size_t n) {
    size_t words = 0, i = 0;
    while (i < text.size()) {
        if (std::isalnum(static_cast<unsigned char>(text[i]))) {
            while (i < text.size() && std::isalnum(static_cast<unsigned char>(text[i]))) ++i;
            if (++words == n) return i;
        } else {
            ++i;
        }
    }
    return text.size();
}

void write_u64(std::ofstream& out, uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void write_str(std::ofstream& out, const std::string& s) {
    write_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
uint64_t read_u64(std::ifstream& in) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw ConfigError("index file truncated");
    return v;
}
std::string read_str(std::ifstream& in) {
    std::string s(read_u64(in), '\0');
    in.read(s.data(), static_cast<std::streamsize>(s.size()));
    if (!in) throw ConfigError("index file truncated");
    return s;
}

} // namespace

// === ingestion ===========================================================

Corpus ingest_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open corpus: " + path);

    Corpus corpus;
    std::unordered_set<std::string> seen_ids;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = "corpus line " + std::to_string(lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ConfigError(where + ": " + e.what());
        }
        Document d;
        try {
            d.id = j.at("id").get<std::string>();
            d.title = j.at("title").get<std::string>();
            d.text = j.at("text").get<std::string>();
        } catch (const json::exception& e) {
            throw ConfigError(where + ": " + e.what());
        }
        if (d.text.empty()) throw ConfigError(where + ": empty document text");
        if (!seen_ids.insert(d.id).second)
            throw ConfigError(where + ": duplicate id \"" + d.id + "\"");
        corpus.docs.push_back(std::move(d));
    }
    return corpus;
}

// === index ===============================================================

Index Index::build(const Corpus& corpus) {
    Index ix;
    ix.corpus_ = corpus;
    const size_t n = corpus.docs.size();
    ix.doc_len_.resize(n, 0);

    std::map<std::string, std::vector<Posting>> acc; // sorted terms for free
    for (size_t d = 0; d < n; ++d) {
        const auto words = word_tokens(corpus.docs[d].title + " " + corpus.docs[d].text);
        ix.doc_len_[d] = static_cast<uint32_t>(words.size());
        std::map<std::string, uint32_t> tf;
        for (const auto& w : words) ++tf[w];
        for (const auto& [term, count] : tf)
            acc[term].push_back({static_cast<uint32_t>(d), count});
    }

    uint64_t total_len = 0;
    for (uint32_t len : ix.doc_len_) total_len += len;
    ix.avg_len_ = n ? static_cast<double>(total_len) / static_cast<double>(n) : 0.0;

    ix.terms_.reserve(acc.size());
    ix.postings_.reserve(acc.size());
    for (auto& [term, posts] : acc) {
        ix.terms_.push_back(term);
        ix.postings_.push_back(std::move(posts));
    }
    return ix;
}

const std::vector<Index::Posting>* Index::find_term(const std::string& term) const {
    const auto it = std::lower_bound(terms_.begin(), terms_.end(), term);
    if (it == terms_.end() || *it != term) return nullptr;
    return &postings_[static_cast<size_t>(it - terms_.begin())];
}

double Index::bm25_score(const std::vector<std::string>& query_terms, size_t doc) const {
    const double n_docs = static_cast<double>(doc_count());
    double score = 0.0;
    for (const auto& term : query_terms) {
        const auto* posts = find_term(term);
        if (!posts) continue;
        const auto it = std::lower_bound(
            posts->begin(), posts->end(), doc,
            [](const Posting& p, size_t d) { return p.doc < d; });
        if (it == posts->end() || it->doc != doc) continue;

        const double df = static_cast<double>(posts->size());
        const double idf = std::log(1.0 + (n_docs - df + 0.5) / (df + 0.5));
        const double tf = static_cast<double>(it->tf);
        const double len_norm =
            1.0 - kBm25B + kBm25B * static_cast<double>(doc_len_[doc]) / avg_len_;
        score += idf * tf * (kBm25K1 + 1.0) / (tf + kBm25K1 * len_norm);
    }
    return score;
}

std::vector<Index::Hit> Index::retrieve(const std::string& query, size_t top_n) const {
    if (top_n < 1) throw std::invalid_argument("retrieve: top_n must be >= 1");
    const auto terms = word_tokens(query);

    std::vector<Hit> hits;
    for (size_t d = 0; d < doc_count(); ++d) {
        const double s = bm25_score(terms, d);
        if (s > 0.0) hits.push_back({d, s});
    }
    std::sort(hits.begin(), hits.end(), [this](const Hit& a, const Hit& b) {
        if (a.score != b.score) return a.score > b.score;
        return corpus_.docs[a.doc].id < corpus_.docs[b.doc].id;
    });
    if (hits.size() > top_n) hits.resize(top_n);
    return hits;
}

// === persistence =========================================================

void Index::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write index: " + path);
    out.write(kIndexMagic, sizeof kIndexMagic);

    write_u64(out, corpus_.docs.size());
    for (const auto& d : corpus_.docs) {
        write_str(out, d.id);
        write_str(out, d.title);
        write_str(out, d.text);
    }
    write_u64(out, terms_.size());
    for (size_t t = 0; t < terms_.size(); ++t) {
        write_str(out, terms_[t]);
        write_u64(out, postings_[t].size());
        for (const Posting& p : postings_[t]) {
            write_u64(out, p.doc);
            write_u64(out, p.tf);
        }
    }
    for (uint32_t len : doc_len_) write_u64(out, len);
    if (!out) throw ConfigError("index write failed: " + path);
}

Index Index::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open index: " + path);
    char magic[sizeof kIndexMagic];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kIndexMagic, sizeof magic) != 0)
        throw ConfigError("not a recognized index file (bad header): " + path);

    Index ix;
    const uint64_t n_docs = read_u64(in);
    ix.corpus_.docs.resize(n_docs);
    for (auto& d : ix.corpus_.docs) {
        d.id = read_str(in);
        d.title = read_str(in);
        d.text = read_str(in);
    }
    const uint64_t n_terms = read_u64(in);
    ix.terms_.resize(n_terms);
    ix.postings_.resize(n_terms);
    for (uint64_t t = 0; t < n_terms; ++t) {
        ix.terms_[t] = read_str(in);
        const uint64_t n_posts = read_u64(in);
        ix.postings_[t].resize(n_posts);
        for (auto& p : ix.postings_[t]) {
            p.doc = static_cast<uint32_t>(read_u64(in));
            p.tf = static_cast<uint32_t>(read_u64(in));
        }
    }
    ix.doc_len_.resize(n_docs);
    uint64_t total = 0;
    for (auto& len : ix.doc_len_) {
        len = static_cast<uint32_t>(read_u64(in));
        total += len;
    }
    ix.avg_len_ = n_docs ? static_cast<double>(total) / static_cast<double>(n_docs) : 0.0;
    return ix;
}

// === context assembly ====================================================

std::string format_context(const Corpus& corpus, const std::vector<Index::Hit>& hits,
                           size_t budget_tokens) {
    if (budget_tokens < 1) throw std::invalid_argument("format_context: budget must be >= 1");

    std::string out;
    size_t remaining = budget_tokens;
    for (const auto& hit : hits) {
        const Document& d = corpus.docs[hit.doc];
        const size_t title_words = word_tokens(d.title).size();
        const size_t text_words = word_tokens(d.text).size();
        const size_t block_words = title_words + text_words;

        if (block_words <= remaining) {
            if (!out.empty()) out += "\n\n";
            out += "[" + d.title + "]\n" + d.text;
            remaining -= block_words;
            if (remaining == 0) break;
        } else if (out.empty()) {
            // Nothing fits whole: truncate the best block to the budget.
            const size_t keep = remaining > title_words ? remaining - title_words : 0;
            out += "[" + d.title + "]";
            if (keep > 0) out += "\n" + d.text.substr(0, end_of_nth_word(d.text, keep));
            break;
        } else {
            break; // block boundary reached
        }
    }
    return out;
}

} // namespace lab
