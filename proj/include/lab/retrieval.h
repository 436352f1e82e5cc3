#pragma once
#include <cstdint>
#include <string>
#include <vector>

namespace lab {

// Local document corpus with BM25 lexical ranking. Indexing tokenization is
// the shared word tokenizer (lowercase alphanumeric runs), so queries built
// from generation tokens and documents meet in the same term space.

struct Document {
    std::string id;
    std::string title;
    std::string text;
};

struct Corpus {
    std::vector<Document> docs;
};

// JSONL, one {"id","title","text"} object per line. Malformed lines and
// duplicate ids are reported with their line number.
Corpus ingest_corpus(const std::string& path);

class Index {
public:
    static Index build(const Corpus& corpus);

    // Okapi BM25 (k1=1.2, b=0.75) of one document against query terms;
    // additive, so a duplicated query term counts twice.
    double bm25_score(const std::vector<std::string>& query_terms, size_t doc) const;

    struct Hit {
        size_t doc = 0;
        double score = 0.0;
    };
    // Documents with positive score, descending (ties by doc id ascending),
    // truncated to top_n. A query of only unknown terms matches nothing.
    std::vector<Hit> retrieve(const std::string& query, size_t top_n) const;

    const Corpus& corpus() const { return corpus_; }
    size_t doc_count() const { return corpus_.docs.size(); }
    double avg_len() const { return avg_len_; }

    // Versioned binary snapshot of the corpus + postings.
    void save(const std::string& path) const;
    static Index load(const std::string& path);

private:
    struct Posting {
        uint32_t doc = 0;
        uint32_t tf = 0;
    };
    Corpus corpus_;
    std::vector<std::string> terms_;            // sorted unique
    std::vector<std::vector<Posting>> postings_; // per term
    std::vector<uint32_t> doc_len_;
    double avg_len_ = 0.0;

    const std::vector<Posting>* find_term(const std::string& term) const;
};

// Concatenates ranked documents as "[title]\ntext" blocks separated by
// blank lines, spending at most `budget_tokens` words: whole blocks while
// they fit, then a truncated head of the first block that does not.
std::string format_context(const Corpus& corpus, const std::vector<Index::Hit>& hits,
                           size_t budget_tokens);

} // namespace lab
