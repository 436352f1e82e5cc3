#include "lab/vocab.h"

#include <algorithm>
#include <cctype>
#include <stdexcept>
#include <unordered_set>

namespace lab {

namespace {

bool all_numeric(const std::string& s) {
    if (s.empty()) return false;
    bool digit_seen = false;
    for (char c : s) {
        if (std::isdigit(static_cast<unsigned char>(c))) {
            digit_seen = true;
        } else if (c != '.' && c != '-' && c != ',') {
            return false;
        }
    }
    return digit_seen;
}

bool all_punct(const std::string& s) {
    if (s.empty()) return false;
    return std::all_of(s.begin(), s.end(), [](char c) {
        return std::ispunct(static_cast<unsigned char>(c));
    });
}

} // namespace

void Vocab::push(Token t) {
    by_text_.emplace(t.text, static_cast<int>(tokens_.size()));
    max_word_len_ = std::max(max_word_len_, t.text.size());
    tokens_.push_back(std::move(t));
}

Vocab Vocab::bytes_only() {
    Vocab v;
    v.tokens_.reserve(256);
    for (int b = 0; b < 256; ++b) {
        Token t;
        t.text = std::string(1, static_cast<char>(b));
        t.is_numeric = std::isdigit(b) != 0;
        t.is_punctuation = std::ispunct(b) != 0;
        v.push(std::move(t));
    }
    return v;
}

Vocab Vocab::with_words(const std::vector<std::string>& words,
                        const std::vector<std::string>& stopwords) {
    Vocab v = bytes_only();
    std::unordered_set<std::string> stop(stopwords.begin(), stopwords.end());
    for (const auto& w : words) {
        if (w.empty()) throw std::invalid_argument("empty word token");
        if (v.by_text_.count(w)) throw std::invalid_argument("duplicate token: " + w);
        Token t;
        t.text = w;
        t.is_stopword = stop.count(w) > 0;
        t.is_numeric = all_numeric(w);
        t.is_punctuation = all_punct(w);
        v.push(std::move(t));
    }
    // Stopwords must be tokens themselves so the filter can see them.
    for (const auto& s : stop)
        if (!v.by_text_.count(s)) throw std::invalid_argument("stopword not in word list: " + s);
    return v;
}

std::optional<int> Vocab::find(const std::string& text) const {
    auto it = by_text_.find(text);
    if (it == by_text_.end()) return std::nullopt;
    return it->second;
}

std::vector<int> Vocab::tokenize(const std::string& text) const {
    std::vector<int> out;
    size_t i = 0;
    while (i < text.size()) {
        int id = -1;
        size_t len = 0;
        const size_t cap = std::min(max_word_len_, text.size() - i);
        for (size_t l = cap; l >= 2; --l) {
            auto it = by_text_.find(text.substr(i, l));
            if (it != by_text_.end()) {
                id = it->second;
                len = l;
                break;
            }
        }
        if (id < 0) {
            id = static_cast<unsigned char>(text[i]);
            len = 1;
        }
        out.push_back(id);
        i += len;
    }
    return out;
}

std::string Vocab::detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) out += token(id).text;
    return out;
}

} // namespace lab
