#pragma once
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace lab {

// Byte-level vocabulary optionally extended with a word list. Word tokens
// carry the semantic-filter flags (stopword / numeric / punctuation); byte
// tokens derive theirs from the character class. Flags are deterministic
// functions of the surface string.
class Vocab {
public:
    struct Token {
        std::string text;
        bool is_stopword = false;
        bool is_numeric = false;
        bool is_punctuation = false;
    };

    // Plain byte-level vocabulary: ids 0..255.
    static Vocab bytes_only();

    // Byte-level plus word tokens (ids 256..). `stopwords` marks which of
    // the words are stopwords; words not in the list get content-word flags.
    static Vocab with_words(const std::vector<std::string>& words,
                            const std::vector<std::string>& stopwords);

    size_t size() const { return tokens_.size(); }
    const Token& token(int id) const { return tokens_.at(static_cast<size_t>(id)); }
    std::optional<int> find(const std::string& text) const;

    // Greedy longest-match tokenization: at each offset prefer the longest
    // word token, falling back to the single byte.
    std::vector<int> tokenize(const std::string& text) const;
    std::string detokenize(const std::vector<int>& ids) const;

private:
    std::vector<Token> tokens_;
    std::unordered_map<std::string, int> by_text_;
    size_t max_word_len_ = 1;

    void push(Token t);
};

} // namespace lab
