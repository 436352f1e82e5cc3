#pragma once
#include <string>
#include <vector>

namespace lab {

// Word-level text metrics for reward targets and evaluation: ROUGE overlap,
// bag-of-words cosine, exact match, and token F1. One shared tokenizer so
// every consumer (rewards, retrieval, decoder voting) agrees on what a word
// is: lowercase maximal alphanumeric runs.

std::vector<std::string> word_tokens(const std::string& text);

// F-measure (beta=1) of clipped n-gram overlap between candidate and
// reference token lists; 0 when either side has no n-grams.
double rouge_n_f1(const std::vector<std::string>& candidate,
                  const std::vector<std::string>& reference, size_t n);

// F-measure over the longest common subsequence.
double rouge_l_f1(const std::vector<std::string>& candidate,
                  const std::vector<std::string>& reference);

struct FidelityResult {
    double rouge1 = 0.0;
    double rouge2 = 0.0;
    double rouge_l = 0.0;
    double loss = 1.0; // 1 - mean of the three F-measures
};

// Lexical-overlap loss of a candidate against the space-joined retrieved
// documents. An empty candidate scores the maximal loss of 1.
FidelityResult fidelity_loss(const std::string& candidate,
                             const std::vector<std::string>& documents);

// Cosine similarity of L2-normalized word-count vectors; 0 when either
// text has no words. Order-insensitive by construction.
double cosine_bag_of_words(const std::string& a, const std::string& b);

// 1 when the word-token sequences match exactly (case and punctuation
// folded away by the tokenizer), else 0.
double exact_match(const std::string& candidate, const std::string& reference);

// Multiset-overlap F1 over word tokens.
double token_f1(const std::string& candidate, const std::string& reference);

struct QualityResult {
    double cosine = 0.0;
    double em = 0.0;
    double f1 = 0.0;
    double loss = 1.0; // 1 - mean of the three
};

// Answer-quality loss of a candidate against a reference answer. Throws on
// an empty (no-word) reference; an empty candidate scores loss 1.
QualityResult quality_loss(const std::string& candidate, const std::string& reference);

} // namespace lab
