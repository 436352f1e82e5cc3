// Word-level overlap metrics: ROUGE-1/2/L, bag-of-words cosine, EM, token F1.
#include "lab/text_metrics.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <stdexcept>

namespace lab {

namespace {

double f_measure(double match, double cand_total, double ref_total) {
    if (match <= 0.0 || cand_total <= 0.0 || ref_total <= 0.0) return 0.0;
    const double p = match / cand_total;
    const double r = match / ref_total;
    return 2.0 * p * r / (p + r);
}

std::map<std::vector<std::string>, size_t> ngram_counts(const std::vector<std::string>& toks,
                                                        size_t n) {
    std::map<std::vector<std::string>, size_t> counts;
    if (toks.size() >= n && n > 0)
        for (size_t i = 0; i + n <= toks.size(); ++i)
            ++counts[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)];
    return counts;
}

std::map<std::string, size_t> word_counts(const std::vector<std::string>& toks) {
    std::map<std::string, size_t> counts;
    for (const auto& t : toks) ++counts[t];
    return counts;
}

} // namespace

std::vector<std::string> word_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

double rouge_n_f1(const std::vector<std::string>& candidate,
                  const std::vector<std::string>& reference, size_t n) {
    const auto cand = ngram_counts(candidate, n);
    const auto ref = ngram_counts(reference, n);
    size_t match = 0, cand_total = 0, ref_total = 0;
    for (const auto& [g, c] : cand) {
        cand_total += c;
        auto it = ref.find(g);
        if (it != ref.end()) match += std::min(c, it->second); // clipped overlap
    }
    for (const auto& [g, c] : ref) ref_total += c;
    return f_measure(static_cast<double>(match), static_cast<double>(cand_total),
                     static_cast<double>(ref_total));
}

double rouge_l_f1(const std::vector<std::string>& candidate,
                  const std::vector<std::string>& reference) {
    const size_t n = candidate.size(), m = reference.size();
    if (n == 0 || m == 0) return 0.0;
    // Classic LCS dynamic program, one rolling row.
    std::vector<size_t> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j)
            cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1
                                                          : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return f_measure(static_cast<double>(prev[m]), static_cast<double>(n),
                     static_cast<double>(m));
}

FidelityResult fidelity_loss(const std::string& candidate,
                             const std::vector<std::string>& documents) {
    std::string joined;
    for (const auto& d : documents) {
        if (!joined.empty()) joined.push_back(' ');
        joined += d;
    }
    const auto cand = word_tokens(candidate);
    const auto ref = word_tokens(joined);
    FidelityResult out;
    if (cand.empty()) return out; // maximal loss by construction
    out.rouge1 = rouge_n_f1(cand, ref, 1);
    out.rouge2 = rouge_n_f1(cand, ref, 2);
    out.rouge_l = rouge_l_f1(cand, ref);
    out.loss = 1.0 - (out.rouge1 + out.rouge2 + out.rouge_l) / 3.0;
    return out;
}

double cosine_bag_of_words(const std::string& a, const std::string& b) {
    const auto ca = word_counts(word_tokens(a));
    const auto cb = word_counts(word_tokens(b));
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [w, c] : ca) {
        na += static_cast<double>(c) * static_cast<double>(c);
        auto it = cb.find(w);
        if (it != cb.end()) dot += static_cast<double>(c) * static_cast<double>(it->second);
    }
    for (const auto& [w, c] : cb) nb += static_cast<double>(c) * static_cast<double>(c);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

double exact_match(const std::string& candidate, const std::string& reference) {
    return word_tokens(candidate) == word_tokens(reference) ? 1.0 : 0.0;
}

double token_f1(const std::string& candidate, const std::string& reference) {
    const auto cand = word_tokens(candidate);
    const auto ref = word_tokens(reference);
    const auto cc = word_counts(cand);
    const auto rc = word_counts(ref);
    size_t same = 0;
    for (const auto& [w, c] : cc) {
        auto it = rc.find(w);
        if (it != rc.end()) same += std::min(c, it->second);
    }
    return f_measure(static_cast<double>(same), static_cast<double>(cand.size()),
                     static_cast<double>(ref.size()));
}

QualityResult quality_loss(const std::string& candidate, const std::string& reference) {
    if (word_tokens(reference).empty())
        throw std::invalid_argument("quality_loss needs a non-empty reference answer");
    QualityResult out;
    out.cosine = cosine_bag_of_words(candidate, reference);
    out.em = exact_match(candidate, reference);
    out.f1 = token_f1(candidate, reference);
    out.loss = 1.0 - (out.cosine + out.em + out.f1) / 3.0;
    return out;
}

} // namespace lab
