#include "lab/causal.h"

#include <algorithm>
#include <cmath>

namespace lab {

void CausalMatrix::recompute_row_stats(size_t i) {
    double sum = 0.0, ent = 0.0;
    for (double a : rows_[i]) {
        sum += a;
        ent -= a * std::log(a + kEntropyEps);
    }
    row_sum_[i] = sum;
    row_entropy_[i] = ent;
}

void CausalMatrix::evict(const std::vector<size_t>& dead) {
    if (dead.empty()) return;
    auto is_dead = [&](size_t idx) {
        return std::binary_search(dead.begin(), dead.end(), idx);
    };
    std::vector<std::vector<double>> next_rows;
    std::vector<double> next_sum, next_ent;
    next_rows.reserve(rows_.size() - dead.size());
    for (size_t i = 0; i < rows_.size(); ++i) {
        if (is_dead(i)) continue;
        std::vector<double> row;
        row.reserve(rows_[i].size());
        for (size_t j = 0; j < rows_[i].size(); ++j)
            if (!is_dead(j)) row.push_back(rows_[i][j]);
        next_rows.push_back(std::move(row));
    }
    rows_ = std::move(next_rows);
    row_sum_.assign(rows_.size(), 0.0);
    row_entropy_.assign(rows_.size(), 0.0);
    for (size_t i = 0; i < rows_.size(); ++i) recompute_row_stats(i);
}

} // namespace lab
