#pragma once
#include <cassert>
#include <cstddef>
#include <vector>

namespace lab {

// Lower-triangular attention storage: row i holds entries for keys 0..i.
// Reads above the diagonal return 0 (causal masking). Row sums and per-row
// entropy contributions are cached because ATLAS consumes them once per
// generated token and recomputing them is the difference between O(S^2) and
// O(S^3) over a long run. Cached values are produced by one canonical loop
// (recompute_row_stats) so every caller sees identical floating-point
// results.
class CausalMatrix {
public:
    CausalMatrix() = default;

    size_t rows() const { return rows_.size(); }

    // Entry (i, j); zero above the diagonal and for absent rows.
    double at(size_t i, size_t j) const {
        if (i >= rows_.size() || j >= rows_[i].size()) return 0.0;
        return rows_[i][j];
    }

    const std::vector<double>& row(size_t i) const { return rows_[i]; }

    // Appends a row; `width` may be i+1 (uncompressed) or smaller when the
    // stream's cache was compressed before this row was computed.
    void append_row(std::vector<double> entries) {
        rows_.push_back(std::move(entries));
        row_sum_.push_back(0.0);
        row_entropy_.push_back(0.0);
        recompute_row_stats(rows_.size() - 1);
    }

    // Sum of stored entries of row i (the row's causal support).
    double row_sum(size_t i) const { return row_sum_[i]; }

    // -sum_j a * log(a + eps) over stored entries of row i.
    double row_entropy(size_t i) const { return row_entropy_[i]; }

    // Removes the given column indices (ascending) from every row and the
    // given row indices entirely; used by cache compression so the matrix
    // keeps tracking exactly the retained tokens.
    void evict(const std::vector<size_t>& dead_rows_and_cols);

    // Mutable fixture access for tests building synthetic traces.
    void set(size_t i, size_t j, double v) {
        assert(i < rows_.size() && j < rows_[i].size());
        rows_[i][j] = v;
        recompute_row_stats(i);
    }

    static constexpr double kEntropyEps = 1e-10;

private:
    void recompute_row_stats(size_t i);

    std::vector<std::vector<double>> rows_;
    std::vector<double> row_sum_;
    std::vector<double> row_entropy_;
};

} // namespace lab
