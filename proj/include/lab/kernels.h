#pragma once
#include <cstddef>
#include <cstdint>
#include <vector>

namespace lab::kernels {

// Runtime switch between the OpenMP kernels and the serial reference path.
// Both paths compute every output element with identical per-element
// arithmetic order, so results are bit-identical; tests assert that and the
// bench target measures the difference.
void set_parallel(bool on);
bool parallel_enabled();
int max_threads();

// y[r] = sum_c W[r*cols + c] * x[c]   (row-major W)
void matvec(const double* W, size_t rows, size_t cols, const double* x, double* y);

// out = x / sqrt(mean(x^2) + eps); gain-free normalization.
void rmsnorm(const double* x, size_t n, double* out, double eps = 1e-6);

double dot(const double* a, const double* b, size_t n);

// In-place max-subtracted softmax over v.
void softmax_inplace(std::vector<double>& v);

// Elementwise tanh MLP activation applied in place.
void tanh_inplace(double* x, size_t n);

// Runs fn(i) for i in [0, n) — parallel when enabled, ordinary loop
// otherwise. fn must only write state owned by index i.
template <typename F>
void parallel_for(size_t n, F&& fn) {
#ifdef LAB_HAVE_OPENMP
    if (parallel_enabled() && n >= 2) {
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(n); ++i) fn(static_cast<size_t>(i));
        return;
    }
#endif
    for (size_t i = 0; i < n; ++i) fn(i);
}

} // namespace lab::kernels
