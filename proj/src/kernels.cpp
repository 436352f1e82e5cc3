#include "lab/kernels.h"

#include <algorithm>
#include <atomic>
#include <cmath>

#ifdef LAB_HAVE_OPENMP
#include <omp.h>
#endif

namespace lab::kernels {

namespace {
std::atomic<bool> g_parallel{true};
}

void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }

bool parallel_enabled() {
#ifdef LAB_HAVE_OPENMP
    return g_parallel.load(std::memory_order_relaxed);
#else
    return false;
#endif
}

int max_threads() {
#ifdef LAB_HAVE_OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void matvec(const double* W, size_t rows, size_t cols, const double* x, double* y) {
    parallel_for(rows, [&](size_t r) {
        const double* wr = W + r * cols;
        double acc = 0.0;
        for (size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
        y[r] = acc;
    });
}

void rmsnorm(const double* x, size_t n, double* out, double eps) {
    double ss = 0.0;
    for (size_t i = 0; i < n; ++i) ss += x[i] * x[i];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    for (size_t i = 0; i < n; ++i) out[i] = x[i] * inv;
}

double dot(const double* a, const double* b, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

void softmax_inplace(std::vector<double>& v) {
    if (v.empty()) return;
    const double mx = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (double& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (double& x : v) x /= sum;
}

void tanh_inplace(double* x, size_t n) {
    for (size_t i = 0; i < n; ++i) x[i] = std::tanh(x[i]);
}

} // namespace lab::kernels
