// Benchmark of the OpenMP kernels against their serial references, plus the
// Key-Experts selection against flat top-K across expert counts. The serial
// and parallel paths must agree bitwise; this binary checks that while
// timing.

#include <chrono>
#include <cstdio>
#include <functional>

#include <omp.h>

#include "meft/adapter.hpp"
#include "meft/experts.hpp"
#include "meft/kernels.hpp"
#include "meft/rng.hpp"

using namespace meft;

namespace {

double time_best_of(int reps, const std::function<void()>& fn) {
    double best = 1e300;
    for (int i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (s < best) best = s;
    }
    return best;
}

void bench_matmul(index_t m, index_t k, index_t n) {
    SeededRng rng(7);
    const Matrix a = rng.uniform_matrix(m, k, -1.0, 1.0);
    const Matrix b = rng.uniform_matrix(k, n, -1.0, 1.0);

    Matrix serial_out, parallel_out;
    const double serial_s = time_best_of(3, [&] { serial_out = ref::matmul(a, b); });
    const double parallel_s = time_best_of(3, [&] { parallel_out = matmul(a, b); });
    const bool same = serial_out == parallel_out;
    const double flops = 2.0 * static_cast<double>(m) * static_cast<double>(k) * static_cast<double>(n);
    std::printf("matmul %4lldx%4lldx%4lld  serial %8.3f ms  omp %8.3f ms  speedup %4.2fx  %6.2f GFLOP/s  bitwise=%s\n",
                static_cast<long long>(m), static_cast<long long>(k), static_cast<long long>(n),
                serial_s * 1e3, parallel_s * 1e3, serial_s / parallel_s, flops / parallel_s * 1e-9,
                same ? "yes" : "NO");
}

void bench_selection(index_t tokens, index_t d, index_t r, index_t kk, index_t k) {
    SeededRng rng(11);
    HiddenBatch h(1, tokens, rng.uniform_matrix(tokens, d, -1.0, 1.0));
    AdapterWeights adapter;
    adapter.w_a = rng.uniform_matrix(d, r, -1.0, 1.0);
    adapter.w_b = Matrix(r, d);

    const double flat_s = time_best_of(3, [&] { topk_select(h, adapter.w_a, k); });
    std::printf("selection T=%lld d=%lld r=%lld K=%lld   flat top-K %8.3f ms\n",
                static_cast<long long>(tokens), static_cast<long long>(d),
                static_cast<long long>(r), static_cast<long long>(k), flat_s * 1e3);

    for (index_t n : {8, 32, 64, 128, 512}) {
        if (r % n != 0) continue;
        Router router{rng.uniform_matrix(n, d, -1.0, 1.0)};
        const ExpertPartition part = ExpertPartition::make(r, n);
        const double ke_s =
            time_best_of(3, [&] { ke_select(h, router, part, adapter, kk, k, nullptr); });
        const FlopReport fr = cpu_flops(tokens, d, n, r, std::min(kk, n));
        std::printf("  key-experts N=%4lld  %8.3f ms  (%.1fx vs flat, %lld MAC)\n",
                    static_cast<long long>(n), ke_s * 1e3, flat_s / ke_s,
                    static_cast<long long>(fr.total));
    }
}

}  // namespace

int main() {
    std::printf("threads: %d\n", omp_get_max_threads());
    bench_matmul(64, 64, 2048);
    bench_matmul(256, 256, 256);
    bench_matmul(512, 64, 512);
    bench_selection(64, 64, 2048, 4, 64);
    bench_selection(256, 64, 4096, 4, 64);
    return 0;
}
