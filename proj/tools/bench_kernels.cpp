// Times the serial reference kernels against the OpenMP versions.
#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "elt/kernels.hpp"
#include "elt/rng.hpp"

using namespace elt;
using kernels::i64;

namespace {

double now_ms() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

template <class F>
double time_ms(int reps, F&& f) {
    f();  // warmup
    const double t0 = now_ms();
    for (int r = 0; r < reps; ++r) f();
    return (now_ms() - t0) / reps;
}

void report(const char* name, double serial_ms, double par_ms) {
    std::printf("%-24s serial %9.3f ms   openmp %9.3f ms   speedup %5.2fx\n", name, serial_ms,
                par_ms, serial_ms / par_ms);
}

}  // namespace

int main(int argc, char** argv) {
    int reps = 5;
    if (argc > 1) reps = std::stoi(argv[1]);
    Rng rng(1);

    std::printf("threads available: %d\n", kernels::max_threads());

    {
        const i64 m = 512, k = 512, n = 512;
        std::vector<float> a(m * k), b(k * n), c(m * n);
        for (auto& v : a) v = float(rng.normal());
        for (auto& v : b) v = float(rng.normal());
        const double ts = time_ms(reps, [&] {
            kernels::serial::gemm_nn(a.data(), b.data(), c.data(), m, k, n, false);
        });
        const double tp = time_ms(reps, [&] {
            kernels::par::gemm_nn(a.data(), b.data(), c.data(), m, k, n, false);
        });
        report("gemm_nn 512^3 f32", ts, tp);
    }
    {
        const i64 rows = 4096, cols = 512;
        std::vector<float> x(rows * cols), y(rows * cols);
        for (auto& v : x) v = float(rng.normal());
        const double ts = time_ms(reps, [&] {
            kernels::serial::softmax(x.data(), y.data(), rows, cols, 1);
        });
        const double tp = time_ms(reps, [&] {
            kernels::par::softmax(x.data(), y.data(), rows, cols, 1);
        });
        report("softmax 4096x512", ts, tp);
    }
    {
        const i64 rows = 4096, cols = 512;
        std::vector<float> x(rows * cols), y(rows * cols), g(cols, 1.0f), b(cols, 0.0f);
        for (auto& v : x) v = float(rng.normal());
        const double ts = time_ms(reps, [&] {
            kernels::serial::layer_norm(x.data(), g.data(), b.data(), y.data(), rows, cols,
                                        1e-5f);
        });
        const double tp = time_ms(reps, [&] {
            kernels::par::layer_norm(x.data(), g.data(), b.data(), y.data(), rows, cols, 1e-5f);
        });
        report("layer_norm 4096x512", ts, tp);
    }
    {
        const i64 n = 1 << 22;
        std::vector<float> x(n), y(n);
        for (auto& v : x) v = float(rng.normal());
        const double ts = time_ms(reps, [&] { kernels::serial::gelu(x.data(), y.data(), n); });
        const double tp = time_ms(reps, [&] { kernels::par::gelu(x.data(), y.data(), n); });
        report("gelu 4M f32", ts, tp);
    }
    return 0;
}
