#include "elt/kernels.hpp"

#include <atomic>

namespace elt::kernels {

namespace {
std::atomic<bool> g_parallel{true};
}

bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }

void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }

void set_threads(int n) {
#ifdef _OPENMP
    if (n == 1) {
        set_parallel(false);
    } else if (n > 1) {
        set_parallel(true);
        omp_set_num_threads(n);
    } else {
        set_parallel(true);
    }
#else
    (void)n;
#endif
}

int max_threads() {
#ifdef _OPENMP
    return parallel_enabled() ? omp_get_max_threads() : 1;
#else
    return 1;
#endif
}

}  // namespace elt::kernels
