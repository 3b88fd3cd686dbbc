#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <utility>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "elt/errors.hpp"

// Dense kernels in two flavours: a plain-loop serial reference
// (kernels::serial) and OpenMP-parallel versions (kernels::par) used by
// default. Both compute every output element with the same accumulation
// order, so results are bit-identical regardless of thread count; the
// parallel loops only split independent output elements across threads.
// Reductions that scatter (embedding/gather backward) stay serial.

namespace elt::kernels {

using i64 = std::int64_t;

bool parallel_enabled();
void set_parallel(bool on);
void set_threads(int n);  // 0 = library default
int max_threads();

inline constexpr i64 kParGrain = 256;  // skip omp dispatch for tiny loops

template <class F>
inline void parallel_for(i64 n, i64 grain, F&& body) {
#ifdef _OPENMP
    if (parallel_enabled() && n >= grain) {
#pragma omp parallel for schedule(static)
        for (i64 i = 0; i < n; ++i) body(i);
        return;
    }
#endif
    for (i64 i = 0; i < n; ++i) body(i);
}

template <class F>
inline void parallel_for(i64 n, F&& body) {
    parallel_for(n, kParGrain, std::forward<F>(body));
}

// open a parallel region for a gemm-shaped loop only when the work is real
inline i64 gemm_grain(i64 k, i64 n) {
    const i64 row_cost = k * n;
    return row_cost >= 4096 ? 2 : (row_cost >= 512 ? 8 : kParGrain);
}

namespace detail {

template <class T>
inline T gelu_scalar(T x) {
    // tanh approximation
    const T c = T(0.7978845608028654);  // sqrt(2/pi)
    const T u = c * (x + T(0.044715) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(u));
}

template <class T>
inline T gelu_grad_scalar(T x) {
    const T c = T(0.7978845608028654);
    const T u = c * (x + T(0.044715) * x * x * x);
    const T t = std::tanh(u);
    const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

template <class T>
inline T sigmoid_scalar(T x) {
    if (x >= T(0)) {
        const T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

// One softmax row; max-subtraction for stability. Returns false when the
// row is poisoned (NaN / +inf input, or every entry -inf): the exp sum then
// fails the s > 0 check or is NaN itself.
template <class T>
inline bool softmax_row(const T* x, T* y, i64 n, i64 stride) {
    T m = x[0];
    for (i64 j = 1; j < n; ++j) m = x[j * stride] > m ? x[j * stride] : m;
    if (std::isnan(m) || (std::isinf(m) && m > T(0))) return false;
    T s = T(0);
    for (i64 j = 0; j < n; ++j) {
        const T e = std::exp(x[j * stride] - m);
        y[j * stride] = e;
        s += e;
    }
    if (!(s > T(0)) || std::isnan(s)) return false;
    const T inv = T(1) / s;
    for (i64 j = 0; j < n; ++j) y[j * stride] *= inv;
    return true;
}

// Additive mask fused into the row scan; avoids materializing x + mask.
template <class T>
inline bool softmax_row_masked(const T* x, const T* mask, T* y, i64 n) {
    T m = x[0] + mask[0];
    for (i64 j = 1; j < n; ++j) {
        const T v = x[j] + mask[j];
        m = v > m ? v : m;
    }
    if (std::isnan(m) || (std::isinf(m) && m > T(0))) return false;
    T s = T(0);
    for (i64 j = 0; j < n; ++j) {
        const T e = std::exp(x[j] + mask[j] - m);
        y[j] = e;
        s += e;
    }
    if (!(s > T(0)) || std::isnan(s)) return false;
    const T inv = T(1) / s;
    for (i64 j = 0; j < n; ++j) y[j] *= inv;
    return true;
}

template <class T>
inline bool log_softmax_row(const T* x, T* y, i64 n, i64 stride) {
    T m = x[0];
    for (i64 j = 1; j < n; ++j) m = x[j * stride] > m ? x[j * stride] : m;
    if (std::isnan(m) || (std::isinf(m) && m > T(0))) return false;
    T s = T(0);
    for (i64 j = 0; j < n; ++j) s += std::exp(x[j * stride] - m);
    if (!(s > T(0)) || std::isnan(s)) return false;
    const T lse = m + std::log(s);
    for (i64 j = 0; j < n; ++j) y[j * stride] = x[j * stride] - lse;
    return true;
}

template <class T>
inline void layer_norm_row(const T* x, const T* gain, const T* bias, T* y, i64 n, T eps) {
    T mean = T(0);
    for (i64 j = 0; j < n; ++j) mean += x[j];
    mean /= T(n);
    T var = T(0);
    for (i64 j = 0; j < n; ++j) {
        const T d = x[j] - mean;
        var += d * d;
    }
    var /= T(n);
    const T inv = T(1) / std::sqrt(var + eps);
    for (i64 j = 0; j < n; ++j) y[j] = gain[j] * ((x[j] - mean) * inv) + bias[j];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Serial reference. Textbook loops, no pragmas.
// ---------------------------------------------------------------------------
namespace serial {

// C(m,n) = A(m,k) * B(k,n), row-major. accumulate=false overwrites C.
template <class T>
void gemm_nn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool accumulate) {
    for (i64 i = 0; i < m; ++i) {
        for (i64 j = 0; j < n; ++j) {
            T acc = accumulate ? c[i * n + j] : T(0);
            for (i64 p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = acc;
        }
    }
}

// C(m,n) = A(m,k) * B(n,k)^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool accumulate) {
    for (i64 i = 0; i < m; ++i) {
        for (i64 j = 0; j < n; ++j) {
            T acc = accumulate ? c[i * n + j] : T(0);
            for (i64 p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
            c[i * n + j] = acc;
        }
    }
}

// C(m,n) = A(k,m)^T * B(k,n)
template <class T>
void gemm_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool accumulate) {
    for (i64 i = 0; i < m; ++i) {
        for (i64 j = 0; j < n; ++j) {
            T acc = accumulate ? c[i * n + j] : T(0);
            for (i64 p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
            c[i * n + j] = acc;
        }
    }
}

template <class T>
bool softmax(const T* x, T* y, i64 outer, i64 n, i64 inner) {
    bool ok = true;
    for (i64 o = 0; o < outer; ++o)
        for (i64 i = 0; i < inner; ++i)
            ok &= detail::softmax_row(x + o * n * inner + i, y + o * n * inner + i, n, inner);
    return ok;
}

template <class T>
bool softmax_masked(const T* x, const T* mask, i64 mask_rows, T* y, i64 rows, i64 n) {
    bool ok = true;
    for (i64 r = 0; r < rows; ++r)
        ok &= detail::softmax_row_masked(x + r * n, mask + (r % mask_rows) * n, y + r * n, n);
    return ok;
}

template <class T>
bool log_softmax(const T* x, T* y, i64 outer, i64 n, i64 inner) {
    bool ok = true;
    for (i64 o = 0; o < outer; ++o)
        for (i64 i = 0; i < inner; ++i)
            ok &= detail::log_softmax_row(x + o * n * inner + i, y + o * n * inner + i, n,
                                          inner);
    return ok;
}

template <class T>
void layer_norm(const T* x, const T* gain, const T* bias, T* y, i64 rows, i64 n, T eps) {
    for (i64 r = 0; r < rows; ++r)
        detail::layer_norm_row(x + r * n, gain, bias, y + r * n, n, eps);
}

template <class T>
void gelu(const T* x, T* y, i64 nelem) {
    for (i64 i = 0; i < nelem; ++i) y[i] = detail::gelu_scalar(x[i]);
}

template <class T>
void sigmoid(const T* x, T* y, i64 nelem) {
    for (i64 i = 0; i < nelem; ++i) y[i] = detail::sigmoid_scalar(x[i]);
}

// Batched variants; the per-operand strides select the slab per batch
// element (stride 0 shares one operand across the batch).
template <class T>
void bgemm_nn(const T* a, i64 as, const T* b, i64 bs, T* c, i64 cs, i64 batch, i64 m, i64 k,
              i64 n, bool accumulate) {
    for (i64 bt = 0; bt < batch; ++bt)
        gemm_nn(a + bt * as, b + bt * bs, c + bt * cs, m, k, n, accumulate);
}

template <class T>
void bgemm_nt(const T* a, i64 as, const T* b, i64 bs, T* c, i64 cs, i64 batch, i64 m, i64 k,
              i64 n, bool accumulate) {
    for (i64 bt = 0; bt < batch; ++bt)
        gemm_nt(a + bt * as, b + bt * bs, c + bt * cs, m, k, n, accumulate);
}

template <class T>
void bgemm_tn(const T* a, i64 as, const T* b, i64 bs, T* c, i64 cs, i64 batch, i64 m, i64 k,
              i64 n, bool accumulate) {
    for (i64 bt = 0; bt < batch; ++bt)
        gemm_tn(a + bt * as, b + bt * bs, c + bt * cs, m, k, n, accumulate);
}

}  // namespace serial

// ---------------------------------------------------------------------------
// Parallel kernels. Same per-element arithmetic, rows split across threads.
// The ikj loop order in gemm_nn keeps B accesses contiguous; the per-element
// accumulation order over p is identical to the serial reference.
// ---------------------------------------------------------------------------
namespace par {

template <class T>
void gemm_nn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool accumulate) {
    parallel_for(m, [&](i64 i) {
        T* crow = c + i * n;
        if (!accumulate)
            for (i64 j = 0; j < n; ++j) crow[j] = T(0);
        const T* arow = a + i * k;
        for (i64 p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    });
}

template <class T>
void gemm_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool accumulate) {
    parallel_for(m, [&](i64 i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (i64 j = 0; j < n; ++j) {
            T acc = accumulate ? crow[j] : T(0);
            const T* brow = b + j * k;
            for (i64 p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = acc;
        }
    });
}

template <class T>
void gemm_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool accumulate) {
    parallel_for(m, [&](i64 i) {
        T* crow = c + i * n;
        for (i64 j = 0; j < n; ++j) {
            T acc = accumulate ? crow[j] : T(0);
            for (i64 p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
            crow[j] = acc;
        }
    });
}

template <class T>
bool softmax(const T* x, T* y, i64 outer, i64 n, i64 inner) {
    std::atomic<bool> bad{false};
    parallel_for(outer * inner, [&](i64 t) {
        const i64 o = t / inner, i = t % inner;
        if (!detail::softmax_row(x + o * n * inner + i, y + o * n * inner + i, n, inner))
            bad.store(true, std::memory_order_relaxed);
    });
    return !bad.load();
}

template <class T>
bool softmax_masked(const T* x, const T* mask, i64 mask_rows, T* y, i64 rows, i64 n) {
    std::atomic<bool> bad{false};
    parallel_for(rows, [&](i64 r) {
        if (!detail::softmax_row_masked(x + r * n, mask + (r % mask_rows) * n, y + r * n, n))
            bad.store(true, std::memory_order_relaxed);
    });
    return !bad.load();
}

template <class T>
bool log_softmax(const T* x, T* y, i64 outer, i64 n, i64 inner) {
    std::atomic<bool> bad{false};
    parallel_for(outer * inner, [&](i64 t) {
        const i64 o = t / inner, i = t % inner;
        if (!detail::log_softmax_row(x + o * n * inner + i, y + o * n * inner + i, n, inner))
            bad.store(true, std::memory_order_relaxed);
    });
    return !bad.load();
}

template <class T>
void layer_norm(const T* x, const T* gain, const T* bias, T* y, i64 rows, i64 n, T eps) {
    parallel_for(rows, [&](i64 r) {
        detail::layer_norm_row(x + r * n, gain, bias, y + r * n, n, eps);
    });
}

template <class T>
void gelu(const T* x, T* y, i64 nelem) {
    parallel_for(nelem, [&](i64 i) { y[i] = detail::gelu_scalar(x[i]); });
}

template <class T>
void sigmoid(const T* x, T* y, i64 nelem) {
    parallel_for(nelem, [&](i64 i) { y[i] = detail::sigmoid_scalar(x[i]); });
}

// Batched gemms parallelize over the flattened (batch, row) space so small
// per-batch matrices still use every thread. Per-element accumulation order
// is unchanged from the serial reference.
template <class T>
void bgemm_nn(const T* a, i64 as, const T* b, i64 bs, T* c, i64 cs, i64 batch, i64 m, i64 k,
              i64 n, bool accumulate) {
    parallel_for(batch * m, gemm_grain(k, n), [&](i64 r) {
        const i64 bt = r / m, i = r % m;
        const T* arow = a + bt * as + i * k;
        const T* bbl = b + bt * bs;
        T* crow = c + bt * cs + i * n;
        if (!accumulate)
            for (i64 j = 0; j < n; ++j) crow[j] = T(0);
        for (i64 p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = bbl + p * n;
            for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    });
}

template <class T>
void bgemm_nt(const T* a, i64 as, const T* b, i64 bs, T* c, i64 cs, i64 batch, i64 m, i64 k,
              i64 n, bool accumulate) {
    parallel_for(batch * m, gemm_grain(k, n), [&](i64 r) {
        const i64 bt = r / m, i = r % m;
        const T* arow = a + bt * as + i * k;
        const T* bbl = b + bt * bs;
        T* crow = c + bt * cs + i * n;
        for (i64 j = 0; j < n; ++j) {
            T acc = accumulate ? crow[j] : T(0);
            const T* brow = bbl + j * k;
            for (i64 p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = acc;
        }
    });
}

template <class T>
void bgemm_tn(const T* a, i64 as, const T* b, i64 bs, T* c, i64 cs, i64 batch, i64 m, i64 k,
              i64 n, bool accumulate) {
    parallel_for(batch * m, gemm_grain(k, n), [&](i64 r) {
        const i64 bt = r / m, i = r % m;
        const T* abl = a + bt * as;
        const T* bbl = b + bt * bs;
        T* crow = c + bt * cs + i * n;
        for (i64 j = 0; j < n; ++j) {
            T acc = accumulate ? crow[j] : T(0);
            for (i64 p = 0; p < k; ++p) acc += abl[p * m + i] * bbl[p * n + j];
            crow[j] = acc;
        }
    });
}

}  // namespace par

// Default entry points: parallel when enabled, serial otherwise. parallel_for
// already falls back below the grain size, so these just forward to par.
template <class T>
inline void gemm_nn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool acc = false) {
    par::gemm_nn(a, b, c, m, k, n, acc);
}
template <class T>
inline void gemm_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool acc = false) {
    par::gemm_nt(a, b, c, m, k, n, acc);
}
template <class T>
inline void gemm_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool acc = false) {
    par::gemm_tn(a, b, c, m, k, n, acc);
}
template <class T>
inline bool softmax(const T* x, T* y, i64 outer, i64 n, i64 inner) {
    return par::softmax(x, y, outer, n, inner);
}
template <class T>
inline bool softmax_masked(const T* x, const T* mask, i64 mask_rows, T* y, i64 rows, i64 n) {
    return par::softmax_masked(x, mask, mask_rows, y, rows, n);
}
template <class T>
inline bool log_softmax(const T* x, T* y, i64 outer, i64 n, i64 inner) {
    return par::log_softmax(x, y, outer, n, inner);
}
template <class T>
inline void layer_norm(const T* x, const T* g, const T* b, T* y, i64 rows, i64 n, T eps) {
    par::layer_norm(x, g, b, y, rows, n, eps);
}
template <class T>
inline void gelu(const T* x, T* y, i64 n) {
    par::gelu(x, y, n);
}
template <class T>
inline void sigmoid(const T* x, T* y, i64 n) {
    par::sigmoid(x, y, n);
}
template <class T>
inline void bgemm_nn(const T* a, i64 as, const T* b, i64 bs, T* c, i64 cs, i64 batch, i64 m,
                     i64 k, i64 n, bool acc = false) {
    par::bgemm_nn(a, as, b, bs, c, cs, batch, m, k, n, acc);
}
template <class T>
inline void bgemm_nt(const T* a, i64 as, const T* b, i64 bs, T* c, i64 cs, i64 batch, i64 m,
                     i64 k, i64 n, bool acc = false) {
    par::bgemm_nt(a, as, b, bs, c, cs, batch, m, k, n, acc);
}
template <class T>
inline void bgemm_tn(const T* a, i64 as, const T* b, i64 bs, T* c, i64 cs, i64 batch, i64 m,
                     i64 k, i64 n, bool acc = false) {
    par::bgemm_tn(a, as, b, bs, c, cs, batch, m, k, n, acc);
}

}  // namespace elt::kernels
