#include <doctest.h>

#include <cmath>
#include <vector>

#include "elt/kernels.hpp"
#include "elt/rng.hpp"

using namespace elt;
using kernels::i64;

namespace {

// Independent triple-loop reference for the gemm oracle tests.
template <class T>
std::vector<T> naive_matmul(const std::vector<T>& a, const std::vector<T>& b, i64 m, i64 k,
                            i64 n) {
    std::vector<T> c(m * n, T(0));
    for (i64 i = 0; i < m; ++i)
        for (i64 j = 0; j < n; ++j)
            for (i64 p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

template <class T>
std::vector<T> random_vec(Rng& rng, i64 n) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.normal());
    return v;
}

}  // namespace

TEST_CASE("gemm_nn matches the triple-loop oracle") {
    Rng rng(7);
    for (int trial = 0; trial < 8; ++trial) {
        const i64 m = 1 + rng.uniform_int(12);
        const i64 k = 1 + rng.uniform_int(12);
        const i64 n = 1 + rng.uniform_int(12);
        auto a = random_vec<double>(rng, m * k);
        auto b = random_vec<double>(rng, k * n);
        std::vector<double> c(m * n);
        kernels::serial::gemm_nn(a.data(), b.data(), c.data(), m, k, n, false);
        auto want = naive_matmul(a, b, m, k, n);
        for (i64 i = 0; i < m * n; ++i) CHECK(c[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
}

TEST_CASE("gemm transpose variants agree with explicit transposition") {
    Rng rng(11);
    const i64 m = 5, k = 7, n = 3;
    auto a = random_vec<double>(rng, m * k);
    auto b = random_vec<double>(rng, k * n);

    // nt: feed b^T stored row-major as (n, k)
    std::vector<double> bt(n * k);
    for (i64 i = 0; i < k; ++i)
        for (i64 j = 0; j < n; ++j) bt[j * k + i] = b[i * n + j];
    std::vector<double> c1(m * n), c2(m * n);
    kernels::serial::gemm_nn(a.data(), b.data(), c1.data(), m, k, n, false);
    kernels::serial::gemm_nt(a.data(), bt.data(), c2.data(), m, k, n, false);
    for (i64 i = 0; i < m * n; ++i) CHECK(c1[i] == doctest::Approx(c2[i]));

    // tn: feed a^T stored row-major as (k, m)
    std::vector<double> at(k * m);
    for (i64 i = 0; i < m; ++i)
        for (i64 j = 0; j < k; ++j) at[j * m + i] = a[i * k + j];
    std::vector<double> c3(m * n);
    kernels::serial::gemm_tn(at.data(), b.data(), c3.data(), m, k, n, false);
    for (i64 i = 0; i < m * n; ++i) CHECK(c1[i] == doctest::Approx(c3[i]));
}

TEST_CASE("parallel kernels are bit-identical to the serial reference") {
    Rng rng(23);
    const i64 m = 67, k = 41, n = 53;
    auto a = random_vec<float>(rng, m * k);
    auto b = random_vec<float>(rng, k * n);
    std::vector<float> cs(m * n), cp(m * n);

    kernels::set_parallel(true);
    kernels::serial::gemm_nn(a.data(), b.data(), cs.data(), m, k, n, false);
    kernels::par::gemm_nn(a.data(), b.data(), cp.data(), m, k, n, false);
    CHECK(cs == cp);

    // reinterpret b's storage as (n, k) for the transposed layout
    kernels::serial::gemm_nt(a.data(), b.data(), cs.data(), m, k, n, false);
    kernels::par::gemm_nt(a.data(), b.data(), cp.data(), m, k, n, false);
    CHECK(cs == cp);

    const i64 rows = 300, cols = 37;
    auto x = random_vec<float>(rng, rows * cols);
    std::vector<float> ys(rows * cols), yp(rows * cols);
    kernels::serial::softmax(x.data(), ys.data(), rows, cols, 1);
    kernels::par::softmax(x.data(), yp.data(), rows, cols, 1);
    CHECK(ys == yp);

    kernels::serial::log_softmax(x.data(), ys.data(), rows, cols, 1);
    kernels::par::log_softmax(x.data(), yp.data(), rows, cols, 1);
    CHECK(ys == yp);

    auto gain = random_vec<float>(rng, cols);
    auto bias = random_vec<float>(rng, cols);
    kernels::serial::layer_norm(x.data(), gain.data(), bias.data(), ys.data(), rows, cols,
                                1e-5f);
    kernels::par::layer_norm(x.data(), gain.data(), bias.data(), yp.data(), rows, cols, 1e-5f);
    CHECK(ys == yp);

    kernels::serial::gelu(x.data(), ys.data(), rows * cols);
    kernels::par::gelu(x.data(), yp.data(), rows * cols);
    CHECK(ys == yp);

    kernels::serial::sigmoid(x.data(), ys.data(), rows * cols);
    kernels::par::sigmoid(x.data(), yp.data(), rows * cols);
    CHECK(ys == yp);
}

TEST_CASE("batched gemm kernels are bit-identical to the serial reference") {
    Rng rng(31);
    const i64 batch = 6, m = 17, k = 9, n = 13;
    auto a = random_vec<float>(rng, batch * m * k);
    auto b = random_vec<float>(rng, batch * k * n);
    auto bshared = random_vec<float>(rng, k * n);
    std::vector<float> cs(batch * m * n), cp(batch * m * n);

    kernels::serial::bgemm_nn(a.data(), m * k, b.data(), k * n, cs.data(), m * n, batch, m, k,
                              n, false);
    kernels::par::bgemm_nn(a.data(), m * k, b.data(), k * n, cp.data(), m * n, batch, m, k, n,
                           false);
    CHECK(cs == cp);

    kernels::serial::bgemm_nn(a.data(), m * k, bshared.data(), 0, cs.data(), m * n, batch, m,
                              k, n, false);
    kernels::par::bgemm_nn(a.data(), m * k, bshared.data(), 0, cp.data(), m * n, batch, m, k,
                           n, false);
    CHECK(cs == cp);

    auto bt = random_vec<float>(rng, batch * n * k);
    kernels::serial::bgemm_nt(a.data(), m * k, bt.data(), n * k, cs.data(), m * n, batch, m, k,
                              n, false);
    kernels::par::bgemm_nt(a.data(), m * k, bt.data(), n * k, cp.data(), m * n, batch, m, k, n,
                           false);
    CHECK(cs == cp);

    auto at = random_vec<float>(rng, batch * k * m);
    kernels::serial::bgemm_tn(at.data(), k * m, b.data(), k * n, cs.data(), m * n, batch, m, k,
                              n, true);
    kernels::par::bgemm_tn(at.data(), k * m, b.data(), k * n, cp.data(), m * n, batch, m, k, n,
                           true);
    CHECK(cs == cp);

    // batched forward equals per-batch single gemms
    std::vector<float> single(m * n);
    for (i64 bt2 = 0; bt2 < batch; ++bt2) {
        kernels::serial::gemm_nn(a.data() + bt2 * m * k, b.data() + bt2 * k * n, single.data(),
                                 m, k, n, false);
        kernels::par::bgemm_nn(a.data(), m * k, b.data(), k * n, cp.data(), m * n, batch, m, k,
                               n, false);
        for (i64 i = 0; i < m * n; ++i) CHECK(single[i] == cp[bt2 * m * n + i]);
    }
}

TEST_CASE("softmax rows are stable and normalized") {
    std::vector<double> x = {1000.0, 0.0};
    std::vector<double> y(2);
    kernels::serial::softmax(x.data(), y.data(), 1, 2, 1);
    CHECK(y[0] == doctest::Approx(1.0));
    CHECK(y[1] == doctest::Approx(0.0));

    Rng rng(3);
    for (int t = 0; t < 50; ++t) {
        std::vector<double> row(16);
        for (auto& v : row) v = rng.normal() * 1e3;
        std::vector<double> out(16);
        kernels::serial::softmax(row.data(), out.data(), 1, 16, 1);
        double s = 0;
        for (double v : out) {
            CHECK(v >= 0.0);
            s += v;
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("gelu tanh approximation reference points") {
    CHECK(kernels::detail::gelu_scalar(0.0) == 0.0);
    CHECK(kernels::detail::gelu_scalar(3.0) == doctest::Approx(2.9964).epsilon(1e-3));
    CHECK(std::abs(kernels::detail::gelu_scalar(-10.0)) < 1e-3);
}
