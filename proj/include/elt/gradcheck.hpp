#pragma once

#include "elt/tensor.hpp"

namespace elt {

// Central-difference gradient of a scalar-valued deterministic function.
// Serves as the independent oracle for every backward rule in the library.
template <class T, class F>
Tensor<T> finite_diff_grad(F&& f, Tensor<T> x, T h) {
    if (h <= T(0)) throw UsageError("finite_diff_grad requires h > 0");
    Tensor<T> g = Tensor<T>::zeros(x.shape());
    auto xd = x.data();
    auto gd = g.data();
    for (i64 i = 0; i < x.numel(); ++i) {
        const T saved = xd[i];
        xd[i] = saved + h;
        const T fp = f(x);
        xd[i] = saved - h;
        const T fm = f(x);
        xd[i] = saved;
        gd[i] = (fp - fm) / (T(2) * h);
    }
    return g;
}

// Max relative disagreement between two gradients, with an absolute floor so
// near-zero entries do not blow up the ratio.
template <class T>
T max_rel_err(std::span<const T> got, std::span<const T> want, T floor = T(1e-6)) {
    T worst = T(0);
    for (std::size_t i = 0; i < got.size(); ++i) {
        const T denom = std::max(std::abs(want[i]), floor);
        const T err = std::abs(got[i] - want[i]) / denom;
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace elt
