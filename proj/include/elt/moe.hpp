#pragma once

#include "elt/model.hpp"

namespace elt {

// Block-matrix decomposition of a dense one-hidden-layer MLP into M experts.
// Expert m owns rows [m*F/M, (m+1)*F/M) of W1/b1 and the matching columns of
// W2. The output bias b2 is shared and applied once at aggregation, so the
// all-expert unit-weight sum reproduces the dense module exactly.
template <class T>
struct ExpertSet {
    struct Expert {
        Tensor<T> w1;  // (F/M, D)
        Tensor<T> b1;  // (F/M)
        Tensor<T> w2;  // (D, F/M)
    };
    i64 experts = 0;  // M
    std::vector<Expert> bank;
    Tensor<T> b2;  // (D), shared output bias
};

template <class T>
ExpertSet<T> decompose_dense(const Tensor<T>& w1, const Tensor<T>& b1, const Tensor<T>& w2,
                             const Tensor<T>& b2, i64 experts) {
    const i64 f = w1.dim(0);
    const i64 d = w1.dim(1);
    if (w2.dim(0) != d || w2.dim(1) != f || b1.dim(0) != f || b2.dim(0) != d)
        throw ShapeError("decompose_dense: inconsistent dense MLP shapes");
    if (experts < 1 || f % experts != 0)
        throw ConfigError("expert count " + std::to_string(experts) +
                          " must divide mlp hidden extent " + std::to_string(f));
    const i64 slice = f / experts;

    ExpertSet<T> set;
    set.experts = experts;
    set.b2 = b2.clone();
    set.bank.reserve(experts);
    const T* pw1 = w1.data().data();
    const T* pb1 = b1.data().data();
    const T* pw2 = w2.data().data();
    for (i64 m = 0; m < experts; ++m) {
        typename ExpertSet<T>::Expert e;
        e.w1 = Tensor<T>::zeros({slice, d});
        e.b1 = Tensor<T>::zeros({slice});
        e.w2 = Tensor<T>::zeros({d, slice});
        T* ew1 = e.w1.data().data();
        T* eb1 = e.b1.data().data();
        T* ew2 = e.w2.data().data();
        for (i64 r = 0; r < slice; ++r) {
            const i64 src = m * slice + r;
            for (i64 c = 0; c < d; ++c) ew1[r * d + c] = pw1[src * d + c];
            eb1[r] = pb1[src];
        }
        for (i64 r = 0; r < d; ++r)
            for (i64 c = 0; c < slice; ++c) ew2[r * slice + c] = pw2[r * f + m * slice + c];
        set.bank.push_back(std::move(e));
    }
    return set;
}

template <class T>
ExpertSet<T> decompose_dense(const MlpParams<T>& mlp, i64 experts) {
    return decompose_dense(mlp.w1, mlp.b1, mlp.w2, mlp.b2, experts);
}

// Re-stacks expert slices back into dense matrices (the inverse of
// decompose_dense); used to verify the partition is exact.
template <class T>
MlpParams<T> reassemble_dense(const ExpertSet<T>& set) {
    const i64 slice = set.bank.at(0).w1.dim(0);
    const i64 d = set.bank.at(0).w1.dim(1);
    const i64 f = slice * set.experts;
    MlpParams<T> mlp;
    mlp.w1 = Tensor<T>::zeros({f, d});
    mlp.b1 = Tensor<T>::zeros({f});
    mlp.w2 = Tensor<T>::zeros({d, f});
    mlp.b2 = set.b2.clone();
    for (i64 m = 0; m < set.experts; ++m) {
        const auto& e = set.bank[m];
        for (i64 r = 0; r < slice; ++r) {
            for (i64 c = 0; c < d; ++c)
                mlp.w1.data()[(m * slice + r) * d + c] = e.w1.data()[r * d + c];
            mlp.b1.data()[m * slice + r] = e.b1.data()[r];
        }
        for (i64 r = 0; r < d; ++r)
            for (i64 c = 0; c < slice; ++c)
                mlp.w2.data()[r * f + m * slice + c] = e.w2.data()[r * slice + c];
    }
    return mlp;
}

// Dense forward y = W2 gelu(W1 x + b1) + b2 for any (.., D) input.
template <class T>
Tensor<T> dense_mlp_forward(const MlpParams<T>& mlp, const Tensor<T>& x) {
    return linear(gelu(linear(x, mlp.w1, mlp.b1)), mlp.w2, mlp.b2);
}

// Weighted sum of the selected experts plus the shared output bias:
// sum_m w_m * (W2_m gelu(W1_m x + b1_m)) + b2. Unselected experts are not
// evaluated and receive no gradient.
template <class T>
Tensor<T> expert_forward(const ExpertSet<T>& set, const Tensor<T>& x,
                         const std::vector<i64>& selected, const std::vector<T>& weights) {
    if (selected.size() != weights.size())
        throw UsageError("expert_forward: selected/weights length mismatch");
    for (i64 m : selected)
        if (m < 0 || m >= set.experts)
            throw UsageError("expert index " + std::to_string(m) + " out of range [0," +
                             std::to_string(set.experts) + ")");
    Shape out_shape = x.shape();
    out_shape.back() = set.b2.dim(0);
    Tensor<T> acc;
    for (std::size_t i = 0; i < selected.size(); ++i) {
        const auto& e = set.bank[selected[i]];
        Tensor<T> y = linear(gelu(linear(x, e.w1, e.b1)), e.w2);
        y = scale(y, weights[i]);
        acc = acc.defined() ? add(acc, y) : y;
    }
    if (!acc.defined()) acc = Tensor<T>::zeros(out_shape);
    return add(acc, set.b2);
}

// Max |dense(x) - all-expert unit-weight forward(x)| over random inputs.
template <class T>
T verify_equivalence(const MlpParams<T>& dense, const ExpertSet<T>& set, i64 trials,
                     std::uint64_t seed = 17) {
    if (trials < 1) throw UsageError("verify_equivalence requires trials >= 1");
    Rng rng(seed);
    const i64 d = dense.w1.dim(1);
    std::vector<i64> all(set.experts);
    for (i64 m = 0; m < set.experts; ++m) all[m] = m;
    const std::vector<T> unit(set.experts, T(1));
    T worst = T(0);
    for (i64 t = 0; t < trials; ++t) {
        Tensor<T> x = Tensor<T>::randn({1, d}, rng, T(1));
        Tensor<T> want = dense_mlp_forward(dense, x);
        Tensor<T> got = expert_forward(set, x, all, unit);
        for (i64 i = 0; i < want.numel(); ++i)
            worst = std::max(worst, std::abs(want.data()[i] - got.data()[i]));
    }
    return worst;
}

}  // namespace elt
