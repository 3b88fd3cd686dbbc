#pragma once

#include <atomic>
#include <cmath>
#include <initializer_list>
#include <limits>

#include "elt/tensor.hpp"

// Differentiable primitives. Every op computes its forward result eagerly
// and, when an input is tied to a live tape and requires gradients, records
// a pull closure that routes the output gradient back to the inputs.
// Gradient accumulation is += everywhere, so fan-out sums naturally.
//
// Broadcasting is deliberately narrow: the right-hand operand of a binary op
// must either match the left shape exactly, be a scalar, or be a suffix of
// the left shape (leading batch axes broadcast). Nothing else.

namespace elt {

namespace detail {

template <class T>
Tape<T>* result_tape(std::initializer_list<const Tensor<T>*> ins) {
    Tape<T>* tape = nullptr;
    for (const Tensor<T>* t : ins) {
        if (!t->defined()) continue;
        Tape<T>* tt = t->impl()->tape;
        if (!tt) continue;
        if (tape && tape != tt) throw UsageError("operands belong to different tapes");
        tape = tt;
    }
    return tape;
}

template <class T>
bool any_requires(std::initializer_list<const Tensor<T>*> ins) {
    for (const Tensor<T>* t : ins)
        if (t->defined() && t->impl()->requires_grad) return true;
    return false;
}

template <class T>
Tensor<T> op_output(Shape s, Tape<T>* tape, bool req) {
    Tensor<T> out = Tensor<T>::empty(std::move(s));
    out.impl()->leaf = false;
    out.impl()->requires_grad = req;
    if (tape && req) out.impl()->tape = tape;
    return out;
}

template <class T, class F>
void record_if(Tape<T>* tape, bool req, Tensor<T>& out, F&& pull) {
    if (tape && req) tape->record(std::forward<F>(pull), out.impl());
}

// b broadcasts against a iff b.shape is a suffix of a.shape (scalar included).
inline bool suffix_broadcastable(const Shape& a, const Shape& b) {
    if (b.size() > a.size()) return false;
    for (std::size_t i = 0; i < b.size(); ++i)
        if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) return false;
    return true;
}

inline i64 axis_index(int axis, int ndim) {
    int a = axis < 0 ? axis + ndim : axis;
    if (a < 0 || a >= ndim) throw ShapeError("axis " + std::to_string(axis) + " out of range");
    return a;
}

// Accumulate grad over the broadcast leading block: db[j] += sum_o src(o*bn+j).
template <class T, class F>
void reduce_suffix(T* db, i64 bn, i64 outer, F&& src) {
    kernels::parallel_for(bn, [&](i64 j) {
        T acc = T(0);
        for (i64 o = 0; o < outer; ++o) acc += src(o * bn + j);
        db[j] += acc;
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (suffix broadcast on b)
// ---------------------------------------------------------------------------

#define ELT_BINARY_PROLOGUE                                                            \
    if (!detail::suffix_broadcastable(a.shape(), b.shape()))                           \
        throw ShapeError(std::string(__func__) + ": shapes " + shape_str(a.shape()) + \
                         " and " + shape_str(b.shape()) + " do not broadcast");       \
    Tape<T>* tape = detail::result_tape<T>({&a, &b});                                  \
    const bool req = detail::any_requires<T>({&a, &b});                                \
    const i64 n = a.numel();                                                           \
    const i64 bn = b.numel();                                                          \
    Tensor<T> out = detail::op_output<T>(a.shape(), tape, req);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    ELT_BINARY_PROLOGUE
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data().data();
    kernels::parallel_for(n, [&](i64 i) { po[i] = pa[i] + pb[i % bn]; });
    detail::record_if(tape, req, out, [ai = a.impl(), bi = b.impl(), oi = out.impl(), n, bn]() {
        const T* g = oi->grad.data();
        if (ai->requires_grad) {
            ai->ensure_grad();
            T* da = ai->grad.data();
            kernels::parallel_for(n, [&](i64 i) { da[i] += g[i]; });
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            detail::reduce_suffix(bi->grad.data(), bn, n / bn, [&](i64 i) { return g[i]; });
        }
    });
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    ELT_BINARY_PROLOGUE
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data().data();
    kernels::parallel_for(n, [&](i64 i) { po[i] = pa[i] - pb[i % bn]; });
    detail::record_if(tape, req, out, [ai = a.impl(), bi = b.impl(), oi = out.impl(), n, bn]() {
        const T* g = oi->grad.data();
        if (ai->requires_grad) {
            ai->ensure_grad();
            T* da = ai->grad.data();
            kernels::parallel_for(n, [&](i64 i) { da[i] += g[i]; });
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            detail::reduce_suffix(bi->grad.data(), bn, n / bn, [&](i64 i) { return -g[i]; });
        }
    });
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    ELT_BINARY_PROLOGUE
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data().data();
    kernels::parallel_for(n, [&](i64 i) { po[i] = pa[i] * pb[i % bn]; });
    detail::record_if(tape, req, out, [ai = a.impl(), bi = b.impl(), oi = out.impl(), n, bn]() {
        const T* g = oi->grad.data();
        const T* pa = ai->data.data();
        const T* pb = bi->data.data();
        if (ai->requires_grad) {
            ai->ensure_grad();
            T* da = ai->grad.data();
            kernels::parallel_for(n, [&](i64 i) { da[i] += g[i] * pb[i % bn]; });
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            detail::reduce_suffix(bi->grad.data(), bn, n / bn,
                                  [&](i64 i) { return g[i] * pa[i]; });
        }
    });
    return out;
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    ELT_BINARY_PROLOGUE
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data().data();
    kernels::parallel_for(n, [&](i64 i) { po[i] = pa[i] / pb[i % bn]; });
    detail::record_if(tape, req, out, [ai = a.impl(), bi = b.impl(), oi = out.impl(), n, bn]() {
        const T* g = oi->grad.data();
        const T* pa = ai->data.data();
        const T* pb = bi->data.data();
        if (ai->requires_grad) {
            ai->ensure_grad();
            T* da = ai->grad.data();
            kernels::parallel_for(n, [&](i64 i) { da[i] += g[i] / pb[i % bn]; });
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            detail::reduce_suffix(bi->grad.data(), bn, n / bn, [&](i64 i) {
                const T d = pb[i % bn];
                return -g[i] * pa[i] / (d * d);
            });
        }
    });
    return out;
}

#undef ELT_BINARY_PROLOGUE

// ---------------------------------------------------------------------------
// Scalar-constant ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tape<T>* tape = detail::result_tape<T>({&a});
    const bool req = a.requires_grad();
    const i64 n = a.numel();
    Tensor<T> out = detail::op_output<T>(a.shape(), tape, req);
    const T* pa = a.data().data();
    T* po = out.data().data();
    kernels::parallel_for(n, [&](i64 i) { po[i] = pa[i] * c; });
    detail::record_if(tape, req, out, [ai = a.impl(), oi = out.impl(), n, c]() {
        ai->ensure_grad();
        const T* g = oi->grad.data();
        T* da = ai->grad.data();
        kernels::parallel_for(n, [&](i64 i) { da[i] += g[i] * c; });
    });
    return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    Tape<T>* tape = detail::result_tape<T>({&a});
    const bool req = a.requires_grad();
    const i64 n = a.numel();
    Tensor<T> out = detail::op_output<T>(a.shape(), tape, req);
    const T* pa = a.data().data();
    T* po = out.data().data();
    kernels::parallel_for(n, [&](i64 i) { po[i] = pa[i] + c; });
    detail::record_if(tape, req, out, [ai = a.impl(), oi = out.impl(), n]() {
        ai->ensure_grad();
        const T* g = oi->grad.data();
        T* da = ai->grad.data();
        kernels::parallel_for(n, [&](i64 i) { da[i] += g[i]; });
    });
    return out;
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
    return scale(a, T(-1));
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

// fwd(x) -> y ; bwd(x, y, g) -> contribution to dx
template <class T, class Fwd, class Bwd>
Tensor<T> unary_op(const Tensor<T>& a, Fwd fwd, Bwd bwd) {
    Tape<T>* tape = result_tape<T>({&a});
    const bool req = a.requires_grad();
    const i64 n = a.numel();
    Tensor<T> out = op_output<T>(a.shape(), tape, req);
    const T* pa = a.data().data();
    T* po = out.data().data();
    kernels::parallel_for(n, [&](i64 i) { po[i] = fwd(pa[i]); });
    record_if(tape, req, out, [ai = a.impl(), oi = out.impl(), n, bwd]() {
        ai->ensure_grad();
        const T* x = ai->data.data();
        const T* y = oi->data.data();
        const T* g = oi->grad.data();
        T* da = ai->grad.data();
        kernels::parallel_for(n, [&](i64 i) { da[i] += bwd(x[i], y[i], g[i]); });
    });
    return out;
}

}  // namespace detail

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
    return detail::unary_op(
        a, [](T x) { return kernels::detail::gelu_scalar(x); },
        [](T x, T, T g) { return g * kernels::detail::gelu_grad_scalar(x); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return detail::unary_op(
        a, [](T x) { return kernels::detail::sigmoid_scalar(x); },
        [](T, T y, T g) { return g * y * (T(1) - y); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
    return detail::unary_op(
        a, [](T x) { return std::exp(x); }, [](T, T y, T g) { return g * y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
    return detail::unary_op(
        a, [](T x) { return std::log(x); }, [](T x, T, T g) { return g / x; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
    return detail::unary_op(
        a, [](T x) { return std::sqrt(x); }, [](T, T y, T g) { return g * T(0.5) / y; });
}

template <class T>
Tensor<T> clamp_min(const Tensor<T>& a, T floor) {
    return detail::unary_op(
        a, [floor](T x) { return x < floor ? floor : x; },
        [floor](T x, T, T g) { return x > floor ? g : T(0); });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape s) {
    if (shape_numel(s) != a.numel())
        throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(s) +
                         " changes element count");
    Tape<T>* tape = detail::result_tape<T>({&a});
    const bool req = a.requires_grad();
    Tensor<T> out = detail::op_output<T>(std::move(s), tape, req);
    std::copy(a.data().begin(), a.data().end(), out.data().begin());
    detail::record_if(tape, req, out, [ai = a.impl(), oi = out.impl()]() {
        ai->ensure_grad();
        const T* g = oi->grad.data();
        T* da = ai->grad.data();
        const i64 n = ai->numel();
        kernels::parallel_for(n, [&](i64 i) { da[i] += g[i]; });
    });
    return out;
}

namespace detail {

// out[coords with d0<->d1 swapped] = in[coords]; accumulate optionally.
template <class T>
void transpose_copy(const T* in, T* out_data, const Shape& in_shape, i64 d0, i64 d1, bool acc) {
    const int nd = static_cast<int>(in_shape.size());
    Shape out_shape = in_shape;
    std::swap(out_shape[d0], out_shape[d1]);
    std::vector<i64> in_strides(nd, 1), out_strides(nd, 1);
    for (int i = nd - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    for (int i = nd - 2; i >= 0; --i) out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    const i64 n = shape_numel(in_shape);
    if (d0 != nd - 1 && d1 != nd - 1) {
        // last axis untouched: move whole contiguous rows
        const i64 last = in_shape[nd - 1];
        kernels::parallel_for(n / last, [&](i64 row) {
            i64 rem = row * last;
            i64 dst = 0;
            for (int d = 0; d < nd - 1; ++d) {
                const i64 c = rem / in_strides[d];
                rem %= in_strides[d];
                const int od =
                    d == d0 ? static_cast<int>(d1) : (d == d1 ? static_cast<int>(d0) : d);
                dst += c * out_strides[od];
            }
            const T* src = in + row * last;
            T* out_row = out_data + dst;
            if (acc)
                for (i64 j = 0; j < last; ++j) out_row[j] += src[j];
            else
                for (i64 j = 0; j < last; ++j) out_row[j] = src[j];
        });
        return;
    }
    kernels::parallel_for(n, [&](i64 flat) {
        i64 rem = flat;
        i64 dst = 0;
        for (int d = 0; d < nd; ++d) {
            const i64 c = rem / in_strides[d];
            rem %= in_strides[d];
            const int od = d == d0 ? static_cast<int>(d1) : (d == d1 ? static_cast<int>(d0) : d);
            dst += c * out_strides[od];
        }
        if (acc)
            out_data[dst] += in[flat];
        else
            out_data[dst] = in[flat];
    });
}

}  // namespace detail

template <class T>
Tensor<T> transpose(const Tensor<T>& a, int dim0, int dim1) {
    const i64 d0 = detail::axis_index(dim0, a.ndim());
    const i64 d1 = detail::axis_index(dim1, a.ndim());
    Tape<T>* tape = detail::result_tape<T>({&a});
    const bool req = a.requires_grad();
    Shape s = a.shape();
    std::swap(s[d0], s[d1]);
    Tensor<T> out = detail::op_output<T>(std::move(s), tape, req);
    detail::transpose_copy(a.data().data(), out.data().data(), a.shape(), d0, d1, false);
    detail::record_if(tape, req, out, [ai = a.impl(), oi = out.impl(), d0, d1]() {
        ai->ensure_grad();
        // transposing the gradient back is the same swap applied to oi->shape
        detail::transpose_copy(oi->grad.data(), ai->grad.data(), oi->shape, d0, d1, true);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Matrix multiply: a (.., m, k) x b; b is (k, n) / (n, k), or batched with
// identical leading axes. transpose_b selects the (n, k) layout.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
    if (a.ndim() < 2 || b.ndim() < 2)
        throw ShapeError("matmul requires rank >= 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const i64 m = a.dim(-2);
    const i64 k = a.dim(-1);
    const i64 bk = transpose_b ? b.dim(-1) : b.dim(-2);
    const i64 n = transpose_b ? b.dim(-2) : b.dim(-1);
    const bool b_batched = b.ndim() > 2;
    if (k != bk)
        throw ShapeError("matmul inner extents disagree: " + shape_str(a.shape()) +
                         (transpose_b ? " x T" : " x ") + shape_str(b.shape()));
    Shape lead(a.shape().begin(), a.shape().end() - 2);
    if (b_batched) {
        Shape blead(b.shape().begin(), b.shape().end() - 2);
        if (blead != lead)
            throw ShapeError("matmul batch axes disagree: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const i64 batch = shape_numel(lead);
    Shape out_shape = lead;
    out_shape.push_back(m);
    out_shape.push_back(n);

    Tape<T>* tape = detail::result_tape<T>({&a, &b});
    const bool req = detail::any_requires<T>({&a, &b});
    Tensor<T> out = detail::op_output<T>(std::move(out_shape), tape, req);

    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data().data();
    const i64 bstride = b_batched ? k * n : 0;
    if (transpose_b)
        kernels::bgemm_nt(pa, m * k, pb, bstride, po, m * n, batch, m, k, n);
    else
        kernels::bgemm_nn(pa, m * k, pb, bstride, po, m * n, batch, m, k, n);

    detail::record_if(
        tape, req, out,
        [ai = a.impl(), bi_ = b.impl(), oi = out.impl(), m, k, n, batch, bstride,
         transpose_b]() {
            const T* g = oi->grad.data();
            const T* pa = ai->data.data();
            const T* pb = bi_->data.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                T* da = ai->grad.data();
                if (transpose_b)
                    kernels::bgemm_nn(g, m * n, pb, bstride, da, m * k, batch, m, n, k, true);
                else
                    kernels::bgemm_nt(g, m * n, pb, bstride, da, m * k, batch, m, n, k, true);
            }
            if (bi_->requires_grad) {
                bi_->ensure_grad();
                T* db = bi_->grad.data();
                if (bstride == 0) {
                    // shared rhs: batches accumulate into one gradient, keep
                    // the batch loop serial so the order is fixed
                    for (i64 bt = 0; bt < batch; ++bt) {
                        const T* gb = g + bt * m * n;
                        const T* abl = pa + bt * m * k;
                        if (transpose_b)
                            kernels::gemm_tn(gb, abl, db, n, m, k, true);
                        else
                            kernels::gemm_tn(abl, gb, db, k, m, n, true);
                    }
                } else if (transpose_b) {
                    kernels::bgemm_tn(g, m * n, pa, m * k, db, bstride, batch, n, m, k, true);
                } else {
                    kernels::bgemm_tn(pa, m * k, g, m * n, db, bstride, batch, k, m, n, true);
                }
            }
        });
    return out;
}

// x (.., in) * W(out, in)^T + b(out). The usual linear layer.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
    Shape xs = x.shape();
    Shape flat{x.numel() / x.dim(-1), x.dim(-1)};
    Tensor<T> x2 = reshape(x, flat);
    Tensor<T> y = matmul(x2, w, /*transpose_b=*/true);
    if (b.defined()) y = add(y, b);
    Shape out_shape(xs.begin(), xs.end() - 1);
    out_shape.push_back(w.dim(0));
    return reshape(y, out_shape);
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void axis_split(const Tensor<T>& a, i64 axis, i64& outer, i64& n, i64& inner) {
    outer = 1;
    inner = 1;
    for (i64 i = 0; i < axis; ++i) outer *= a.shape()[i];
    n = a.shape()[axis];
    for (std::size_t i = axis + 1; i < a.shape().size(); ++i) inner *= a.shape()[i];
}

}  // namespace detail

namespace detail {

// shared backward rule for softmax variants on the last axis
template <class T>
void softmax_backward(TensorImpl<T>& in, const TensorImpl<T>& out, i64 outer, i64 n,
                      i64 inner) {
    in.ensure_grad();
    const T* y = out.data.data();
    const T* g = out.grad.data();
    T* da = in.grad.data();
    kernels::parallel_for(outer * inner, [&](i64 t) {
        const i64 o = t / inner, i = t % inner;
        const i64 base = o * n * inner + i;
        T dot = T(0);
        for (i64 j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (i64 j = 0; j < n; ++j) {
            const i64 idx = base + j * inner;
            da[idx] += y[idx] * (g[idx] - dot);
        }
    });
}

}  // namespace detail

template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis = -1) {
    const i64 ax = detail::axis_index(axis, a.ndim());
    i64 outer, n, inner;
    detail::axis_split(a, ax, outer, n, inner);
    Tape<T>* tape = detail::result_tape<T>({&a});
    const bool req = a.requires_grad();
    Tensor<T> out = detail::op_output<T>(a.shape(), tape, req);
    if (!kernels::softmax(a.data().data(), out.data().data(), outer, n, inner))
        throw NumericError("softmax: input contains NaN or a non-finite row");
    detail::record_if(tape, req, out, [ai = a.impl(), oi = out.impl(), outer, n, inner]() {
        detail::softmax_backward(*ai, *oi, outer, n, inner);
    });
    return out;
}

// softmax over the last axis with an additive constant mask whose rows are
// recycled across the leading axes (the causal-attention pattern)
template <class T>
Tensor<T> masked_softmax(const Tensor<T>& a, const Tensor<T>& mask) {
    if (mask.ndim() != 2 || mask.dim(1) != a.dim(-1))
        throw ShapeError("masked_softmax: mask " + shape_str(mask.shape()) +
                         " does not suffix-match " + shape_str(a.shape()));
    if (mask.requires_grad()) throw UsageError("masked_softmax mask must be constant");
    const i64 n = a.dim(-1);
    const i64 rows = a.numel() / n;
    Tape<T>* tape = detail::result_tape<T>({&a});
    const bool req = a.requires_grad();
    Tensor<T> out = detail::op_output<T>(a.shape(), tape, req);
    if (!kernels::softmax_masked(a.data().data(), mask.data().data(), mask.dim(0),
                                 out.data().data(), rows, n))
        throw NumericError("softmax: input contains NaN or a non-finite row");
    detail::record_if(tape, req, out, [ai = a.impl(), oi = out.impl(), rows, n]() {
        detail::softmax_backward(*ai, *oi, rows, n, i64(1));
    });
    return out;
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& a, int axis = -1) {
    const i64 ax = detail::axis_index(axis, a.ndim());
    i64 outer, n, inner;
    detail::axis_split(a, ax, outer, n, inner);
    Tape<T>* tape = detail::result_tape<T>({&a});
    const bool req = a.requires_grad();
    Tensor<T> out = detail::op_output<T>(a.shape(), tape, req);
    if (!kernels::log_softmax(a.data().data(), out.data().data(), outer, n, inner))
        throw NumericError("log_softmax: input contains NaN or a non-finite row");
    detail::record_if(tape, req, out, [ai = a.impl(), oi = out.impl(), outer, n, inner]() {
        ai->ensure_grad();
        const T* y = oi->data.data();
        const T* g = oi->grad.data();
        T* da = ai->grad.data();
        kernels::parallel_for(outer * inner, [&](i64 t) {
            const i64 o = t / inner, i = t % inner;
            const i64 base = o * n * inner + i;
            T gs = T(0);
            for (i64 j = 0; j < n; ++j) gs += g[base + j * inner];
            for (i64 j = 0; j < n; ++j) {
                const i64 idx = base + j * inner;
                da[idx] += g[idx] - std::exp(y[idx]) * gs;
            }
        });
    });
    return out;
}

// ---------------------------------------------------------------------------
// Layer norm over the last axis
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
    const i64 n = x.dim(-1);
    if (n < 2) throw ShapeError("layer_norm needs last-axis extent >= 2");
    if (gain.numel() != n || bias.numel() != n)
        throw ShapeError("layer_norm gain/bias must have extent " + std::to_string(n));
    const i64 rows = x.numel() / n;
    Tape<T>* tape = detail::result_tape<T>({&x, &gain, &bias});
    const bool req = detail::any_requires<T>({&x, &gain, &bias});
    Tensor<T> out = detail::op_output<T>(x.shape(), tape, req);
    kernels::layer_norm(x.data().data(), gain.data().data(), bias.data().data(),
                        out.data().data(), rows, n, eps);
    detail::record_if(
        tape, req, out,
        [xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl(), rows, n, eps]() {
            const T* px = xi->data.data();
            const T* pg = gi->data.data();
            const T* g = oi->grad.data();
            if (gi->requires_grad || bi->requires_grad) {
                if (gi->requires_grad) gi->ensure_grad();
                if (bi->requires_grad) bi->ensure_grad();
                kernels::parallel_for(n, [&](i64 j) {
                    T dgain = T(0), dbias = T(0);
                    for (i64 r = 0; r < rows; ++r) {
                        const T* xr = px + r * n;
                        T mean = T(0);
                        for (i64 t = 0; t < n; ++t) mean += xr[t];
                        mean /= T(n);
                        T var = T(0);
                        for (i64 t = 0; t < n; ++t) {
                            const T d = xr[t] - mean;
                            var += d * d;
                        }
                        var /= T(n);
                        const T inv = T(1) / std::sqrt(var + eps);
                        const T xhat = (xr[j] - mean) * inv;
                        dgain += g[r * n + j] * xhat;
                        dbias += g[r * n + j];
                    }
                    if (gi->requires_grad) gi->grad[j] += dgain;
                    if (bi->requires_grad) bi->grad[j] += dbias;
                });
            }
            if (xi->requires_grad) {
                xi->ensure_grad();
                T* dx = xi->grad.data();
                kernels::parallel_for(rows, [&](i64 r) {
                    const T* xr = px + r * n;
                    const T* gr = g + r * n;
                    T mean = T(0);
                    for (i64 t = 0; t < n; ++t) mean += xr[t];
                    mean /= T(n);
                    T var = T(0);
                    for (i64 t = 0; t < n; ++t) {
                        const T d = xr[t] - mean;
                        var += d * d;
                    }
                    var /= T(n);
                    const T inv = T(1) / std::sqrt(var + eps);
                    T sum_h = T(0), sum_hx = T(0);
                    for (i64 t = 0; t < n; ++t) {
                        const T h = gr[t] * pg[t];
                        const T xhat = (xr[t] - mean) * inv;
                        sum_h += h;
                        sum_hx += h * xhat;
                    }
                    for (i64 t = 0; t < n; ++t) {
                        const T h = gr[t] * pg[t];
                        const T xhat = (xr[t] - mean) * inv;
                        dx[r * n + t] += inv * (h - sum_h / T(n) - xhat * sum_hx / T(n));
                    }
                });
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
    Tape<T>* tape = detail::result_tape<T>({&a});
    const bool req = a.requires_grad();
    Tensor<T> out = detail::op_output<T>(Shape{}, tape, req);
    T acc = T(0);
    for (T v : a.data()) acc += v;
    out.data()[0] = acc;
    detail::record_if(tape, req, out, [ai = a.impl(), oi = out.impl()]() {
        ai->ensure_grad();
        const T g = oi->grad[0];
        T* da = ai->grad.data();
        const i64 n = ai->numel();
        kernels::parallel_for(n, [&](i64 i) { da[i] += g; });
    });
    return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
    const i64 n = a.numel();
    return scale(sum_all(a), T(1) / T(n));
}

template <class T>
Tensor<T> sum_axis(const Tensor<T>& a, int axis) {
    const i64 ax = detail::axis_index(axis, a.ndim());
    i64 outer, n, inner;
    detail::axis_split(a, ax, outer, n, inner);
    Shape s;
    for (i64 i = 0; i < static_cast<i64>(a.shape().size()); ++i)
        if (i != ax) s.push_back(a.shape()[i]);
    Tape<T>* tape = detail::result_tape<T>({&a});
    const bool req = a.requires_grad();
    Tensor<T> out = detail::op_output<T>(std::move(s), tape, req);
    const T* pa = a.data().data();
    T* po = out.data().data();
    kernels::parallel_for(outer * inner, [&](i64 t) {
        const i64 o = t / inner, i = t % inner;
        T acc = T(0);
        for (i64 j = 0; j < n; ++j) acc += pa[o * n * inner + j * inner + i];
        po[o * inner + i] = acc;
    });
    detail::record_if(tape, req, out, [ai = a.impl(), oi = out.impl(), outer, n, inner]() {
        ai->ensure_grad();
        const T* g = oi->grad.data();
        T* da = ai->grad.data();
        kernels::parallel_for(outer * n * inner, [&](i64 flat) {
            const i64 o = flat / (n * inner);
            const i64 i = flat % inner;
            da[flat] += g[o * inner + i];
        });
    });
    return out;
}

// ---------------------------------------------------------------------------
// Row scaling / selection / gathering
// ---------------------------------------------------------------------------

// out[..., j] = a[..., j] * s[...]; s.shape == a.shape[:-1].
template <class T>
Tensor<T> scale_rows(const Tensor<T>& a, const Tensor<T>& s) {
    const i64 c = a.dim(-1);
    const i64 rows = a.numel() / c;
    if (s.numel() != rows)
        throw ShapeError("scale_rows: scale shape " + shape_str(s.shape()) +
                         " does not match rows of " + shape_str(a.shape()));
    Tape<T>* tape = detail::result_tape<T>({&a, &s});
    const bool req = detail::any_requires<T>({&a, &s});
    Tensor<T> out = detail::op_output<T>(a.shape(), tape, req);
    const T* pa = a.data().data();
    const T* ps = s.data().data();
    T* po = out.data().data();
    kernels::parallel_for(a.numel(), [&](i64 i) { po[i] = pa[i] * ps[i / c]; });
    detail::record_if(tape, req, out,
                      [ai = a.impl(), si = s.impl(), oi = out.impl(), rows, c]() {
                          const T* g = oi->grad.data();
                          const T* pa = ai->data.data();
                          const T* ps = si->data.data();
                          if (ai->requires_grad) {
                              ai->ensure_grad();
                              T* da = ai->grad.data();
                              kernels::parallel_for(rows * c,
                                                    [&](i64 i) { da[i] += g[i] * ps[i / c]; });
                          }
                          if (si->requires_grad) {
                              si->ensure_grad();
                              T* ds = si->grad.data();
                              kernels::parallel_for(rows, [&](i64 r) {
                                  T acc = T(0);
                                  for (i64 j = 0; j < c; ++j)
                                      acc += g[r * c + j] * pa[r * c + j];
                                  ds[r] += acc;
                              });
                          }
                      });
    return out;
}

// out[...] = a[..., index]; drops the last axis.
template <class T>
Tensor<T> select_last(const Tensor<T>& a, i64 index) {
    const i64 c = a.dim(-1);
    if (index < 0 || index >= c)
        throw UsageError("select_last index " + std::to_string(index) + " out of range [0," +
                         std::to_string(c) + ")");
    const i64 rows = a.numel() / c;
    Shape s(a.shape().begin(), a.shape().end() - 1);
    Tape<T>* tape = detail::result_tape<T>({&a});
    const bool req = a.requires_grad();
    Tensor<T> out = detail::op_output<T>(std::move(s), tape, req);
    const T* pa = a.data().data();
    T* po = out.data().data();
    kernels::parallel_for(rows, [&](i64 r) { po[r] = pa[r * c + index]; });
    detail::record_if(tape, req, out, [ai = a.impl(), oi = out.impl(), rows, c, index]() {
        ai->ensure_grad();
        const T* g = oi->grad.data();
        T* da = ai->grad.data();
        kernels::parallel_for(rows, [&](i64 r) { da[r * c + index] += g[r]; });
    });
    return out;
}

// out[..., k] = a[..., idx[..., k]]; idx.shape == a.shape[:-1] + [K].
template <class T>
Tensor<T> gather_last(const Tensor<T>& a, const IntTensor& idx) {
    const i64 c = a.dim(-1);
    const i64 rows = a.numel() / c;
    if (idx.shape.empty())
        throw ShapeError("gather_last: index tensor must have at least one axis");
    const i64 kk = idx.shape.back();
    if (static_cast<i64>(idx.data.size()) != rows * kk)
        throw ShapeError("gather_last: index shape " + shape_str(idx.shape) +
                         " does not align with " + shape_str(a.shape()));
    for (i64 v : idx.data)
        if (v < 0 || v >= c) throw UsageError("gather_last: index " + std::to_string(v) +
                                              " out of range [0," + std::to_string(c) + ")");
    Shape s(a.shape().begin(), a.shape().end() - 1);
    s.push_back(kk);
    Tape<T>* tape = detail::result_tape<T>({&a});
    const bool req = a.requires_grad();
    Tensor<T> out = detail::op_output<T>(std::move(s), tape, req);
    const T* pa = a.data().data();
    T* po = out.data().data();
    const i64* pi = idx.data.data();
    kernels::parallel_for(rows, [&](i64 r) {
        for (i64 j = 0; j < kk; ++j) po[r * kk + j] = pa[r * c + pi[r * kk + j]];
    });
    auto idx_copy = std::make_shared<std::vector<i64>>(idx.data);
    detail::record_if(tape, req, out, [ai = a.impl(), oi = out.impl(), idx_copy, rows, c, kk]() {
        ai->ensure_grad();
        const T* g = oi->grad.data();
        T* da = ai->grad.data();
        const i64* pi = idx_copy->data();
        // serial scatter: duplicate indices must accumulate in a fixed order
        for (i64 r = 0; r < rows; ++r)
            for (i64 j = 0; j < kk; ++j) da[r * c + pi[r * kk + j]] += g[r * kk + j];
    });
    return out;
}

// table (V, D) gathered by ids -> (ids.shape..., D)
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const IntTensor& ids) {
    if (table.ndim() != 2) throw ShapeError("embedding table must be rank 2");
    const i64 v = table.dim(0);
    const i64 d = table.dim(1);
    for (i64 id : ids.data)
        if (id < 0 || id >= v)
            throw DataError("token id " + std::to_string(id) + " out of range [0," +
                            std::to_string(v) + ")");
    Shape s = ids.shape;
    s.push_back(d);
    Tape<T>* tape = detail::result_tape<T>({&table});
    const bool req = table.requires_grad();
    Tensor<T> out = detail::op_output<T>(std::move(s), tape, req);
    const T* pt = table.data().data();
    T* po = out.data().data();
    const i64 rows = ids.numel();
    const i64* pid = ids.data.data();
    kernels::parallel_for(rows, [&](i64 r) {
        const T* src = pt + pid[r] * d;
        T* dst = po + r * d;
        for (i64 j = 0; j < d; ++j) dst[j] = src[j];
    });
    auto ids_copy = std::make_shared<std::vector<i64>>(ids.data);
    detail::record_if(tape, req, out, [ti = table.impl(), oi = out.impl(), ids_copy, rows, d]() {
        ti->ensure_grad();
        const T* g = oi->grad.data();
        T* dt = ti->grad.data();
        const i64* pid = ids_copy->data();
        for (i64 r = 0; r < rows; ++r) {
            T* dst = dt + pid[r] * d;
            const T* src = g + r * d;
            for (i64 j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return out;
}

// Numerically stable elementwise binary cross-entropy on logits. Targets are
// constants (0/1 soft targets allowed).
template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
    if (targets.shape() != logits.shape())
        throw ShapeError("bce_with_logits: target shape " + shape_str(targets.shape()) +
                         " != logits shape " + shape_str(logits.shape()));
    if (targets.requires_grad())
        throw UsageError("bce_with_logits targets must be constant");
    Tape<T>* tape = detail::result_tape<T>({&logits});
    const bool req = logits.requires_grad();
    const i64 n = logits.numel();
    Tensor<T> out = detail::op_output<T>(logits.shape(), tape, req);
    const T* pl = logits.data().data();
    const T* pt = targets.data().data();
    T* po = out.data().data();
    kernels::parallel_for(n, [&](i64 i) {
        const T l = pl[i];
        const T y = pt[i];
        const T mx = l > T(0) ? l : T(0);
        po[i] = mx - l * y + std::log1p(std::exp(-std::abs(l)));
    });
    detail::record_if(tape, req, out,
                      [li = logits.impl(), ti = targets.impl(), oi = out.impl(), n]() {
                          li->ensure_grad();
                          const T* g = oi->grad.data();
                          const T* pl = li->data.data();
                          const T* pt = ti->data.data();
                          T* dl = li->grad.data();
                          kernels::parallel_for(n, [&](i64 i) {
                              dl[i] += g[i] * (kernels::detail::sigmoid_scalar(pl[i]) - pt[i]);
                          });
                      });
    return out;
}

}  // namespace elt
