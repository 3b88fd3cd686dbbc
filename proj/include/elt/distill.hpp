#pragma once

#include "elt/config.hpp"
#include "elt/ops.hpp"
#include "elt/routing.hpp"

namespace elt {

namespace detail {

template <class T>
Tensor<T> detached(const Tensor<T>& t) {
    return t.requires_grad() ? t.detach() : t;
}

constexpr double kLogFloor = 1e-9;  // residual buckets can shrink to zero

}  // namespace detail

// Temperature-scaled KL on full-vocabulary distributions, mean over tokens.
// forward = D(p_student || p_teacher), reverse = D(p_teacher || p_student).
// The teacher side never receives gradients.
template <class T>
Tensor<T> kl_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                  const DistillConfig& cfg) {
    if (!(cfg.temperature > 0.0)) throw ConfigError("distill.temperature must be > 0");
    if (student_logits.shape() != teacher_logits.shape())
        throw ShapeError("kl_loss: logit shapes differ: " + shape_str(student_logits.shape()) +
                         " vs " + shape_str(teacher_logits.shape()));
    const T inv_t = T(1.0 / cfg.temperature);
    Tensor<T> ls = log_softmax(scale(student_logits, inv_t), -1);
    Tensor<T> lt = log_softmax(scale(detail::detached(teacher_logits), inv_t), -1);
    Tensor<T> terms;
    if (cfg.direction == KlDirection::forward) {
        terms = mul(exp(ls), sub(ls, lt));
    } else {
        terms = mul(exp(lt), sub(lt, ls));
    }
    return mean_all(sum_axis(terms, -1));
}

// KL on the teacher's top-K vocabulary entries plus a residual bucket. The
// student's probabilities are gathered at the teacher's indices; both sides
// carry their own residual mass so each (K+1)-vector sums to one.
template <class T>
Tensor<T> topk_kl_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                       i64 top_k, const DistillConfig& cfg) {
    const i64 vocab = student_logits.dim(-1);
    if (top_k < 1 || top_k >= vocab)
        throw ConfigError("top_k_vocab must be in [1, vocab), got " + std::to_string(top_k));
    if (!(cfg.temperature > 0.0)) throw ConfigError("distill.temperature must be > 0");
    const T inv_t = T(1.0 / cfg.temperature);
    const T floor = T(detail::kLogFloor);

    // same probability computation on both sides so the student==teacher
    // fixed point lands at exactly zero
    Tensor<T> teacher = detail::detached(teacher_logits);
    Tensor<T> pt = exp(log_softmax(scale(teacher, inv_t), -1));
    const i64 rows = pt.numel() / vocab;

    // teacher's top-K vocabulary ids per token
    Shape idx_shape(student_logits.shape().begin(), student_logits.shape().end() - 1);
    idx_shape.push_back(top_k);
    std::vector<i64> idx(rows * top_k);
    for (i64 r = 0; r < rows; ++r) {
        auto sel = topk_indices<T>(pt.data().subspan(r * vocab, vocab), top_k);
        std::copy(sel.begin(), sel.end(), idx.begin() + r * top_k);
    }
    IntTensor gather_ids(idx_shape, std::move(idx));

    Tensor<T> gt = gather_last(pt, gather_ids);                       // (.., K) constant
    Tensor<T> rt = add_scalar(neg(sum_axis(gt, -1)), T(1));           // (..) constant
    Tensor<T> ps = exp(log_softmax(scale(student_logits, inv_t), -1));
    Tensor<T> gs = gather_last(ps, gather_ids);                       // (.., K)
    Tensor<T> rs = add_scalar(neg(sum_axis(gs, -1)), T(1));           // (..)

    Tensor<T> log_gs = log(clamp_min(gs, floor));
    Tensor<T> log_rs = log(clamp_min(rs, floor));
    Tensor<T> log_gt = log(clamp_min(gt, floor));
    Tensor<T> log_rt = log(clamp_min(rt, floor));

    Tensor<T> per_token;
    if (cfg.direction == KlDirection::forward) {
        per_token = add(sum_axis(mul(gs, sub(log_gs, log_gt)), -1),
                        mul(rs, sub(log_rs, log_rt)));
    } else {
        per_token = add(sum_axis(mul(gt, sub(log_gt, log_gs)), -1),
                        mul(rt, sub(log_rt, log_rs)));
    }
    return mean_all(per_token);
}

// Mean over tokens of 1 - cos(student, teacher). Teacher detached.
template <class T>
Tensor<T> cosine_distance_loss(const Tensor<T>& student_emb, const Tensor<T>& teacher_emb) {
    if (student_emb.shape() != teacher_emb.shape())
        throw ShapeError("cosine_distance_loss: embedding shapes differ");
    Tensor<T> t = detail::detached(teacher_emb);
    const i64 d = student_emb.dim(-1);
    const i64 rows = student_emb.numel() / d;
    for (i64 r = 0; r < rows; ++r) {
        T ns = T(0), nt = T(0);
        for (i64 j = 0; j < d; ++j) {
            const T sv = student_emb.data()[r * d + j];
            const T tv = t.data()[r * d + j];
            ns += sv * sv;
            nt += tv * tv;
        }
        if (ns == T(0) || nt == T(0))
            throw NumericError("cosine_distance_loss: zero-norm embedding at row " +
                               std::to_string(r));
    }
    Tensor<T> dot = sum_axis(mul(student_emb, t), -1);
    Tensor<T> ns = sqrt(sum_axis(mul(student_emb, student_emb), -1));
    Tensor<T> nt = sqrt(sum_axis(mul(t, t), -1));
    Tensor<T> cos = div(dot, mul(ns, nt));
    return mean_all(add_scalar(neg(cos), T(1)));
}

// Load balance: sum_m f_m * P_m with f the detached per-expert top-k
// selection frequency (sums to k over experts) and P the differentiable mean
// routing probability. Uniform routing yields exactly k/M; collapse onto a
// fixed expert subset yields 1.
template <class T>
Tensor<T> load_balance_loss(std::span<const T> freq, const Tensor<T>& mean_probs, i64 options,
                            i64 k) {
    if (static_cast<i64>(freq.size()) != options || mean_probs.numel() != options)
        throw ShapeError("load_balance_loss: expected " + std::to_string(options) +
                         " expert slots");
    (void)k;
    Tensor<T> f = Tensor<T>::from_data({options}, std::vector<T>(freq.begin(), freq.end()));
    return sum_all(mul(mean_probs, f));
}

// Mean binary cross entropy teaching the router to predict its own top-k
// membership; targets were built (detached) during the routed forward.
template <class T>
Tensor<T> topk_bce_loss(const Tensor<T>& router_logits, const Tensor<T>& targets01) {
    return mean_all(bce_with_logits(router_logits, targets01));
}

// L = L_distill + lambda_load * mean(load terms) + lambda_topk * mean(bce
// terms). Per-module auxiliary losses are averaged so the lambdas keep their
// meaning as the layer count grows. BCE terms are causal-LM-only.
template <class T>
Tensor<T> total_objective(Tensor<T> distill, const std::vector<Tensor<T>>& load_terms,
                          const std::vector<Tensor<T>>& bce_terms, const DistillConfig& cfg,
                          ModelMode mode) {
    if (mode == ModelMode::encoder && !bce_terms.empty())
        throw ConfigError("top-k BCE auxiliary loss applies to causal LMs only");
    Tensor<T> total = std::move(distill);
    auto mean_of = [](const std::vector<Tensor<T>>& v) {
        Tensor<T> acc = v[0];
        for (std::size_t i = 1; i < v.size(); ++i) acc = add(acc, v[i]);
        return scale(acc, T(1.0 / double(v.size())));
    };
    if (!load_terms.empty() && cfg.lambda_load != 0.0)
        total = add(total, scale(mean_of(load_terms), T(cfg.lambda_load)));
    if (!bce_terms.empty() && cfg.lambda_topk != 0.0)
        total = add(total, scale(mean_of(bce_terms), T(cfg.lambda_topk)));
    return total;
}

}  // namespace elt
