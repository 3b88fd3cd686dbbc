#pragma once

#include <numeric>
#include <optional>

#include "elt/moe.hpp"

namespace elt {

// Indices of the k largest values, ties broken toward the lower index.
// Returned sorted ascending for stable downstream iteration.
template <class T>
std::vector<i64> topk_indices(std::span<const T> vals, i64 k) {
    const i64 n = static_cast<i64>(vals.size());
    if (k < 0 || k > n) throw UsageError("topk_indices: k out of range");
    std::vector<i64> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](i64 a, i64 b) {
        if (vals[a] != vals[b]) return vals[a] > vals[b];
        return a < b;
    });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline i64 capacity_to_k(double capacity, i64 total) {
    const i64 k = static_cast<i64>(std::ceil(capacity * static_cast<double>(total)));
    return std::min(std::max<i64>(k, 1), total);
}

// Trace record of one routing decision over a batch; feeds load-balance
// statistics, the analysis heatmaps, and the JSON trace export.
struct RoutingDecision {
    i64 layer = 0;
    RouteKind kind = RouteKind::input_mlp;
    i64 step = -1;
    i64 rows = 0;     // sequences (input routing) or tokens (parameter routing)
    i64 options = 0;  // T or M
    i64 k = 0;        // requested selection size (0 when thresholded)
    std::vector<std::vector<i64>> selected;
    std::vector<std::vector<double>> weights;
    std::vector<double> prob_sums;  // parameter kinds: per-option softmax prob sums
    std::vector<double> scores;     // raw router logits, rows x options flattened
};

struct ModuleUtilization {
    i64 layer = 0;
    RouteKind kind = RouteKind::input_mlp;
    i64 options = 0;
    i64 k = 0;
    i64 sample_rows = 0;
    std::vector<double> freq;       // per-option selection frequency over rows
    std::vector<double> mean_prob;  // mean routing probability (parameter kinds)
    double selection_rate = 0.0;    // mean fraction of options selected per row
};

// Aggregates decisions by (layer, kind). Deterministic: ordered by first
// appearance of each module in the decision stream.
inline std::vector<ModuleUtilization> selection_stats(const std::vector<RoutingDecision>& ds) {
    std::vector<ModuleUtilization> out;
    auto slot = [&](const RoutingDecision& d) -> ModuleUtilization& {
        for (auto& u : out)
            if (u.layer == d.layer && u.kind == d.kind) return u;
        ModuleUtilization u;
        u.layer = d.layer;
        u.kind = d.kind;
        u.options = d.options;
        u.k = d.k;
        u.freq.assign(d.options, 0.0);
        u.mean_prob.assign(d.prob_sums.size(), 0.0);
        out.push_back(std::move(u));
        return out.back();
    };
    for (const auto& d : ds) {
        auto& u = slot(d);
        if (u.options != d.options)
            throw UsageError("selection_stats: inconsistent option count for a module");
        u.sample_rows += d.rows;
        double picked = 0;
        for (const auto& row : d.selected) {
            for (i64 m : row) u.freq[m] += 1.0;
            picked += static_cast<double>(row.size());
        }
        u.selection_rate += picked;
        for (std::size_t m = 0; m < d.prob_sums.size(); ++m) u.mean_prob[m] += d.prob_sums[m];
    }
    for (auto& u : out) {
        const double rows = std::max<double>(1.0, static_cast<double>(u.sample_rows));
        for (auto& f : u.freq) f /= rows;
        for (auto& p : u.mean_prob) p /= rows;
        u.selection_rate /= rows * static_cast<double>(u.options);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Routers
// ---------------------------------------------------------------------------

// Scalar-logit router for input subset selection: weight(x) = act(w.x + b).
// Initialized near-identity (weight 0, bias +4 -> sigmoid ~0.982).
template <class T>
struct InputRouter {
    Tensor<T> w;  // (D)
    Tensor<T> b;  // scalar
    InputRouteSpec spec;
};

// M-way linear router for parameter subset selection; no bias, matching the
// M x D parameter count. Routing weights are M * softmax(W_r x).
template <class T>
struct ParamRouter {
    Tensor<T> w;  // (M, D)
    i64 k = 1;
};

template <class T>
struct LayerRouters {
    std::optional<InputRouter<T>> input_mha;
    std::optional<InputRouter<T>> input_mlp;
    std::optional<ParamRouter<T>> param_mha;
    std::optional<ParamRouter<T>> param_mlp;
    std::optional<ExpertSet<T>> experts;  // present when param_mlp is routed
};

template <class T>
struct ElasticModel {
    TransformerParams<T> params;  // backbone tensors shared with the teacher
    ElasticConfig cfg;
    std::vector<LayerRouters<T>> layers;

    template <class Fn>
    void for_each_trainable(Fn&& fn) const {
        auto& self = const_cast<ElasticModel&>(*this);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "block" + std::to_string(l) + ".router.";
            auto& lr = self.layers[l];
            if (lr.input_mha) {
                fn(p + "input_mha.w", lr.input_mha->w);
                fn(p + "input_mha.b", lr.input_mha->b);
            }
            if (lr.input_mlp) {
                fn(p + "input_mlp.w", lr.input_mlp->w);
                fn(p + "input_mlp.b", lr.input_mlp->b);
            }
            if (lr.param_mha) fn(p + "param_mha.w", lr.param_mha->w);
            if (lr.param_mlp) fn(p + "param_mlp.w", lr.param_mlp->w);
        }
        params.for_each_lora_tensor(fn);
    }

    i64 trainable_param_count() const {
        i64 n = 0;
        for_each_trainable([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
        return n;
    }

    i64 router_param_count() const {
        i64 n = 0;
        for (const auto& lr : layers) {
            if (lr.input_mha) n += lr.input_mha->w.numel() + lr.input_mha->b.numel();
            if (lr.input_mlp) n += lr.input_mlp->w.numel() + lr.input_mlp->b.numel();
            if (lr.param_mha) n += lr.param_mha->w.numel();
            if (lr.param_mlp) n += lr.param_mlp->w.numel();
        }
        return n;
    }
};

// Builds routers (and expert decompositions) for every scheduled layer.
// Router init keeps the wrapped model near the frozen base: parameter
// routers start at zero (weights exactly 1 at k=M), input routers start at
// weight 0 / bias +4.
template <class T>
ElasticModel<T> make_elastic(const TransformerParams<T>& teacher, const ElasticConfig& cfg,
                             std::uint64_t seed = 0) {
    cfg.validate(teacher.cfg);
    ElasticModel<T> em;
    em.cfg = cfg;
    em.params = teacher;
    if (cfg.lora) {
        std::vector<std::string> targets;
        if (cfg.lora->q_proj) targets.push_back("q_proj");
        if (cfg.lora->v_proj) targets.push_back("v_proj");
        em.params = attach_lora(em.params, targets, cfg.lora->rank,
                                cfg.lora->effective_alpha(), splitmix64(seed + 0xa110c));
    }
    const i64 d = teacher.cfg.hidden;
    em.layers.resize(teacher.cfg.layers);
    for (i64 l = 0; l < teacher.cfg.layers; ++l) {
        if (!cfg.routes_layer(l)) continue;
        auto& lr = em.layers[l];
        auto make_input = [&](const InputRouteSpec& spec) {
            InputRouter<T> r;
            r.spec = spec;
            r.w = Tensor<T>::zeros({d});
            r.b = Tensor<T>::full(Shape{}, T(4));
            r.w.set_requires_grad(true);
            r.b.set_requires_grad(true);
            return r;
        };
        if (cfg.input_mha) lr.input_mha = make_input(*cfg.input_mha);
        if (cfg.input_mlp) lr.input_mlp = make_input(*cfg.input_mlp);
        if (cfg.param_mha) {
            ParamRouter<T> r;
            r.k = cfg.param_mha->k;
            r.w = Tensor<T>::zeros({teacher.cfg.heads, d});
            r.w.set_requires_grad(true);
            lr.param_mha = r;
        }
        if (cfg.param_mlp) {
            ParamRouter<T> r;
            r.k = cfg.param_mlp->k;
            r.w = Tensor<T>::zeros({cfg.param_mlp->experts, d});
            r.w.set_requires_grad(true);
            lr.param_mlp = r;
            lr.experts = decompose_dense(teacher.blocks[l].mlp, cfg.param_mlp->experts);
        }
    }
    return em;
}

// Standalone single-token parameter routing (Algorithm-level entry point):
// weights = M * softmax(W_r x), hard top-k with ties to the lowest index.
template <class T>
RoutingDecision param_route(const ParamRouter<T>& router, const Tensor<T>& x_t) {
    const i64 m = router.w.dim(0);
    if (router.k > m) throw ConfigError("param router k exceeds option count");
    if (x_t.ndim() != 1 || x_t.dim(0) != router.w.dim(1))
        throw ShapeError("param_route expects a (D) token, got " + shape_str(x_t.shape()));
    Tensor<T> logits = linear(x_t.ndim() == 1 ? reshape(x_t, {1, x_t.dim(0)}) : x_t, router.w);
    Tensor<T> weights = scale(softmax(logits, -1), T(m));
    RoutingDecision d;
    d.kind = RouteKind::param_mlp;
    d.rows = 1;
    d.options = m;
    d.k = router.k;
    auto sel = topk_indices<T>(weights.data(), router.k);
    std::vector<double> w;
    for (i64 i : sel) w.push_back(static_cast<double>(weights.data()[i]));
    d.selected.push_back(std::move(sel));
    d.weights.push_back(std::move(w));
    d.prob_sums.assign(m, 0.0);
    for (i64 i = 0; i < m; ++i)
        d.prob_sums[i] = static_cast<double>(weights.data()[i]) / static_cast<double>(m);
    return d;
}

}  // namespace elt
