#pragma once

#include "elt/trainer.hpp"

namespace elt {

// ---------------------------------------------------------------------------
// evaluation helpers
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<i64> all_ids(i64 n) {
    std::vector<i64> v(n);
    std::iota(v.begin(), v.end(), 0);
    return v;
}

}  // namespace detail

// Mean next-token cross entropy over the span, batched; deterministic order.
template <class T>
double eval_lm_loss(const TransformerParams<T>& p, std::span<const i64> tokens,
                    const ForwardOptions<T>& opt = {}, i64 batch = 8, i64 max_windows = 0) {
    const LmWindows win = make_windows(tokens, p.cfg.max_seq);
    i64 n = i64(win.starts.size());
    if (max_windows > 0) n = std::min(n, max_windows);
    double total = 0;
    i64 count = 0;
    for (i64 b = 0; b < n; b += batch) {
        const i64 take = std::min(batch, n - b);
        std::vector<i64> ids(take);
        std::iota(ids.begin(), ids.end(), b);
        LmBatch lb = gather_batch(tokens, win, ids);
        Tensor<T> logits = forward_lm(p, lb.inputs, opt);
        total += double(cross_entropy(logits, lb.targets).item()) * double(take);
        count += take;
    }
    return total / double(count);
}

// Mean distillation loss (the configured KL form) of the routed student
// against the frozen teacher on held-out windows.
template <class T>
double eval_distill_loss(const TransformerParams<T>& teacher, const ElasticModel<T>& em,
                         std::span<const i64> tokens, const DistillConfig& dcfg, i64 batch = 8,
                         i64 max_windows = 0, RoutingPhase phase = RoutingPhase::train) {
    const LmWindows win = make_windows(tokens, teacher.cfg.max_seq);
    i64 n = i64(win.starts.size());
    if (max_windows > 0) n = std::min(n, max_windows);
    double total = 0;
    i64 count = 0;
    for (i64 b = 0; b < n; b += batch) {
        const i64 take = std::min(batch, n - b);
        std::vector<i64> ids(take);
        std::iota(ids.begin(), ids.end(), b);
        LmBatch lb = gather_batch(tokens, win, ids);
        Tensor<T> t_logits = forward_lm(teacher, lb.inputs);
        ForwardOptions<T> fo;
        fo.elastic = &em;
        fo.phase = phase;
        Tensor<T> s_logits = forward_lm(em.params, lb.inputs, fo);
        Tensor<T> loss = dcfg.top_k_vocab > 0
                             ? topk_kl_loss(s_logits, t_logits, dcfg.top_k_vocab, dcfg)
                             : kl_loss(s_logits, t_logits, dcfg);
        total += double(loss.item()) * double(take);
        count += take;
    }
    return total / double(count);
}

// Fraction of positions where the modified model predicts the same next
// token as the base model.
template <class T>
double top1_agreement(const TransformerParams<T>& base, const TransformerParams<T>& variant,
                      std::span<const i64> tokens, const ForwardOptions<T>& variant_opt,
                      i64 batch = 8, i64 max_windows = 0) {
    const LmWindows win = make_windows(tokens, base.cfg.max_seq);
    i64 n = i64(win.starts.size());
    if (max_windows > 0) n = std::min(n, max_windows);
    i64 same = 0, total = 0;
    for (i64 b = 0; b < n; b += batch) {
        const i64 take = std::min(batch, n - b);
        std::vector<i64> ids(take);
        std::iota(ids.begin(), ids.end(), b);
        LmBatch lb = gather_batch(tokens, win, ids);
        auto a = argmax_last(forward_lm(base, lb.inputs));
        auto c = argmax_last(forward_lm(variant, lb.inputs, variant_opt));
        for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == c[i];
        total += i64(a.size());
    }
    return double(same) / double(total);
}

// Mean cosine similarity between teacher and routed-student embeddings.
template <class T>
double eval_cosine_similarity(const TransformerParams<T>& teacher, const ElasticModel<T>& em,
                              const ImageSet& images, std::span<const i64> ids, i64 batch = 8) {
    double total = 0;
    i64 count = 0;
    for (std::size_t b = 0; b < ids.size(); b += std::size_t(batch)) {
        const std::size_t take = std::min(std::size_t(batch), ids.size() - b);
        Tensor<T> patches = images.batch<T>(ids.subspan(b, take));
        Tensor<T> t_emb = forward_encoder(teacher, patches);
        ForwardOptions<T> fo;
        fo.elastic = &em;
        Tensor<T> s_emb = forward_encoder(em.params, patches, fo);
        const double dist = double(cosine_distance_loss(s_emb, t_emb).item());
        total += (1.0 - dist) * double(take);
        count += i64(take);
    }
    return total / double(count);
}

// Fraction of tokens the input routers admit at inference (threshold rule),
// averaged over all routed layers of the given kind.
template <class T>
double inference_selection_fraction(const ElasticModel<T>& em, std::span<const i64> tokens,
                                    RouteKind kind, i64 batch = 8, i64 max_windows = 0) {
    const LmWindows win = make_windows(tokens, em.params.cfg.max_seq);
    i64 n = i64(win.starts.size());
    if (max_windows > 0) n = std::min(n, max_windows);
    double selected = 0, total = 0;
    for (i64 b = 0; b < n; b += batch) {
        const i64 take = std::min(batch, n - b);
        std::vector<i64> ids(take);
        std::iota(ids.begin(), ids.end(), b);
        LmBatch lb = gather_batch(tokens, win, ids);
        ForwardArtifacts<T> art;
        art.collect_decisions = true;
        ForwardOptions<T> fo;
        fo.elastic = &em;
        fo.phase = RoutingPhase::infer;
        fo.artifacts = &art;
        forward_lm(em.params, lb.inputs, fo);
        for (const auto& d : art.decisions) {
            if (d.kind != kind) continue;
            for (const auto& row : d.selected) selected += double(row.size());
            total += double(d.rows * d.options);
        }
    }
    if (total == 0) throw UsageError("no routers of the requested kind were executed");
    return selected / total;
}

// ---------------------------------------------------------------------------
// pruning protocol
// ---------------------------------------------------------------------------

struct PruneRow {
    i64 count = 0;
    double mean_dloss = 0, sd_dloss = 0;
    double mean_match = 0, sd_match = 0;
};

struct PruneResult {
    PruneKind kind = PruneKind::mlp_layer;
    std::string corpus_name;
    double base_loss = 0;
    std::vector<PruneRow> rows;
};

// Random structured removal with `groups` seeded subsets per count; metrics
// are deltas against the unpruned model on the eval split. No parameters are
// added or trained.
template <class T>
PruneResult prune_eval(const TransformerParams<T>& teacher, const PruneSpec& spec,
                       const Corpus& corpus, i64 batch = 8, i64 max_windows = 0) {
    spec.validate(teacher.cfg);
    PruneResult res;
    res.kind = spec.kind;
    res.corpus_name = corpus.name;
    res.base_loss = eval_lm_loss(teacher, corpus.eval(), {}, batch, max_windows);

    std::vector<i64> counts = spec.counts;
    if (counts.empty()) {
        const i64 total = spec.component_total(teacher.cfg);
        const i64 step = spec.kind == PruneKind::attention_head
                             ? std::max<i64>(1, teacher.cfg.heads / 2)
                             : 1;
        for (i64 c = 0; c <= total; c += step) counts.push_back(c);
    }

    Rng base_rng(spec.seed);
    for (i64 count : counts) {
        std::vector<double> dlosses, matches;
        for (i64 g = 0; g < spec.groups; ++g) {
            PruneMask mask = PruneMask::none(teacher.cfg.layers, teacher.cfg.heads);
            const i64 total = spec.component_total(teacher.cfg);
            Rng rng = base_rng.fork(std::uint64_t(count) * 1000 + std::uint64_t(g));
            std::vector<i64> ids(total);
            std::iota(ids.begin(), ids.end(), 0);
            for (i64 i = total - 1; i > 0; --i) std::swap(ids[i], ids[rng.uniform_int(i + 1)]);
            for (i64 i = 0; i < count; ++i) {
                const i64 c = ids[i];
                switch (spec.kind) {
                    case PruneKind::mlp_layer: mask.skip_mlp[c] = 1; break;
                    case PruneKind::transformer_layer: mask.skip_layer[c] = 1; break;
                    case PruneKind::attention_head:
                        mask.drop_head[c / teacher.cfg.heads][c % teacher.cfg.heads] = 1;
                        break;
                }
            }
            ForwardOptions<T> opt;
            opt.prune = &mask;
            dlosses.push_back(eval_lm_loss(teacher, corpus.eval(), opt, batch, max_windows) -
                              res.base_loss);
            matches.push_back(
                top1_agreement(teacher, teacher, corpus.eval(), opt, batch, max_windows));
            if (count == 0) break;  // all groups identical at the anchor
        }
        auto stats = [](const std::vector<double>& v) {
            double mean = 0;
            for (double x : v) mean += x;
            mean /= double(v.size());
            double var = 0;
            for (double x : v) var += (x - mean) * (x - mean);
            return std::pair<double, double>(mean, std::sqrt(var / double(v.size())));
        };
        PruneRow row;
        row.count = count;
        std::tie(row.mean_dloss, row.sd_dloss) = stats(dlosses);
        std::tie(row.mean_match, row.sd_match) = stats(matches);
        res.rows.push_back(row);
    }
    return res;
}

// Spearman rank correlation between removal count and mean delta loss.
inline double prune_spearman(const PruneResult& res) {
    const std::size_t n = res.rows.size();
    if (n < 2) return 1.0;
    auto ranks = [&](auto key) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(),
                  [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
        std::vector<double> r(n);
        for (std::size_t i = 0; i < n; ++i) r[idx[i]] = double(i);
        return r;
    };
    auto rc = ranks([&](std::size_t i) { return double(res.rows[i].count); });
    auto rl = ranks([&](std::size_t i) { return res.rows[i].mean_dloss; });
    double mc = 0, ml = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mc += rc[i] / double(n);
        ml += rl[i] / double(n);
    }
    double num = 0, dc = 0, dl = 0;
    for (std::size_t i = 0; i < n; ++i) {
        num += (rc[i] - mc) * (rl[i] - ml);
        dc += (rc[i] - mc) * (rc[i] - mc);
        dl += (rl[i] - ml) * (rl[i] - ml);
    }
    if (dc == 0 || dl == 0) return 0.0;
    return num / std::sqrt(dc * dl);
}

// ---------------------------------------------------------------------------
// compute accounting
// ---------------------------------------------------------------------------

struct ActiveCompute {
    i64 total_params = 0;          // full backbone enumeration
    double active_params = 0;      // expected active backbone params per token
    i64 router_params = 0;         // trainable routing parameters
    i64 adapter_params = 0;        // trainable LoRA parameters
};

// Closed-form active-parameter accounting. Exact at the identity
// configuration (k = M, k = H, capacities 1): active == total.
inline ActiveCompute active_compute(const ModelConfig& model, const ElasticConfig& elastic) {
    model.validate();
    elastic.validate(model);
    const double d = double(model.hidden);
    const double f = double(model.mlp_hidden);
    const double heads = double(model.heads);

    ActiveCompute out;
    double embed = 0;
    if (model.mode == ModelMode::causal_lm) {
        embed = double(model.vocab_size) * d;
    } else {
        embed = d * double(model.patch_dim) + d                      // patch embedding
                + double(model.patch_dim) * d + double(model.patch_dim);  // regression head
    }
    const double pos = double(model.seq_len()) * d;
    const double attn_full = 4.0 * d * d + 4.0 * d;
    const double mlp_full = 2.0 * d * f + f + d;
    const double ln = 2.0 * d;

    out.total_params =
        i64(embed + pos + double(model.layers) * (2.0 * ln + attn_full + mlp_full) + ln);

    double active = embed + pos + ln;  // final layer norm
    for (i64 l = 0; l < model.layers; ++l) {
        const bool routed = elastic.routes_layer(l);
        double attn = attn_full;
        double mlp = mlp_full;
        double attn_branch = ln + attn;
        double mlp_branch = ln + mlp;
        if (routed) {
            if (elastic.param_mha) {
                const double frac = double(elastic.param_mha->k) / heads;
                attn = frac * (4.0 * d * d + 3.0 * d) + d;  // wo bias always applied
                attn_branch = ln + attn;
            }
            if (elastic.param_mlp) {
                const double frac =
                    double(elastic.param_mlp->k) / double(elastic.param_mlp->experts);
                mlp = frac * (2.0 * d * f + f) + d;  // shared output bias
                mlp_branch = ln + mlp;
            }
            if (elastic.input_mha) attn_branch *= elastic.input_mha->capacity;
            if (elastic.input_mlp) mlp_branch *= elastic.input_mlp->capacity;
        }
        active += attn_branch + mlp_branch;
    }
    out.active_params = active;

    i64 routed_layers = 0;
    for (i64 l = 0; l < model.layers; ++l) routed_layers += elastic.routes_layer(l);
    i64 router = 0;
    if (elastic.input_mha) router += model.hidden + 1;
    if (elastic.input_mlp) router += model.hidden + 1;
    if (elastic.param_mha) router += model.heads * model.hidden;
    if (elastic.param_mlp) router += elastic.param_mlp->experts * model.hidden;
    out.router_params = router * routed_layers;
    if (elastic.lora) {
        const i64 targets = (elastic.lora->q_proj ? 1 : 0) + (elastic.lora->v_proj ? 1 : 0);
        out.adapter_params = 2 * elastic.lora->rank * model.hidden * model.layers * targets;
    }
    return out;
}

// ---------------------------------------------------------------------------
// capacity sweep
// ---------------------------------------------------------------------------

struct SweepRow {
    std::string kind;  // routing kind or "teacher" for the baseline row
    double capacity = 1.0;
    double eval_distill_loss = 0;
    double eval_task_metric = 0;  // eval LM loss (causal) or cosine similarity (encoder)
    double active_params = 0;
    double active_token_frac = 1.0;
    i64 router_params = 0;
    std::uint64_t seed = 0;
};

struct SweepResult {
    std::vector<SweepRow> rows;
};

inline ElasticConfig sweep_cell_config(RouteKind kind, double capacity, i64 experts, i64 heads) {
    ElasticConfig e;
    switch (kind) {
        case RouteKind::input_mha:
            e.input_mha = InputRouteSpec{capacity, WeightMode::sigmoid, 0.5};
            break;
        case RouteKind::input_mlp:
            e.input_mlp = InputRouteSpec{capacity, WeightMode::sigmoid, 0.5};
            break;
        case RouteKind::param_mha: {
            const i64 k = std::clamp<i64>(i64(std::llround(capacity * double(heads))), 1, heads);
            e.param_mha = ParamRouteSpec{k, heads};
            break;
        }
        case RouteKind::param_mlp: {
            const i64 k =
                std::clamp<i64>(i64(std::llround(capacity * double(experts))), 1, experts);
            e.param_mlp = ParamRouteSpec{k, experts};
            break;
        }
    }
    return e;
}

// Trains one router set per (kind, capacity) cell and evaluates it on the
// held-out split. The teacher baseline row mirrors the reference line of the
// capacity/performance plots.
template <class T>
SweepResult capacity_sweep(const TransformerParams<T>& teacher, const SweepSpec& sweep,
                           const DistillConfig& dcfg, const TrainConfig& tcfg,
                           const Corpus& corpus, i64 eval_batch = 8, i64 max_eval_windows = 0) {
    sweep.validate(teacher.cfg);
    SweepResult out;
    {
        SweepRow base;
        base.kind = "teacher";
        base.capacity = 1.0;
        base.eval_distill_loss = 0.0;
        base.eval_task_metric =
            eval_lm_loss(teacher, corpus.eval(), {}, eval_batch, max_eval_windows);
        base.active_params = double(count_params(teacher));
        base.active_token_frac = 1.0;
        base.router_params = 0;
        base.seed = tcfg.seed;
        out.rows.push_back(base);
    }
    for (RouteKind kind : sweep.kinds) {
        std::vector<double> grid = sweep.grid;
        std::sort(grid.begin(), grid.end());
        for (double capacity : grid) {
            ElasticConfig ecfg =
                sweep_cell_config(kind, capacity, sweep.experts, teacher.cfg.heads);
            DistillResult<T> cell = train_distill(teacher, ecfg, dcfg, tcfg, corpus);
            SweepRow row;
            row.kind = route_kind_name(kind);
            row.capacity = capacity;
            row.eval_distill_loss = eval_distill_loss(teacher, cell.model, corpus.eval(), dcfg,
                                                      eval_batch, max_eval_windows);
            ForwardOptions<T> fo;
            fo.elastic = &cell.model;
            row.eval_task_metric =
                eval_lm_loss(cell.model.params, corpus.eval(), fo, eval_batch,
                             max_eval_windows);
            const ActiveCompute ac = active_compute(teacher.cfg, ecfg);
            row.active_params = ac.active_params;
            row.active_token_frac =
                is_input_kind(kind)
                    ? double(capacity_to_k(capacity, teacher.cfg.max_seq)) /
                          double(teacher.cfg.max_seq)
                    : 1.0;
            row.router_params = ac.router_params;
            row.seed = tcfg.seed;
            out.rows.push_back(row);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// router similarity (encoder mode)
// ---------------------------------------------------------------------------

struct RouterSimilarity {
    std::vector<std::string> labels;
    std::vector<std::vector<double>> matrix;  // pairwise cosine of router logits
    i64 mask_layer = -1;                      // layer of the exported masks
    // masks[router][image][token]: 1 = selected by the first routed input router
    std::vector<std::vector<std::vector<int>>> masks;
};

// Compares router sets by the cosine similarity of their per-token logits,
// all evaluated on the same frozen-teacher activations of a shared probe
// set, and exports per-image selection masks for heatmaps.
template <class T>
RouterSimilarity router_similarity(const std::vector<const ElasticModel<T>*>& routers,
                                   const std::vector<std::string>& labels,
                                   const ImageSet& probe, std::span<const i64> probe_ids,
                                   i64 batch = 8) {
    if (routers.empty() || routers.size() != labels.size())
        throw UsageError("router_similarity needs matching router/label lists");
    for (const auto* r : routers) {
        if (r->params.cfg.hidden != routers[0]->params.cfg.hidden ||
            r->params.cfg.layers != routers[0]->params.cfg.layers ||
            r->layers.size() != routers[0]->layers.size())
            throw ConfigError("router sets must share the model architecture");
        for (std::size_t l = 0; l < r->layers.size(); ++l) {
            if (r->layers[l].input_mha.has_value() !=
                    routers[0]->layers[l].input_mha.has_value() ||
                r->layers[l].input_mlp.has_value() !=
                    routers[0]->layers[l].input_mlp.has_value())
                throw ConfigError("router sets must share the routing layout");
        }
    }
    const TransformerParams<T>& base = routers[0]->params;

    RouterSimilarity out;
    out.labels = labels;
    std::vector<std::vector<double>> logits(routers.size());
    out.masks.assign(routers.size(), {});
    for (auto& m : out.masks) m.resize(probe_ids.size());

    for (std::size_t b = 0; b < probe_ids.size(); b += std::size_t(batch)) {
        const std::size_t take = std::min(std::size_t(batch), probe_ids.size() - b);
        Tensor<T> patches = probe.batch<T>(probe_ids.subspan(b, take));
        ForwardArtifacts<T> art;
        art.collect_layer_inputs = true;
        ForwardOptions<T> fo;
        fo.artifacts = &art;
        forward_encoder(base, patches, fo);  // unrouted shared activations

        for (std::size_t r = 0; r < routers.size(); ++r) {
            for (std::size_t l = 0; l < routers[r]->layers.size(); ++l) {
                const auto& lr = routers[r]->layers[l];
                const InputRouter<T>* router =
                    lr.input_mlp ? &*lr.input_mlp : (lr.input_mha ? &*lr.input_mha : nullptr);
                if (!router) continue;
                const Tensor<T>& x = art.layer_inputs[l];
                const i64 t = x.dim(1), d = x.dim(2);
                const T* px = x.data().data();
                const T* pw = router->w.data().data();
                const T bias = router->b.data()[0];
                for (std::size_t img = 0; img < take; ++img) {
                    std::vector<double> row(t);
                    for (i64 tok = 0; tok < t; ++tok) {
                        T acc = bias;
                        for (i64 j = 0; j < d; ++j)
                            acc += px[(i64(img) * t + tok) * d + j] * pw[j];
                        row[tok] = double(acc);
                        logits[r].push_back(double(acc));
                    }
                    if (out.mask_layer < 0) out.mask_layer = i64(l);
                    if (i64(l) == out.mask_layer) {
                        const i64 k = capacity_to_k(router->spec.capacity, t);
                        auto sel = topk_indices<double>(row, k);
                        std::vector<int> m(t, 0);
                        for (i64 tok : sel) m[tok] = 1;
                        out.masks[r][b + img] = std::move(m);
                    }
                }
            }
        }
    }
    for (std::size_t r = 0; r < routers.size(); ++r)
        if (logits[r].empty())
            throw ConfigError("router set '" + labels[r] + "' has no input routers to compare");

    const std::size_t n = routers.size();
    out.matrix.assign(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (logits[i].size() != logits[j].size())
                throw ConfigError("router logit traces differ in length");
            double dot = 0, ni = 0, nj = 0;
            for (std::size_t t = 0; t < logits[i].size(); ++t) {
                dot += logits[i][t] * logits[j][t];
                ni += logits[i][t] * logits[i][t];
                nj += logits[j][t] * logits[j][t];
            }
            out.matrix[i][j] = dot / (std::sqrt(ni) * std::sqrt(nj));
        }
    }
    return out;
}

}  // namespace elt
