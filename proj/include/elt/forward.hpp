#pragma once

#include "elt/routing.hpp"

namespace elt {

enum class RoutingPhase { train, infer };

// Structured component removal for the redundancy analysis. No parameters
// are added: an entry here just bypasses the sub-block or zeroes a head.
struct PruneMask {
    std::vector<char> skip_mlp;
    std::vector<char> skip_layer;
    std::vector<std::vector<char>> drop_head;

    static PruneMask none(i64 layers, i64 heads) {
        PruneMask m;
        m.skip_mlp.assign(layers, 0);
        m.skip_layer.assign(layers, 0);
        m.drop_head.assign(layers, std::vector<char>(heads, 0));
        return m;
    }
    bool any_head_dropped(i64 layer) const {
        if (drop_head.empty()) return false;
        for (char c : drop_head[layer])
            if (c) return true;
        return false;
    }
};

// Side channel the elastic forward fills for the training objective:
// differentiable mean routing probabilities for the load-balance loss and
// router logits plus top-k targets for the BCE loss, one entry per routed
// module, plus optional full decision traces.
template <class T>
struct ForwardArtifacts {
    struct LoadTerm {
        i64 layer;
        RouteKind kind;
        Tensor<T> mean_prob;  // (M), graph node
        std::vector<T> freq;  // detached top-k selection frequencies
        i64 options;
        i64 k;
    };
    struct BceTerm {
        i64 layer;
        RouteKind kind;
        Tensor<T> logits;   // (B, T), graph node
        Tensor<T> targets;  // (B, T) constant 0/1 top-k membership
    };
    std::vector<LoadTerm> load_terms;
    std::vector<BceTerm> bce_terms;
    bool collect_decisions = false;
    std::vector<RoutingDecision> decisions;
    bool collect_layer_inputs = false;
    std::vector<Tensor<T>> layer_inputs;  // residual-stream x entering each layer
};

template <class T>
struct ForwardOptions {
    const ElasticModel<T>* elastic = nullptr;
    RoutingPhase phase = RoutingPhase::train;
    const PruneMask* prune = nullptr;
    ForwardArtifacts<T>* artifacts = nullptr;
};

namespace detail {

template <class T>
Tensor<T> causal_mask(i64 t) {
    Tensor<T> m = Tensor<T>::zeros({t, t});
    const T ninf = -std::numeric_limits<T>::infinity();
    for (i64 i = 0; i < t; ++i)
        for (i64 j = i + 1; j < t; ++j) m.data()[i * t + j] = ninf;
    return m;
}

inline IntTensor iota_ids(i64 t) {
    std::vector<i64> v(t);
    std::iota(v.begin(), v.end(), 0);
    return IntTensor({t}, std::move(v));
}

// Input-subset gate: per-token weights from the scalar router, top-ceil(c*T)
// hard selection during training, strict 0.5-threshold during inference.
// Returns the (B, T) gate = weight * membership used to scale the module
// branch; unselected tokens keep a zero gate and ride the residual.
template <class T>
Tensor<T> input_gate(const InputRouter<T>& router, const Tensor<T>& x, RoutingPhase phase,
                     bool causal, i64 layer, RouteKind kind, ForwardArtifacts<T>* artifacts) {
    const i64 b = x.dim(0);
    const i64 t = x.dim(1);
    const i64 d = x.dim(2);
    if (t < 1) throw DataError("input routing requires a non-empty sequence");
    Tensor<T> logits =
        add(select_last(matmul(x, reshape(router.w, {d, 1})), 0), router.b);  // (B, T)
    Tensor<T> weights;
    if (router.spec.weight_mode == WeightMode::sigmoid) {
        weights = sigmoid(logits);
    } else {
        if (phase == RoutingPhase::infer)
            throw UsageError("seq_softmax input routing has no thresholded inference mode");
        weights = softmax(logits, -1);
    }

    Tensor<T> member = Tensor<T>::zeros({b, t});
    i64 k = 0;
    RoutingDecision dec;
    const bool tracing = artifacts && artifacts->collect_decisions;
    if (tracing) {
        dec.layer = layer;
        dec.kind = kind;
        dec.rows = b;
        dec.options = t;
        dec.scores.assign(logits.data().begin(), logits.data().end());
    }
    if (phase == RoutingPhase::train) {
        k = capacity_to_k(router.spec.capacity, t);
        for (i64 r = 0; r < b; ++r) {
            auto sel = topk_indices<T>(weights.data().subspan(r * t, t), k);
            for (i64 j : sel) member.data()[r * t + j] = T(1);
            if (tracing) {
                std::vector<double> wv;
                for (i64 j : sel) wv.push_back(double(weights.data()[r * t + j]));
                dec.selected.push_back(std::move(sel));
                dec.weights.push_back(std::move(wv));
            }
        }
        if (tracing) dec.k = k;
    } else {
        const T theta = T(router.spec.threshold);
        for (i64 r = 0; r < b; ++r) {
            std::vector<i64> sel;
            for (i64 j = 0; j < t; ++j) {
                if (weights.data()[r * t + j] > theta) {
                    member.data()[r * t + j] = T(1);
                    sel.push_back(j);
                }
            }
            if (tracing) {
                std::vector<double> wv;
                for (i64 j : sel) wv.push_back(double(weights.data()[r * t + j]));
                dec.selected.push_back(std::move(sel));
                dec.weights.push_back(std::move(wv));
            }
        }
    }
    if (tracing) artifacts->decisions.push_back(std::move(dec));

    if (artifacts && causal && phase == RoutingPhase::train &&
        router.spec.weight_mode == WeightMode::sigmoid) {
        artifacts->bce_terms.push_back({layer, kind, logits, member});
    }
    return mul(weights, member);
}

// Parameter-subset weights: M-normalized softmax with per-token hard top-k.
// Returns the (B, T, M) masked weights (selected entries keep w, others 0).
template <class T>
Tensor<T> param_gate(const ParamRouter<T>& router, const Tensor<T>& h, i64 layer,
                     RouteKind kind, ForwardArtifacts<T>* artifacts) {
    const i64 b = h.dim(0);
    const i64 t = h.dim(1);
    const i64 m = router.w.dim(0);
    const i64 k = router.k;
    if (k > m) throw ConfigError("param router k exceeds option count");
    Tensor<T> router_logits = linear(h, router.w);          // (B, T, M)
    Tensor<T> probs = softmax(router_logits, -1);
    Tensor<T> weights = scale(probs, T(m));                 // sums to M per token
    Tensor<T> member = Tensor<T>::zeros({b, t, m});
    const i64 rows = b * t;
    RoutingDecision dec;
    const bool tracing = artifacts && artifacts->collect_decisions;
    if (tracing) {
        dec.layer = layer;
        dec.kind = kind;
        dec.rows = rows;
        dec.options = m;
        dec.k = k;
        dec.prob_sums.assign(m, 0.0);
        dec.scores.assign(router_logits.data().begin(), router_logits.data().end());
    }
    std::vector<T> freq(m, T(0));
    for (i64 r = 0; r < rows; ++r) {
        auto sel = topk_indices<T>(weights.data().subspan(r * m, m), k);
        for (i64 j : sel) {
            member.data()[r * m + j] = T(1);
            freq[j] += T(1);
        }
        if (tracing) {
            std::vector<double> wv;
            for (i64 j : sel) wv.push_back(double(weights.data()[r * m + j]));
            dec.selected.push_back(std::move(sel));
            dec.weights.push_back(std::move(wv));
        }
    }
    if (tracing) {
        for (i64 r = 0; r < rows; ++r)
            for (i64 j = 0; j < m; ++j) dec.prob_sums[j] += double(probs.data()[r * m + j]);
        artifacts->decisions.push_back(std::move(dec));
    }
    if (artifacts) {
        for (auto& f : freq) f /= T(rows);
        Tensor<T> mean_prob = scale(sum_axis(sum_axis(probs, 0), 0), T(1) / T(rows));
        artifacts->load_terms.push_back({layer, kind, mean_prob, std::move(freq), m, k});
    }
    return mul(weights, member);
}

template <class T>
Tensor<T> lora_delta(const LoraAdapter<T>& ad, const Tensor<T>& h) {
    Tensor<T> down = linear(h, ad.a);          // (B, T, r)
    Tensor<T> up = linear(down, ad.b);         // (B, T, D)
    return scale(up, T(ad.alpha / double(ad.rank)));
}

template <class T>
Tensor<T> attention_block(const TransformerParams<T>& p, i64 layer, const Tensor<T>& h,
                          const Tensor<T>* mask, const ForwardOptions<T>& opt) {
    const auto& a = p.blocks[layer].attn;
    const i64 b = h.dim(0);
    const i64 t = h.dim(1);
    const i64 d = p.cfg.hidden;
    const i64 heads = p.cfg.heads;
    const i64 hd = p.cfg.head_dim();

    const BlockLora<T>* lora =
        layer < static_cast<i64>(p.lora.size()) ? &p.lora[layer] : nullptr;

    Tensor<T> q = linear(h, a.wq, a.bq);
    if (lora && lora->q) q = add(q, lora_delta(*lora->q, h));
    // fold the attention scale into q, which is T times smaller than scores
    q = scale(q, T(1.0 / std::sqrt(double(hd))));
    Tensor<T> k = linear(h, a.wk, a.bk);
    Tensor<T> v = linear(h, a.wv, a.bv);
    if (lora && lora->v) v = add(v, lora_delta(*lora->v, h));

    q = transpose(reshape(q, {b, t, heads, hd}), 1, 2);  // (B, H, T, hd)
    k = transpose(reshape(k, {b, t, heads, hd}), 1, 2);
    v = transpose(reshape(v, {b, t, heads, hd}), 1, 2);

    Tensor<T> scores = matmul(q, k, /*transpose_b=*/true);  // (B, H, T, T)
    Tensor<T> att = mask ? masked_softmax(scores, *mask) : softmax(scores, -1);
    Tensor<T> ctx = matmul(att, v);                     // (B, H, T, hd)
    ctx = transpose(ctx, 1, 2);                         // (B, T, H, hd)

    const LayerRouters<T>* lr =
        opt.elastic && layer < static_cast<i64>(opt.elastic->layers.size())
            ? &opt.elastic->layers[layer]
            : nullptr;
    if (lr && lr->param_mha) {
        Tensor<T> gate =
            param_gate(*lr->param_mha, h, layer, RouteKind::param_mha, opt.artifacts);
        ctx = scale_rows(ctx, gate);
    } else if (opt.prune && opt.prune->any_head_dropped(layer)) {
        Tensor<T> keep = Tensor<T>::zeros({b, t, heads});
        for (i64 r = 0; r < b * t; ++r)
            for (i64 hh = 0; hh < heads; ++hh)
                keep.data()[r * heads + hh] = opt.prune->drop_head[layer][hh] ? T(0) : T(1);
        ctx = scale_rows(ctx, keep);
    }
    return linear(reshape(ctx, {b, t, d}), a.wo, a.bo);
}

template <class T>
Tensor<T> mlp_block(const TransformerParams<T>& p, i64 layer, const Tensor<T>& h,
                    const ForwardOptions<T>& opt) {
    const LayerRouters<T>* lr =
        opt.elastic && layer < static_cast<i64>(opt.elastic->layers.size())
            ? &opt.elastic->layers[layer]
            : nullptr;
    if (lr && lr->param_mlp) {
        const auto& set = *lr->experts;
        Tensor<T> gate =
            param_gate(*lr->param_mlp, h, layer, RouteKind::param_mlp, opt.artifacts);
        Tensor<T> acc;
        for (i64 m = 0; m < set.experts; ++m) {
            const auto& e = set.bank[m];
            Tensor<T> y = linear(gelu(linear(h, e.w1, e.b1)), e.w2);
            y = scale_rows(y, select_last(gate, m));
            acc = acc.defined() ? add(acc, y) : y;
        }
        return add(acc, set.b2);
    }
    return dense_mlp_forward(p.blocks[layer].mlp, h);
}

// Pre-norm residual transformer trunk shared by both modes.
template <class T>
Tensor<T> run_blocks(const TransformerParams<T>& p, Tensor<T> x, const Tensor<T>* mask,
                     const ForwardOptions<T>& opt) {
    const bool causal = p.cfg.mode == ModelMode::causal_lm;
    for (i64 l = 0; l < p.cfg.layers; ++l) {
        if (opt.artifacts && opt.artifacts->collect_layer_inputs)
            opt.artifacts->layer_inputs.push_back(x.detach());
        if (opt.prune && !opt.prune->skip_layer.empty() && opt.prune->skip_layer[l]) continue;
        const auto& blk = p.blocks[l];
        const LayerRouters<T>* lr =
            opt.elastic && l < static_cast<i64>(opt.elastic->layers.size())
                ? &opt.elastic->layers[l]
                : nullptr;

        Tensor<T> gate_mha;
        if (lr && lr->input_mha)
            gate_mha = input_gate(*lr->input_mha, x, opt.phase, causal, l,
                                  RouteKind::input_mha, opt.artifacts);
        Tensor<T> attn =
            attention_block(p, l, layer_norm(x, blk.ln1_g, blk.ln1_b), mask, opt);
        x = gate_mha.defined() ? add(x, scale_rows(attn, gate_mha)) : add(x, attn);

        if (opt.prune && !opt.prune->skip_mlp.empty() && opt.prune->skip_mlp[l]) continue;
        Tensor<T> gate_mlp;
        if (lr && lr->input_mlp)
            gate_mlp = input_gate(*lr->input_mlp, x, opt.phase, causal, l,
                                  RouteKind::input_mlp, opt.artifacts);
        Tensor<T> y = mlp_block(p, l, layer_norm(x, blk.ln2_g, blk.ln2_b), opt);
        x = gate_mlp.defined() ? add(x, scale_rows(y, gate_mlp)) : add(x, y);
    }
    return x;
}

}  // namespace detail

// Causal language model forward: (B, T) token ids -> (B, T, V) logits.
template <class T>
Tensor<T> forward_lm(const TransformerParams<T>& p, const IntTensor& tokens,
                     const ForwardOptions<T>& opt = {}) {
    if (p.cfg.mode != ModelMode::causal_lm)
        throw UsageError("forward_lm requires a causal_lm model");
    if (tokens.shape.size() != 2)
        throw DataError("token batch must be (B, T), got " + shape_str(tokens.shape));
    const i64 t = tokens.shape[1];
    if (t > p.cfg.max_seq)
        throw DataError("sequence length " + std::to_string(t) + " exceeds max_seq " +
                        std::to_string(p.cfg.max_seq));
    Tensor<T> x = add(embedding(p.tok_embed, tokens),
                      embedding(p.pos_embed, detail::iota_ids(t)));
    Tensor<T> mask = detail::causal_mask<T>(t);
    x = detail::run_blocks(p, std::move(x), &mask, opt);
    Tensor<T> h = layer_norm(x, p.lnf_g, p.lnf_b);
    return linear(h, p.tok_embed);  // tied output head
}

// Encoder forward: (B, T, P) patches -> (B, T, D) normalized embeddings.
template <class T>
Tensor<T> forward_encoder(const TransformerParams<T>& p, const Tensor<T>& patches,
                          const ForwardOptions<T>& opt = {}) {
    if (p.cfg.mode != ModelMode::encoder)
        throw UsageError("forward_encoder requires an encoder model");
    if (patches.ndim() != 3) throw DataError("patch batch must be (B, T, P)");
    const i64 t = patches.dim(1);
    if (t != p.cfg.seq_len())
        throw DataError("patch count " + std::to_string(t) + " does not match grid^2 = " +
                        std::to_string(p.cfg.seq_len()));
    if (patches.dim(2) != p.cfg.patch_dim)
        throw DataError("patch dim " + std::to_string(patches.dim(2)) +
                        " does not match model patch_dim");
    Tensor<T> x = add(linear(patches, p.patch_embed_w, p.patch_embed_b),
                      embedding(p.pos_embed, detail::iota_ids(t)));
    x = detail::run_blocks(p, std::move(x), static_cast<const Tensor<T>*>(nullptr), opt);
    return layer_norm(x, p.lnf_g, p.lnf_b);
}

// Patch regression head used for encoder teacher pretraining.
template <class T>
Tensor<T> encoder_reconstruct(const TransformerParams<T>& p, const Tensor<T>& embeddings) {
    return linear(embeddings, p.patch_head_w, p.patch_head_b);
}

// Mean next-token cross entropy given already-shifted targets.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const IntTensor& targets) {
    const i64 b = logits.dim(0);
    const i64 t = logits.dim(1);
    IntTensor idx({b, t, 1}, targets.data);
    Tensor<T> nll = gather_last(log_softmax(logits, -1), idx);
    return neg(mean_all(nll));
}

// Per-position argmax over the vocabulary.
template <class T>
std::vector<i64> argmax_last(const Tensor<T>& logits) {
    const i64 c = logits.dim(-1);
    const i64 rows = logits.numel() / c;
    std::vector<i64> out(rows);
    for (i64 r = 0; r < rows; ++r) {
        const T* p = logits.data().data() + r * c;
        i64 best = 0;
        for (i64 j = 1; j < c; ++j)
            if (p[j] > p[best]) best = j;
        out[r] = best;
    }
    return out;
}

}  // namespace elt
