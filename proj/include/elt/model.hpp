#pragma once

#include <optional>
#include <string>

#include "elt/config.hpp"
#include "elt/ops.hpp"
#include "elt/sha256.hpp"

namespace elt {

template <class T>
struct AttentionParams {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class T>
struct MlpParams {
    Tensor<T> w1, b1;  // (F, D), (F)
    Tensor<T> w2, b2;  // (D, F), (D)
};

template <class T>
struct BlockParams {
    Tensor<T> ln1_g, ln1_b;
    AttentionParams<T> attn;
    Tensor<T> ln2_g, ln2_b;
    MlpParams<T> mlp;
};

// Additive low-rank update on a frozen projection: W_eff = W + (alpha/r) B A.
// B starts at zero so a fresh adapter is an exact no-op.
template <class T>
struct LoraAdapter {
    Tensor<T> a;  // (r, D)
    Tensor<T> b;  // (D, r)
    i64 rank = 1;
    double alpha = 2.0;
};

template <class T>
struct BlockLora {
    std::optional<LoraAdapter<T>> q;
    std::optional<LoraAdapter<T>> v;
};

template <class T>
struct TransformerParams {
    ModelConfig cfg;
    Tensor<T> tok_embed;  // causal mode: (V, D), also the tied output head
    Tensor<T> patch_embed_w, patch_embed_b;  // encoder mode: (D, P), (D)
    Tensor<T> patch_head_w, patch_head_b;    // encoder pretraining head: (P, D), (P)
    Tensor<T> pos_embed;                     // (T_max, D)
    std::vector<BlockParams<T>> blocks;
    Tensor<T> lnf_g, lnf_b;
    std::vector<BlockLora<T>> lora;  // empty unless attach_lora was called
    bool frozen = false;

    // Visits every backbone tensor in a fixed order; LoRA tensors excluded.
    template <class Fn>
    void for_each_tensor(Fn&& fn) const {
        auto& self = const_cast<TransformerParams&>(*this);
        if (cfg.mode == ModelMode::causal_lm) {
            fn("tok_embed", self.tok_embed);
        } else {
            fn("patch_embed_w", self.patch_embed_w);
            fn("patch_embed_b", self.patch_embed_b);
            fn("patch_head_w", self.patch_head_w);
            fn("patch_head_b", self.patch_head_b);
        }
        fn("pos_embed", self.pos_embed);
        for (std::size_t l = 0; l < blocks.size(); ++l) {
            const std::string p = "block" + std::to_string(l) + ".";
            auto& blk = self.blocks[l];
            fn(p + "ln1_g", blk.ln1_g);
            fn(p + "ln1_b", blk.ln1_b);
            fn(p + "attn.wq", blk.attn.wq);
            fn(p + "attn.bq", blk.attn.bq);
            fn(p + "attn.wk", blk.attn.wk);
            fn(p + "attn.bk", blk.attn.bk);
            fn(p + "attn.wv", blk.attn.wv);
            fn(p + "attn.bv", blk.attn.bv);
            fn(p + "attn.wo", blk.attn.wo);
            fn(p + "attn.bo", blk.attn.bo);
            fn(p + "ln2_g", blk.ln2_g);
            fn(p + "ln2_b", blk.ln2_b);
            fn(p + "mlp.w1", blk.mlp.w1);
            fn(p + "mlp.b1", blk.mlp.b1);
            fn(p + "mlp.w2", blk.mlp.w2);
            fn(p + "mlp.b2", blk.mlp.b2);
        }
        fn("lnf_g", self.lnf_g);
        fn("lnf_b", self.lnf_b);
    }

    template <class Fn>
    void for_each_lora_tensor(Fn&& fn) const {
        auto& self = const_cast<TransformerParams&>(*this);
        for (std::size_t l = 0; l < lora.size(); ++l) {
            const std::string p = "block" + std::to_string(l) + ".lora.";
            if (self.lora[l].q) {
                fn(p + "q.a", self.lora[l].q->a);
                fn(p + "q.b", self.lora[l].q->b);
            }
            if (self.lora[l].v) {
                fn(p + "v.a", self.lora[l].v->a);
                fn(p + "v.b", self.lora[l].v->b);
            }
        }
    }

    void set_backbone_trainable(bool trainable) {
        for_each_tensor([&](const std::string&, Tensor<T>& t) { t.set_requires_grad(trainable); });
    }

    void freeze() {
        frozen = true;
        set_backbone_trainable(false);
    }
};

template <class T>
TransformerParams<T> build_model(const ModelConfig& cfg) {
    cfg.validate();
    const i64 d = cfg.hidden;
    const i64 f = cfg.mlp_hidden;
    Rng rng(cfg.seed);
    const T std_dev = T(0.02);

    TransformerParams<T> p;
    p.cfg = cfg;
    if (cfg.mode == ModelMode::causal_lm) {
        p.tok_embed = Tensor<T>::randn({cfg.vocab_size, d}, rng, std_dev);
    } else {
        p.patch_embed_w = Tensor<T>::randn({d, cfg.patch_dim}, rng, std_dev);
        p.patch_embed_b = Tensor<T>::zeros({d});
        p.patch_head_w = Tensor<T>::randn({cfg.patch_dim, d}, rng, std_dev);
        p.patch_head_b = Tensor<T>::zeros({cfg.patch_dim});
    }
    p.pos_embed = Tensor<T>::randn({cfg.seq_len(), d}, rng, std_dev);
    p.blocks.resize(cfg.layers);
    for (auto& blk : p.blocks) {
        blk.ln1_g = Tensor<T>::full({d}, T(1));
        blk.ln1_b = Tensor<T>::zeros({d});
        blk.attn.wq = Tensor<T>::randn({d, d}, rng, std_dev);
        blk.attn.bq = Tensor<T>::zeros({d});
        blk.attn.wk = Tensor<T>::randn({d, d}, rng, std_dev);
        blk.attn.bk = Tensor<T>::zeros({d});
        blk.attn.wv = Tensor<T>::randn({d, d}, rng, std_dev);
        blk.attn.bv = Tensor<T>::zeros({d});
        blk.attn.wo = Tensor<T>::randn({d, d}, rng, std_dev);
        blk.attn.bo = Tensor<T>::zeros({d});
        blk.ln2_g = Tensor<T>::full({d}, T(1));
        blk.ln2_b = Tensor<T>::zeros({d});
        blk.mlp.w1 = Tensor<T>::randn({f, d}, rng, std_dev);
        blk.mlp.b1 = Tensor<T>::zeros({f});
        blk.mlp.w2 = Tensor<T>::randn({d, f}, rng, std_dev);
        blk.mlp.b2 = Tensor<T>::zeros({d});
    }
    p.lnf_g = Tensor<T>::full({d}, T(1));
    p.lnf_b = Tensor<T>::zeros({d});
    return p;
}

// Shares the backbone tensors of `base`; adds fresh adapters on the chosen
// projections. Adapters are the only trainable tensors of the result.
template <class T>
TransformerParams<T> attach_lora(const TransformerParams<T>& base,
                                 const std::vector<std::string>& targets, i64 rank,
                                 double alpha, std::uint64_t seed = 0x10ab) {
    if (rank < 1) throw ConfigError("lora rank must be >= 1");
    bool want_q = false, want_v = false;
    for (const auto& t : targets) {
        if (t == "q_proj")
            want_q = true;
        else if (t == "v_proj")
            want_v = true;
        else
            throw ConfigError("unknown lora target '" + t + "' (expected q_proj or v_proj)");
    }
    TransformerParams<T> out = base;  // tensor handles shared
    Rng rng(seed);
    const i64 d = base.cfg.hidden;
    out.lora.assign(base.blocks.size(), BlockLora<T>{});
    for (auto& bl : out.lora) {
        auto make = [&]() {
            LoraAdapter<T> ad;
            ad.rank = rank;
            ad.alpha = alpha;
            ad.a = Tensor<T>::randn({rank, d}, rng, T(0.02));
            ad.b = Tensor<T>::zeros({d, rank});
            ad.a.set_requires_grad(true);
            ad.b.set_requires_grad(true);
            return ad;
        };
        if (want_q) bl.q = make();
        if (want_v) bl.v = make();
    }
    return out;
}

template <class T>
i64 count_params(const TransformerParams<T>& p, bool trainable_only = false) {
    i64 total = 0;
    p.for_each_tensor([&](const std::string&, Tensor<T>& t) {
        if (!trainable_only || t.requires_grad()) total += t.numel();
    });
    p.for_each_lora_tensor([&](const std::string&, Tensor<T>& t) {
        if (!trainable_only || t.requires_grad()) total += t.numel();
    });
    return total;
}

// SHA-256 over the backbone tensors (name, shape, raw data), fixed order.
// LoRA adapters are not part of the backbone identity.
template <class T>
std::string backbone_digest(const TransformerParams<T>& p) {
    Sha256 h;
    p.for_each_tensor([&](const std::string& name, Tensor<T>& t) {
        h.update(name.data(), name.size());
        for (i64 d : t.shape()) h.update(&d, sizeof(d));
        h.update(t.data().data(), t.data().size() * sizeof(T));
    });
    return h.hex_digest();
}

}  // namespace elt
