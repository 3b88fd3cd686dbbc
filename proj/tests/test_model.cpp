#include <doctest.h>

#include <cmath>

#include "elt/forward.hpp"

using namespace elt;

namespace {

ModelConfig small_lm() {
    ModelConfig c;
    c.mode = ModelMode::causal_lm;
    c.vocab_size = 37;
    c.layers = 2;
    c.hidden = 16;
    c.heads = 4;
    c.mlp_hidden = 32;
    c.max_seq = 12;
    c.seed = 5;
    return c;
}

IntTensor random_tokens(Rng& rng, i64 b, i64 t, i64 v) {
    std::vector<i64> ids(b * t);
    for (auto& x : ids) x = rng.uniform_int(v);
    return IntTensor({b, t}, std::move(ids));
}

}  // namespace

TEST_CASE("build_model: parameter count matches hand enumeration") {
    ModelConfig c = small_lm();
    auto p = build_model<float>(c);
    const i64 d = c.hidden, f = c.mlp_hidden;
    // embeddings + positions + L * (2 LN + 4 attn proj + MLP) + final LN
    const i64 per_layer = 2 * (d + d) + 4 * (d * d + d) + (f * d + f) + (d * f + d);
    const i64 want = c.vocab_size * d + c.max_seq * d + c.layers * per_layer + 2 * d;
    CHECK(count_params(p) == want);
}

TEST_CASE("build_model: determinism and config validation") {
    auto a = build_model<float>(small_lm());
    auto b = build_model<float>(small_lm());
    CHECK(backbone_digest(a) == backbone_digest(b));

    ModelConfig bad = small_lm();
    bad.hidden = 65;
    bad.heads = 4;
    CHECK_THROWS_AS(build_model<float>(bad), ConfigError);
}

TEST_CASE("forward_lm: output shape and id validation") {
    auto p = build_model<float>(small_lm());
    Rng rng(3);
    auto toks = random_tokens(rng, 2, 8, p.cfg.vocab_size);
    auto logits = forward_lm(p, toks);
    CHECK(logits.shape() == Shape{2, 8, p.cfg.vocab_size});

    IntTensor bad({1, 2}, {0, p.cfg.vocab_size});
    CHECK_THROWS_AS(forward_lm(p, bad), DataError);
}

TEST_CASE("forward_lm: causal mask means past logits ignore future tokens") {
    auto p = build_model<float>(small_lm());
    Rng rng(4);
    const i64 t = 8;
    auto toks = random_tokens(rng, 1, t, p.cfg.vocab_size);
    auto base = forward_lm(p, toks);

    const i64 pert = 5;
    IntTensor mod = toks;
    mod.data[pert] = (mod.data[pert] + 1) % p.cfg.vocab_size;
    auto out = forward_lm(p, mod);
    for (i64 pos = 0; pos < pert; ++pos)
        for (i64 vcb = 0; vcb < p.cfg.vocab_size; ++vcb)
            CHECK(base.data()[pos * p.cfg.vocab_size + vcb] ==
                  out.data()[pos * p.cfg.vocab_size + vcb]);
    // and the perturbed position itself must change
    bool changed = false;
    for (i64 vcb = 0; vcb < p.cfg.vocab_size; ++vcb)
        changed |= base.data()[pert * p.cfg.vocab_size + vcb] !=
                   out.data()[pert * p.cfg.vocab_size + vcb];
    CHECK(changed);
}

TEST_CASE("forward_lm: untrained loss on random tokens is close to ln V") {
    auto p = build_model<float>(small_lm());
    Rng rng(6);
    auto toks = random_tokens(rng, 4, 10, p.cfg.vocab_size);
    auto targets = random_tokens(rng, 4, 10, p.cfg.vocab_size);
    auto loss = cross_entropy(forward_lm(p, toks), targets);
    const double lnv = std::log(double(p.cfg.vocab_size));
    CHECK(std::abs(double(loss.item()) - lnv) / lnv < 0.05);
}

TEST_CASE("forward_encoder: shape, patch validation, content-free input") {
    ModelConfig c;
    c.mode = ModelMode::encoder;
    c.layers = 2;
    c.hidden = 16;
    c.heads = 4;
    c.mlp_hidden = 32;
    c.image_grid = 3;
    c.patch_dim = 6;
    c.seed = 9;
    auto p = build_model<float>(c);
    Rng rng(8);
    auto patches = Tensor<float>::randn({2, 9, 6}, rng, 1.0f);
    auto emb = forward_encoder(p, patches);
    CHECK(emb.shape() == Shape{2, 9, 16});

    CHECK_THROWS_AS(forward_encoder(p, Tensor<float>::zeros({2, 8, 6})), DataError);

    // zero image: embeddings are a function of position only
    auto zero = Tensor<float>::zeros({2, 9, 6});
    auto ze = forward_encoder(p, zero);
    for (i64 t = 0; t < 9; ++t)
        for (i64 dd = 0; dd < 16; ++dd)
            CHECK(ze.data()[t * 16 + dd] == ze.data()[(9 + t) * 16 + dd]);
    bool differs = false;
    for (i64 dd = 0; dd < 16; ++dd) differs |= ze.data()[dd] != ze.data()[16 + dd];
    CHECK(differs);
}

TEST_CASE("forward_encoder: permuting patches and positions permutes outputs") {
    ModelConfig c;
    c.mode = ModelMode::encoder;
    c.layers = 2;
    c.hidden = 16;
    c.heads = 2;
    c.mlp_hidden = 32;
    c.image_grid = 3;
    c.patch_dim = 6;
    c.seed = 11;
    auto p = build_model<float>(c);
    Rng rng(12);
    const i64 t = 9, pd = 6, d = 16;
    auto patches = Tensor<float>::randn({1, t, pd}, rng, 1.0f);
    auto base = forward_encoder(p, patches);

    std::vector<i64> perm(t);
    std::iota(perm.begin(), perm.end(), 0);
    for (i64 i = t - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(i + 1)]);

    auto permuted = Tensor<float>::zeros({1, t, pd});
    auto p2 = p;
    p2.pos_embed = p.pos_embed.clone();
    for (i64 i = 0; i < t; ++i) {
        for (i64 j = 0; j < pd; ++j)
            permuted.data()[i * pd + j] = patches.data()[perm[i] * pd + j];
        for (i64 j = 0; j < d; ++j)
            p2.pos_embed.data()[i * d + j] = p.pos_embed.data()[perm[i] * d + j];
    }
    auto out = forward_encoder(p2, permuted);
    for (i64 i = 0; i < t; ++i)
        for (i64 j = 0; j < d; ++j)
            CHECK(out.data()[i * d + j] ==
                  doctest::Approx(base.data()[perm[i] * d + j]).epsilon(1e-4));
}

TEST_CASE("attach_lora: no-op at init, exact parameter accounting, gradient flow") {
    auto base = build_model<float>(small_lm());
    base.freeze();
    Rng rng(14);
    auto toks = random_tokens(rng, 1, 6, base.cfg.vocab_size);
    auto ref = forward_lm(base, toks);

    auto with = attach_lora(base, {"q_proj", "v_proj"}, 1, 2.0);
    auto out = forward_lm(with, toks);
    for (i64 i = 0; i < ref.numel(); ++i) CHECK(ref.data()[i] == out.data()[i]);

    // rank-1 on q and v: 2 tensors of D each, per target, per layer
    const i64 added = count_params(with) - count_params(base);
    CHECK(added == 2 * base.cfg.hidden * base.cfg.layers * 2);
    CHECK(count_params(with, /*trainable_only=*/true) == added);

    CHECK_THROWS_AS(attach_lora(base, {"k_proj"}, 1, 2.0), ConfigError);

    // gradient reaches adapters, not the frozen projections. At init B is
    // zero, so only B receives gradient; once B moves, A does too.
    {
        Tape<float> tape;
        with.for_each_lora_tensor([&](const std::string&, Tensor<float>& t) { tape.watch(t); });
        auto loss = mean_all(forward_lm(with, toks));
        tape.backward(loss);
        bool b_grad = false;
        with.for_each_lora_tensor([&](const std::string& name, Tensor<float>& t) {
            if (name.ends_with(".b"))
                for (float g : t.grad()) b_grad |= g != 0.0f;
        });
        CHECK(b_grad);
        CHECK_FALSE(with.blocks[0].attn.wq.has_grad());
    }
    {
        Rng nudge(99);
        with.for_each_lora_tensor([&](const std::string& name, Tensor<float>& t) {
            if (name.ends_with(".b"))
                for (float& v : t.data()) v = float(nudge.normal()) * 0.05f;
        });
        Tape<float> tape;
        with.for_each_lora_tensor([&](const std::string&, Tensor<float>& t) { tape.watch(t); });
        auto loss = mean_all(forward_lm(with, toks));
        tape.backward(loss);
        bool a_grad = false;
        with.for_each_lora_tensor([&](const std::string& name, Tensor<float>& t) {
            if (name.ends_with(".a"))
                for (float g : t.grad()) a_grad |= g != 0.0f;
        });
        CHECK(a_grad);
        CHECK_FALSE(with.blocks[0].attn.wv.has_grad());
        with.for_each_lora_tensor([&](const std::string& name, Tensor<float>& t) {
            if (name.ends_with(".b"))
                for (float& v : t.data()) v = 0.0f;
        });
    }

    // zeroing B restores the base outputs bit-exactly
    for (auto& bl : with.lora) {
        for (float& v : bl.q->b.data()) v = 1.0f;
        for (float& v : bl.v->b.data()) v = 1.0f;
    }
    auto moved = forward_lm(with, toks);
    bool differs = false;
    for (i64 i = 0; i < ref.numel(); ++i) differs |= moved.data()[i] != ref.data()[i];
    CHECK(differs);
    for (auto& bl : with.lora) {
        for (float& v : bl.q->b.data()) v = 0.0f;
        for (float& v : bl.v->b.data()) v = 0.0f;
    }
    auto restored = forward_lm(with, toks);
    for (i64 i = 0; i < ref.numel(); ++i) CHECK(restored.data()[i] == ref.data()[i]);
}

TEST_CASE("frozen digest is unchanged by forward and backward passes") {
    auto p = build_model<float>(small_lm());
    p.freeze();
    const std::string before = backbone_digest(p);
    Rng rng(21);
    auto toks = random_tokens(rng, 2, 6, p.cfg.vocab_size);

    auto em = [&] {
        ElasticConfig cfg;
        cfg.input_mlp = InputRouteSpec{0.5, WeightMode::sigmoid, 0.5};
        return make_elastic(p, cfg, 3);
    }();
    Tape<float> tape;
    em.for_each_trainable([&](const std::string&, Tensor<float>& t) { tape.watch(t); });
    ForwardArtifacts<float> art;
    ForwardOptions<float> opt;
    opt.elastic = &em;
    opt.artifacts = &art;
    auto loss = mean_all(forward_lm(em.params, toks, opt));
    tape.backward(loss);
    CHECK(backbone_digest(p) == before);
}
