#include <doctest.h>

#include <cmath>

#include "elt/distill.hpp"
#include "elt/gradcheck.hpp"

using namespace elt;

namespace {

using TensorD = Tensor<double>;

DistillConfig fwd_cfg(double temp = 1.0) {
    DistillConfig c;
    c.direction = KlDirection::forward;
    c.temperature = temp;
    return c;
}

// independent plain-loop KL oracle over full distributions
double kl_oracle(std::span<const double> s_logits, std::span<const double> t_logits,
                 double temp, bool forward) {
    const std::size_t n = s_logits.size();
    auto softmax_of = [&](std::span<const double> l) {
        std::vector<double> p(n);
        double mx = -1e300;
        for (double v : l) mx = std::max(mx, v / temp);
        double z = 0;
        for (std::size_t i = 0; i < n; ++i) z += std::exp(l[i] / temp - mx);
        for (std::size_t i = 0; i < n; ++i) p[i] = std::exp(l[i] / temp - mx) / z;
        return p;
    };
    auto ps = softmax_of(s_logits), pt = softmax_of(t_logits);
    double kl = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double a = forward ? ps[i] : pt[i];
        const double b = forward ? pt[i] : ps[i];
        const double other = forward ? ps[i] : pt[i];
        (void)other;
        kl += a * (std::log(forward ? ps[i] : pt[i]) - std::log(forward ? pt[i] : ps[i]));
    }
    return kl;
}

}  // namespace

TEST_CASE("kl_loss: zero at identity, temperature softening, nonnegativity") {
    Rng rng(1);
    auto t = TensorD::randn({2, 3, 8}, rng, 2.0);
    auto s = t.clone();
    CHECK(kl_loss(s, t, fwd_cfg()).item() == 0.0);

    auto s2 = TensorD::from_data({1, 1, 2}, {1, 0});
    auto t2 = TensorD::from_data({1, 1, 2}, {0, 1});
    CHECK(kl_loss(s2, t2, fwd_cfg(100.0)).item() < kl_loss(s2, t2, fwd_cfg(1.0)).item());

    for (int trial = 0; trial < 1000; ++trial) {
        auto a = TensorD::randn({1, 1, 6}, rng, 3.0);
        auto b = TensorD::randn({1, 1, 6}, rng, 3.0);
        CHECK(kl_loss(a, b, fwd_cfg()).item() >= 0.0);
    }

    DistillConfig bad = fwd_cfg(0.0);
    CHECK_THROWS_AS(kl_loss(s2, t2, bad), ConfigError);
}

TEST_CASE("kl_loss agrees with the plain-loop oracle in both directions") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        auto s = TensorD::randn({1, 1, 7}, rng, 2.0);
        auto t = TensorD::randn({1, 1, 7}, rng, 2.0);
        const double temp = 0.5 + 2.0 * rng.uniform();
        DistillConfig cf = fwd_cfg(temp);
        CHECK(kl_loss(s, t, cf).item() ==
              doctest::Approx(kl_oracle(s.data(), t.data(), temp, true)).epsilon(1e-10));
        cf.direction = KlDirection::reverse;
        CHECK(kl_loss(s, t, cf).item() ==
              doctest::Approx(kl_oracle(s.data(), t.data(), temp, false)).epsilon(1e-10));
    }
}

TEST_CASE("topk_kl_loss: identity, K=V-1 reduction, residual-bucket hand case") {
    // teacher probs [0.5, 0.3, 0.2], student identical -> 0
    auto logits = TensorD::from_data({1, 1, 3},
                                     {std::log(0.5), std::log(0.3), std::log(0.2)});
    CHECK(topk_kl_loss(logits, logits.clone(), 2, fwd_cfg()).item() == 0.0);

    // K = V-1 equals the full KL on a 4-token vocabulary
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        auto s = TensorD::randn({2, 2, 4}, rng, 2.0);
        auto t = TensorD::randn({2, 2, 4}, rng, 2.0);
        for (KlDirection dir : {KlDirection::forward, KlDirection::reverse}) {
            DistillConfig cf = fwd_cfg();
            cf.direction = dir;
            const double full = kl_loss(s, t, cf).item();
            const double topk = topk_kl_loss(s, t, 3, cf).item();
            CHECK(std::abs(full - topk) < 1e-6);
        }
    }

    // student mass pushed into the teacher's residual bucket: forward KL
    // approaches ln(1/residual_t) from below
    auto t3 = TensorD::from_data({1, 1, 3},
                                 {std::log(0.7), std::log(0.2), std::log(0.1)});
    auto s3 = TensorD::from_data({1, 1, 3}, {-30.0, 2.0, 2.0});
    const double bound = std::log(1.0 / 0.3);
    const double loss = topk_kl_loss(s3, t3, 1, fwd_cfg()).item();
    CHECK(loss == doctest::Approx(bound).epsilon(1e-6));
    DistillConfig rev = fwd_cfg();
    rev.direction = KlDirection::reverse;
    CHECK(topk_kl_loss(s3, t3, 1, rev).item() > bound);

    CHECK_THROWS_AS(topk_kl_loss(s3, t3, 3, fwd_cfg()), ConfigError);
    CHECK_THROWS_AS(topk_kl_loss(s3, t3, 0, fwd_cfg()), ConfigError);
}

TEST_CASE("cosine_distance_loss reference values") {
    auto a = TensorD::from_data({1, 1, 2}, {1, 2});
    CHECK(std::abs(cosine_distance_loss(a, a.clone()).item()) < 1e-7);

    auto x = TensorD::from_data({1, 1, 2}, {1, 0});
    auto y = TensorD::from_data({1, 1, 2}, {0, 1});
    CHECK(cosine_distance_loss(x, y).item() == doctest::Approx(1.0));

    auto nx = TensorD::from_data({1, 1, 2}, {-1, 0});
    CHECK(cosine_distance_loss(nx, x.clone()).item() == doctest::Approx(2.0));

    auto zero = TensorD::zeros({1, 1, 2});
    CHECK_THROWS_AS(cosine_distance_loss(zero, x), NumericError);
}

TEST_CASE("load_balance_loss: uniform value, collapse, Chebyshev lower bound") {
    const i64 m = 4, k = 2;
    auto p_uniform = TensorD::full({m}, 0.25);
    std::vector<double> f_uniform(m, double(k) / double(m));
    CHECK(std::abs(load_balance_loss<double>(f_uniform, p_uniform, m, k).item() -
                   double(k) / double(m)) <= 1e-9);

    auto p_collapse = TensorD::from_data({m}, {1, 0, 0, 0});
    std::vector<double> f_collapse = {1, 0, 0, 0};
    CHECK(load_balance_loss<double>(f_collapse, p_collapse, m, 1).item() ==
          doctest::Approx(1.0));

    // top-k selection makes f co-monotone with P, so sum f*P >= k/M
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        auto logits = TensorD::randn({m}, rng, 1.5);
        auto probs = softmax(logits);
        std::vector<double> weights(probs.data().begin(), probs.data().end());
        auto sel = topk_indices<double>(weights, k);
        std::vector<double> f(m, 0.0);
        for (i64 i : sel) f[i] = 1.0;  // single-token batch
        const double loss = load_balance_loss<double>(f, probs, m, k).item();
        CHECK(loss >= double(k) / double(m) - 1e-12);
    }
}

TEST_CASE("topk_bce_loss saturation and maximal uncertainty") {
    auto targets = TensorD::from_data({4}, {1, 0, 1, 0});
    auto good = TensorD::from_data({4}, {10, -10, 10, -10});
    CHECK(topk_bce_loss(good, targets).item() < 1e-4);

    auto zeros = TensorD::zeros({4});
    CHECK(topk_bce_loss(zeros, targets).item() == doctest::Approx(std::log(2.0)));
}

TEST_CASE("total_objective: weight collapse, zero fixed point, encoder scope") {
    Rng rng(6);
    auto t = TensorD::randn({1, 2, 5}, rng, 1.0);
    DistillConfig cfg = fwd_cfg();
    cfg.lambda_load = 0.0;
    cfg.lambda_topk = 0.0;
    auto distill = kl_loss(t.clone(), t, cfg);
    auto lt = TensorD::scalar(0.7);
    auto bt = TensorD::scalar(0.3);
    auto total = total_objective(distill, {lt}, {bt}, cfg, ModelMode::causal_lm);
    CHECK(total.item() == distill.item());

    cfg.lambda_load = 1.0;
    cfg.lambda_topk = 1.0;
    auto zl = TensorD::scalar(0.0);
    auto total0 = total_objective(kl_loss(t.clone(), t, cfg), {zl}, {zl.clone()}, cfg,
                                  ModelMode::causal_lm);
    CHECK(total0.item() == 0.0);

    CHECK_THROWS_AS(
        total_objective(distill, {}, {bt}, cfg, ModelMode::encoder), ConfigError);
}

TEST_CASE("every loss matches finite differences on the student path") {
    Rng rng(7);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng r(seed * 31 + 5);
        auto teacher = TensorD::randn({1, 2, 6}, r, 1.5);
        auto student = TensorD::randn({1, 2, 6}, r, 1.5);

        for (KlDirection dir : {KlDirection::forward, KlDirection::reverse}) {
            DistillConfig cfg = fwd_cfg(0.8 + r.uniform());
            cfg.direction = dir;
            {
                auto fd = finite_diff_grad(
                    [&](TensorD&) { return kl_loss(student, teacher, cfg).item(); }, student,
                    1e-6);
                Tape<double> tape;
                tape.watch(student);
                tape.backward(kl_loss(student, teacher, cfg));
                CHECK(max_rel_err<double>(student.grad(), fd.data()) < 1e-4);
                student.zero_grad();
            }
            {
                auto fd = finite_diff_grad(
                    [&](TensorD&) { return topk_kl_loss(student, teacher, 3, cfg).item(); },
                    student, 1e-6);
                Tape<double> tape;
                tape.watch(student);
                tape.backward(topk_kl_loss(student, teacher, 3, cfg));
                CHECK(max_rel_err<double>(student.grad(), fd.data()) < 1e-4);
                student.zero_grad();
            }
        }

        {
            auto emb_s = TensorD::randn({1, 3, 5}, r, 1.0);
            auto emb_t = TensorD::randn({1, 3, 5}, r, 1.0);
            auto fd = finite_diff_grad(
                [&](TensorD&) { return cosine_distance_loss(emb_s, emb_t).item(); }, emb_s,
                1e-6);
            Tape<double> tape;
            tape.watch(emb_s);
            tape.backward(cosine_distance_loss(emb_s, emb_t));
            CHECK(max_rel_err<double>(emb_s.grad(), fd.data()) < 1e-4);
        }
        {
            // load-balance gradient through the differentiable P path
            auto router_logits = TensorD::randn({4}, r, 1.0);
            std::vector<double> f = {0.5, 0.25, 0.25, 0.0};
            auto fd = finite_diff_grad(
                [&](TensorD&) {
                    return load_balance_loss<double>(f, softmax(router_logits), 4, 1).item();
                },
                router_logits, 1e-6);
            Tape<double> tape;
            tape.watch(router_logits);
            tape.backward(load_balance_loss<double>(f, softmax(router_logits), 4, 1));
            CHECK(max_rel_err<double>(router_logits.grad(), fd.data()) < 1e-4);
        }
    }
}

TEST_CASE("teacher path receives zero gradient from every loss") {
    Rng rng(8);
    auto teacher = TensorD::randn({1, 2, 5}, rng, 1.0);
    auto student = TensorD::randn({1, 2, 5}, rng, 1.0);
    Tape<double> tape;
    tape.watch(student);
    tape.watch(teacher);
    auto loss = add(add(kl_loss(student, teacher, fwd_cfg()),
                        topk_kl_loss(student, teacher, 2, fwd_cfg())),
                    cosine_distance_loss(student, teacher));
    tape.backward(loss);
    bool teacher_touched = false;
    if (teacher.has_grad())
        for (double g : teacher.grad()) teacher_touched |= g != 0.0;
    CHECK_FALSE(teacher_touched);
    bool student_touched = false;
    for (double g : student.grad()) student_touched |= g != 0.0;
    CHECK(student_touched);
}
