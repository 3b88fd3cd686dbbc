#pragma once

#include "elt/data.hpp"
#include "elt/distill.hpp"
#include "elt/forward.hpp"

namespace elt {

// Linear 0 -> peak ramp over the warmup steps, cosine decay peak -> 0 after.
inline double cosine_warmup_lr(i64 step, i64 total_steps, const TrainConfig& cfg) {
    if (step < 0 || step > total_steps) throw UsageError("lr schedule step out of range");
    if (total_steps <= 0) return cfg.lr;
    const i64 warmup = static_cast<i64>(cfg.warmup_frac * double(total_steps));
    if (warmup > 0 && step < warmup) return cfg.lr * double(step) / double(warmup);
    if (total_steps == warmup) return cfg.lr;
    const double progress = double(step - warmup) / double(total_steps - warmup);
    return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// Decoupled-weight-decay Adam over an explicit trainable set.
template <class T>
class AdamW {
public:
    explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}

    void add(std::string name, Tensor<T> param) {
        Slot s;
        s.name = std::move(name);
        s.param = std::move(param);
        s.m.assign(s.param.numel(), T(0));
        s.v.assign(s.param.numel(), T(0));
        slots_.push_back(std::move(s));
    }

    std::size_t size() const { return slots_.size(); }

    void zero_grad() {
        for (auto& s : slots_) s.param.zero_grad();
    }

    double grad_norm() const {
        double sq = 0;
        for (const auto& s : slots_) {
            if (!s.param.has_grad()) continue;
            for (T g : s.param.grad()) sq += double(g) * double(g);
        }
        return std::sqrt(sq);
    }

    // Scales gradients so the global norm is at most max_norm; returns the
    // pre-clip norm.
    double clip(double max_norm) {
        const double norm = grad_norm();
        if (max_norm > 0 && norm > max_norm) {
            const T s = T(max_norm / norm);
            for (auto& slot : slots_) {
                if (!slot.param.has_grad()) continue;
                for (T& g : slot.param.grad()) g *= s;
            }
        }
        return norm;
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (auto& s : slots_) {
            auto p = s.param.data();
            auto g = s.param.grad();  // zero-filled if backward never reached it
            for (i64 i = 0; i < s.param.numel(); ++i) {
                const double gi = double(g[i]);
                s.m[i] = T(cfg_.beta1 * double(s.m[i]) + (1.0 - cfg_.beta1) * gi);
                s.v[i] = T(cfg_.beta2 * double(s.v[i]) + (1.0 - cfg_.beta2) * gi * gi);
                const double mhat = double(s.m[i]) / bc1;
                const double vhat = double(s.v[i]) / bc2;
                double upd = lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
                upd += lr * cfg_.weight_decay * double(p[i]);
                p[i] = T(double(p[i]) - upd);
            }
        }
    }

private:
    struct Slot {
        std::string name;
        Tensor<T> param;
        std::vector<T> m, v;
    };
    TrainConfig cfg_;
    std::vector<Slot> slots_;
    i64 t_ = 0;
};

struct StepRecord {
    i64 step = 0;
    double lr = 0;
    double total = 0;
    double distill = 0;
    double load = 0;
    double bce = 0;
    // per routing kind: mean predicted selection rate (input kinds: fraction
    // of router logits above the 0.5-threshold; param kinds: normalized
    // selection entropy over experts)
    std::vector<std::pair<std::string, double>> rates;
};

struct TrainLog {
    std::vector<StepRecord> steps;
};

void write_train_log_jsonl(const std::string& path, const TrainLog& log);

namespace detail {

// epoch-wise shuffled deck of sample ids, deterministic in (seed, epoch)
inline std::vector<i64> shuffled_ids(i64 n, std::uint64_t seed, i64 epoch) {
    std::vector<i64> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(splitmix64(seed + 0x5eed) ^ splitmix64(std::uint64_t(epoch) * 0x9e37));
    for (i64 i = n - 1; i > 0; --i) std::swap(ids[i], ids[rng.uniform_int(i + 1)]);
    return ids;
}

template <class T>
std::vector<std::pair<std::string, double>> selection_rates(const ForwardArtifacts<T>& art) {
    double input_above = 0;
    i64 input_n = 0;
    double entropy = 0;
    i64 param_n = 0;
    for (const auto& b : art.bce_terms) {
        for (T l : b.logits.data()) input_above += l > T(0) ? 1.0 : 0.0;
        input_n += b.logits.numel();
    }
    for (const auto& lt : art.load_terms) {
        double h = 0;
        for (T f : lt.freq) {
            const double p = double(f) / double(lt.k);  // selection-slot distribution
            if (p > 0) h -= p * std::log(p);
        }
        entropy += h / std::log(double(lt.options));
        param_n += 1;
    }
    std::vector<std::pair<std::string, double>> out;
    if (input_n > 0) out.emplace_back("input_above_threshold", input_above / double(input_n));
    if (param_n > 0) out.emplace_back("param_selection_entropy", entropy / double(param_n));
    return out;
}

}  // namespace detail

// Next-token cross-entropy teacher pretraining on a byte corpus. The
// returned model is frozen.
template <class T>
TransformerParams<T> pretrain_teacher(const ModelConfig& cfg, const Corpus& corpus,
                                      const TrainConfig& tcfg, TrainLog* log = nullptr) {
    cfg.validate();
    tcfg.validate();
    if (cfg.mode != ModelMode::causal_lm)
        throw UsageError("corpus pretraining requires causal_lm mode");
    if (corpus.tokens.empty()) throw DataError("corpus is empty");

    TransformerParams<T> model = build_model<T>(cfg);
    model.set_backbone_trainable(true);
    AdamW<T> opt(tcfg);
    model.for_each_tensor([&](const std::string& n, Tensor<T>& t) { opt.add(n, t); });

    const LmWindows win = make_windows(corpus.train(), cfg.max_seq);
    const i64 nwin = i64(win.starts.size());
    const i64 per_epoch = std::max<i64>(1, nwin / tcfg.batch);
    i64 total = per_epoch * tcfg.epochs;
    if (tcfg.max_steps > 0) total = std::min(total, tcfg.max_steps);

    i64 step = 0;
    for (i64 epoch = 0; epoch < tcfg.epochs && step < total; ++epoch) {
        auto deck = detail::shuffled_ids(nwin, tcfg.seed, epoch);
        for (i64 b = 0; b + tcfg.batch <= nwin && step < total; b += tcfg.batch) {
            LmBatch batch = gather_batch(corpus.train(), win,
                                         std::span<const i64>(deck).subspan(b, tcfg.batch));
            const double lr = cosine_warmup_lr(step, total, tcfg);
            Tape<T> tape;
            model.for_each_tensor([&](const std::string&, Tensor<T>& t) { tape.watch(t); });
            opt.zero_grad();
            Tensor<T> loss = cross_entropy(forward_lm(model, batch.inputs), batch.targets);
            if (!std::isfinite(double(loss.item())))
                throw NumericError("pretraining loss is not finite at step " +
                                   std::to_string(step));
            tape.backward(loss);
            opt.clip(tcfg.grad_clip);
            opt.step(lr);
            if (log) log->steps.push_back({step, lr, double(loss.item()),
                                           double(loss.item()), 0.0, 0.0, {}});
            ++step;
        }
    }
    model.freeze();
    return model;
}

// Patch-regression teacher pretraining for the encoder mode.
template <class T>
TransformerParams<T> pretrain_teacher(const ModelConfig& cfg, const ImageSet& images,
                                      const TrainConfig& tcfg, TrainLog* log = nullptr) {
    cfg.validate();
    tcfg.validate();
    if (cfg.mode != ModelMode::encoder)
        throw UsageError("image pretraining requires encoder mode");
    if (images.count == 0) throw DataError("image set is empty");

    TransformerParams<T> model = build_model<T>(cfg);
    model.set_backbone_trainable(true);
    AdamW<T> opt(tcfg);
    model.for_each_tensor([&](const std::string& n, Tensor<T>& t) { opt.add(n, t); });

    const i64 n = images.count;
    const i64 batch_size = std::min(tcfg.batch, n);
    const i64 per_epoch = std::max<i64>(1, n / batch_size);
    i64 total = per_epoch * tcfg.epochs;
    if (tcfg.max_steps > 0) total = std::min(total, tcfg.max_steps);

    i64 step = 0;
    for (i64 epoch = 0; epoch < tcfg.epochs && step < total; ++epoch) {
        auto deck = detail::shuffled_ids(n, tcfg.seed, epoch);
        for (i64 b = 0; b + batch_size <= n && step < total; b += batch_size) {
            Tensor<T> patches =
                images.batch<T>(std::span<const i64>(deck).subspan(b, batch_size));
            const double lr = cosine_warmup_lr(step, total, tcfg);
            Tape<T> tape;
            model.for_each_tensor([&](const std::string&, Tensor<T>& t) { tape.watch(t); });
            opt.zero_grad();
            Tensor<T> pred = encoder_reconstruct(model, forward_encoder(model, patches));
            Tensor<T> diff = sub(pred, patches);
            Tensor<T> loss = mean_all(mul(diff, diff));
            if (!std::isfinite(double(loss.item())))
                throw NumericError("pretraining loss is not finite at step " +
                                   std::to_string(step));
            tape.backward(loss);
            opt.clip(tcfg.grad_clip);
            opt.step(lr);
            if (log) log->steps.push_back({step, lr, double(loss.item()),
                                           double(loss.item()), 0.0, 0.0, {}});
            ++step;
        }
    }
    model.freeze();
    return model;
}

template <class T>
struct DistillResult {
    ElasticModel<T> model;
    TrainLog log;
};

namespace detail {

// One optimizer step of the self-distillation objective. The teacher pass
// runs tape-free; only router/adapter tensors are watched.
template <class T, class StudentForward, class DistillLoss>
StepRecord distill_step(ElasticModel<T>& em, AdamW<T>& opt, const DistillConfig& dcfg,
                        const TrainConfig& tcfg, i64 step, i64 total,
                        StudentForward&& student_forward, DistillLoss&& distill_loss) {
    const double lr = cosine_warmup_lr(step, total, tcfg);
    Tape<T> tape;
    em.for_each_trainable([&](const std::string&, Tensor<T>& t) { tape.watch(t); });
    opt.zero_grad();

    ForwardArtifacts<T> art;
    Tensor<T> student_out = student_forward(art);
    Tensor<T> distill = distill_loss(student_out);

    std::vector<Tensor<T>> load_losses;
    for (auto& lt : art.load_terms)
        load_losses.push_back(load_balance_loss<T>(lt.freq, lt.mean_prob, lt.options, lt.k));
    std::vector<Tensor<T>> bce_losses;
    for (auto& bt : art.bce_terms) bce_losses.push_back(topk_bce_loss(bt.logits, bt.targets));

    const ModelMode mode = em.params.cfg.mode;
    Tensor<T> total_loss = total_objective(distill, load_losses, bce_losses, dcfg, mode);

    StepRecord rec;
    rec.step = step;
    rec.lr = lr;
    rec.total = double(total_loss.item());
    rec.distill = double(distill.item());
    for (auto& l : load_losses) rec.load += double(l.item()) / double(load_losses.size());
    for (auto& l : bce_losses) rec.bce += double(l.item()) / double(bce_losses.size());
    rec.rates = selection_rates(art);
    if (!std::isfinite(rec.total)) return rec;  // caller aborts with diagnostics

    tape.backward(total_loss);
    opt.clip(tcfg.grad_clip);
    opt.step(lr);
    return rec;
}

}  // namespace detail

// Causal-LM self-distillation: trains routers (and adapters) against the
// frozen teacher on the corpus train split.
template <class T>
DistillResult<T> train_distill(const TransformerParams<T>& teacher, const ElasticConfig& ecfg,
                               const DistillConfig& dcfg, const TrainConfig& tcfg,
                               const Corpus& corpus) {
    if (!teacher.frozen) throw UsageError("train_distill requires a frozen teacher");
    dcfg.validate(teacher.cfg);
    tcfg.validate();
    DistillResult<T> out{make_elastic(teacher, ecfg, tcfg.seed), {}};
    ElasticModel<T>& em = out.model;
    AdamW<T> opt(tcfg);
    em.for_each_trainable([&](const std::string& n, Tensor<T>& t) { opt.add(n, t); });
    if (opt.size() == 0) throw ConfigError("elastic config yields no trainable parameters");

    const LmWindows win = make_windows(corpus.train(), teacher.cfg.max_seq);
    const i64 nwin = i64(win.starts.size());
    const i64 batch_size = std::min<i64>(tcfg.batch, nwin);
    const i64 per_epoch = std::max<i64>(1, nwin / batch_size);
    i64 total = per_epoch * tcfg.epochs;
    if (tcfg.max_steps > 0) total = std::min(total, tcfg.max_steps);

    i64 step = 0;
    for (i64 epoch = 0; epoch < tcfg.epochs && step < total; ++epoch) {
        auto deck = detail::shuffled_ids(nwin, tcfg.seed, epoch);
        for (i64 b = 0; b + batch_size <= nwin && step < total; b += batch_size) {
            LmBatch batch = gather_batch(corpus.train(), win,
                                         std::span<const i64>(deck).subspan(b, batch_size));
            Tensor<T> teacher_logits = forward_lm(teacher, batch.inputs);
            StepRecord rec = detail::distill_step(
                em, opt, dcfg, tcfg, step, total,
                [&](ForwardArtifacts<T>& art) {
                    ForwardOptions<T> fo;
                    fo.elastic = &em;
                    fo.phase = RoutingPhase::train;
                    fo.artifacts = &art;
                    return forward_lm(em.params, batch.inputs, fo);
                },
                [&](const Tensor<T>& student_logits) {
                    return dcfg.top_k_vocab > 0
                               ? topk_kl_loss(student_logits, teacher_logits,
                                              dcfg.top_k_vocab, dcfg)
                               : kl_loss(student_logits, teacher_logits, dcfg);
                });
            out.log.steps.push_back(rec);
            if (!std::isfinite(rec.total))
                throw NumericError("distillation loss is not finite at step " +
                                   std::to_string(step));
            ++step;
        }
    }
    return out;
}

// Encoder self-distillation: cosine distance between student and teacher
// token embeddings on synthetic images.
template <class T>
DistillResult<T> train_distill(const TransformerParams<T>& teacher, const ElasticConfig& ecfg,
                               const DistillConfig& dcfg, const TrainConfig& tcfg,
                               const ImageSet& images, std::span<const i64> train_ids) {
    if (!teacher.frozen) throw UsageError("train_distill requires a frozen teacher");
    dcfg.validate(teacher.cfg);
    tcfg.validate();
    if (train_ids.empty()) throw DataError("no training images");
    DistillResult<T> out{make_elastic(teacher, ecfg, tcfg.seed), {}};
    ElasticModel<T>& em = out.model;
    AdamW<T> opt(tcfg);
    em.for_each_trainable([&](const std::string& n, Tensor<T>& t) { opt.add(n, t); });
    if (opt.size() == 0) throw ConfigError("elastic config yields no trainable parameters");

    const i64 n = i64(train_ids.size());
    const i64 batch_size = std::min(tcfg.batch, n);
    const i64 per_epoch = std::max<i64>(1, n / batch_size);
    i64 total = per_epoch * tcfg.epochs;
    if (tcfg.max_steps > 0) total = std::min(total, tcfg.max_steps);

    i64 step = 0;
    for (i64 epoch = 0; epoch < tcfg.epochs && step < total; ++epoch) {
        auto deck = detail::shuffled_ids(n, tcfg.seed, epoch);
        for (i64 b = 0; b + batch_size <= n && step < total; b += batch_size) {
            std::vector<i64> ids;
            for (i64 i = 0; i < batch_size; ++i) ids.push_back(train_ids[deck[b + i]]);
            Tensor<T> patches = images.batch<T>(ids);
            Tensor<T> teacher_emb = forward_encoder(teacher, patches);
            StepRecord rec = detail::distill_step(
                em, opt, dcfg, tcfg, step, total,
                [&](ForwardArtifacts<T>& art) {
                    ForwardOptions<T> fo;
                    fo.elastic = &em;
                    fo.phase = RoutingPhase::train;
                    fo.artifacts = &art;
                    return forward_encoder(em.params, patches, fo);
                },
                [&](const Tensor<T>& student_emb) {
                    return cosine_distance_loss(student_emb, teacher_emb);
                });
            out.log.steps.push_back(rec);
            if (!std::isfinite(rec.total))
                throw NumericError("distillation loss is not finite at step " +
                                   std::to_string(step));
            ++step;
        }
    }
    return out;
}

}  // namespace elt
