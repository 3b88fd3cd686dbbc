#include "elt/run.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "elt/checkpoint.hpp"
#include "elt/report.hpp"

namespace elt {

using nlohmann::json;
namespace fs = std::filesystem;

int log_level() {
    static const int level = [] {
        const char* env = std::getenv("ELASTI_LOG");
        if (!env) return 1;
        const std::string v(env);
        if (v == "quiet" || v == "0") return 0;
        if (v == "debug" || v == "2") return 2;
        return 1;
    }();
    return level;
}

void log_info(const std::string& msg) {
    if (log_level() >= 1) std::cerr << "[elt] " << msg << "\n";
}

void log_debug(const std::string& msg) {
    if (log_level() >= 2) std::cerr << "[elt:debug] " << msg << "\n";
}

namespace {

using ModelF = TransformerParams<float>;

// With a nonzero master seed, derive every per-section seed from it so one
// flag pins the whole run.
RunConfig effective_config(RunConfig cfg) {
    if (cfg.seed != 0) {
        cfg.model.seed = splitmix64(cfg.seed ^ 0x11);
        cfg.train.seed = splitmix64(cfg.seed ^ 0x22);
        if (cfg.prune) cfg.prune->seed = splitmix64(cfg.seed ^ 0x33);
        if (cfg.data.synthetic) cfg.data.synthetic->seed = splitmix64(cfg.seed ^ 0x44);
    }
    return cfg;
}

void require_out(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("this command requires an output directory");
    fs::create_directories(cfg.out_dir);
}

void echo_config(const RunConfig& cfg) {
    write_text_file((fs::path(cfg.out_dir) / "config.json").string(),
                    run_config_to_json(cfg) + "\n");
}

Corpus load_cfg_corpus(const RunConfig& cfg) {
    if (cfg.data.corpus_path.empty()) throw ConfigError("data.corpus is required in causal mode");
    return load_corpus(cfg.data.corpus_path, cfg.data.eval_fraction);
}

ImageSet load_cfg_images(const RunConfig& cfg) {
    if (!cfg.data.synthetic) throw ConfigError("data.synthetic is required in encoder mode");
    return make_synthetic_images(*cfg.data.synthetic);
}

ModelF load_teacher(const RunConfig& cfg) {
    if (cfg.teacher_dir.empty()) throw ConfigError("this command requires a teacher checkpoint");
    auto ck = load_checkpoint<float>(cfg.teacher_dir);
    if (!ck.params.frozen) ck.params.freeze();
    return std::move(ck.params);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const std::size_t comma = s.find(',', pos);
        const std::string part = s.substr(pos, comma == std::string::npos ? comma : comma - pos);
        if (!part.empty()) out.push_back(part);
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

void cmd_pretrain_teacher(const RunConfig& cfg) {
    require_out(cfg);
    echo_config(cfg);
    TrainLog log;
    ModelF teacher;
    if (cfg.model.mode == ModelMode::causal_lm) {
        Corpus corpus = load_cfg_corpus(cfg);
        log_info("pretraining teacher on corpus '" + corpus.name + "'");
        teacher = pretrain_teacher<float>(cfg.model, corpus, cfg.train, &log);
    } else {
        ImageSet images = load_cfg_images(cfg);
        log_info("pretraining encoder teacher on " + std::to_string(images.count) + " images");
        teacher = pretrain_teacher<float>(cfg.model, images, cfg.train, &log);
    }
    const fs::path out(cfg.out_dir);
    save_checkpoint((out / "teacher").string(), teacher);
    write_train_log_jsonl((out / "train_log.jsonl").string(), log);
    json summary;
    summary["steps"] = log.steps.size();
    summary["final_loss"] = log.steps.empty() ? 0.0 : log.steps.back().total;
    summary["backbone_digest"] = backbone_digest(teacher);
    summary["params"] = count_params(teacher);
    write_text_file((out / "summary.json").string(), summary.dump(2) + "\n");
}

void cmd_distill(const RunConfig& cfg) {
    require_out(cfg);
    echo_config(cfg);
    ModelF teacher = load_teacher(cfg);
    if (!cfg.elastic.any_routing())
        throw ConfigError("distill requires at least one elastic routing kind");
    const std::string digest_before = backbone_digest(teacher);
    DistillResult<float> res;
    if (teacher.cfg.mode == ModelMode::causal_lm) {
        Corpus corpus = load_cfg_corpus(cfg);
        res = train_distill(teacher, cfg.elastic, cfg.distill, cfg.train, corpus);
    } else {
        ImageSet images = load_cfg_images(cfg);
        std::vector<i64> ids(images.count);
        std::iota(ids.begin(), ids.end(), 0);
        const i64 train_n = i64(double(images.count) * (1.0 - cfg.data.eval_fraction));
        res = train_distill(teacher, cfg.elastic, cfg.distill, cfg.train, images,
                            std::span<const i64>(ids).subspan(0, train_n));
    }
    const fs::path out(cfg.out_dir);
    save_checkpoint((out / "routers").string(), res.model.params, &res.model);
    write_train_log_jsonl((out / "train_log.jsonl").string(), res.log);
    json summary;
    summary["steps"] = res.log.steps.size();
    summary["final_total_loss"] = res.log.steps.empty() ? 0.0 : res.log.steps.back().total;
    summary["final_distill_loss"] =
        res.log.steps.empty() ? 0.0 : res.log.steps.back().distill;
    summary["trainable_params"] = res.model.trainable_param_count();
    summary["router_params"] = res.model.router_param_count();
    summary["backbone_digest_before"] = digest_before;
    summary["backbone_digest_after"] = backbone_digest(teacher);
    write_text_file((out / "summary.json").string(), summary.dump(2) + "\n");
}

void cmd_eval(const RunConfig& cfg) {
    require_out(cfg);
    echo_config(cfg);
    ModelF teacher = load_teacher(cfg);
    json eval;
    if (teacher.cfg.mode == ModelMode::causal_lm) {
        Corpus corpus = load_cfg_corpus(cfg);
        eval["teacher_lm_loss"] = eval_lm_loss(teacher, corpus.eval());
        if (!cfg.routers_dir.empty()) {
            auto ck = load_checkpoint<float>(split_list(cfg.routers_dir).at(0));
            if (!ck.elastic) throw ConfigError("routers checkpoint carries no elastic config");
            ElasticModel<float>& em = *ck.elastic;
            eval["student_distill_loss"] =
                eval_distill_loss(teacher, em, corpus.eval(), cfg.distill);
            ForwardOptions<float> fo;
            fo.elastic = &em;
            eval["student_lm_loss"] = eval_lm_loss(em.params, corpus.eval(), fo);
            eval["top1_match"] = top1_agreement(teacher, em.params, corpus.eval(), fo);
            json fracs = json::object();
            for (RouteKind kind : {RouteKind::input_mha, RouteKind::input_mlp}) {
                bool present = false;
                for (const auto& lr : em.layers)
                    present |= kind == RouteKind::input_mha ? lr.input_mha.has_value()
                                                            : lr.input_mlp.has_value();
                if (present)
                    fracs[route_kind_name(kind)] =
                        inference_selection_fraction(em, corpus.eval(), kind);
            }
            eval["inference_selection_fraction"] = fracs;
        }
    } else {
        ImageSet images = load_cfg_images(cfg);
        std::vector<i64> ids(images.count);
        std::iota(ids.begin(), ids.end(), 0);
        const i64 train_n = i64(double(images.count) * (1.0 - cfg.data.eval_fraction));
        std::span<const i64> eval_ids = std::span<const i64>(ids).subspan(train_n);
        if (!cfg.routers_dir.empty()) {
            auto ck = load_checkpoint<float>(split_list(cfg.routers_dir).at(0));
            if (!ck.elastic) throw ConfigError("routers checkpoint carries no elastic config");
            eval["student_cosine_similarity"] =
                eval_cosine_similarity(teacher, *ck.elastic, images, eval_ids);
        }
        eval["eval_images"] = eval_ids.size();
    }
    write_text_file((fs::path(cfg.out_dir) / "eval.json").string(), eval.dump(2) + "\n");
}

void cmd_sweep(const RunConfig& cfg) {
    require_out(cfg);
    echo_config(cfg);
    if (!cfg.sweep) throw ConfigError("sweep command requires a sweep section");
    ModelF teacher = load_teacher(cfg);
    if (teacher.cfg.mode != ModelMode::causal_lm)
        throw ConfigError("capacity sweep runs in causal_lm mode");
    Corpus corpus = load_cfg_corpus(cfg);
    log_info("sweeping " + std::to_string(cfg.sweep->kinds.size()) + " kind(s) over " +
             std::to_string(cfg.sweep->grid.size()) + " capacities");
    SweepResult res = capacity_sweep(teacher, *cfg.sweep, cfg.distill, cfg.train, corpus);
    const fs::path out(cfg.out_dir);
    write_text_file((out / "sweep.csv").string(), sweep_csv(res));
    write_text_file((out / "sweep.json").string(), sweep_json(res).dump(2) + "\n");
}

void cmd_prune(const RunConfig& cfg) {
    require_out(cfg);
    echo_config(cfg);
    if (!cfg.prune) throw ConfigError("prune command requires a prune section");
    ModelF teacher = load_teacher(cfg);
    Corpus corpus = load_cfg_corpus(cfg);
    PruneResult res = prune_eval(teacher, *cfg.prune, corpus);
    const fs::path out(cfg.out_dir);
    write_text_file((out / "prune.csv").string(), prune_csv(res));
    write_text_file((out / "prune.json").string(), prune_json(res).dump(2) + "\n");
}

void cmd_compare_routers(const RunConfig& cfg) {
    require_out(cfg);
    echo_config(cfg);
    const std::vector<std::string> dirs = split_list(cfg.routers_dir);
    if (dirs.size() < 2)
        throw ConfigError("compare-routers needs >= 2 router checkpoints (comma separated)");
    ImageSet images = load_cfg_images(cfg);
    std::vector<i64> ids(images.count);
    std::iota(ids.begin(), ids.end(), 0);

    std::vector<Checkpoint<float>> cks;
    std::vector<const ElasticModel<float>*> routers;
    std::vector<std::string> labels;
    for (const auto& d : dirs) {
        cks.push_back(load_checkpoint<float>(d));
        if (!cks.back().elastic)
            throw ConfigError("checkpoint '" + d + "' carries no routers");
        labels.push_back(fs::path(d).filename().string());
    }
    for (const auto& ck : cks) routers.push_back(&*ck.elastic);
    RouterSimilarity sim = router_similarity<float>(routers, labels, images, ids);
    const fs::path out(cfg.out_dir);
    write_text_file((out / "similarity.json").string(), similarity_json(sim).dump(2) + "\n");
    json heat;
    heat["mask_layer"] = sim.mask_layer;
    heat["grid"] = images.grid;
    heat["labels"] = sim.labels;
    heat["masks"] = sim.masks;
    write_text_file((out / "heatmaps.json").string(), heat.dump(2) + "\n");
}

void cmd_report(const RunConfig& cfg) {
    require_out(cfg);
    json report = emit_report(cfg.out_dir);
    write_text_file((fs::path(cfg.out_dir) / "report.json").string(), report.dump(2) + "\n");
}

}  // namespace

void run_command(const std::string& command, const RunConfig& raw_cfg) {
    RunConfig cfg = effective_config(raw_cfg);
    if (cfg.threads != 0) kernels::set_threads(cfg.threads);
    if (command == "pretrain-teacher")
        cmd_pretrain_teacher(cfg);
    else if (command == "distill")
        cmd_distill(cfg);
    else if (command == "eval")
        cmd_eval(cfg);
    else if (command == "sweep")
        cmd_sweep(cfg);
    else if (command == "prune")
        cmd_prune(cfg);
    else if (command == "compare-routers")
        cmd_compare_routers(cfg);
    else if (command == "report")
        cmd_report(cfg);
    else
        throw ConfigError("unknown command '" + command + "'");
}

}  // namespace elt
