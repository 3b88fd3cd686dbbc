#include "elt/config_json.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace elt {

using nlohmann::json;

// ---------------------------------------------------------------------------
// validation
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    if (layers < 2) throw ConfigError("model.layers must be >= 2");
    if (hidden < 2) throw ConfigError("model.hidden must be >= 2");
    if (heads < 1) throw ConfigError("model.heads must be >= 1");
    if (hidden % heads != 0) throw ConfigError("model.hidden must be divisible by model.heads");
    if (mlp_hidden < 1) throw ConfigError("model.mlp_hidden must be >= 1");
    if (mode == ModelMode::causal_lm) {
        if (vocab_size < 2) throw ConfigError("model.vocab_size must be >= 2");
        if (max_seq < 2) throw ConfigError("model.max_seq must be >= 2");
    } else {
        if (patch_dim < 1) throw ConfigError("model.patch_dim must be >= 1");
        if (image_grid < 2) throw ConfigError("model.image_grid must be >= 2");
    }
}

const char* route_kind_name(RouteKind k) {
    switch (k) {
        case RouteKind::input_mha: return "input_mha";
        case RouteKind::input_mlp: return "input_mlp";
        case RouteKind::param_mha: return "param_mha";
        case RouteKind::param_mlp: return "param_mlp";
    }
    return "?";
}

RouteKind route_kind_from_name(const std::string& s) {
    if (s == "input_mha") return RouteKind::input_mha;
    if (s == "input_mlp") return RouteKind::input_mlp;
    if (s == "param_mha") return RouteKind::param_mha;
    if (s == "param_mlp") return RouteKind::param_mlp;
    throw ConfigError("unknown routing kind '" + s + "'");
}

const char* prune_kind_name(PruneKind k) {
    switch (k) {
        case PruneKind::mlp_layer: return "mlp_layer";
        case PruneKind::attention_head: return "attention_head";
        case PruneKind::transformer_layer: return "transformer_layer";
    }
    return "?";
}

PruneKind prune_kind_from_name(const std::string& s) {
    if (s == "mlp_layer") return PruneKind::mlp_layer;
    if (s == "attention_head") return PruneKind::attention_head;
    if (s == "transformer_layer") return PruneKind::transformer_layer;
    throw ConfigError("unknown prune kind '" + s + "'");
}

bool ElasticConfig::routes_layer(i64 layer) const {
    switch (schedule) {
        case LayerSchedule::all: return true;
        case LayerSchedule::even: return layer % 2 == 0;
        case LayerSchedule::explicit_list:
            for (i64 l : layer_list)
                if (l == layer) return true;
            return false;
    }
    return false;
}

void ElasticConfig::validate(const ModelConfig& model) const {
    auto check_input = [](const char* name, const InputRouteSpec& s) {
        if (!(s.capacity > 0.0 && s.capacity <= 1.0))
            throw ConfigError(std::string("elastic.") + name + ".capacity must be in (0,1]");
        if (!(s.threshold >= 0.0 && s.threshold <= 1.0))
            throw ConfigError(std::string("elastic.") + name + ".threshold must be in [0,1]");
    };
    if (input_mha) check_input("input_mha", *input_mha);
    if (input_mlp) check_input("input_mlp", *input_mlp);
    if (param_mha) {
        if (param_mha->k < 1 || param_mha->k > model.heads)
            throw ConfigError("elastic.param_mha.k must be in [1, heads]");
    }
    if (param_mlp) {
        if (param_mlp->experts < 1) throw ConfigError("elastic.param_mlp.experts must be >= 1");
        if (model.mlp_hidden % param_mlp->experts != 0)
            throw ConfigError("elastic.param_mlp.experts must divide model.mlp_hidden");
        if (param_mlp->k < 1 || param_mlp->k > param_mlp->experts)
            throw ConfigError("elastic.param_mlp.k must be in [1, experts]");
    }
    if (lora) {
        if (lora->rank < 1) throw ConfigError("elastic.lora.rank must be >= 1");
        if (!lora->q_proj && !lora->v_proj)
            throw ConfigError("elastic.lora must target at least one of q_proj/v_proj");
    }
    if (schedule == LayerSchedule::explicit_list) {
        if (layer_list.empty()) throw ConfigError("elastic.layers must be non-empty");
        for (i64 l : layer_list)
            if (l < 0 || l >= model.layers)
                throw ConfigError("elastic.layers entry " + std::to_string(l) + " out of range");
    }
}

void DistillConfig::validate(const ModelConfig& model) const {
    if (!(temperature > 0.0)) throw ConfigError("distill.temperature must be > 0");
    if (top_k_vocab < 0) throw ConfigError("distill.top_k_vocab must be >= 0");
    if (model.mode == ModelMode::causal_lm) {
        if (top_k_vocab >= model.vocab_size)
            throw ConfigError("distill.top_k_vocab must be < model.vocab_size");
    } else {
        if (output_loss == OutputLossKind::kl)
            throw ConfigError("distill.output_loss must be 'cosine' in encoder mode");
    }
    if (lambda_load < 0.0) throw ConfigError("distill.lambda_load must be >= 0");
    if (lambda_topk < 0.0) throw ConfigError("distill.lambda_topk must be >= 0");
}

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (!(warmup_frac >= 0.0 && warmup_frac < 1.0))
        throw ConfigError("train.warmup_frac must be in [0,1)");
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch < 1) throw ConfigError("train.batch must be >= 1");
    if (grad_clip < 0.0) throw ConfigError("train.grad_clip must be >= 0");
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
    if (max_steps < 0) throw ConfigError("train.max_steps must be >= 0");
}

i64 PruneSpec::component_total(const ModelConfig& model) const {
    switch (kind) {
        case PruneKind::mlp_layer: return model.layers;
        case PruneKind::attention_head: return model.layers * model.heads;
        case PruneKind::transformer_layer: return model.layers;
    }
    return 0;
}

void PruneSpec::validate(const ModelConfig& model) const {
    if (groups < 1) throw ConfigError("prune.groups must be >= 1");
    const i64 total = component_total(model);
    for (i64 c : counts)
        if (c < 0 || c > total)
            throw ConfigError("prune.counts entry " + std::to_string(c) +
                              " exceeds component total " + std::to_string(total));
}

void SweepSpec::validate(const ModelConfig& model) const {
    if (kinds.empty()) throw ConfigError("sweep.kinds must be non-empty");
    if (grid.empty()) throw ConfigError("sweep.grid must be non-empty");
    for (double c : grid)
        if (!(c > 0.0 && c <= 1.0)) throw ConfigError("sweep.grid entries must be in (0,1]");
    for (RouteKind k : kinds) {
        if (k == RouteKind::param_mlp) {
            if (experts < 1 || model.mlp_hidden % experts != 0)
                throw ConfigError("sweep.experts must divide model.mlp_hidden");
        }
    }
}

// ---------------------------------------------------------------------------
// strict JSON ingestion
// ---------------------------------------------------------------------------

namespace {

class StrictObject {
public:
    StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + " must be a JSON object");
    }

    const json* get(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    template <class T>
    T number(const char* key, T fallback) {
        const json* v = get(key);
        if (!v) return fallback;
        if (!v->is_number()) throw ConfigError(path_ + "." + key + " must be a number");
        return v->get<T>();
    }

    bool boolean(const char* key, bool fallback) {
        const json* v = get(key);
        if (!v) return fallback;
        if (!v->is_boolean()) throw ConfigError(path_ + "." + key + " must be a boolean");
        return v->get<bool>();
    }

    std::string str(const char* key, std::string fallback) {
        const json* v = get(key);
        if (!v) return fallback;
        if (!v->is_string()) throw ConfigError(path_ + "." + key + " must be a string");
        return v->get<std::string>();
    }

    std::string subpath(const char* key) const { return path_ + "." + key; }

    void finish() const {
        for (const auto& item : j_.items())
            if (!seen_.count(item.key()))
                throw ConfigError("unknown key '" + path_ + "." + item.key() + "'");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

std::vector<i64> int_array(const json& v, const std::string& path) {
    if (!v.is_array()) throw ConfigError(path + " must be an array");
    std::vector<i64> out;
    for (const auto& e : v) {
        if (!e.is_number_integer()) throw ConfigError(path + " must contain integers");
        out.push_back(e.get<i64>());
    }
    return out;
}

std::vector<double> double_array(const json& v, const std::string& path) {
    if (!v.is_array()) throw ConfigError(path + " must be an array");
    std::vector<double> out;
    for (const auto& e : v) {
        if (!e.is_number()) throw ConfigError(path + " must contain numbers");
        out.push_back(e.get<double>());
    }
    return out;
}

ModelConfig parse_model(const json& j, const std::string& path) {
    StrictObject o(j, path);
    ModelConfig m;
    const std::string mode = o.str("mode", "causal_lm");
    if (mode == "causal_lm")
        m.mode = ModelMode::causal_lm;
    else if (mode == "encoder")
        m.mode = ModelMode::encoder;
    else
        throw ConfigError(path + ".mode must be 'causal_lm' or 'encoder'");
    m.vocab_size = o.number<i64>("vocab_size", m.vocab_size);
    m.patch_dim = o.number<i64>("patch_dim", m.patch_dim);
    m.image_grid = o.number<i64>("image_grid", m.image_grid);
    m.layers = o.number<i64>("layers", m.layers);
    m.hidden = o.number<i64>("hidden", m.hidden);
    m.heads = o.number<i64>("heads", m.heads);
    m.mlp_hidden = o.number<i64>("mlp_hidden", m.mlp_hidden);
    m.max_seq = o.number<i64>("max_seq", m.max_seq);
    m.seed = o.number<std::uint64_t>("seed", m.seed);
    o.finish();
    return m;
}

InputRouteSpec parse_input_route(const json& j, const std::string& path) {
    StrictObject o(j, path);
    InputRouteSpec s;
    s.capacity = o.number<double>("capacity", s.capacity);
    const std::string wm = o.str("weight_mode", "sigmoid");
    if (wm == "sigmoid")
        s.weight_mode = WeightMode::sigmoid;
    else if (wm == "seq_softmax")
        s.weight_mode = WeightMode::seq_softmax;
    else
        throw ConfigError(path + ".weight_mode must be 'sigmoid' or 'seq_softmax'");
    s.threshold = o.number<double>("threshold", s.threshold);
    o.finish();
    return s;
}

ParamRouteSpec parse_param_route(const json& j, const std::string& path) {
    StrictObject o(j, path);
    ParamRouteSpec s;
    s.k = o.number<i64>("k", s.k);
    s.experts = o.number<i64>("experts", s.experts);
    o.finish();
    return s;
}

ElasticConfig parse_elastic(const json& j, const std::string& path) {
    StrictObject o(j, path);
    ElasticConfig e;
    const std::string sched = o.str("layer_schedule", "all");
    if (sched == "all")
        e.schedule = LayerSchedule::all;
    else if (sched == "even")
        e.schedule = LayerSchedule::even;
    else if (sched == "explicit")
        e.schedule = LayerSchedule::explicit_list;
    else
        throw ConfigError(path + ".layer_schedule must be 'all', 'even' or 'explicit'");
    if (const json* v = o.get("layers")) e.layer_list = int_array(*v, o.subpath("layers"));
    if (const json* v = o.get("input_mha"))
        e.input_mha = parse_input_route(*v, o.subpath("input_mha"));
    if (const json* v = o.get("input_mlp"))
        e.input_mlp = parse_input_route(*v, o.subpath("input_mlp"));
    if (const json* v = o.get("param_mha"))
        e.param_mha = parse_param_route(*v, o.subpath("param_mha"));
    if (const json* v = o.get("param_mlp"))
        e.param_mlp = parse_param_route(*v, o.subpath("param_mlp"));
    if (const json* v = o.get("lora")) {
        StrictObject lo(*v, o.subpath("lora"));
        LoraSpec l;
        l.rank = lo.number<i64>("rank", l.rank);
        l.alpha = lo.number<double>("alpha", l.alpha);
        l.q_proj = lo.boolean("q_proj", l.q_proj);
        l.v_proj = lo.boolean("v_proj", l.v_proj);
        lo.finish();
        e.lora = l;
    }
    o.finish();
    return e;
}

DistillConfig parse_distill(const json& j, const std::string& path) {
    StrictObject o(j, path);
    DistillConfig d;
    const std::string dir = o.str("direction", "forward");
    if (dir == "forward")
        d.direction = KlDirection::forward;
    else if (dir == "reverse")
        d.direction = KlDirection::reverse;
    else
        throw ConfigError(path + ".direction must be 'forward' or 'reverse'");
    d.top_k_vocab = o.number<i64>("top_k_vocab", d.top_k_vocab);
    d.temperature = o.number<double>("temperature", d.temperature);
    const std::string ol = o.str("output_loss", "kl");
    if (ol == "kl")
        d.output_loss = OutputLossKind::kl;
    else if (ol == "cosine")
        d.output_loss = OutputLossKind::cosine;
    else
        throw ConfigError(path + ".output_loss must be 'kl' or 'cosine'");
    d.lambda_load = o.number<double>("lambda_load", d.lambda_load);
    d.lambda_topk = o.number<double>("lambda_topk", d.lambda_topk);
    o.finish();
    return d;
}

TrainConfig parse_train(const json& j, const std::string& path) {
    StrictObject o(j, path);
    TrainConfig t;
    t.lr = o.number<double>("lr", t.lr);
    t.warmup_frac = o.number<double>("warmup_frac", t.warmup_frac);
    t.epochs = o.number<i64>("epochs", t.epochs);
    t.batch = o.number<i64>("batch", t.batch);
    t.seed = o.number<std::uint64_t>("seed", t.seed);
    t.beta1 = o.number<double>("beta1", t.beta1);
    t.beta2 = o.number<double>("beta2", t.beta2);
    t.adam_eps = o.number<double>("adam_eps", t.adam_eps);
    t.weight_decay = o.number<double>("weight_decay", t.weight_decay);
    t.grad_clip = o.number<double>("grad_clip", t.grad_clip);
    t.max_steps = o.number<i64>("max_steps", t.max_steps);
    o.finish();
    return t;
}

PruneSpec parse_prune(const json& j, const std::string& path) {
    StrictObject o(j, path);
    PruneSpec p;
    p.kind = prune_kind_from_name(o.str("kind", "mlp_layer"));
    if (const json* v = o.get("counts")) p.counts = int_array(*v, o.subpath("counts"));
    p.groups = o.number<i64>("groups", p.groups);
    p.seed = o.number<std::uint64_t>("seed", p.seed);
    o.finish();
    return p;
}

SweepSpec parse_sweep(const json& j, const std::string& path) {
    StrictObject o(j, path);
    SweepSpec s;
    if (const json* v = o.get("kinds")) {
        if (!v->is_array()) throw ConfigError(o.subpath("kinds") + " must be an array");
        for (const auto& e : *v) {
            if (!e.is_string())
                throw ConfigError(o.subpath("kinds") + " entries must be strings");
            s.kinds.push_back(route_kind_from_name(e.get<std::string>()));
        }
    }
    if (const json* v = o.get("grid")) s.grid = double_array(*v, o.subpath("grid"));
    s.experts = o.number<i64>("experts", s.experts);
    o.finish();
    return s;
}

DataConfig parse_data(const json& j, const std::string& path) {
    StrictObject o(j, path);
    DataConfig d;
    d.corpus_path = o.str("corpus", "");
    d.eval_fraction = o.number<double>("eval_fraction", d.eval_fraction);
    if (const json* v = o.get("synthetic")) {
        StrictObject so(*v, o.subpath("synthetic"));
        SyntheticImageSpec s;
        s.count = so.number<i64>("count", s.count);
        s.grid = so.number<i64>("grid", s.grid);
        s.patch_dim = so.number<i64>("patch_dim", s.patch_dim);
        s.classes = so.number<i64>("classes", s.classes);
        if (const json* cf = so.get("class_filter"))
            s.class_filter = int_array(*cf, so.subpath("class_filter"));
        s.seed = so.number<std::uint64_t>("seed", s.seed);
        so.finish();
        d.synthetic = s;
    }
    if (!(d.eval_fraction > 0.0 && d.eval_fraction < 1.0))
        throw ConfigError(path + ".eval_fraction must be in (0,1)");
    o.finish();
    return d;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    StrictObject o(j, "config");
    RunConfig cfg;
    if (const json* v = o.get("model")) cfg.model = parse_model(*v, "model");
    if (const json* v = o.get("data")) cfg.data = parse_data(*v, "data");
    if (const json* v = o.get("train")) cfg.train = parse_train(*v, "train");
    if (const json* v = o.get("distill")) cfg.distill = parse_distill(*v, "distill");
    if (const json* v = o.get("elastic")) cfg.elastic = parse_elastic(*v, "elastic");
    if (const json* v = o.get("prune")) cfg.prune = parse_prune(*v, "prune");
    if (const json* v = o.get("sweep")) cfg.sweep = parse_sweep(*v, "sweep");
    cfg.teacher_dir = o.str("teacher", "");
    cfg.routers_dir = o.str("routers", "");
    cfg.out_dir = o.str("out", "");
    cfg.seed = o.number<std::uint64_t>("seed", cfg.seed);
    cfg.threads = o.number<int>("threads", cfg.threads);
    o.finish();

    cfg.model.validate();
    cfg.train.validate();
    cfg.distill.validate(cfg.model);
    cfg.elastic.validate(cfg.model);
    if (cfg.prune) cfg.prune->validate(cfg.model);
    if (cfg.sweep) cfg.sweep->validate(cfg.model);
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

json model_config_json(const ModelConfig& cfg) {
    json m;
    m["mode"] = cfg.mode == ModelMode::causal_lm ? "causal_lm" : "encoder";
    m["vocab_size"] = cfg.vocab_size;
    m["patch_dim"] = cfg.patch_dim;
    m["image_grid"] = cfg.image_grid;
    m["layers"] = cfg.layers;
    m["hidden"] = cfg.hidden;
    m["heads"] = cfg.heads;
    m["mlp_hidden"] = cfg.mlp_hidden;
    m["max_seq"] = cfg.max_seq;
    m["seed"] = cfg.seed;
    return m;
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig m = parse_model(j, "model");
    m.validate();
    return m;
}

json elastic_config_json(const ElasticConfig& e) {
    json out;
    out["layer_schedule"] = e.schedule == LayerSchedule::all    ? "all"
                            : e.schedule == LayerSchedule::even ? "even"
                                                                : "explicit";
    if (!e.layer_list.empty()) out["layers"] = e.layer_list;
    auto input_json = [](const InputRouteSpec& s) {
        json v;
        v["capacity"] = s.capacity;
        v["weight_mode"] = s.weight_mode == WeightMode::sigmoid ? "sigmoid" : "seq_softmax";
        v["threshold"] = s.threshold;
        return v;
    };
    auto param_json = [](const ParamRouteSpec& s) {
        json v;
        v["k"] = s.k;
        v["experts"] = s.experts;
        return v;
    };
    if (e.input_mha) out["input_mha"] = input_json(*e.input_mha);
    if (e.input_mlp) out["input_mlp"] = input_json(*e.input_mlp);
    if (e.param_mha) out["param_mha"] = param_json(*e.param_mha);
    if (e.param_mlp) out["param_mlp"] = param_json(*e.param_mlp);
    if (e.lora) {
        json l;
        l["rank"] = e.lora->rank;
        l["alpha"] = e.lora->alpha;
        l["q_proj"] = e.lora->q_proj;
        l["v_proj"] = e.lora->v_proj;
        out["lora"] = l;
    }
    return out;
}

ElasticConfig elastic_config_from_json(const json& j, const ModelConfig& model) {
    ElasticConfig e = parse_elastic(j, "elastic");
    e.validate(model);
    return e;
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    j["model"] = model_config_json(cfg.model);

    json d;
    if (!cfg.data.corpus_path.empty()) d["corpus"] = cfg.data.corpus_path;
    d["eval_fraction"] = cfg.data.eval_fraction;
    if (cfg.data.synthetic) {
        json s;
        s["count"] = cfg.data.synthetic->count;
        s["grid"] = cfg.data.synthetic->grid;
        s["patch_dim"] = cfg.data.synthetic->patch_dim;
        s["classes"] = cfg.data.synthetic->classes;
        if (!cfg.data.synthetic->class_filter.empty())
            s["class_filter"] = cfg.data.synthetic->class_filter;
        s["seed"] = cfg.data.synthetic->seed;
        d["synthetic"] = s;
    }
    j["data"] = d;

    json t;
    t["lr"] = cfg.train.lr;
    t["warmup_frac"] = cfg.train.warmup_frac;
    t["epochs"] = cfg.train.epochs;
    t["batch"] = cfg.train.batch;
    t["seed"] = cfg.train.seed;
    t["beta1"] = cfg.train.beta1;
    t["beta2"] = cfg.train.beta2;
    t["adam_eps"] = cfg.train.adam_eps;
    t["weight_decay"] = cfg.train.weight_decay;
    t["grad_clip"] = cfg.train.grad_clip;
    t["max_steps"] = cfg.train.max_steps;
    j["train"] = t;

    json di;
    di["direction"] = cfg.distill.direction == KlDirection::forward ? "forward" : "reverse";
    di["top_k_vocab"] = cfg.distill.top_k_vocab;
    di["temperature"] = cfg.distill.temperature;
    di["output_loss"] = cfg.distill.output_loss == OutputLossKind::kl ? "kl" : "cosine";
    di["lambda_load"] = cfg.distill.lambda_load;
    di["lambda_topk"] = cfg.distill.lambda_topk;
    j["distill"] = di;

    j["elastic"] = elastic_config_json(cfg.elastic);

    if (cfg.prune) {
        json p;
        p["kind"] = prune_kind_name(cfg.prune->kind);
        p["counts"] = cfg.prune->counts;
        p["groups"] = cfg.prune->groups;
        p["seed"] = cfg.prune->seed;
        j["prune"] = p;
    }
    if (cfg.sweep) {
        json s;
        json kinds = json::array();
        for (RouteKind k : cfg.sweep->kinds) kinds.push_back(route_kind_name(k));
        s["kinds"] = kinds;
        s["grid"] = cfg.sweep->grid;
        s["experts"] = cfg.sweep->experts;
        j["sweep"] = s;
    }
    if (!cfg.teacher_dir.empty()) j["teacher"] = cfg.teacher_dir;
    if (!cfg.routers_dir.empty()) j["routers"] = cfg.routers_dir;
    if (!cfg.out_dir.empty()) j["out"] = cfg.out_dir;
    j["seed"] = cfg.seed;
    j["threads"] = cfg.threads;
    return j.dump(2);
}

}  // namespace elt
