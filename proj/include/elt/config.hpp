#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "elt/errors.hpp"

namespace elt {

using i64 = std::int64_t;

enum class ModelMode { causal_lm, encoder };

struct ModelConfig {
    ModelMode mode = ModelMode::causal_lm;
    i64 vocab_size = 128;  // causal mode
    i64 patch_dim = 12;    // encoder mode
    i64 image_grid = 8;    // encoder mode; sequence length is grid^2
    i64 layers = 4;
    i64 hidden = 64;
    i64 heads = 4;
    i64 mlp_hidden = 256;
    i64 max_seq = 128;
    std::uint64_t seed = 1;

    i64 head_dim() const { return hidden / heads; }
    i64 seq_len() const { return mode == ModelMode::encoder ? image_grid * image_grid : max_seq; }
    void validate() const;
};

enum class RouteKind { input_mha, input_mlp, param_mha, param_mlp };

const char* route_kind_name(RouteKind k);
RouteKind route_kind_from_name(const std::string& s);
inline bool is_input_kind(RouteKind k) {
    return k == RouteKind::input_mha || k == RouteKind::input_mlp;
}

enum class WeightMode { sigmoid, seq_softmax };

struct InputRouteSpec {
    double capacity = 1.0;  // fraction of tokens admitted during training
    WeightMode weight_mode = WeightMode::sigmoid;
    double threshold = 0.5;  // inference decision threshold
};

struct ParamRouteSpec {
    i64 k = 1;        // sub-networks kept per token
    i64 experts = 4;  // M; ignored for attention-head routing (uses head count)
};

struct LoraSpec {
    i64 rank = 1;
    double alpha = 0.0;  // 0 -> defaults to 2*rank
    bool q_proj = true;
    bool v_proj = true;

    double effective_alpha() const { return alpha == 0.0 ? 2.0 * double(rank) : alpha; }
};

enum class LayerSchedule { all, even, explicit_list };

struct ElasticConfig {
    LayerSchedule schedule = LayerSchedule::all;
    std::vector<i64> layer_list;  // for explicit_list
    std::optional<InputRouteSpec> input_mha;
    std::optional<InputRouteSpec> input_mlp;
    std::optional<ParamRouteSpec> param_mha;
    std::optional<ParamRouteSpec> param_mlp;
    std::optional<LoraSpec> lora;

    bool routes_layer(i64 layer) const;
    bool any_routing() const {
        return input_mha || input_mlp || param_mha || param_mlp || lora;
    }
    void validate(const ModelConfig& model) const;
};

enum class KlDirection { forward, reverse };
enum class OutputLossKind { kl, cosine };

struct DistillConfig {
    KlDirection direction = KlDirection::forward;
    i64 top_k_vocab = 16;  // 0 = full vocabulary
    double temperature = 1.0;
    OutputLossKind output_loss = OutputLossKind::kl;
    double lambda_load = 1.0;
    double lambda_topk = 1.0;

    void validate(const ModelConfig& model) const;
};

struct TrainConfig {
    double lr = 1e-4;
    double warmup_frac = 0.03;
    i64 epochs = 3;
    i64 batch = 32;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    i64 max_steps = 0;  // 0 = no cap

    void validate() const;
};

enum class PruneKind { mlp_layer, attention_head, transformer_layer };

const char* prune_kind_name(PruneKind k);
PruneKind prune_kind_from_name(const std::string& s);

struct PruneSpec {
    PruneKind kind = PruneKind::mlp_layer;
    std::vector<i64> counts;  // removal grid; empty -> default per kind
    i64 groups = 5;
    std::uint64_t seed = 0;

    void validate(const ModelConfig& model) const;
    i64 component_total(const ModelConfig& model) const;
};

struct SweepSpec {
    std::vector<RouteKind> kinds;
    std::vector<double> grid;  // capacities in (0,1]; mapped to k for param kinds
    i64 experts = 4;           // M for param_mlp cells

    void validate(const ModelConfig& model) const;
};

struct SyntheticImageSpec {
    i64 count = 512;
    i64 grid = 8;
    i64 patch_dim = 12;
    i64 classes = 4;
    std::vector<i64> class_filter;  // keep only these class labels when non-empty
    std::uint64_t seed = 7;
};

struct DataConfig {
    std::string corpus_path;  // causal mode
    double eval_fraction = 0.1;
    std::optional<SyntheticImageSpec> synthetic;  // encoder mode
};

struct RunConfig {
    ModelConfig model;
    DataConfig data;
    TrainConfig train;
    DistillConfig distill;
    ElasticConfig elastic;
    std::optional<PruneSpec> prune;
    std::optional<SweepSpec> sweep;
    std::string teacher_dir;  // checkpoint consumed by distill/sweep/prune/eval
    std::string routers_dir;  // optional routed-student checkpoint for eval
    std::string out_dir;
    std::uint64_t seed = 0;
    int threads = 0;
};

// Strict JSON ingestion: unknown keys are rejected, defaults are filled in.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string run_config_to_json(const RunConfig& cfg);  // effective-config echo

}  // namespace elt
