#pragma once

#include <filesystem>
#include <fstream>
#include <map>

#include "elt/config_json.hpp"
#include "elt/routing.hpp"

// Checkpoint layout: a directory with manifest.json (array of
// {name, shape, dtype, file, byte_length}), one raw little-endian row-major
// blob per tensor, and config.json describing the model (and routers, when
// present) so the structure can be rebuilt before the blobs are loaded.

namespace elt {

template <class T>
constexpr const char* dtype_name();
template <>
constexpr const char* dtype_name<float>() {
    return "float32";
}
template <>
constexpr const char* dtype_name<double>() {
    return "float64";
}

namespace detail {

template <class T>
void collect_tensors(const TransformerParams<T>& params, const ElasticModel<T>* elastic,
                     std::vector<std::pair<std::string, Tensor<T>>>& out) {
    const TransformerParams<T>& p = elastic ? elastic->params : params;
    p.for_each_tensor([&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, t); });
    p.for_each_lora_tensor([&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, t); });
    if (elastic)
        elastic->for_each_trainable([&](const std::string& n, Tensor<T>& t) {
            if (n.find(".lora.") == std::string::npos) out.emplace_back(n, t);
        });
}

inline std::string blob_filename(const std::string& tensor_name) { return tensor_name + ".bin"; }

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& dir, const TransformerParams<T>& params,
                     const ElasticModel<T>* elastic = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    std::vector<std::pair<std::string, Tensor<T>>> tensors;
    detail::collect_tensors(params, elastic, tensors);

    nlohmann::json manifest = nlohmann::json::array();
    for (auto& [name, t] : tensors) {
        const std::string file = detail::blob_filename(name);
        const std::size_t bytes = t.data().size() * sizeof(T);
        std::ofstream out(fs::path(dir) / file, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write checkpoint blob '" + file + "'");
        out.write(reinterpret_cast<const char*>(t.data().data()),
                  static_cast<std::streamsize>(bytes));
        if (!out) throw FormatError("short write on checkpoint blob '" + file + "'");
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["dtype"] = dtype_name<T>();
        e["file"] = file;
        e["byte_length"] = bytes;
        manifest.push_back(e);
    }
    {
        std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary | std::ios::trunc);
        out << manifest.dump(2) << "\n";
        if (!out) throw FormatError("cannot write manifest.json");
    }
    {
        nlohmann::json cfg;
        cfg["version"] = 1;
        const TransformerParams<T>& p = elastic ? elastic->params : params;
        cfg["model"] = model_config_json(p.cfg);
        cfg["frozen"] = p.frozen;
        cfg["dtype"] = dtype_name<T>();
        if (elastic) {
            cfg["elastic"] = elastic_config_json(elastic->cfg);
            cfg["teacher_digest"] = backbone_digest(p);
        }
        std::ofstream out(fs::path(dir) / "config.json", std::ios::binary | std::ios::trunc);
        out << cfg.dump(2) << "\n";
        if (!out) throw FormatError("cannot write config.json");
    }
}

template <class T>
struct Checkpoint {
    TransformerParams<T> params;
    std::optional<ElasticModel<T>> elastic;
};

template <class T>
Checkpoint<T> load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path root(dir);
    auto read_json = [&](const char* file) {
        std::ifstream in(root / file);
        if (!in) throw FormatError("checkpoint '" + dir + "' is missing " + file);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("corrupt ") + file + ": " + e.what());
        }
        return j;
    };
    const nlohmann::json cfg_j = read_json("config.json");
    const nlohmann::json manifest = read_json("manifest.json");
    if (!manifest.is_array()) throw FormatError("manifest.json must be an array");
    if (!cfg_j.contains("model")) throw FormatError("config.json is missing the model section");
    if (cfg_j.contains("dtype") && cfg_j["dtype"].get<std::string>() != dtype_name<T>())
        throw FormatError("checkpoint dtype " + cfg_j["dtype"].get<std::string>() +
                          " does not match requested " + dtype_name<T>());

    Checkpoint<T> ck;
    ck.params = build_model<T>(model_config_from_json(cfg_j["model"]));

    // Stage every blob before touching the model: a truncated or mismatched
    // file must not leave a partially loaded model behind.
    struct Staged {
        Shape shape;
        std::vector<T> data;
        bool consumed = false;
    };
    std::map<std::string, Staged> staged;
    for (const auto& e : manifest) {
        const std::string name = e.at("name").get<std::string>();
        const std::string file = e.at("file").get<std::string>();
        const std::string dtype = e.at("dtype").get<std::string>();
        const Shape shape = e.at("shape").get<std::vector<i64>>();
        const std::size_t byte_length = e.at("byte_length").get<std::size_t>();
        if (dtype != dtype_name<T>())
            throw FormatError("tensor '" + name + "' has dtype " + dtype + ", expected " +
                              dtype_name<T>());
        const std::size_t want = std::size_t(shape_numel(shape)) * sizeof(T);
        if (byte_length != want)
            throw FormatError("tensor '" + name + "' byte_length " +
                              std::to_string(byte_length) + " does not match its shape");
        std::error_code ec;
        const auto actual = fs::file_size(root / file, ec);
        if (ec || actual != byte_length)
            throw FormatError("blob '" + file + "' is truncated or missing");
        Staged s;
        s.shape = shape;
        s.data.resize(shape_numel(shape));
        std::ifstream in(root / file, std::ios::binary);
        in.read(reinterpret_cast<char*>(s.data.data()),
                static_cast<std::streamsize>(byte_length));
        if (!in || in.gcount() != static_cast<std::streamsize>(byte_length))
            throw FormatError("short read on blob '" + file + "'");
        if (!staged.emplace(name, std::move(s)).second)
            throw FormatError("manifest lists tensor '" + name + "' twice");
    }

    auto commit = [&](const std::string& name, Tensor<T>& t) {
        auto it = staged.find(name);
        if (it == staged.end()) throw FormatError("manifest is missing tensor '" + name + "'");
        if (it->second.shape != t.shape())
            throw FormatError("tensor '" + name + "' has shape " + shape_str(it->second.shape) +
                              ", expected " + shape_str(t.shape()));
        std::copy(it->second.data.begin(), it->second.data.end(), t.data().begin());
        it->second.consumed = true;
    };

    // backbone first, so router construction (expert decomposition) sees the
    // loaded weights rather than the random build_model init
    ck.params.for_each_tensor(commit);
    if (cfg_j.value("frozen", false)) ck.params.freeze();

    if (cfg_j.contains("elastic")) {
        ElasticConfig ecfg = elastic_config_from_json(cfg_j["elastic"], ck.params.cfg);
        ck.elastic = make_elastic(ck.params, ecfg, 0);
        ck.elastic->params.for_each_lora_tensor(commit);
        ck.elastic->for_each_trainable([&](const std::string& n, Tensor<T>& t) {
            if (n.find(".lora.") == std::string::npos) commit(n, t);
        });
    }
    for (const auto& [name, s] : staged)
        if (!s.consumed) throw FormatError("manifest lists unknown tensor '" + name + "'");
    return ck;
}

}  // namespace elt
