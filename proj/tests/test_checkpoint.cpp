#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "elt/checkpoint.hpp"
#include "elt/sha256.hpp"

using namespace elt;
namespace fs = std::filesystem;

namespace {

ModelConfig ck_cfg() {
    ModelConfig c;
    c.vocab_size = 41;
    c.layers = 2;
    c.hidden = 8;
    c.heads = 2;
    c.mlp_hidden = 16;
    c.max_seq = 8;
    c.seed = 31;
    return c;
}

struct TempDir {
    fs::path path;
    TempDir() : path(fs::temp_directory_path() / ("elt_ck_" + std::to_string(::getpid()) + "_" +
                                                  std::to_string(counter++))) {
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static inline int counter = 0;
};

}  // namespace

TEST_CASE("sha256 known vectors") {
    CHECK(sha256_hex("", 0) ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc", 3) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("checkpoint round trip is bit identical") {
    TempDir dir;
    auto p = build_model<float>(ck_cfg());
    p.freeze();
    save_checkpoint(dir.path.string(), p);

    auto ck = load_checkpoint<float>(dir.path.string());
    CHECK(ck.params.frozen);
    CHECK(backbone_digest(ck.params) == backbone_digest(p));
    CHECK_FALSE(ck.elastic.has_value());
}

TEST_CASE("checkpoint round trip with routers and lora") {
    TempDir dir;
    auto p = build_model<float>(ck_cfg());
    p.freeze();
    ElasticConfig ecfg;
    ecfg.input_mlp = InputRouteSpec{0.5, WeightMode::sigmoid, 0.5};
    ecfg.param_mlp = ParamRouteSpec{2, 4};
    ecfg.lora = LoraSpec{1, 0.0, true, true};
    auto em = make_elastic(p, ecfg, 7);
    // make router state distinctive
    Rng rng(9);
    em.for_each_trainable([&](const std::string&, Tensor<float>& t) {
        for (auto& v : t.data()) v = float(rng.normal());
    });
    save_checkpoint(dir.path.string(), p, &em);

    auto ck = load_checkpoint<float>(dir.path.string());
    REQUIRE(ck.elastic.has_value());
    CHECK(backbone_digest(ck.params) == backbone_digest(p));

    std::vector<float> want, got;
    em.for_each_trainable([&](const std::string&, Tensor<float>& t) {
        want.insert(want.end(), t.data().begin(), t.data().end());
    });
    ck.elastic->for_each_trainable([&](const std::string&, Tensor<float>& t) {
        got.insert(got.end(), t.data().begin(), t.data().end());
    });
    CHECK(want == got);

    // expert decomposition must reflect the loaded backbone
    CHECK(verify_equivalence(ck.params.blocks[0].mlp, *ck.elastic->layers[0].experts, 4) <=
          1e-6f);
}

TEST_CASE("manifest lists every tensor with shape and dtype") {
    TempDir dir;
    auto p = build_model<double>(ck_cfg());
    save_checkpoint(dir.path.string(), p);
    std::ifstream in(dir.path / "manifest.json");
    nlohmann::json manifest;
    in >> manifest;
    REQUIRE(manifest.is_array());
    CHECK(manifest.size() == 2 + ck_cfg().layers * 16 + 2);
    for (const auto& e : manifest) {
        CHECK(e.contains("name"));
        CHECK(e.contains("shape"));
        CHECK(e["dtype"] == "float64");
        CHECK(e.contains("file"));
        CHECK(e.contains("byte_length"));
    }
}

TEST_CASE("truncated blob fails without returning a partial model") {
    TempDir dir;
    auto p = build_model<float>(ck_cfg());
    save_checkpoint(dir.path.string(), p);
    fs::resize_file(dir.path / "pos_embed.bin", 8);
    CHECK_THROWS_AS(load_checkpoint<float>(dir.path.string()), FormatError);

    // corrupt manifest
    {
        std::ofstream out(dir.path / "manifest.json", std::ios::trunc);
        out << "{not json";
    }
    CHECK_THROWS_AS(load_checkpoint<float>(dir.path.string()), FormatError);
}

TEST_CASE("dtype mismatch is a format error") {
    TempDir dir;
    auto p = build_model<float>(ck_cfg());
    save_checkpoint(dir.path.string(), p);
    CHECK_THROWS_AS(load_checkpoint<double>(dir.path.string()), FormatError);
}
