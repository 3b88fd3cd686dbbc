#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>

#include "elt/data.hpp"

using namespace elt;

namespace {

std::string repo_root() {
    const char* env = std::getenv("ELT_ROOT");
    return env ? env : ".";
}

}  // namespace

TEST_CASE("tokenize: ascii identity, folding, round trip") {
    auto ids = tokenize("ab");
    CHECK(ids == std::vector<i64>{97, 98});
    CHECK(tokenize("").empty());

    const std::string s = "Hello, world! 0123\n";
    CHECK(detokenize(tokenize(s)) == s);

    // bytes >= 128 fold onto the reserved id
    std::string high = "a";
    high.push_back(char(0xC3));
    auto folded = tokenize(high);
    CHECK(folded[1] == kFoldTokenId);
}

TEST_CASE("bundled corpora load with a disjoint split and stay in-vocabulary") {
    for (const char* name : {"data/corpus_a.txt", "data/corpus_b.txt"}) {
        Corpus c = load_corpus(repo_root() + "/" + name, 0.1);
        CHECK(c.tokens.size() > 50000);
        CHECK(c.train_end > 0);
        CHECK(c.train().size() + c.eval().size() == c.tokens.size());
        for (i64 t : c.tokens) {
            CHECK(t >= 0);
            CHECK(t < kByteVocab);
        }
    }
}

TEST_CASE("lm windows: non-overlapping, shifted targets") {
    std::vector<i64> toks(100);
    std::iota(toks.begin(), toks.end(), 0);
    auto win = make_windows(toks, 10);
    CHECK(win.starts.size() == 9);  // last window needs one lookahead token
    auto batch = gather_batch(toks, win, std::vector<i64>{0, 2});
    CHECK(batch.inputs.shape == Shape{2, 10});
    CHECK(batch.inputs.data[0] == 0);
    CHECK(batch.targets.data[0] == 1);
    CHECK(batch.inputs.data[10] == 20);
    CHECK(batch.targets.data[19] == 30);
}

TEST_CASE("synthetic images: determinism, disjoint classes, separability") {
    SyntheticImageSpec spec;
    spec.count = 64;
    spec.grid = 8;
    spec.patch_dim = 12;
    spec.classes = 4;
    spec.seed = 5;
    auto a = make_synthetic_images(spec);
    auto b = make_synthetic_images(spec);
    CHECK(a.patches == b.patches);
    CHECK(a.labels == b.labels);
    CHECK(a.count == 64);

    // class-partitioned subsets are disjoint by construction
    auto c0 = images_with_label(a, 0);
    auto c1 = images_with_label(a, 1);
    for (i64 x : c0)
        for (i64 y : c1) CHECK(x != y);
    CHECK(c0.size() + c1.size() + images_with_label(a, 2).size() +
              images_with_label(a, 3).size() ==
          std::size_t(a.count));

    // per-class pixel-mean separation exceeds the within-class deviation
    const i64 feat = a.tokens_per_image() * a.patch_dim;
    std::vector<double> means(4, 0.0);
    std::vector<double> sds(4, 0.0);
    for (i64 cls = 0; cls < 4; ++cls) {
        auto ids = images_with_label(a, cls);
        std::vector<double> per_image;
        for (i64 id : ids) {
            double m = 0;
            for (i64 j = 0; j < feat; ++j) m += a.patches[id * feat + j];
            per_image.push_back(m / double(feat));
        }
        double mu = 0;
        for (double v : per_image) mu += v / double(per_image.size());
        double var = 0;
        for (double v : per_image) var += (v - mu) * (v - mu) / double(per_image.size());
        means[cls] = mu;
        sds[cls] = std::sqrt(var);
    }
    double max_gap = 0, max_sd = 0;
    for (i64 i = 0; i < 4; ++i) {
        max_sd = std::max(max_sd, sds[i]);
        for (i64 j = i + 1; j < 4; ++j)
            max_gap = std::max(max_gap, std::abs(means[i] - means[j]));
    }
    CHECK(max_gap > max_sd);

    // class filter keeps only the requested labels
    spec.class_filter = {1, 3};
    auto filtered = make_synthetic_images(spec);
    for (i64 l : filtered.labels) CHECK((l == 1 || l == 3));

    SyntheticImageSpec bad = spec;
    bad.patch_dim = 13;
    CHECK_THROWS_AS(make_synthetic_images(bad), ConfigError);
}
