#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "elt/config.hpp"
#include "elt/tensor.hpp"

namespace elt {

// Byte-level tokenization onto a 128-id vocabulary: ASCII bytes map to
// themselves, anything >= 128 folds onto the reserved id 127.
constexpr i64 kByteVocab = 128;
constexpr i64 kFoldTokenId = 127;

std::vector<i64> tokenize(std::string_view text);
std::string detokenize(std::span<const i64> ids);

// Token stream with a disjoint train/eval split at a window boundary.
struct Corpus {
    std::string name;
    std::vector<i64> tokens;
    i64 train_end = 0;  // tokens [0, train_end) are train, the rest eval

    std::span<const i64> train() const { return {tokens.data(), std::size_t(train_end)}; }
    std::span<const i64> eval() const {
        return {tokens.data() + train_end, tokens.size() - std::size_t(train_end)};
    }
};

Corpus load_corpus(const std::string& path, double eval_fraction);
Corpus corpus_from_text(std::string name, std::string_view text, double eval_fraction);

// (input, target) windows for next-token prediction; target is input shifted
// by one. Windows are non-overlapping and deterministic.
struct LmWindows {
    i64 seq_len = 0;
    std::vector<i64> starts;  // window starts into the token span
};

LmWindows make_windows(std::span<const i64> tokens, i64 seq_len);

struct LmBatch {
    IntTensor inputs;   // (B, T)
    IntTensor targets;  // (B, T)
};

LmBatch gather_batch(std::span<const i64> tokens, const LmWindows& win,
                     std::span<const i64> window_ids);

// Parametric texture images for the encoder experiments. Each class is a
// distinct family (stripes, checkers, blobs, gradients) rendered to a
// G x G patch grid with 3-channel square patches (patch_dim = 3 * s^2).
struct ImageSet {
    i64 count = 0;
    i64 grid = 0;
    i64 patch_dim = 0;
    std::vector<double> patches;  // (count, grid^2, patch_dim) row-major
    std::vector<i64> labels;

    i64 tokens_per_image() const { return grid * grid; }

    template <class T>
    Tensor<T> batch(std::span<const i64> image_ids) const {
        const i64 t = tokens_per_image();
        Tensor<T> out = Tensor<T>::zeros({i64(image_ids.size()), t, patch_dim});
        T* po = out.data().data();
        for (std::size_t i = 0; i < image_ids.size(); ++i) {
            const double* src = patches.data() + image_ids[i] * t * patch_dim;
            for (i64 j = 0; j < t * patch_dim; ++j) po[i * t * patch_dim + j] = T(src[j]);
        }
        return out;
    }
};

ImageSet make_synthetic_images(const SyntheticImageSpec& spec);

// Image ids with the given label.
std::vector<i64> images_with_label(const ImageSet& set, i64 label);

}  // namespace elt
