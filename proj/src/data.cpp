#include "elt/data.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "elt/rng.hpp"

namespace elt {

std::vector<i64> tokenize(std::string_view text) {
    std::vector<i64> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(c < 128 ? i64(c) : kFoldTokenId);
    return out;
}

std::string detokenize(std::span<const i64> ids) {
    std::string out;
    out.reserve(ids.size());
    for (i64 id : ids) {
        if (id < 0 || id >= kByteVocab)
            throw DataError("token id " + std::to_string(id) + " outside byte vocabulary");
        out.push_back(char(id));
    }
    return out;
}

Corpus corpus_from_text(std::string name, std::string_view text, double eval_fraction) {
    if (!(eval_fraction > 0.0 && eval_fraction < 1.0))
        throw ConfigError("eval_fraction must be in (0,1)");
    Corpus c;
    c.name = std::move(name);
    c.tokens = tokenize(text);
    if (c.tokens.size() < 64) throw DataError("corpus '" + c.name + "' is too small");
    c.train_end = i64(double(c.tokens.size()) * (1.0 - eval_fraction));
    return c;
}

Corpus load_corpus(const std::string& path, double eval_fraction) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open corpus file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    std::string name = path;
    if (auto pos = name.find_last_of('/'); pos != std::string::npos) name = name.substr(pos + 1);
    return corpus_from_text(name, ss.str(), eval_fraction);
}

LmWindows make_windows(std::span<const i64> tokens, i64 seq_len) {
    if (seq_len < 2) throw ConfigError("window length must be >= 2");
    LmWindows w;
    w.seq_len = seq_len;
    // need seq_len + 1 tokens per window (shifted target)
    const i64 n = i64(tokens.size());
    for (i64 s = 0; s + seq_len + 1 <= n; s += seq_len) w.starts.push_back(s);
    if (w.starts.empty()) throw DataError("token span too short for one window");
    return w;
}

LmBatch gather_batch(std::span<const i64> tokens, const LmWindows& win,
                     std::span<const i64> window_ids) {
    const i64 b = i64(window_ids.size());
    const i64 t = win.seq_len;
    std::vector<i64> in(b * t), tg(b * t);
    for (i64 r = 0; r < b; ++r) {
        const i64 s = win.starts.at(std::size_t(window_ids[r]));
        for (i64 j = 0; j < t; ++j) {
            in[r * t + j] = tokens[s + j];
            tg[r * t + j] = tokens[s + j + 1];
        }
    }
    return {IntTensor({b, t}, std::move(in)), IntTensor({b, t}, std::move(tg))};
}

namespace {

// pixel value in [0,1] for a point (u,v) in [0,1)^2, per class family
double texture_value(i64 cls, double u, double v, double p0, double p1, double p2, int channel) {
    const double phase = 0.25 * channel;
    switch (cls % 4) {
        case 0: {  // stripes: oriented sinusoid
            const double freq = 2.0 + 6.0 * p0;
            const double angle = p1 * 3.14159265358979;
            const double s = u * std::cos(angle) + v * std::sin(angle);
            return 0.5 + 0.5 * std::sin(2.0 * 3.14159265358979 * (freq * s + p2 + phase));
        }
        case 1: {  // checkers
            const i64 cells = 2 + i64(p0 * 4.0);
            const i64 cu = i64((u + p1 * 0.3) * double(cells));
            const i64 cv = i64((v + p2 * 0.3) * double(cells));
            const double base = ((cu + cv) % 2 == 0) ? 1.0 : 0.0;
            return 0.8 * base + 0.2 * phase;
        }
        case 2: {  // blobs: two Gaussian bumps
            const double cx1 = 0.25 + 0.5 * p0, cy1 = 0.25 + 0.5 * p1;
            const double cx2 = 1.0 - cx1, cy2 = 0.25 + 0.5 * p2;
            const double s2 = 0.02 + 0.02 * phase;
            const double d1 = (u - cx1) * (u - cx1) + (v - cy1) * (v - cy1);
            const double d2 = (u - cx2) * (u - cx2) + (v - cy2) * (v - cy2);
            return std::exp(-d1 / s2) + 0.8 * std::exp(-d2 / s2);
        }
        default: {  // gradients
            const double gx = 2.0 * p0 - 1.0, gy = 2.0 * p1 - 1.0;
            const double raw = 0.5 + 0.5 * (gx * (u - 0.5) + gy * (v - 0.5)) / 0.75 + 0.2 * p2 +
                               0.1 * phase;
            return std::min(1.0, std::max(0.0, raw));
        }
    }
}

}  // namespace

ImageSet make_synthetic_images(const SyntheticImageSpec& spec) {
    if (spec.classes < 2) throw ConfigError("synthetic.classes must be >= 2");
    if (spec.grid < 2) throw ConfigError("synthetic.grid must be >= 2");
    const i64 side_per_patch = [&] {
        const i64 ch = spec.patch_dim / 3;
        const i64 s = i64(std::llround(std::sqrt(double(ch))));
        if (3 * s * s != spec.patch_dim)
            throw ConfigError("synthetic.patch_dim must be 3*s^2 for integer s");
        return s;
    }();
    const i64 side = spec.grid * side_per_patch;

    ImageSet set;
    set.grid = spec.grid;
    set.patch_dim = spec.patch_dim;
    Rng rng(spec.seed);
    const i64 tokens = spec.grid * spec.grid;

    for (i64 img = 0; img < spec.count; ++img) {
        const i64 cls = img % spec.classes;
        Rng r = rng.fork(std::uint64_t(img) * 131 + 7);
        const double p0 = r.uniform(), p1 = r.uniform(), p2 = r.uniform();
        if (!spec.class_filter.empty()) {
            bool keep = false;
            for (i64 want : spec.class_filter) keep |= want == cls;
            if (!keep) continue;
        }
        std::vector<double> img_patches(std::size_t(tokens * spec.patch_dim), 0.0);
        for (i64 py = 0; py < side; ++py) {
            for (i64 px = 0; px < side; ++px) {
                const double u = (double(px) + 0.5) / double(side);
                const double v = (double(py) + 0.5) / double(side);
                const i64 gx = px / side_per_patch, gy = py / side_per_patch;
                const i64 lx = px % side_per_patch, ly = py % side_per_patch;
                const i64 patch = gy * spec.grid + gx;
                for (int c = 0; c < 3; ++c) {
                    const double val = texture_value(cls, u, v, p0, p1, p2, c);
                    const i64 off = patch * spec.patch_dim +
                                    (ly * side_per_patch + lx) * 3 + c;
                    img_patches[std::size_t(off)] = val;
                }
            }
        }
        set.patches.insert(set.patches.end(), img_patches.begin(), img_patches.end());
        set.labels.push_back(cls);
        ++set.count;
    }
    if (set.count == 0) throw DataError("class filter removed every synthetic image");
    return set;
}

std::vector<i64> images_with_label(const ImageSet& set, i64 label) {
    std::vector<i64> out;
    for (i64 i = 0; i < set.count; ++i)
        if (set.labels[i] == label) out.push_back(i);
    return out;
}

}  // namespace elt
