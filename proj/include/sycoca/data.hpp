// Data pipeline: patchification, manifest ingestion, batching, and the
// deterministic synthetic shapes dataset that makes every test
// self-contained.
#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "sycoca/errors.hpp"
#include "sycoca/image.hpp"
#include "sycoca/mat.hpp"
#include "sycoca/rng.hpp"
#include "sycoca/tokenizer.hpp"

namespace sycoca {

struct PatchGrid {
    int patch_size = 0;
    int grid_h = 0;
    int grid_w = 0;
    Mat<float> patches;  // P x (patch_size^2 * 3), row-major over the grid

    int num_patches() const { return grid_h * grid_w; }
    int patch_dim() const { return patch_size * patch_size * 3; }
};

inline PatchGrid patchify(const ImageTensor& img, int patch_size) {
    if (patch_size <= 0 || img.h % patch_size != 0 || img.w % patch_size != 0)
        throw ConfigError("patchify: image " + std::to_string(img.h) + "x" + std::to_string(img.w) +
                          " is not a multiple of patch size " + std::to_string(patch_size));
    PatchGrid g;
    g.patch_size = patch_size;
    g.grid_h = img.h / patch_size;
    g.grid_w = img.w / patch_size;
    g.patches = Mat<float>(g.num_patches(), g.patch_dim());
    for (int gy = 0; gy < g.grid_h; ++gy)
        for (int gx = 0; gx < g.grid_w; ++gx) {
            float* dst = g.patches.row(gy * g.grid_w + gx);
            int k = 0;
            for (int py = 0; py < patch_size; ++py)
                for (int px = 0; px < patch_size; ++px)
                    for (int c = 0; c < 3; ++c)
                        dst[k++] = img.at(gy * patch_size + py, gx * patch_size + px, c);
        }
    return g;
}

inline ImageTensor unpatchify(const PatchGrid& g) {
    ImageTensor img(g.grid_h * g.patch_size, g.grid_w * g.patch_size);
    for (int gy = 0; gy < g.grid_h; ++gy)
        for (int gx = 0; gx < g.grid_w; ++gx) {
            const float* src = g.patches.row(gy * g.grid_w + gx);
            int k = 0;
            for (int py = 0; py < g.patch_size; ++py)
                for (int px = 0; px < g.patch_size; ++px)
                    for (int c = 0; c < 3; ++c)
                        img.at(gy * g.patch_size + py, gx * g.patch_size + px, c) = src[k++];
        }
    return img;
}

// --- manifests ---

struct PairRecord {
    std::string image_source;
    std::string caption;
    int id = 0;
};

inline std::vector<PairRecord> load_manifest(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open manifest: " + path);
    std::vector<PairRecord> records;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) {
            const auto tab = line.find('\t');
            if (tab == std::string::npos)
                throw FormatError("manifest line " + std::to_string(line_no) + ": expected TAB");
            records.push_back({line.substr(0, tab), line.substr(tab + 1), line_no});
        }
        ++line_no;
    }
    return records;
}

// --- synthetic shapes dataset ---

enum class ShapeKind { Circle = 0, Square = 1, Triangle = 2 };

inline constexpr int kNumShapes = 3;
inline constexpr int kNumColors = 6;
inline constexpr int kNumPositions = 4;
inline constexpr int kNumCombos = kNumShapes * kNumColors * kNumPositions;  // 72

inline const char* shape_name(int s) {
    static const char* names[] = {"circle", "square", "triangle"};
    return names[s];
}
inline const char* color_name(int c) {
    static const char* names[] = {"red", "green", "blue", "yellow", "magenta", "cyan"};
    return names[c];
}
inline std::array<float, 3> color_rgb(int c) {
    static const std::array<float, 3> rgb[] = {
        {0.90f, 0.10f, 0.10f}, {0.10f, 0.80f, 0.15f}, {0.15f, 0.20f, 0.90f},
        {0.95f, 0.85f, 0.10f}, {0.85f, 0.15f, 0.80f}, {0.10f, 0.80f, 0.85f}};
    return rgb[c];
}
inline const char* position_name(int p) {
    static const char* names[] = {"top left", "top right", "bottom left", "bottom right"};
    return names[p];
}

inline constexpr float kSyntheticBackground = 0.5f;

struct SyntheticSpec {
    int count = 0;
    int image_hw = 32;
    std::uint64_t seed = 0;
    bool exhaustive = false;  // combo i = item index mod 72 instead of random draw
    int patch_size = 0;       // when > 0, image_hw must be a multiple of it
};

struct SyntheticPair {
    ImageTensor image;
    std::string caption;
    int shape = 0;
    int color = 0;
    int position = 0;
};

namespace detail {

inline ImageTensor render_shape(int hw, int shape, int color, int position, Rng& rng) {
    ImageTensor img(hw, hw);
    for (auto& v : img.data) v = kSyntheticBackground;

    const float quarter = static_cast<float>(hw) / 4.f;
    float cx = (position % 2 == 0) ? quarter : 3.f * quarter;
    float cy = (position / 2 == 0) ? quarter : 3.f * quarter;
    // Jitter keeps the shape strictly inside its quadrant.
    const float jitter = quarter / 4.f;
    cx += static_cast<float>(rng.uniform(-jitter, jitter));
    cy += static_cast<float>(rng.uniform(-jitter, jitter));
    const float radius = static_cast<float>(rng.uniform(0.52, 0.68)) * (quarter - jitter);

    const auto rgb = color_rgb(color);
    for (int y = 0; y < hw; ++y)
        for (int x = 0; x < hw; ++x) {
            const float dx = static_cast<float>(x) + 0.5f - cx;
            const float dy = static_cast<float>(y) + 0.5f - cy;
            bool inside = false;
            switch (static_cast<ShapeKind>(shape)) {
                case ShapeKind::Circle:
                    inside = dx * dx + dy * dy <= radius * radius;
                    break;
                case ShapeKind::Square:
                    inside = std::abs(dx) <= radius && std::abs(dy) <= radius;
                    break;
                case ShapeKind::Triangle:
                    // Upward triangle: apex at cy - radius, base at cy + radius.
                    inside = dy >= -radius && dy <= radius &&
                             std::abs(dx) <= (dy + radius) * 0.5f;
                    break;
            }
            if (inside)
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
        }
    return img;
}

}  // namespace detail

inline std::string synthetic_caption(int shape, int color, int position) {
    return std::string("a ") + color_name(color) + " " + shape_name(shape) + " at the " +
           position_name(position);
}

inline std::vector<SyntheticPair> generate_synthetic(const SyntheticSpec& spec) {
    if (spec.count < 1) throw ConfigError("generate_synthetic: count must be >= 1");
    if (spec.image_hw < 8) throw ConfigError("generate_synthetic: image_hw must be >= 8");
    if (spec.patch_size > 0 && spec.image_hw % spec.patch_size != 0)
        throw ConfigError("generate_synthetic: image_hw " + std::to_string(spec.image_hw) +
                          " is not a multiple of patch size " + std::to_string(spec.patch_size));

    std::vector<SyntheticPair> out;
    out.reserve(spec.count);
    for (int i = 0; i < spec.count; ++i) {
        Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(i), 0x5947));
        const int combo = spec.exhaustive ? i % kNumCombos
                                          : static_cast<int>(rng.below(kNumCombos));
        const int position = combo % kNumPositions;
        const int color = (combo / kNumPositions) % kNumColors;
        const int shape = combo / (kNumPositions * kNumColors);
        SyntheticPair p;
        p.shape = shape;
        p.color = color;
        p.position = position;
        p.image = detail::render_shape(spec.image_hw, shape, color, position, rng);
        p.caption = synthetic_caption(shape, color, position);
        out.push_back(std::move(p));
    }
    return out;
}

// --- batches ---

struct Batch {
    std::vector<PatchGrid> images;
    std::vector<TokenSequence> token_seqs;
    std::vector<int> ids;

    int n() const { return static_cast<int>(images.size()); }
};

struct BatchLayout {
    int patch_size = 8;
    int image_hw = 32;
    int max_text_len = 16;
};

inline Batch make_batch(const std::vector<PairRecord>& records,
                        const std::vector<ImageTensor>& images, const Vocabulary& vocab,
                        const BatchLayout& layout) {
    if (records.size() != images.size())
        throw InputError("make_batch: records/images size mismatch");
    if (records.size() < 2)
        throw InputError("make_batch: need at least 2 pairs (contrastive loss requires negatives)");
    Batch b;
    b.images.reserve(records.size());
    b.token_seqs.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        ImageTensor img = resize_nearest(images[i], layout.image_hw, layout.image_hw);
        b.images.push_back(patchify(img, layout.patch_size));
        b.token_seqs.push_back(encode(vocab, records[i].caption, layout.max_text_len));
        b.ids.push_back(records[i].id);
    }
    return b;
}

}  // namespace sycoca
