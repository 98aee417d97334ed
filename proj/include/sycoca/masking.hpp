// Attentive masking: token-wise maximum image-text similarity scores and
// the top-/bottom-k mask construction. Scores drive discrete selection
// only, so everything here works on detached values.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "sycoca/errors.hpp"
#include "sycoca/mat.hpp"
#include "sycoca/rng.hpp"

namespace sycoca {

struct PatchScores {
    std::vector<double> scores;  // one per patch, in [-1, 1]
    int size() const { return static_cast<int>(scores.size()); }
};

enum class MaskKind { High, Low };

struct MaskMap {
    std::vector<std::uint8_t> bits;
    MaskKind kind = MaskKind::High;

    int popcount() const {
        int n = 0;
        for (auto b : bits) n += b ? 1 : 0;
        return n;
    }
};

// s_i = max over kept text tokens j of <v_i / ||v_i||, w_j / ||w_j||>.
template <class Real>
PatchScores patch_scores(const Mat<Real>& image_tokens, const Mat<Real>& text_tokens,
                         const std::vector<std::uint8_t>& text_keep) {
    if (static_cast<int>(text_keep.size()) != text_tokens.rows)
        throw InputError("patch_scores: text_keep length mismatch");
    if (image_tokens.cols != text_tokens.cols)
        throw InputError("patch_scores: embedding width mismatch");
    std::vector<int> kept;
    for (int j = 0; j < text_tokens.rows; ++j)
        if (text_keep[static_cast<std::size_t>(j)]) kept.push_back(j);
    if (kept.empty()) throw InputError("patch_scores: no kept text tokens");

    const int d = image_tokens.cols;
    constexpr double eps = 1e-8;
    auto norm_of = [d](const Real* v) {
        double sq = 0;
        for (int c = 0; c < d; ++c) sq += static_cast<double>(v[c]) * static_cast<double>(v[c]);
        return std::sqrt(sq);
    };

    std::vector<double> text_inv(kept.size());
    for (std::size_t t = 0; t < kept.size(); ++t)
        text_inv[t] = 1.0 / std::max(norm_of(text_tokens.row(kept[t])), eps);

    PatchScores out;
    out.scores.resize(static_cast<std::size_t>(image_tokens.rows));
    for (int i = 0; i < image_tokens.rows; ++i) {
        const Real* vi = image_tokens.row(i);
        const double vi_inv = 1.0 / std::max(norm_of(vi), eps);
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < kept.size(); ++t) {
            const Real* wj = text_tokens.row(kept[t]);
            double dot = 0;
            for (int c = 0; c < d; ++c)
                dot += static_cast<double>(vi[c]) * static_cast<double>(wj[c]);
            best = std::max(best, dot * vi_inv * text_inv[t]);
        }
        out.scores[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

namespace detail {

inline void check_ratios(double r_h, double r_l) {
    if (r_h < 0 || r_l < 0 || r_h > 1 || r_l > 1)
        throw ConfigError("masking ratios must lie in [0, 1]");
    if (r_h + r_l > 1.0 + 1e-12) throw ConfigError("masking ratios must satisfy r_h + r_l <= 1");
}

// round() is half-away-from-zero; k_h first, k_l capped at P - k_h.
inline std::pair<int, int> mask_counts(int p, double r_h, double r_l) {
    const int k_h = static_cast<int>(std::llround(r_h * p));
    const int k_l = std::min(static_cast<int>(std::llround(r_l * p)), p - k_h);
    return {k_h, k_l};
}

}  // namespace detail

// High marks the k_h largest scores, low the k_l smallest; ties break to
// the lower patch index, and tied boundary patches go to high first so
// the two masks are always disjoint.
inline std::pair<MaskMap, MaskMap> build_masks(const PatchScores& scores, double r_h, double r_l) {
    detail::check_ratios(r_h, r_l);
    const int p = scores.size();
    if (p < 1) throw InputError("build_masks: need at least one patch");
    const auto [k_h, k_l] = detail::mask_counts(p, r_h, r_l);

    std::vector<int> order(static_cast<std::size_t>(p));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores.scores[a] != scores.scores[b]) return scores.scores[a] > scores.scores[b];
        return a < b;
    });

    MaskMap high{std::vector<std::uint8_t>(static_cast<std::size_t>(p), 0), MaskKind::High};
    MaskMap low{std::vector<std::uint8_t>(static_cast<std::size_t>(p), 0), MaskKind::Low};
    for (int i = 0; i < k_h; ++i) high.bits[static_cast<std::size_t>(order[i])] = 1;

    std::vector<int> ascending(static_cast<std::size_t>(p));
    std::iota(ascending.begin(), ascending.end(), 0);
    std::sort(ascending.begin(), ascending.end(), [&](int a, int b) {
        if (scores.scores[a] != scores.scores[b]) return scores.scores[a] < scores.scores[b];
        return a < b;
    });
    int taken = 0;
    for (int idx : ascending) {
        if (taken == k_l) break;
        if (high.bits[static_cast<std::size_t>(idx)]) continue;
        low.bits[static_cast<std::size_t>(idx)] = 1;
        ++taken;
    }
    return {std::move(high), std::move(low)};
}

inline std::pair<MaskMap, MaskMap> random_masks(int p, double r_h, double r_l,
                                                std::uint64_t seed) {
    detail::check_ratios(r_h, r_l);
    if (p < 1) throw InputError("random_masks: need at least one patch");
    const auto [k_h, k_l] = detail::mask_counts(p, r_h, r_l);
    std::vector<int> perm(static_cast<std::size_t>(p));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(mix_seed(seed, 0x6d61736b, 0));
    rng.shuffle(perm);
    MaskMap high{std::vector<std::uint8_t>(static_cast<std::size_t>(p), 0), MaskKind::High};
    MaskMap low{std::vector<std::uint8_t>(static_cast<std::size_t>(p), 0), MaskKind::Low};
    for (int i = 0; i < k_h; ++i) high.bits[static_cast<std::size_t>(perm[i])] = 1;
    for (int i = 0; i < k_l; ++i) low.bits[static_cast<std::size_t>(perm[k_h + i])] = 1;
    return {std::move(high), std::move(low)};
}

}  // namespace sycoca
