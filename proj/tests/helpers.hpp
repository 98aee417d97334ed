// Shared test utilities: random tensors, finite differences, and an
// independent dense reference implementation of the transformer forward
// pass (plain loops, no Graph) used as the micro-forward oracle.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "sycoca/sycoca.hpp"

namespace testutil {

using sycoca::Mat;
using sycoca::Rng;

inline Mat<double> random_mat(Rng& rng, int r, int c, double scale = 1.0) {
    Mat<double> m(r, c);
    for (auto& v : m.a) v = rng.normal(0.0, scale);
    return m;
}

inline double dot_all(const Mat<double>& a, const Mat<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.a.size(); ++i) s += a.a[i] * b.a[i];
    return s;
}

// Central finite difference of f over every element of x.
inline Mat<double> fd_grad(Mat<double>& x, const std::function<double()>& f, double h = 1e-6) {
    Mat<double> g(x.rows, x.cols);
    for (std::size_t i = 0; i < x.a.size(); ++i) {
        const double keep = x.a[i];
        x.a[i] = keep + h;
        const double up = f();
        x.a[i] = keep - h;
        const double dn = f();
        x.a[i] = keep;
        g.a[i] = (up - dn) / (2 * h);
    }
    return g;
}

inline double max_abs_diff(const Mat<double>& a, const Mat<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.a.size(); ++i) m = std::max(m, std::abs(a.a[i] - b.a[i]));
    return m;
}

inline double max_abs(const Mat<double>& a) {
    double m = 0;
    for (const double v : a.a) m = std::max(m, std::abs(v));
    return m;
}

// Array-level relative error: ||a - f||_inf / max(||a||_inf, ||f||_inf, floor).
inline double rel_err(const Mat<double>& analytic, const Mat<double>& fd, double floor = 1e-8) {
    const double denom = std::max({max_abs(analytic), max_abs(fd), floor});
    return max_abs_diff(analytic, fd) / denom;
}

// ----- independent dense reference forward (the oracle path) -----

namespace ref {

inline Mat<double> linear(const Mat<double>& x, const Mat<double>& w, const Mat<double>* b) {
    Mat<double> y(x.rows, w.cols);
    for (int i = 0; i < x.rows; ++i)
        for (int j = 0; j < w.cols; ++j) {
            double s = b ? b->at(0, j) : 0.0;
            for (int k = 0; k < x.cols; ++k) s += x.at(i, k) * w.at(k, j);
            y.at(i, j) = s;
        }
    return y;
}

inline Mat<double> layernorm(const Mat<double>& x, const Mat<double>& g, const Mat<double>& b,
                             double eps = 1e-5) {
    Mat<double> y(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        double mean = 0;
        for (int j = 0; j < x.cols; ++j) mean += x.at(i, j);
        mean /= x.cols;
        double var = 0;
        for (int j = 0; j < x.cols; ++j) var += (x.at(i, j) - mean) * (x.at(i, j) - mean);
        var /= x.cols;
        for (int j = 0; j < x.cols; ++j)
            y.at(i, j) = (x.at(i, j) - mean) / std::sqrt(var + eps) * g.at(0, j) + b.at(0, j);
    }
    return y;
}

inline double gelu1(double v) { return v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0))); }

inline Mat<double> attention(const Mat<double>& q_in, const Mat<double>& kv_in,
                             const sycoca::AttnParams<double>& a, int n_heads,
                             const std::vector<std::uint8_t>& allowed) {
    const Mat<double> q = linear(q_in, a.wq, &a.bq);
    const Mat<double> k = linear(kv_in, a.wk, &a.bk);
    const Mat<double> v = linear(kv_in, a.wv, &a.bv);
    const int d = q.cols, dh = d / n_heads;
    const int lq = q.rows, lk = k.rows;
    Mat<double> merged(lq, d);
    for (int h = 0; h < n_heads; ++h) {
        for (int i = 0; i < lq; ++i) {
            std::vector<double> scores(static_cast<std::size_t>(lk),
                                       -std::numeric_limits<double>::infinity());
            for (int j = 0; j < lk; ++j) {
                if (!allowed.empty() && !allowed[static_cast<std::size_t>(i) * lk + j]) continue;
                double s = 0;
                for (int c = 0; c < dh; ++c) s += q.at(i, h * dh + c) * k.at(j, h * dh + c);
                scores[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(dh));
            }
            double mx = -std::numeric_limits<double>::infinity();
            for (double s : scores) mx = std::max(mx, s);
            double denom = 0;
            for (double& s : scores) {
                s = std::isinf(s) ? 0.0 : std::exp(s - mx);
                denom += s;
            }
            for (int c = 0; c < dh; ++c) {
                double acc = 0;
                for (int j = 0; j < lk; ++j)
                    acc += scores[static_cast<std::size_t>(j)] / denom * v.at(j, h * dh + c);
                merged.at(i, h * dh + c) = acc;
            }
        }
    }
    return linear(merged, a.wo, &a.bo);
}

inline Mat<double> block(const Mat<double>& x_in, const Mat<double>* memory,
                         const sycoca::BlockParams<double>& b, int n_heads,
                         const std::vector<std::uint8_t>& self_allowed,
                         const std::vector<std::uint8_t>& cross_allowed, bool use_cross) {
    Mat<double> x = x_in;
    Mat<double> h = attention(layernorm(x, b.ln1_g, b.ln1_b), layernorm(x, b.ln1_g, b.ln1_b),
                              b.self, n_heads, self_allowed);
    for (std::size_t i = 0; i < x.a.size(); ++i) x.a[i] += h.a[i];
    if (b.has_cross && use_cross && memory) {
        h = attention(layernorm(x, b.lnx_g, b.lnx_b), *memory, b.cross, n_heads, cross_allowed);
        for (std::size_t i = 0; i < x.a.size(); ++i) x.a[i] += h.a[i];
    }
    Mat<double> m = linear(layernorm(x, b.ln2_g, b.ln2_b), b.w1, &b.b1);
    for (auto& v : m.a) v = gelu1(v);
    m = linear(m, b.w2, &b.b2);
    for (std::size_t i = 0; i < x.a.size(); ++i) x.a[i] += m.a[i];
    return x;
}

// Full reference image-encoder forward.
inline Mat<double> encode_image(const sycoca::Parameters<double>& p, const sycoca::PatchGrid& grid,
                                const sycoca::MaskMap* mask) {
    Mat<double> x = linear(sycoca::widen<double>(grid.patches), p.patch_proj_w, &p.patch_proj_b);
    if (mask)
        for (int r = 0; r < x.rows; ++r)
            if (mask->bits[static_cast<std::size_t>(r)])
                for (int c = 0; c < x.cols; ++c) x.at(r, c) = p.mask_token.at(0, c);
    Mat<double> seq(x.rows + 1, x.cols);
    for (int c = 0; c < x.cols; ++c) seq.at(0, c) = p.img_cls.at(0, c);
    for (int r = 0; r < x.rows; ++r)
        for (int c = 0; c < x.cols; ++c) seq.at(r + 1, c) = x.at(r, c);
    for (int r = 0; r < seq.rows; ++r)
        for (int c = 0; c < seq.cols; ++c) seq.at(r, c) += p.img_pos.at(r, c);
    for (const auto& b : p.img_enc) seq = block(seq, nullptr, b, p.cfg.n_heads, {}, {}, false);
    return layernorm(seq, p.img_enc_fln_g, p.img_enc_fln_b);
}

inline Mat<double> encode_text(const sycoca::Parameters<double>& p,
                               const sycoca::TokenSequence& seq) {
    Mat<double> x(seq.max_len(), p.cfg.d_model);
    for (int r = 0; r < x.rows; ++r)
        for (int c = 0; c < x.cols; ++c)
            x.at(r, c) = p.tok_emb.at(seq.ids[static_cast<std::size_t>(r)], c) + p.txt_pos.at(r, c);
    const auto allowed = sycoca::causal_pad_bitmap(seq.pad_mask);
    for (const auto& b : p.txt_enc) x = block(x, nullptr, b, p.cfg.n_heads, allowed, {}, false);
    return layernorm(x, p.txt_enc_fln_g, p.txt_enc_fln_b);
}

inline Mat<double> decode_image_pixels(const sycoca::Parameters<double>& p,
                                       const Mat<double>& image_hidden,
                                       const Mat<double>& text_memory,
                                       const std::vector<std::uint8_t>& text_keep,
                                       bool use_cross) {
    Mat<double> x = image_hidden;
    const auto cross_allowed = sycoca::cross_keep_bitmap(x.rows, text_keep);
    for (const auto& b : p.img_dec)
        x = block(x, &text_memory, b, p.cfg.n_heads, {}, cross_allowed, use_cross);
    x = layernorm(x, p.img_dec_fln_g, p.img_dec_fln_b);
    Mat<double> patches(x.rows - 1, x.cols);
    for (int r = 1; r < x.rows; ++r)
        for (int c = 0; c < x.cols; ++c) patches.at(r - 1, c) = x.at(r, c);
    return linear(patches, p.pixel_head_w, &p.pixel_head_b);
}

}  // namespace ref

// Micro model configuration used by oracle and gradient tests.
inline sycoca::ModelConfig micro_config() {
    sycoca::ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_layers_img_enc = 1;
    cfg.n_layers_txt_enc = 1;
    cfg.n_layers_img_dec = 1;
    cfg.n_layers_txt_dec = 1;
    cfg.patch_size = 4;
    cfg.image_hw = 8;  // P = 4
    cfg.max_text_len = 8;
    cfg.vocab_size = 32;
    cfg.embed_dim = 8;
    return cfg;
}

// Random parameters at a healthy scale for numeric tests (the paper init
// is intentionally tiny; gradient tests want O(1) signals).
template <class Real>
sycoca::Parameters<Real> random_params(const sycoca::ModelConfig& cfg, std::uint64_t seed,
                                       double scale = 0.2) {
    auto p = sycoca::init_params<Real>(cfg, seed);
    Rng rng(seed ^ 0xabcdef);
    sycoca::for_each_param(p, [&](const std::string&, Mat<Real>& m, sycoca::ParamKind kind) {
        if (kind == sycoca::ParamKind::Weight || kind == sycoca::ParamKind::Embedding ||
            kind == sycoca::ParamKind::Pos)
            for (auto& v : m.a) v = static_cast<Real>(rng.normal(0.0, scale));
        else if (kind == sycoca::ParamKind::Bias)
            for (auto& v : m.a) v = static_cast<Real>(rng.normal(0.0, 0.05));
    });
    return p;
}

inline sycoca::TokenSequence toy_sequence(const std::vector<int>& content, int max_len) {
    sycoca::TokenSequence seq;
    seq.ids = {sycoca::kBosId};
    seq.ids.insert(seq.ids.end(), content.begin(), content.end());
    seq.ids.push_back(sycoca::kEosId);
    seq.ids.push_back(sycoca::kClsId);
    seq.length = static_cast<int>(seq.ids.size());
    seq.ids.resize(static_cast<std::size_t>(max_len), sycoca::kPadId);
    seq.pad_mask.assign(static_cast<std::size_t>(max_len), 0);
    for (int i = 0; i < seq.length; ++i) seq.pad_mask[static_cast<std::size_t>(i)] = 1;
    return seq;
}

inline sycoca::PatchGrid random_grid(Rng& rng, int image_hw, int patch_size) {
    sycoca::ImageTensor img(image_hw, image_hw);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    return sycoca::patchify(img, patch_size);
}

}  // namespace testutil
