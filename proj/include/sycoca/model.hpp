// The four networks: image encoder, causal text encoder, image decoder
// (pixel head), text decoder (token head), plus the contrastive
// projections and the learnable logit scale. Forward passes are built on
// the Graph tape; the value-level wrappers at the bottom run the same
// builders on a non-recording graph.
//
// Conventions: pre-LN blocks, learned absolute positions, erf-GELU MLPs
// with 4x hidden width, a final LayerNorm per stack. Masked patches keep
// their positional embedding and have the projected patch replaced by a
// learned MASK token before the encoder runs.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sycoca/config.hpp"
#include "sycoca/data.hpp"
#include "sycoca/errors.hpp"
#include "sycoca/graph.hpp"
#include "sycoca/masking.hpp"
#include "sycoca/mat.hpp"
#include "sycoca/rng.hpp"
#include "sycoca/tokenizer.hpp"

namespace sycoca {

inline constexpr double kInitStd = 0.01;
inline constexpr double kLogitScaleCap = 100.0;

enum class ParamKind { Weight, Bias, Gain, Pos, Embedding, LogitScale };

template <class Real>
struct AttnParams {
    Mat<Real> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class Real>
struct BlockParams {
    Mat<Real> ln1_g, ln1_b;
    AttnParams<Real> self;
    bool has_cross = false;
    Mat<Real> lnx_g, lnx_b;
    AttnParams<Real> cross;
    Mat<Real> ln2_g, ln2_b;
    Mat<Real> w1, b1, w2, b2;
};

template <class Real>
struct Parameters {
    ModelConfig cfg;

    Mat<Real> patch_proj_w, patch_proj_b;
    Mat<Real> img_cls, mask_token, img_pos;
    Mat<Real> tok_emb, txt_pos;
    std::vector<BlockParams<Real>> img_enc, txt_enc, img_dec, txt_dec;
    Mat<Real> img_enc_fln_g, img_enc_fln_b;
    Mat<Real> txt_enc_fln_g, txt_enc_fln_b;
    Mat<Real> img_dec_fln_g, img_dec_fln_b;
    Mat<Real> txt_dec_fln_g, txt_dec_fln_b;
    Mat<Real> proj_img_w, proj_txt_w;
    Mat<Real> log_logit_scale;
    Mat<Real> pixel_head_w, pixel_head_b;
    Mat<Real> token_head_w, token_head_b;
};

namespace detail {

template <class Real>
void alloc_block(BlockParams<Real>& b, const ModelConfig& cfg, bool cross) {
    const int d = cfg.d_model, f = cfg.mlp_dim();
    auto attn = [&](AttnParams<Real>& a) {
        a.wq = Mat<Real>(d, d);
        a.bq = Mat<Real>(1, d);
        a.wk = Mat<Real>(d, d);
        a.bk = Mat<Real>(1, d);
        a.wv = Mat<Real>(d, d);
        a.bv = Mat<Real>(1, d);
        a.wo = Mat<Real>(d, d);
        a.bo = Mat<Real>(1, d);
    };
    b.ln1_g = Mat<Real>(1, d);
    b.ln1_b = Mat<Real>(1, d);
    attn(b.self);
    b.has_cross = cross;
    if (cross) {
        b.lnx_g = Mat<Real>(1, d);
        b.lnx_b = Mat<Real>(1, d);
        attn(b.cross);
    }
    b.ln2_g = Mat<Real>(1, d);
    b.ln2_b = Mat<Real>(1, d);
    b.w1 = Mat<Real>(d, f);
    b.b1 = Mat<Real>(1, f);
    b.w2 = Mat<Real>(f, d);
    b.b2 = Mat<Real>(1, d);
}

}  // namespace detail

// Allocates every array at its config-determined shape, zero-filled.
template <class Real>
Parameters<Real> make_parameters(const ModelConfig& cfg) {
    cfg.validate();
    Parameters<Real> p;
    p.cfg = cfg;
    const int d = cfg.d_model;
    p.patch_proj_w = Mat<Real>(cfg.patch_dim(), d);
    p.patch_proj_b = Mat<Real>(1, d);
    p.img_cls = Mat<Real>(1, d);
    p.mask_token = Mat<Real>(1, d);
    p.img_pos = Mat<Real>(cfg.num_patches() + 1, d);
    p.tok_emb = Mat<Real>(cfg.vocab_size, d);
    p.txt_pos = Mat<Real>(cfg.max_text_len, d);
    p.img_enc.resize(cfg.n_layers_img_enc);
    p.txt_enc.resize(cfg.n_layers_txt_enc);
    p.img_dec.resize(cfg.n_layers_img_dec);
    p.txt_dec.resize(cfg.n_layers_txt_dec);
    for (auto& b : p.img_enc) detail::alloc_block(b, cfg, false);
    for (auto& b : p.txt_enc) detail::alloc_block(b, cfg, false);
    for (auto& b : p.img_dec) detail::alloc_block(b, cfg, true);
    for (auto& b : p.txt_dec) detail::alloc_block(b, cfg, true);
    p.img_enc_fln_g = Mat<Real>(1, d);
    p.img_enc_fln_b = Mat<Real>(1, d);
    p.txt_enc_fln_g = Mat<Real>(1, d);
    p.txt_enc_fln_b = Mat<Real>(1, d);
    p.img_dec_fln_g = Mat<Real>(1, d);
    p.img_dec_fln_b = Mat<Real>(1, d);
    p.txt_dec_fln_g = Mat<Real>(1, d);
    p.txt_dec_fln_b = Mat<Real>(1, d);
    p.proj_img_w = Mat<Real>(d, cfg.embed_dim);
    p.proj_txt_w = Mat<Real>(d, cfg.embed_dim);
    p.log_logit_scale = Mat<Real>(1, 1);
    p.pixel_head_w = Mat<Real>(d, cfg.patch_dim());
    p.pixel_head_b = Mat<Real>(1, cfg.patch_dim());
    p.token_head_w = Mat<Real>(d, cfg.vocab_size);
    p.token_head_b = Mat<Real>(1, cfg.vocab_size);
    return p;
}

// Visits every array in a fixed order (checkpoint layout, optimizer slot
// alignment, and the init RNG stream all depend on it).
template <class Real, class Fn>
void for_each_param(Parameters<Real>& p, Fn&& fn) {
    fn("img.patch_proj.w", p.patch_proj_w, ParamKind::Weight);
    fn("img.patch_proj.b", p.patch_proj_b, ParamKind::Bias);
    fn("img.cls", p.img_cls, ParamKind::Embedding);
    fn("img.mask_token", p.mask_token, ParamKind::Embedding);
    fn("img.pos", p.img_pos, ParamKind::Pos);
    fn("txt.tok_emb", p.tok_emb, ParamKind::Embedding);
    fn("txt.pos", p.txt_pos, ParamKind::Pos);
    auto stack = [&](const char* prefix, std::vector<BlockParams<Real>>& blocks) {
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            BlockParams<Real>& b = blocks[i];
            const std::string base = std::string(prefix) + "." + std::to_string(i) + ".";
            fn(base + "ln1.g", b.ln1_g, ParamKind::Gain);
            fn(base + "ln1.b", b.ln1_b, ParamKind::Bias);
            auto attn = [&](const std::string& abase, AttnParams<Real>& a) {
                fn(abase + "wq", a.wq, ParamKind::Weight);
                fn(abase + "bq", a.bq, ParamKind::Bias);
                fn(abase + "wk", a.wk, ParamKind::Weight);
                fn(abase + "bk", a.bk, ParamKind::Bias);
                fn(abase + "wv", a.wv, ParamKind::Weight);
                fn(abase + "bv", a.bv, ParamKind::Bias);
                fn(abase + "wo", a.wo, ParamKind::Weight);
                fn(abase + "bo", a.bo, ParamKind::Bias);
            };
            attn(base + "attn.", b.self);
            if (b.has_cross) {
                fn(base + "lnx.g", b.lnx_g, ParamKind::Gain);
                fn(base + "lnx.b", b.lnx_b, ParamKind::Bias);
                attn(base + "xattn.", b.cross);
            }
            fn(base + "ln2.g", b.ln2_g, ParamKind::Gain);
            fn(base + "ln2.b", b.ln2_b, ParamKind::Bias);
            fn(base + "mlp.w1", b.w1, ParamKind::Weight);
            fn(base + "mlp.b1", b.b1, ParamKind::Bias);
            fn(base + "mlp.w2", b.w2, ParamKind::Weight);
            fn(base + "mlp.b2", b.b2, ParamKind::Bias);
        }
    };
    stack("img_enc", p.img_enc);
    stack("txt_enc", p.txt_enc);
    stack("img_dec", p.img_dec);
    stack("txt_dec", p.txt_dec);
    fn("img_enc.final_ln.g", p.img_enc_fln_g, ParamKind::Gain);
    fn("img_enc.final_ln.b", p.img_enc_fln_b, ParamKind::Bias);
    fn("txt_enc.final_ln.g", p.txt_enc_fln_g, ParamKind::Gain);
    fn("txt_enc.final_ln.b", p.txt_enc_fln_b, ParamKind::Bias);
    fn("img_dec.final_ln.g", p.img_dec_fln_g, ParamKind::Gain);
    fn("img_dec.final_ln.b", p.img_dec_fln_b, ParamKind::Bias);
    fn("txt_dec.final_ln.g", p.txt_dec_fln_g, ParamKind::Gain);
    fn("txt_dec.final_ln.b", p.txt_dec_fln_b, ParamKind::Bias);
    fn("proj.img.w", p.proj_img_w, ParamKind::Weight);
    fn("proj.txt.w", p.proj_txt_w, ParamKind::Weight);
    fn("log_logit_scale", p.log_logit_scale, ParamKind::LogitScale);
    fn("head.pixel.w", p.pixel_head_w, ParamKind::Weight);
    fn("head.pixel.b", p.pixel_head_b, ParamKind::Bias);
    fn("head.token.w", p.token_head_w, ParamKind::Weight);
    fn("head.token.b", p.token_head_b, ParamKind::Bias);
}

template <class Real>
struct ParamEntry {
    std::string name;
    Mat<Real>* mat;
    ParamKind kind;
};

template <class Real>
std::vector<ParamEntry<Real>> param_entries(Parameters<Real>& p) {
    std::vector<ParamEntry<Real>> out;
    for_each_param(p, [&](const std::string& name, Mat<Real>& m, ParamKind k) {
        out.push_back({name, &m, k});
    });
    return out;
}

template <class Real>
Parameters<Real> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    Parameters<Real> p = make_parameters<Real>(cfg);
    Rng rng(mix_seed(seed, 0x1417, 0));
    for_each_param(p, [&](const std::string&, Mat<Real>& m, ParamKind kind) {
        switch (kind) {
            case ParamKind::Weight:
            case ParamKind::Embedding:
            case ParamKind::Pos:
                for (auto& v : m.a) v = static_cast<Real>(rng.normal(0.0, kInitStd));
                break;
            case ParamKind::Gain:
                m.fill(Real(1));
                break;
            case ParamKind::Bias:
                break;  // zero
            case ParamKind::LogitScale:
                m.at(0, 0) = static_cast<Real>(std::log(cfg.init_logit_scale));
                break;
        }
    });
    return p;
}

// ----- parameter references for graph building -----

template <class Real>
struct AttnRefs {
    PRef<Real> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class Real>
struct BlockRefs {
    PRef<Real> ln1_g, ln1_b;
    AttnRefs<Real> self;
    bool has_cross = false;
    PRef<Real> lnx_g, lnx_b;
    AttnRefs<Real> cross;
    PRef<Real> ln2_g, ln2_b;
    PRef<Real> w1, b1, w2, b2;
};

template <class Real>
struct ModelRefs {
    const ModelConfig* cfg = nullptr;
    PRef<Real> patch_proj_w, patch_proj_b;
    PRef<Real> img_cls, mask_token, img_pos;
    PRef<Real> tok_emb, txt_pos;
    std::vector<BlockRefs<Real>> img_enc, txt_enc, img_dec, txt_dec;
    PRef<Real> img_enc_fln_g, img_enc_fln_b;
    PRef<Real> txt_enc_fln_g, txt_enc_fln_b;
    PRef<Real> img_dec_fln_g, img_dec_fln_b;
    PRef<Real> txt_dec_fln_g, txt_dec_fln_b;
    PRef<Real> proj_img_w, proj_txt_w;
    PRef<Real> log_logit_scale;
    PRef<Real> pixel_head_w, pixel_head_b;
    PRef<Real> token_head_w, token_head_b;
};

// grads may be null (inference / value-level wrappers).
template <class Real>
ModelRefs<Real> bind_model(const Parameters<Real>& p, Parameters<Real>* g) {
    auto bind = [&](const Mat<Real>& v, Mat<Real>* gm) -> PRef<Real> { return {&v, gm}; };
    auto opt = [&](Mat<Real> Parameters<Real>::* m) -> Mat<Real>* { return g ? &(g->*m) : nullptr; };
    ModelRefs<Real> r;
    r.cfg = &p.cfg;
    r.patch_proj_w = bind(p.patch_proj_w, opt(&Parameters<Real>::patch_proj_w));
    r.patch_proj_b = bind(p.patch_proj_b, opt(&Parameters<Real>::patch_proj_b));
    r.img_cls = bind(p.img_cls, opt(&Parameters<Real>::img_cls));
    r.mask_token = bind(p.mask_token, opt(&Parameters<Real>::mask_token));
    r.img_pos = bind(p.img_pos, opt(&Parameters<Real>::img_pos));
    r.tok_emb = bind(p.tok_emb, opt(&Parameters<Real>::tok_emb));
    r.txt_pos = bind(p.txt_pos, opt(&Parameters<Real>::txt_pos));
    auto bind_attn = [&](const AttnParams<Real>& a, AttnParams<Real>* ag) {
        AttnRefs<Real> ar;
        ar.wq = bind(a.wq, ag ? &ag->wq : nullptr);
        ar.bq = bind(a.bq, ag ? &ag->bq : nullptr);
        ar.wk = bind(a.wk, ag ? &ag->wk : nullptr);
        ar.bk = bind(a.bk, ag ? &ag->bk : nullptr);
        ar.wv = bind(a.wv, ag ? &ag->wv : nullptr);
        ar.bv = bind(a.bv, ag ? &ag->bv : nullptr);
        ar.wo = bind(a.wo, ag ? &ag->wo : nullptr);
        ar.bo = bind(a.bo, ag ? &ag->bo : nullptr);
        return ar;
    };
    auto bind_stack = [&](const std::vector<BlockParams<Real>>& blocks,
                          std::vector<BlockParams<Real>>* gblocks) {
        std::vector<BlockRefs<Real>> out(blocks.size());
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const BlockParams<Real>& b = blocks[i];
            BlockParams<Real>* bg = gblocks ? &(*gblocks)[i] : nullptr;
            BlockRefs<Real>& br = out[i];
            br.ln1_g = bind(b.ln1_g, bg ? &bg->ln1_g : nullptr);
            br.ln1_b = bind(b.ln1_b, bg ? &bg->ln1_b : nullptr);
            br.self = bind_attn(b.self, bg ? &bg->self : nullptr);
            br.has_cross = b.has_cross;
            if (b.has_cross) {
                br.lnx_g = bind(b.lnx_g, bg ? &bg->lnx_g : nullptr);
                br.lnx_b = bind(b.lnx_b, bg ? &bg->lnx_b : nullptr);
                br.cross = bind_attn(b.cross, bg ? &bg->cross : nullptr);
            }
            br.ln2_g = bind(b.ln2_g, bg ? &bg->ln2_g : nullptr);
            br.ln2_b = bind(b.ln2_b, bg ? &bg->ln2_b : nullptr);
            br.w1 = bind(b.w1, bg ? &bg->w1 : nullptr);
            br.b1 = bind(b.b1, bg ? &bg->b1 : nullptr);
            br.w2 = bind(b.w2, bg ? &bg->w2 : nullptr);
            br.b2 = bind(b.b2, bg ? &bg->b2 : nullptr);
        }
        return out;
    };
    r.img_enc = bind_stack(p.img_enc, g ? &g->img_enc : nullptr);
    r.txt_enc = bind_stack(p.txt_enc, g ? &g->txt_enc : nullptr);
    r.img_dec = bind_stack(p.img_dec, g ? &g->img_dec : nullptr);
    r.txt_dec = bind_stack(p.txt_dec, g ? &g->txt_dec : nullptr);
    r.img_enc_fln_g = bind(p.img_enc_fln_g, opt(&Parameters<Real>::img_enc_fln_g));
    r.img_enc_fln_b = bind(p.img_enc_fln_b, opt(&Parameters<Real>::img_enc_fln_b));
    r.txt_enc_fln_g = bind(p.txt_enc_fln_g, opt(&Parameters<Real>::txt_enc_fln_g));
    r.txt_enc_fln_b = bind(p.txt_enc_fln_b, opt(&Parameters<Real>::txt_enc_fln_b));
    r.img_dec_fln_g = bind(p.img_dec_fln_g, opt(&Parameters<Real>::img_dec_fln_g));
    r.img_dec_fln_b = bind(p.img_dec_fln_b, opt(&Parameters<Real>::img_dec_fln_b));
    r.txt_dec_fln_g = bind(p.txt_dec_fln_g, opt(&Parameters<Real>::txt_dec_fln_g));
    r.txt_dec_fln_b = bind(p.txt_dec_fln_b, opt(&Parameters<Real>::txt_dec_fln_b));
    r.proj_img_w = bind(p.proj_img_w, opt(&Parameters<Real>::proj_img_w));
    r.proj_txt_w = bind(p.proj_txt_w, opt(&Parameters<Real>::proj_txt_w));
    r.log_logit_scale = bind(p.log_logit_scale, opt(&Parameters<Real>::log_logit_scale));
    r.pixel_head_w = bind(p.pixel_head_w, opt(&Parameters<Real>::pixel_head_w));
    r.pixel_head_b = bind(p.pixel_head_b, opt(&Parameters<Real>::pixel_head_b));
    r.token_head_w = bind(p.token_head_w, opt(&Parameters<Real>::token_head_w));
    r.token_head_b = bind(p.token_head_b, opt(&Parameters<Real>::token_head_b));
    return r;
}

// ----- attention bitmaps -----

// allowed[q * Lk + k] != 0 means query q may attend key k; the empty
// vector means everything is allowed.
inline std::vector<std::uint8_t> causal_pad_bitmap(const std::vector<std::uint8_t>& pad_mask) {
    const int L = static_cast<int>(pad_mask.size());
    std::vector<std::uint8_t> allowed(static_cast<std::size_t>(L) * L, 0);
    for (int q = 0; q < L; ++q)
        for (int k = 0; k <= q; ++k) allowed[static_cast<std::size_t>(q) * L + k] = pad_mask[k];
    // PAD queries still need one legal key for a well-defined softmax row;
    // position 0 (BOS) is always real and causally visible.
    for (int q = 0; q < L; ++q)
        if (!pad_mask[q]) allowed[static_cast<std::size_t>(q) * L + 0] = 1;
    return allowed;
}

inline std::vector<std::uint8_t> cross_keep_bitmap(int l_q, const std::vector<std::uint8_t>& keep) {
    const int lk = static_cast<int>(keep.size());
    std::vector<std::uint8_t> allowed(static_cast<std::size_t>(l_q) * lk, 0);
    for (int q = 0; q < l_q; ++q)
        for (int k = 0; k < lk; ++k) allowed[static_cast<std::size_t>(q) * lk + k] = keep[k];
    return allowed;
}

// ----- graph builders -----

template <class Real>
Mat<Real> widen(const Mat<float>& m) {
    Mat<Real> out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.a.size(); ++i) out.a[i] = static_cast<Real>(m.a[i]);
    return out;
}

template <class Real>
typename Graph<Real>::Id attention_g(Graph<Real>& g, typename Graph<Real>::Id q_in,
                                     typename Graph<Real>::Id kv_in, const AttnRefs<Real>& a,
                                     int n_heads, const std::vector<std::uint8_t>& allowed) {
    using Id = typename Graph<Real>::Id;
    const Id Q = g.linear(q_in, a.wq, a.bq);
    const Id K = g.linear(kv_in, a.wk, a.bk);
    const Id V = g.linear(kv_in, a.wv, a.bv);
    const int d = g.val(Q).cols;
    const int dh = d / n_heads;
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
    std::vector<Id> heads;
    heads.reserve(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        const Id qh = g.cols(Q, h * dh, (h + 1) * dh);
        const Id kh = g.cols(K, h * dh, (h + 1) * dh);
        const Id vh = g.cols(V, h * dh, (h + 1) * dh);
        const Id scores = g.scale(g.matmul_nt_op(qh, kh), scale);
        const Id probs = g.softmax_rows(scores, allowed);
        heads.push_back(g.matmul(probs, vh));
    }
    const Id merged = n_heads == 1 ? heads[0] : g.concat_cols(heads);
    return g.linear(merged, a.wo, a.bo);
}

template <class Real>
typename Graph<Real>::Id block_g(Graph<Real>& g, typename Graph<Real>::Id x,
                                 typename Graph<Real>::Id memory, const BlockRefs<Real>& b,
                                 int n_heads, const std::vector<std::uint8_t>& self_allowed,
                                 const std::vector<std::uint8_t>& cross_allowed, bool use_cross) {
    auto h = g.layernorm(x, b.ln1_g, b.ln1_b);
    h = attention_g(g, h, h, b.self, n_heads, self_allowed);
    x = g.add(x, h);
    if (b.has_cross && use_cross) {
        h = g.layernorm(x, b.lnx_g, b.lnx_b);
        h = attention_g(g, h, memory, b.cross, n_heads, cross_allowed);
        x = g.add(x, h);
    }
    h = g.layernorm(x, b.ln2_g, b.ln2_b);
    h = g.linear(h, b.w1, b.b1);
    h = g.gelu(h);
    h = g.linear(h, b.w2, b.b2);
    return g.add(x, h);
}

// Output: (P+1) x d, row 0 = CLS.
template <class Real>
typename Graph<Real>::Id encode_image_g(Graph<Real>& g, const ModelRefs<Real>& r,
                                        const PatchGrid& grid, const MaskMap* mask) {
    const ModelConfig& cfg = *r.cfg;
    if (grid.num_patches() != cfg.num_patches() || grid.patch_dim() != cfg.patch_dim())
        throw ConfigError("encode_image: patch grid does not match model config");
    if (mask && static_cast<int>(mask->bits.size()) != grid.num_patches())
        throw ConfigError("encode_image: mask length does not match patch count");

    auto x = g.leaf(widen<Real>(grid.patches));
    x = g.linear(x, r.patch_proj_w, r.patch_proj_b);
    if (mask) x = g.mask_rows(x, r.mask_token, mask->bits);
    x = g.prepend_row_param(r.img_cls, x);
    x = g.add_param(x, r.img_pos);
    static const std::vector<std::uint8_t> kAll;  // bidirectional
    for (const auto& b : r.img_enc) x = block_g(g, x, x, b, cfg.n_heads, kAll, kAll, false);
    return g.layernorm(x, r.img_enc_fln_g, r.img_enc_fln_b);
}

// Output: max_text_len x d; position cls_pos() summarizes the text.
template <class Real>
typename Graph<Real>::Id encode_text_g(Graph<Real>& g, const ModelRefs<Real>& r,
                                       const TokenSequence& seq) {
    const ModelConfig& cfg = *r.cfg;
    if (seq.max_len() != cfg.max_text_len)
        throw ConfigError("encode_text: sequence length does not match model config");
    auto x = g.embed(r.tok_emb, seq.ids);
    x = g.add_param(x, r.txt_pos);
    const auto allowed = causal_pad_bitmap(seq.pad_mask);
    for (const auto& b : r.txt_enc) x = block_g(g, x, x, b, cfg.n_heads, allowed, {}, false);
    return g.layernorm(x, r.txt_enc_fln_g, r.txt_enc_fln_b);
}

// Projects one row of a hidden sequence into the joint space (unit norm).
template <class Real>
typename Graph<Real>::Id project_row_g(Graph<Real>& g, typename Graph<Real>::Id seq, int row,
                                       PRef<Real> proj_w) {
    auto v = g.rows(seq, row, row + 1);
    v = g.linear(v, proj_w, PRef<Real>{});
    return g.l2norm_rows(v);
}

// Text decoder: causal self-attention over the text encoder's hidden
// states, cross-attention restricted to kept image-memory slots, token
// head on every position.
template <class Real>
typename Graph<Real>::Id decode_text_logits_g(Graph<Real>& g, const ModelRefs<Real>& r,
                                              typename Graph<Real>::Id text_hidden,
                                              typename Graph<Real>::Id image_memory,
                                              const std::vector<std::uint8_t>& memory_keep,
                                              const std::vector<std::uint8_t>& text_pad_mask) {
    const ModelConfig& cfg = *r.cfg;
    if (static_cast<int>(memory_keep.size()) != g.val(image_memory).rows)
        throw ConfigError("decode_text_logits: memory_keep length mismatch");
    bool any = false;
    for (auto k : memory_keep) any = any || k;
    if (!any) throw InputError("decode_text_logits: memory_keep excludes every memory slot");

    const auto self_allowed = causal_pad_bitmap(text_pad_mask);
    const auto cross_allowed = cross_keep_bitmap(g.val(text_hidden).rows, memory_keep);
    auto x = text_hidden;
    for (const auto& b : r.txt_dec)
        x = block_g(g, x, image_memory, b, cfg.n_heads, self_allowed, cross_allowed, true);
    x = g.layernorm(x, r.txt_dec_fln_g, r.txt_dec_fln_b);
    return g.linear(x, r.token_head_w, r.token_head_b);
}

// Image decoder: bidirectional self-attention over the masked-image
// hidden states, cross-attention over non-PAD text memory (skipped
// entirely in plain-MIM mode), pixel head on the P patch rows.
template <class Real>
typename Graph<Real>::Id decode_image_pixels_g(Graph<Real>& g, const ModelRefs<Real>& r,
                                               typename Graph<Real>::Id image_hidden,
                                               typename Graph<Real>::Id text_memory,
                                               const std::vector<std::uint8_t>& text_keep,
                                               bool use_cross) {
    const ModelConfig& cfg = *r.cfg;
    if (use_cross && g.val(text_memory).cols != cfg.d_model)
        throw ConfigError("decode_image_pixels: text memory width mismatch");
    static const std::vector<std::uint8_t> kAll;
    const auto cross_allowed =
        use_cross ? cross_keep_bitmap(g.val(image_hidden).rows, text_keep)
                  : std::vector<std::uint8_t>{};
    auto x = image_hidden;
    for (const auto& b : r.img_dec)
        x = block_g(g, x, text_memory, b, cfg.n_heads, kAll, cross_allowed, use_cross);
    x = g.layernorm(x, r.img_dec_fln_g, r.img_dec_fln_b);
    x = g.rows(x, 1, cfg.num_patches() + 1);  // drop CLS
    return g.linear(x, r.pixel_head_w, r.pixel_head_b);
}

// ----- value-level wrappers (inference surface) -----

template <class Real>
Mat<Real> encode_image(const Parameters<Real>& p, const PatchGrid& grid,
                       const MaskMap* mask = nullptr) {
    Graph<Real> g(false);
    const auto refs = bind_model<Real>(p, nullptr);
    return g.val(encode_image_g(g, refs, grid, mask));
}

template <class Real>
Mat<Real> encode_text(const Parameters<Real>& p, const TokenSequence& seq) {
    Graph<Real> g(false);
    const auto refs = bind_model<Real>(p, nullptr);
    return g.val(encode_text_g(g, refs, seq));
}

template <class Real>
Mat<Real> project_image(const Parameters<Real>& p, const Mat<Real>& cls_vec) {
    Graph<Real> g(false);
    auto v = g.linear(g.leaf(cls_vec), pref(p.proj_img_w), PRef<Real>{});
    return g.val(g.l2norm_rows(v));
}

template <class Real>
Mat<Real> project_text(const Parameters<Real>& p, const Mat<Real>& cls_vec) {
    Graph<Real> g(false);
    auto v = g.linear(g.leaf(cls_vec), pref(p.proj_txt_w), PRef<Real>{});
    return g.val(g.l2norm_rows(v));
}

template <class Real>
Mat<Real> decode_text_logits(const Parameters<Real>& p, const Mat<Real>& text_hidden,
                             const Mat<Real>& image_memory,
                             const std::vector<std::uint8_t>& memory_keep,
                             const std::vector<std::uint8_t>& text_pad_mask) {
    Graph<Real> g(false);
    const auto refs = bind_model<Real>(p, nullptr);
    return g.val(decode_text_logits_g(g, refs, g.leaf(text_hidden), g.leaf(image_memory),
                                      memory_keep, text_pad_mask));
}

template <class Real>
Mat<Real> decode_image_pixels(const Parameters<Real>& p, const Mat<Real>& image_hidden,
                              const Mat<Real>& text_memory,
                              const std::vector<std::uint8_t>& text_keep, bool use_cross = true) {
    Graph<Real> g(false);
    const auto refs = bind_model<Real>(p, nullptr);
    return g.val(decode_image_pixels_g(g, refs, g.leaf(image_hidden), g.leaf(text_memory),
                                       text_keep, use_cross));
}

}  // namespace sycoca
