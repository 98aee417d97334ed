// Evaluation: zero-shot retrieval, prompt-based classification, greedy
// captioning, masked reconstruction, and patch-score heatmap export. All
// read-only over Parameters.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sycoca/data.hpp"
#include "sycoca/errors.hpp"
#include "sycoca/image.hpp"
#include "sycoca/masking.hpp"
#include "sycoca/model.hpp"
#include "sycoca/objectives.hpp"
#include "sycoca/tokenizer.hpp"
#include "sycoca/trainer.hpp"

namespace sycoca {

struct RecallTable {
    std::string direction;
    std::map<int, double> recall_at;
    int n = 0;
};

struct RetrievalResult {
    RecallTable image_to_text;
    RecallTable text_to_image;
    double mtr = 0.0;  // mean of R@{1,5,10}, image->text
    double mir = 0.0;  // mean of R@{1,5,10}, text->image
};

namespace detail {

// Rank of the true match: 1 + strictly-better entries + earlier-index ties.
template <class Real>
int rank_of(const Mat<Real>& sims, int query, int truth, bool query_is_row) {
    const int n = query_is_row ? sims.cols : sims.rows;
    auto at = [&](int j) { return query_is_row ? sims.at(query, j) : sims.at(j, query); };
    const Real s_true = at(truth);
    int rank = 1;
    for (int j = 0; j < n; ++j) {
        if (j == truth) continue;
        if (at(j) > s_true || (at(j) == s_true && j < truth)) ++rank;
    }
    return rank;
}

template <class Real>
RecallTable recall_table(const Mat<Real>& sims, bool rows_are_queries, const char* direction,
                         const std::vector<int>& ks) {
    const int n = rows_are_queries ? sims.rows : sims.cols;
    RecallTable t;
    t.direction = direction;
    t.n = n;
    std::vector<int> ranks(static_cast<std::size_t>(n));
    for (int q = 0; q < n; ++q) ranks[static_cast<std::size_t>(q)] = rank_of(sims, q, q, rows_are_queries);
    for (int k : ks) {
        int hits = 0;
        for (int r : ranks) hits += r <= k ? 1 : 0;
        t.recall_at[k] = static_cast<double>(hits) / n;
    }
    return t;
}

inline double mean_recall_135(const RecallTable& t) {
    double sum = 0.0;
    int cnt = 0;
    for (int k : {1, 5, 10}) {
        const auto it = t.recall_at.find(k);
        if (it != t.recall_at.end()) {
            sum += it->second;
            ++cnt;
        }
    }
    return cnt > 0 ? sum / cnt : 0.0;
}

}  // namespace detail

template <class Real>
RetrievalResult retrieval_recall(const Mat<Real>& img_embs, const Mat<Real>& txt_embs,
                                 std::vector<int> ks = {1, 5, 10}) {
    if (img_embs.rows != txt_embs.rows || img_embs.cols != txt_embs.cols)
        throw InputError("retrieval_recall: embedding shape mismatch");
    for (int k : ks)
        if (k < 1 || k > img_embs.rows)
            throw InputError("retrieval_recall: k=" + std::to_string(k) + " outside gallery size " +
                             std::to_string(img_embs.rows));
    const Mat<Real> sims = matmul_nt(img_embs, txt_embs);
    RetrievalResult out;
    out.image_to_text = detail::recall_table(sims, true, "image->text", ks);
    out.text_to_image = detail::recall_table(sims, false, "text->image", ks);
    out.mtr = detail::mean_recall_135(out.image_to_text);
    out.mir = detail::mean_recall_135(out.text_to_image);
    return out;
}

// Joint embeddings for a whole dataset, index-aligned (N x embed_dim each).
template <class Real>
std::pair<Mat<Real>, Mat<Real>> embed_dataset(const Parameters<Real>& params,
                                              const TrainData& data) {
    const int n = data.size();
    Mat<Real> zi(n, params.cfg.embed_dim), zt(n, params.cfg.embed_dim);
    for (int i = 0; i < n; ++i) {
        Graph<Real> g(false);
        const auto refs = bind_model<Real>(params, nullptr);
        const auto img = encode_image_g(g, refs, data.grids[static_cast<std::size_t>(i)], nullptr);
        const auto txt = encode_text_g(g, refs, data.seqs[static_cast<std::size_t>(i)]);
        const auto z_img = project_row_g(g, img, 0, refs.proj_img_w);
        const auto z_txt = project_row_g(
            g, txt, data.seqs[static_cast<std::size_t>(i)].cls_pos(), refs.proj_txt_w);
        for (int c = 0; c < zi.cols; ++c) {
            zi.at(i, c) = g.val(z_img).at(0, c);
            zt.at(i, c) = g.val(z_txt).at(0, c);
        }
    }
    return {std::move(zi), std::move(zt)};
}

inline std::string render_prompt(const std::string& prompt_template, const std::string& name) {
    std::string out = prompt_template;
    const auto pos = out.find("{name}");
    if (pos == std::string::npos) throw ConfigError("prompt template must contain {name}");
    out.replace(pos, 6, name);
    return out;
}

struct ClassifyResult {
    int label = 0;
    std::vector<double> scores;
};

template <class Real>
ClassifyResult zero_shot_classify(const Parameters<Real>& params, const Vocabulary& vocab,
                                  const ImageTensor& image,
                                  const std::vector<std::string>& class_names,
                                  const std::string& prompt_template = "a photo of a {name}") {
    if (class_names.empty()) throw InputError("zero_shot_classify: empty class list");
    if (class_names.size() < 2) throw InputError("zero_shot_classify: need at least 2 classes");

    const PatchGrid grid = patchify(resize_nearest(image, params.cfg.image_hw, params.cfg.image_hw),
                                    params.cfg.patch_size);
    Graph<Real> g(false);
    const auto refs = bind_model<Real>(params, nullptr);
    const auto img = encode_image_g(g, refs, grid, nullptr);
    const auto z_img = project_row_g(g, img, 0, refs.proj_img_w);

    ClassifyResult out;
    out.scores.reserve(class_names.size());
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < class_names.size(); ++c) {
        const TokenSequence seq =
            encode(vocab, render_prompt(prompt_template, class_names[c]), params.cfg.max_text_len);
        const auto txt = encode_text_g(g, refs, seq);
        const auto z_txt = project_row_g(g, txt, seq.cls_pos(), refs.proj_txt_w);
        double score = 0.0;
        for (int k = 0; k < params.cfg.embed_dim; ++k)
            score += static_cast<double>(g.val(z_img).at(0, k)) *
                     static_cast<double>(g.val(z_txt).at(0, k));
        out.scores.push_back(score);
        if (score > best) {  // ties resolve to the first class
            best = score;
            out.label = static_cast<int>(c);
        }
    }
    return out;
}

struct CaptionResult {
    std::vector<int> ids;  // starts with BOS; EOS included when emitted
    std::string text;
};

template <class Real>
CaptionResult caption_greedy(const Parameters<Real>& params, const Vocabulary& vocab,
                             const ImageTensor& image, int max_len) {
    const ModelConfig& cfg = params.cfg;
    const int budget = std::min(max_len, cfg.max_text_len);
    CaptionResult out;
    out.ids = {kBosId};
    if (budget <= 1) {
        out.text = "";
        return out;
    }

    const PatchGrid grid =
        patchify(resize_nearest(image, cfg.image_hw, cfg.image_hw), cfg.patch_size);
    Graph<Real> g(false);
    const auto refs = bind_model<Real>(params, nullptr);
    const auto memory = encode_image_g(g, refs, grid, nullptr);
    const std::vector<std::uint8_t> keep(static_cast<std::size_t>(cfg.num_patches() + 1), 1);

    while (static_cast<int>(out.ids.size()) < budget) {
        TokenSequence seq;
        seq.ids = out.ids;
        seq.ids.resize(static_cast<std::size_t>(cfg.max_text_len), kPadId);
        seq.length = static_cast<int>(out.ids.size());
        seq.pad_mask.assign(static_cast<std::size_t>(cfg.max_text_len), 0);
        for (int i = 0; i < seq.length; ++i) seq.pad_mask[static_cast<std::size_t>(i)] = 1;

        Graph<Real> step_graph(false);
        const auto txt = encode_text_g(step_graph, refs, seq);
        const auto logits =
            decode_text_logits_g(step_graph, refs, txt, step_graph.leaf(g.val(memory)), keep,
                                 seq.pad_mask);
        const Mat<Real>& lv = step_graph.val(logits);
        const int row = seq.length - 1;
        int next = 0;
        Real best = lv.at(row, 0);
        for (int v = 1; v < lv.cols; ++v)
            if (lv.at(row, v) > best) {
                best = lv.at(row, v);
                next = v;
            }
        out.ids.push_back(next);
        if (next == kEosId) break;
    }
    out.text = decode(vocab, out.ids);
    return out;
}

struct ReconstructResult {
    ImageTensor composite;   // predictions spliced into the original, clamped to [0,1]
    double masked_l1 = 0.0;  // per-pixel L1 on masked patches (raw predictions)
    PatchScores scores;
    MaskMap high;
};

template <class Real>
ReconstructResult reconstruct(const Parameters<Real>& params, const Vocabulary& vocab,
                              const ImageTensor& image, const std::string& caption, double r_h,
                              MaskingMode mode, std::uint64_t seed, bool use_cross = true) {
    const ModelConfig& cfg = params.cfg;
    const PatchGrid grid =
        patchify(resize_nearest(image, cfg.image_hw, cfg.image_hw), cfg.patch_size);
    const TokenSequence seq = encode(vocab, caption, cfg.max_text_len);

    Graph<Real> g(false);
    const auto refs = bind_model<Real>(params, nullptr);
    const auto img_clean = encode_image_g(g, refs, grid, nullptr);
    const auto txt = encode_text_g(g, refs, seq);

    ReconstructResult out;
    {
        const Mat<Real>& enc = g.val(img_clean);
        Mat<Real> patch_tokens(cfg.num_patches(), cfg.d_model);
        for (int r = 0; r < patch_tokens.rows; ++r)
            for (int c = 0; c < patch_tokens.cols; ++c) patch_tokens.at(r, c) = enc.at(r + 1, c);
        out.scores = patch_scores(patch_tokens, g.val(txt), content_keep_bits(seq));
    }
    if (mode == MaskingMode::Attentive) {
        out.high = build_masks(out.scores, r_h, 0.0).first;
    } else {
        out.high = random_masks(cfg.num_patches(), r_h, 0.0, seed).first;
    }
    if (out.high.popcount() == 0)
        throw InputError("reconstruct: r_h=" + std::to_string(r_h) + " masks no patches");

    const auto img_hi = encode_image_g(g, refs, grid, &out.high);
    const auto pred_id = decode_image_pixels_g(g, refs, img_hi, txt, seq.pad_mask, use_cross);
    const Mat<Real>& pred = g.val(pred_id);

    out.masked_l1 = tgmim_loss(pred, widen<Real>(grid.patches), out.high, /*raw_sum=*/false);

    PatchGrid spliced = grid;
    for (int r = 0; r < spliced.patches.rows; ++r) {
        if (!out.high.bits[static_cast<std::size_t>(r)]) continue;
        for (int c = 0; c < spliced.patches.cols; ++c) {
            float v = static_cast<float>(pred.at(r, c));
            spliced.patches.at(r, c) = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
        }
    }
    out.composite = unpatchify(spliced);
    return out;
}

// Min-max normalized patch scores as a P5 PGM; constant scores map to a
// uniform 128.
inline void export_heatmap(const PatchScores& scores, int grid_h, int grid_w,
                           const std::string& path) {
    if (scores.size() != grid_h * grid_w)
        throw InputError("export_heatmap: P != grid_h * grid_w");
    double lo = scores.scores[0], hi = scores.scores[0];
    for (double s : scores.scores) {
        lo = std::min(lo, s);
        hi = std::max(hi, s);
    }
    std::vector<std::uint8_t> pix(scores.scores.size(), 128);
    if (hi > lo) {
        for (std::size_t i = 0; i < pix.size(); ++i)
            pix[i] = static_cast<std::uint8_t>(
                std::lround(255.0 * (scores.scores[i] - lo) / (hi - lo)));
    }
    save_gray_pgm(pix, grid_h, grid_w, path);
}

}  // namespace sycoca
