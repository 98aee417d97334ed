// The three training losses and their weighted combination. Graph
// builders carry gradients for training; the value-level functions run
// the same builders on a non-recording graph.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sycoca/config.hpp"
#include "sycoca/errors.hpp"
#include "sycoca/graph.hpp"
#include "sycoca/masking.hpp"
#include "sycoca/mat.hpp"
#include "sycoca/tokenizer.hpp"

namespace sycoca {

struct LossBreakdown {
    double l_itc = 0.0;
    double l_ic = 0.0;
    double l_tm = 0.0;
    double total = 0.0;
    double lambda_ic = 0.0;
    double lambda_tm = 0.0;
};

// Weighted sum; disabled objectives contribute exactly 0. Accumulation
// order is fixed so reruns produce identical totals.
inline LossBreakdown total_loss(double l_itc, double l_ic, double l_tm, const Objectives& obj,
                                double lambda_ic, double lambda_tm) {
    LossBreakdown b;
    b.lambda_ic = lambda_ic;
    b.lambda_tm = lambda_tm;
    b.l_itc = obj.itc ? l_itc : 0.0;
    b.l_ic = obj.ic ? l_ic : 0.0;
    b.l_tm = (obj.mim || obj.tgmim) ? l_tm : 0.0;
    b.total = b.l_itc + lambda_ic * b.l_ic + lambda_tm * b.l_tm;
    return b;
}

// Symmetric InfoNCE over an N x N logit matrix with matched pairs on the
// diagonal: mean image->text row CE plus mean text->image column CE,
// halved. The logit matrix is logit_scale * <v_i, w_j>.
template <class Real>
typename Graph<Real>::Id itc_loss_g(Graph<Real>& g, typename Graph<Real>::Id img_embs,
                                    typename Graph<Real>::Id txt_embs,
                                    typename Graph<Real>::Id logits) {
    const int n = g.val(img_embs).rows;
    (void)txt_embs;
    if (n < 2) throw InputError("itc_loss: need a batch of at least 2 pairs");
    for (const Real v : g.val(logits).a)
        if (!std::isfinite(static_cast<double>(v))) throw NumericError("itc_loss: non-finite logits");
    std::vector<int> diag(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) diag[static_cast<std::size_t>(i)] = i;
    const std::vector<std::uint8_t> all(static_cast<std::size_t>(n), 1);
    const auto i2t = g.ce_rows(logits, diag, all);
    const auto t2i = g.ce_rows(g.transpose_node(logits), diag, all);
    return g.scale(g.add(i2t, t2i), Real(0.5));
}

template <class Real>
struct ItcResult {
    double loss = 0.0;
    Mat<Real> similarity;  // raw inner products, N x N
};

template <class Real>
ItcResult<Real> itc_loss(const Mat<Real>& img_embs, const Mat<Real>& txt_embs, Real logit_scale) {
    if (img_embs.rows != txt_embs.rows || img_embs.cols != txt_embs.cols)
        throw InputError("itc_loss: embedding shape mismatch");
    if (img_embs.rows < 2) throw InputError("itc_loss: need a batch of at least 2 pairs");
    if (!(logit_scale > 0)) throw InputError("itc_loss: logit_scale must be positive");
    Graph<Real> g(false);
    const auto zi = g.leaf(img_embs);
    const auto zt = g.leaf(txt_embs);
    const auto sims = g.matmul_nt_op(zi, zt);
    const auto logits = g.scale(sims, logit_scale);
    const auto loss = itc_loss_g(g, zi, zt, logits);
    return {static_cast<double>(g.val(loss).at(0, 0)), g.val(sims)};
}

// Teacher-forced next-token targets for a BOS/content/EOS/CLS/PAD layout:
// position i predicts ids[i+1]; the mask covers exactly the positions
// whose target is a content token or EOS.
struct IcTargets {
    std::vector<int> targets;
    std::vector<std::uint8_t> mask;
};

inline IcTargets ic_targets(const TokenSequence& seq) {
    const int n = seq.max_len();
    IcTargets t;
    t.targets.assign(static_cast<std::size_t>(n), 0);
    t.mask.assign(static_cast<std::size_t>(n), 0);
    for (int i = 0; i + 1 < n; ++i) {
        const int next = seq.ids[static_cast<std::size_t>(i + 1)];
        t.targets[static_cast<std::size_t>(i)] = next;
        t.mask[static_cast<std::size_t>(i)] = (next == kEosId || !is_special_id(next)) ? 1 : 0;
    }
    return t;
}

template <class Real>
double ic_loss(const Mat<Real>& logits, const std::vector<int>& target_ids,
               const std::vector<std::uint8_t>& loss_mask) {
    if (static_cast<int>(target_ids.size()) != logits.rows ||
        static_cast<int>(loss_mask.size()) != logits.rows)
        throw InputError("ic_loss: targets/mask length mismatch");
    Graph<Real> g(false);
    return static_cast<double>(g.val(g.ce_rows(g.leaf(logits), target_ids, loss_mask)).at(0, 0));
}

// Masked L1 per Eq-style sum; by default normalized per masked pixel so
// the weight keeps meaning across masking ratios. raw_sum recovers the
// unnormalized sum.
template <class Real>
double tgmim_loss(const Mat<Real>& pred, const Mat<Real>& target, const MaskMap& mask,
                  bool raw_sum = false) {
    if (!pred.same_shape(target)) throw InputError("tgmim_loss: pred/target shape mismatch");
    if (static_cast<int>(mask.bits.size()) != pred.rows)
        throw InputError("tgmim_loss: mask length mismatch");
    Graph<Real> g(false);
    return static_cast<double>(
        g.val(g.l1_masked(g.leaf(pred), target, mask.bits, !raw_sum)).at(0, 0));
}

}  // namespace sycoca
