// Training: per-example three-pass forward (clean for ITC + scoring,
// high-masked for TG-MIM/MIM, low-masked for IC), batch-level ITC,
// backward, AdamW. Batch members run in parallel over a fixed number of
// chunks with per-chunk gradient buffers summed in chunk order, so
// results are bit-identical regardless of thread count.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <fstream>
#include <memory>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "sycoca/checkpoint.hpp"
#include "sycoca/config.hpp"
#include "sycoca/data.hpp"
#include "sycoca/errors.hpp"
#include "sycoca/graph.hpp"
#include "sycoca/masking.hpp"
#include "sycoca/model.hpp"
#include "sycoca/objectives.hpp"
#include "sycoca/optim.hpp"
#include "sycoca/tokenizer.hpp"

namespace sycoca {

inline constexpr int kGradChunks = 8;  // fixed: reduction order must not depend on threads

struct TrainData {
    std::vector<PatchGrid> grids;
    std::vector<TokenSequence> seqs;
    std::vector<int> ids;

    int size() const { return static_cast<int>(grids.size()); }
};

inline std::string path_dirname(const std::string& path) {
    const auto slash = path.find_last_of('/');
    return slash == std::string::npos ? std::string(".") : path.substr(0, slash);
}

inline TrainData prepare_train_data(const RunConfig& cfg, const Vocabulary& vocab) {
    TrainData data;
    if (cfg.data_source == DataSource::Synthetic) {
        SyntheticSpec spec;
        spec.count = cfg.synthetic_count;
        spec.image_hw = cfg.model.image_hw;
        spec.seed = cfg.synthetic_seed;
        spec.exhaustive = cfg.synthetic_exhaustive;
        spec.patch_size = cfg.model.patch_size;
        for (auto& pair : generate_synthetic(spec)) {
            data.grids.push_back(patchify(pair.image, cfg.model.patch_size));
            data.seqs.push_back(encode(vocab, pair.caption, cfg.model.max_text_len));
            data.ids.push_back(static_cast<int>(data.ids.size()));
        }
    } else {
        const auto records = load_manifest(cfg.manifest_path);
        const std::string dir = path_dirname(cfg.manifest_path);
        for (const auto& rec : records) {
            const std::string path =
                rec.image_source.front() == '/' ? rec.image_source : dir + "/" + rec.image_source;
            const ImageTensor img = load_image_ppm(path, cfg.model.image_hw, cfg.model.image_hw);
            data.grids.push_back(patchify(img, cfg.model.patch_size));
            data.seqs.push_back(encode(vocab, rec.caption, cfg.model.max_text_len));
            data.ids.push_back(rec.id);
        }
    }
    if (data.size() < cfg.batch_size)
        throw ConfigError("dataset smaller than batch_size (" + std::to_string(data.size()) +
                          " < " + std::to_string(cfg.batch_size) + ")");
    return data;
}

// Data order is a pure function of (seed, step): epoch = step / spe, and
// each epoch's order is an independent seeded shuffle. Only full batches
// are used so ITC always sees batch_size negatives.
inline std::vector<int> batch_indices(int n_data, const RunConfig& cfg, long long step) {
    const int spe = n_data / cfg.batch_size;
    const long long epoch = step / spe;
    const int k = static_cast<int>(step % spe);
    std::vector<int> order(static_cast<std::size_t>(n_data));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(cfg.seed, 0xda7a, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    return {order.begin() + static_cast<std::ptrdiff_t>(k) * cfg.batch_size,
            order.begin() + static_cast<std::ptrdiff_t>(k + 1) * cfg.batch_size};
}

// Text positions eligible for Eq.-7 scoring: real content tokens only.
inline std::vector<std::uint8_t> content_keep_bits(const TokenSequence& seq) {
    std::vector<std::uint8_t> keep(seq.ids.size(), 0);
    for (std::size_t j = 0; j < seq.ids.size(); ++j)
        keep[j] = (seq.pad_mask[j] && !is_special_id(seq.ids[j])) ? 1 : 0;
    return keep;
}

struct MaskPair {
    MaskMap high;
    MaskMap low;
};

template <class Real>
struct ExampleFwd {
    std::unique_ptr<Graph<Real>> graph;
    typename Graph<Real>::Id z_img = -1, z_txt = -1, l_ic = -1, l_tm = -1;
    double ic = 0.0, tm = 0.0;
    Mat<Real> zi, zt;
};

// Builds the full per-example graph. Masks are computed inline from the
// clean pass (or taken from `override_masks`, which the gradient-check
// harness uses to hold the discrete selection fixed).
template <class Real>
ExampleFwd<Real> build_example(const ModelRefs<Real>& refs, const PatchGrid& grid,
                               const TokenSequence& seq, const RunConfig& cfg, long long step,
                               int pos_in_batch, bool recording, const MaskPair* override_masks,
                               MaskPair* out_masks) {
    ExampleFwd<Real> ex;
    ex.graph = std::make_unique<Graph<Real>>(recording);
    Graph<Real>& g = *ex.graph;

    const auto img_clean = encode_image_g(g, refs, grid, nullptr);
    const auto txt = encode_text_g(g, refs, seq);

    if (cfg.objectives.itc) {
        ex.z_img = project_row_g(g, img_clean, 0, refs.proj_img_w);
        ex.z_txt = project_row_g(g, txt, seq.cls_pos(), refs.proj_txt_w);
        ex.zi = g.val(ex.z_img);
        ex.zt = g.val(ex.z_txt);
    }

    const bool need_high = cfg.mim_variant();
    const bool need_low = cfg.objectives.ic && cfg.ic_uses_low_mask();
    MaskPair masks;
    if (need_high || need_low) {
        if (override_masks) {
            masks = *override_masks;
        } else if (cfg.masking == MaskingMode::Attentive) {
            const Mat<Real>& enc = g.val(img_clean);
            Mat<Real> patch_tokens(cfg.model.num_patches(), cfg.model.d_model);
            for (int r = 0; r < patch_tokens.rows; ++r)
                for (int c = 0; c < patch_tokens.cols; ++c)
                    patch_tokens.at(r, c) = enc.at(r + 1, c);
            const PatchScores scores =
                patch_scores(patch_tokens, g.val(txt), content_keep_bits(seq));
            auto [hi, lo] = build_masks(scores, cfg.model.r_h, cfg.model.r_l);
            masks.high = std::move(hi);
            masks.low = std::move(lo);
        } else {
            auto [hi, lo] = random_masks(cfg.model.num_patches(), cfg.model.r_h, cfg.model.r_l,
                                         mix_seed(cfg.seed, static_cast<std::uint64_t>(step),
                                                  static_cast<std::uint64_t>(pos_in_batch)));
            masks.high = std::move(hi);
            masks.low = std::move(lo);
        }
    }

    if (need_high) {
        const auto img_hi = encode_image_g(g, refs, grid, &masks.high);
        const auto pred = decode_image_pixels_g(g, refs, img_hi, txt, seq.pad_mask,
                                                /*use_cross=*/cfg.objectives.tgmim);
        ex.l_tm = g.l1_masked(pred, widen<Real>(grid.patches), masks.high.bits,
                              !cfg.tgmim_raw_sum);
        ex.tm = static_cast<double>(g.val(ex.l_tm).at(0, 0));
    }

    if (cfg.objectives.ic) {
        const auto img_ic = need_low ? encode_image_g(g, refs, grid, &masks.low) : img_clean;
        const std::vector<std::uint8_t> keep(
            static_cast<std::size_t>(cfg.model.num_patches() + 1), 1);
        const auto logits = decode_text_logits_g(g, refs, txt, img_ic, keep, seq.pad_mask);
        const IcTargets tg = ic_targets(seq);
        ex.l_ic = g.ce_rows(logits, tg.targets, tg.mask);
        ex.ic = static_cast<double>(g.val(ex.l_ic).at(0, 0));
    }

    if (out_masks) *out_masks = std::move(masks);
    return ex;
}

template <class Real>
struct TrainWorkspace {
    Parameters<Real> grads;
    std::vector<Parameters<Real>> chunk;

    void init(const ModelConfig& cfg) {
        grads = make_parameters<Real>(cfg);
        chunk.clear();
        for (int c = 0; c < kGradChunks; ++c) chunk.push_back(make_parameters<Real>(cfg));
    }

    void zero() {
        for_each_param(grads, [](const std::string&, Mat<Real>& m, ParamKind) { m.fill(Real(0)); });
        for (auto& ch : chunk)
            for_each_param(ch, [](const std::string&, Mat<Real>& m, ParamKind) { m.fill(Real(0)); });
    }
};

namespace detail {

inline int resolve_threads(int requested, int n_chunks) {
    int t = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
    if (t < 1) t = 1;
    return t > n_chunks ? n_chunks : t;
}

// Runs fn(chunk_index) over [0, n_chunks) on `threads` workers and
// rethrows the lowest-chunk exception, so failures are deterministic too.
template <class Fn>
void parallel_chunks(int n_chunks, int threads, Fn&& fn) {
    if (threads <= 1) {
        for (int c = 0; c < n_chunks; ++c) fn(c);
        return;
    }
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_chunks));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t]() {
            for (int c = t; c < n_chunks; c += threads) {
                try {
                    fn(c);
                } catch (...) {
                    errors[static_cast<std::size_t>(c)] = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline std::pair<int, int> chunk_range(int n, int c) {
    return {c * n / kGradChunks, (c + 1) * n / kGradChunks};
}

}  // namespace detail

// Forward (and optionally backward) over one batch. With ws == nullptr
// this only evaluates the losses — the finite-difference harness uses
// that path together with mask_override to freeze the discrete masks.
template <class Real>
LossBreakdown run_batch(const Parameters<Real>& params, TrainWorkspace<Real>* ws,
                        const TrainData& data, const std::vector<int>& batch,
                        const RunConfig& cfg, long long step,
                        const std::vector<MaskPair>* mask_override = nullptr,
                        std::vector<MaskPair>* mask_out = nullptr) {
    const int n = static_cast<int>(batch.size());
    if (n < 2) throw InputError("run_batch: batch must hold at least 2 examples");
    const int threads = detail::resolve_threads(cfg.threads, kGradChunks);

    std::vector<ExampleFwd<Real>> fwd(static_cast<std::size_t>(n));
    std::vector<MaskPair> masks(static_cast<std::size_t>(n));
    std::vector<ModelRefs<Real>> refs(static_cast<std::size_t>(kGradChunks));
    for (int c = 0; c < kGradChunks; ++c)
        refs[static_cast<std::size_t>(c)] = bind_model(params, ws ? &ws->chunk[c] : nullptr);

    detail::parallel_chunks(kGradChunks, threads, [&](int c) {
        const auto [lo, hi] = detail::chunk_range(n, c);
        for (int i = lo; i < hi; ++i) {
            fwd[static_cast<std::size_t>(i)] = build_example(
                refs[static_cast<std::size_t>(c)], data.grids[static_cast<std::size_t>(batch[i])],
                data.seqs[static_cast<std::size_t>(batch[i])], cfg, step, i, ws != nullptr,
                mask_override ? &(*mask_override)[static_cast<std::size_t>(i)] : nullptr,
                &masks[static_cast<std::size_t>(i)]);
        }
    });
    if (mask_out) *mask_out = masks;

    double l_ic = 0.0, l_tm = 0.0;
    for (int i = 0; i < n; ++i) {
        l_ic += fwd[static_cast<std::size_t>(i)].ic;
        l_tm += fwd[static_cast<std::size_t>(i)].tm;
    }
    l_ic /= n;
    l_tm /= n;

    double l_itc = 0.0;
    Mat<Real> d_zi, d_zt;
    std::unique_ptr<Graph<Real>> itc_graph;
    if (cfg.objectives.itc) {
        const int e = cfg.model.embed_dim;
        Mat<Real> all_zi(n, e), all_zt(n, e);
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < e; ++c) {
                all_zi.at(i, c) = fwd[static_cast<std::size_t>(i)].zi.at(0, c);
                all_zt.at(i, c) = fwd[static_cast<std::size_t>(i)].zt.at(0, c);
            }
        itc_graph = std::make_unique<Graph<Real>>(ws != nullptr);
        Graph<Real>& bg = *itc_graph;
        const auto zi_leaf = bg.leaf(std::move(all_zi));
        const auto zt_leaf = bg.leaf(std::move(all_zt));
        const auto sims = bg.matmul_nt_op(zi_leaf, zt_leaf);
        const PRef<Real> log_scale{&params.log_logit_scale,
                                   ws ? &ws->grads.log_logit_scale : nullptr};
        const auto logits = bg.scale_by_exp_param(sims, log_scale, Real(kLogitScaleCap));
        const auto loss = itc_loss_g(bg, zi_leaf, zt_leaf, logits);
        l_itc = static_cast<double>(bg.val(loss).at(0, 0));
        if (ws) {
            bg.seed(loss, Real(1));
            bg.backward();
            d_zi = bg.grad(zi_leaf);
            d_zt = bg.grad(zt_leaf);
        }
    }

    if (cfg.objectives.itc && !std::isfinite(l_itc))
        throw TrainError("non-finite loss in objective itc");
    if (cfg.objectives.ic && !std::isfinite(l_ic))
        throw TrainError("non-finite loss in objective ic");
    if (cfg.mim_variant() && !std::isfinite(l_tm))
        throw TrainError(std::string("non-finite loss in objective ") +
                         (cfg.objectives.tgmim ? "tgmim" : "mim"));

    if (ws) {
        const Real ic_seed = static_cast<Real>(cfg.model.lambda_ic / n);
        const Real tm_seed = static_cast<Real>(cfg.model.lambda_tm / n);
        detail::parallel_chunks(kGradChunks, threads, [&](int c) {
            const auto [lo, hi] = detail::chunk_range(n, c);
            for (int i = lo; i < hi; ++i) {
                ExampleFwd<Real>& ex = fwd[static_cast<std::size_t>(i)];
                Graph<Real>& g = *ex.graph;
                if (ex.l_ic >= 0) g.seed(ex.l_ic, ic_seed);
                if (ex.l_tm >= 0) g.seed(ex.l_tm, tm_seed);
                if (ex.z_img >= 0) {
                    Mat<Real>& zg = g.grad(ex.z_img);
                    Mat<Real>& tg = g.grad(ex.z_txt);
                    for (int c2 = 0; c2 < d_zi.cols; ++c2) {
                        zg.at(0, c2) += d_zi.at(i, c2);
                        tg.at(0, c2) += d_zt.at(i, c2);
                    }
                }
                g.backward();
                ex.graph.reset();  // free activations as soon as possible
            }
        });
        const auto total_entries = param_entries(ws->grads);
        for (int c = 0; c < kGradChunks; ++c) {
            auto ce = param_entries(ws->chunk[static_cast<std::size_t>(c)]);
            for (std::size_t k = 0; k < total_entries.size(); ++k)
                total_entries[k].mat->add_inplace(*ce[k].mat);
        }
    }

    return total_loss(l_itc, l_ic, l_tm, cfg.objectives, cfg.model.lambda_ic,
                      cfg.model.lambda_tm);
}

template <class Real>
struct StepOutcome {
    LossBreakdown losses;
    double lr = 0.0;
    double grad_norm = 0.0;
};

template <class Real>
StepOutcome<Real> train_step(Parameters<Real>& params, OptimState<Real>& optim,
                             TrainWorkspace<Real>& ws, const TrainData& data,
                             const RunConfig& cfg, long long step) {
    const auto batch = batch_indices(data.size(), cfg, step);
    ws.zero();
    StepOutcome<Real> out;
    out.losses = run_batch(params, &ws, data, batch, cfg, step);
    check_finite_grads(ws.grads);
    out.grad_norm = clip_global_norm(ws.grads, cfg.clip_norm);
    out.lr = lr_at(step + 1, cfg.schedule);
    const auto active = active_arrays(ws.grads, optim);
    adamw_step(params, ws.grads, optim, out.lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
               cfg.weight_decay, &active);
    return out;
}

inline std::string metrics_line(long long step_number, double lr, const LossBreakdown& l) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%lld\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g", step_number, lr, l.l_itc,
                  l.l_ic, l.l_tm, l.total);
    return std::string(buf);
}

// Resolves steps-vs-epochs: explicit steps win; otherwise epochs over
// full batches.
inline RunConfig resolve_schedule(RunConfig cfg, int n_data) {
    if (cfg.schedule.total_steps == 0 && cfg.epochs > 0)
        cfg.schedule.total_steps = cfg.epochs * (n_data / cfg.batch_size);
    return cfg;
}

template <class Real>
class Trainer {
public:
    Trainer(const RunConfig& cfg, Vocabulary vocab)
        : Trainer(cfg, std::move(vocab), TrainData{}, true) {}

    Trainer(const RunConfig& cfg, Vocabulary vocab, TrainData data)
        : Trainer(cfg, std::move(vocab), std::move(data), false) {}

    void restore(const Checkpoint& ck) {
        static_assert(std::is_same_v<Real, float>, "checkpoints are f32");
        Parameters<Real> loaded = ck.params;
        const auto ours = param_entries(params_);
        auto theirs = param_entries(loaded);
        if (ours.size() != theirs.size())
            throw FormatError("checkpoint: parameter set does not match config");
        for (std::size_t i = 0; i < ours.size(); ++i)
            if (ours[i].name != theirs[i].name || !ours[i].mat->same_shape(*theirs[i].mat))
                throw FormatError("checkpoint: shape mismatch for \"" + ours[i].name + "\"");
        params_ = std::move(loaded);
        optim_ = ck.optim;
        step_ = static_cast<long long>(ck.step);
    }

    StepOutcome<Real> step_once() {
        const auto out = train_step(params_, optim_, ws_, data_, cfg_, step_);
        step_ += 1;
        return out;
    }

    // Runs to total_steps, appending one metrics line per step and saving
    // checkpoints per config.
    void run() {
        std::ofstream log(cfg_.log_path,
                          step_ == 0 ? std::ios::trunc : (std::ios::app | std::ios::ate));
        if (!log) throw IoError("cannot open metrics log: " + cfg_.log_path);
        while (step_ < cfg_.schedule.total_steps) {
            const auto out = step_once();
            log << metrics_line(step_, out.lr, out.losses) << "\n";
            log.flush();
            if (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0 &&
                step_ < cfg_.schedule.total_steps)
                save();
        }
        save();
    }

    void save() {
        if constexpr (std::is_same_v<Real, float>) {
            save_checkpoint(params_, optim_, serialize_config(cfg_),
                            static_cast<std::uint64_t>(step_), cfg_.checkpoint_path);
        } else {
            throw ConfigError("checkpoints are defined for float training runs only");
        }
    }

    const RunConfig& config() const { return cfg_; }
    Parameters<Real>& params() { return params_; }
    const TrainData& data() const { return data_; }
    const Vocabulary& vocab() const { return vocab_; }
    long long step() const { return step_; }

private:
    Trainer(const RunConfig& cfg_in, Vocabulary vocab, TrainData data, bool build_data)
        : vocab_(std::move(vocab)) {
        RunConfig cfg = cfg_in;
        cfg.validate();
        if (vocab_.size != cfg.model.vocab_size)
            throw ConfigError("vocabulary size " + std::to_string(vocab_.size) +
                              " does not match model vocab_size " +
                              std::to_string(cfg.model.vocab_size));
        data_ = build_data ? prepare_train_data(cfg, vocab_) : std::move(data);
        cfg_ = resolve_schedule(cfg, data_.size());
        cfg_.schedule.validate();
        if (data_.size() < cfg_.batch_size)
            throw ConfigError("dataset smaller than batch_size");
        params_ = init_params<Real>(cfg_.model, cfg_.seed);
        optim_ = make_optim_state(params_);
        ws_.init(cfg_.model);
    }

    RunConfig cfg_;
    Vocabulary vocab_;
    TrainData data_;
    Parameters<Real> params_;
    OptimState<Real> optim_;
    TrainWorkspace<Real> ws_;
    long long step_ = 0;
};

}  // namespace sycoca
