// AdamW with decoupled weight decay and the warmup+cosine learning-rate
// schedule. Decay skips biases, positional embeddings, and the log
// temperature. Internal arithmetic is double so the float instantiation
// stays well conditioned.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sycoca/config.hpp"
#include "sycoca/errors.hpp"
#include "sycoca/model.hpp"

namespace sycoca {

inline double lr_at(long long t, const Schedule& s) {
    s.validate();
    if (t < 0 || t > s.total_steps)
        throw InputError("lr_at: step " + std::to_string(t) + " outside [0, " +
                         std::to_string(s.total_steps) + "]");
    if (t <= s.warmup_steps)
        return s.peak_lr * static_cast<double>(t) / static_cast<double>(s.warmup_steps);
    const double progress = static_cast<double>(t - s.warmup_steps) /
                            static_cast<double>(s.total_steps - s.warmup_steps);
    return s.floor_lr +
           (s.peak_lr - s.floor_lr) * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

template <class Real>
struct OptimState {
    std::vector<Mat<Real>> m;  // aligned with param_entries order
    std::vector<Mat<Real>> v;
    long long t = 0;
};

template <class Real>
OptimState<Real> make_optim_state(Parameters<Real>& params) {
    OptimState<Real> s;
    for_each_param(params, [&](const std::string&, Mat<Real>& mat, ParamKind) {
        s.m.emplace_back(mat.rows, mat.cols);
        s.v.emplace_back(mat.rows, mat.cols);
    });
    return s;
}

inline bool decays(ParamKind kind) {
    return kind == ParamKind::Weight || kind == ParamKind::Gain || kind == ParamKind::Embedding;
}

// Throws TrainError naming the first parameter with a non-finite gradient.
template <class Real>
void check_finite_grads(Parameters<Real>& grads) {
    for_each_param(grads, [&](const std::string& name, Mat<Real>& g, ParamKind) {
        for (const Real x : g.a)
            if (!std::isfinite(static_cast<double>(x)))
                throw TrainError("non-finite gradient in parameter \"" + name + "\"");
    });
}

// Scales all gradients so the global L2 norm is at most clip; returns the
// pre-clip norm. clip <= 0 disables clipping.
template <class Real>
double clip_global_norm(Parameters<Real>& grads, double clip) {
    double sq = 0.0;
    for_each_param(grads, [&](const std::string&, Mat<Real>& g, ParamKind) {
        for (const Real x : g.a) sq += static_cast<double>(x) * static_cast<double>(x);
    });
    const double norm = std::sqrt(sq);
    if (clip > 0 && norm > clip) {
        const Real scale = static_cast<Real>(clip / norm);
        for_each_param(grads, [&](const std::string&, Mat<Real>& g, ParamKind) {
            for (Real& x : g.a) x *= scale;
        });
    }
    return norm;
}

// Marks arrays that have never carried gradient signal (zero gradient
// and zero moments). train_step skips them so disabling an objective
// freezes exactly the parameters reachable only through it.
template <class Real>
std::vector<std::uint8_t> active_arrays(Parameters<Real>& grads, const OptimState<Real>& opt) {
    std::vector<std::uint8_t> active;
    std::size_t i = 0;
    for_each_param(grads, [&](const std::string&, Mat<Real>& g, ParamKind) {
        bool any = false;
        for (const Real x : g.a) any = any || x != Real(0);
        if (!any)
            for (const Real x : opt.m[i].a) any = any || x != Real(0);
        if (!any)
            for (const Real x : opt.v[i].a) any = any || x != Real(0);
        active.push_back(any ? 1 : 0);
        ++i;
    });
    return active;
}

// One AdamW update. Decay is applied as theta -= lr * wd * theta before
// the bias-corrected moment term; arrays with active == 0 are left
// untouched (pass nullptr to update everything).
template <class Real>
void adamw_step(Parameters<Real>& params, Parameters<Real>& grads, OptimState<Real>& opt,
                double lr, double beta1, double beta2, double eps, double weight_decay,
                const std::vector<std::uint8_t>* active = nullptr) {
    opt.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(opt.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(opt.t));

    const auto pe = param_entries(params);
    const auto ge = param_entries(grads);
    if (pe.size() != ge.size() || pe.size() != opt.m.size())
        throw InputError("adamw_step: parameter/gradient/state misalignment");
    if (active && active->size() != pe.size())
        throw InputError("adamw_step: active mask misalignment");

    for (std::size_t i = 0; i < pe.size(); ++i) {
        if (active && !(*active)[i]) continue;
        Mat<Real>& theta = *pe[i].mat;
        const Mat<Real>& g = *ge[i].mat;
        if (!theta.same_shape(g)) throw InputError("adamw_step: shape mismatch at " + pe[i].name);
        Mat<Real>& m = opt.m[i];
        Mat<Real>& v = opt.v[i];
        const bool decay = decays(pe[i].kind) && weight_decay != 0.0;
        for (std::size_t k = 0; k < theta.a.size(); ++k) {
            double th = static_cast<double>(theta.a[k]);
            const double gk = static_cast<double>(g.a[k]);
            if (decay) th -= lr * weight_decay * th;
            const double mk = beta1 * static_cast<double>(m.a[k]) + (1.0 - beta1) * gk;
            const double vk = beta2 * static_cast<double>(v.a[k]) + (1.0 - beta2) * gk * gk;
            m.a[k] = static_cast<Real>(mk);
            v.a[k] = static_cast<Real>(vk);
            th -= lr * (mk / bc1) / (std::sqrt(vk / bc2) + eps);
            theta.a[k] = static_cast<Real>(th);
        }
    }
}

}  // namespace sycoca
