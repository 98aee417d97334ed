#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"

using namespace sycoca;

namespace {

// Single-parameter stand-in: find one Weight-kind scalar to poke.
struct ScalarProbe {
    Parameters<double> params;
    OptimState<double> optim;

    ScalarProbe() : params(make_parameters<double>(testutil::micro_config())) {
        optim = make_optim_state(params);
    }
};

}  // namespace

TEST_CASE("lr schedule hits the pinned anchor points") {
    Schedule s;
    s.peak_lr = 2e-3;
    s.floor_lr = 1e-4;
    s.warmup_steps = 100;
    s.total_steps = 1000;
    CHECK(lr_at(0, s) == 0.0);
    CHECK(lr_at(100, s) == Catch::Approx(2e-3).margin(1e-18));
    CHECK(lr_at(1000, s) == Catch::Approx(1e-4).margin(1e-18));
    CHECK(lr_at(550, s) == Catch::Approx((2e-3 + 1e-4) / 2).margin(1e-12));  // cos(pi/2) = 0
    CHECK(lr_at(50, s) == Catch::Approx(1e-3).margin(1e-12));
    CHECK_THROWS_AS(lr_at(-1, s), InputError);
    CHECK_THROWS_AS(lr_at(1001, s), InputError);

    Schedule bad = s;
    bad.warmup_steps = 1000;
    CHECK_THROWS_AS(lr_at(1, bad), ConfigError);
}

TEST_CASE("adamw: zero gradients and zero decay leave parameters unchanged") {
    ScalarProbe p;
    Parameters<double> before = p.params;
    Parameters<double> grads = make_parameters<double>(p.params.cfg);
    adamw_step(p.params, grads, p.optim, 0.1, 0.9, 0.999, 1e-8, 0.0);
    const auto a = param_entries(p.params);
    const auto b = param_entries(before);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].mat->a == b[i].mat->a);
}

TEST_CASE("adamw: one hand-computed scalar step") {
    ScalarProbe p;
    Parameters<double> grads = make_parameters<double>(p.params.cfg);
    // Probe element (0,0) of a Weight array: patch_proj_w.
    p.params.patch_proj_w.at(0, 0) = 1.0;
    grads.patch_proj_w.at(0, 0) = 0.5;

    SECTION("no decay") {
        adamw_step(p.params, grads, p.optim, 0.1, 0.9, 0.999, 1e-8, 0.0);
        // m = 0.05, v = 0.00025, mhat = 0.5, vhat = 0.25
        // theta = 1 - 0.1 * 0.5 / (0.5 + 1e-8) = 0.9000000010
        const double expect = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        CHECK(p.params.patch_proj_w.at(0, 0) == Catch::Approx(expect).margin(1e-12));
        CHECK(p.optim.m[0].at(0, 0) == Catch::Approx(0.05).margin(1e-15));
        CHECK(p.optim.v[0].at(0, 0) == Catch::Approx(0.00025).margin(1e-15));
        CHECK(p.optim.t == 1);
    }
    SECTION("decay applies before the moment term") {
        adamw_step(p.params, grads, p.optim, 0.1, 0.9, 0.999, 1e-8, 0.1);
        const double expect = (1.0 - 0.1 * 0.1) - 0.1 * 0.5 / (0.5 + 1e-8);
        CHECK(p.params.patch_proj_w.at(0, 0) == Catch::Approx(expect).margin(1e-12));
    }
}

TEST_CASE("adamw: decay-only step scales decayed kinds and spares the rest") {
    ScalarProbe p;
    Parameters<double> grads = make_parameters<double>(p.params.cfg);
    for_each_param(p.params, [](const std::string&, Mat<double>& m, ParamKind) { m.fill(2.0); });
    const double log_scale_before = p.params.log_logit_scale.at(0, 0);
    adamw_step(p.params, grads, p.optim, 0.1, 0.9, 0.999, 1e-8, 0.5);
    for_each_param(p.params, [&](const std::string& name, Mat<double>& m, ParamKind kind) {
        INFO(name);
        if (kind == ParamKind::Bias || kind == ParamKind::Pos) {
            CHECK(m.at(0, 0) == 2.0);  // never decayed
        } else if (kind == ParamKind::LogitScale) {
            CHECK(m.at(0, 0) == log_scale_before);
        } else {
            CHECK(m.at(0, 0) == Catch::Approx(2.0 * (1.0 - 0.1 * 0.5)).margin(1e-12));
        }
    });
}

TEST_CASE("adamw: inactive arrays are frozen when masked") {
    ScalarProbe p;
    Parameters<double> grads = make_parameters<double>(p.params.cfg);
    for_each_param(p.params, [](const std::string&, Mat<double>& m, ParamKind) { m.fill(1.0); });
    grads.patch_proj_w.fill(0.25);  // only this array carries signal
    const auto active = active_arrays(grads, p.optim);
    adamw_step(p.params, grads, p.optim, 0.1, 0.9, 0.999, 1e-8, 0.5, &active);
    CHECK(p.params.patch_proj_w.at(0, 0) != 1.0);
    CHECK(p.params.pixel_head_w.at(0, 0) == 1.0);  // untouched despite decay
    CHECK(p.params.tok_emb.at(0, 0) == 1.0);
}

TEST_CASE("global norm clipping") {
    ScalarProbe p;
    Parameters<double> grads = make_parameters<double>(p.params.cfg);
    grads.patch_proj_w.at(0, 0) = 3.0;
    grads.patch_proj_w.at(0, 1) = 4.0;  // norm 5
    const double norm = clip_global_norm(grads, 1.0);
    CHECK(norm == Catch::Approx(5.0).margin(1e-12));
    CHECK(grads.patch_proj_w.at(0, 0) == Catch::Approx(0.6).margin(1e-12));
    CHECK(grads.patch_proj_w.at(0, 1) == Catch::Approx(0.8).margin(1e-12));

    grads.patch_proj_w.at(0, 0) = 0.3;
    grads.patch_proj_w.at(0, 1) = 0.4;
    clip_global_norm(grads, 1.0);  // below the clip: untouched
    CHECK(grads.patch_proj_w.at(0, 0) == 0.3);

    grads.patch_proj_w.at(0, 0) = 30;
    clip_global_norm(grads, 0.0);  // 0 disables
    CHECK(grads.patch_proj_w.at(0, 0) == 30);
}

TEST_CASE("NaN gradients are reported by parameter name") {
    ScalarProbe p;
    Parameters<double> grads = make_parameters<double>(p.params.cfg);
    grads.tok_emb.at(3, 2) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH(check_finite_grads(grads),
                      Catch::Matchers::ContainsSubstring("txt.tok_emb"));
}
