// Finite-difference checks for every tape op, plus accumulation and
// determinism behaviours the trainer relies on.
#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"

using namespace sycoca;
using namespace testutil;

namespace {

constexpr double kTol = 2e-6;

using Ids = std::vector<Graph<double>::Id>;

struct Check {
    std::function<double()> loss;                          // forward-only value
    std::function<std::vector<Mat<double>>()> analytic;    // grads, aligned with mats
    std::vector<Mat<double>*> mats;
};

void expect_grads(Check& c) {
    auto grads = c.analytic();
    REQUIRE(grads.size() == c.mats.size());
    for (std::size_t i = 0; i < c.mats.size(); ++i) {
        const Mat<double> fd = fd_grad(*c.mats[i], c.loss);
        INFO("input " << i);
        CHECK(rel_err(grads[i], fd) < kTol);
    }
}

}  // namespace

TEST_CASE("linear matches finite differences") {
    Rng rng(11);
    Mat<double> x = random_mat(rng, 3, 4), w = random_mat(rng, 4, 5), b = random_mat(rng, 1, 5);
    Mat<double> c = random_mat(rng, 3, 5);
    Check chk;
    chk.mats = {&x, &w, &b};
    chk.loss = [&] {
        Graph<double> g(false);
        return dot_all(c, g.val(g.linear(g.leaf(x), pref(w), pref(b))));
    };
    chk.analytic = [&] {
        Graph<double> g;
        Mat<double> gw(4, 5), gb(1, 5);
        auto xid = g.leaf(x);
        auto y = g.linear(xid, pref(w, gw), pref(b, gb));
        g.grad(y) = c;
        g.backward();
        return std::vector<Mat<double>>{g.grad(xid), gw, gb};
    };
    expect_grads(chk);
}

TEST_CASE("matmul variants match finite differences") {
    Rng rng(12);
    Mat<double> a = random_mat(rng, 3, 4), b = random_mat(rng, 4, 2), bt = random_mat(rng, 2, 4);
    Mat<double> c = random_mat(rng, 3, 2);
    SECTION("matmul") {
        Check chk;
        chk.mats = {&a, &b};
        chk.loss = [&] {
            Graph<double> g(false);
            return dot_all(c, g.val(g.matmul(g.leaf(a), g.leaf(b))));
        };
        chk.analytic = [&] {
            Graph<double> g;
            auto ai = g.leaf(a), bi = g.leaf(b);
            auto y = g.matmul(ai, bi);
            g.grad(y) = c;
            g.backward();
            return std::vector<Mat<double>>{g.grad(ai), g.grad(bi)};
        };
        expect_grads(chk);
    }
    SECTION("matmul_nt") {
        Check chk;
        chk.mats = {&a, &bt};
        chk.loss = [&] {
            Graph<double> g(false);
            return dot_all(c, g.val(g.matmul_nt_op(g.leaf(a), g.leaf(bt))));
        };
        chk.analytic = [&] {
            Graph<double> g;
            auto ai = g.leaf(a), bi = g.leaf(bt);
            auto y = g.matmul_nt_op(ai, bi);
            g.grad(y) = c;
            g.backward();
            return std::vector<Mat<double>>{g.grad(ai), g.grad(bi)};
        };
        expect_grads(chk);
    }
}

TEST_CASE("elementwise and structural ops match finite differences") {
    Rng rng(13);
    Mat<double> x = random_mat(rng, 4, 6), y2 = random_mat(rng, 4, 6), p = random_mat(rng, 4, 6);
    SECTION("add / scale") {
        Mat<double> c = random_mat(rng, 4, 6);
        Check chk;
        chk.mats = {&x, &y2, &p};
        chk.loss = [&] {
            Graph<double> g(false);
            auto out = g.scale(g.add_param(g.add(g.leaf(x), g.leaf(y2)), pref(p)), 1.7);
            return dot_all(c, g.val(out));
        };
        chk.analytic = [&] {
            Graph<double> g;
            Mat<double> gp(4, 6);
            auto xi = g.leaf(x), yi = g.leaf(y2);
            auto out = g.scale(g.add_param(g.add(xi, yi), pref(p, gp)), 1.7);
            g.grad(out) = c;
            g.backward();
            return std::vector<Mat<double>>{g.grad(xi), g.grad(yi), gp};
        };
        expect_grads(chk);
    }
    SECTION("rows / cols / transpose / concat") {
        Mat<double> c = random_mat(rng, 2, 4);
        Check chk;
        chk.mats = {&x};
        auto build = [&](Graph<double>& g, Graph<double>::Id xi) {
            auto r = g.rows(xi, 1, 3);                        // 2 x 6
            auto left = g.cols(r, 0, 2), right = g.cols(r, 4, 6);
            auto cat = g.concat_cols({left, right});          // 2 x 4
            return g.transpose_node(g.transpose_node(cat));
        };
        chk.loss = [&] {
            Graph<double> g(false);
            return dot_all(c, g.val(build(g, g.leaf(x))));
        };
        chk.analytic = [&] {
            Graph<double> g;
            auto xi = g.leaf(x);
            auto out = build(g, xi);
            g.grad(out) = c;
            g.backward();
            return std::vector<Mat<double>>{g.grad(xi)};
        };
        expect_grads(chk);
    }
}

TEST_CASE("prepend_row_param and mask_rows match finite differences") {
    Rng rng(14);
    Mat<double> x = random_mat(rng, 3, 5), cls = random_mat(rng, 1, 5), tok = random_mat(rng, 1, 5);
    const std::vector<std::uint8_t> bits = {1, 0, 1};
    Mat<double> c = random_mat(rng, 4, 5);
    Check chk;
    chk.mats = {&x, &cls, &tok};
    chk.loss = [&] {
        Graph<double> g(false);
        auto m = g.mask_rows(g.leaf(x), pref(tok), bits);
        return dot_all(c, g.val(g.prepend_row_param(pref(cls), m)));
    };
    chk.analytic = [&] {
        Graph<double> g;
        Mat<double> gcls(1, 5), gtok(1, 5);
        auto xi = g.leaf(x);
        auto m = g.mask_rows(xi, pref(tok, gtok), bits);
        auto out = g.prepend_row_param(pref(cls, gcls), m);
        g.grad(out) = c;
        g.backward();
        return std::vector<Mat<double>>{g.grad(xi), gcls, gtok};
    };
    expect_grads(chk);
}

TEST_CASE("layernorm and gelu match finite differences") {
    Rng rng(15);
    Mat<double> x = random_mat(rng, 3, 8), gain = random_mat(rng, 1, 8), bias = random_mat(rng, 1, 8);
    for (auto& v : gain.a) v += 1.5;  // keep gains away from zero
    Mat<double> c = random_mat(rng, 3, 8);
    Check chk;
    chk.mats = {&x, &gain, &bias};
    chk.loss = [&] {
        Graph<double> g(false);
        return dot_all(c, g.val(g.gelu(g.layernorm(g.leaf(x), pref(gain), pref(bias)))));
    };
    chk.analytic = [&] {
        Graph<double> g;
        Mat<double> gg(1, 8), gb(1, 8);
        auto xi = g.leaf(x);
        auto out = g.gelu(g.layernorm(xi, pref(gain, gg), pref(bias, gb)));
        g.grad(out) = c;
        g.backward();
        return std::vector<Mat<double>>{g.grad(xi), gg, gb};
    };
    expect_grads(chk);
}

TEST_CASE("masked softmax matches finite differences and zeroes banned slots") {
    Rng rng(16);
    Mat<double> x = random_mat(rng, 3, 4);
    std::vector<std::uint8_t> allowed(12, 1);
    allowed[1] = allowed[7] = allowed[11] = 0;
    Mat<double> c = random_mat(rng, 3, 4);
    {
        Graph<double> g(false);
        const Mat<double> y = g.val(g.softmax_rows(g.leaf(x), allowed));
        CHECK(y.at(0, 1) == 0.0);
        CHECK(y.at(1, 3) == 0.0);
        for (int r = 0; r < 3; ++r) {
            double s = 0;
            for (int cc = 0; cc < 4; ++cc) s += y.at(r, cc);
            CHECK(s == Catch::Approx(1.0).epsilon(1e-12));
        }
    }
    Check chk;
    chk.mats = {&x};
    chk.loss = [&] {
        Graph<double> g(false);
        return dot_all(c, g.val(g.softmax_rows(g.leaf(x), allowed)));
    };
    chk.analytic = [&] {
        Graph<double> g;
        auto xi = g.leaf(x);
        auto out = g.softmax_rows(xi, allowed);
        g.grad(out) = c;
        g.backward();
        return std::vector<Mat<double>>{g.grad(xi)};
    };
    expect_grads(chk);
}

TEST_CASE("embed scatters gradients to the right rows") {
    Rng rng(17);
    Mat<double> table = random_mat(rng, 6, 3);
    const std::vector<int> ids = {4, 0, 4, 2};
    Mat<double> c = random_mat(rng, 4, 3);
    Check chk;
    chk.mats = {&table};
    chk.loss = [&] {
        Graph<double> g(false);
        return dot_all(c, g.val(g.embed(pref(table), ids)));
    };
    chk.analytic = [&] {
        Graph<double> g;
        Mat<double> gt(6, 3);
        auto out = g.embed(pref(table, gt), ids);
        g.grad(out) = c;
        g.backward();
        return std::vector<Mat<double>>{gt};
    };
    expect_grads(chk);

    Graph<double> g(false);
    CHECK_THROWS_AS(g.embed(pref(table), {6}), InputError);
}

TEST_CASE("l2norm_rows matches finite differences and normalizes") {
    Rng rng(18);
    Mat<double> x = random_mat(rng, 2, 5);
    Mat<double> c = random_mat(rng, 2, 5);
    {
        Graph<double> g(false);
        const Mat<double> y = g.val(g.l2norm_rows(g.leaf(x)));
        for (int r = 0; r < 2; ++r) {
            double n = 0;
            for (int j = 0; j < 5; ++j) n += y.at(r, j) * y.at(r, j);
            CHECK(std::sqrt(n) == Catch::Approx(1.0).epsilon(1e-6));
        }
    }
    Check chk;
    chk.mats = {&x};
    chk.loss = [&] {
        Graph<double> g(false);
        return dot_all(c, g.val(g.l2norm_rows(g.leaf(x))));
    };
    chk.analytic = [&] {
        Graph<double> g;
        auto xi = g.leaf(x);
        auto out = g.l2norm_rows(xi);
        g.grad(out) = c;
        g.backward();
        return std::vector<Mat<double>>{g.grad(xi)};
    };
    expect_grads(chk);
}

TEST_CASE("ce_rows matches finite differences") {
    Rng rng(19);
    Mat<double> logits = random_mat(rng, 4, 6);
    const std::vector<int> targets = {2, 0, 5, 1};
    const std::vector<std::uint8_t> mask = {1, 0, 1, 1};
    Check chk;
    chk.mats = {&logits};
    chk.loss = [&] {
        Graph<double> g(false);
        return g.val(g.ce_rows(g.leaf(logits), targets, mask)).at(0, 0);
    };
    chk.analytic = [&] {
        Graph<double> g;
        auto li = g.leaf(logits);
        auto out = g.ce_rows(li, targets, mask);
        g.seed(out, 1.0);
        g.backward();
        return std::vector<Mat<double>>{g.grad(li)};
    };
    expect_grads(chk);

    Graph<double> g(false);
    CHECK_THROWS_AS(g.ce_rows(g.leaf(logits), targets, {0, 0, 0, 0}), InputError);
}

TEST_CASE("l1_masked matches finite differences away from kinks") {
    Rng rng(20);
    Mat<double> pred = random_mat(rng, 4, 5);
    Mat<double> target = random_mat(rng, 4, 5);
    const std::vector<std::uint8_t> bits = {1, 0, 0, 1};
    for (const bool normalize : {true, false}) {
        Check chk;
        chk.mats = {&pred};
        chk.loss = [&, normalize] {
            Graph<double> g(false);
            return g.val(g.l1_masked(g.leaf(pred), target, bits, normalize)).at(0, 0);
        };
        chk.analytic = [&, normalize] {
            Graph<double> g;
            auto pi = g.leaf(pred);
            auto out = g.l1_masked(pi, target, bits, normalize);
            g.seed(out, 1.0);
            g.backward();
            return std::vector<Mat<double>>{g.grad(pi)};
        };
        expect_grads(chk);
    }
    Graph<double> g(false);
    CHECK_THROWS_AS(g.l1_masked(g.leaf(pred), target, {0, 0, 0, 0}, true), InputError);
}

TEST_CASE("scale_by_exp_param matches finite differences and clamps") {
    Rng rng(21);
    Mat<double> x = random_mat(rng, 3, 3);
    Mat<double> t(1, 1);
    t.at(0, 0) = 0.7;
    Mat<double> c = random_mat(rng, 3, 3);
    Check chk;
    chk.mats = {&x, &t};
    chk.loss = [&] {
        Graph<double> g(false);
        return dot_all(c, g.val(g.scale_by_exp_param(g.leaf(x), pref(t), 100.0)));
    };
    chk.analytic = [&] {
        Graph<double> g;
        Mat<double> gt(1, 1);
        auto xi = g.leaf(x);
        auto out = g.scale_by_exp_param(xi, pref(t, gt), 100.0);
        g.grad(out) = c;
        g.backward();
        return std::vector<Mat<double>>{g.grad(xi), gt};
    };
    expect_grads(chk);

    // Beyond the cap the scale gradient is exactly zero.
    t.at(0, 0) = 10.0;  // exp(10) > 100
    Graph<double> g;
    Mat<double> gt(1, 1);
    auto xi = g.leaf(x);
    auto out = g.scale_by_exp_param(xi, pref(t, gt), 100.0);
    CHECK(g.val(out).at(0, 0) == Catch::Approx(100.0 * x.at(0, 0)));
    g.grad(out) = c;
    g.backward();
    CHECK(gt.at(0, 0) == 0.0);
}

TEST_CASE("fan-out accumulates and backward is deterministic") {
    Rng rng(22);
    Mat<double> x = random_mat(rng, 3, 3);
    Mat<double> c = random_mat(rng, 3, 3);
    Check chk;
    chk.mats = {&x};
    chk.loss = [&] {
        Graph<double> g(false);
        auto xi = g.leaf(x);
        return dot_all(c, g.val(g.add(g.gelu(xi), g.scale(xi, 0.5))));
    };
    chk.analytic = [&] {
        Graph<double> g;
        auto xi = g.leaf(x);
        auto out = g.add(g.gelu(xi), g.scale(xi, 0.5));
        g.grad(out) = c;
        g.backward();
        return std::vector<Mat<double>>{g.grad(xi)};
    };
    expect_grads(chk);

    auto run = [&] {
        Graph<double> g;
        auto xi = g.leaf(x);
        auto out = g.add(g.gelu(xi), g.scale(xi, 0.5));
        g.grad(out) = c;
        g.backward();
        return g.grad(xi);
    };
    const Mat<double> g1 = run(), g2 = run();
    CHECK(max_abs_diff(g1, g2) == 0.0);
}
