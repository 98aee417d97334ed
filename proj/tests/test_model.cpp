#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"

using namespace sycoca;
using namespace testutil;

TEST_CASE("init_params: determinism, distribution, and logit scale") {
    ModelConfig cfg = micro_config();
    cfg.vocab_size = 2048;  // tok_emb = 2048 x 16 = 32768; push d up for a bigger array
    cfg.d_model = 64;
    cfg.n_heads = 4;
    cfg.embed_dim = 16;

    const auto a = init_params<double>(cfg, 7);
    const auto b = init_params<double>(cfg, 7);
    const auto c = init_params<double>(cfg, 8);
    CHECK(a.tok_emb.a == b.tok_emb.a);
    CHECK(a.img_enc[0].self.wq.a == b.img_enc[0].self.wq.a);
    CHECK(a.tok_emb.a != c.tok_emb.a);

    // tok_emb holds 131072 samples of N(0, 0.01^2)
    const std::size_t n = a.tok_emb.a.size();
    REQUIRE(n >= 100000);
    double mean = 0;
    for (double v : a.tok_emb.a) mean += v;
    mean /= static_cast<double>(n);
    double var = 0;
    for (double v : a.tok_emb.a) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n - 1);
    CHECK(std::abs(mean) < 3.0 * 0.01 / std::sqrt(static_cast<double>(n)));
    CHECK(std::sqrt(var) == Catch::Approx(0.01).epsilon(0.05));

    // biases zero, gains one, log temperature = ln(1/0.07)
    CHECK(a.patch_proj_b.at(0, 5) == 0.0);
    CHECK(a.img_enc[0].ln1_g.at(0, 3) == 1.0);
    CHECK(std::exp(a.log_logit_scale.at(0, 0)) == Catch::Approx(1.0 / 0.07).epsilon(1e-12));
}

TEST_CASE("micro-forward oracle: encode_image matches the dense reference") {
    Rng rng(51);
    SECTION("P = 1, single position") {
        ModelConfig cfg = micro_config();
        cfg.image_hw = 4;
        cfg.patch_size = 4;  // P = 1
        const auto params = random_params<double>(cfg, 3);
        const PatchGrid grid = random_grid(rng, 4, 4);
        const Mat<double> got = encode_image(params, grid);
        const Mat<double> want = ref::encode_image(params, grid, nullptr);
        REQUIRE(got.rows == 2);
        CHECK(max_abs_diff(got, want) < 1e-10);
    }
    SECTION("P = 4 with a high mask") {
        const ModelConfig cfg = micro_config();
        const auto params = random_params<double>(cfg, 4);
        const PatchGrid grid = random_grid(rng, cfg.image_hw, cfg.patch_size);
        const MaskMap mask{{1, 0, 0, 1}, MaskKind::High};
        const Mat<double> got = encode_image(params, grid, &mask);
        const Mat<double> want = ref::encode_image(params, grid, &mask);
        CHECK(max_abs_diff(got, want) < 1e-10);
    }
}

TEST_CASE("micro-forward oracle: encode_text matches the dense reference") {
    const ModelConfig cfg = micro_config();
    const auto params = random_params<double>(cfg, 5);
    SECTION("single content token") {
        const TokenSequence seq = toy_sequence({7}, cfg.max_text_len);
        const Mat<double> got = encode_text(params, seq);
        const Mat<double> want = ref::encode_text(params, seq);
        CHECK(max_abs_diff(got, want) < 1e-10);
    }
    SECTION("several tokens") {
        const TokenSequence seq = toy_sequence({7, 12, 30, 9}, cfg.max_text_len);
        CHECK(max_abs_diff(encode_text(params, seq), ref::encode_text(params, seq)) < 1e-10);
    }
}

TEST_CASE("micro-forward oracle: image decoder matches the dense reference") {
    Rng rng(52);
    const ModelConfig cfg = micro_config();
    const auto params = random_params<double>(cfg, 6);
    const PatchGrid grid = random_grid(rng, cfg.image_hw, cfg.patch_size);
    const TokenSequence seq = toy_sequence({4, 9}, cfg.max_text_len);
    const MaskMap mask{{1, 1, 0, 0}, MaskKind::High};

    const Mat<double> hidden = encode_image(params, grid, &mask);
    const Mat<double> memory = encode_text(params, seq);
    for (bool use_cross : {true, false}) {
        const Mat<double> got = decode_image_pixels(params, hidden, memory, seq.pad_mask, use_cross);
        const Mat<double> want = ref::decode_image_pixels(params, hidden, memory, seq.pad_mask, use_cross);
        REQUIRE(got.rows == cfg.num_patches());
        REQUIRE(got.cols == cfg.patch_dim());
        CHECK(max_abs_diff(got, want) < 1e-10);
    }
}

TEST_CASE("text encoder causality is bitwise") {
    const ModelConfig cfg = micro_config();
    const auto params = random_params<double>(cfg, 7);
    const TokenSequence base = toy_sequence({6, 7, 8, 9}, cfg.max_text_len);
    TokenSequence perturbed = base;
    const int j = 3;  // perturb the third content token (position 3)
    perturbed.ids[j] = 25;

    const Mat<double> a = encode_text(params, base);
    const Mat<double> b = encode_text(params, perturbed);
    for (int r = 0; r < j; ++r)
        for (int c = 0; c < cfg.d_model; ++c) REQUIRE(a.at(r, c) == b.at(r, c));
    // and the perturbation is visible at and after j
    double diff = 0;
    for (int c = 0; c < cfg.d_model; ++c) diff += std::abs(a.at(j, c) - b.at(j, c));
    CHECK(diff > 0);
}

TEST_CASE("PAD positions are isolated") {
    const ModelConfig cfg = micro_config();
    const auto params = random_params<double>(cfg, 8);
    const TokenSequence base = toy_sequence({6, 7}, cfg.max_text_len);

    SECTION("garbage ids in the PAD region leave non-PAD outputs bitwise identical") {
        TokenSequence garbage = base;
        for (int i = base.length; i < base.max_len(); ++i)
            garbage.ids[static_cast<std::size_t>(i)] = 19;  // still PAD per pad_mask
        const Mat<double> a = encode_text(params, base);
        const Mat<double> b = encode_text(params, garbage);
        for (int r = 0; r < base.length; ++r)
            for (int c = 0; c < cfg.d_model; ++c) REQUIRE(a.at(r, c) == b.at(r, c));
    }
    SECTION("perturbing the PAD embedding row leaves non-PAD outputs bitwise identical") {
        auto moved = params;
        for (int c = 0; c < cfg.d_model; ++c) moved.tok_emb.at(kPadId, c) += 3.25;
        const Mat<double> a = encode_text(params, base);
        const Mat<double> b = encode_text(moved, base);
        for (int r = 0; r < base.length; ++r)
            for (int c = 0; c < cfg.d_model; ++c) REQUIRE(a.at(r, c) == b.at(r, c));
    }
    SECTION("image decoder ignores PAD text memory") {
        Rng rng(53);
        const PatchGrid grid = random_grid(rng, cfg.image_hw, cfg.patch_size);
        const MaskMap mask{{1, 0, 1, 0}, MaskKind::High};
        const Mat<double> hidden = encode_image(params, grid, &mask);
        Mat<double> memory = encode_text(params, base);
        const Mat<double> a = decode_image_pixels(params, hidden, memory, base.pad_mask);
        for (int r = base.length; r < memory.rows; ++r)
            for (int c = 0; c < memory.cols; ++c) memory.at(r, c) = 123.0 + r + c;
        const Mat<double> b = decode_image_pixels(params, hidden, memory, base.pad_mask);
        REQUIRE(a.a == b.a);
    }
}

TEST_CASE("mask substitution semantics") {
    Rng rng(54);
    const ModelConfig cfg = micro_config();
    const auto params = random_params<double>(cfg, 9);
    const PatchGrid grid = random_grid(rng, cfg.image_hw, cfg.patch_size);

    SECTION("all-zero mask equals no mask bitwise") {
        const MaskMap none{{0, 0, 0, 0}, MaskKind::High};
        CHECK(encode_image(params, grid, &none).a == encode_image(params, grid).a);
    }
    SECTION("all-ones mask is invariant to pixel content") {
        const MaskMap full{{1, 1, 1, 1}, MaskKind::High};
        PatchGrid other = grid;
        for (auto& v : other.patches.a) v = 1.0f - v;
        CHECK(encode_image(params, grid, &full).a == encode_image(params, other, &full).a);
    }
    SECTION("mask length must match P") {
        const MaskMap bad{{1, 0}, MaskKind::High};
        CHECK_THROWS_AS(encode_image(params, grid, &bad), ConfigError);
    }
}

TEST_CASE("joint projections: unit norm, direction invariance, hand value") {
    const ModelConfig cfg = micro_config();
    const auto params = random_params<double>(cfg, 10);
    Rng rng(55);
    Mat<double> h = random_mat(rng, 1, cfg.d_model);

    const Mat<double> z = project_image(params, h);
    double n = 0;
    for (int c = 0; c < z.cols; ++c) n += z.at(0, c) * z.at(0, c);
    CHECK(std::sqrt(n) == Catch::Approx(1.0).margin(1e-7));

    Mat<double> h2 = h;
    for (auto& v : h2.a) v *= 2.0;
    const Mat<double> z2 = project_image(params, h2);
    CHECK(max_abs_diff(z, z2) < 1e-9);

    // Hand-checked 2x2 case: W = [[1,0],[0,2]], v = (3,4) -> Wv = (3,8),
    // ||Wv|| = sqrt(73), z = (3,8)/sqrt(73).
    ModelConfig tiny = micro_config();
    tiny.d_model = 2;
    tiny.n_heads = 1;
    tiny.embed_dim = 2;
    auto tp = make_parameters<double>(tiny);
    tp.proj_txt_w.at(0, 0) = 1.0;
    tp.proj_txt_w.at(1, 1) = 2.0;
    Mat<double> v(1, 2);
    v.at(0, 0) = 3.0;
    v.at(0, 1) = 4.0;
    const Mat<double> zt = project_text(tp, v);
    CHECK(zt.at(0, 0) == Catch::Approx(3.0 / std::sqrt(73.0)).margin(1e-9));
    CHECK(zt.at(0, 1) == Catch::Approx(8.0 / std::sqrt(73.0)).margin(1e-9));
}

TEST_CASE("text decoder: restriction semantics, causality, and degenerate head") {
    Rng rng(56);
    const ModelConfig cfg = micro_config();
    auto params = random_params<double>(cfg, 11);
    const PatchGrid grid = random_grid(rng, cfg.image_hw, cfg.patch_size);
    const TokenSequence seq = toy_sequence({5, 6, 7}, cfg.max_text_len);
    const Mat<double> text_hidden = encode_text(params, seq);
    const Mat<double> memory = encode_image(params, grid);
    const int p1 = cfg.num_patches() + 1;

    SECTION("all-false memory_keep is an input error") {
        CHECK_THROWS_AS(decode_text_logits(params, text_hidden, memory,
                                           std::vector<std::uint8_t>(p1, 0), seq.pad_mask),
                        InputError);
    }
    SECTION("an excluded slot's content is irrelevant; an included slot contributes") {
        std::vector<std::uint8_t> keep(static_cast<std::size_t>(p1), 1);
        keep[2] = 0;
        Mat<double> mangled = memory;
        for (int c = 0; c < memory.cols; ++c) mangled.at(2, c) = -7.0 + c;
        const Mat<double> a = decode_text_logits(params, text_hidden, memory, keep, seq.pad_mask);
        const Mat<double> b = decode_text_logits(params, text_hidden, mangled, keep, seq.pad_mask);
        REQUIRE(a.a == b.a);

        const std::vector<std::uint8_t> full(static_cast<std::size_t>(p1), 1);
        const Mat<double> c = decode_text_logits(params, text_hidden, memory, full, seq.pad_mask);
        CHECK(max_abs_diff(a, c) > 0);
    }
    SECTION("causality: perturbing hidden position j leaves earlier logits bitwise") {
        const std::vector<std::uint8_t> keep(static_cast<std::size_t>(p1), 1);
        Mat<double> perturbed = text_hidden;
        const int j = 2;
        for (int c = 0; c < perturbed.cols; ++c) perturbed.at(j, c) += 0.25;
        const Mat<double> a = decode_text_logits(params, text_hidden, memory, keep, seq.pad_mask);
        const Mat<double> b = decode_text_logits(params, perturbed, memory, keep, seq.pad_mask);
        for (int r = 0; r < j; ++r)
            for (int c = 0; c < a.cols; ++c) REQUIRE(a.at(r, c) == b.at(r, c));
    }
    SECTION("zeroed token head gives all-zero logits (uniform softmax)") {
        params.token_head_w.fill(0.0);
        params.token_head_b.fill(0.0);
        const std::vector<std::uint8_t> keep(static_cast<std::size_t>(p1), 1);
        const Mat<double> logits =
            decode_text_logits(params, text_hidden, memory, keep, seq.pad_mask);
        for (double v : logits.a) REQUIRE(v == 0.0);
    }
}

TEST_CASE("zeroed pixel head predicts zero and the masked L1 is the target mean") {
    Rng rng(57);
    const ModelConfig cfg = micro_config();
    auto params = random_params<double>(cfg, 12);
    params.pixel_head_w.fill(0.0);
    params.pixel_head_b.fill(0.0);
    const PatchGrid grid = random_grid(rng, cfg.image_hw, cfg.patch_size);
    const TokenSequence seq = toy_sequence({5}, cfg.max_text_len);
    const MaskMap mask{{1, 0, 1, 0}, MaskKind::High};
    const Mat<double> pred = decode_image_pixels(params, encode_image(params, grid, &mask),
                                                 encode_text(params, seq), seq.pad_mask);
    for (double v : pred.a) REQUIRE(v == 0.0);

    const Mat<double> target = widen<double>(grid.patches);
    double expect = 0;
    for (int c = 0; c < target.cols; ++c) expect += target.at(0, c) + target.at(2, c);
    expect /= 2.0 * target.cols;
    CHECK(tgmim_loss(pred, target, mask) == Catch::Approx(expect).margin(1e-12));
}
