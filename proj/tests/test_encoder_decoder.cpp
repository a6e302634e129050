#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "nexvitad/backbone.hpp"
#include "nexvitad/decoder.hpp"
#include "nexvitad/fusion.hpp"
#include "nexvitad/grad_check.hpp"
#include "nexvitad/rng.hpp"

using namespace nexvitad;

namespace {

Tensor random_image(int b, int h, int w, Rng& rng) {
    Tensor t({b, h, w, 3});
    for (auto& v : t.data) v = rng.uniform();
    return t;
}

Tensor random_tensor(std::vector<int> dims, Rng& rng, real scale = 1.0) {
    Tensor t(std::move(dims));
    for (auto& v : t.data) v = rng.normal(0.0, scale);
    return t;
}

} // namespace

TEST_CASE("hierarchical encoder shapes and determinism") {
    BackboneConfig cfg;
    HierarchicalEncoder enc(cfg);
    Rng rng(1);
    Tensor img = random_image(2, 64, 64, rng);
    auto pyr = enc.forward(img);
    REQUIRE(pyr.size() == 4);
    CHECK(pyr[0].dims == std::vector<int>{2, 16, 16, 32});
    CHECK(pyr[1].dims == std::vector<int>{2, 8, 8, 64});
    CHECK(pyr[2].dims == std::vector<int>{2, 4, 4, 128});
    CHECK(pyr[3].dims == std::vector<int>{2, 2, 2, 256});

    auto pyr2 = enc.forward(img);
    for (int n = 0; n < 4; ++n) CHECK(pyr[static_cast<std::size_t>(n)].data == pyr2[static_cast<std::size_t>(n)].data);

    Tensor bad = random_image(1, 48, 48, rng);
    CHECK_THROWS_AS(enc.forward(bad), Error);
}

TEST_CASE("dense encoder shapes and constant-field behavior") {
    BackboneConfig cfg;
    DenseEncoder enc(cfg);
    Rng rng(2);
    Tensor img = random_image(1, 64, 64, rng);
    Tensor f = enc.forward(img);
    CHECK(f.dims == std::vector<int>{1, 4, 4, 48});

    Tensor constant({1, 64, 64, 3}, 0.5);
    Tensor fc = enc.forward(constant);
    // interior positions see identical windows; compare the center 2x2
    for (int c = 0; c < 48; ++c) {
        const real ref = fc.at(0, 1, 1, c);
        CHECK(fc.at(0, 1, 2, c) == doctest::Approx(ref).epsilon(1e-12));
        CHECK(fc.at(0, 2, 1, c) == doctest::Approx(ref).epsilon(1e-12));
        CHECK(fc.at(0, 2, 2, c) == doctest::Approx(ref).epsilon(1e-12));
    }
}

TEST_CASE("backbone feature responses are non-degenerate") {
    BackboneConfig cfg;
    HierarchicalEncoder hiera(cfg);
    DenseEncoder dense(cfg);
    Rng rng(3);
    Tensor img = random_image(4, 64, 64, rng);
    auto pyr = hiera.forward(img);
    int total = 0, alive = 0;
    for (const auto& f : pyr) {
        const int c = f.dims.back();
        const std::size_t rows = f.size() / static_cast<std::size_t>(c);
        for (int j = 0; j < c; ++j) {
            real mean = 0.0, sq = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                const real v = f.data[r * static_cast<std::size_t>(c) + static_cast<std::size_t>(j)];
                mean += v;
                sq += v * v;
            }
            mean /= static_cast<real>(rows);
            const real var = sq / static_cast<real>(rows) - mean * mean;
            ++total;
            if (var > 1e-12) ++alive;
        }
    }
    CHECK(static_cast<real>(alive) >= 0.95 * total);
}

TEST_CASE("adapter forward") {
    SUBCASE("zero params act as identity") {
        BackboneConfig cfg;
        FusionParams params = init_fusion_params(cfg, 0);
        for (auto* p : params.trainable()) p->value.zero();
        Rng rng(4);
        Tensor x = random_tensor({2, 8, 8, 32}, rng);
        Tensor y = adapter_forward(x, params.adapters[0], nullptr);
        CHECK(y.data == x.data);
    }
    SUBCASE("minimal bottleneck example") {
        AdapterParams a;
        a.w_down = ParamTensor(Tensor::from({4, 1}, {1, 0, 0, 0}), "w_down");
        a.b_down = ParamTensor(Tensor::from({1}, {0}), "b_down");
        a.w_up = ParamTensor(Tensor::from({1, 4}, {1, 0, 0, 0}), "w_up");
        a.b_up = ParamTensor(Tensor::from({4}, {0, 0, 0, 0}), "b_up");
        Tensor x = Tensor::from({1, 1, 1, 4}, {1, 1, 1, 1});
        Tensor y = adapter_forward(x, a, nullptr);
        CHECK(y.data[0] == doctest::Approx(1.8413447460685429).epsilon(1e-9));
        CHECK(y.data[1] == doctest::Approx(1.0));
        CHECK(y.data[2] == doctest::Approx(1.0));
        CHECK(y.data[3] == doctest::Approx(1.0));
    }
    SUBCASE("shape preserved") {
        BackboneConfig cfg;
        FusionParams params = init_fusion_params(cfg, 1);
        Rng rng(5);
        Tensor x = random_tensor({2, 8, 8, 32}, rng);
        Tensor y = adapter_forward(x, params.adapters[0], nullptr);
        CHECK(y.dims == x.dims);
    }
}

TEST_CASE("projection") {
    ProjectionParams p;
    p.w_proj = ParamTensor(Tensor({3, 4}), "w");
    p.b_proj = ParamTensor(Tensor::from({4}, {1, 2, 3, 4}), "b");
    Rng rng(6);
    Tensor x = random_tensor({1, 2, 2, 3}, rng);
    SUBCASE("zero weights give constant bias channels") {
        Tensor y = project_dense(x, p);
        CHECK(y.dims == std::vector<int>{1, 2, 2, 4});
        for (int i = 0; i < 4; ++i) {
            for (int j = 0; j < 4; ++j) CHECK(y.data[static_cast<std::size_t>(4 * i + j)] == doctest::Approx(j + 1.0));
        }
    }
    SUBCASE("identity passthrough") {
        ProjectionParams id;
        id.w_proj = ParamTensor(Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), "w");
        id.b_proj = ParamTensor(Tensor({3}), "b");
        Tensor y = project_dense(x, id);
        CHECK(y.data == x.data);
    }
}

TEST_CASE("interleave") {
    Tensor a = Tensor::from({1, 1, 1, 2}, {10, 11});
    Tensor b = Tensor::from({1, 1, 1, 2}, {20, 21});
    Tensor f = interleave(a, b);
    CHECK(f.data == std::vector<real>{10, 20, 11, 21});
    auto [ra, rb] = deinterleave(f);
    CHECK(ra.data == a.data);
    CHECK(rb.data == b.data);

    Rng rng(7);
    Tensor x = random_tensor({2, 3, 3, 8}, rng);
    Tensor same = interleave(x, x);
    for (std::size_t i = 0; i + 1 < same.data.size(); i += 2) CHECK(same.data[i] == same.data[i + 1]);
    CHECK(same.dims.back() == 16);
}

TEST_CASE("encode shapes, residual identity, and fused channel counts") {
    BackboneConfig cfg;
    Encoder enc(cfg);
    FusionParams params = init_fusion_params(cfg, 11);
    Rng rng(8);
    Tensor img = random_image(1, 64, 64, rng);
    FusedPyramid fused = encode(enc, params, img, nullptr);
    REQUIRE(fused.scales.size() == 4);
    CHECK(fused.scales[0].dims == std::vector<int>{1, 16, 16, 64});
    CHECK(fused.scales[1].dims == std::vector<int>{1, 8, 8, 128});
    CHECK(fused.scales[2].dims == std::vector<int>{1, 4, 4, 256});
    CHECK(fused.scales[3].dims == std::vector<int>{1, 2, 2, 512});

    // zero adapters: the hierarchical half of the fused map equals the raw
    // backbone features bitwise
    for (auto* p : params.trainable()) p->value.zero();
    FusedPyramid zeroed = encode(enc, params, img, nullptr);
    auto raw = enc.hiera.forward(img);
    for (int n = 0; n < 4; ++n) {
        auto [hiera_half, dense_half] = deinterleave(zeroed.scales[static_cast<std::size_t>(n)]);
        CHECK(hiera_half.data == raw[static_cast<std::size_t>(n)].data);
        for (real v : dense_half.data) CHECK(v == 0.0); // zero projection, zero bias
    }
}

TEST_CASE("finite differences through encode and a scalar readout") {
    BackboneConfig cfg;
    cfg.hiera_dims = {8, 8, 8, 8};
    cfg.d_dino = 6;
    cfg.seed = 3;
    Encoder enc(cfg);
    FusionParams params = init_fusion_params(cfg, 21);
    Rng rng(9);
    Tensor img = random_image(1, 32, 32, rng);
    std::vector<Tensor> weights;
    auto forward = [&](bool with_grad) {
        EncodeCache cache;
        FusedPyramid fused = encode(enc, params, img, with_grad ? &cache : nullptr);
        if (weights.empty()) {
            for (const auto& s : fused.scales) weights.push_back(random_tensor(s.dims, rng));
        }
        real acc = 0.0;
        for (std::size_t n = 0; n < fused.scales.size(); ++n) {
            for (std::size_t i = 0; i < fused.scales[n].data.size(); ++i) {
                acc += fused.scales[n].data[i] * weights[n].data[i];
            }
        }
        if (with_grad) encode_backward(cache, params, weights);
        return acc;
    };
    auto loss_only = [&]() { return forward(false); };
    auto loss_grad = [&]() {
        for (auto* p : params.trainable()) p->zero_grad();
        return forward(true);
    };
    auto report = finite_diff_check(loss_only, loss_grad, params.trainable(), 1e-5);
    CHECK(report.max_rel_err < 1e-4);
    CHECK(report.params_checked == 24);
}

TEST_CASE("decode_stage") {
    Rng rng(31);
    DecodeStageParams stage;
    stage.up_kernel = ParamTensor(random_tensor({2, 2, 3, 4}, rng, 0.3), "up");
    stage.up_bias = ParamTensor(Tensor({3}), "up_bias");
    stage.block.kernel = ParamTensor(random_tensor({3, 3, 5, 6}, rng, 0.3), "conv");
    stage.block.gamma = ParamTensor(Tensor({6}, 1.0), "gamma");
    stage.block.beta = ParamTensor(Tensor({6}), "beta");
    stage.block.running_mean = Tensor({6});
    stage.block.running_var = Tensor({6}, 1.0);

    Tensor coarse = random_tensor({1, 2, 2, 4}, rng);
    Tensor skip = random_tensor({1, 4, 4, 2}, rng);
    Tensor out = decode_stage(coarse, skip, stage, BnMode::Train, false, nullptr);
    CHECK(out.dims == std::vector<int>{1, 4, 4, 6});

    SUBCASE("zero weights give zero output") {
        stage.up_kernel.value.zero();
        stage.block.kernel.value.zero();
        Tensor z = decode_stage(coarse, skip, stage, BnMode::Train, false, nullptr);
        for (real v : z.data) CHECK(v == 0.0);
    }

    SUBCASE("spatial mismatch rejected") {
        Tensor bad_skip = random_tensor({1, 6, 6, 2}, rng);
        CHECK_THROWS_AS(decode_stage(coarse, bad_skip, stage, BnMode::Train, false, nullptr), Error);
    }

    SUBCASE("gradient check through one stage") {
        std::vector<ParamTensor*> params = {&stage.up_kernel, &stage.up_bias, &stage.block.kernel,
                                            &stage.block.gamma, &stage.block.beta};
        Tensor weights = random_tensor({1, 4, 4, 6}, rng);
        auto loss_only = [&]() {
            Tensor y = decode_stage(coarse, skip, stage, BnMode::Train, false, nullptr);
            real acc = 0.0;
            for (std::size_t i = 0; i < y.data.size(); ++i) acc += y.data[i] * weights.data[i];
            return acc;
        };
        auto loss_grad = [&]() {
            for (auto* p : params) p->zero_grad();
            DecodeStageCache cache;
            Tensor y = decode_stage(coarse, skip, stage, BnMode::Train, false, &cache);
            real acc = 0.0;
            for (std::size_t i = 0; i < y.data.size(); ++i) acc += y.data[i] * weights.data[i];
            decode_stage_backward(stage, cache, weights, nullptr, nullptr);
            return acc;
        };
        auto report = finite_diff_check(loss_only, loss_grad, params, 1e-5);
        CHECK(report.max_rel_err < 1e-4);
    }
}

namespace {

FusedPyramid tiny_pyramid(Rng& rng, int channels) {
    FusedPyramid pyr;
    pyr.scales.push_back(random_tensor({1, 8, 8, channels}, rng));
    pyr.scales.push_back(random_tensor({1, 4, 4, channels}, rng));
    pyr.scales.push_back(random_tensor({1, 2, 2, channels}, rng));
    pyr.scales.push_back(random_tensor({1, 1, 1, channels}, rng));
    return pyr;
}

} // namespace

TEST_CASE("head_forward output shape, determinism, and head independence") {
    BackboneConfig cfg;
    Encoder enc(cfg);
    FusionParams params = init_fusion_params(cfg, 31);
    Rng rng(32);
    Tensor img = random_image(1, 64, 64, rng);
    FusedPyramid fused = encode(enc, params, img, nullptr);

    Rng head_rng(33);
    DecoderHead head_a = make_decoder_head({64, 128, 256, 512}, {64, 32, 16}, "a", head_rng);
    DecoderHead head_b = make_decoder_head({64, 128, 256, 512}, {64, 32, 16}, "b", head_rng);

    Tensor logits = head_forward(head_a, fused, 64, 64, BnMode::Train, false, nullptr);
    CHECK(logits.dims == std::vector<int>{1, 2, 64, 64});

    Tensor logits2 = head_forward(head_a, fused, 64, 64, BnMode::Train, false, nullptr);
    CHECK(logits.data == logits2.data);

    Tensor logits_b = head_forward(head_b, fused, 64, 64, BnMode::Train, false, nullptr);
    CHECK(logits.data != logits_b.data);

    // mutating head_b leaves head_a's output untouched
    head_b.out_bias.value.fill(3.0);
    Tensor logits3 = head_forward(head_a, fused, 64, 64, BnMode::Train, false, nullptr);
    CHECK(logits.data == logits3.data);
}

TEST_CASE("gradient check through a full decoder head") {
    Rng rng(41);
    FusedPyramid pyr = tiny_pyramid(rng, 6);
    Rng head_rng(42);
    DecoderHead head = make_decoder_head({6, 6, 6, 6}, {5, 4, 3}, "h", head_rng);
    Tensor weights = random_tensor({1, 2, 16, 16}, rng);
    auto params = head.trainable();
    auto loss_only = [&]() {
        Tensor y = head_forward(head, pyr, 16, 16, BnMode::Train, false, nullptr);
        real acc = 0.0;
        for (std::size_t i = 0; i < y.data.size(); ++i) acc += y.data[i] * weights.data[i];
        return acc;
    };
    auto loss_grad = [&]() {
        for (auto* p : params) p->zero_grad();
        HeadCache cache;
        Tensor y = head_forward(head, pyr, 16, 16, BnMode::Train, false, &cache);
        real acc = 0.0;
        for (std::size_t i = 0; i < y.data.size(); ++i) acc += y.data[i] * weights.data[i];
        head_backward(head, cache, weights, nullptr);
        return acc;
    };
    auto report = finite_diff_check(loss_only, loss_grad, params, 1e-5);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("pseudo head") {
    Rng rng(51);
    PseudoLabelHead head = make_pseudo_head(16, "p", rng);

    SUBCASE("channel schedule") {
        CHECK(head.w1.value.dims == std::vector<int>{16, 64});
        CHECK(head.w2.value.dims == std::vector<int>{64, 32});
        CHECK(head.w3.value.dims == std::vector<int>{32, 2});
    }

    SUBCASE("spatially constant features give spatially constant logits") {
        Tensor f4({1, 2, 2, 16});
        for (int c = 0; c < 16; ++c) {
            for (int y = 0; y < 2; ++y)
                for (int x = 0; x < 2; ++x) f4.at(0, y, x, c) = 0.1 * c;
        }
        Tensor logits = pseudo_head_forward(head, f4, 8, 8, nullptr);
        CHECK(logits.dims == std::vector<int>{1, 2, 8, 8});
        for (int c = 0; c < 2; ++c) {
            const real ref = logits.at(0, c, 0, 0);
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x) CHECK(logits.at(0, c, y, x) == doctest::Approx(ref).epsilon(1e-12));
        }
    }

    SUBCASE("pointwise: permuting spatial positions permutes logits") {
        Tensor f4 = random_tensor({1, 2, 2, 16}, rng);
        Tensor swapped = f4;
        for (int c = 0; c < 16; ++c) {
            std::swap(swapped.at(0, 0, 0, c), swapped.at(0, 1, 1, c));
        }
        Tensor a = pseudo_head_forward(head, f4, 2, 2, nullptr);
        Tensor b = pseudo_head_forward(head, swapped, 2, 2, nullptr);
        for (int c = 0; c < 2; ++c) {
            CHECK(a.at(0, c, 0, 0) == doctest::Approx(b.at(0, c, 1, 1)).epsilon(1e-12));
            CHECK(a.at(0, c, 1, 1) == doctest::Approx(b.at(0, c, 0, 0)).epsilon(1e-12));
            CHECK(a.at(0, c, 0, 1) == doctest::Approx(b.at(0, c, 0, 1)).epsilon(1e-12));
        }
    }

    SUBCASE("gradient check") {
        Tensor f4 = random_tensor({1, 2, 2, 16}, rng);
        Tensor weights = random_tensor({1, 2, 4, 4}, rng);
        auto params = head.trainable();
        auto loss_only = [&]() {
            Tensor y = pseudo_head_forward(head, f4, 4, 4, nullptr);
            real acc = 0.0;
            for (std::size_t i = 0; i < y.data.size(); ++i) acc += y.data[i] * weights.data[i];
            return acc;
        };
        auto loss_grad = [&]() {
            for (auto* p : params) p->zero_grad();
            PseudoHeadCache cache;
            Tensor y = pseudo_head_forward(head, f4, 4, 4, &cache);
            real acc = 0.0;
            for (std::size_t i = 0; i < y.data.size(); ++i) acc += y.data[i] * weights.data[i];
            pseudo_head_backward(head, cache, weights, nullptr);
            return acc;
        };
        auto report = finite_diff_check(loss_only, loss_grad, params, 1e-5);
        CHECK(report.max_rel_err < 1e-4);
    }
}

TEST_CASE("make_pseudo_labels") {
    SUBCASE("confident pixel gets its argmax label") {
        Tensor logits = Tensor::from({2, 1, 1}, {2.0, 0.0});
        PseudoLabelMap map = make_pseudo_labels(logits, 0.7);
        CHECK(map.labels.at(0, 0) == 0.0);
        CHECK(map.confidence.at(0, 0) == doctest::Approx(0.8807970779778823));
    }
    SUBCASE("uncertain pixel ignored") {
        Tensor logits = Tensor::from({2, 1, 1}, {0.5, 0.5});
        PseudoLabelMap map = make_pseudo_labels(logits, 0.7);
        CHECK(map.labels.at(0, 0) == kIgnoreLabel);
    }
    SUBCASE("threshold is strict: equality ignored") {
        Tensor logits = Tensor::from({2, 1, 1}, {1.3, 0.2});
        PseudoLabelMap probe = make_pseudo_labels(logits, 0.0);
        const real conf = probe.confidence.at(0, 0);
        PseudoLabelMap map = make_pseudo_labels(logits, conf);
        CHECK(map.labels.at(0, 0) == kIgnoreLabel);
    }
    SUBCASE("coverage is monotone in theta") {
        Rng rng(61);
        Tensor logits = random_tensor({2, 8, 8}, rng, 1.5);
        real prev_frac = 1.1;
        for (real theta : {0.5, 0.6, 0.7, 0.8, 0.9, 0.99}) {
            PseudoLabelMap map = make_pseudo_labels(logits, theta);
            const real frac = map.valid_fraction();
            CHECK(frac <= prev_frac);
            prev_frac = frac;
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x) {
                    const bool valid = map.labels.at(y, x) != kIgnoreLabel;
                    CHECK(valid == (map.confidence.at(y, x) > theta));
                }
        }
    }
}

TEST_CASE("head bank layout") {
    HeadBank bank = make_head_bank({0, 1, 2}, {3, 4}, {64, 128, 256, 512}, {16, 8, 4}, false, 1);
    CHECK(bank.source_heads.size() == 3);
    CHECK(bank.target_seg_heads.size() == 2);
    CHECK(bank.target_pseudo_heads.size() == 2);
    CHECK(bank.head_count() == 3 + 2 * 2);
    CHECK(bank.source_route.at(1) == 1);
    CHECK(bank.target_route.at(4) == 1);

    HeadBank shared = make_head_bank({0, 1, 2}, {3}, {64, 128, 256, 512}, {16, 8, 4}, true, 1);
    CHECK(shared.source_heads.size() == 1);
    CHECK(shared.source_route.at(0) == 0);
    CHECK(shared.source_route.at(2) == 0);
}
