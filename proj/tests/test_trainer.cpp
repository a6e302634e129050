#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "nexvitad/datagen.hpp"
#include "nexvitad/trainer.hpp"

using namespace nexvitad;

namespace {

// tiny desk setup shared by the loop tests
struct TinyRun {
    ModelConfig mcfg;
    DatasetSplit data;

    explicit TinyRun(std::uint64_t seed = 11) {
        mcfg.backbone.hiera_dims = {8, 8, 8, 8};
        mcfg.backbone.d_dino = 8;
        mcfg.backbone.seed = 5;
        mcfg.decoder_channels = {8, 6, 4};
        mcfg.source_classes = {0, 1};
        mcfg.target_classes = {2};
        mcfg.init_seed = 13;

        std::vector<ImageSample> dataset;
        for (int c = 0; c < 3; ++c) {
            auto samples = synth_class(c, seed, 8, 4, 64);
            for (auto& s : samples) dataset.push_back(std::move(s));
        }
        SplitConfig scfg;
        scfg.source_classes = {0, 1};
        scfg.target_classes = {2};
        scfg.seed = seed;
        data = make_split(dataset, scfg, 3);
    }

    TrainConfig train_cfg() const {
        TrainConfig cfg;
        cfg.epochs = 4;
        cfg.warmup_epochs = 1;
        cfg.batch_size = 4;
        cfg.phase1_epochs = 2;
        cfg.pseudo_refresh_every = 2;
        cfg.base_lr = 1e-3;
        cfg.seed = 21;
        return cfg;
    }
};

PseudoLabelMap labels_from(const std::vector<real>& values, int h, int w) {
    PseudoLabelMap map;
    map.labels = Tensor::from({h, w}, values);
    map.confidence = Tensor({h, w}, 1.0);
    return map;
}

} // namespace

TEST_CASE("source_ce_loss examples") {
    SUBCASE("perfect prediction approaches zero") {
        Tensor logits({1, 2, 2, 2});
        Tensor mask({2, 2});
        mask.at(0, 0) = 1.0;
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 2; ++x) {
                const bool pos = mask.at(y, x) > 0.5;
                logits.at(0, 0, y, x) = pos ? -20.0 : 20.0;
                logits.at(0, 1, y, x) = pos ? 20.0 : -20.0;
            }
        CHECK(source_ce_loss(logits, {&mask}, nullptr) == doctest::Approx(0.0).epsilon(1e-8));
    }
    SUBCASE("uniform prediction gives ln 2") {
        Tensor logits({1, 2, 4, 4});
        Tensor mask({4, 4});
        mask.at(1, 1) = 1.0;
        CHECK(source_ce_loss(logits, {&mask}, nullptr) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    }
    SUBCASE("duplicating the batch leaves the mean unchanged") {
        Rng rng(1);
        Tensor logits({1, 2, 4, 4});
        for (auto& v : logits.data) v = rng.normal(0.0, 1.0);
        Tensor mask({4, 4});
        mask.at(2, 3) = 1.0;
        const real single = source_ce_loss(logits, {&mask}, nullptr);
        Tensor doubled({2, 2, 4, 4});
        std::copy(logits.data.begin(), logits.data.end(), doubled.data.begin());
        std::copy(logits.data.begin(), logits.data.end(), doubled.data.begin() + 32);
        CHECK(source_ce_loss(doubled, {&mask, &mask}, nullptr) == doctest::Approx(single).epsilon(1e-12));
    }
    SUBCASE("empty batch rejected") {
        Tensor logits({1, 2, 2, 2});
        CHECK_THROWS_AS(source_ce_loss(logits, {}, nullptr), Error);
    }
    SUBCASE("gradient matches finite differences") {
        Rng rng(2);
        Tensor logits({1, 2, 3, 3});
        for (auto& v : logits.data) v = rng.normal(0.0, 1.0);
        Tensor mask({3, 3});
        mask.at(0, 1) = 1.0;
        Tensor grad(logits.dims);
        source_ce_loss(logits, {&mask}, &grad);
        const real h = 1e-6;
        for (std::size_t i = 0; i < logits.data.size(); i += 3) {
            const real saved = logits.data[i];
            logits.data[i] = saved + h;
            const real up = source_ce_loss(logits, {&mask}, nullptr);
            logits.data[i] = saved - h;
            const real dn = source_ce_loss(logits, {&mask}, nullptr);
            logits.data[i] = saved;
            CHECK(std::abs((up - dn) / (2 * h) - grad.data[i]) < 1e-6);
        }
    }
}

TEST_CASE("target_ce_loss examples") {
    SUBCASE("all pixels ignored gives zero") {
        Tensor logits({2, 2, 2});
        PseudoLabelMap map = labels_from({kIgnoreLabel, kIgnoreLabel, kIgnoreLabel, kIgnoreLabel}, 2, 2);
        CHECK(target_ce_loss(logits, map, nullptr) == 0.0);
    }
    SUBCASE("perfect prediction on valid pixels gives zero") {
        Tensor logits({2, 1, 2});
        logits.at(1, 0, 0) = 25.0;
        logits.at(0, 0, 1) = 25.0;
        PseudoLabelMap map = labels_from({1.0, 0.0}, 1, 2);
        CHECK(target_ce_loss(logits, map, nullptr) == doctest::Approx(0.0).epsilon(1e-9));
    }
    SUBCASE("one valid pixel at p=0.5 gives ln 2") {
        Tensor logits({2, 2, 1});
        PseudoLabelMap map = labels_from({1.0, kIgnoreLabel}, 2, 1);
        CHECK(target_ce_loss(logits, map, nullptr) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    }
}

TEST_CASE("consistency_mse_loss examples") {
    SUBCASE("matching predictions give zero") {
        Tensor prob = Tensor::from({1, 2}, {1.0, 0.0});
        PseudoLabelMap map = labels_from({1.0, 0.0}, 1, 2);
        CHECK(consistency_mse_loss(prob, map, nullptr) == doctest::Approx(0.0));
    }
    SUBCASE("single pixel full miss gives one") {
        Tensor prob = Tensor::from({1, 1}, {1.0});
        PseudoLabelMap map = labels_from({0.0}, 1, 1);
        CHECK(consistency_mse_loss(prob, map, nullptr) == doctest::Approx(1.0));
    }
    SUBCASE("two pixels with diffs 0.5 give 0.25") {
        Tensor prob = Tensor::from({1, 2}, {0.5, 0.5});
        PseudoLabelMap map = labels_from({0.0, 1.0}, 1, 2);
        CHECK(consistency_mse_loss(prob, map, nullptr) == doctest::Approx(0.25));
    }
    SUBCASE("empty valid set is a defined zero") {
        Tensor prob = Tensor::from({1, 1}, {0.7});
        PseudoLabelMap map = labels_from({kIgnoreLabel}, 1, 1);
        CHECK(consistency_mse_loss(prob, map, nullptr) == 0.0);
    }
}

TEST_CASE("total_loss") {
    LossWeights w;
    w.lambda1 = 1.0;
    w.lambda2 = 0.5;
    CHECK(total_loss(0.6931, 0.6931, 0.25, w) == doctest::Approx(1.5112).epsilon(1e-4));
    LossWeights off;
    off.lambda1 = 0.0;
    off.lambda2 = 0.0;
    CHECK(total_loss(0.42, 9.0, 9.0, off) == doctest::Approx(0.42));
    // linearity in each component
    LossWeights unit;
    const real base = total_loss(1.0, 2.0, 3.0, unit);
    CHECK(total_loss(2.0, 2.0, 3.0, unit) == doctest::Approx(base + 1.0));
    CHECK(total_loss(1.0, 4.0, 3.0, unit) == doctest::Approx(base + 2.0 * unit.lambda1));
}

TEST_CASE("augment and restore") {
    Rng rng(3);
    Tensor plane({16, 16});
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) plane.at(y, x) = 0.5 + 0.4 * std::sin(0.3 * x) * std::cos(0.25 * y);

    SUBCASE("flips are exactly invertible") {
        for (AugmentOp op : {AugmentOp::HFlip, AugmentOp::VFlip, AugmentOp::Rot180}) {
            AugmentRecord rec;
            rec.op = op;
            rec.orig_h = 16;
            rec.orig_w = 16;
            Tensor round = restore_plane(augment_plane(plane, rec), rec);
            CHECK(round.data == plane.data);
        }
    }
    SUBCASE("four rot90 applications are the identity") {
        AugmentRecord rec;
        rec.op = AugmentOp::Rot90;
        rec.orig_h = 16;
        rec.orig_w = 16;
        Tensor x = plane;
        for (int i = 0; i < 4; ++i) x = augment_plane(x, rec);
        CHECK(x.data == plane.data);
        Tensor round = restore_plane(augment_plane(plane, rec), rec);
        CHECK(round.data == plane.data);
    }
    SUBCASE("scale 1.25 round trip stays within 0.05 on smooth fields") {
        AugmentRecord rec;
        rec.op = AugmentOp::Scale;
        rec.orig_h = 16;
        rec.orig_w = 16;
        rec.scaled_h = 20;
        rec.scaled_w = 20;
        Tensor round = restore_plane(augment_plane(plane, rec), rec);
        real worst = 0.0;
        for (std::size_t i = 0; i < plane.data.size(); ++i) {
            worst = std::max(worst, std::abs(round.data[i] - plane.data[i]));
        }
        CHECK(worst < 0.05);
    }
    SUBCASE("restore adjoint matches finite differences through the restored map") {
        for (AugmentOp op : {AugmentOp::HFlip, AugmentOp::Rot90, AugmentOp::Scale}) {
            AugmentRecord rec;
            rec.op = op;
            rec.orig_h = 6;
            rec.orig_w = 6;
            rec.scaled_h = 8;
            rec.scaled_w = 8;
            Tensor aug = augment_plane(plane, rec);
            Tensor small({rec.op == AugmentOp::Scale ? 8 : 6, rec.op == AugmentOp::Scale ? 8 : 6});
            for (auto& v : small.data) v = rng.uniform();
            Tensor weights({6, 6});
            for (auto& v : weights.data) v = rng.normal(0.0, 1.0);
            auto value = [&]() {
                Tensor restored = restore_plane(small, rec);
                real acc = 0.0;
                for (std::size_t i = 0; i < restored.data.size(); ++i) acc += restored.data[i] * weights.data[i];
                return acc;
            };
            Tensor adj = restore_plane_adjoint(weights, rec);
            const real h = 1e-6;
            for (std::size_t i = 0; i < small.data.size(); i += 7) {
                const real saved = small.data[i];
                small.data[i] = saved + h;
                const real up = value();
                small.data[i] = saved - h;
                const real dn = value();
                small.data[i] = saved;
                CHECK(std::abs((up - dn) / (2 * h) - adj.data[i]) < 1e-6);
            }
        }
    }
    SUBCASE("image geometry matches plane geometry per channel") {
        Tensor img({8, 8, 3});
        Rng r2(4);
        for (auto& v : img.data) v = r2.uniform();
        AugmentRecord rec;
        rec.op = AugmentOp::Rot270;
        rec.orig_h = 8;
        rec.orig_w = 8;
        Tensor aug = augment_image(img, rec);
        for (int c = 0; c < 3; ++c) {
            Tensor chan({8, 8});
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x) chan.at(y, x) = img.at(y, x, c);
            Tensor aug_chan = augment_plane(chan, rec);
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x) CHECK(aug.at(y, x, c) == aug_chan.at(y, x));
        }
    }
}

TEST_CASE("training loop: determinism, learning signal, frozen backbones, resume") {
    TinyRun run;
    TrainConfig cfg = run.train_cfg();

    Model model_a(run.mcfg);
    const std::uint64_t backbone_before = model_a.backbone_checksum();
    TrainerState state_a = init_trainer_state(model_a, cfg);
    TrainResult res_a = train(model_a, run.data, cfg, state_a);
    REQUIRE(res_a.logs.size() == 4);
    CHECK(model_a.backbone_checksum() == backbone_before);
    for (const auto& log : res_a.logs) {
        CHECK(std::isfinite(log.loss_source));
        CHECK(log.valid_pixel_frac >= 0.0);
        CHECK(log.valid_pixel_frac <= 1.0);
    }

    SUBCASE("bit-identical rerun under the same seed") {
        Model model_b(run.mcfg);
        TrainerState state_b = init_trainer_state(model_b, cfg);
        TrainResult res_b = train(model_b, run.data, cfg, state_b);
        auto pa = model_a.trainable();
        auto pb = model_b.trainable();
        REQUIRE(pa.size() == pb.size());
        for (std::size_t i = 0; i < pa.size(); ++i) {
            CHECK(pa[i]->value.data == pb[i]->value.data);
        }
        for (std::size_t e = 0; e < res_a.logs.size(); ++e) {
            CHECK(res_a.logs[e].loss_source == res_b.logs[e].loss_source);
            CHECK(res_a.logs[e].loss_target_ce == res_b.logs[e].loss_target_ce);
        }
    }

    SUBCASE("loss decreases from first to last epoch") {
        TrainConfig longer = cfg;
        longer.epochs = 8;
        longer.phase1_epochs = 3;
        Model model(run.mcfg);
        TrainerState state = init_trainer_state(model, longer);
        TrainResult res = train(model, run.data, longer, state);
        CHECK(res.logs.back().loss_source < res.logs.front().loss_source);
    }

    SUBCASE("pseudo-disabled run skips all target terms") {
        TrainConfig off = cfg;
        off.pseudo_enabled = false;
        Model model(run.mcfg);
        TrainerState state = init_trainer_state(model, off);
        TrainResult res = train(model, run.data, off, state);
        for (const auto& log : res.logs) {
            CHECK(log.loss_target_ce == 0.0);
            CHECK(log.loss_target_mse == 0.0);
            CHECK(log.valid_pixel_frac == 0.0);
        }
        // rerun bitwise identical
        Model model2(run.mcfg);
        TrainerState state2 = init_trainer_state(model2, off);
        TrainResult res2 = train(model2, run.data, off, state2);
        auto p1 = model.trainable();
        auto p2 = model2.trainable();
        for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i]->value.data == p2[i]->value.data);
        for (std::size_t e = 0; e < res.logs.size(); ++e) {
            CHECK(res.logs[e].loss_source == res2.logs[e].loss_source);
        }
    }

    SUBCASE("checkpoint resume is deterministic") {
        namespace fs = std::filesystem;
        const std::string dir = "/tmp/nexvitad_resume_test";
        fs::remove_all(dir);
        // run the first half, checkpoint, then resume twice
        Model model(run.mcfg);
        TrainerState state = init_trainer_state(model, cfg);
        TrainConfig half = cfg;
        half.epochs = 2;
        half.phase1_epochs = 2;
        train(model, run.data, half, state);
        save_checkpoint(model, &state, dir);

        auto finish = [&](std::vector<std::vector<real>>& params_out) {
            TrainerState st;
            Model m = load_checkpoint(dir, &st);
            TrainConfig full = cfg;
            train(m, run.data, full, st);
            for (auto* p : m.trainable()) params_out.push_back(p->value.data);
        };
        std::vector<std::vector<real>> first, second;
        finish(first);
        finish(second);
        REQUIRE(first.size() == second.size());
        for (std::size_t i = 0; i < first.size(); ++i) CHECK(first[i] == second[i]);
        fs::remove_all(dir);
    }
}

TEST_CASE("checkpoint round trip preserves params at file precision") {
    TinyRun run;
    Model model(run.mcfg);
    const std::string dir = "/tmp/nexvitad_ckpt_test";
    std::filesystem::remove_all(dir);
    save_checkpoint(model, nullptr, dir);
    Model loaded = load_checkpoint(dir, nullptr);
    auto pa = model.trainable();
    auto pb = loaded.trainable();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i]->name == pb[i]->name);
        for (std::size_t j = 0; j < pa[i]->value.data.size(); ++j) {
            CHECK(pb[i]->value.data[j] == doctest::Approx(pa[i]->value.data[j]).epsilon(1e-6));
        }
    }
    std::filesystem::remove_all(dir);
}
