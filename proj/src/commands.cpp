#include "nexvitad/commands.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "nexvitad/image.hpp"
#include "nexvitad/ops.hpp"
#include "nexvitad/parallel.hpp"
#include "nexvitad/tensor_io.hpp"

namespace nexvitad {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<ImageSample> generate_dataset(const RunConfig& cfg) {
    std::vector<std::vector<ImageSample>> per_class(static_cast<std::size_t>(cfg.classes));
    parallel_for(cfg.classes, cfg.threads, [&](int c) {
        per_class[static_cast<std::size_t>(c)] =
            synth_class(c, cfg.seed, cfg.per_class_train, cfg.per_class_test, cfg.image_size);
    });
    std::vector<ImageSample> dataset;
    for (auto& cls : per_class) {
        for (auto& s : cls) dataset.push_back(std::move(s));
    }
    return dataset;
}

DatasetSplit split_from(const RunConfig& cfg, const std::vector<ImageSample>& dataset) {
    SplitConfig scfg;
    scfg.source_classes = cfg.source_classes;
    scfg.target_classes = cfg.target_classes;
    scfg.seed = cfg.seed;
    return make_split(dataset, scfg, cfg.infer.m_images);
}

} // namespace

void cmd_gen_data(const RunConfig& raw, const std::string& data_dir, bool force, bool export_nxt) {
    RunConfig cfg = resolve_run_config(raw);
    std::vector<ImageSample> dataset = generate_dataset(cfg);
    ManifestHeader header;
    header.classes = cfg.classes;
    header.image_size = cfg.image_size;
    header.source_classes = cfg.source_classes;
    header.target_classes = cfg.target_classes;
    header.seed = cfg.seed;
    write_dataset(data_dir, dataset, header, force, export_nxt);
    write_run_config(cfg, (fs::path(data_dir) / "config.json").string());
}

TrainOutcome cmd_train(const RunConfig& raw, const std::string& data_dir, const std::string& out_dir,
                       const std::string& resume_checkpoint) {
    RunConfig cfg = resolve_run_config(raw);
    LoadedDataset loaded = load_dataset(data_dir);
    DatasetSplit split = split_from(cfg, loaded.samples);

    fs::create_directories(out_dir);
    write_run_config(cfg, (fs::path(out_dir) / "config.json").string());
    std::ofstream log_stream(fs::path(out_dir) / "log.jsonl",
                             resume_checkpoint.empty() ? std::ios::trunc : std::ios::app);
    if (!log_stream) throw_data("cannot write training log under " + out_dir);

    TrainOutcome outcome;
    auto log_epoch = [&](const EpochLog& log) {
        json j = {{"epoch", log.epoch},
                  {"lr", log.lr},
                  {"L_s", log.loss_source},
                  {"L_t_ce", log.loss_target_ce},
                  {"L_t_mse", log.loss_target_mse},
                  {"valid_pixel_frac", log.valid_pixel_frac}};
        log_stream << j.dump() << "\n";
        log_stream.flush();
    };

    if (!resume_checkpoint.empty()) {
        TrainerState state;
        Model model = load_checkpoint(resume_checkpoint, &state);
        outcome.logs = train(model, split, cfg.train, state, log_epoch).logs;
        const std::string ckpt = (fs::path(out_dir) / "checkpoints" / "final").string();
        save_checkpoint(model, &state, ckpt);
        outcome.checkpoint_dir = ckpt;
        return outcome;
    }

    Model model(cfg.model);
    TrainerState state = init_trainer_state(model, cfg.train);
    outcome.logs = train(model, split, cfg.train, state, log_epoch).logs;
    const std::string ckpt = (fs::path(out_dir) / "checkpoints" / "final").string();
    save_checkpoint(model, &state, ckpt);
    outcome.checkpoint_dir = ckpt;
    return outcome;
}

std::string cmd_build_bank(const RunConfig& raw, const std::string& checkpoint_dir, const std::string& data_dir,
                           const std::string& out_dir) {
    RunConfig cfg = resolve_run_config(raw);
    Model model = load_checkpoint(checkpoint_dir, nullptr);
    LoadedDataset loaded = load_dataset(data_dir);
    DatasetSplit split = split_from(cfg, loaded.samples);
    MemoryBank bank = build_memory_bank(model.encoder, model.fusion, split.bank_candidates, cfg.infer);
    const std::string bank_dir = (fs::path(out_dir) / "bank").string();
    save_memory_bank(bank, bank_dir);
    write_run_config(cfg, (fs::path(out_dir) / "config.json").string());
    return bank_dir;
}

std::string cmd_infer(const RunConfig& raw, const std::string& checkpoint_dir, const std::string& bank_dir,
                      const std::string& data_dir, const std::string& out_dir, bool decoder_inference) {
    RunConfig cfg = resolve_run_config(raw);
    Model model = load_checkpoint(checkpoint_dir, nullptr);
    LoadedDataset loaded = load_dataset(data_dir);
    DatasetSplit split = split_from(cfg, loaded.samples);
    MemoryBank bank;
    if (!decoder_inference) bank = load_memory_bank(bank_dir);

    const std::string scores_dir = (fs::path(out_dir) / "scores").string();
    fs::create_directories(scores_dir);

    // map each target test sample back to its manifest path for stable names
    std::unordered_map<long, std::string> path_by_key;
    for (std::size_t i = 0; i < loaded.samples.size(); ++i) {
        const auto& orig = loaded.samples[i];
        const long key = (static_cast<long>(orig.class_id) << 20) | (orig.split == Split::Test ? (1L << 19) : 0) |
                         orig.index;
        path_by_key[key] = loaded.paths[i];
    }
    std::vector<std::pair<const ImageSample*, std::string>> jobs;
    for (const auto& s : split.target_test) {
        const long key = (static_cast<long>(s.class_id) << 20) | (1L << 19) | s.index;
        jobs.emplace_back(&s, path_by_key.at(key));
    }

    parallel_for(static_cast<int>(jobs.size()), cfg.threads, [&](int idx) {
        const ImageSample& s = *jobs[static_cast<std::size_t>(idx)].first;
        const std::string stem = score_stem(jobs[static_cast<std::size_t>(idx)].second);
        Tensor scores;
        const int h = s.image.dim(0), w = s.image.dim(1);
        if (decoder_inference) {
            Tensor batch({1, h, w, 3});
            std::copy(s.image.data.begin(), s.image.data.end(), batch.data.begin());
            FusedPyramid fused = encode(model.encoder, model.fusion, batch, nullptr);
            DecoderHead& head =
                model.heads.target_seg_heads[static_cast<std::size_t>(model.heads.target_route.at(s.class_id))];
            Tensor logits = head_forward(head, fused, h, w, BnMode::Eval, false, nullptr);
            Tensor probs = softmax_channel(logits);
            scores = Tensor({h, w});
            std::copy(probs.data.begin() + static_cast<std::ptrdiff_t>(h) * w,
                      probs.data.begin() + 2 * static_cast<std::ptrdiff_t>(h) * w, scores.data.begin());
        } else {
            Tensor batch({1, h, w, 3});
            std::copy(s.image.data.begin(), s.image.data.end(), batch.data.begin());
            auto maps = anomaly_score_maps(model.encoder, model.fusion, bank, batch, cfg.infer);
            scores = std::move(maps[0].smoothed);
        }
        save_tensor(scores, (fs::path(scores_dir) / (stem + ".nxt")).string());
        save_heatmap_png(scores, (fs::path(scores_dir) / (stem + "_heat.png")).string());
    });
    write_run_config(cfg, (fs::path(out_dir) / "config.json").string());
    return scores_dir;
}

MetricReport cmd_eval(const RunConfig& raw, const std::string& scores_dir, const std::string& data_dir,
                      const std::string& report_path) {
    RunConfig cfg = resolve_run_config(raw);
    LoadedDataset loaded = load_dataset(data_dir);
    DatasetSplit split = split_from(cfg, loaded.samples);

    std::vector<real> pixel_scores;
    std::vector<int> pixel_labels;
    std::vector<Tensor> score_maps;
    std::vector<Tensor> gt_masks;
    MetricReport report;
    std::unordered_map<long, std::string> stem_by_key;
    for (std::size_t i = 0; i < loaded.samples.size(); ++i) {
        const auto& orig = loaded.samples[i];
        const long key = (static_cast<long>(orig.class_id) << 20) | (orig.split == Split::Test ? (1L << 19) : 0) |
                         orig.index;
        stem_by_key[key] = score_stem(loaded.paths[i]);
    }
    for (const auto& s : split.target_test) {
        const std::string stem = stem_by_key.at((static_cast<long>(s.class_id) << 20) | (1L << 19) | s.index);
        const std::string score_file = (fs::path(scores_dir) / (stem + ".nxt")).string();
        if (!fs::exists(score_file)) throw_data("missing score tensor: " + score_file);
        Tensor scores = load_tensor(score_file);
        require_same_dims(scores, s.mask, "score map", "ground truth");
        for (std::size_t i = 0; i < scores.data.size(); ++i) {
            pixel_scores.push_back(scores.data[i]);
            pixel_labels.push_back(s.mask.data[i] > 0.5 ? 1 : 0);
        }
        if (s.is_defective) {
            ++report.defective_images;
            score_maps.push_back(scores);
            gt_masks.push_back(s.mask);
        }
        ++report.images;
    }
    if (report.images == 0) throw_data("no scored target test images found under " + scores_dir);
    report.auc = auc(pixel_scores, pixel_labels);
    report.ap = average_precision(pixel_scores, pixel_labels);
    ProResult pro = pro_mean_iou(score_maps, gt_masks, cfg.pro_mode, cfg.pro_tau);
    report.pro = pro.value;
    report.pro_tau = pro.tau;

    if (!report_path.empty()) {
        json j = {{"auc", report.auc},     {"ap", report.ap},
                  {"pro", report.pro},     {"pro_tau", report.pro_tau},
                  {"images", report.images}, {"defective_images", report.defective_images}};
        std::ofstream os(report_path);
        if (!os) throw_data("cannot write report: " + report_path);
        os << j.dump(2) << "\n";
    }
    return report;
}

// ---------------------------------------------------------------------------
// gradient check: every trainable parameter through the joint objective on a
// micro configuration
// ---------------------------------------------------------------------------

GradCheckOutcome cmd_grad_check(real tol, real h) {
    const auto t0 = std::chrono::steady_clock::now();

    ModelConfig mcfg;
    mcfg.backbone.hiera_dims = {8, 8, 8, 8};
    mcfg.backbone.d_dino = 8;
    mcfg.backbone.seed = 3;
    mcfg.decoder_channels = {6, 5, 4};
    mcfg.source_classes = {0, 1};
    mcfg.target_classes = {2};
    mcfg.init_seed = 9;
    Model model(mcfg);

    const int size = 32;
    auto c0 = synth_class(0, 101, 2, 0, size);
    auto c1 = synth_class(1, 102, 2, 0, size);
    auto c2 = synth_class(2, 103, 2, 0, size);
    const ImageSample& s0 = c0[1]; // defective, carries a mask
    const ImageSample& s1 = c1[1];
    const Tensor& t_img = c2[0].image; // normal target image

    auto to_batch = [&](const Tensor& img) {
        Tensor b({1, size, size, 3});
        std::copy(img.data.begin(), img.data.end(), b.data.begin());
        return b;
    };


    // fixed pseudo labels: drawn once from the initial pseudo head, with the
    // threshold relaxed until some pixels are valid
    PseudoLabelMap labels;
    {
        FusedPyramid fused = encode(model.encoder, model.fusion, to_batch(t_img), nullptr);
        Tensor logits = pseudo_head_forward(model.heads.target_pseudo_heads[0], fused.scales[3], size, size, nullptr);
        Tensor one({2, size, size});
        std::copy(logits.data.begin(), logits.data.end(), one.data.begin());
        for (real theta : {0.7, 0.6, 0.55, 0.51}) {
            labels = make_pseudo_labels(one, theta);
            if (labels.valid_fraction() > 0.0) break;
        }
    }
    AugmentRecord rec;
    rec.op = AugmentOp::HFlip;
    rec.orig_h = size;
    rec.orig_w = size;
    Tensor aug_img = augment_image(t_img, rec);

    // backbones are frozen, so their features are constants of the check
    const BackboneFeatures feats_s0 = backbone_forward(model.encoder, to_batch(s0.image));
    const BackboneFeatures feats_s1 = backbone_forward(model.encoder, to_batch(s1.image));
    const BackboneFeatures feats_t = backbone_forward(model.encoder, to_batch(t_img));
    const BackboneFeatures feats_aug = backbone_forward(model.encoder, to_batch(aug_img));

    // constant coarse features for the pseudo-head term (the trainer stops
    // this path's gradient at the encoder output)
    Tensor f4_const;
    {
        FusedPyramid fused = encode(model.encoder, model.fusion, to_batch(t_img), nullptr);
        f4_const = fused.scales[3];
    }

    const LossWeights weights;

    auto objective = [&](bool with_grad) {
        real loss = 0.0;
        // source term: one sample through each source head
        const ImageSample* sources[2] = {&s0, &s1};
        const BackboneFeatures* source_feats[2] = {&feats_s0, &feats_s1};
        for (int si = 0; si < 2; ++si) {
            EncodeCache ecache;
            FusedPyramid fused = fuse_features(*source_feats[si], model.fusion, with_grad ? &ecache : nullptr);
            DecoderHead& head = model.heads.source_heads[static_cast<std::size_t>(
                model.heads.source_route.at(sources[si]->class_id))];
            HeadCache hcache;
            Tensor logits = head_forward(head, fused, size, size, BnMode::Train, false, with_grad ? &hcache : nullptr);
            Tensor grad_logits(logits.dims);
            const real ce = source_ce_loss(logits, {&sources[si]->mask}, with_grad ? &grad_logits : nullptr);
            loss += 0.5 * ce;
            if (with_grad) {
                grad_logits.scale_(0.5);
                std::vector<Tensor> grad_scales;
                for (const auto& sc : fused.scales) grad_scales.emplace_back(sc.dims);
                head_backward(head, hcache, grad_logits, &grad_scales);
                encode_backward(ecache, model.fusion, grad_scales);
            }
        }
        // target clean CE
        DecoderHead& shead = model.heads.target_seg_heads[0];
        {
            EncodeCache ecache;
            FusedPyramid fused = fuse_features(feats_t, model.fusion, with_grad ? &ecache : nullptr);
            HeadCache hcache;
            Tensor logits = head_forward(shead, fused, size, size, BnMode::Train, false, with_grad ? &hcache : nullptr);
            Tensor one({2, size, size});
            std::copy(logits.data.begin(), logits.data.end(), one.data.begin());
            Tensor g_one({2, size, size});
            const real ce = target_ce_loss(one, labels, with_grad ? &g_one : nullptr);
            loss += weights.lambda1 * ce;
            if (with_grad) {
                Tensor grad_logits(logits.dims);
                for (std::size_t i = 0; i < g_one.data.size(); ++i) {
                    grad_logits.data[i] = weights.lambda1 * g_one.data[i];
                }
                std::vector<Tensor> grad_scales;
                for (const auto& sc : fused.scales) grad_scales.emplace_back(sc.dims);
                head_backward(shead, hcache, grad_logits, &grad_scales);
                encode_backward(ecache, model.fusion, grad_scales);
            }
        }
        // consistency term on the augmented image
        {
            EncodeCache ecache;
            FusedPyramid fused = fuse_features(feats_aug, model.fusion, with_grad ? &ecache : nullptr);
            HeadCache hcache;
            Tensor logits = head_forward(shead, fused, size, size, BnMode::Train, false, with_grad ? &hcache : nullptr);
            Tensor one({2, size, size});
            std::copy(logits.data.begin(), logits.data.end(), one.data.begin());
            Tensor probs = softmax_channel(one);
            Tensor pos = Tensor::from({size, size},
                                      std::vector<real>(probs.data.begin() + size * size, probs.data.end()));
            Tensor restored = restore_plane(pos, rec);
            Tensor g_restored(restored.dims);
            const real mse = consistency_mse_loss(restored, labels, with_grad ? &g_restored : nullptr);
            loss += weights.lambda2 * mse;
            if (with_grad) {
                Tensor g_pos = restore_plane_adjoint(g_restored, rec);
                Tensor g_probs(probs.dims);
                std::copy(g_pos.data.begin(), g_pos.data.end(), g_probs.data.begin() + size * size);
                Tensor g_one({2, size, size});
                softmax_channel_backward(probs, g_probs, &g_one);
                g_one.scale_(weights.lambda2);
                Tensor grad_logits({1, 2, size, size});
                std::copy(g_one.data.begin(), g_one.data.end(), grad_logits.data.begin());
                std::vector<Tensor> grad_scales;
                for (const auto& sc : fused.scales) grad_scales.emplace_back(sc.dims);
                head_backward(shead, hcache, grad_logits, &grad_scales);
                encode_backward(ecache, model.fusion, grad_scales);
            }
        }
        // pseudo-head self-training term on constant features
        {
            PseudoHeadCache pcache;
            Tensor logits = pseudo_head_forward(model.heads.target_pseudo_heads[0], f4_const, size, size,
                                                with_grad ? &pcache : nullptr);
            Tensor one({2, size, size});
            std::copy(logits.data.begin(), logits.data.end(), one.data.begin());
            Tensor g_one({2, size, size});
            const real ce = target_ce_loss(one, labels, with_grad ? &g_one : nullptr);
            loss += ce;
            if (with_grad) {
                Tensor grad_logits({1, 2, size, size});
                std::copy(g_one.data.begin(), g_one.data.end(), grad_logits.data.begin());
                pseudo_head_backward(model.heads.target_pseudo_heads[0], pcache, grad_logits, nullptr);
            }
        }
        return loss;
    };

    auto params = model.trainable();
    auto loss_only = [&]() { return objective(false); };
    auto loss_grad = [&]() {
        for (auto* p : params) p->zero_grad();
        return objective(true);
    };
    GradCheckOutcome outcome;
    outcome.report = finite_diff_check(loss_only, loss_grad, params, h);
    outcome.passed = outcome.report.passed(tol);
    outcome.seconds = std::chrono::duration<real>(std::chrono::steady_clock::now() - t0).count();
    return outcome;
}

std::vector<BenchEntry> cmd_bench(const RunConfig& raw, const std::vector<int>& ks,
                                  const std::vector<int>& batch_sizes, int reps, const std::string& out_path) {
    RunConfig cfg = resolve_run_config(raw);
    Model model(cfg.model);
    // self-contained corpus: normal bank images plus scoring targets
    auto samples = synth_class(cfg.target_classes.front(), cfg.seed, 2 * cfg.infer.m_images, 4, cfg.image_size);
    std::vector<UnlabeledSample> normals;
    std::vector<Tensor> tests;
    for (const auto& s : samples) {
        if (s.split == Split::Train && !s.is_defective) normals.push_back({s.image, s.class_id, s.index});
        if (s.split == Split::Test) tests.push_back(s.image);
    }
    auto entries = bench_inference(model.encoder, model.fusion, normals, tests, ks, batch_sizes, reps, cfg.infer);
    if (!out_path.empty()) {
        json arr = json::array();
        for (const auto& e : entries) {
            arr.push_back({{"K", e.k}, {"batch", e.batch}, {"mean_ms", e.mean_ms}, {"std_ms", e.std_ms}});
        }
        std::ofstream os(out_path);
        if (!os) throw_data("cannot write bench output: " + out_path);
        os << arr.dump(2) << "\n";
    }
    return entries;
}

} // namespace nexvitad
