#include "nexvitad/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_map>

#include "nexvitad/ops.hpp"

namespace nexvitad {

void TrainConfig::validate() const {
    if (epochs <= 0) throw_config("epochs must be positive");
    if (warmup_epochs < 1 || warmup_epochs >= epochs) throw_config("warmup_epochs must be in [1, epochs)");
    if (batch_size <= 0) throw_config("batch_size must be positive");
    if (theta <= 0.5 || theta >= 1.0) throw_config("theta must be in (0.5, 1)");
    if (pseudo_refresh_every <= 0) throw_config("pseudo_refresh_every must be positive");
    if (phase1_epochs < 0) throw_config("phase1_epochs must be >= 0");
    if (augment_prob < 0.0 || augment_prob > 1.0) throw_config("augment_prob must be in [0,1]");
    if (weights.lambda1 < 0.0 || weights.lambda2 < 0.0) throw_config("loss weights must be >= 0");
    if (base_lr <= 0.0) throw_config("base_lr must be positive");
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

namespace {

// stable per-pixel binary CE on a 2-logit pair; returns loss, writes dp0/dp1
inline real ce_pixel(real l0, real l1, real y0, real y1, real* g0, real* g1, real weight) {
    const real mx = std::max(l0, l1);
    const real z = std::exp(l0 - mx) + std::exp(l1 - mx);
    const real logz = mx + std::log(z);
    const real p0 = std::exp(l0 - logz);
    const real p1 = std::exp(l1 - logz);
    if (g0) *g0 += weight * (p0 - y0);
    if (g1) *g1 += weight * (p1 - y1);
    return -(y0 * (l0 - logz) + y1 * (l1 - logz));
}

} // namespace

real source_ce_loss(const Tensor& logits, const std::vector<const Tensor*>& masks, Tensor* grad_logits) {
    if (masks.empty()) throw_config("source_ce_loss on an empty batch");
    if (logits.rank() != 4 || logits.dim(1) != 2) {
        throw_shape("source_ce_loss expects (b,2,H,W) logits, got " + dims_to_string(logits.dims));
    }
    const int b = logits.dim(0), h = logits.dim(2), w = logits.dim(3);
    if (static_cast<int>(masks.size()) != b) throw_shape("mask count does not match logits batch");
    const real norm = 1.0 / (static_cast<real>(b) * h * w);
    real loss = 0.0;
    const int hw = h * w;
    for (int bi = 0; bi < b; ++bi) {
        const Tensor& mask = *masks[static_cast<std::size_t>(bi)];
        const real* l0 = logits.data.data() + static_cast<std::size_t>(bi) * 2 * hw;
        const real* l1 = l0 + hw;
        real* g0 = grad_logits ? grad_logits->data.data() + static_cast<std::size_t>(bi) * 2 * hw : nullptr;
        real* g1 = g0 ? g0 + hw : nullptr;
        for (int i = 0; i < hw; ++i) {
            const real y1 = mask.data[static_cast<std::size_t>(i)];
            loss += ce_pixel(l0[i], l1[i], 1.0 - y1, y1, g0 ? g0 + i : nullptr, g1 ? g1 + i : nullptr, norm);
        }
    }
    return loss * norm;
}

real target_ce_loss(const Tensor& logits_chw, const PseudoLabelMap& pseudo, Tensor* grad_logits) {
    if (logits_chw.rank() != 3 || logits_chw.dim(0) != 2) {
        throw_shape("target_ce_loss expects (2,H,W) logits, got " + dims_to_string(logits_chw.dims));
    }
    const int h = logits_chw.dim(1), w = logits_chw.dim(2);
    std::size_t valid = 0;
    for (real v : pseudo.labels.data) valid += v != kIgnoreLabel ? 1 : 0;
    if (valid == 0) return 0.0;
    const real norm = 1.0 / static_cast<real>(valid);
    const int hw = h * w;
    const real* l0 = logits_chw.data.data();
    const real* l1 = l0 + hw;
    real* g0 = grad_logits ? grad_logits->data.data() : nullptr;
    real* g1 = g0 ? g0 + hw : nullptr;
    real loss = 0.0;
    for (int i = 0; i < hw; ++i) {
        const real label = pseudo.labels.data[static_cast<std::size_t>(i)];
        if (label == kIgnoreLabel) continue;
        loss += ce_pixel(l0[i], l1[i], 1.0 - label, label, g0 ? g0 + i : nullptr, g1 ? g1 + i : nullptr, norm);
    }
    return loss * norm;
}

real consistency_mse_loss(const Tensor& prob_pos, const PseudoLabelMap& pseudo, Tensor* grad_prob) {
    require_same_dims(prob_pos, pseudo.labels, "probability map", "pseudo labels");
    std::size_t valid = 0;
    for (real v : pseudo.labels.data) valid += v != kIgnoreLabel ? 1 : 0;
    if (valid == 0) return 0.0;
    const real norm = 1.0 / static_cast<real>(valid);
    real loss = 0.0;
    for (std::size_t i = 0; i < prob_pos.data.size(); ++i) {
        const real label = pseudo.labels.data[i];
        if (label == kIgnoreLabel) continue;
        const real d = prob_pos.data[i] - label;
        loss += d * d;
        if (grad_prob) grad_prob->data[i] += 2.0 * d * norm;
    }
    return loss * norm;
}

real total_loss(real loss_source, real loss_target_ce, real loss_target_mse, const LossWeights& w) {
    const real total = loss_source + w.lambda1 * loss_target_ce + w.lambda2 * loss_target_mse;
    if (!std::isfinite(total)) throw_numeric("total loss is not finite");
    return total;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

namespace {

template <typename Get, typename Set>
void transform_plane(AugmentOp op, int h, int w, const Get& get, const Set& set) {
    switch (op) {
        case AugmentOp::HFlip:
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) set(y, x, get(y, w - 1 - x));
            break;
        case AugmentOp::VFlip:
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) set(y, x, get(h - 1 - y, x));
            break;
        case AugmentOp::Rot90: // clockwise; output is (w,h)
            for (int y = 0; y < w; ++y)
                for (int x = 0; x < h; ++x) set(y, x, get(h - 1 - x, y));
            break;
        case AugmentOp::Rot180:
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) set(y, x, get(h - 1 - y, w - 1 - x));
            break;
        case AugmentOp::Rot270: // counterclockwise; output is (w,h)
            for (int y = 0; y < w; ++y)
                for (int x = 0; x < h; ++x) set(y, x, get(x, w - 1 - y));
            break;
        default:
            throw_contract("transform_plane on identity op");
    }
}

AugmentOp inverse_op(AugmentOp op) {
    if (op == AugmentOp::Rot90) return AugmentOp::Rot270;
    if (op == AugmentOp::Rot270) return AugmentOp::Rot90;
    return op; // flips and 180 are self-inverse
}

bool swaps_extents(AugmentOp op) { return op == AugmentOp::Rot90 || op == AugmentOp::Rot270; }

Tensor apply_geometry_hwc(const Tensor& image, AugmentOp op) {
    const int h = image.dim(0), w = image.dim(1), c = image.dim(2);
    Tensor out(swaps_extents(op) ? std::vector<int>{w, h, c} : std::vector<int>{h, w, c});
    transform_plane(
        op, h, w, [&](int y, int x) { return std::pair<int, int>{y, x}; },
        [&](int oy, int ox, std::pair<int, int> src) {
            for (int ch = 0; ch < c; ++ch) out.at(oy, ox, ch) = image.at(src.first, src.second, ch);
        });
    return out;
}

Tensor apply_geometry_hw(const Tensor& plane, AugmentOp op) {
    const int h = plane.dim(0), w = plane.dim(1);
    Tensor out(swaps_extents(op) ? std::vector<int>{w, h} : std::vector<int>{h, w});
    transform_plane(
        op, h, w, [&](int y, int x) { return plane.at(y, x); },
        [&](int oy, int ox, real v) { out.at(oy, ox) = v; });
    return out;
}

} // namespace

Tensor augment_image(const Tensor& image, const AugmentRecord& rec) {
    if (image.rank() != 3) throw_shape("augment_image expects (h,w,c), got " + dims_to_string(image.dims));
    switch (rec.op) {
        case AugmentOp::None: return image;
        case AugmentOp::Scale: {
            Tensor batched = Tensor::from({1, image.dim(0), image.dim(1), image.dim(2)}, image.data);
            Tensor resized = bilinear_resize_nhwc(batched, rec.scaled_h, rec.scaled_w);
            return Tensor::from({rec.scaled_h, rec.scaled_w, image.dim(2)}, std::move(resized.data));
        }
        default: return apply_geometry_hwc(image, rec.op);
    }
}

Tensor augment_plane(const Tensor& plane, const AugmentRecord& rec) {
    if (plane.rank() != 2) throw_shape("augment_plane expects (h,w), got " + dims_to_string(plane.dims));
    switch (rec.op) {
        case AugmentOp::None: return plane;
        case AugmentOp::Scale: return bilinear_resize(plane, rec.scaled_h, rec.scaled_w);
        default: return apply_geometry_hw(plane, rec.op);
    }
}

Tensor restore_plane(const Tensor& plane, const AugmentRecord& rec) {
    switch (rec.op) {
        case AugmentOp::None: return plane;
        case AugmentOp::Scale: return bilinear_resize(plane, rec.orig_h, rec.orig_w);
        default: return apply_geometry_hw(plane, inverse_op(rec.op));
    }
}

Tensor restore_plane_adjoint(const Tensor& grad_restored, const AugmentRecord& rec) {
    switch (rec.op) {
        case AugmentOp::None: return grad_restored;
        case AugmentOp::Scale: {
            Tensor grad_aug({rec.scaled_h, rec.scaled_w});
            bilinear_resize_backward(grad_restored, rec.scaled_h, rec.scaled_w, &grad_aug);
            return grad_aug;
        }
        default:
            // restore is an orthogonal permutation, so its adjoint is the
            // forward geometry applied to the gradient
            return apply_geometry_hw(grad_restored, rec.op);
    }
}

AugmentRecord draw_augment(int h, int w, int snap_multiple, real augment_prob, real noise_sigma, Rng& rng) {
    AugmentRecord rec;
    rec.orig_h = h;
    rec.orig_w = w;
    if (rng.uniform() < augment_prob) {
        const int pick = rng.uniform_int(0, 5);
        static const AugmentOp ops[6] = {AugmentOp::HFlip,  AugmentOp::VFlip,  AugmentOp::Rot90,
                                         AugmentOp::Rot180, AugmentOp::Rot270, AugmentOp::Scale};
        rec.op = ops[pick];
        if (rec.op == AugmentOp::Scale) {
            const bool can_shrink = h - snap_multiple >= snap_multiple && w - snap_multiple >= snap_multiple;
            const bool up = !can_shrink || rng.uniform() < 0.5;
            rec.scaled_h = up ? h + snap_multiple : h - snap_multiple;
            rec.scaled_w = up ? w + snap_multiple : w - snap_multiple;
        }
    }
    if (rng.uniform() < augment_prob && noise_sigma > 0.0) {
        rec.add_noise = true;
        rec.noise_sigma = noise_sigma;
    }
    return rec;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

namespace {

std::vector<int> shuffled(std::vector<int> order, Rng& rng) {
    for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = rng.next_below(i);
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

Tensor stack_images(const std::vector<Tensor>& images) {
    const int h = images[0].dim(0), w = images[0].dim(1), c = images[0].dim(2);
    Tensor out({static_cast<int>(images.size()), h, w, c});
    for (std::size_t i = 0; i < images.size(); ++i) {
        std::copy(images[i].data.begin(), images[i].data.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(i * images[i].size()));
    }
    return out;
}

Tensor slice_chw(const Tensor& batch, int index) {
    const int c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    Tensor out({c, h, w});
    std::copy(batch.data.begin() + static_cast<std::ptrdiff_t>(index) * c * h * w,
              batch.data.begin() + static_cast<std::ptrdiff_t>(index + 1) * c * h * w, out.data.begin());
    return out;
}

void add_noise(Tensor& image, real sigma, Rng& rng) {
    for (auto& v : image.data) v = std::clamp(v + rng.normal(0.0, sigma), 0.0, 1.0);
}

struct StepScope {
    std::vector<ParamTensor*> params;
    void zero() {
        for (auto* p : params) p->zero_grad();
    }
};

} // namespace

TrainerState init_trainer_state(Model& model, const TrainConfig& cfg) {
    TrainerState state;
    for (auto* p : model.trainable()) state.adam.emplace_back(p->value.dims, cfg.base_lr);
    Rng rng(mix_seed(cfg.seed, 0x7e41u));
    rng.save_state(state.rng_state);
    state.next_epoch = 0;
    return state;
}

TrainResult train(Model& model, const DatasetSplit& data, const TrainConfig& cfg, TrainerState& state,
                  const std::function<void(const EpochLog&)>& on_epoch) {
    cfg.validate();
    if (data.source_train.empty()) throw_config("source training set is empty");
    auto params = model.trainable();
    if (state.adam.size() != params.size()) throw_contract("trainer state does not match model");
    std::unordered_map<const ParamTensor*, std::size_t> param_index;
    for (std::size_t i = 0; i < params.size(); ++i) param_index[params[i]] = i;

    const int img_h = data.source_train[0].image.dim(0);
    const int img_w = data.source_train[0].image.dim(1);
    const int snap = model.cfg.backbone.hiera_strides.back();

    Rng rng(0);
    rng.load_state(state.rng_state);

    std::map<int, std::vector<int>> source_by_class;
    for (std::size_t i = 0; i < data.source_train.size(); ++i) {
        source_by_class[data.source_train[i].class_id].push_back(static_cast<int>(i));
    }
    std::map<int, std::vector<int>> target_by_class;
    for (std::size_t i = 0; i < data.target_train.size(); ++i) {
        target_by_class[data.target_train[i].class_id].push_back(static_cast<int>(i));
    }

    std::vector<PseudoLabelMap> pseudo_cache(data.target_train.size());
    std::vector<bool> pseudo_ready(data.target_train.size(), false);
    for (auto& [idx, map] : state.pseudo_cache) {
        if (idx >= 0 && idx < static_cast<int>(pseudo_cache.size())) {
            pseudo_cache[static_cast<std::size_t>(idx)] = map;
            pseudo_ready[static_cast<std::size_t>(idx)] = true;
        }
    }

    auto step_scope = [&](StepScope& scope) {
        for (auto* p : scope.params) {
            adam_step(*p, state.adam[param_index.at(p)]);
        }
    };

    auto refresh_pseudo_labels = [&]() -> real {
        real frac_sum = 0.0;
        for (auto& [cls, indices] : target_by_class) {
            PseudoLabelHead& phead = model.heads.target_pseudo_heads[static_cast<std::size_t>(
                model.heads.target_route.at(cls))];
            for (std::size_t off = 0; off < indices.size(); off += static_cast<std::size_t>(cfg.batch_size)) {
                std::vector<Tensor> images;
                std::vector<int> batch_idx;
                for (std::size_t k = off; k < std::min(off + cfg.batch_size, indices.size()); ++k) {
                    batch_idx.push_back(indices[k]);
                    images.push_back(data.target_train[static_cast<std::size_t>(indices[k])].image);
                }
                FusedPyramid fused = encode(model.encoder, model.fusion, stack_images(images), nullptr);
                Tensor logits = pseudo_head_forward(phead, fused.scales[3], img_h, img_w, nullptr);
                for (std::size_t k = 0; k < batch_idx.size(); ++k) {
                    pseudo_cache[static_cast<std::size_t>(batch_idx[k])] =
                        make_pseudo_labels(slice_chw(logits, static_cast<int>(k)), cfg.theta);
                    pseudo_ready[static_cast<std::size_t>(batch_idx[k])] = true;
                }
            }
        }
        for (const auto& map : pseudo_cache) frac_sum += map.valid_fraction();
        return pseudo_cache.empty() ? 0.0 : frac_sum / static_cast<real>(pseudo_cache.size());
    };

    TrainResult result;
    for (int epoch = state.next_epoch; epoch < cfg.epochs; ++epoch) {
        const real lr = lr_at(epoch, cfg.epochs, cfg.warmup_epochs, cfg.base_lr);
        for (auto& a : state.adam) a.lr = lr;
        EpochLog log;
        log.epoch = epoch;
        log.lr = lr;

        // ---- source supervision ----
        real src_sum = 0.0;
        int src_batches = 0;
        for (auto& [cls, indices] : source_by_class) {
            DecoderHead& head =
                model.heads.source_heads[static_cast<std::size_t>(model.heads.source_route.at(cls))];
            const auto order = shuffled(indices, rng);
            for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(cfg.batch_size)) {
                const AugmentRecord rec = draw_augment(img_h, img_w, snap, cfg.augment_prob, cfg.noise_sigma, rng);
                std::vector<Tensor> images;
                std::vector<Tensor> masks;
                for (std::size_t k = off; k < std::min(off + cfg.batch_size, order.size()); ++k) {
                    const ImageSample& s = data.source_train[static_cast<std::size_t>(order[k])];
                    Tensor img = augment_image(s.image, rec);
                    if (rec.add_noise) add_noise(img, rec.noise_sigma, rng);
                    images.push_back(std::move(img));
                    Tensor mask = augment_plane(s.mask, rec);
                    if (rec.op == AugmentOp::Scale) {
                        for (auto& v : mask.data) v = v > 0.5 ? 1.0 : 0.0;
                    }
                    masks.push_back(std::move(mask));
                }
                EncodeCache ecache;
                FusedPyramid fused = encode(model.encoder, model.fusion, stack_images(images), &ecache);
                HeadCache hcache;
                Tensor logits = head_forward(head, fused, masks[0].dim(0), masks[0].dim(1), BnMode::Train, true,
                                             &hcache);
                std::vector<const Tensor*> mask_ptrs;
                for (const auto& m : masks) mask_ptrs.push_back(&m);
                Tensor grad_logits(logits.dims);
                const real loss = source_ce_loss(logits, mask_ptrs, &grad_logits);

                StepScope scope;
                scope.params = model.fusion.trainable();
                auto ht = head.trainable();
                scope.params.insert(scope.params.end(), ht.begin(), ht.end());
                scope.zero();
                std::vector<Tensor> grad_scales;
                for (const auto& s : fused.scales) grad_scales.emplace_back(s.dims);
                head_backward(head, hcache, grad_logits, &grad_scales);
                encode_backward(ecache, model.fusion, grad_scales);
                step_scope(scope);
                src_sum += loss;
                ++src_batches;
            }
        }
        log.loss_source = src_batches ? src_sum / src_batches : 0.0;

        // ---- target domain ----
        if (cfg.pseudo_enabled && !data.target_train.empty()) {
            const bool phase2 = epoch >= cfg.phase1_epochs;
            bool cache_complete = true;
            for (bool ready : pseudo_ready) cache_complete &= ready;
            if (phase2 &&
                ((epoch - cfg.phase1_epochs) % cfg.pseudo_refresh_every == 0 || !cache_complete)) {
                log.valid_pixel_frac = refresh_pseudo_labels();
            } else if (phase2) {
                real frac = 0.0;
                for (const auto& map : pseudo_cache) frac += map.valid_fraction();
                log.valid_pixel_frac = frac / static_cast<real>(pseudo_cache.size());
            }

            real tce_sum = 0.0, tmse_sum = 0.0;
            int tgt_batches = 0;
            for (auto& [cls, indices] : target_by_class) {
                const int route = model.heads.target_route.at(cls);
                PseudoLabelHead& phead = model.heads.target_pseudo_heads[static_cast<std::size_t>(route)];
                DecoderHead& shead = model.heads.target_seg_heads[static_cast<std::size_t>(route)];
                const auto order = shuffled(indices, rng);
                for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(cfg.batch_size)) {
                    std::vector<int> batch_idx;
                    std::vector<Tensor> clean_images;
                    for (std::size_t k = off; k < std::min(off + cfg.batch_size, order.size()); ++k) {
                        batch_idx.push_back(order[k]);
                        clean_images.push_back(data.target_train[static_cast<std::size_t>(order[k])].image);
                    }
                    const int b = static_cast<int>(batch_idx.size());

                    StepScope scope;
                    auto pt = phead.trainable();
                    scope.params.insert(scope.params.end(), pt.begin(), pt.end());
                    if (phase2) {
                        auto ft = model.fusion.trainable();
                        scope.params.insert(scope.params.end(), ft.begin(), ft.end());
                        auto st = shead.trainable();
                        scope.params.insert(scope.params.end(), st.begin(), st.end());
                    }
                    scope.zero();

                    // clean pass: pseudo-head self-training, and in phase 2
                    // the λ1 CE of the segmentation head against the cache
                    EncodeCache ecache;
                    FusedPyramid fused =
                        encode(model.encoder, model.fusion, stack_images(clean_images), phase2 ? &ecache : nullptr);
                    PseudoHeadCache pcache;
                    Tensor plogits = pseudo_head_forward(phead, fused.scales[3], img_h, img_w, &pcache);
                    Tensor grad_plogits(plogits.dims);
                    bool any_pseudo_grad = false;
                    for (int bi = 0; bi < b; ++bi) {
                        Tensor one = slice_chw(plogits, bi);
                        PseudoLabelMap self_labels = make_pseudo_labels(one, cfg.theta);
                        Tensor g_one({2, img_h, img_w});
                        const real warm = target_ce_loss(one, self_labels, &g_one);
                        (void)warm;
                        if (self_labels.valid_fraction() > 0.0) any_pseudo_grad = true;
                        real* dst = grad_plogits.data.data() +
                                    static_cast<std::size_t>(bi) * 2 * img_h * img_w;
                        const real bnorm = 1.0 / static_cast<real>(b);
                        for (std::size_t i = 0; i < g_one.data.size(); ++i) dst[i] += g_one.data[i] * bnorm;
                    }
                    if (any_pseudo_grad) pseudo_head_backward(phead, pcache, grad_plogits, nullptr);

                    std::vector<Tensor> grad_scales;
                    bool have_encoder_grads = false;

                    if (phase2) {
                        for (const auto& s : fused.scales) grad_scales.emplace_back(s.dims);
                        HeadCache scache;
                        Tensor slogits = head_forward(shead, fused, img_h, img_w, BnMode::Train, true, &scache);
                        Tensor grad_slogits(slogits.dims);
                        real ce_sum = 0.0;
                        for (int bi = 0; bi < b; ++bi) {
                            const PseudoLabelMap& labels = pseudo_cache[static_cast<std::size_t>(batch_idx[bi])];
                            Tensor one = slice_chw(slogits, bi);
                            Tensor g_one({2, img_h, img_w});
                            ce_sum += target_ce_loss(one, labels, &g_one);
                            real* dst = grad_slogits.data.data() +
                                        static_cast<std::size_t>(bi) * 2 * img_h * img_w;
                            const real scale = cfg.weights.lambda1 / static_cast<real>(b);
                            for (std::size_t i = 0; i < g_one.data.size(); ++i) dst[i] += g_one.data[i] * scale;
                        }
                        head_backward(shead, scache, grad_slogits, &grad_scales);
                        have_encoder_grads = true;
                        tce_sum += ce_sum / b;

                        // augmented pass: consistency between restored
                        // predictions and the cached pseudo labels (Eq. 7)
                        const AugmentRecord rec =
                            draw_augment(img_h, img_w, snap, cfg.augment_prob, cfg.noise_sigma, rng);
                        std::vector<Tensor> aug_images;
                        for (int bi = 0; bi < b; ++bi) {
                            Tensor img = augment_image(clean_images[static_cast<std::size_t>(bi)], rec);
                            if (rec.add_noise) add_noise(img, rec.noise_sigma, rng);
                            aug_images.push_back(std::move(img));
                        }
                        EncodeCache ecache_aug;
                        FusedPyramid fused_aug =
                            encode(model.encoder, model.fusion, stack_images(aug_images), &ecache_aug);
                        const int ah = aug_images[0].dim(0), aw = aug_images[0].dim(1);
                        HeadCache scache_aug;
                        Tensor alogits = head_forward(shead, fused_aug, ah, aw, BnMode::Train, false, &scache_aug);
                        Tensor grad_alogits(alogits.dims);
                        real mse_sum = 0.0;
                        for (int bi = 0; bi < b; ++bi) {
                            const PseudoLabelMap& labels = pseudo_cache[static_cast<std::size_t>(batch_idx[bi])];
                            Tensor one = slice_chw(alogits, bi);
                            Tensor probs = softmax_channel(one);
                            Tensor pos = Tensor::from({ah, aw}, std::vector<real>(probs.data.begin() + ah * aw,
                                                                                  probs.data.end()));
                            Tensor restored = restore_plane(pos, rec);
                            Tensor g_restored(restored.dims);
                            mse_sum += consistency_mse_loss(restored, labels, &g_restored);
                            Tensor g_pos = restore_plane_adjoint(g_restored, rec);
                            Tensor g_probs(probs.dims);
                            std::copy(g_pos.data.begin(), g_pos.data.end(), g_probs.data.begin() + ah * aw);
                            Tensor g_one({2, ah, aw});
                            softmax_channel_backward(probs, g_probs, &g_one);
                            real* dst = grad_alogits.data.data() + static_cast<std::size_t>(bi) * 2 * ah * aw;
                            const real scale = cfg.weights.lambda2 / static_cast<real>(b);
                            for (std::size_t i = 0; i < g_one.data.size(); ++i) dst[i] += g_one.data[i] * scale;
                        }
                        std::vector<Tensor> grad_scales_aug;
                        for (const auto& s : fused_aug.scales) grad_scales_aug.emplace_back(s.dims);
                        head_backward(shead, scache_aug, grad_alogits, &grad_scales_aug);
                        encode_backward(ecache_aug, model.fusion, grad_scales_aug);
                        tmse_sum += mse_sum / b;
                    }

                    if (have_encoder_grads) encode_backward(ecache, model.fusion, grad_scales);
                    step_scope(scope);
                    ++tgt_batches;
                }
            }
            if (phase2 && tgt_batches > 0) {
                log.loss_target_ce = tce_sum / tgt_batches;
                log.loss_target_mse = tmse_sum / tgt_batches;
            }
        }

        const real combined = total_loss(log.loss_source, log.loss_target_ce, log.loss_target_mse, cfg.weights);
        if (!std::isfinite(combined)) throw_numeric("training diverged (NaN loss) at epoch " + std::to_string(epoch));
        result.logs.push_back(log);
        if (on_epoch) on_epoch(log);
        state.next_epoch = epoch + 1;
        rng.save_state(state.rng_state);
    }

    state.pseudo_cache.clear();
    for (std::size_t i = 0; i < pseudo_cache.size(); ++i) {
        if (pseudo_ready[i]) state.pseudo_cache.emplace_back(static_cast<int>(i), pseudo_cache[i]);
    }
    return result;
}

} // namespace nexvitad
