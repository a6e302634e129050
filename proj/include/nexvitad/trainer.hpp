#pragma once

#include <functional>
#include <string>
#include <vector>

#include "nexvitad/datagen.hpp"
#include "nexvitad/model.hpp"

namespace nexvitad {

struct LossWeights {
    real lambda1 = 1.0; // target CE weight
    real lambda2 = 0.5; // consistency MSE weight
};

struct TrainConfig {
    int epochs = 50;
    real base_lr = 1e-4;
    int warmup_epochs = 5;
    int batch_size = 8;
    real theta = 0.7;
    int pseudo_refresh_every = 5;
    int phase1_epochs = 10;
    bool mtl_enabled = true;
    bool pseudo_enabled = true;
    real augment_prob = 0.5;
    real noise_sigma = 0.02;
    LossWeights weights;
    std::uint64_t seed = 0;

    void validate() const;
};

struct EpochLog {
    int epoch = 0;
    real lr = 0;
    real loss_source = 0;
    real loss_target_ce = 0;
    real loss_target_mse = 0;
    real valid_pixel_frac = 0;
};

// ---- losses (Eq. 8/9 family). grad outputs are accumulated when non-null ----

// mean cross-entropy of per-pixel binary segmentation over a batch;
// logits (b,2,H,W), masks one (H,W) binary tensor per batch element
real source_ce_loss(const Tensor& logits, const std::vector<const Tensor*>& masks, Tensor* grad_logits);

// CE against pseudo labels, averaged over valid pixels only; (2,H,W) logits.
// Zero by contract when no pixel is valid.
real target_ce_loss(const Tensor& logits_chw, const PseudoLabelMap& pseudo, Tensor* grad_logits);

// mean squared difference between the positive-class probability map and the
// pseudo labels over the valid set
real consistency_mse_loss(const Tensor& prob_pos, const PseudoLabelMap& pseudo, Tensor* grad_prob);

real total_loss(real loss_source, real loss_target_ce, real loss_target_mse, const LossWeights& w);

// ---- augmentation with exact restore ----

enum class AugmentOp { None, HFlip, VFlip, Rot90, Rot180, Rot270, Scale };

struct AugmentRecord {
    AugmentOp op = AugmentOp::None;
    int orig_h = 0, orig_w = 0;
    int scaled_h = 0, scaled_w = 0; // Scale only
    bool add_noise = false;
    real noise_sigma = 0.0;
};

// geometry for (h,w,3) images; noise (when drawn) is applied by the trainer
Tensor augment_image(const Tensor& image, const AugmentRecord& rec);
// geometry for (h,w) masks / score maps
Tensor augment_plane(const Tensor& plane, const AugmentRecord& rec);
// exact inverse geometry back to (orig_h, orig_w)
Tensor restore_plane(const Tensor& plane, const AugmentRecord& rec);
// adjoint of restore_plane for backprop through the restored map
Tensor restore_plane_adjoint(const Tensor& grad_restored, const AugmentRecord& rec);

// trainer-side draw; Scale snaps to stride-compatible extents
AugmentRecord draw_augment(int h, int w, int snap_multiple, real augment_prob, real noise_sigma, Rng& rng);

// ---- training loop ----

struct TrainResult {
    std::vector<EpochLog> logs;
};

// Two-phase loop: source supervision (+ pseudo-head self-training) first,
// then the joint objective with pseudo labels refreshed on a fixed cadence.
// When `state` carries next_epoch > 0 the run resumes from that epoch.
TrainResult train(Model& model, const DatasetSplit& data, const TrainConfig& cfg, TrainerState& state,
                  const std::function<void(const EpochLog&)>& on_epoch = nullptr);

TrainerState init_trainer_state(Model& model, const TrainConfig& cfg);

} // namespace nexvitad
