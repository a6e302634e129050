#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "nexvitad/fusion.hpp"
#include "nexvitad/ops.hpp"
#include "nexvitad/rng.hpp"
#include "nexvitad/tensor.hpp"

namespace nexvitad {

// Multi-task hierarchical decoder: per-class segmentation heads plus the
// lightweight pointwise pseudo-label head. Feature maps stay NHWC inside;
// emitted logits are (b,2,H,W).

struct ConvBlockParams {
    ParamTensor kernel; // (3,3,c_in,c_out); batchnorm follows, so no conv bias
    ParamTensor gamma;
    ParamTensor beta;
    Tensor running_mean;
    Tensor running_var;
};

struct DecodeStageParams {
    ParamTensor up_kernel; // (2,2,out_ch,in_ch), stride-2 transposed conv
    ParamTensor up_bias;   // (out_ch)
    ConvBlockParams block; // conv(out_ch + skip_ch -> out_ch) + bn + relu
};

struct DecoderHead {
    std::vector<DecodeStageParams> stages; // coarsest -> finest
    ConvBlockParams final_block;
    ParamTensor out_kernel; // (1,1,c,2)
    ParamTensor out_bias;   // (2)

    std::vector<ParamTensor*> trainable();
    std::vector<std::pair<std::string, Tensor*>> buffers(const std::string& prefix);
};

struct PseudoLabelHead {
    ParamTensor w1, b1; // in -> 64
    ParamTensor w2, b2; // 64 -> 32
    ParamTensor w3, b3; // 32 -> 2

    std::vector<ParamTensor*> trainable();
};

struct ConvBlockCache {
    Tensor x;        // block input
    Tensor pre_relu; // batchnorm output
    BatchNormCache bn;
};

struct DecodeStageCache {
    Tensor coarse;
    Tensor up;
    Tensor concat;
    ConvBlockCache block;
};

struct HeadCache {
    std::vector<DecodeStageCache> stages;
    ConvBlockCache final_block;
    Tensor final_out;   // (b,h1,w1,c)
    Tensor logits_nhwc; // (b,h1,w1,2) before the channel transpose + upsample
};

struct PseudoHeadCache {
    Tensor x;
    Tensor a1_pre, a1;
    Tensor a2_pre, a2;
    Tensor logits_nhwc; // (b,h4,w4,2)
};

DecoderHead make_decoder_head(const std::vector<int>& fused_channels, const std::vector<int>& stage_channels,
                              const std::string& name_prefix, Rng& rng);
PseudoLabelHead make_pseudo_head(int in_channels, const std::string& name_prefix, Rng& rng);

// One decode step: Up(coarse) -> concat skip -> conv + bn + relu.
Tensor decode_stage(const Tensor& coarse, const Tensor& skip, DecodeStageParams& stage, BnMode mode,
                    bool update_running, DecodeStageCache* cache);
void decode_stage_backward(DecodeStageParams& stage, const DecodeStageCache& cache, const Tensor& grad_out,
                           Tensor* grad_coarse, Tensor* grad_skip);

// Full head over the 4-scale pyramid; logits are upsampled to (out_h, out_w).
Tensor head_forward(DecoderHead& head, const FusedPyramid& pyr, int out_h, int out_w, BnMode mode,
                    bool update_running, HeadCache* cache);
void head_backward(DecoderHead& head, const HeadCache& cache, const Tensor& grad_logits,
                   std::vector<Tensor>* grad_scales);

// Pointwise pseudo-label head on the coarsest fused scale.
Tensor pseudo_head_forward(const PseudoLabelHead& head, const Tensor& f4, int out_h, int out_w,
                           PseudoHeadCache* cache);
void pseudo_head_backward(PseudoLabelHead& head, const PseudoHeadCache& cache, const Tensor& grad_logits,
                          Tensor* grad_f4);

inline constexpr real kIgnoreLabel = -1.0;

struct PseudoLabelMap {
    Tensor labels;     // (H,W) in {0,1,kIgnoreLabel}
    Tensor confidence; // (H,W) max softmax probability
    real valid_fraction() const;
};

// argmax label where max softmax prob strictly exceeds theta, else IGNORE
PseudoLabelMap make_pseudo_labels(const Tensor& logits_chw, real theta);

// channel-first/channel-last helpers for (b,h,w,c) <-> (b,c,h,w)
Tensor nhwc_to_nchw(const Tensor& x);
Tensor nchw_to_nhwc(const Tensor& x);

struct HeadBank {
    std::vector<DecoderHead> source_heads;
    std::vector<DecoderHead> target_seg_heads;
    std::vector<PseudoLabelHead> target_pseudo_heads;
    std::unordered_map<int, int> source_route; // class_id -> index into source_heads
    std::unordered_map<int, int> target_route; // class_id -> index into target vectors
    bool shared_source_head = false;

    int head_count() const {
        return static_cast<int>(source_heads.size() + target_seg_heads.size() + target_pseudo_heads.size());
    }
    std::vector<ParamTensor*> trainable();
};

HeadBank make_head_bank(const std::vector<int>& source_classes, const std::vector<int>& target_classes,
                        const std::vector<int>& fused_channels, const std::vector<int>& stage_channels,
                        bool shared_source_head, std::uint64_t seed);

} // namespace nexvitad
