#pragma once

#include <utility>
#include <vector>

#include "nexvitad/backbone.hpp"
#include "nexvitad/tensor.hpp"

namespace nexvitad {

// Shared-subspace projection encoder: per-scale bottleneck adapters on the
// hierarchical features, per-scale projection of the dense features, and
// channel interleaving into the fused pyramid.

struct AdapterParams {
    ParamTensor w_down; // (d, r) with r = d/4
    ParamTensor b_down; // (r)
    ParamTensor w_up;   // (r, d)
    ParamTensor b_up;   // (d)
};

struct ProjectionParams {
    ParamTensor w_proj; // (d_dino, d)
    ParamTensor b_proj; // (d)
};

struct FusionParams {
    std::vector<AdapterParams> adapters;       // one per scale
    std::vector<ProjectionParams> projections; // one per scale

    std::vector<ParamTensor*> trainable();
};

FusionParams init_fusion_params(const BackboneConfig& cfg, std::uint64_t seed);

struct FusedPyramid {
    std::vector<Tensor> scales; // (b, h_n, w_n, 2*d_hiera[n])
};

struct AdapterCache {
    Tensor x;        // adapter input
    Tensor mid_pre;  // x w_down + b_down
    Tensor mid_post; // gelu(mid_pre)
};

struct EncodeCache {
    std::vector<AdapterCache> adapters;
    std::vector<Tensor> dense_resized; // (b, h_n, w_n, d_dino) per scale
};

// Eq-style bottleneck residual: gelu(x w_down + b_down) w_up + b_up + x.
Tensor adapter_forward(const Tensor& x, const AdapterParams& params, AdapterCache* cache);
void adapter_backward(const AdapterCache& cache, AdapterParams& params, const Tensor& grad_out,
                      Tensor* grad_x);

// channel projection of the resized dense features (plain affine)
Tensor project_dense(const Tensor& resized, const ProjectionParams& params);
void project_dense_backward(const Tensor& resized, ProjectionParams& params, const Tensor& grad_out);

// out[..., 2j] = a channel j, out[..., 2j+1] = b channel j
Tensor interleave(const Tensor& a, const Tensor& b);
std::pair<Tensor, Tensor> deinterleave(const Tensor& fused);

struct Encoder {
    BackboneConfig cfg;
    HierarchicalEncoder hiera;
    DenseEncoder dense;

    explicit Encoder(const BackboneConfig& c) : cfg(c), hiera(c), dense(c) {}
};

// frozen-backbone outputs plus the dense features pre-resized to each scale;
// everything here is independent of the trainable parameters
struct BackboneFeatures {
    std::vector<Tensor> pyramid;       // hierarchical maps
    std::vector<Tensor> dense_resized; // (b, h_n, w_n, d_dino) per scale
};

BackboneFeatures backbone_forward(const Encoder& enc, const Tensor& images);
FusedPyramid fuse_features(const BackboneFeatures& feats, const FusionParams& params, EncodeCache* cache);

FusedPyramid encode(const Encoder& enc, const FusionParams& params, const Tensor& images,
                    EncodeCache* cache);
// grad_scales holds dLoss/dF_n; backbone params are frozen so gradient stops
// at the adapter inputs and the resized dense features.
void encode_backward(const EncodeCache& cache, FusionParams& params, const std::vector<Tensor>& grad_scales);

} // namespace nexvitad
